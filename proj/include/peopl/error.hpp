#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace peopl {

// Base for every error raised by the library. The CLI maps the subclasses
// onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input: bad shapes, invalid distributions, schema violations.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class BudgetExceeded : public Error {
 public:
  BudgetExceeded(std::uint64_t cost, std::uint64_t budget)
      : Error("enumeration budget exceeded: cost " + std::to_string(cost) +
              " > budget " + std::to_string(budget)),
        cost_(cost),
        budget_(budget) {}

  std::uint64_t cost() const { return cost_; }
  std::uint64_t budget() const { return budget_; }

 private:
  std::uint64_t cost_;
  std::uint64_t budget_;
};

// Numerical divergence: NaN losses, cross-entropy against a zero of Q.
class Divergence : public Error {
 public:
  using Error::Error;
};

// An observation that no encoder of the family can produce.
class ImpossibleObservation : public Error {
 public:
  using Error::Error;
};

}  // namespace peopl
