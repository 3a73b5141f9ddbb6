#pragma once

// Central finite-difference gradient checker shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "peopl/tensor.hpp"

namespace peopl::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;  // worst input
};

// Relative error per input is |analytic - numeric|_2 / max(|analytic|_2,
// |numeric|_2, 1e-8).
inline GradCheckResult check_gradients(const ScalarFn& fn,
                                       const std::vector<Tensor>& inputs,
                                       double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  Var out = fn(tape, vars);
  tape.backward(out);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        shifted[k][i] += delta;
        Tape t;
        std::vector<Var> v;
        for (const Tensor& s : shifted) v.push_back(t.leaf(s, false));
        return fn(t, v).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    result.max_relative_error =
        std::max(result.max_relative_error, std::sqrt(diff2) / denom);
  }
  return result;
}

}  // namespace peopl::testing
