#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "peopl/universe.hpp"

namespace peopl {

// An injective encoder written as a table over the ordered universe:
// mapping()[i] = T(x_i).
class TableEncoder {
 public:
  TableEncoder() = default;
  // Throws InvalidArgument if two entries coincide.
  explicit TableEncoder(std::vector<Symbol> mapping);

  std::size_t size() const { return mapping_.size(); }
  Symbol operator()(std::size_t index) const { return mapping_[index]; }
  const std::vector<Symbol>& mapping() const { return mapping_; }

  friend bool operator==(const TableEncoder&, const TableEncoder&) = default;
  friend auto operator<=>(const TableEncoder&, const TableEncoder&) = default;

 private:
  std::vector<Symbol> mapping_;
};

TableEncoder identity_encoder(const Universe& universe);

// A key distribution Pr[T_A = T] given by its support F and weights.
// domain() is the ordered list of sample identifiers the tables are indexed
// by; composing requires the inner codomain to lie inside the outer domain.
class EncoderFamily {
 public:
  EncoderFamily() = default;

  std::size_t size() const { return encoders_.size(); }
  const std::vector<SampleId>& domain() const { return domain_; }
  const std::vector<TableEncoder>& encoders() const { return encoders_; }
  const TableEncoder& encoder(std::size_t i) const { return encoders_[i]; }
  const std::vector<double>& weights() const { return weights_; }
  double weight(std::size_t i) const { return weights_[i]; }

  friend bool operator==(const EncoderFamily&, const EncoderFamily&) = default;

 private:
  friend EncoderFamily make_family(std::vector<SampleId>,
                                   std::vector<TableEncoder>,
                                   std::vector<double>);
  std::vector<SampleId> domain_;
  std::vector<TableEncoder> encoders_;
  std::vector<double> weights_;
};

inline constexpr double kWeightTolerance = 1e-12;

// Validates: every table has |domain| entries, weights strictly positive and
// summing to one within kWeightTolerance, tables pairwise distinct.
EncoderFamily make_family(std::vector<SampleId> domain,
                          std::vector<TableEncoder> encoders,
                          std::vector<double> weights);
EncoderFamily make_family(const Universe& universe,
                          std::vector<TableEncoder> encoders,
                          std::vector<double> weights);
EncoderFamily uniform_family(const Universe& universe,
                             std::vector<TableEncoder> encoders);

std::size_t sample_encoder_index(const EncoderFamily& family,
                                 std::uint64_t seed);
TableEncoder sample_encoder(const EncoderFamily& family, std::uint64_t seed);

// F'' = F' o F with Pr[T''] = sum over T' o T = T'' of Pr[T'] Pr[T].
// Composites are listed outer-major in order of first appearance.
EncoderFamily compose_families(const EncoderFamily& inner,
                               const EncoderFamily& outer);

// F u extra, with new_weights covering the union (existing encoders first).
EncoderFamily grow_family(const EncoderFamily& family,
                          std::vector<TableEncoder> extra,
                          std::vector<double> new_weights);

enum class PermutationKind { kAll, kLabelPreserving };

inline constexpr std::size_t kMaxPermutationUniverse = 8;

// Uniform family over all permutations of X (Z = X), or over the permutations
// that map every label class onto itself. Lexicographic table order.
EncoderFamily permutation_family(const Universe& universe, PermutationKind kind);

}  // namespace peopl
