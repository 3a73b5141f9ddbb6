#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace peopl {

using SampleId = std::int64_t;
// Encoded value of a table encoder. For permutation families Z = X and the
// symbols are sample identifiers.
using Symbol = std::int64_t;
using LabelId = int;

// Feature vector (tabular / image) or token sequence (text).
using Payload = std::variant<std::vector<double>, std::vector<std::int64_t>>;

struct SampleSpec {
  SampleId id = 0;
  Payload payload;
  std::string label;
  std::optional<std::string> sensitive;
};

// A finite sample space X with its labeling L : X -> Y and optional sensitive
// labeling S : X -> Y~. The sample order is the total order used to write
// encoders as tables.
class Universe {
 public:
  Universe() = default;

  std::size_t size() const { return ids_.size(); }
  SampleId id(std::size_t index) const { return ids_[index]; }
  const std::vector<SampleId>& ids() const { return ids_; }
  std::optional<std::size_t> index_of(SampleId id) const;

  const Payload& payload(std::size_t index) const { return payloads_[index]; }
  LabelId label(std::size_t index) const { return labels_[index]; }
  const std::vector<LabelId>& labels() const { return labels_; }
  const std::vector<std::string>& label_set() const { return label_set_; }

  bool has_sensitive() const { return !sensitive_.empty(); }
  LabelId sensitive(std::size_t index) const { return sensitive_[index]; }
  const std::vector<LabelId>& sensitive_labels() const { return sensitive_; }
  const std::vector<std::string>& sensitive_set() const { return sensitive_set_; }

  // Indices of samples with the given label, in sample order.
  std::vector<std::size_t> label_class(LabelId label) const;

 private:
  friend Universe build_universe(std::vector<SampleSpec>,
                                 std::vector<std::string>,
                                 std::vector<std::string>);

  std::vector<SampleId> ids_;
  std::vector<Payload> payloads_;
  std::vector<LabelId> labels_;
  std::vector<LabelId> sensitive_;
  std::vector<std::string> label_set_;
  std::vector<std::string> sensitive_set_;
  std::map<SampleId, std::size_t> index_;
};

// Validates and builds a universe. Labels must come from label_set; the
// sensitive labeling is either given for every sample or for none.
// Throws InvalidArgument on a missing/undeclared label or a duplicate id.
Universe build_universe(std::vector<SampleSpec> samples,
                        std::vector<std::string> label_set,
                        std::vector<std::string> sensitive_set = {});

// Scalar universe {(id_i, label_i)} with payload = {id_i}. Label set is the
// labels in order of first appearance.
Universe scalar_universe(const std::vector<SampleId>& ids,
                         const std::vector<std::string>& labels);

class OwnerDataset {
 public:
  OwnerDataset() = default;
  // indices must be distinct and < universe.size().
  OwnerDataset(const Universe& universe, std::vector<std::size_t> indices,
               int owner_id = 0);

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  int owner_id() const { return owner_id_; }

 private:
  std::vector<std::size_t> indices_;  // sorted
  int owner_id_ = 0;
};

enum class PublicRole { kPublic, kHeldOut };

class PublicDataset {
 public:
  PublicDataset() = default;
  PublicDataset(const Universe& universe, std::vector<std::size_t> indices,
                PublicRole role = PublicRole::kPublic);

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  PublicRole role() const { return role_; }

 private:
  std::vector<std::size_t> indices_;  // sorted
  PublicRole role_ = PublicRole::kPublic;
};

// Throws InvalidArgument when the owner's samples intersect the public set.
void require_disjoint(const OwnerDataset& owner, const PublicDataset& pub);

// Uniformly random size-n subset of the universe; every one of the C(|X|, n)
// subsets is equally likely. Deterministic given the seed.
OwnerDataset sample_owner_dataset(const Universe& universe, std::size_t n,
                                  std::uint64_t seed, int owner_id = 0);

// Unordered multiset {(T(x), L(x))}. Stored canonically sorted, so equality
// and ordering are independent of the order pairs were supplied in.
class Observation {
 public:
  using Pair = std::pair<Symbol, LabelId>;

  Observation() = default;
  explicit Observation(std::vector<Pair> pairs);

  const std::vector<Pair>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  friend bool operator==(const Observation&, const Observation&) = default;
  friend auto operator<=>(const Observation&, const Observation&) = default;

 private:
  std::vector<Pair> pairs_;
};

class TableEncoder;

// O_T(X_A) = {(T(x), L(x))}. Throws InvalidArgument when the encoder table
// does not cover a sample of the dataset.
Observation make_observation(const TableEncoder& encoder,
                             const OwnerDataset& dataset,
                             const Universe& universe);

// Same, with an explicit labeling (used when L is random).
Observation make_observation(const TableEncoder& encoder,
                             const std::vector<std::size_t>& indices,
                             const std::vector<LabelId>& labeling);

}  // namespace peopl
