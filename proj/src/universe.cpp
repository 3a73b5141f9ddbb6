#include "peopl/universe.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "peopl/error.hpp"
#include "peopl/families.hpp"
#include "peopl/random.hpp"

namespace peopl {

namespace {

LabelId lookup_label(const std::vector<std::string>& set,
                     const std::string& label, SampleId id) {
  auto it = std::find(set.begin(), set.end(), label);
  if (label.empty() || it == set.end()) {
    throw InvalidArgument("sample " + std::to_string(id) +
                          ": label '" + label + "' is not in the declared set");
  }
  return static_cast<LabelId>(it - set.begin());
}

std::vector<std::size_t> checked_indices(const Universe& universe,
                                         std::vector<std::size_t> indices) {
  std::sort(indices.begin(), indices.end());
  if (std::adjacent_find(indices.begin(), indices.end()) != indices.end()) {
    throw InvalidArgument("dataset indices must be distinct");
  }
  if (!indices.empty() && indices.back() >= universe.size()) {
    throw InvalidArgument("dataset index " + std::to_string(indices.back()) +
                          " outside universe of size " +
                          std::to_string(universe.size()));
  }
  return indices;
}

}  // namespace

std::optional<std::size_t> Universe::index_of(SampleId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> Universe::label_class(LabelId label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == label) out.push_back(i);
  }
  return out;
}

Universe build_universe(std::vector<SampleSpec> samples,
                        std::vector<std::string> label_set,
                        std::vector<std::string> sensitive_set) {
  if (label_set.empty()) throw InvalidArgument("label set must not be empty");
  if (std::set<std::string>(label_set.begin(), label_set.end()).size() !=
      label_set.size()) {
    throw InvalidArgument("label set has duplicate entries");
  }
  Universe u;
  const bool any_sensitive =
      std::any_of(samples.begin(), samples.end(),
                  [](const SampleSpec& s) { return s.sensitive.has_value(); });
  for (SampleSpec& s : samples) {
    if (!u.index_.emplace(s.id, u.ids_.size()).second) {
      throw InvalidArgument("duplicate sample identifier " +
                            std::to_string(s.id));
    }
    u.ids_.push_back(s.id);
    u.labels_.push_back(lookup_label(label_set, s.label, s.id));
    if (any_sensitive) {
      if (!s.sensitive) {
        throw InvalidArgument("sample " + std::to_string(s.id) +
                              " is missing its sensitive label");
      }
      u.sensitive_.push_back(lookup_label(sensitive_set, *s.sensitive, s.id));
    }
    u.payloads_.push_back(std::move(s.payload));
  }
  u.label_set_ = std::move(label_set);
  if (any_sensitive) u.sensitive_set_ = std::move(sensitive_set);
  return u;
}

Universe scalar_universe(const std::vector<SampleId>& ids,
                         const std::vector<std::string>& labels) {
  if (ids.size() != labels.size()) {
    throw InvalidArgument("scalar_universe: id/label count mismatch");
  }
  std::vector<std::string> label_set;
  std::vector<SampleSpec> samples;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (std::find(label_set.begin(), label_set.end(), labels[i]) ==
        label_set.end()) {
      label_set.push_back(labels[i]);
    }
    samples.push_back({ids[i], std::vector<double>{static_cast<double>(ids[i])},
                       labels[i], std::nullopt});
  }
  return build_universe(std::move(samples), std::move(label_set));
}

OwnerDataset::OwnerDataset(const Universe& universe,
                           std::vector<std::size_t> indices, int owner_id)
    : indices_(checked_indices(universe, std::move(indices))),
      owner_id_(owner_id) {}

PublicDataset::PublicDataset(const Universe& universe,
                             std::vector<std::size_t> indices, PublicRole role)
    : indices_(checked_indices(universe, std::move(indices))), role_(role) {}

void require_disjoint(const OwnerDataset& owner, const PublicDataset& pub) {
  std::vector<std::size_t> common;
  std::set_intersection(owner.indices().begin(), owner.indices().end(),
                        pub.indices().begin(), pub.indices().end(),
                        std::back_inserter(common));
  if (!common.empty()) {
    throw InvalidArgument("owner dataset and public dataset share " +
                          std::to_string(common.size()) + " sample(s)");
  }
}

OwnerDataset sample_owner_dataset(const Universe& universe, std::size_t n,
                                  std::uint64_t seed, int owner_id) {
  if (n > universe.size()) {
    throw InvalidArgument("cannot sample " + std::to_string(n) +
                          " samples from a universe of size " +
                          std::to_string(universe.size()));
  }
  std::vector<std::size_t> all(universe.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first n slots are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(all.size() - i);
    std::swap(all[i], all[j]);
  }
  all.resize(n);
  return OwnerDataset(universe, std::move(all), owner_id);
}

Observation::Observation(std::vector<Pair> pairs) : pairs_(std::move(pairs)) {
  std::sort(pairs_.begin(), pairs_.end());
}

Observation make_observation(const TableEncoder& encoder,
                             const std::vector<std::size_t>& indices,
                             const std::vector<LabelId>& labeling) {
  std::vector<Observation::Pair> pairs;
  pairs.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= encoder.size() || i >= labeling.size()) {
      throw InvalidArgument("encoder is undefined on sample index " +
                            std::to_string(i));
    }
    pairs.emplace_back(encoder(i), labeling[i]);
  }
  return Observation(std::move(pairs));
}

Observation make_observation(const TableEncoder& encoder,
                             const OwnerDataset& dataset,
                             const Universe& universe) {
  return make_observation(encoder, dataset.indices(), universe.labels());
}

}  // namespace peopl
