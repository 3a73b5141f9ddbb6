#include "peopl/families.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {

TableEncoder::TableEncoder(std::vector<Symbol> mapping)
    : mapping_(std::move(mapping)) {
  std::vector<Symbol> sorted = mapping_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("encoder table is not injective");
  }
}

TableEncoder identity_encoder(const Universe& universe) {
  return TableEncoder(universe.ids());
}

EncoderFamily make_family(std::vector<SampleId> domain,
                          std::vector<TableEncoder> encoders,
                          std::vector<double> weights) {
  if (encoders.empty()) throw InvalidArgument("family must not be empty");
  if (encoders.size() != weights.size()) {
    throw InvalidArgument("family has " + std::to_string(encoders.size()) +
                          " encoders but " + std::to_string(weights.size()) +
                          " weights");
  }
  for (const TableEncoder& t : encoders) {
    if (t.size() != domain.size()) {
      throw InvalidArgument("encoder table length " + std::to_string(t.size()) +
                            " does not match domain size " +
                            std::to_string(domain.size()));
    }
  }
  long double total = 0.0L;
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw InvalidArgument("family weights must be strictly positive");
    }
    total += w;
  }
  if (std::fabs(static_cast<double>(total) - 1.0) > kWeightTolerance) {
    throw InvalidArgument("family weights sum to " +
                          std::to_string(static_cast<double>(total)) +
                          ", not 1");
  }
  std::set<TableEncoder> seen(encoders.begin(), encoders.end());
  if (seen.size() != encoders.size()) {
    throw InvalidArgument("family contains a duplicate encoder table");
  }
  EncoderFamily f;
  f.domain_ = std::move(domain);
  f.encoders_ = std::move(encoders);
  f.weights_ = std::move(weights);
  return f;
}

EncoderFamily make_family(const Universe& universe,
                          std::vector<TableEncoder> encoders,
                          std::vector<double> weights) {
  return make_family(universe.ids(), std::move(encoders), std::move(weights));
}

EncoderFamily uniform_family(const Universe& universe,
                             std::vector<TableEncoder> encoders) {
  std::vector<double> weights(encoders.size(),
                              1.0 / static_cast<double>(encoders.size()));
  return make_family(universe, std::move(encoders), std::move(weights));
}

std::size_t sample_encoder_index(const EncoderFamily& family,
                                 std::uint64_t seed) {
  Rng rng(seed);
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < family.size(); ++i) {
    cumulative += family.weight(i);
    if (u < cumulative) return i;
  }
  return family.size() - 1;
}

TableEncoder sample_encoder(const EncoderFamily& family, std::uint64_t seed) {
  return family.encoder(sample_encoder_index(family, seed));
}

EncoderFamily compose_families(const EncoderFamily& inner,
                               const EncoderFamily& outer) {
  std::map<Symbol, std::size_t> outer_index;
  for (std::size_t i = 0; i < outer.domain().size(); ++i) {
    outer_index.emplace(outer.domain()[i], i);
  }
  std::vector<TableEncoder> composites;
  std::vector<long double> mass;
  std::map<std::vector<Symbol>, std::size_t> slot;
  for (std::size_t o = 0; o < outer.size(); ++o) {
    const TableEncoder& t_outer = outer.encoder(o);
    for (std::size_t i = 0; i < inner.size(); ++i) {
      const TableEncoder& t_inner = inner.encoder(i);
      std::vector<Symbol> table(t_inner.size());
      for (std::size_t x = 0; x < t_inner.size(); ++x) {
        auto it = outer_index.find(t_inner(x));
        if (it == outer_index.end()) {
          throw InvalidArgument("inner codomain symbol " +
                                std::to_string(t_inner(x)) +
                                " is outside the outer domain");
        }
        table[x] = t_outer(it->second);
      }
      const long double w = static_cast<long double>(outer.weight(o)) *
                            static_cast<long double>(inner.weight(i));
      auto [it, inserted] = slot.emplace(table, composites.size());
      if (inserted) {
        composites.emplace_back(std::move(table));
        mass.push_back(w);
      } else {
        mass[it->second] += w;
      }
    }
  }
  std::vector<double> weights(mass.begin(), mass.end());
  return make_family(inner.domain(), std::move(composites), std::move(weights));
}

EncoderFamily grow_family(const EncoderFamily& family,
                          std::vector<TableEncoder> extra,
                          std::vector<double> new_weights) {
  std::vector<TableEncoder> all = family.encoders();
  all.insert(all.end(), std::make_move_iterator(extra.begin()),
             std::make_move_iterator(extra.end()));
  return make_family(family.domain(), std::move(all), std::move(new_weights));
}

EncoderFamily permutation_family(const Universe& universe,
                                 PermutationKind kind) {
  const std::size_t n = universe.size();
  if (n == 0) throw InvalidArgument("permutation family of an empty universe");
  if (n > kMaxPermutationUniverse) {
    throw InvalidArgument("permutation family limited to |X| <= " +
                          std::to_string(kMaxPermutationUniverse) + ", got " +
                          std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<TableEncoder> encoders;
  do {
    bool keep = true;
    if (kind == PermutationKind::kLabelPreserving) {
      for (std::size_t i = 0; i < n && keep; ++i) {
        keep = universe.label(perm[i]) == universe.label(i);
      }
    }
    if (keep) {
      std::vector<Symbol> table(n);
      for (std::size_t i = 0; i < n; ++i) table[i] = universe.id(perm[i]);
      encoders.emplace_back(std::move(table));
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return uniform_family(universe, std::move(encoders));
}

}  // namespace peopl
