#include "peopl/scores.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <utility>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {

namespace {

using Real = long double;

Real log2l_safe(Real p) { return p > 0 ? std::log2(p) : 0.0L; }

// Pairwise reduction; the summation tree depends only on the input length.
Real tree_sum(const std::vector<Real>& values, std::size_t lo, std::size_t hi) {
  if (hi - lo == 0) return 0.0L;
  if (hi - lo == 1) return values[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  return tree_sum(values, lo, mid) + tree_sum(values, mid, hi);
}

Real tree_sum(const std::vector<Real>& values) {
  return tree_sum(values, 0, values.size());
}

template <typename Map>
Real entropy_of_masses(const Map& masses) {
  std::vector<Real> terms;
  terms.reserve(masses.size());
  for (const auto& [key, m] : masses) terms.push_back(-m * log2l_safe(m));
  return tree_sum(terms);
}

std::uint64_t saturating_mul(std::uint64_t a, std::uint64_t b) {
  if (a == 0 || b == 0) return 0;
  if (a > std::numeric_limits<std::uint64_t>::max() / b) {
    return std::numeric_limits<std::uint64_t>::max();
  }
  return a * b;
}

void check_budget(std::uint64_t cost, const ScoreOptions& options) {
  if (cost > options.budget) throw BudgetExceeded(cost, options.budget);
}

void check_domain(const EncoderFamily& family, const Universe& universe) {
  if (family.domain() != universe.ids()) {
    throw InvalidArgument("family domain does not match the universe order");
  }
}

void check_n(std::size_t n, const Universe& universe) {
  if (n > universe.size()) {
    throw InvalidArgument("owner dataset size " + std::to_string(n) +
                          " exceeds |X| = " + std::to_string(universe.size()));
  }
}

// Calls fn(indices) for every size-k subset of {0..n-1} in lexicographic order.
template <typename Fn>
void for_each_subset(std::size_t n, std::size_t k, Fn&& fn) {
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  while (true) {
    fn(static_cast<const std::vector<std::size_t>&>(idx));
    if (k == 0) return;
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + (i - 1)) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

// Runs fn(begin, end) on contiguous chunks of [0, count).
template <typename Fn>
void parallel_chunks(std::size_t count, int workers, Fn&& fn) {
  const std::size_t w = std::max<std::size_t>(
      1, std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)),
                               count));
  if (w <= 1) {
    fn(std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> threads;
  const std::size_t step = (count + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t begin = t * step;
    const std::size_t end = std::min(count, begin + step);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (std::thread& th : threads) th.join();
}

// Inverse tables: sorted (symbol, sample index) per encoder.
using InverseTable = std::vector<std::pair<Symbol, std::size_t>>;

std::vector<InverseTable> inverse_tables(const EncoderFamily& family) {
  std::vector<InverseTable> out;
  out.reserve(family.size());
  for (const TableEncoder& t : family.encoders()) {
    InverseTable inv;
    inv.reserve(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) inv.emplace_back(t(i), i);
    std::sort(inv.begin(), inv.end());
    out.push_back(std::move(inv));
  }
  return out;
}

bool reproduces(const InverseTable& inverse, const Observation& observation,
                const std::vector<LabelId>& labels) {
  // Encoded values inside one observation are distinct (T is injective), so
  // pairwise preimage checks give a subset of exactly |O| samples.
  for (const auto& [symbol, label] : observation.pairs()) {
    auto it = std::lower_bound(
        inverse.begin(), inverse.end(), symbol,
        [](const std::pair<Symbol, std::size_t>& e, Symbol s) {
          return e.first < s;
        });
    if (it == inverse.end() || it->first != symbol) return false;
    if (labels[it->second] != label) return false;
  }
  for (std::size_t i = 1; i < observation.size(); ++i) {
    if (observation.pairs()[i].first == observation.pairs()[i - 1].first) {
      return false;
    }
  }
  return true;
}

std::vector<std::size_t> pos_set_impl(const EncoderFamily& family,
                                      const std::vector<InverseTable>& inverse,
                                      const Observation& observation,
                                      const std::vector<LabelId>& labels) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < family.size(); ++t) {
    if (reproduces(inverse[t], observation, labels)) out.push_back(t);
  }
  return out;
}

Posterior posterior_from_pos(const EncoderFamily& family,
                             const std::vector<std::size_t>& pos) {
  if (pos.empty()) {
    throw ImpossibleObservation(
        "observation is not producible by any encoder of the family");
  }
  Real mass = 0.0L;
  for (std::size_t t : pos) mass += family.weight(t);
  Posterior p;
  p.probs.assign(family.size(), 0.0);
  for (std::size_t t : pos) {
    p.probs[t] = static_cast<double>(family.weight(t) / mass);
  }
  return p;
}

// Every distinct observation O_T(X_A) over T in F and size-n X_A, sorted.
std::vector<Observation> reachable_observations(const EncoderFamily& family,
                                                const Universe& universe,
                                                std::size_t n, int workers) {
  std::vector<std::vector<Observation>> partial(
      static_cast<std::size_t>(std::max(workers, 1)));
  std::vector<std::vector<Observation>> per_encoder(family.size());
  parallel_chunks(family.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t t = b; t < e; ++t) {
      std::vector<Observation>& out = per_encoder[t];
      for_each_subset(universe.size(), n,
                      [&](const std::vector<std::size_t>& subset) {
                        out.push_back(make_observation(
                            family.encoder(t), subset, universe.labels()));
                      });
      std::sort(out.begin(), out.end());
    }
  });
  std::vector<Observation> all;
  for (auto& v : per_encoder) {
    all.insert(all.end(), std::make_move_iterator(v.begin()),
               std::make_move_iterator(v.end()));
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

struct ObservationWork {
  Real probability = 0.0L;
  Posterior posterior;
};

// Pr[O] and P(.|O) for every reachable observation, via the Pos set.
std::vector<ObservationWork> posterior_table(
    const EncoderFamily& family, const Universe& universe,
    const std::vector<Observation>& observations, std::size_t n, int workers) {
  const std::vector<InverseTable> inverse = inverse_tables(family);
  const Real subsets = static_cast<Real>(binomial(universe.size(), n));
  std::vector<ObservationWork> work(observations.size());
  parallel_chunks(observations.size(), workers,
                  [&](std::size_t b, std::size_t e) {
                    for (std::size_t k = b; k < e; ++k) {
                      const std::vector<std::size_t> pos = pos_set_impl(
                          family, inverse, observations[k], universe.labels());
                      Real mass = 0.0L;
                      for (std::size_t t : pos) mass += family.weight(t);
                      work[k].probability = mass / subsets;
                      work[k].posterior = posterior_from_pos(family, pos);
                    }
                  });
  return work;
}

void validate_mismatched(const MismatchedDistribution& q, std::size_t size) {
  if (q.probs.size() != size) {
    throw InvalidArgument("mismatched distribution has " +
                          std::to_string(q.probs.size()) +
                          " entries for a family of " + std::to_string(size));
  }
  Real total = 0.0L;
  for (double v : q.probs) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw InvalidArgument("mismatched distribution has a negative entry");
    }
    total += v;
  }
  if (std::fabs(static_cast<double>(total) - 1.0) > 1e-9) {
    throw InvalidArgument("mismatched distribution does not sum to 1");
  }
}

Real cross_entropy(const Posterior& p, const MismatchedDistribution& q) {
  Real ce = 0.0L;
  for (std::size_t t = 0; t < p.probs.size(); ++t) {
    if (p.probs[t] <= 0.0) continue;
    if (q.probs[t] <= 0.0) {
      throw Divergence("cross-entropy diverges: Q(T) = 0 where P(T) > 0 "
                       "(encoder " + std::to_string(t) + ")");
    }
    ce -= static_cast<Real>(p.probs[t]) * std::log2(static_cast<Real>(q.probs[t]));
  }
  return ce;
}

Real kl_divergence(const Posterior& p, const MismatchedDistribution& q) {
  Real kl = 0.0L;
  for (std::size_t t = 0; t < p.probs.size(); ++t) {
    if (p.probs[t] <= 0.0) continue;
    if (q.probs[t] <= 0.0) {
      throw Divergence("KL divergence is infinite: Q(T) = 0 where P(T) > 0");
    }
    kl += static_cast<Real>(p.probs[t]) *
          std::log2(static_cast<Real>(p.probs[t]) /
                    static_cast<Real>(q.probs[t]));
  }
  return kl;
}

Real labeling_entropy(const LabelingPrior& prior, std::size_t universe_size) {
  if (prior.labelings.empty() ||
      prior.labelings.size() != prior.weights.size()) {
    throw InvalidArgument("labeling prior needs one weight per labeling");
  }
  std::map<std::vector<LabelId>, Real> mass;
  Real total = 0.0L;
  for (std::size_t i = 0; i < prior.labelings.size(); ++i) {
    if (prior.labelings[i].size() != universe_size) {
      throw InvalidArgument("labeling is not total over the universe");
    }
    if (!(prior.weights[i] > 0.0)) {
      throw InvalidArgument("labeling weights must be positive");
    }
    mass[prior.labelings[i]] += prior.weights[i];
    total += prior.weights[i];
  }
  if (std::fabs(static_cast<double>(total) - 1.0) > kWeightTolerance) {
    throw InvalidArgument("labeling prior weights do not sum to 1");
  }
  return entropy_of_masses(mass);
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Conditional entropy H[A | B] from the joint masses of (A, B) and of B.
template <typename JointMap, typename MarginalMap>
Real conditional_entropy(const JointMap& joint, const MarginalMap& marginal) {
  return entropy_of_masses(joint) - entropy_of_masses(marginal);
}

}  // namespace

LabelingPrior single_labeling_prior(const Universe& universe) {
  return LabelingPrior{{universe.labels()}, {1.0}};
}

LabelingPrior uniform_labeling_prior(const Universe& universe) {
  const std::size_t n = universe.size();
  const std::size_t k = universe.label_set().size();
  const std::uint64_t count = [&] {
    std::uint64_t c = 1;
    for (std::size_t i = 0; i < n; ++i) c = saturating_mul(c, k);
    return c;
  }();
  if (count > (1u << 20)) {
    throw BudgetExceeded(count, 1u << 20);
  }
  std::vector<std::vector<LabelId>> labelings;
  std::vector<LabelId> current(n, 0);
  for (std::uint64_t c = 0; c < count; ++c) {
    labelings.push_back(current);
    for (std::size_t i = n; i-- > 0;) {
      if (++current[i] < static_cast<LabelId>(k)) break;
      current[i] = 0;
    }
  }
  return uniform_labeling_prior(std::move(labelings));
}

LabelingPrior uniform_labeling_prior(
    std::vector<std::vector<LabelId>> labelings) {
  std::vector<std::vector<LabelId>> sorted = labelings;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("labeling prior lists a labeling twice");
  }
  const double w = 1.0 / static_cast<double>(labelings.size());
  std::vector<double> weights(labelings.size(), w);
  return LabelingPrior{std::move(labelings), std::move(weights)};
}

std::uint64_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 result = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    result = result * (n - k + i) / i;
    if (result > std::numeric_limits<std::uint64_t>::max()) {
      return std::numeric_limits<std::uint64_t>::max();
    }
  }
  return static_cast<std::uint64_t>(result);
}

double entropy_bits(const std::vector<double>& probs) {
  std::vector<Real> terms;
  terms.reserve(probs.size());
  for (double p : probs) {
    terms.push_back(p > 0.0 ? -static_cast<Real>(p) * std::log2(static_cast<Real>(p))
                            : 0.0L);
  }
  return static_cast<double>(tree_sum(terms));
}

std::vector<std::size_t> pos_set(const EncoderFamily& family,
                                 const Observation& observation,
                                 const Universe& universe) {
  check_domain(family, universe);
  if (observation.size() > universe.size()) return {};
  return pos_set_impl(family, inverse_tables(family), observation,
                      universe.labels());
}

Posterior posterior(const EncoderFamily& family, const Observation& observation,
                    const Universe& universe) {
  return posterior_from_pos(family, pos_set(family, observation, universe));
}

namespace {

std::size_t argmax_with_ties(const std::vector<double>& probs,
                             std::uint64_t seed) {
  if (probs.empty()) throw InvalidArgument("argmax of an empty distribution");
  const double best = *std::max_element(probs.begin(), probs.end());
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (best - probs[i] <= 1e-12 * std::fabs(best)) ties.push_back(i);
  }
  Rng rng(seed);
  return ties[rng.below(ties.size())];
}

}  // namespace

std::size_t optimal_attack(const Posterior& posterior, std::uint64_t seed) {
  return argmax_with_ties(posterior.probs, seed);
}

std::size_t suboptimal_attack(const MismatchedDistribution& mismatched,
                              std::uint64_t seed) {
  return argmax_with_ties(mismatched.probs, seed);
}

ScoreReport privacy_score(const EncoderFamily& family, const Universe& universe,
                          std::size_t n, const ScoreOptions& options) {
  check_domain(family, universe);
  check_n(n, universe);
  const std::uint64_t cost =
      saturating_mul(family.size(), binomial(universe.size(), n));
  check_budget(cost, options);

  const std::vector<Observation> observations =
      reachable_observations(family, universe, n, options.workers);
  const std::vector<ObservationWork> work =
      posterior_table(family, universe, observations, n, options.workers);

  ScoreReport report;
  report.kind = "privacy";
  report.n = n;
  report.evaluated = cost;
  std::vector<Real> terms;
  for (std::size_t k = 0; k < observations.size(); ++k) {
    const double h = entropy_bits(work[k].posterior.probs);
    terms.push_back(work[k].probability * static_cast<Real>(h));
    report.per_observation.push_back(
        {observations[k], static_cast<double>(work[k].probability), h});
  }
  report.score_bits = static_cast<double>(tree_sum(terms));
  return report;
}

QBuilder posterior_q_builder(const EncoderFamily& family,
                             const Universe& universe) {
  return [family, universe](const Observation& o) {
    return MismatchedDistribution{posterior(family, o, universe).probs};
  };
}

QBuilder uniform_q_builder(const EncoderFamily& family) {
  const std::size_t size = family.size();
  return [size](const Observation&) {
    return MismatchedDistribution{
        std::vector<double>(size, 1.0 / static_cast<double>(size))};
  };
}

namespace {

struct MismatchedTotals {
  ScoreReport report;
  Real entropy = 0.0L;  // S_privacy
  Real kl = 0.0L;       // sum_O Pr[O] D_KL(P || Q)
};

MismatchedTotals mismatched_totals(const EncoderFamily& family,
                                   const Universe& universe, std::size_t n,
                                   const QBuilder& q_builder,
                                   const ScoreOptions& options) {
  check_domain(family, universe);
  check_n(n, universe);
  const std::uint64_t cost =
      saturating_mul(family.size(), binomial(universe.size(), n));
  check_budget(cost, options);

  const std::vector<Observation> observations =
      reachable_observations(family, universe, n, options.workers);
  const std::vector<ObservationWork> work =
      posterior_table(family, universe, observations, n, options.workers);

  MismatchedTotals totals;
  totals.report.kind = "mismatched_privacy";
  totals.report.n = n;
  totals.report.evaluated = cost;
  std::vector<Real> ce_terms;
  std::vector<Real> h_terms;
  std::vector<Real> kl_terms;
  for (std::size_t k = 0; k < observations.size(); ++k) {
    const MismatchedDistribution q = q_builder(observations[k]);
    validate_mismatched(q, family.size());
    const Real ce = cross_entropy(work[k].posterior, q);
    const Real pr = work[k].probability;
    ce_terms.push_back(pr * ce);
    h_terms.push_back(pr * entropy_bits(work[k].posterior.probs));
    kl_terms.push_back(pr * kl_divergence(work[k].posterior, q));
    totals.report.per_observation.push_back(
        {observations[k], static_cast<double>(pr), static_cast<double>(ce)});
  }
  totals.report.score_bits = static_cast<double>(tree_sum(ce_terms));
  totals.entropy = tree_sum(h_terms);
  totals.kl = tree_sum(kl_terms);
  return totals;
}

}  // namespace

ScoreReport mismatched_privacy_score(const EncoderFamily& family,
                                     const Universe& universe, std::size_t n,
                                     const QBuilder& q_builder,
                                     const ScoreOptions& options) {
  return mismatched_totals(family, universe, n, q_builder, options).report;
}

double kl_gap(const EncoderFamily& family, const Universe& universe,
              std::size_t n, const QBuilder& q_builder,
              const ScoreOptions& options) {
  const MismatchedTotals totals =
      mismatched_totals(family, universe, n, q_builder, options);
  const double gap = totals.report.score_bits - static_cast<double>(totals.entropy);
  const double kl = static_cast<double>(totals.kl);
  if (std::fabs(gap - kl) > 1e-10 || gap < -1e-12) {
    throw std::logic_error("KL gap identity violated: gap " +
                           std::to_string(gap) + " vs KL " + std::to_string(kl));
  }
  return gap;
}

PrivacyDecomposition decompose_privacy_score(const EncoderFamily& family,
                                             const Universe& universe,
                                             std::size_t n,
                                             const ScoreOptions& options) {
  check_domain(family, universe);
  check_n(n, universe);
  const std::uint64_t subsets = binomial(universe.size(), n);
  check_budget(saturating_mul(family.size(), subsets), options);

  // Joint masses of (T, X_A, O), (X_A, O) and O. Subsets are keyed by their
  // lexicographic rank.
  std::vector<Real> joint_terms;
  std::map<std::pair<std::uint64_t, Observation>, Real> data_obs;
  std::map<Observation, Real> obs;
  const Real inv_subsets = 1.0L / static_cast<Real>(subsets);
  for (std::size_t t = 0; t < family.size(); ++t) {
    std::uint64_t rank = 0;
    const Real m = static_cast<Real>(family.weight(t)) * inv_subsets;
    for_each_subset(universe.size(), n,
                    [&](const std::vector<std::size_t>& subset) {
                      Observation o = make_observation(family.encoder(t), subset,
                                                       universe.labels());
                      joint_terms.push_back(-m * log2l_safe(m));
                      data_obs[{rank, o}] += m;
                      obs[std::move(o)] += m;
                      ++rank;
                    });
  }
  const Real h_joint = tree_sum(joint_terms);
  const Real h_data_obs = entropy_of_masses(data_obs);
  const Real h_obs = entropy_of_masses(obs);
  return PrivacyDecomposition{static_cast<double>(h_data_obs - h_obs),
                              static_cast<double>(h_joint - h_data_obs)};
}

ScoreReport utility_score(const EncoderFamily& family, const Universe& universe,
                          std::size_t n, const LabelingPrior& prior,
                          const ScoreOptions& options) {
  check_domain(family, universe);
  check_n(n, universe);
  const Real h_labels = labeling_entropy(prior, universe.size());
  const std::uint64_t subsets = binomial(universe.size(), n);
  const std::uint64_t cost = saturating_mul(
      saturating_mul(prior.labelings.size(), family.size()), subsets);
  check_budget(cost, options);

  const std::vector<std::size_t> everything = all_indices(universe.size());
  const Real inv_subsets = 1.0L / static_cast<Real>(subsets);
  std::map<std::pair<Observation, Observation>, Real> target_obs;
  std::map<Observation, Real> obs;
  for (std::size_t l = 0; l < prior.labelings.size(); ++l) {
    const std::vector<LabelId>& labeling = prior.labelings[l];
    for (std::size_t t = 0; t < family.size(); ++t) {
      const TableEncoder& enc = family.encoder(t);
      // L o T^-1 is identified by its table on T(X).
      const Observation target = make_observation(enc, everything, labeling);
      const Real m = static_cast<Real>(prior.weights[l]) *
                     static_cast<Real>(family.weight(t)) * inv_subsets;
      for_each_subset(universe.size(), n,
                      [&](const std::vector<std::size_t>& subset) {
                        Observation o = make_observation(enc, subset, labeling);
                        target_obs[{o, target}] += m;
                        obs[std::move(o)] += m;
                      });
    }
  }

  ScoreReport report;
  report.kind = "utility";
  report.n = n;
  report.evaluated = cost;
  report.label_entropy_bits = static_cast<double>(h_labels);
  // Per-observation conditional entropies; target_obs is ordered by O first.
  std::vector<Real> terms;
  auto it = target_obs.begin();
  for (const auto& [o, mass] : obs) {
    std::vector<Real> cond;
    for (; it != target_obs.end() && it->first.first == o; ++it) {
      const Real q = it->second / mass;
      cond.push_back(-q * log2l_safe(q));
    }
    const Real h = tree_sum(cond);
    terms.push_back(mass * h);
    report.per_observation.push_back(
        {o, static_cast<double>(mass), static_cast<double>(h)});
  }
  report.score_bits = static_cast<double>(h_labels - tree_sum(terms));
  return report;
}

MultiOwnerUtilityReport multi_owner_utility(
    const Universe& universe, const std::vector<OwnerDataset>& owners,
    const std::vector<EncoderFamily>& families, const LabelingPrior& prior,
    const ScoreOptions& options) {
  if (owners.empty() || owners.size() != families.size()) {
    throw InvalidArgument("need one encoder family per owner dataset");
  }
  for (const EncoderFamily& f : families) check_domain(f, universe);
  const Real h_labels = labeling_entropy(prior, universe.size());
  std::uint64_t cost = prior.labelings.size();
  for (const EncoderFamily& f : families) cost = saturating_mul(cost, f.size());
  check_budget(cost, options);

  const std::size_t owner_count = owners.size();
  const std::vector<std::size_t> everything = all_indices(universe.size());
  using Key = std::vector<Observation>;
  std::vector<std::map<std::pair<Observation, Observation>, Real>> single_joint(
      owner_count);
  std::vector<std::map<Observation, Real>> single_obs(owner_count);
  std::vector<std::map<std::pair<Key, Observation>, Real>> combined_joint(
      owner_count);
  std::map<Key, Real> combined_obs;

  std::vector<std::size_t> choice(owner_count, 0);
  for (std::size_t l = 0; l < prior.labelings.size(); ++l) {
    const std::vector<LabelId>& labeling = prior.labelings[l];
    std::fill(choice.begin(), choice.end(), 0);
    while (true) {
      Real m = prior.weights[l];
      Key observations(owner_count);
      std::vector<Observation> targets(owner_count);
      for (std::size_t d = 0; d < owner_count; ++d) {
        const TableEncoder& enc = families[d].encoder(choice[d]);
        m *= static_cast<Real>(families[d].weight(choice[d]));
        observations[d] = make_observation(enc, owners[d].indices(), labeling);
        targets[d] = make_observation(enc, everything, labeling);
      }
      for (std::size_t d = 0; d < owner_count; ++d) {
        single_joint[d][{observations[d], targets[d]}] += m;
        single_obs[d][observations[d]] += m;
        combined_joint[d][{observations, targets[d]}] += m;
      }
      combined_obs[observations] += m;

      bool wrapped = true;
      for (std::size_t d = owner_count; d-- > 0;) {
        if (++choice[d] < families[d].size()) {
          wrapped = false;
          break;
        }
        choice[d] = 0;
      }
      if (wrapped) break;
    }
  }

  MultiOwnerUtilityReport report;
  report.label_entropy_bits = static_cast<double>(h_labels);
  report.evaluated = cost;
  for (std::size_t d = 0; d < owner_count; ++d) {
    const Real single =
        h_labels - conditional_entropy(single_joint[d], single_obs[d]);
    const Real combined =
        h_labels - conditional_entropy(combined_joint[d], combined_obs);
    report.single_bits.push_back(static_cast<double>(single));
    report.combined_bits.push_back(static_cast<double>(combined));
    if (report.combined_bits[d] < report.single_bits[d] - 1e-10) {
      throw std::logic_error("combined utility below single-owner utility for "
                             "owner " + std::to_string(d));
    }
  }
  return report;
}

}  // namespace peopl
