#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "peopl/families.hpp"
#include "peopl/universe.hpp"

namespace peopl {

// Eve's distribution over the encoders of a family given one observation.
// probs[i] is exactly zero for encoders outside the Pos set.
struct Posterior {
  std::vector<double> probs;
};

// The adversary's stand-in Q(T) for the true posterior.
struct MismatchedDistribution {
  std::vector<double> probs;
};

// Distribution of the random labeling L used by the utility score. Each
// labeling is a total table of label ids over the universe order.
struct LabelingPrior {
  std::vector<std::vector<LabelId>> labelings;
  std::vector<double> weights;
};

LabelingPrior single_labeling_prior(const Universe& universe);
// Uniform over all |Y|^|X| labelings into the universe's label set.
LabelingPrior uniform_labeling_prior(const Universe& universe);
// Uniform over an explicit list; duplicate labelings are rejected.
LabelingPrior uniform_labeling_prior(std::vector<std::vector<LabelId>> labelings);

struct ObservationTerm {
  Observation observation;
  double probability = 0.0;
  double entropy_bits = 0.0;  // conditional (cross-)entropy given this O
};

struct ScoreReport {
  std::string kind;  // "privacy", "mismatched_privacy", "utility"
  double score_bits = 0.0;
  std::size_t n = 0;
  std::uint64_t evaluated = 0;  // enumerated (T, X_A[, L]) tuples
  double label_entropy_bits = 0.0;  // H[L], utility only
  std::vector<ObservationTerm> per_observation;
};

inline constexpr std::uint64_t kDefaultBudget = 10'000'000;

struct ScoreOptions {
  std::uint64_t budget = kDefaultBudget;
  // Worker threads for the enumeration. Results are bit-identical for every
  // worker count: reductions run in a fixed order.
  int workers = 1;
};

// Number of size-k subsets of an n-set, saturating at UINT64_MAX.
std::uint64_t binomial(std::size_t n, std::size_t k);

// Shannon entropy in bits with 0 log 0 = 0.
double entropy_bits(const std::vector<double>& probs);

// Encoders T for which some subset of X reproduces the observation
// pair-for-pair under (T, L).
std::vector<std::size_t> pos_set(const EncoderFamily& family,
                                 const Observation& observation,
                                 const Universe& universe);

// P(T) = Pr[T] / Pr[T in Pos] on Pos, 0 elsewhere. Throws
// ImpossibleObservation when Pos is empty.
Posterior posterior(const EncoderFamily& family, const Observation& observation,
                    const Universe& universe);

// MAP encoder; ties broken uniformly at random with the seed.
std::size_t optimal_attack(const Posterior& posterior, std::uint64_t seed);
std::size_t suboptimal_attack(const MismatchedDistribution& mismatched,
                              std::uint64_t seed);

// H[T_A | O, K_e] in bits over uniformly random size-n owner datasets.
ScoreReport privacy_score(const EncoderFamily& family, const Universe& universe,
                          std::size_t n, const ScoreOptions& options = {});

using QBuilder = std::function<MismatchedDistribution(const Observation&)>;

QBuilder posterior_q_builder(const EncoderFamily& family,
                             const Universe& universe);
QBuilder uniform_q_builder(const EncoderFamily& family);

// Expected cross-entropy -sum_O Pr[O] sum_T P(T) log Q(T). Throws Divergence
// when Q vanishes somewhere P does not.
ScoreReport mismatched_privacy_score(const EncoderFamily& family,
                                     const Universe& universe, std::size_t n,
                                     const QBuilder& q_builder,
                                     const ScoreOptions& options = {});

// Mismatched score minus privacy score. Checked against the directly summed
// expected KL divergence (within 1e-10).
double kl_gap(const EncoderFamily& family, const Universe& universe,
              std::size_t n, const QBuilder& q_builder,
              const ScoreOptions& options = {});

struct PrivacyDecomposition {
  double h_data = 0.0;            // H[X_A | O, K_e]
  double h_key_given_data = 0.0;  // H[T_A | X_A, O, K_e]
};

// Both terms from the joint distribution of (T, X_A, O), without going through
// the Pos-set posterior.
PrivacyDecomposition decompose_privacy_score(const EncoderFamily& family,
                                             const Universe& universe,
                                             std::size_t n,
                                             const ScoreOptions& options = {});

// H[L] - H[L o T^-1 | O] by joint enumeration of (L, T, X_A).
ScoreReport utility_score(const EncoderFamily& family, const Universe& universe,
                          std::size_t n, const LabelingPrior& prior,
                          const ScoreOptions& options = {});

struct MultiOwnerUtilityReport {
  double label_entropy_bits = 0.0;
  // Per owner d: utility using only O_d, and using every owner's observation.
  std::vector<double> single_bits;
  std::vector<double> combined_bits;
  std::uint64_t evaluated = 0;
};

// Owners hold fixed datasets and draw their encoders independently from their
// own families. Throws std::logic_error if combined < single - 1e-10.
MultiOwnerUtilityReport multi_owner_utility(
    const Universe& universe, const std::vector<OwnerDataset>& owners,
    const std::vector<EncoderFamily>& families, const LabelingPrior& prior,
    const ScoreOptions& options = {});

}  // namespace peopl
