#pragma once

// Synthetic attack and training trials shared by the CLI and the acceptance
// tests. Every trial is a pure function of its arguments and seed.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "peopl/attacks.hpp"
#include "peopl/encoders.hpp"
#include "peopl/learning.hpp"
#include "peopl/synthetic.hpp"

namespace peopl {

struct AttackTaskSpec {
  std::size_t private_count = 512;
  std::size_t public_count = 512;
  std::size_t heldout_count = 128;
  SyntheticImageSpec image;
};

// Builds Alice's encoder from an architecture and a seed: a linear encoder
// for kLinear (out_dim = hidden), a patch encoder otherwise.
ImageEncoder build_image_encoder(ImageEncoderSpec spec, std::uint64_t seed);

struct MmdTrial {
  MmdAttackResult attack;
  double normalized_mse = 0.0;
  double random_normalized_mse = 0.0;  // independent encoder of the same architecture
  bool with_sensitive = false;
  SensitiveAttackReport sensitive;
};

// Draws disjoint private/public/held-out sets (stages "private", "public",
// "heldout"), encodes the private set with Alice's encoder (stage "alice",
// shuffle stage "shuffle"), runs the MMD attack with Eve's architecture equal
// to Alice's and scores it by normalized MSE on the held-out images. With a
// classifier spec, the sensitive-feature attack runs on the estimate.
MmdTrial run_mmd_trial(const AttackTaskSpec& task, const ImageEncoderSpec& victim,
                       AttackConfig config, std::uint64_t seed,
                       const ClassifierSpec* sensitive = nullptr);

struct ChainTrial {
  MatchingReport untrained;  // same universe, untrained model
  MatchingReport matching;
  RecoveryChainResult recovery;
  PlaintextAttackReport against_truth;  // recovered encoder vs the true pairs
  std::vector<std::size_t> correct_per_round;
};

// Matching game on a synthetic universe of `universe` images (stage
// "matching_universe") whose ciphertexts are handed over in a random order
// (stage "order"), followed by the plaintext attack on the recovered pairs.
ChainTrial run_chain_trial(std::size_t universe, const SyntheticImageSpec& image,
                           const ImageEncoderSpec& victim, MatchingConfig matching,
                           PlaintextAttackConfig plaintext, std::size_t rounds,
                           std::uint64_t seed);

struct UtilityTaskSpec {
  std::size_t owners = 2;
  std::size_t per_owner = 600;
  SyntheticImageSpec image;
};

struct UtilityTrial {
  std::vector<TrainReport> raw_single;      // per owner
  std::vector<TrainReport> encoded_single;  // per owner
  TrainReport raw_combined;
  TrainReport combined_clear;
  TrainReport combined_randomized;
};

// Owners' data come from make_image_task with owner index d (stage
// "owner_data"). Raw samples are sets of one flattened image; encoded samples
// are the patch rows of an encoder drawn per run_setting's encoder seed.
UtilityTrial run_utility_trial(const UtilityTaskSpec& task, const ImageEncoderSpec& encoder,
                               const ClassifierSpec& classifier, std::uint64_t seed);

EncodeFn raw_image_encode();
EncodeFn patch_encode(const ImageEncoderSpec& architecture);

}  // namespace peopl
