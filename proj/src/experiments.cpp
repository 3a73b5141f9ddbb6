#include "peopl/experiments.hpp"

#include <numeric>
#include <span>
#include <string>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

}  // namespace

ImageEncoder build_image_encoder(ImageEncoderSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return ImageEncoder::build(spec);
}

MmdTrial run_mmd_trial(const AttackTaskSpec& task, const ImageEncoderSpec& victim,
                       AttackConfig config, std::uint64_t seed,
                       const ClassifierSpec* sensitive) {
  const ImageTask priv = make_image_task(task.private_count, task.image, derive_seed(seed, "private"));
  const ImageTask pub = make_image_task(task.public_count, task.image, derive_seed(seed, "public"));
  const ImageTask held = make_image_task(task.heldout_count, task.image, derive_seed(seed, "heldout"));
  const ImageEncoder alice = build_image_encoder(victim, derive_seed(seed, "alice"));
  const Tensor z = alice.encode_batch(priv.images, derive_seed(seed, "shuffle"));

  config.architecture = victim;
  config.architecture.seed = 0;
  config.seed = seed;
  MmdTrial trial{mmd_attack({z, priv.labels, pub.images, pub.labels}, config), 0, 0, false, {}};
  const std::vector<double> ref = mean_row(z);
  trial.normalized_mse = normalized_mse(trial.attack.encoder, alice, held.images, ref);
  trial.attack.report.normalized_mse = trial.normalized_mse;
  const ImageEncoder other = build_image_encoder(victim, derive_seed(seed, "random_encoder"));
  trial.random_normalized_mse = normalized_mse(other, alice, held.images, ref);
  if (sensitive) {
    trial.with_sensitive = true;
    trial.sensitive = sensitive_feature_attack(trial.attack.encoder, pub.images, pub.sensitive, z,
                                               priv.sensitive, *sensitive, seed);
  }
  return trial;
}

ChainTrial run_chain_trial(std::size_t universe, const SyntheticImageSpec& image,
                           const ImageEncoderSpec& victim, MatchingConfig matching,
                           PlaintextAttackConfig plaintext, std::size_t rounds,
                           std::uint64_t seed) {
  require(universe >= 2, "the matching game needs at least two samples");
  const ImageTask xa = make_image_task(universe, image, derive_seed(seed, "matching_universe"));
  const ImageEncoder alice = build_image_encoder(victim, derive_seed(seed, "alice"));
  const std::size_t patches = alice.num_patches();
  const Tensor z = alice.encode_batch(xa.images, derive_seed(seed, "shuffle"));

  // Eve receives the ciphertexts in an unknown order: block i is z[order[i]].
  std::vector<std::size_t> order(universe);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "order"));
  rng.shuffle(std::span<std::size_t>(order));
  const Tensor unordered = reorder_samples(z, patches, order);
  std::vector<std::size_t> truth(universe);
  for (std::size_t i = 0; i < universe; ++i) truth[order[i]] = i;

  matching.architecture = victim;
  matching.architecture.seed = 0;
  matching.seed = derive_seed(seed, "matching");
  plaintext.architecture = victim;
  plaintext.architecture.seed = 0;
  plaintext.seed = derive_seed(seed, "plaintext");

  ChainTrial trial;
  trial.untrained = evaluate_matching(untrained_matching_model(xa.images, matching), xa.images,
                                      unordered, truth);
  const MatchingModel model = matching_model_train(xa.images, matching);
  trial.matching = evaluate_matching(model, xa.images, unordered, truth);
  trial.recovery = recover_from_unordered(xa.images, unordered, model, plaintext, rounds);
  for (const auto& assignment : trial.recovery.assignments) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < universe; ++i) correct += assignment[i] == truth[i];
    trial.correct_per_round.push_back(correct);
  }
  trial.against_truth =
      evaluate_plaintext_recovery(trial.recovery.attack.encoder, xa.images, z, plaintext);
  return trial;
}

EncodeFn raw_image_encode() {
  return [](const Tensor& images, std::uint64_t) {
    SetDataset data;
    data.set_size = 1;
    data.rows = images.reshaped({images.dim(0), images.size() / images.dim(0)});
    return data;
  };
}

EncodeFn patch_encode(const ImageEncoderSpec& architecture) {
  return [architecture](const Tensor& images, std::uint64_t encoder_seed) {
    const ImageEncoder encoder = build_image_encoder(architecture, encoder_seed);
    SetDataset data;
    data.set_size = encoder.num_patches();
    data.rows = encoder.encode_batch(images, derive_seed(encoder_seed, "shuffle"));
    return data;
  };
}

UtilityTrial run_utility_trial(const UtilityTaskSpec& task, const ImageEncoderSpec& encoder,
                               const ClassifierSpec& classifier, std::uint64_t seed) {
  require(task.owners >= 2, "the utility trial needs at least two owners");
  std::vector<OwnerData> owners;
  for (std::size_t d = 0; d < task.owners; ++d) {
    const ImageTask t = make_image_task(task.per_owner, task.image,
                                        derive_seed(seed, "owner_data", d), static_cast<int>(d));
    owners.push_back({t.images, t.labels});
  }
  const EncodeFn raw = raw_image_encode(), enc = patch_encode(encoder);
  UtilityTrial trial;
  for (std::size_t d = 0; d < task.owners; ++d) {
    const int owner = static_cast<int>(d);
    trial.raw_single.push_back(run_setting(Setting::kSingleOwner, owners, raw, classifier, seed, owner));
    trial.encoded_single.push_back(
        run_setting(Setting::kSingleOwner, owners, enc, classifier, seed, owner));
  }
  trial.raw_combined = run_setting(Setting::kCombinedClear, owners, raw, classifier, seed);
  trial.combined_clear = run_setting(Setting::kCombinedClear, owners, enc, classifier, seed);
  trial.combined_randomized =
      run_setting(Setting::kCombinedRandomized, owners, enc, classifier, seed);
  return trial;
}

}  // namespace peopl
