#include "peopl/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "grad_check.hpp"
#include "gtest/gtest.h"
#include "peopl/encoders.hpp"
#include "peopl/error.hpp"
#include "peopl/random.hpp"
#include "peopl/synthetic.hpp"

namespace peopl {
namespace {

Tensor Gaussian(std::size_t n, std::size_t dim, double shift, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, dim});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() + shift;
  return t;
}

ImageEncoderSpec SmallSpec(std::size_t hidden, std::uint64_t seed) {
  ImageEncoderSpec spec;
  spec.hidden = hidden;
  spec.seed = seed;
  return spec;
}

TEST(MmdTest, IdenticalSamplesAreNotPositive) {
  const Tensor a = Gaussian(50, 3, 0.0, 1);
  const KernelSpec kernel = median_heuristic_kernel(a, a);
  EXPECT_LE(mmd_unbiased(a, a, kernel), 0.0);
}

TEST(MmdTest, ExactlySymmetric) {
  const Tensor a = Gaussian(40, 4, 0.0, 2), b = Gaussian(30, 4, 0.3, 3);
  const KernelSpec kernel{{0.5, 1.0, 2.0}};
  EXPECT_EQ(mmd_unbiased(a, b, kernel), mmd_unbiased(b, a, kernel));
}

// Gaussian-kernel MMD^2 between N(0,1) and N(5,1) in one dimension with
// bandwidth 1: E k = 1/sqrt(3) * exp(-m^2/6) for mean gap m.
TEST(MmdTest, MatchesClosedFormForShiftedGaussians) {
  const Tensor a = Gaussian(1500, 1, 0.0, 4), b = Gaussian(1500, 1, 5.0, 5);
  const double within = 1.0 / std::sqrt(3.0);
  const double oracle = 2 * within - 2 * within * std::exp(-25.0 / 6.0);
  const double estimate = mmd_unbiased(a, b, KernelSpec{{1.0}});
  EXPECT_GT(estimate, 0.5);
  EXPECT_NEAR(estimate, oracle, 0.03);
}

TEST(MmdTest, SameDistributionWithinPermutationError) {
  const Tensor a = Gaussian(100, 2, 0.0, 6), b = Gaussian(100, 2, 0.0, 7);
  const KernelSpec kernel = median_heuristic_kernel(a, b);
  const PermutationTest test = mmd_permutation_test(a, b, kernel, 200, 8);
  EXPECT_LT(std::fabs(test.statistic), 3 * test.null_stddev);
  EXPECT_GT(test.p_value, 0.01);
}

TEST(MmdTest, PermutationTestDetectsShift) {
  const Tensor a = Gaussian(80, 2, 0.0, 9), b = Gaussian(80, 2, 1.0, 10);
  const KernelSpec kernel = median_heuristic_kernel(a, b);
  EXPECT_LT(mmd_permutation_test(a, b, kernel, 200, 11).p_value, 0.01);
}

TEST(MmdTest, VarMatchesTensorVersion) {
  const Tensor a = Gaussian(20, 3, 0.0, 12), b = Gaussian(25, 3, 0.5, 13);
  const KernelSpec kernel{{0.7, 1.4}};
  Tape tape;
  const double v = mmd_unbiased(tape.constant(a), tape.constant(b), kernel).value().item();
  EXPECT_NEAR(v, mmd_unbiased(a, b, kernel), 1e-12);
}

TEST(KernelTest, GramMatrixIsPsd) {
  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    const Tensor x = Gaussian(60, 5, 0.0, seed);
    const Tensor g = gram_matrix(x, x, KernelSpec{{0.5, 1.0, 2.0}});
    Eigen::MatrixXd m(60, 60);
    for (std::size_t i = 0; i < 60; ++i) {
      for (std::size_t j = 0; j < 60; ++j) m(i, j) = g.at(i, j);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(KernelTest, MedianHeuristicScalesWithData) {
  const Tensor a = Gaussian(100, 2, 0.0, 30);
  Tensor b = a;
  for (double& v : b.values()) v *= 3.0;
  const KernelSpec ka = median_heuristic_kernel(a, a), kb = median_heuristic_kernel(b, b);
  ASSERT_EQ(ka.bandwidths.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(kb.bandwidths[i], 3 * ka.bandwidths[i], 1e-9);
}

TEST(AssignmentTest, RejectsNonFiniteCosts) {
  EXPECT_THROW(min_cost_assignment({0.0, std::nan(""), 1.0, 0.0}, 2), InvalidArgument);
  EXPECT_THROW(min_cost_assignment({0.0, INFINITY, 1.0, 0.0}, 2), InvalidArgument);
}

TEST(AssignmentTest, MatchesBruteForce) {
  Rng rng(40);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6;
    std::vector<double> cost(n * n);
    for (double& c : cost) c = rng.uniform();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) total += cost[i * n + perm[i]];
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const std::vector<std::size_t> a = min_cost_assignment(cost, n);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += cost[i * n + a[i]];
    EXPECT_NEAR(total, best, 1e-12);
    std::vector<std::size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
  }
}

TEST(NormalizedMseTest, TrueEncoderIsZeroAndMeanPredictorIsOne) {
  const ImageTask task = make_image_task(16, SyntheticImageSpec{}, 50);
  const ImageEncoder t = build_patch_encoder(SmallSpec(8, 51));
  const std::vector<double> ref = mean_row(t.encode_batch(task.images, 52));
  EXPECT_NEAR(normalized_mse(t, t, task.images, ref), 0.0, 1e-12);

  // Shuffled rows of the same encoder align back exactly.
  const Tensor truth = t.forward(task.images);
  EXPECT_NEAR(normalized_mse(t.encode_batch(task.images, 53), truth, t.num_patches(), ref), 0.0,
              1e-12);

  Tensor constant(truth.shape());
  const std::size_t h = truth.dim(1);
  for (std::size_t r = 0; r < truth.dim(0); ++r) {
    for (std::size_t l = 0; l < h; ++l) constant[r * h + l] = ref[l];
  }
  EXPECT_NEAR(normalized_mse(constant, truth, t.num_patches(), ref), 1.0, 1e-12);
}

TEST(NormalizedMseTest, IndependentDeepEncoderIsFarFromTruth) {
  const ImageTask task = make_image_task(32, SyntheticImageSpec{}, 60);
  ImageEncoderSpec spec = SmallSpec(16, 61);
  const ImageEncoder truth = build_patch_encoder(spec);
  spec.seed = 62;
  const ImageEncoder other = build_patch_encoder(spec);
  const std::vector<double> ref = mean_row(truth.encode_batch(task.images, 63));
  EXPECT_GT(normalized_mse(other, truth, task.images, ref), 1.0);
}

TEST(MmdAttackTest, LossGradientPassesFiniteDifferences) {
  ImageEncoderSpec spec = SmallSpec(3, 70);
  spec.depth = 2;
  const ImageEncoder arch = build_patch_encoder(spec);
  const ImageTask pub = make_image_task(4, SyntheticImageSpec{}, 71);
  const ImageTask priv = make_image_task(4, SyntheticImageSpec{}, 72);
  spec.seed = 73;
  const Tensor rows = build_patch_encoder(spec).encode_batch(priv.images, 74);
  const KernelSpec kernel{{1.0, 2.0}};
  const std::vector<std::string> names = arch.params().names();
  std::vector<Tensor> inputs;
  for (const auto& name : names) inputs.push_back(arch.params().get(name));
  auto loss = [&](Tape& tape, const std::vector<Var>& v) {
    std::map<std::string, Var> params;
    for (std::size_t i = 0; i < names.size(); ++i) params[names[i]] = v[i];
    return mmd_attack_loss(tape, arch, params, pub.images, pub.labels, rows, priv.labels, kernel);
  };

  // A bias feeding batch normalization cancels out: its gradient is exactly
  // zero and finite differences only see roundoff, so check it separately.
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  tape.backward(loss(tape, vars));
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k] != "conv1.b") continue;
    for (double g : vars[k].grad().values()) EXPECT_NEAR(g, 0.0, 1e-12);
  }
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k] == "conv1.b") continue;
    auto one = [&](Tape& t, const std::vector<Var>& v) {
      std::vector<Var> all;
      for (std::size_t i = 0; i < names.size(); ++i) {
        all.push_back(i == k ? v[0] : t.constant(inputs[i]));
      }
      return loss(t, all);
    };
    EXPECT_LT(testing::check_gradients(one, {inputs[k]}).max_relative_error, 1e-6) << names[k];
  }
}

TEST(MmdAttackTest, OracleInitStaysNearBaseline) {
  const SyntheticImageSpec task_spec;
  const ImageTask priv = make_image_task(96, task_spec, 80);
  const ImageTask pub = make_image_task(96, task_spec, 81);
  const ImageEncoder alice = build_patch_encoder(SmallSpec(8, 82));
  AttackData data{alice.encode_batch(priv.images, 83), priv.labels, pub.images, pub.labels};
  AttackConfig config;
  config.epochs = 2;
  config.learning_rates = {1e-4};
  config.weight_decays = {0.0};
  config.seed = 84;
  config.architecture = SmallSpec(8, 0);
  const MmdAttackResult oracle = mmd_attack(data, config, &alice);
  const MmdAttackResult fresh = mmd_attack(data, config);
  EXPECT_LT(oracle.report.initial_validation_mmd, 0.1 * fresh.report.initial_validation_mmd);
  EXPECT_LT(oracle.report.validation_mmd, 0.1 * fresh.report.initial_validation_mmd);
}

TEST(MmdAttackTest, DeterministicGivenSeed) {
  const ImageTask priv = make_image_task(48, SyntheticImageSpec{}, 90);
  const ImageTask pub = make_image_task(48, SyntheticImageSpec{}, 91);
  const ImageEncoder alice = build_patch_encoder(SmallSpec(4, 92));
  AttackData data{alice.encode_batch(priv.images, 93), priv.labels, pub.images, pub.labels};
  AttackConfig config;
  config.epochs = 2;
  config.learning_rates = {1e-2};
  config.weight_decays = {0.0};
  config.seed = 94;
  config.architecture = SmallSpec(4, 0);
  const MmdAttackResult a = mmd_attack(data, config), b = mmd_attack(data, config);
  EXPECT_TRUE(a.encoder.params() == b.encoder.params());
  EXPECT_EQ(a.report.validation_curve, b.report.validation_curve);
}

TEST(SensitiveAttackTest, IndependentSensitiveFeatureIsChance) {
  const ImageTask pub = make_image_task(400, SyntheticImageSpec{}, 100);
  const ImageTask priv = make_image_task(400, SyntheticImageSpec{}, 101);
  const ImageEncoder enc = build_patch_encoder(SmallSpec(8, 102));
  Rng rng(103);
  std::vector<int> s_pub(400), s_priv(400);
  for (int& s : s_pub) s = rng.uniform() < 0.5;
  for (int& s : s_priv) s = rng.uniform() < 0.5;
  ClassifierSpec spec;
  spec.epochs = 20;
  const SensitiveAttackReport r = sensitive_feature_attack(
      enc, pub.images, s_pub, enc.encode_batch(priv.images, 104), s_priv, spec, 105);
  EXPECT_NEAR(r.auc_on_zstar, 0.5, 0.15);
  EXPECT_NEAR(r.auc_on_z, 0.5, 0.1);
}

TEST(MatchingTest, ClustersRecoverPatchPositions) {
  const ImageTask task = make_image_task(64, SyntheticImageSpec{}, 110);
  const ImageEncoder enc = build_patch_encoder(SmallSpec(64, 111));
  const Tensor rows = enc.forward(task.images);  // grid order
  const std::size_t patches = enc.num_patches();
  const std::vector<std::size_t> cluster = cluster_positions(rows, patches);
  std::vector<std::size_t> map(patches);
  for (std::size_t p = 0; p < patches; ++p) map[p] = cluster[p];
  for (std::size_t r = 0; r < rows.dim(0); ++r) EXPECT_EQ(cluster[r], map[r % patches]);
}

TEST(MatchingTest, CipherSummariesIgnoreRowOrder) {
  const ImageTask task = make_image_task(32, SyntheticImageSpec{}, 120);
  const ImageEncoder enc = build_patch_encoder(SmallSpec(32, 121));
  MatchingConfig config;
  config.architecture = SmallSpec(32, 0);
  const MatchingModel model = untrained_matching_model(task.images, config);
  const Tensor a = model.cipher_summaries(enc.encode_batch(task.images, 1));
  const Tensor b = model.cipher_summaries(enc.encode_batch(task.images, 2));
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(MatchingTest, UntrainedModelIsChance) {
  const std::size_t n = 64;
  const ImageTask task = make_image_task(n, SyntheticImageSpec{}, 130);
  const ImageEncoder enc = build_patch_encoder(SmallSpec(32, 131));
  std::vector<std::size_t> truth(n);
  std::iota(truth.begin(), truth.end(), 0);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    MatchingConfig config;
    config.architecture = SmallSpec(32, 0);
    config.seed = seed;
    const MatchingModel model = untrained_matching_model(task.images, config);
    total += evaluate_matching(model, task.images, enc.encode_batch(task.images, 132), truth).auc;
  }
  EXPECT_NEAR(total / 4, 0.5, 0.1);
}

TEST(MatchingTest, SingleSampleIsTriviallyMatched) {
  const ImageTask task = make_image_task(1, SyntheticImageSpec{}, 140);
  MatchingConfig config;
  config.architecture = SmallSpec(8, 0);
  config.iterations = 5;
  const MatchingModel model = matching_model_train(task.images, config);
  ImageEncoderSpec spec = SmallSpec(8, 141);
  spec.norm = NormMode::kFixed;  // batch statistics need two samples
  const ImageEncoder enc = build_patch_encoder(spec);
  const MatchingReport r = evaluate_matching(model, task.images, enc.encode_batch(task.images, 1), {0});
  EXPECT_EQ(r.auc, 1.0);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(MatchingTest, TrainingBeatsChance) {
  const std::size_t n = 48;
  const ImageTask task = make_image_task(n, SyntheticImageSpec{}, 150);
  MatchingConfig config;
  config.architecture = SmallSpec(64, 0);
  config.iterations = 300;
  config.seed = 151;
  const MatchingModel model = matching_model_train(task.images, config);
  const ImageEncoder alice = build_patch_encoder(SmallSpec(64, 152));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  const Tensor z = reorder_samples(alice.encode_batch(task.images, 153), alice.num_patches(), order);
  std::vector<std::size_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) truth[order[i]] = i;
  EXPECT_GT(evaluate_matching(model, task.images, z, truth).auc, 0.7);
}

TEST(PlaintextAttackTest, ZeroPairsThrow) {
  PlaintextAttackConfig config;
  config.architecture = SmallSpec(8, 0);
  EXPECT_THROW(plaintext_attack(Tensor({0, 1, 8, 8}), Tensor({0, 8}), config), InvalidArgument);
}

// Pairs from a linear encoder: the exact map solves a least-squares problem,
// so gradient descent on a linear candidate should land on it.
TEST(PlaintextAttackTest, LinearEncoderMatchesLeastSquaresOracle) {
  const std::size_t n = 40;
  const ImageTask task = make_image_task(n, SyntheticImageSpec{}, 160);
  const ImageEncoder alice = build_linear_encoder(4, 6, 161);
  const Tensor paired = alice.encode_batch(task.images, 162);

  // Oracle: least squares on grid-ordered patch rows.
  const Tensor x = patchify(task.images, 4), z = alice.forward(task.images);
  Eigen::MatrixXd X(x.dim(0), x.dim(1)), Z(z.dim(0), z.dim(1));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < x.dim(1); ++j) X(i, j) = x.at(i, j);
    for (std::size_t j = 0; j < z.dim(1); ++j) Z(i, j) = z.at(i, j);
  }
  const Eigen::MatrixXd W = X.colPivHouseholderQr().solve(Z);
  EXPECT_LT((X * W - Z).norm() / Z.norm(), 1e-10);

  PlaintextAttackConfig config;
  config.architecture = alice.spec();
  config.architecture.seed = 0;
  config.steps = 4000;
  config.lr = 3e-2;
  config.seed = 163;
  const PlaintextAttackResult result = plaintext_attack(task.images, paired, config);
  const Tensor got = result.encoder.forward(task.images);
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < z.dim(1); ++j) {
      const double oracle = (X.row(i) * W.col(j))(0, 0);
      err += (got.at(i, j) - oracle) * (got.at(i, j) - oracle);
      scale += oracle * oracle;
    }
  }
  EXPECT_LT(std::sqrt(err / scale), 1e-5);
  EXPECT_LT(result.report.ratio, 1e-10);
}

TEST(PlaintextAttackTest, PairByEncoderRecoversTruthWithTrueEncoder) {
  const std::size_t n = 24;
  const ImageTask task = make_image_task(n, SyntheticImageSpec{}, 170);
  const ImageEncoder alice = build_patch_encoder(SmallSpec(16, 171));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::rotate(order.begin(), order.begin() + 5, order.end());
  const Tensor z = reorder_samples(alice.encode_batch(task.images, 172), alice.num_patches(), order);
  const std::vector<std::size_t> pairing = pair_by_encoder(alice, task.images, z);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(order[pairing[i]], i);
}

}  // namespace
}  // namespace peopl
