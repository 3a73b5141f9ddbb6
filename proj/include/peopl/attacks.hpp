#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "peopl/encoders.hpp"
#include "peopl/learning.hpp"
#include "peopl/tensor.hpp"

namespace peopl {

// Mixture of Gaussian kernels k(x,y) = mean_s exp(-|x-y|^2 / (2 s^2)).
struct KernelSpec {
  std::vector<double> bandwidths;
};

// Bandwidths = multipliers x median pairwise distance of the pooled rows of
// a and b. At most max_points evenly spaced rows are used.
KernelSpec median_heuristic_kernel(const Tensor& a, const Tensor& b,
                                   const std::vector<double>& multipliers = {0.5, 1.0, 2.0},
                                   std::size_t max_points = 1000);

Tensor gram_matrix(const Tensor& a, const Tensor& b, const KernelSpec& kernel);

// Unbiased MMD^2 U-statistic between the rows of a and b (each >= 2 rows).
// The pair is put in a canonical order first, so the value is exactly
// symmetric.
double mmd_unbiased(const Tensor& a, const Tensor& b, const KernelSpec& kernel);
Var mmd_unbiased(Var a, Var b, const KernelSpec& kernel);

struct PermutationTest {
  double statistic = 0.0;
  double null_mean = 0.0;
  double null_stddev = 0.0;  // standard error of the statistic under H0
  double p_value = 1.0;
};

PermutationTest mmd_permutation_test(const Tensor& a, const Tensor& b,
                                     const KernelSpec& kernel, std::size_t permutations,
                                     std::uint64_t seed);

// Minimum-cost perfect matching on an n x n row-major cost matrix (Hungarian
// algorithm). Returns assignment[row] = column.
std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n);

// Per-sample aligned squared error between two encoded batches [B*N, h]:
// every sample's rows are matched by minimum-cost assignment, then the squared
// error is averaged over samples, patches and features.
double aligned_mse(const Tensor& estimated, const Tensor& truth, std::size_t patches);

// Column means of encoded rows.
std::vector<double> mean_row(const Tensor& rows);

// aligned_mse(estimated, truth) divided by the error of predicting
// reference_mean for every row.
double normalized_mse(const Tensor& estimated, const Tensor& truth, std::size_t patches,
                      const std::vector<double>& reference_mean);
// Encodes heldout [B,C,H,W] as one batch with both encoders.
double normalized_mse(const ImageEncoder& estimated, const ImageEncoder& truth,
                      const Tensor& heldout, const std::vector<double>& reference_mean);

struct AttackConfig {
  std::size_t epochs = 25;
  // Every (lr, weight_decay) pair is run; the lowest final validation MMD wins.
  std::vector<double> learning_rates{1e-2, 1e-3, 1e-4};
  std::vector<double> weight_decays{0.0, 1e-3};
  std::size_t batch_size = 64;  // samples per side of a minibatch
  double validation_fraction = 0.2;
  // Kernel bandwidths are these multiples of the median pairwise distance of
  // the encoded rows.
  std::vector<double> bandwidth_multipliers{0.5, 1.0, 2.0};
  // Match same-label rows when both sides carry labels.
  bool class_conditional = true;
  std::uint64_t seed = 0;
  // Architecture of T_theta; its seed field is replaced by a derived one.
  ImageEncoderSpec architecture;
};

struct GridResult {
  double lr = 0.0;
  double weight_decay = 0.0;
  double validation_mmd = 0.0;
};

struct AttackReport {
  double validation_mmd = 0.0;
  double initial_validation_mmd = 0.0;
  double normalized_mse = -1.0;  // filled in by callers that know T_A
  double lr = 0.0;
  double weight_decay = 0.0;
  std::vector<double> loss_curve;        // mean train loss per epoch
  std::vector<double> validation_curve;  // validation MMD per epoch
  std::vector<GridResult> grid;
  KernelSpec kernel;
  std::uint64_t init_seed = 0;
  bool class_conditional = false;
  AttackConfig config;
};

struct MmdAttackResult {
  ImageEncoder encoder;
  AttackReport report;
};

// Eve's inputs for the distribution-matching attack. Labels are optional.
struct AttackData {
  Tensor encoded_private;           // [B*N, h], per-sample shuffled
  std::vector<int> private_labels;  // empty or one per encoded sample
  Tensor public_images;             // [P,C,H,W], disjoint from Alice's data
  std::vector<int> public_labels;   // empty or one per public image
};

// MMD between T_theta(public_images) patch rows and encoded rows. With labels
// on both sides it is the sum over labels of the MMD between same-label rows.
Var mmd_attack_loss(Tape& tape, const ImageEncoder& architecture,
                    const std::map<std::string, Var>& params, const Tensor& public_images,
                    const std::vector<int>& public_labels, const Tensor& encoded_rows,
                    const std::vector<int>& private_labels, const KernelSpec& kernel);

// Distribution-matching estimate of the encoder behind data.encoded_private
// from unpaired public images. Starts from a fresh encoder of
// config.architecture unless init is given. Throws Divergence on a
// non-finite loss.
MmdAttackResult mmd_attack(const AttackData& data, const AttackConfig& config,
                           const ImageEncoder* init = nullptr);

struct SensitiveAttackReport {
  double auc_on_zstar = 0.0;  // held-out public data under the estimated encoder
  double auc_on_z = 0.0;      // the private encoded data
  std::size_t public_train = 0;
  std::size_t public_heldout = 0;
};

// Trains a set classifier on {(T_est(x), S(x))} for the public images (80%)
// and scores held-out public encodings and the private encoded rows.
SensitiveAttackReport sensitive_feature_attack(const ImageEncoder& estimated,
                                               const Tensor& public_images,
                                               const std::vector<int>& public_sensitive,
                                               const Tensor& encoded_private,
                                               const std::vector<int>& private_sensitive,
                                               const ClassifierSpec& spec, std::uint64_t seed);

struct MatchingConfig {
  std::size_t iterations = 400;
  std::size_t batch_size = 32;
  std::size_t embedding = 16;
  std::size_t hidden = 64;
  std::size_t components = 4;  // principal axes used in the summaries
  double lr = 3e-3;
  std::uint64_t seed = 0;
  ImageEncoderSpec architecture;
};

// Groups encoded rows [B*N, h] into N position clusters with one row of each
// sample per cluster (k-means with a per-sample assignment step). Returns the
// cluster of every row.
std::vector<std::size_t> cluster_positions(const Tensor& rows, std::size_t patches,
                                           std::size_t iterations = 20);

// Similarity model M(x, z) = f(x) . g(z) (two small MLPs) over order-invariant
// per-sample summaries. Rows are reduced to residuals from their position
// centroid (grid positions for plaintexts, cluster_positions for ciphertexts);
// a sample is summarized by its sorted residual norms, sorted pairwise residual
// distances, the norm of its mean residual and that mean's projections (signed
// and absolute) on the leading principal axes. Every summary is rank-normalized
// over the dataset, so the ciphertext side never sees the scale of a
// particular encoder.
class MatchingModel {
 public:
  // [n, n] with entry (i, j) = M(x_i, z_j).
  Tensor score_matrix(const Tensor& images, const Tensor& encoded_rows) const;
  const ParamStore& params() const { return params_; }
  std::size_t patches() const { return patches_; }

  static std::size_t summary_width(std::size_t patches, std::size_t components);
  static Tensor summaries(const Tensor& rows, std::size_t patches,
                          const std::vector<std::size_t>& positions, std::size_t components);
  Tensor plain_summaries(const Tensor& images) const;
  Tensor cipher_summaries(const Tensor& encoded_rows) const;

 private:
  friend MatchingModel matching_model_train(const Tensor&, const MatchingConfig&);
  friend MatchingModel untrained_matching_model(const Tensor&, const MatchingConfig&);
  Var scores(Tape& tape, const std::map<std::string, Var>& p, const Tensor& plain_features,
             const Tensor& cipher_features) const;

  ParamStore params_;
  std::size_t patches_ = 0;
  std::size_t patch_size_ = 0;
  std::size_t components_ = 0;
};

// Trains M on a fixed dataset, drawing a fresh encoder of config.architecture
// every iteration and using the other samples of the minibatch as negatives.
MatchingModel matching_model_train(const Tensor& images, const MatchingConfig& config);
MatchingModel untrained_matching_model(const Tensor& images, const MatchingConfig& config);

struct MatchingReport {
  double auc = 0.0;       // matched vs mismatched pairs
  double accuracy = 0.0;  // fraction recovered by the assignment
  std::vector<std::size_t> assignment;  // assignment[i] = ciphertext index for x_i
};

// encoded_rows holds the ciphertexts in an unknown sample order; truth[i] is
// the index of x_i's ciphertext.
MatchingReport evaluate_matching(const MatchingModel& model, const Tensor& images,
                                 const Tensor& encoded_rows,
                                 const std::vector<std::size_t>& truth);

// Reorders per-sample blocks of encoded rows: out block i = in block order[i].
Tensor reorder_samples(const Tensor& rows, std::size_t patches,
                       const std::vector<std::size_t>& order);

struct PlaintextAttackConfig {
  std::size_t steps = 1500;
  double lr = 1e-2;  // cosine-decayed to 0
  double heldout_fraction = 0.25;
  std::uint64_t seed = 0;
  ImageEncoderSpec architecture;
};

struct PlaintextAttackReport {
  double train_mse = 0.0;
  double heldout_mse = 0.0;
  double random_mse = 0.0;  // fresh random encoder on the same held-out pairs
  double ratio = 0.0;       // heldout_mse / random_mse
  std::vector<double> loss_curve;
};

struct PlaintextAttackResult {
  ImageEncoder encoder;
  PlaintextAttackReport report;
};

// Gradient descent on a candidate encoder so that T(x) matches the paired
// ciphertext (rows aligned per sample at every step). encoded_rows must come
// from encoding all images as one batch; the candidate is run on the same
// batch and pairs are split into fitted and held-out ones. Starts from init
// when given, otherwise from a fresh encoder of config.architecture.
PlaintextAttackResult plaintext_attack(const Tensor& images, const Tensor& encoded_rows,
                                       const PlaintextAttackConfig& config,
                                       const ImageEncoder* init = nullptr);

// Train/held-out errors of an encoder on paired ciphertexts with the split of
// config, against a fresh random encoder of config.architecture.
PlaintextAttackReport evaluate_plaintext_recovery(const ImageEncoder& recovered,
                                                  const Tensor& images, const Tensor& paired_rows,
                                                  const PlaintextAttackConfig& config);

// Pairs plaintexts with unordered ciphertexts by minimum total aligned squared
// error under the candidate: result[i] = ciphertext block for images[i].
std::vector<std::size_t> pair_by_encoder(const ImageEncoder& candidate, const Tensor& images,
                                         const Tensor& unordered_rows);

struct RecoveryChainResult {
  PlaintextAttackResult attack;  // last round
  std::vector<std::size_t> assignment;  // pairing used by the last round
  std::vector<std::vector<std::size_t>> assignments;  // per round
};

// Matching game followed by the plaintext attack. Round 1 fits the pairs
// chosen by M; each further round re-pairs with the current candidate
// (pair_by_encoder) and continues fitting from it.
RecoveryChainResult recover_from_unordered(const Tensor& images, const Tensor& unordered_rows,
                                           const MatchingModel& model,
                                           const PlaintextAttackConfig& config,
                                           std::size_t rounds = 3);

}  // namespace peopl
