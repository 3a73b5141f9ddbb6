#include "peopl/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

void require_kernel(const KernelSpec& kernel) {
  require(!kernel.bandwidths.empty(), "kernel needs at least one bandwidth");
  for (double s : kernel.bandwidths) require(s > 0, "kernel bandwidths must be positive");
}

Var kernel_of(Var sq_dist, const KernelSpec& kernel) {
  Var acc;
  for (std::size_t i = 0; i < kernel.bandwidths.size(); ++i) {
    const double s = kernel.bandwidths[i];
    Var k = exp(scale(sq_dist, -1.0 / (2 * s * s)));
    acc = i == 0 ? k : add(acc, k);
  }
  return scale(acc, 1.0 / static_cast<double>(kernel.bandwidths.size()));
}

// Value of the mixture kernel at distance 0, computed the way kernel_of does.
double kernel_diagonal(const KernelSpec& kernel) {
  double acc = 0;
  for (std::size_t i = 0; i < kernel.bandwidths.size(); ++i) acc += 1.0;
  return (1.0 / static_cast<double>(kernel.bandwidths.size())) * acc;
}

bool lexicographically_less(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return a.shape() < b.shape();
  return std::lexicographical_compare(a.values().begin(), a.values().end(),
                                      b.values().begin(), b.values().end());
}

// Samples [B,...] -> the listed samples, in order.
Tensor take_samples(const Tensor& batch, const std::vector<std::size_t>& samples) {
  const std::size_t per = batch.size() / batch.dim(0);
  std::vector<std::size_t> shape = batch.shape();
  shape[0] = samples.size();
  std::vector<double> data;
  data.reserve(samples.size() * per);
  for (std::size_t s : samples) {
    require(s < batch.dim(0), "sample index out of range");
    data.insert(data.end(), batch.data() + s * per, batch.data() + (s + 1) * per);
  }
  return Tensor(std::move(shape), std::move(data));
}

// Row blocks of `patches` rows for the listed samples.
Tensor take_blocks(const Tensor& rows, std::size_t patches,
                   const std::vector<std::size_t>& samples) {
  const std::size_t h = rows.dim(1);
  std::vector<double> data;
  data.reserve(samples.size() * patches * h);
  for (std::size_t s : samples) {
    require((s + 1) * patches <= rows.dim(0), "sample block out of range");
    data.insert(data.end(), rows.data() + s * patches * h, rows.data() + (s + 1) * patches * h);
  }
  return Tensor({samples.size() * patches, h}, std::move(data));
}

std::vector<std::size_t> shuffled_range(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

double sq_distance(const double* a, const double* b, std::size_t h) {
  double s = 0;
  for (std::size_t l = 0; l < h; ++l) s += (a[l] - b[l]) * (a[l] - b[l]);
  return s;
}

// Alignment of one sample block: perm[i] = truth row matched to estimated row i.
std::vector<std::size_t> align_block(const double* est, const double* truth, std::size_t n,
                                     std::size_t h) {
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      cost[i * n + j] = sq_distance(est + i * h, truth + j * h, h);
      if (!std::isfinite(cost[i * n + j])) throw Divergence("encoded rows are too large to align");
    }
  }
  return min_cost_assignment(cost, n);
}

double aligned_sse(const Tensor& estimated, const Tensor& truth, std::size_t patches) {
  require(estimated.rank() == 2 && estimated.shape() == truth.shape(),
          "aligned error: shapes " + shape_string(estimated.shape()) + " vs " +
              shape_string(truth.shape()));
  require(patches > 0 && estimated.dim(0) % patches == 0, "rows are not whole samples");
  const std::size_t h = estimated.dim(1);
  double total = 0;
  for (std::size_t b = 0; b < estimated.dim(0) / patches; ++b) {
    const double* e = estimated.data() + b * patches * h;
    const double* t = truth.data() + b * patches * h;
    const std::vector<std::size_t> perm = align_block(e, t, patches, h);
    for (std::size_t i = 0; i < patches; ++i) total += sq_distance(e + i * h, t + perm[i] * h, h);
  }
  return total;
}

std::string layer(const char* side, std::size_t i, const char* part) {
  return std::string(side) + std::to_string(i) + "." + part;
}

}  // namespace

KernelSpec median_heuristic_kernel(const Tensor& a, const Tensor& b,
                                   const std::vector<double>& multipliers,
                                   std::size_t max_points) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "median heuristic needs matrices of equal width");
  const Tensor pooled = concat_rows({a, b});
  const std::size_t m = pooled.dim(0), h = pooled.dim(1);
  require(m >= 2 && max_points >= 2, "median heuristic needs two points");
  std::vector<std::size_t> rows;
  const std::size_t take = std::min(m, max_points);
  for (std::size_t i = 0; i < take; ++i) rows.push_back(i * m / take);
  std::vector<double> dist;
  dist.reserve(take * (take - 1) / 2);
  for (std::size_t i = 0; i < take; ++i) {
    for (std::size_t j = i + 1; j < take; ++j) {
      dist.push_back(std::sqrt(sq_distance(pooled.data() + rows[i] * h,
                                           pooled.data() + rows[j] * h, h)));
    }
  }
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(dist.begin(), dist.begin() + mid));
  }
  require(median > 0, "median pairwise distance is zero");
  KernelSpec kernel;
  for (double f : multipliers) kernel.bandwidths.push_back(f * median);
  require_kernel(kernel);
  return kernel;
}

Tensor gram_matrix(const Tensor& a, const Tensor& b, const KernelSpec& kernel) {
  require_kernel(kernel);
  Tape tape;
  return kernel_of(pairwise_sq_dist(tape.constant(a), tape.constant(b)), kernel).value();
}

Var mmd_unbiased(Var a, Var b, const KernelSpec& kernel) {
  require_kernel(kernel);
  require(a.value().rank() == 2 && b.value().rank() == 2, "mmd: inputs must be matrices");
  require(a.value().dim(0) >= 2 && b.value().dim(0) >= 2, "mmd: each set needs at least 2 rows");
  require(a.value().dim(1) == b.value().dim(1), "mmd: feature dimension mismatch");
  if (lexicographically_less(b.value(), a.value())) std::swap(a, b);
  const double m = static_cast<double>(a.value().dim(0));
  const double n = static_cast<double>(b.value().dim(0));
  const double diag = kernel_diagonal(kernel);
  Var xx = scale(add_scalar(sum(kernel_of(pairwise_sq_dist(a, a), kernel)), -m * diag),
                 1.0 / (m * (m - 1)));
  Var yy = scale(add_scalar(sum(kernel_of(pairwise_sq_dist(b, b), kernel)), -n * diag),
                 1.0 / (n * (n - 1)));
  Var xy = scale(sum(kernel_of(pairwise_sq_dist(a, b), kernel)), 2.0 / (m * n));
  return sub(add(xx, yy), xy);
}

double mmd_unbiased(const Tensor& a, const Tensor& b, const KernelSpec& kernel) {
  Tape tape;
  return mmd_unbiased(tape.constant(a), tape.constant(b), kernel).value().item();
}

PermutationTest mmd_permutation_test(const Tensor& a, const Tensor& b,
                                     const KernelSpec& kernel, std::size_t permutations,
                                     std::uint64_t seed) {
  require(permutations >= 2, "permutation test needs at least 2 permutations");
  PermutationTest result;
  result.statistic = mmd_unbiased(a, b, kernel);
  const Tensor pooled = concat_rows({a, b});
  const std::size_t m = a.dim(0), total = pooled.dim(0);
  std::vector<double> null;
  std::size_t exceed = 0;
  for (std::size_t k = 0; k < permutations; ++k) {
    const std::vector<std::size_t> order = shuffled_range(total, derive_seed(seed, "mmd_perm", k));
    const Tensor pa = take_samples(pooled, {order.begin(), order.begin() + m});
    const Tensor pb = take_samples(pooled, {order.begin() + m, order.end()});
    null.push_back(mmd_unbiased(pa, pb, kernel));
    exceed += null.back() >= result.statistic;
  }
  const double p = static_cast<double>(permutations);
  result.null_mean = std::accumulate(null.begin(), null.end(), 0.0) / p;
  double var = 0;
  for (double v : null) var += (v - result.null_mean) * (v - result.null_mean);
  result.null_stddev = std::sqrt(var / (p - 1));
  result.p_value = static_cast<double>(1 + exceed) / (1 + p);
  return result;
}

std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n) {
  require(cost.size() == n * n, "assignment: cost matrix is not n x n");
  for (double c : cost) require(std::isfinite(c), "assignment: costs must be finite");
  if (n == 0) return {};
  // Potentials method, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

double aligned_mse(const Tensor& estimated, const Tensor& truth, std::size_t patches) {
  require(estimated.size() > 0, "aligned_mse of an empty batch");
  return aligned_sse(estimated, truth, patches) / static_cast<double>(estimated.size());
}

std::vector<double> mean_row(const Tensor& rows) {
  require(rows.rank() == 2 && rows.dim(0) > 0, "mean_row needs a non-empty matrix");
  const std::size_t m = rows.dim(0), h = rows.dim(1);
  std::vector<double> mean(h, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < h; ++j) mean[j] += rows[i * h + j];
  }
  for (double& v : mean) v /= static_cast<double>(m);
  return mean;
}

double normalized_mse(const Tensor& estimated, const Tensor& truth, std::size_t patches,
                      const std::vector<double>& reference_mean) {
  require(estimated.size() > 0, "normalized_mse of an empty held-out set");
  require(truth.rank() == 2 && reference_mean.size() == truth.dim(1),
          "reference mean width differs from the encoding width");
  const std::size_t h = truth.dim(1);
  double baseline = 0;
  for (std::size_t i = 0; i < truth.dim(0); ++i) {
    baseline += sq_distance(truth.data() + i * h, reference_mean.data(), h);
  }
  require(baseline > 0, "normalized_mse: the mean predictor is exact");
  return aligned_sse(estimated, truth, patches) / baseline;
}

double normalized_mse(const ImageEncoder& estimated, const ImageEncoder& truth,
                      const Tensor& heldout, const std::vector<double>& reference_mean) {
  require(heldout.rank() == 4 && heldout.dim(0) > 0, "normalized_mse of an empty held-out set");
  require(estimated.num_patches() == truth.num_patches() &&
              estimated.output_dim() == truth.output_dim(),
          "normalized_mse: encoders have different output shapes");
  return normalized_mse(estimated.forward(heldout), truth.forward(heldout), truth.num_patches(),
                        reference_mean);
}

Var mmd_attack_loss(Tape& tape, const ImageEncoder& architecture,
                    const std::map<std::string, Var>& params, const Tensor& public_images,
                    const std::vector<int>& public_labels, const Tensor& encoded_rows,
                    const std::vector<int>& private_labels, const KernelSpec& kernel) {
  Var generated = architecture.forward(tape, params, public_images);
  if (public_labels.empty() || private_labels.empty()) {
    return mmd_unbiased(generated, tape.constant(encoded_rows), kernel);
  }
  const std::size_t patches = architecture.num_patches(), h = architecture.output_dim();
  require(public_labels.size() == public_images.dim(0) &&
              private_labels.size() * patches == encoded_rows.dim(0),
          "attack labels do not match the samples");
  std::vector<int> classes(public_labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  Var total;
  bool any = false;
  for (int y : classes) {
    std::vector<std::size_t> gen_index, real_samples;
    for (std::size_t b = 0; b < public_labels.size(); ++b) {
      if (public_labels[b] != y) continue;
      for (std::size_t l = 0; l < patches * h; ++l) gen_index.push_back(b * patches * h + l);
    }
    for (std::size_t b = 0; b < private_labels.size(); ++b) {
      if (private_labels[b] == y) real_samples.push_back(b);
    }
    const std::size_t gen_rows = gen_index.size() / h;
    if (gen_rows < 2 || real_samples.size() * patches < 2) continue;
    Var term = mmd_unbiased(gather(generated, std::move(gen_index), {gen_rows, h}),
                            tape.constant(take_blocks(encoded_rows, patches, real_samples)),
                            kernel);
    total = any ? add(total, term) : term;
    any = true;
  }
  require(any, "no label has enough rows on both sides of the batch");
  return total;
}

MmdAttackResult mmd_attack(const AttackData& data, const AttackConfig& config,
                           const ImageEncoder* init) {
  require(config.epochs > 0 && config.batch_size > 0, "attack epochs and batch size must be positive");
  require(!config.learning_rates.empty() && !config.weight_decays.empty(), "empty attack grid");
  for (double lr : config.learning_rates) require(lr > 0, "learning rates must be positive");
  for (double wd : config.weight_decays) require(wd >= 0, "weight decay must be non-negative");
  require(config.validation_fraction > 0 && config.validation_fraction < 1,
          "validation fraction must be in (0,1)");
  const Tensor& encoded_private = data.encoded_private;
  const Tensor& public_images = data.public_images;
  require(public_images.rank() == 4 && public_images.dim(0) > 0, "public set is empty");

  ImageEncoderSpec arch = config.architecture;
  const std::uint64_t init_seed = derive_seed(config.seed, "theta_init");
  arch.seed = init_seed;
  const ImageEncoder start = init != nullptr ? *init : ImageEncoder::build(arch);
  const std::size_t patches = start.num_patches();
  require(encoded_private.rank() == 2 && encoded_private.dim(1) == start.output_dim() &&
              encoded_private.dim(0) % patches == 0,
          "encoded rows " + shape_string(encoded_private.shape()) +
              " do not fit the attack architecture");

  const std::size_t n_priv = encoded_private.dim(0) / patches;
  const std::size_t n_pub = public_images.dim(0);
  const bool conditional = config.class_conditional && !data.private_labels.empty() &&
                           !data.public_labels.empty();
  if (conditional) {
    require(data.private_labels.size() == n_priv && data.public_labels.size() == n_pub,
            "attack labels do not match the samples");
  }
  auto cut = [&](std::size_t n, const char* stage) {
    const std::vector<std::size_t> order = shuffled_range(n, derive_seed(config.seed, stage));
    const auto n_val = static_cast<std::size_t>(
        std::floor(config.validation_fraction * static_cast<double>(n)));
    require(n_val >= 2 && n - n_val >= 2, "too few samples for a validation split");
    return std::pair{std::vector<std::size_t>(order.begin() + n_val, order.end()),
                     std::vector<std::size_t>(order.begin(), order.begin() + n_val)};
  };
  auto pick = [&](const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    if (!conditional) return out;
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  };
  const auto [priv_train, priv_val] = cut(n_priv, "private_split");
  const auto [pub_train, pub_val] = cut(n_pub, "public_split");
  const Tensor z_train = take_blocks(encoded_private, patches, priv_train);
  const Tensor z_val = take_blocks(encoded_private, patches, priv_val);
  const Tensor p_train = take_samples(public_images, pub_train);
  const Tensor p_val = take_samples(public_images, pub_val);
  const std::vector<int> zl_train = pick(data.private_labels, priv_train);
  const std::vector<int> zl_val = pick(data.private_labels, priv_val);
  const std::vector<int> pl_train = pick(data.public_labels, pub_train);
  const std::vector<int> pl_val = pick(data.public_labels, pub_val);

  MmdAttackResult best;
  best.report.config = config;
  best.report.class_conditional = conditional;
  best.report.init_seed = init != nullptr ? 0 : init_seed;
  // Bandwidths come from the real ciphertext only and stay fixed.
  best.report.kernel = median_heuristic_kernel(z_train, z_val, config.bandwidth_multipliers);
  const KernelSpec& kernel = best.report.kernel;
  auto validation = [&](const ImageEncoder& enc) {
    Tape tape;
    return mmd_attack_loss(tape, enc, bind(tape, enc.params(), false), p_val, pl_val, z_val,
                           zl_val, kernel)
        .value()
        .item();
  };
  best.report.initial_validation_mmd = validation(start);

  const std::size_t k = std::min({config.batch_size, pub_train.size(), priv_train.size()});
  double best_val = std::numeric_limits<double>::infinity();
  for (double lr : config.learning_rates) {
    for (double wd : config.weight_decays) {
      ImageEncoder theta = start;
      Adam adam(lr, wd);
      std::vector<double> losses, vals;
      for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const std::vector<std::size_t> pub_order =
            shuffled_range(pub_train.size(), derive_seed(config.seed, "public_epoch", epoch));
        const std::vector<std::size_t> priv_order =
            shuffled_range(priv_train.size(), derive_seed(config.seed, "private_epoch", epoch));
        double epoch_loss = 0;
        std::size_t steps = 0;
        for (std::size_t start_row = 0; start_row + k <= pub_order.size(); start_row += k) {
          std::vector<std::size_t> pb(pub_order.begin() + start_row,
                                      pub_order.begin() + start_row + k);
          std::vector<std::size_t> zb;
          for (std::size_t i = 0; i < k; ++i) {
            zb.push_back(priv_order[(steps * k + i) % priv_order.size()]);
          }
          Tape tape;
          auto bound = bind(tape, theta.params(), true);
          std::vector<int> pbl, zbl;
          if (conditional) {
            for (std::size_t i : pb) pbl.push_back(pl_train[i]);
            for (std::size_t i : zb) zbl.push_back(zl_train[i]);
          }
          Var loss = mmd_attack_loss(tape, theta, bound, take_samples(p_train, pb), pbl,
                                     take_blocks(z_train, patches, zb), zbl, kernel);
          const double value = loss.value().item();
          if (!std::isfinite(value)) {
            throw Divergence("MMD attack loss is not finite (lr " + std::to_string(lr) +
                             ", weight decay " + std::to_string(wd) + ", epoch " +
                             std::to_string(epoch) + ", step " + std::to_string(steps) + ")");
          }
          tape.backward(loss);
          adam.step(theta.mutable_params(), collect_grads(tape, bound));
          epoch_loss += value;
          ++steps;
        }
        losses.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(steps, 1)));
        vals.push_back(validation(theta));
      }
      best.report.grid.push_back({lr, wd, vals.back()});
      if (vals.back() < best_val) {
        best_val = vals.back();
        best.encoder = theta;
        best.report.lr = lr;
        best.report.weight_decay = wd;
        best.report.loss_curve = losses;
        best.report.validation_curve = vals;
        best.report.validation_mmd = vals.back();
      }
    }
  }
  return best;
}

SensitiveAttackReport sensitive_feature_attack(const ImageEncoder& estimated,
                                               const Tensor& public_images,
                                               const std::vector<int>& public_sensitive,
                                               const Tensor& encoded_private,
                                               const std::vector<int>& private_sensitive,
                                               const ClassifierSpec& spec, std::uint64_t seed) {
  require(public_images.rank() == 4 && public_images.dim(0) == public_sensitive.size(),
          "public images and sensitive labels disagree");
  const std::size_t patches = estimated.num_patches();
  SetDataset zstar;
  zstar.set_size = patches;
  zstar.rows = estimated.encode_batch(public_images, derive_seed(seed, "public_shuffle"));
  zstar.labels = public_sensitive;
  SetDataset z;
  z.set_size = patches;
  z.rows = encoded_private;
  z.labels = private_sensitive;
  require(encoded_private.rank() == 2 && z.size() == private_sensitive.size() &&
              encoded_private.dim(0) % patches == 0,
          "encoded private rows and sensitive labels disagree");

  const Split split = split_indices(zstar.size(), derive_seed(seed, "public_split"), 0.8, 0.0);
  ClassifierSpec run = spec;
  run.seed = derive_seed(seed, "sensitive_classifier");
  const Classifier clf = train_classifier(zstar.subset(split.train), run);
  SensitiveAttackReport report;
  report.public_train = split.train.size();
  report.public_heldout = split.test.size();
  report.auc_on_zstar = evaluate_auc(clf, zstar.subset(split.test));
  report.auc_on_z = evaluate_auc(clf, z);
  return report;
}

std::vector<std::size_t> cluster_positions(const Tensor& rows, std::size_t patches,
                                           std::size_t iterations) {
  require(rows.rank() == 2 && patches > 0 && rows.dim(0) % patches == 0 && rows.dim(0) > 0,
          "cluster_positions: rows are not whole samples");
  const std::size_t m = rows.dim(0), h = rows.dim(1), n = m / patches;
  // Centroids start at the first sample's rows; every step assigns each
  // sample's rows to distinct clusters, then recomputes the centroids.
  std::vector<double> centroids(rows.data(), rows.data() + patches * h);
  std::vector<std::size_t> assign(m);
  std::vector<double> cost(patches * patches);
  for (std::size_t it = 0; it <= iterations; ++it) {
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < patches; ++i) {
        for (std::size_t c = 0; c < patches; ++c) {
          cost[i * patches + c] =
              sq_distance(rows.data() + (b * patches + i) * h, centroids.data() + c * h, h);
        }
      }
      const std::vector<std::size_t> a = min_cost_assignment(cost, patches);
      for (std::size_t i = 0; i < patches; ++i) assign[b * patches + i] = a[i];
    }
    if (it == iterations) break;
    std::fill(centroids.begin(), centroids.end(), 0.0);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t l = 0; l < h; ++l) {
        centroids[assign[r] * h + l] += rows[r * h + l] / static_cast<double>(n);
      }
    }
  }
  return assign;
}

namespace {

// Top eigenvectors of a symmetric h x h matrix by power iteration with
// deflation.
std::vector<std::vector<double>> top_eigenvectors(const std::vector<double>& c, std::size_t h,
                                                  std::size_t count) {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < count && k < h; ++k) {
    std::vector<double> v(h), w(h);
    for (std::size_t i = 0; i < h; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i * (k + 1));
    for (int it = 0; it < 300; ++it) {
      for (std::size_t i = 0; i < h; ++i) {
        w[i] = std::inner_product(c.begin() + i * h, c.begin() + (i + 1) * h, v.begin(), 0.0);
      }
      for (const auto& u : out) {
        const double d = std::inner_product(u.begin(), u.end(), w.begin(), 0.0);
        for (std::size_t i = 0; i < h; ++i) w[i] -= d * u[i];
      }
      const double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      if (norm < 1e-15) break;
      for (std::size_t i = 0; i < h; ++i) v[i] = w[i] / norm;
    }
    out.push_back(v);
  }
  return out;
}

// Replaces each column by centered uniform scores of its ranks (unit variance).
void rank_normalize(Tensor& f) {
  const std::size_t n = f.dim(0), w = f.dim(1);
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < w; ++j) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return f.at(a, j) < f.at(b, j); });
    for (std::size_t r = 0; r < n; ++r) {
      f.at(order[r], j) = ((static_cast<double>(r) + 0.5) / static_cast<double>(n) - 0.5) *
                          std::sqrt(12.0);
    }
  }
}

}  // namespace

std::size_t MatchingModel::summary_width(std::size_t patches, std::size_t components) {
  return patches + patches * (patches - 1) / 2 + 1 + 2 * components;
}

Tensor MatchingModel::summaries(const Tensor& rows, std::size_t patches,
                                const std::vector<std::size_t>& positions,
                                std::size_t components) {
  require(rows.rank() == 2 && patches > 0 && rows.dim(0) % patches == 0 && rows.dim(0) > 0,
          "summaries: rows are not whole samples");
  require(positions.size() == rows.dim(0), "summaries: one position per row is required");
  const std::size_t m = rows.dim(0), n = m / patches, h = rows.dim(1);
  for (std::size_t p : positions) require(p < patches, "summaries: position out of range");

  // Residuals from the per-position centroids, scaled to unit RMS per feature.
  std::vector<double> centroids(patches * h, 0.0);
  std::vector<double> counts(patches, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    counts[positions[r]] += 1.0;
    for (std::size_t l = 0; l < h; ++l) centroids[positions[r] * h + l] += rows[r * h + l];
  }
  for (std::size_t c = 0; c < patches; ++c) {
    for (std::size_t l = 0; l < h; ++l) centroids[c * h + l] /= std::max(counts[c], 1.0);
  }
  Tensor res({m, h});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t l = 0; l < h; ++l) res[r * h + l] = rows[r * h + l] - centroids[positions[r] * h + l];
  }
  for (std::size_t l = 0; l < h; ++l) {
    double ss = 0;
    for (std::size_t r = 0; r < m; ++r) ss += res[r * h + l] * res[r * h + l];
    const double sd = std::sqrt(ss / static_cast<double>(m));
    for (std::size_t r = 0; r < m; ++r) res[r * h + l] = sd > 1e-12 ? res[r * h + l] / sd : 0.0;
  }

  Tensor mean_res({n, h});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t l = 0; l < h; ++l) {
      mean_res[(r / patches) * h + l] += res[r * h + l] / static_cast<double>(patches);
    }
  }
  std::vector<double> cov(h * h, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const double* v = mean_res.data() + b * h;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < h; ++j) cov[i * h + j] += v[i] * v[j] / static_cast<double>(n);
    }
  }
  const auto axes = top_eigenvectors(cov, h, components);

  const std::size_t pairs = patches * (patches - 1) / 2;
  const std::size_t width = summary_width(patches, components);
  Tensor out({n, width});
  std::vector<double> norms(patches), dists(pairs);
  for (std::size_t b = 0; b < n; ++b) {
    const double* block = res.data() + b * patches * h;
    for (std::size_t i = 0; i < patches; ++i) {
      const double* r = block + i * h;
      norms[i] = std::sqrt(std::inner_product(r, r + h, r, 0.0));
    }
    std::size_t q = 0;
    for (std::size_t i = 0; i < patches; ++i) {
      for (std::size_t j = i + 1; j < patches; ++j) {
        dists[q++] = std::sqrt(sq_distance(block + i * h, block + j * h, h));
      }
    }
    std::sort(norms.begin(), norms.end());
    std::sort(dists.begin(), dists.end());
    double* o = out.data() + b * width;
    o = std::copy(norms.begin(), norms.end(), o);
    o = std::copy(dists.begin(), dists.end(), o);
    const double* v = mean_res.data() + b * h;
    *o++ = std::sqrt(std::inner_product(v, v + h, v, 0.0));
    for (std::size_t k = 0; k < components; ++k) {
      const double proj =
          k < axes.size() ? std::inner_product(axes[k].begin(), axes[k].end(), v, 0.0) : 0.0;
      *o++ = proj;
      *o++ = std::fabs(proj);
    }
  }
  // Axis signs are arbitrary; orient each projection to positive skew.
  const std::size_t first = patches + pairs + 1;
  for (std::size_t k = 0; k < components; ++k) {
    const std::size_t j = first + 2 * k;
    double mu = 0, m3 = 0;
    for (std::size_t b = 0; b < n; ++b) mu += out[b * width + j] / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) m3 += std::pow(out[b * width + j] - mu, 3);
    if (m3 < 0) {
      for (std::size_t b = 0; b < n; ++b) out[b * width + j] = -out[b * width + j];
    }
  }
  rank_normalize(out);
  return out;
}

Tensor MatchingModel::plain_summaries(const Tensor& images) const {
  const Tensor rows = patchify(images, patch_size_);
  std::vector<std::size_t> positions(rows.dim(0));
  for (std::size_t r = 0; r < positions.size(); ++r) positions[r] = r % patches_;
  return summaries(rows, patches_, positions, components_);
}

Tensor MatchingModel::cipher_summaries(const Tensor& encoded_rows) const {
  return summaries(encoded_rows, patches_, cluster_positions(encoded_rows, patches_),
                   components_);
}

Var MatchingModel::scores(Tape& tape, const std::map<std::string, Var>& p,
                          const Tensor& plain_features, const Tensor& cipher_features) const {
  auto tower = [&](const char* side, const Tensor& x) {
    Var hidden = relu(add_row(matmul_nt(tape.constant(x), p.at(layer(side, 1, "w"))),
                              p.at(layer(side, 1, "b"))));
    return add_row(matmul_nt(hidden, p.at(layer(side, 2, "w"))), p.at(layer(side, 2, "b")));
  };
  return matmul_nt(tower("x", plain_features), tower("z", cipher_features));
}

Tensor MatchingModel::score_matrix(const Tensor& images, const Tensor& encoded_rows) const {
  const Tensor plain = plain_summaries(images);
  const Tensor cipher = cipher_summaries(encoded_rows);
  require(plain.dim(0) == cipher.dim(0), "score_matrix: sample counts differ");
  Tape tape;
  return scores(tape, bind(tape, params_, false), plain, cipher).value();
}

MatchingModel untrained_matching_model(const Tensor& images, const MatchingConfig& config) {
  require(images.rank() == 4 && images.dim(0) > 0, "matching needs a non-empty image batch");
  require(config.embedding > 0 && config.hidden > 0, "matching model sizes must be positive");
  MatchingModel model;
  const ImageEncoder probe = ImageEncoder::build(config.architecture);
  model.patches_ = probe.num_patches();
  model.patch_size_ = config.architecture.patch;
  model.components_ = config.components;
  const std::size_t f = MatchingModel::summary_width(model.patches_, config.components);
  for (const char* side : {"x", "z"}) {
    auto init = [&](std::size_t l, std::vector<std::size_t> shape, double sd) {
      const std::string name = layer(side, l, "w");
      model.params_.init(name, std::move(shape), InitScheme::gaussian(0, sd),
                         derive_seed(config.seed, name));
      model.params_.init(layer(side, l, "b"), {l == 1 ? config.hidden : config.embedding},
                         InitScheme::constant(0), 0);
    };
    init(1, {config.hidden, f}, std::sqrt(2.0 / static_cast<double>(f)));
    init(2, {config.embedding, config.hidden}, 1.0 / std::sqrt(static_cast<double>(config.hidden)));
  }
  return model;
}

MatchingModel matching_model_train(const Tensor& images, const MatchingConfig& config) {
  MatchingModel model = untrained_matching_model(images, config);
  require(config.batch_size > 0 && config.lr > 0, "matching batch size and lr must be positive");
  const std::size_t n = images.dim(0);
  if (n < 2) return model;  // nothing to contrast
  const Tensor plain = model.plain_summaries(images);
  const std::size_t k = std::min(config.batch_size, n);
  Adam adam(config.lr);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    ImageEncoderSpec spec = config.architecture;
    spec.seed = derive_seed(config.seed, "matching_encoder", it);
    const ImageEncoder t = ImageEncoder::build(spec);
    const Tensor cipher = model.cipher_summaries(
        t.encode_batch(images, derive_seed(config.seed, "matching_shuffle", it)));
    std::vector<std::size_t> batch = shuffled_range(n, derive_seed(config.seed, "matching_batch", it));
    batch.resize(k);
    Tensor targets({k, k});
    for (std::size_t i = 0; i < k; ++i) targets[i * k + i] = 1.0;
    Tape tape;
    auto bound = bind(tape, model.params_, true);
    Var loss = bce_with_logits(
        model.scores(tape, bound, take_samples(plain, batch), take_samples(cipher, batch)), targets);
    if (!std::isfinite(loss.value().item())) {
      throw Divergence("matching model loss is not finite at iteration " + std::to_string(it));
    }
    tape.backward(loss);
    adam.step(model.params_, collect_grads(tape, bound));
  }
  return model;
}

MatchingReport evaluate_matching(const MatchingModel& model, const Tensor& images,
                                 const Tensor& encoded_rows,
                                 const std::vector<std::size_t>& truth) {
  const std::size_t n = images.dim(0);
  require(truth.size() == n, "matching truth has the wrong length");
  MatchingReport report;
  if (n == 1) {
    report.auc = 1.0;
    report.accuracy = 1.0;
    report.assignment = {0};
    return report;
  }
  const Tensor s = model.score_matrix(images, encoded_rows);
  std::vector<double> scores(s.values());
  std::vector<int> labels(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) labels[i * n + truth[i]] = 1;
  report.auc = auc(scores, labels);
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n * n; ++i) cost[i] = -scores[i];
  report.assignment = min_cost_assignment(cost, n);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += report.assignment[i] == truth[i];
  report.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return report;
}

Tensor reorder_samples(const Tensor& rows, std::size_t patches,
                       const std::vector<std::size_t>& order) {
  require(rows.rank() == 2 && patches > 0 && rows.dim(0) == order.size() * patches,
          "reorder_samples: order does not cover the rows");
  return take_blocks(rows, patches, order);
}

namespace {

struct PairSplit {
  std::vector<std::size_t> fit, held;
};

PairSplit split_pairs(std::size_t n, const PlaintextAttackConfig& config) {
  const std::vector<std::size_t> order = shuffled_range(n, derive_seed(config.seed, "pairs_split"));
  std::size_t n_held = static_cast<std::size_t>(
      std::floor(config.heldout_fraction * static_cast<double>(n)));
  if (n_held == 0 && n >= 2 && config.heldout_fraction > 0) n_held = 1;
  PairSplit split;
  split.held.assign(order.begin(), order.begin() + n_held);
  split.fit.assign(order.begin() + n_held, order.end());
  require(!split.fit.empty(), "plaintext attack: no pairs left to fit");
  return split;
}

void check_pairs(const ImageEncoder& candidate, const Tensor& images, const Tensor& rows) {
  require(images.rank() == 4 && images.dim(0) >= 1, "plaintext attack needs at least one pair");
  const std::size_t n = images.dim(0), patches = candidate.num_patches();
  require(rows.rank() == 2 && rows.dim(0) == n * patches && rows.dim(1) == candidate.output_dim(),
          "paired ciphertexts " + shape_string(rows.shape()) + " do not fit the architecture");
}

ImageEncoder starting_candidate(const PlaintextAttackConfig& config, const ImageEncoder* init) {
  if (init) {
    require(init->spec().kind == config.architecture.kind &&
                init->num_patches() == ImageEncoder::build(config.architecture).num_patches(),
            "plaintext attack: initial encoder does not match the architecture");
    return *init;
  }
  ImageEncoderSpec arch = config.architecture;
  arch.seed = derive_seed(config.seed, "candidate");
  return ImageEncoder::build(arch);
}

}  // namespace

PlaintextAttackResult plaintext_attack(const Tensor& images, const Tensor& encoded_rows,
                                       const PlaintextAttackConfig& config,
                                       const ImageEncoder* init) {
  require(images.rank() == 4 && images.dim(0) >= 1, "plaintext attack needs at least one pair");
  require(config.steps > 0 && config.lr > 0, "plaintext attack steps and lr must be positive");
  PlaintextAttackResult result{starting_candidate(config, init), {}};
  ImageEncoder& candidate = result.encoder;
  check_pairs(candidate, images, encoded_rows);
  const std::size_t patches = candidate.num_patches(), h = candidate.output_dim();
  const PairSplit split = split_pairs(images.dim(0), config);
  const std::vector<std::size_t>& fit = split.fit;

  Adam adam(config.lr);
  const double pi = std::acos(-1.0);
  std::vector<double> curve;
  for (std::size_t step = 0; step < config.steps; ++step) {
    adam.set_lr(config.lr * 0.5 *
                (1 + std::cos(pi * static_cast<double>(step) / static_cast<double>(config.steps))));
    Tape tape;
    auto bound = bind(tape, candidate.params(), true);
    Var out = candidate.forward(tape, bound, images);
    for (double v : out.value().values()) {
      if (!std::isfinite(v)) {
        throw Divergence("plaintext attack outputs are not finite at step " + std::to_string(step));
      }
    }
    // Align each fitted sample's rows to the current output, then regress.
    std::vector<std::size_t> index;
    Tensor target({fit.size() * patches, h});
    for (std::size_t q = 0; q < fit.size(); ++q) {
      const std::size_t b = fit[q];
      const double* e = out.value().data() + b * patches * h;
      const double* t = encoded_rows.data() + b * patches * h;
      const std::vector<std::size_t> perm = align_block(e, t, patches, h);
      for (std::size_t i = 0; i < patches; ++i) {
        for (std::size_t l = 0; l < h; ++l) {
          index.push_back((b * patches + i) * h + l);
          target[(q * patches + i) * h + l] = t[perm[i] * h + l];
        }
      }
    }
    Var fitted = gather(out, std::move(index), {fit.size() * patches, h});
    Var loss = mean(square(sub(fitted, tape.constant(target))));
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw Divergence("plaintext attack loss is not finite at step " + std::to_string(step));
    }
    curve.push_back(value);
    tape.backward(loss);
    adam.step(candidate.mutable_params(), collect_grads(tape, bound));
  }
  result.report = evaluate_plaintext_recovery(candidate, images, encoded_rows, config);
  result.report.loss_curve = std::move(curve);
  return result;
}

PlaintextAttackReport evaluate_plaintext_recovery(const ImageEncoder& recovered,
                                                  const Tensor& images, const Tensor& paired_rows,
                                                  const PlaintextAttackConfig& config) {
  check_pairs(recovered, images, paired_rows);
  const std::size_t patches = recovered.num_patches();
  const PairSplit split = split_pairs(images.dim(0), config);
  ImageEncoderSpec arch = config.architecture;
  arch.seed = derive_seed(config.seed, "random_baseline");
  const Tensor out = recovered.forward(images);
  PlaintextAttackReport report;
  report.train_mse = aligned_mse(take_blocks(out, patches, split.fit),
                                 take_blocks(paired_rows, patches, split.fit), patches);
  if (split.held.empty()) {
    report.heldout_mse = report.random_mse = report.ratio = std::nan("");
    return report;
  }
  const Tensor random = ImageEncoder::build(arch).forward(images);
  const Tensor truth = take_blocks(paired_rows, patches, split.held);
  report.heldout_mse = aligned_mse(take_blocks(out, patches, split.held), truth, patches);
  report.random_mse = aligned_mse(take_blocks(random, patches, split.held), truth, patches);
  report.ratio = report.heldout_mse / report.random_mse;
  return report;
}

std::vector<std::size_t> pair_by_encoder(const ImageEncoder& candidate, const Tensor& images,
                                         const Tensor& unordered_rows) {
  check_pairs(candidate, images, unordered_rows);
  const std::size_t n = images.dim(0), patches = candidate.num_patches();
  const std::size_t h = candidate.output_dim(), block = patches * h;
  const Tensor out = candidate.forward(images);
  std::vector<double> cost(n * n), sub(patches * patches);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* e = out.data() + i * block;
      const double* t = unordered_rows.data() + j * block;
      for (std::size_t a = 0; a < patches; ++a) {
        for (std::size_t b = 0; b < patches; ++b) {
          sub[a * patches + b] = sq_distance(e + a * h, t + b * h, h);
          if (!std::isfinite(sub[a * patches + b])) {
            throw Divergence("candidate outputs are too large to pair");
          }
        }
      }
      const std::vector<std::size_t> perm = min_cost_assignment(sub, patches);
      double total = 0;
      for (std::size_t a = 0; a < patches; ++a) total += sub[a * patches + perm[a]];
      cost[i * n + j] = total;
    }
  }
  return min_cost_assignment(cost, n);
}

RecoveryChainResult recover_from_unordered(const Tensor& images, const Tensor& unordered_rows,
                                           const MatchingModel& model,
                                           const PlaintextAttackConfig& config,
                                           std::size_t rounds) {
  require(rounds >= 1, "recovery needs at least one round");
  const std::size_t n = images.dim(0);
  RecoveryChainResult result;
  std::vector<std::size_t> assignment;
  if (n == 1) {
    assignment = {0};
  } else {
    const Tensor s = model.score_matrix(images, unordered_rows);
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n * n; ++i) cost[i] = -s[i];
    assignment = min_cost_assignment(cost, n);
  }
  const ImageEncoder* init = nullptr;
  for (std::size_t r = 0; r < rounds; ++r) {
    result.assignments.push_back(assignment);
    PlaintextAttackResult fit =
        plaintext_attack(images, reorder_samples(unordered_rows, model.patches(), assignment),
                         config, init);
    result.attack = std::move(fit);
    init = &result.attack.encoder;
    if (r + 1 < rounds) assignment = pair_by_encoder(result.attack.encoder, images, unordered_rows);
  }
  result.assignment = assignment;
  return result;
}

}  // namespace peopl
