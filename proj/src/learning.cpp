#include "peopl/learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

void require_two_classes(const std::vector<int>& labels, const char* what) {
  bool pos = false, neg = false;
  for (int y : labels) {
    require(y == 0 || y == 1, std::string(what) + ": labels must be 0 or 1");
    pos = pos || y == 1;
    neg = neg || y == 0;
  }
  require(pos && neg, std::string(what) + ": both classes must be present");
}

std::string layer(std::size_t i, const char* part) {
  return "mlp" + std::to_string(i) + "." + part;
}

}  // namespace

SetDataset SetDataset::subset(const std::vector<std::size_t>& samples) const {
  SetDataset out;
  out.set_size = set_size;
  const std::size_t width = rows.dim(1) * set_size;
  std::vector<double> data;
  data.reserve(samples.size() * width);
  for (std::size_t s : samples) {
    require(s < size(), "subset index out of range");
    data.insert(data.end(), rows.data() + s * width, rows.data() + (s + 1) * width);
    out.labels.push_back(labels[s]);
  }
  out.rows = Tensor({samples.size() * set_size, rows.dim(1)}, std::move(data));
  return out;
}

SetDataset concat(const std::vector<SetDataset>& parts) {
  require(!parts.empty(), "concat of no datasets");
  SetDataset out;
  out.set_size = parts[0].set_size;
  std::vector<Tensor> blocks;
  for (const SetDataset& p : parts) {
    require(p.set_size == out.set_size, "concat: set sizes differ");
    if (p.labels.empty()) continue;
    blocks.push_back(p.rows);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  require(!blocks.empty(), "concat: every part is empty");
  out.rows = concat_rows(blocks);
  return out;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auc: scores and labels differ in length");
  require_two_classes(labels, "auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const double n1 = static_cast<double>(positives);
  const double n0 = static_cast<double>(scores.size() - positives);
  return (rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0);
}

std::string to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::kSetPoolMlp:
      return "set_pool_mlp";
    case ClassifierKind::kLogistic:
      return "logistic";
    case ClassifierKind::kAttentionPool:
      return "attention_pool";
  }
  return "set_pool_mlp";
}

ClassifierKind parse_classifier_kind(const std::string& text) {
  if (text == "set_pool_mlp") return ClassifierKind::kSetPoolMlp;
  if (text == "logistic") return ClassifierKind::kLogistic;
  if (text == "attention_pool") return ClassifierKind::kAttentionPool;
  throw InvalidArgument("unknown classifier kind '" + text + "'");
}

Tensor Classifier::standardize(const Tensor& rows) const {
  require(rows.rank() == 2 && rows.dim(1) == input_dim_,
          "classifier input width " + shape_string(rows.shape()) + " vs " +
              std::to_string(input_dim_));
  Tensor out = rows;
  const std::size_t d = input_dim_;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (out[i * d + j] - mean_[j]) * inv_sd_[j];
  }
  return out;
}

Var Classifier::logits(Tape& tape, const std::map<std::string, Var>& p,
                       const Tensor& standardized_rows, std::size_t set_size) const {
  Var x = tape.constant(standardized_rows);
  Var pooled;
  if (spec_.kind == ClassifierKind::kAttentionPool) {
    Var s = matmul_nt(tanh(matmul_nt(x, p.at("att.v"))), p.at("att.w"));  // [m,1]
    Var e = exp(s);
    Var num = segment_mean(mul_col(x, e), set_size);
    Var den = segment_mean(e, set_size);
    pooled = mul_col(num, reciprocal(den));
  } else {
    pooled = segment_mean(x, set_size);
  }
  const std::size_t layers = spec_.kind == ClassifierKind::kLogistic ? 0 : spec_.hidden.size();
  for (std::size_t i = 0; i < layers; ++i) {
    pooled = relu(add_row(matmul_nt(pooled, p.at(layer(i, "w"))), p.at(layer(i, "b"))));
  }
  return add_row(matmul_nt(pooled, p.at("out.w")), p.at("out.b"));  // [B,1]
}

std::vector<double> Classifier::scores(const SetDataset& data) const {
  Tape tape;
  auto bound = bind(tape, params_, false);
  return logits(tape, bound, standardize(data.rows), data.set_size).value().values();
}

double Classifier::accuracy(const SetDataset& data) const {
  const std::vector<double> s = scores(data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.size(); ++i) correct += (s[i] > 0) == (data.labels[i] == 1);
  return static_cast<double>(correct) / static_cast<double>(s.size());
}

Classifier train_classifier(const SetDataset& train, const ClassifierSpec& spec,
                            const SetDataset* dev) {
  require(train.set_size > 0 && train.labels.size() == train.size(),
          "training set rows and labels disagree");
  require_two_classes(train.labels, "train_classifier");
  require(spec.batch_size > 0 && spec.lr > 0, "batch size and lr must be positive");

  Classifier clf;
  clf.spec_ = spec;
  const std::size_t d = train.dim();
  clf.input_dim_ = d;
  clf.mean_.assign(d, 0.0);
  clf.inv_sd_.assign(d, 1.0);
  const std::size_t m = train.rows.dim(0);
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < m; ++i) mu += train.rows[i * d + j];
    mu /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double c = train.rows[i * d + j] - mu;
      var += c * c;
    }
    clf.mean_[j] = mu;
    clf.inv_sd_[j] = 1.0 / std::max(std::sqrt(var / static_cast<double>(m)), 1e-8);
  }

  auto add = [&](const std::string& name, std::vector<std::size_t> shape, double sd) {
    clf.params_.init(name, std::move(shape), InitScheme::gaussian(0, sd),
                     derive_seed(spec.seed, name));
  };
  auto zeros = [&](const std::string& name, std::size_t n) {
    clf.params_.init(name, {n}, InitScheme::constant(0), 0);
  };
  if (spec.kind == ClassifierKind::kAttentionPool) {
    const std::size_t a = spec.hidden.empty() ? 16 : spec.hidden[0];
    add("att.v", {a, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    add("att.w", {1, a}, 1.0 / std::sqrt(static_cast<double>(a)));
  }
  std::size_t width = d;
  if (spec.kind != ClassifierKind::kLogistic) {
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      add(layer(i, "w"), {spec.hidden[i], width}, std::sqrt(2.0 / static_cast<double>(width)));
      zeros(layer(i, "b"), spec.hidden[i]);
      width = spec.hidden[i];
    }
  }
  add("out.w", {1, width}, 1.0 / std::sqrt(static_cast<double>(width)));
  zeros("out.b", 1);

  const Tensor rows = clf.standardize(train.rows);
  const std::size_t n = train.size(), s = train.set_size;
  SetDataset standardized{rows, s, train.labels};
  Adam adam(spec.lr, spec.weight_decay);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  bool dev_pos = false, dev_neg = false;
  if (dev != nullptr) {
    for (int y : dev->labels) (y == 1 ? dev_pos : dev_neg) = true;
  }
  const bool early_stop = spec.patience > 0 && dev_pos && dev_neg;
  double best_auc = -1;
  ParamStore best = clf.params_;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    Rng rng(derive_seed(spec.seed, "epoch", epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += spec.batch_size) {
      const std::size_t end = std::min(n, start + spec.batch_size);
      const SetDataset batch = standardized.subset(
          std::vector<std::size_t>(order.begin() + start, order.begin() + end));
      Tensor targets({batch.labels.size(), 1});
      for (std::size_t i = 0; i < batch.labels.size(); ++i) targets[i] = batch.labels[i];
      Tape tape;
      auto bound = bind(tape, clf.params_, true);
      Var loss = bce_with_logits(clf.logits(tape, bound, batch.rows, s), targets);
      if (!std::isfinite(loss.value().item())) {
        throw Divergence("classifier loss diverged at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      adam.step(clf.params_, collect_grads(tape, bound));
    }
    if (early_stop) {
      const double a = auc(clf.scores(*dev), dev->labels);
      if (a > best_auc) {
        best_auc = a;
        best = clf.params_;
        since_best = 0;
      } else if (++since_best >= spec.patience) {
        break;
      }
    }
  }
  if (early_stop) clf.params_ = best;
  return clf;
}

double evaluate_auc(const Classifier& classifier, const SetDataset& heldout) {
  return auc(classifier.scores(heldout), heldout.labels);
}

Split split_indices(std::size_t n, std::uint64_t seed, double train, double dev) {
  require(train >= 0 && dev >= 0 && train + dev <= 1.0, "invalid split fractions");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(std::floor(train * static_cast<double>(n)));
  const auto n_dev = static_cast<std::size_t>(std::floor(dev * static_cast<double>(n)));
  Split split;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.dev.assign(order.begin() + n_train, order.begin() + n_train + n_dev);
  split.test.assign(order.begin() + n_train + n_dev, order.end());
  return split;
}

std::string to_string(Setting setting) {
  switch (setting) {
    case Setting::kSingleOwner:
      return "single_owner";
    case Setting::kCombinedClear:
      return "combined_clear";
    case Setting::kCombinedRandomized:
      return "combined_randomized";
  }
  return "single_owner";
}

Setting parse_setting(const std::string& text) {
  if (text == "single_owner") return Setting::kSingleOwner;
  if (text == "combined_clear") return Setting::kCombinedClear;
  if (text == "combined_randomized") return Setting::kCombinedRandomized;
  throw InvalidArgument("unknown setting '" + text + "'");
}

TrainReport run_setting(Setting setting, const std::vector<OwnerData>& owners,
                        const EncodeFn& encode, const ClassifierSpec& spec,
                        std::uint64_t seed, int owner) {
  require(!owners.empty(), "run_setting needs at least one owner");
  if (setting != Setting::kSingleOwner) {
    require(owners.size() >= 2, to_string(setting) + " needs at least two owners");
  } else {
    require(owner >= 0 && static_cast<std::size_t>(owner) < owners.size(),
            "single_owner: owner index out of range");
    require(owners[owner].size() > 0, "single_owner: the trained owner has no data");
  }

  TrainReport report;
  report.setting = setting;
  report.owner = setting == Setting::kSingleOwner ? owner : -1;
  report.split_seed = derive_seed(seed, "split");
  report.classifier_seed = derive_seed(seed, "classifier");

  std::vector<SetDataset> encoded(owners.size());
  std::vector<Split> splits(owners.size());
  for (std::size_t d = 0; d < owners.size(); ++d) {
    std::uint64_t encoder_seed = 0;
    switch (setting) {
      case Setting::kSingleOwner:
        encoder_seed = derive_seed(seed, "encoder", static_cast<std::uint64_t>(owner));
        break;
      case Setting::kCombinedClear:
        encoder_seed = derive_seed(seed, "encoder", 0);
        break;
      case Setting::kCombinedRandomized:
        encoder_seed = derive_seed(seed, "encoder", d);
        break;
    }
    report.encoder_seeds.push_back(encoder_seed);
    require(owners[d].images.rank() == 0 || owners[d].images.dim(0) == owners[d].size(),
            "owner images and labels disagree");
    if (owners[d].size() == 0) continue;
    splits[d] = split_indices(owners[d].size(), derive_seed(report.split_seed, "owner", d));
    encoded[d] = encode(owners[d].images, encoder_seed);
    encoded[d].labels = owners[d].labels;
    require(encoded[d].size() == owners[d].size(), "encoder returned the wrong sample count");
  }

  std::vector<SetDataset> train_parts, dev_parts;
  for (std::size_t d = 0; d < owners.size(); ++d) {
    if (owners[d].size() == 0) continue;
    if (setting == Setting::kSingleOwner && d != static_cast<std::size_t>(owner)) continue;
    train_parts.push_back(encoded[d].subset(splits[d].train));
    dev_parts.push_back(encoded[d].subset(splits[d].dev));
  }
  const SetDataset train = concat(train_parts);
  ClassifierSpec run_spec = spec;
  run_spec.seed = report.classifier_seed;
  bool has_dev = false;
  for (const SetDataset& p : dev_parts) has_dev = has_dev || !p.labels.empty();
  const SetDataset dev = has_dev ? concat(dev_parts) : SetDataset{};
  const Classifier clf = train_classifier(train, run_spec, has_dev ? &dev : nullptr);

  double total = 0;
  std::size_t counted = 0;
  for (std::size_t d = 0; d < owners.size(); ++d) {
    if (owners[d].size() == 0 || splits[d].test.empty()) {
      report.test_auc.push_back(std::nan(""));
      continue;
    }
    const double a = evaluate_auc(clf, encoded[d].subset(splits[d].test));
    report.test_auc.push_back(a);
    total += a;
    ++counted;
  }
  require(counted > 0, "no owner has a test split");
  report.mean_auc = total / static_cast<double>(counted);
  return report;
}

}  // namespace peopl
