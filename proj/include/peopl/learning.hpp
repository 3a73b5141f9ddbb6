#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "peopl/tensor.hpp"

namespace peopl {

// Labeled sets of vectors: sample b owns rows [b*set_size, (b+1)*set_size).
// Plain feature vectors are sets of size 1.
struct SetDataset {
  Tensor rows;
  std::size_t set_size = 1;
  std::vector<int> labels;

  std::size_t size() const { return set_size ? rows.dim(0) / set_size : 0; }
  std::size_t dim() const { return rows.dim(1); }
  SetDataset subset(const std::vector<std::size_t>& samples) const;
};

SetDataset concat(const std::vector<SetDataset>& parts);

// Rank-based (Mann-Whitney) AUC with midranks for ties. Throws InvalidArgument
// unless both classes are present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

enum class ClassifierKind { kSetPoolMlp, kLogistic, kAttentionPool };

std::string to_string(ClassifierKind kind);
ClassifierKind parse_classifier_kind(const std::string& text);

struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::kSetPoolMlp;
  std::vector<std::size_t> hidden{32};
  std::size_t epochs = 60;
  double lr = 3e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  // Early stopping on dev AUC; 0 disables it.
  std::size_t patience = 0;
  std::uint64_t seed = 0;
};

// Order-invariant binary classifier over vector sets. Rows are standardized
// with training statistics, then:
//   set_pool_mlp:   mean-pool -> ReLU MLP -> logit
//   logistic:       mean-pool -> linear -> logit
//   attention_pool: softmax(w . tanh(V r)) weighted pool -> ReLU MLP -> logit
class Classifier {
 public:
  const ClassifierSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }

  // Logits, one per sample.
  std::vector<double> scores(const SetDataset& data) const;
  double accuracy(const SetDataset& data) const;

  Var logits(Tape& tape, const std::map<std::string, Var>& params,
             const Tensor& standardized_rows, std::size_t set_size) const;
  Tensor standardize(const Tensor& rows) const;

 private:
  friend Classifier train_classifier(const SetDataset&, const ClassifierSpec&,
                                     const SetDataset*);
  ClassifierSpec spec_;
  ParamStore params_;
  std::vector<double> mean_, inv_sd_;
  std::size_t input_dim_ = 0;
};

// Adam on mean BCE over minibatches. Deterministic given spec.seed. With a dev
// set and patience > 0, returns the parameters of the best dev-AUC epoch.
// Throws InvalidArgument when fewer than two classes are present.
Classifier train_classifier(const SetDataset& train, const ClassifierSpec& spec,
                            const SetDataset* dev = nullptr);

double evaluate_auc(const Classifier& classifier, const SetDataset& heldout);

struct Split {
  std::vector<std::size_t> train, dev, test;
};

// Seeded shuffle of 0..n-1 cut into train/dev/test by fractions (the test
// share is the remainder). Default 60-20-20.
Split split_indices(std::size_t n, std::uint64_t seed, double train = 0.6,
                    double dev = 0.2);

enum class Setting { kSingleOwner, kCombinedClear, kCombinedRandomized };

std::string to_string(Setting setting);
Setting parse_setting(const std::string& text);

// One data owner's raw samples: images [B,C,H,W] with binary labels.
struct OwnerData {
  Tensor images;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

// Encodes one owner's full batch with the encoder drawn from encoder_seed and
// returns a set dataset (labels are filled in by the caller).
using EncodeFn = std::function<SetDataset(const Tensor& images, std::uint64_t encoder_seed)>;

struct TrainReport {
  Setting setting = Setting::kSingleOwner;
  int owner = -1;  // trained owner for kSingleOwner
  std::vector<double> test_auc;  // per owner test set
  double mean_auc = 0.0;
  std::vector<std::uint64_t> encoder_seeds;  // per owner
  std::uint64_t split_seed = 0;
  std::uint64_t classifier_seed = 0;
};

// Each owner is split 60-20-20 with derive_seed(seed, "split", d) and encoded
// as one batch. single_owner trains on `owner` with its encoder T_d and tests
// every owner's test split encoded with T_d. combined_clear encodes every
// owner with one encoder; combined_randomized with an independent encoder per
// owner; both pool the training splits and test each owner under its own
// encoding. mean_auc averages the per-owner test AUCs.
TrainReport run_setting(Setting setting, const std::vector<OwnerData>& owners,
                        const EncodeFn& encode, const ClassifierSpec& spec,
                        std::uint64_t seed, int owner = 0);

}  // namespace peopl
