#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peopl/tensor.hpp"

namespace peopl {

enum class ImageEncoderKind { kPatch, kLinear };

// kBatch standardizes with the statistics of the batch being encoded.
// kFixed uses per-feature statistics drawn once at build time, so encoding is
// data independent. kNone skips normalization and its affine parameters.
enum class NormMode { kBatch, kFixed, kNone };

struct ImageEncoderSpec {
  ImageEncoderKind kind = ImageEncoderKind::kPatch;
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t patch = 4;
  // Total number of convolutions. Layers 1..depth-1 are conv + norm + ReLU;
  // the positional embedding is added before layer depth, which is conv +
  // ReLU. Ignored for kLinear.
  std::size_t depth = 3;
  std::size_t hidden = 64;
  NormMode norm = NormMode::kBatch;
  bool bias = true;
  std::uint64_t seed = 0;

  friend bool operator==(const ImageEncoderSpec&, const ImageEncoderSpec&) = default;
};

// Image encoder with per-sample shuffled patch outputs. Parameters:
//   conv{l}.w   [hidden, fan_in]   gaussian(0, 1/sqrt(fan_in))
//   conv{l}.b   [hidden]           uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
//   norm{l}.gamma / norm{l}.beta   uniform(0.5, 1.5) / gaussian(0, 0.1)
//   norm{l}.mean / norm{l}.var     fixed mode only: gaussian(0, 0.1) / uniform(0.5, 1.5)
//   pos         [patches, fan_in of the last conv]   gaussian(0, 1)
// The linear kind has conv1.w only, with no bias, norm, ReLU or embedding.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  static ImageEncoder build(const ImageEncoderSpec& spec);

  const ImageEncoderSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }
  ParamStore& mutable_params() { return params_; }

  std::size_t num_patches() const;
  std::size_t patch_dim() const;  // C * p * p
  std::size_t output_dim() const;
  std::size_t parameter_count() const { return params_.parameter_count(); }

  // Unshuffled forward pass on images [B,C,H,W] -> [B*N, output_dim], patch
  // rows in grid order. params maps parameter names to tape leaves.
  Var forward(Tape& tape, const std::map<std::string, Var>& params,
              const Tensor& images) const;
  Tensor forward(const Tensor& images) const;

  // Encodes a batch; each sample's N rows are shuffled with a permutation
  // derived from (shuffle_seed, sample index).
  Tensor encode_batch(const Tensor& images, std::uint64_t shuffle_seed) const;
  // Single image [C,H,W] -> [N, output_dim], shuffled.
  Tensor encode_image(const Tensor& image, std::uint64_t shuffle_seed) const;

 private:
  void validate_images(const Tensor& images) const;

  ImageEncoderSpec spec_;
  ParamStore params_;
};

ImageEncoder build_patch_encoder(ImageEncoderSpec spec);
ImageEncoder build_linear_encoder(std::size_t patch, std::size_t out_dim,
                                  std::uint64_t seed, std::size_t channels = 1,
                                  std::size_t height = 8, std::size_t width = 8);

// Parameter count of a spec without building it.
std::size_t closed_form_parameter_count(const ImageEncoderSpec& spec);

// Splits encoded rows [B*N, h] back into per-sample [N, h] blocks.
std::vector<Tensor> split_samples(const Tensor& encoded, std::size_t patches);

// Equality of two [N, h] matrices as multisets of rows.
bool multiset_equal(const Tensor& a, const Tensor& b);

enum class RnnOutput { kFinalState, kSequence };

struct RnnEncoderSpec {
  std::size_t hidden = 200;
  std::size_t vocab = 1000;
  std::size_t embedding_dim = 16;
  // Multiplies the standard deviation of W_xh, W_hh and the bias range; 0
  // builds the degenerate zero-weight encoder.
  double weight_scale = 1.0;
  // h0 is uniform(-h0_range, h0_range).
  double h0_range = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const RnnEncoderSpec&, const RnnEncoderSpec&) = default;
};

// h_t = tanh(W_xh e(x_t) + W_hh h_{t-1} + b), starting from the private h0.
class RnnEncoder {
 public:
  RnnEncoder() = default;
  // Seeded gaussian(0,1) embedding table of shape [vocab, embedding_dim].
  static RnnEncoder build(const RnnEncoderSpec& spec);
  // Loaded embedding table; spec.vocab/embedding_dim are taken from it.
  static RnnEncoder build(RnnEncoderSpec spec, Tensor embedding);

  const RnnEncoderSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }

  // kFinalState -> [1, hidden]; kSequence -> [T, hidden].
  Tensor encode(const std::vector<std::int64_t>& tokens, RnnOutput mode) const;

 private:
  RnnEncoderSpec spec_;
  ParamStore params_;
};

// Encoder container: <dir>/manifest.json (spec, parameter names, seeds,
// adversarial flag) and <dir>/params.ptnsr (raw tensors in name order).
void save_encoder(const std::string& dir, const ImageEncoder& encoder,
                  bool adversarial = false);
ImageEncoder load_encoder(const std::string& dir, bool* adversarial = nullptr);

std::string to_string(ImageEncoderKind kind);
std::string to_string(NormMode mode);
ImageEncoderKind parse_encoder_kind(const std::string& text);
NormMode parse_norm_mode(const std::string& text);

}  // namespace peopl
