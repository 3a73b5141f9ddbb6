#include "peopl/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>

#include <nlohmann/json.hpp>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

using nlohmann::json;

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

std::string conv_name(std::size_t layer, const char* part) {
  return "conv" + std::to_string(layer) + "." + part;
}

std::string norm_name(std::size_t layer, const char* part) {
  return "norm" + std::to_string(layer) + "." + part;
}

void validate_spec(const ImageEncoderSpec& s) {
  require(s.channels > 0 && s.height > 0 && s.width > 0, "empty image shape");
  require(s.patch > 0 && s.height % s.patch == 0 && s.width % s.patch == 0,
          "patch size " + std::to_string(s.patch) + " does not divide " +
              std::to_string(s.height) + "x" + std::to_string(s.width));
  require(s.hidden > 0, "hidden dimension must be positive");
  if (s.kind == ImageEncoderKind::kPatch) require(s.depth >= 1, "depth must be >= 1");
}

}  // namespace

std::string to_string(ImageEncoderKind kind) {
  return kind == ImageEncoderKind::kPatch ? "patch" : "linear";
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::kBatch:
      return "batch";
    case NormMode::kFixed:
      return "fixed";
    case NormMode::kNone:
      return "none";
  }
  return "batch";
}

ImageEncoderKind parse_encoder_kind(const std::string& text) {
  if (text == "patch") return ImageEncoderKind::kPatch;
  if (text == "linear") return ImageEncoderKind::kLinear;
  throw InvalidArgument("unknown encoder kind '" + text + "'");
}

NormMode parse_norm_mode(const std::string& text) {
  if (text == "batch") return NormMode::kBatch;
  if (text == "fixed") return NormMode::kFixed;
  if (text == "none") return NormMode::kNone;
  throw InvalidArgument("unknown norm mode '" + text + "'");
}

std::size_t closed_form_parameter_count(const ImageEncoderSpec& s) {
  validate_spec(s);
  const std::size_t patch_dim = s.channels * s.patch * s.patch;
  if (s.kind == ImageEncoderKind::kLinear) return s.hidden * patch_dim;
  const std::size_t n = (s.height / s.patch) * (s.width / s.patch);
  const std::size_t h = s.hidden;
  const std::size_t per_norm =
      s.norm == NormMode::kBatch ? 2 * h : s.norm == NormMode::kFixed ? 4 * h : 0;
  const std::size_t bias = s.bias ? h : 0;
  const std::size_t last_fan_in = s.depth == 1 ? patch_dim : h;
  return (h * patch_dim + bias) + (s.depth - 1) * (h * h + bias) +
         (s.depth - 1) * per_norm + n * last_fan_in;
}

ImageEncoder ImageEncoder::build(const ImageEncoderSpec& spec) {
  validate_spec(spec);
  ImageEncoder enc;
  enc.spec_ = spec;
  const std::size_t patch_dim = enc.patch_dim();
  auto seed_for = [&](const std::string& name) { return derive_seed(spec.seed, name); };
  auto add = [&](const std::string& name, std::vector<std::size_t> shape,
                 const InitScheme& scheme) {
    enc.params_.init(name, std::move(shape), scheme, seed_for(name));
  };
  if (spec.kind == ImageEncoderKind::kLinear) {
    add(conv_name(1, "w"), {spec.hidden, patch_dim},
        InitScheme::gaussian(0, 1.0 / std::sqrt(static_cast<double>(patch_dim))));
    return enc;
  }
  for (std::size_t l = 1; l <= spec.depth; ++l) {
    const std::size_t fan_in = l == 1 ? patch_dim : spec.hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    add(conv_name(l, "w"), {spec.hidden, fan_in}, InitScheme::gaussian(0, bound));
    if (spec.bias) add(conv_name(l, "b"), {spec.hidden}, InitScheme::uniform(-bound, bound));
    if (l < spec.depth && spec.norm != NormMode::kNone) {
      add(norm_name(l, "gamma"), {spec.hidden}, InitScheme::uniform(0.5, 1.5));
      add(norm_name(l, "beta"), {spec.hidden}, InitScheme::gaussian(0, 0.1));
      if (spec.norm == NormMode::kFixed) {
        add(norm_name(l, "mean"), {spec.hidden}, InitScheme::gaussian(0, 0.1));
        add(norm_name(l, "var"), {spec.hidden}, InitScheme::uniform(0.5, 1.5));
      }
    }
  }
  const std::size_t last_fan_in = spec.depth == 1 ? patch_dim : spec.hidden;
  add("pos", {enc.num_patches(), last_fan_in}, InitScheme::gaussian(0, 1));
  return enc;
}

ImageEncoder build_patch_encoder(ImageEncoderSpec spec) {
  spec.kind = ImageEncoderKind::kPatch;
  return ImageEncoder::build(spec);
}

ImageEncoder build_linear_encoder(std::size_t patch, std::size_t out_dim,
                                  std::uint64_t seed, std::size_t channels,
                                  std::size_t height, std::size_t width) {
  ImageEncoderSpec spec;
  spec.kind = ImageEncoderKind::kLinear;
  spec.patch = patch;
  spec.hidden = out_dim;
  spec.seed = seed;
  spec.channels = channels;
  spec.height = height;
  spec.width = width;
  spec.depth = 1;
  spec.norm = NormMode::kNone;
  spec.bias = false;
  return ImageEncoder::build(spec);
}

std::size_t ImageEncoder::num_patches() const {
  return (spec_.height / spec_.patch) * (spec_.width / spec_.patch);
}

std::size_t ImageEncoder::patch_dim() const {
  return spec_.channels * spec_.patch * spec_.patch;
}

std::size_t ImageEncoder::output_dim() const { return spec_.hidden; }

void ImageEncoder::validate_images(const Tensor& images) const {
  require(images.rank() == 4 && images.dim(1) == spec_.channels &&
              images.dim(2) == spec_.height && images.dim(3) == spec_.width,
          "image batch shape " + shape_string(images.shape()) +
              " does not match encoder input [B," + std::to_string(spec_.channels) +
              "," + std::to_string(spec_.height) + "," +
              std::to_string(spec_.width) + "]");
}

Var ImageEncoder::forward(Tape& tape, const std::map<std::string, Var>& params,
                          const Tensor& images) const {
  validate_images(images);
  auto p = [&](const std::string& name) {
    auto it = params.find(name);
    require(it != params.end(), "missing encoder parameter " + name);
    return it->second;
  };
  Var x = tape.constant(patchify(images, spec_.patch));
  if (spec_.kind == ImageEncoderKind::kLinear) return matmul_nt(x, p(conv_name(1, "w")));

  for (std::size_t l = 1; l <= spec_.depth; ++l) {
    if (l == spec_.depth) x = add_tiled(x, p("pos"));
    x = matmul_nt(x, p(conv_name(l, "w")));
    if (spec_.bias) x = add_row(x, p(conv_name(l, "b")));
    if (l < spec_.depth) {
      if (spec_.norm == NormMode::kBatch) {
        x = batch_normalize(x);
      } else if (spec_.norm == NormMode::kFixed) {
        const Tensor& mu = params_.get(norm_name(l, "mean"));
        const Tensor& var = params_.get(norm_name(l, "var"));
        Tensor shift(mu.shape()), inv(var.shape());
        for (std::size_t i = 0; i < mu.size(); ++i) {
          shift[i] = -mu[i];
          inv[i] = 1.0 / std::sqrt(var[i] + kBatchNormEps);
        }
        x = mul_row(add_row(x, tape.constant(shift)), tape.constant(inv));
      }
      if (spec_.norm != NormMode::kNone) {
        x = add_row(mul_row(x, p(norm_name(l, "gamma"))), p(norm_name(l, "beta")));
      }
    }
    x = relu(x);
  }
  return x;
}

Tensor ImageEncoder::forward(const Tensor& images) const {
  Tape tape;
  auto bound = bind(tape, params_, false);
  return forward(tape, bound, images).value();
}

Tensor ImageEncoder::encode_batch(const Tensor& images,
                                  std::uint64_t shuffle_seed) const {
  const Tensor plain = forward(images);
  const std::size_t n = num_patches(), h = output_dim();
  Tensor out(plain.shape());
  std::vector<std::size_t> perm(n);
  for (std::size_t b = 0; b < images.dim(0); ++b) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(derive_seed(shuffle_seed, "patch_shuffle", b));
    rng.shuffle(std::span<std::size_t>(perm));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(plain.data() + (b * n + perm[i]) * h, h, out.data() + (b * n + i) * h);
    }
  }
  return out;
}

Tensor ImageEncoder::encode_image(const Tensor& image,
                                  std::uint64_t shuffle_seed) const {
  require(image.rank() == 3, "encode_image expects [C,H,W], got " +
                                 shape_string(image.shape()));
  std::vector<std::size_t> shape{1};
  shape.insert(shape.end(), image.shape().begin(), image.shape().end());
  return encode_batch(image.reshaped(shape), shuffle_seed);
}

std::vector<Tensor> split_samples(const Tensor& encoded, std::size_t patches) {
  require(encoded.rank() == 2 && patches > 0 && encoded.dim(0) % patches == 0,
          "encoded rows are not a multiple of the patch count");
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < encoded.dim(0) / patches; ++b) {
    out.push_back(encoded.rows(b * patches, (b + 1) * patches));
  }
  return out;
}

bool multiset_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) return false;
  auto sorted_rows = [](const Tensor& t) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      rows.emplace_back(t.data() + i * t.dim(1), t.data() + (i + 1) * t.dim(1));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  return sorted_rows(a) == sorted_rows(b);
}

RnnEncoder RnnEncoder::build(const RnnEncoderSpec& spec) {
  require(spec.vocab > 0 && spec.embedding_dim > 0, "empty embedding table");
  return build(spec, seeded_init({spec.vocab, spec.embedding_dim},
                                 InitScheme::gaussian(0, 1),
                                 derive_seed(spec.seed, "embedding")));
}

RnnEncoder RnnEncoder::build(RnnEncoderSpec spec, Tensor embedding) {
  require(embedding.rank() == 2 && embedding.size() > 0,
          "embedding table must be a non-empty matrix");
  require(spec.hidden > 0, "hidden dimension must be positive");
  spec.vocab = embedding.dim(0);
  spec.embedding_dim = embedding.dim(1);
  RnnEncoder enc;
  enc.spec_ = spec;
  const double e = static_cast<double>(spec.embedding_dim);
  const double h = static_cast<double>(spec.hidden);
  auto add = [&](const std::string& name, std::vector<std::size_t> shape,
                 const InitScheme& scheme) {
    enc.params_.init(name, std::move(shape), scheme, derive_seed(spec.seed, name));
  };
  enc.params_.set("embedding", std::move(embedding));
  add("w_xh", {spec.hidden, spec.embedding_dim},
      InitScheme::gaussian(0, spec.weight_scale / std::sqrt(e)));
  add("w_hh", {spec.hidden, spec.hidden},
      InitScheme::gaussian(0, spec.weight_scale / std::sqrt(h)));
  const double bound = spec.weight_scale / std::sqrt(h);
  add("b", {spec.hidden}, InitScheme::uniform(-bound, bound));
  add("h0", {spec.hidden}, InitScheme::uniform(-spec.h0_range, spec.h0_range));
  return enc;
}

Tensor RnnEncoder::encode(const std::vector<std::int64_t>& tokens,
                          RnnOutput mode) const {
  require(!tokens.empty(), "cannot encode an empty token sequence");
  const Tensor& emb = params_.get("embedding");
  const Tensor& w_xh = params_.get("w_xh");
  const Tensor& w_hh = params_.get("w_hh");
  const Tensor& b = params_.get("b");
  const std::size_t h = spec_.hidden, e = spec_.embedding_dim;
  std::vector<double> state(params_.get("h0").values());
  std::vector<double> next(h);
  Tensor sequence({tokens.size(), h});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    require(tokens[t] >= 0 && static_cast<std::size_t>(tokens[t]) < spec_.vocab,
            "token " + std::to_string(tokens[t]) + " outside the vocabulary");
    const double* x = emb.data() + static_cast<std::size_t>(tokens[t]) * e;
    for (std::size_t i = 0; i < h; ++i) {
      double s = b[i];
      for (std::size_t j = 0; j < e; ++j) s += w_xh[i * e + j] * x[j];
      for (std::size_t j = 0; j < h; ++j) s += w_hh[i * h + j] * state[j];
      next[i] = std::tanh(s);
    }
    state.swap(next);
    std::copy(state.begin(), state.end(), sequence.data() + t * h);
  }
  if (mode == RnnOutput::kSequence) return sequence;
  return Tensor({1, h}, state);
}

void save_encoder(const std::string& dir, const ImageEncoder& encoder,
                  bool adversarial) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const ImageEncoderSpec& s = encoder.spec();
  json manifest;
  manifest["format"] = "peopl-encoder";
  manifest["version"] = 1;
  manifest["adversarial"] = adversarial;
  manifest["spec"] = {{"kind", to_string(s.kind)}, {"channels", s.channels},
                      {"height", s.height},        {"width", s.width},
                      {"patch", s.patch},          {"depth", s.depth},
                      {"hidden", s.hidden},        {"norm", to_string(s.norm)},
                      {"bias", s.bias},            {"seed", s.seed}};
  json params = json::array();
  std::ofstream out(fs::path(dir) / "params.ptnsr", std::ios::binary);
  if (!out) throw InvalidArgument("cannot write encoder to " + dir);
  for (const std::string& name : encoder.params().names()) {
    const Tensor& t = encoder.params().get(name);
    json entry = {{"name", name}, {"shape", t.shape()}};
    auto it = encoder.params().records().find(name);
    if (it != encoder.params().records().end()) {
      entry["init"] = it->second.scheme.describe();
      entry["seed"] = it->second.seed;
    }
    params.push_back(entry);
    write_tensor(out, t);
  }
  manifest["parameters"] = params;
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
}

ImageEncoder load_encoder(const std::string& dir, bool* adversarial) {
  namespace fs = std::filesystem;
  std::ifstream in_manifest(fs::path(dir) / "manifest.json");
  if (!in_manifest) throw InvalidArgument("no encoder manifest in " + dir);
  json manifest;
  try {
    manifest = json::parse(in_manifest);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed encoder manifest: ") + e.what());
  }
  require(manifest.value("format", "") == "peopl-encoder",
          "not an encoder manifest: " + dir);
  const json& js = manifest.at("spec");
  ImageEncoderSpec spec;
  spec.kind = parse_encoder_kind(js.at("kind").get<std::string>());
  spec.channels = js.at("channels").get<std::size_t>();
  spec.height = js.at("height").get<std::size_t>();
  spec.width = js.at("width").get<std::size_t>();
  spec.patch = js.at("patch").get<std::size_t>();
  spec.depth = js.at("depth").get<std::size_t>();
  spec.hidden = js.at("hidden").get<std::size_t>();
  spec.norm = parse_norm_mode(js.at("norm").get<std::string>());
  spec.bias = js.at("bias").get<bool>();
  spec.seed = js.at("seed").get<std::uint64_t>();
  ImageEncoder enc = ImageEncoder::build(spec);
  std::ifstream in(fs::path(dir) / "params.ptnsr", std::ios::binary);
  if (!in) throw InvalidArgument("missing params.ptnsr in " + dir);
  for (const json& entry : manifest.at("parameters")) {
    const std::string name = entry.at("name").get<std::string>();
    Tensor t = read_tensor(in);
    require(enc.params().contains(name) &&
                enc.params().get(name).shape() == t.shape(),
            "parameter " + name + " does not fit the encoder spec");
    if (!(enc.params().get(name) == t)) enc.mutable_params().get_mutable(name) = t;
  }
  if (adversarial) *adversarial = manifest.value("adversarial", false);
  return enc;
}

}  // namespace peopl
