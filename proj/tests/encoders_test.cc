#include "peopl/encoders.hpp"

#include <cmath>
#include <filesystem>

#include "gtest/gtest.h"
#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

Tensor RandomImages(std::size_t batch, std::size_t side, Rng& rng,
                    std::size_t channels = 1) {
  Tensor t({batch, channels, side, side});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

ImageEncoderSpec DeskSpec(std::size_t depth, std::uint64_t seed) {
  ImageEncoderSpec spec;
  spec.depth = depth;
  spec.hidden = 16;
  spec.seed = seed;
  return spec;
}

TEST(PatchEncoderTest, ShapesAndCounts) {
  Rng rng(1);
  const ImageEncoder enc = build_patch_encoder(DeskSpec(3, 5));
  EXPECT_EQ(enc.num_patches(), 4u);
  const Tensor z = enc.encode_image(RandomImages(1, 8, rng).reshaped({1, 8, 8}), 0);
  EXPECT_EQ(z.shape(), (std::vector<std::size_t>{4, 16}));

  ImageEncoderSpec tiny;
  tiny.height = tiny.width = 4;
  tiny.patch = 4;
  tiny.depth = 1;
  tiny.hidden = 1;
  const ImageEncoder one = build_patch_encoder(tiny);
  EXPECT_EQ(one.encode_image(Tensor({1, 4, 4}, 0.5), 3).shape(),
            (std::vector<std::size_t>{1, 1}));

  ImageEncoderSpec bad = DeskSpec(3, 1);
  bad.patch = 3;
  EXPECT_THROW(build_patch_encoder(bad), InvalidArgument);
  EXPECT_THROW(enc.encode_batch(RandomImages(2, 4, rng), 1), InvalidArgument);
}

TEST(PatchEncoderTest, ReferenceConfigurationShape) {
  // Shape only: 256x256 input, p=16 -> 256 patches of width 2048.
  ImageEncoderSpec spec;
  spec.height = spec.width = 256;
  spec.patch = 16;
  spec.depth = 7;
  spec.hidden = 2048;
  EXPECT_EQ((spec.height / spec.patch) * (spec.width / spec.patch), 256u);
  // 2048*256 + 2048 + 6*(2048^2 + 2048) + 6*2*2048 + 256*2048
  EXPECT_EQ(closed_form_parameter_count(spec), 26253312u);
}

TEST(PatchEncoderTest, ClosedFormMatchesBuiltCount) {
  for (NormMode norm : {NormMode::kBatch, NormMode::kFixed, NormMode::kNone}) {
    for (std::size_t depth : {1u, 2u, 3u, 7u}) {
      for (bool bias : {true, false}) {
        ImageEncoderSpec spec = DeskSpec(depth, 2);
        spec.norm = norm;
        spec.bias = bias;
        spec.channels = 3;
        EXPECT_EQ(build_patch_encoder(spec).parameter_count(),
                  closed_form_parameter_count(spec));
      }
    }
  }
  const ImageEncoder lin = build_linear_encoder(4, 16, 1);
  EXPECT_EQ(lin.parameter_count(), closed_form_parameter_count(lin.spec()));
  EXPECT_EQ(lin.parameter_count(), 16u * 16u);
}

TEST(PatchEncoderTest, SameSeedSameParameters) {
  EXPECT_EQ(build_patch_encoder(DeskSpec(3, 9)).params(),
            build_patch_encoder(DeskSpec(3, 9)).params());
  EXPECT_FALSE(build_patch_encoder(DeskSpec(3, 9)).params() ==
               build_patch_encoder(DeskSpec(3, 10)).params());
}

TEST(PatchEncoderTest, ShuffleIsAPermutation) {
  Rng rng(2);
  const ImageEncoder enc = build_patch_encoder(DeskSpec(3, 4));
  const Tensor images = RandomImages(5, 8, rng);
  const auto a = split_samples(enc.encode_batch(images, 1), 4);
  const auto b = split_samples(enc.encode_batch(images, 2), 4);
  const auto plain = split_samples(enc.forward(images), 4);
  bool any_order_differs = false;
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_TRUE(multiset_equal(a[i], b[i]));
    EXPECT_TRUE(multiset_equal(a[i], plain[i]));
    any_order_differs = any_order_differs || !(a[i] == b[i]);
  }
  EXPECT_TRUE(any_order_differs);
}

TEST(PatchEncoderTest, ZeroImageShowsPositionalEmbeddings) {
  ImageEncoderSpec spec = DeskSpec(1, 3);
  spec.bias = false;
  spec.norm = NormMode::kNone;
  ImageEncoder enc = build_patch_encoder(spec);
  const Tensor plain = enc.forward(Tensor({1, 1, 8, 8}, 0.0));
  const Tensor& w = enc.params().get("conv1.w");
  const Tensor& pos = enc.params().get("pos");
  for (std::size_t q = 0; q < 4; ++q) {
    for (std::size_t k = 0; k < 16; ++k) {
      double s = 0;
      for (std::size_t l = 0; l < 16; ++l) s += w.at(k, l) * pos.at(q, l);
      EXPECT_NEAR(plain.at(q, k), std::max(s, 0.0), 1e-12);
    }
  }
  // Equal embeddings collide.
  Tensor& p = enc.mutable_params().get_mutable("pos");
  for (std::size_t l = 0; l < 16; ++l) p.at(1, l) = p.at(0, l);
  const Tensor collided = enc.forward(Tensor({1, 1, 8, 8}, 0.0));
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(collided.at(0, k), collided.at(1, k));
}

// The encoder is the composition of its blocks, each written out by hand
// with conv_nonoverlap for the patch layer.
TEST(PatchEncoderTest, ComposesItsBlocks) {
  Rng rng(6);
  for (NormMode norm : {NormMode::kBatch, NormMode::kFixed}) {
    ImageEncoderSpec spec = DeskSpec(3, 8);
    spec.norm = norm;
    const ImageEncoder enc = build_patch_encoder(spec);
    const ParamStore& ps = enc.params();
    const Tensor images = RandomImages(3, 8, rng);
    Tape tape;
    Var conv = conv_nonoverlap(
        tape.constant(images),
        tape.constant(ps.get("conv1.w").reshaped({16, 1, 4, 4})));  // [B,K,2,2]
    std::vector<std::size_t> index;
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t q = 0; q < 4; ++q) {
        for (std::size_t k = 0; k < 16; ++k) index.push_back((b * 16 + k) * 4 + q);
      }
    }
    Var x = gather(conv, index, {12, 16});
    auto block = [&](Var in, std::size_t l) {
      const std::string c = "conv" + std::to_string(l);
      const std::string n = "norm" + std::to_string(l);
      in = add_row(in, tape.constant(ps.get(c + ".b")));
      if (norm == NormMode::kBatch) {
        in = batch_normalize(in);
      } else {
        Tensor shift = ps.get(n + ".mean"), inv = ps.get(n + ".var");
        for (double& v : shift.values()) v = -v;
        for (double& v : inv.values()) v = 1.0 / std::sqrt(v + kBatchNormEps);
        in = mul_row(add_row(in, tape.constant(shift)), tape.constant(inv));
      }
      in = add_row(mul_row(in, tape.constant(ps.get(n + ".gamma"))),
                   tape.constant(ps.get(n + ".beta")));
      return relu(in);
    };
    x = block(x, 1);
    x = block(matmul_nt(x, tape.constant(ps.get("conv2.w"))), 2);
    x = add_tiled(x, tape.constant(ps.get("pos")));
    x = relu(add_row(matmul_nt(x, tape.constant(ps.get("conv3.w"))),
                     tape.constant(ps.get("conv3.b"))));
    const Tensor expected = enc.forward(images);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_NEAR(x.value()[i], expected[i], 1e-12);
    }
  }
}

TEST(LinearEncoderTest, IsLinear) {
  Rng rng(3);
  const ImageEncoder enc = build_linear_encoder(4, 12, 21);
  const Tensor x = RandomImages(2, 8, rng);
  const Tensor y = RandomImages(2, 8, rng);
  const double alpha = 1.7, beta = -0.4;
  Tensor combo(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) combo[i] = alpha * x[i] + beta * y[i];
  const Tensor fx = enc.forward(x), fy = enc.forward(y), fc = enc.forward(combo);
  for (std::size_t i = 0; i < fc.size(); ++i) {
    EXPECT_NEAR(fc[i], alpha * fx[i] + beta * fy[i], 1e-9);
  }
  EXPECT_EQ(enc.encode_batch(x, 5).shape(), (std::vector<std::size_t>{8, 12}));
  EXPECT_EQ(build_linear_encoder(4, 12, 21).params(), enc.params());
}

TEST(RnnEncoderTest, OneStepByHand) {
  RnnEncoderSpec spec;
  spec.hidden = 5;
  spec.vocab = 7;
  spec.h0_range = 0.0;
  spec.seed = 4;
  const RnnEncoder enc = RnnEncoder::build(spec);
  // Zero the recurrence: h0 = 0 already.
  const Tensor out = enc.encode({3}, RnnOutput::kFinalState);
  const Tensor& e = enc.params().get("embedding");
  const Tensor& w = enc.params().get("w_xh");
  const Tensor& b = enc.params().get("b");
  for (std::size_t i = 0; i < 5; ++i) {
    double s = b[i];
    for (std::size_t j = 0; j < 16; ++j) s += w.at(i, j) * e.at(3, j);
    EXPECT_NEAR(out[i], std::tanh(s), 1e-15);
  }
}

TEST(RnnEncoderTest, UnrolledEquality) {
  RnnEncoderSpec spec;
  spec.hidden = 6;
  spec.vocab = 20;
  spec.seed = 12;
  const RnnEncoder enc = RnnEncoder::build(spec);
  const std::vector<std::int64_t> tokens{1, 5, 19, 0, 7, 7, 2};
  const Tensor seq = enc.encode(tokens, RnnOutput::kSequence);
  EXPECT_EQ(seq.shape(), (std::vector<std::size_t>{7, 6}));

  const ParamStore& p = enc.params();
  std::vector<double> h(p.get("h0").values());
  for (std::int64_t tok : tokens) {
    std::vector<double> next(6);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = p.get("b")[i];
      for (std::size_t j = 0; j < 16; ++j) s += p.get("w_xh").at(i, j) * p.get("embedding").at(tok, j);
      for (std::size_t j = 0; j < 6; ++j) s += p.get("w_hh").at(i, j) * h[j];
      next[i] = std::tanh(s);
    }
    h = next;
  }
  const Tensor final_state = enc.encode(tokens, RnnOutput::kFinalState);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(final_state[i], h[i], 1e-12);
    EXPECT_EQ(final_state[i], seq.at(6, i));
  }
  EXPECT_EQ(enc.encode(tokens, RnnOutput::kFinalState), final_state);
  EXPECT_THROW(enc.encode({}, RnnOutput::kFinalState), InvalidArgument);
  EXPECT_THROW(enc.encode({20}, RnnOutput::kFinalState), InvalidArgument);
}

TEST(RnnEncoderTest, ReferenceAndDegenerateBuilds) {
  RnnEncoderSpec spec;
  EXPECT_EQ(spec.hidden, 200u);
  EXPECT_EQ(RnnEncoder::build(spec).params(), RnnEncoder::build(spec).params());

  spec.hidden = 8;
  spec.weight_scale = 0.0;
  spec.h0_range = 0.0;
  const Tensor out = RnnEncoder::build(spec).encode({1, 2, 3}, RnnOutput::kSequence);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(EncoderIoTest, SaveLoadRoundTrip) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "peopl_encoder_io_test";
  fs::remove_all(dir);
  ImageEncoderSpec spec = DeskSpec(3, 17);
  spec.norm = NormMode::kFixed;
  ImageEncoder enc = build_patch_encoder(spec);
  enc.mutable_params().get_mutable("conv2.b")[0] = 42.0;
  save_encoder(dir.string(), enc, true);
  bool adversarial = false;
  const ImageEncoder back = load_encoder(dir.string(), &adversarial);
  EXPECT_TRUE(adversarial);
  EXPECT_EQ(back.spec(), enc.spec());
  EXPECT_EQ(back.params(), enc.params());
  fs::remove_all(dir);
  EXPECT_THROW(load_encoder(dir.string()), InvalidArgument);
}

}  // namespace
}  // namespace peopl
