#include "peopl/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "grad_cases.hpp"
#include "grad_check.hpp"
#include "gtest/gtest.h"
#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

using testing::check_gradients;

Tensor RandomTensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

TEST(TensorTest, ElementwiseExamples) {
  Tape tape;
  Var x = tape.constant(Tensor({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(relu(x).value().values(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(tanh(tape.constant(Tensor::scalar(0))).value().item(), 0.0);
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var id = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(matmul(a, id).value(), a.value());
  EXPECT_EQ(matmul_nt(a, id).value(), a.value());
  EXPECT_THROW(matmul(a, tape.constant(Tensor({3, 1}))), InvalidArgument);
  EXPECT_THROW(add(a, tape.constant(Tensor({2, 3}))), InvalidArgument);
}

TEST(TensorTest, ScalarDerivatives) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0), true);
  tape.backward(square(x));
  EXPECT_EQ(x.grad().item(), 6.0);

  Tape pool;
  Var m = pool.leaf(Tensor({4, 2}, 1.0), true);
  pool.backward(sum(mean_pool(m)));
  for (double g : m.grad().values()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(TensorTest, BackwardErrors) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, 1.0), true);
  EXPECT_THROW(tape.backward(x), InvalidArgument);
  Var c = tape.constant(Tensor::scalar(1.0));
  EXPECT_THROW(tape.backward(square(c)), InvalidArgument);
}

TEST(TensorTest, SegmentMeanIsPermutationInvariant) {
  Rng rng(4);
  Tensor x = RandomTensor({6, 5}, rng);
  Tape tape;
  const Tensor base = segment_mean(tape.constant(x), 6).value();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
    rng.shuffle(std::span<std::size_t>(perm));
    Tensor y({6, 5});
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 5; ++j) y.at(i, j) = x.at(perm[i], j);
    }
    EXPECT_EQ(segment_mean(tape.constant(y), 6).value(), base);
  }
}

TEST(ConvTest, AllOnesKernelSums) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  Var k = tape.constant(Tensor({1, 1, 2, 2}, 1.0));
  const Tensor out = conv_nonoverlap(x, k).value();
  EXPECT_EQ(out.shape(), (std::vector<std::size_t>{1, 1, 1}));
  EXPECT_EQ(out[0], 10.0);
}

TEST(ConvTest, OneHotKernelsReshapePatches) {
  Rng rng(8);
  const std::size_t c = 2, p = 2;
  Tensor x = RandomTensor({c, 4, 4}, rng);
  Tensor k({c * p * p, c, p, p});
  for (std::size_t i = 0; i < c * p * p; ++i) k[i * c * p * p + i] = 1.0;
  Tape tape;
  const Tensor out = conv_nonoverlap(tape.constant(x), tape.constant(k)).value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t dy = 0; dy < p; ++dy) {
      for (std::size_t dx = 0; dx < p; ++dx) {
        const std::size_t kk = ch * p * p + dy * p + dx;
        for (std::size_t gi = 0; gi < 2; ++gi) {
          for (std::size_t gj = 0; gj < 2; ++gj) {
            EXPECT_EQ(out[(kk * 2 + gi) * 2 + gj],
                      x[(ch * 4 + gi * p + dy) * 4 + gj * p + dx]);
          }
        }
      }
    }
  }
}

TEST(ConvTest, MatchesDirectSummationAndBlockMatrix) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = RandomTensor({1, 4, 4}, rng);
    Tensor k = RandomTensor({2, 1, 2, 2}, rng);
    Tape tape;
    const Tensor out = conv_nonoverlap(tape.constant(x), tape.constant(k)).value();
    ASSERT_EQ(out.shape(), (std::vector<std::size_t>{2, 2, 2}));
    for (std::size_t kk = 0; kk < 2; ++kk) {
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
          double s = 0;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              s += x[(2 * i + dy) * 4 + 2 * j + dx] * k[kk * 4 + dy * 2 + dx];
            }
          }
          EXPECT_NEAR(out[(kk * 2 + i) * 2 + j], s, 1e-12);
        }
      }
    }
    // Block-diagonal matrix on the patch-flattened input.
    const Tensor flat = patchify(x.reshaped({1, 1, 4, 4}), 2).reshaped({16});
    Tensor big({8, 16});
    for (std::size_t q = 0; q < 4; ++q) {
      for (std::size_t kk = 0; kk < 2; ++kk) {
        for (std::size_t l = 0; l < 4; ++l) big.at(q * 2 + kk, q * 4 + l) = k[kk * 4 + l];
      }
    }
    for (std::size_t r = 0; r < 8; ++r) {
      double s = 0;
      for (std::size_t l = 0; l < 16; ++l) s += big.at(r, l) * flat[l];
      const std::size_t q = r / 2, kk = r % 2;
      EXPECT_NEAR(out[kk * 4 + q], s, 1e-12);
    }
  }
  Tape tape;
  EXPECT_THROW(conv_nonoverlap(tape.constant(Tensor({1, 5, 4})),
                               tape.constant(Tensor({1, 1, 2, 2}))),
               InvalidArgument);
}

TEST(BatchNormTest, Examples) {
  Tape tape;
  const Tensor constant =
      batch_normalize(tape.constant(Tensor({4, 3}, 2.5))).value();
  for (double v : constant.values()) EXPECT_EQ(v, 0.0);

  const Tensor pm =
      batch_normalize(tape.constant(Tensor::matrix({{-1, -1}, {1, 1}}))).value();
  const double expected = 1.0 / std::sqrt(1.0 + kBatchNormEps);
  EXPECT_NEAR(pm.at(0, 0), -expected, 1e-15);
  EXPECT_NEAR(pm.at(1, 1), expected, 1e-15);
  EXPECT_NEAR(pm.at(1, 1), 1.0, 1e-5);

  EXPECT_THROW(batch_normalize(tape.constant(Tensor({1, 3}))), InvalidArgument);

  Rng rng(3);
  Tensor x = RandomTensor({50, 4}, rng);
  for (double& v : x.values()) v = 3.0 * v + 7.0;
  const Tensor y = batch_normalize(tape.constant(x)).value();
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 50; ++i) m += y.at(i, j);
    m /= 50;
    for (std::size_t i = 0; i < 50; ++i) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    v /= 50;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(GradientTest, EveryPrimitive) {
  Rng rng(2025);
  for (const testing::GradCase& c : testing::primitive_grad_cases()) {
    for (int instance = 0; instance < 10; ++instance) {
      std::vector<Tensor> inputs;
      for (const auto& shape : c.shapes) inputs.push_back(testing::away_from_zero(shape, rng));
      EXPECT_LT(check_gradients(c.fn, inputs).max_relative_error, 1e-5)
          << c.name << " instance " << instance;
    }
  }
}

TEST(InitTest, SeededInit) {
  const Tensor zero_sd = seeded_init({3, 3}, InitScheme::gaussian(1.5, 0.0), 7);
  for (double v : zero_sd.values()) EXPECT_EQ(v, 1.5);
  EXPECT_EQ(seeded_init({4, 5}, InitScheme::gaussian(0, 1), 9),
            seeded_init({4, 5}, InitScheme::gaussian(0, 1), 9));
  EXPECT_NE(seeded_init({4, 5}, InitScheme::gaussian(0, 1), 9),
            seeded_init({4, 5}, InitScheme::gaussian(0, 1), 10));

  const Tensor draws = seeded_init({100000}, InitScheme::gaussian(0, 1), 42);
  double m = 0, v = 0;
  for (double x : draws.values()) m += x;
  m /= draws.size();
  for (double x : draws.values()) v += (x - m) * (x - m);
  v /= draws.size() - 1;
  EXPECT_LT(std::abs(m), 0.02);
  EXPECT_GE(v, 0.98);
  EXPECT_LE(v, 1.02);

  const Tensor u = seeded_init({1000}, InitScheme::uniform(-2, 3), 1);
  for (double x : u.values()) {
    EXPECT_GE(x, -2.0);
    EXPECT_LT(x, 3.0);
  }
}

TEST(ParamStoreTest, RebuildIsBitIdentical) {
  ParamStore store;
  store.init("w", {3, 4}, InitScheme::gaussian(0, 0.5), 11);
  store.init("b", {4}, InitScheme::uniform(-1, 1), 12);
  EXPECT_EQ(store.parameter_count(), 16u);
  EXPECT_EQ(ParamStore::rebuild(store.records()), store);
  EXPECT_THROW(store.init("w", {1}, InitScheme::constant(0), 1), InvalidArgument);
}

TEST(AdamTest, MinimizesQuadratic) {
  ParamStore store;
  store.set("x", Tensor({2}, {3.0, -4.0}));
  Adam adam(0.1);
  for (int step = 0; step < 500; ++step) {
    Tape tape;
    auto bound = bind(tape, store, true);
    Var loss = sum(square(add_scalar(bound.at("x"), -1.0)));
    tape.backward(loss);
    adam.step(store, collect_grads(tape, bound));
  }
  EXPECT_NEAR(store.get("x")[0], 1.0, 1e-3);
  EXPECT_NEAR(store.get("x")[1], 1.0, 1e-3);
}

TEST(RawTensorTest, RoundTripAndFormat) {
  Rng rng(1);
  const Tensor t = RandomTensor({2, 3, 1}, rng);
  std::stringstream buffer;
  write_tensor(buffer, t);
  const std::string bytes = buffer.str();
  ASSERT_EQ(bytes.size(), 8u + 4u + 3 * 4u + 6 * 8u);
  EXPECT_EQ(bytes.substr(0, 8), std::string("PTNSR01\0", 8));
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3u);
  EXPECT_EQ(read_tensor(buffer), t);

  const auto path = std::filesystem::temp_directory_path() / "peopl_tensor_test.bin";
  save_tensor(path.string(), t);
  EXPECT_EQ(load_tensor(path.string()), t);
  std::filesystem::remove(path);

  std::stringstream bad("NOTATENSOR");
  EXPECT_THROW(read_tensor(bad), InvalidArgument);
}

}  // namespace
}  // namespace peopl
