#pragma once

// Scalar functions exercising every differentiable primitive, shared by the
// unit and acceptance gradient checks.

#include <cstddef>
#include <vector>

#include "grad_check.hpp"
#include "peopl/random.hpp"
#include "peopl/tensor.hpp"

namespace peopl::testing {

struct GradCase {
  const char* name;
  std::vector<std::vector<std::size_t>> shapes;
  ScalarFn fn;
};

inline std::vector<GradCase> primitive_grad_cases() {
  const Tensor targets({3, 2}, {1, 0, 0, 1, 1, 1});
  return {
      {"matmul", {{3, 4}, {4, 2}},
       [](Tape&, const std::vector<Var>& v) { return sum(square(matmul(v[0], v[1]))); }},
      {"matmul_nt", {{3, 4}, {2, 4}},
       [](Tape&, const std::vector<Var>& v) { return sum(square(matmul_nt(v[0], v[1]))); }},
      {"add_sub_mul", {{3, 2}, {3, 2}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(mul(add(v[0], v[1]), sub(v[0], square(v[1]))));
       }},
      {"row_ops", {{4, 3}, {3}, {3}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(square(add_row(mul_row(v[0], v[1]), v[2])));
       }},
      {"mul_col_reciprocal", {{4, 3}, {4, 1}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(square(mul_col(v[0], reciprocal(add_scalar(square(v[1]), 0.5)))));
       }},
      {"add_tiled", {{6, 2}, {3, 2}},
       [](Tape&, const std::vector<Var>& v) { return sum(square(add_tiled(v[0], v[1]))); }},
      {"relu", {{4, 3}},
       [](Tape&, const std::vector<Var>& v) { return sum(square(relu(v[0]))); }},
      {"tanh_sigmoid", {{4, 3}},
       [](Tape&, const std::vector<Var>& v) { return sum(mul(tanh(v[0]), sigmoid(v[0]))); }},
      {"softplus_exp", {{4, 3}},
       [](Tape&, const std::vector<Var>& v) {
         return mean(add(softplus(v[0]), exp(scale(v[0], 0.3))));
       }},
      {"segment_mean", {{6, 3}},
       [](Tape&, const std::vector<Var>& v) { return sum(square(segment_mean(v[0], 3))); }},
      {"slice_concat", {{3, 4}, {3, 2}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(square(concat_cols({slice_cols(v[0], 1, 3), v[1]})));
       }},
      {"pairwise_sq_dist", {{4, 3}, {5, 3}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(exp(scale(pairwise_sq_dist(v[0], v[1]), -0.2)));
       }},
      {"pairwise_self", {{5, 3}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(exp(scale(pairwise_sq_dist(v[0], v[0]), -0.2)));
       }},
      {"batch_normalize", {{5, 3}, {5, 3}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(mul(batch_normalize(v[0]), v[1]));
       }},
      {"conv_nonoverlap", {{2, 1, 4, 4}, {3, 1, 2, 2}},
       [](Tape&, const std::vector<Var>& v) {
         return sum(square(conv_nonoverlap(v[0], v[1])));
       }},
      {"bce_with_logits", {{3, 2}},
       [targets](Tape&, const std::vector<Var>& v) { return bce_with_logits(v[0], targets); }},
  };
}

// Values bounded away from 0 so relu kinks are not crossed by the probe.
inline Tensor away_from_zero(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = rng.uniform(0.05, 2.0);
    t[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return t;
}

}  // namespace peopl::testing
