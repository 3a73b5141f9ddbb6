#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "peopl/tensor.hpp"

namespace peopl {

// Desk-scale stand-in for the image tasks: single-channel side x side images
// with pixels in [0,1].
//   label Y:      grating orientation (0 horizontal, 1 vertical) with random
//                 frequency, phase in [0, pi/2) and amplitude
//   sensitive S:  slope of the left-to-right intensity ramp (steep for S=1),
//                 equal to Y with probability sensitive_agreement
// Every image also has a skewed per-image exposure level and a fixed
// top-to-bottom ramp, so the patch distribution has no flip, transpose or
// rotation symmetry.
// Owners differ in noise level and grating frequencies (a distribution shift).
struct SyntheticImageSpec {
  std::size_t side = 8;
  double noise = 0.05;
  double shallow_ramp = 0.05;
  double steep_ramp = 0.25;
  // Exposure is 0.05 + exposure * u^3 with u uniform.
  double exposure = 0.7;
  double sensitive_agreement = 0.6;
};

struct ImageTask {
  Tensor images;  // [count, 1, side, side]
  std::vector<int> labels;
  std::vector<int> sensitive;
  std::size_t size() const { return labels.size(); }
};

ImageTask make_image_task(std::size_t count, const SyntheticImageSpec& spec,
                          std::uint64_t seed, int owner = 0);

// Rows [begin, end) of a task.
ImageTask slice(const ImageTask& task, std::size_t begin, std::size_t end);

}  // namespace peopl
