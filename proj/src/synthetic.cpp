#include "peopl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {

ImageTask make_image_task(std::size_t count, const SyntheticImageSpec& spec,
                          std::uint64_t seed, int owner) {
  if (spec.side == 0) throw InvalidArgument("image side must be positive");
  const std::size_t side = spec.side;
  ImageTask task;
  task.images = Tensor({count, 1, side, side});
  Rng rng(derive_seed(seed, "synthetic_images", static_cast<std::uint64_t>(owner)));
  const double noise = spec.noise * (1.0 + 0.5 * owner);
  const double base_freq = 1.0 + owner;
  for (std::size_t b = 0; b < count; ++b) {
    const int y = rng.uniform() < 0.5 ? 1 : 0;
    const int s = rng.uniform() < spec.sensitive_agreement ? y : 1 - y;
    const double freq = base_freq + static_cast<double>(rng.below(2));
    const double phase = rng.uniform(0, std::numbers::pi / 2);
    const double amplitude = rng.uniform(0.15, 0.3);
    const double u = rng.uniform();
    const double level = 0.05 + spec.exposure * u * u * u;
    const double span = static_cast<double>(side - 1);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double t = static_cast<double>(y == 0 ? r : c) / static_cast<double>(side);
        const double ramp = s == 1 ? spec.steep_ramp : spec.shallow_ramp;
        double v = level + ramp * static_cast<double>(c) / span +
                   0.05 * static_cast<double>(r) / span +
                   amplitude * std::sin(2 * std::numbers::pi * freq * t + phase) +
                   noise * rng.normal();
        task.images[(b * side + r) * side + c] = std::clamp(v, 0.0, 1.0);
      }
    }
    task.labels.push_back(y);
    task.sensitive.push_back(s);
  }
  return task;
}

ImageTask slice(const ImageTask& task, std::size_t begin, std::size_t end) {
  if (begin > end || end > task.size()) throw InvalidArgument("task slice out of range");
  const std::size_t per = task.images.size() / std::max<std::size_t>(task.size(), 1);
  std::vector<std::size_t> shape = task.images.shape();
  shape[0] = end - begin;
  ImageTask out;
  out.images = Tensor(shape, std::vector<double>(task.images.values().begin() + begin * per,
                                                 task.images.values().begin() + end * per));
  out.labels.assign(task.labels.begin() + begin, task.labels.begin() + end);
  out.sensitive.assign(task.sensitive.begin() + begin, task.sensitive.begin() + end);
  return out;
}

}  // namespace peopl
