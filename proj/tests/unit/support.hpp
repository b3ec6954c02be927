#pragma once

#include <cmath>
#include <vector>

#include "gadt/dataset.hpp"
#include "gadt/model.hpp"
#include "gadt/random.hpp"
#include "gadt/tensor.hpp"

namespace support {

template <typename T = double>
gadt::Tensor<T> random_tensor(gadt::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                              bool requires_grad = false) {
  gadt::Rng rng(seed);
  std::vector<T> v(gadt::numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  return gadt::Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Untrained small model on 3x16x16 inputs with nonzero biases.
template <typename T = double>
gadt::Model<T> tiny_model(std::uint64_t seed, const std::string& arch = "small", std::size_t classes = 6) {
  auto m = gadt::build_model<T>(gadt::architecture(arch, 3, 16, 16, classes), seed);
  gadt::Rng rng(seed + 99);
  for (auto& w : m.weights) {
    if (w.rank() != 1) continue;
    for (auto& v : w.mutable_data()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
  }
  return m;
}

inline const gadt::Dataset& tiny_data() {
  static const gadt::Dataset d = gadt::make_synthetic_shapes({11, 700, 16, 0.06});
  return d;
}

/// Small-arch model briefly trained on 16x16 synthetic shapes.
inline const gadt::Model<float>& trained_tiny() {
  static const gadt::Model<float> m = [] {
    const auto& d = tiny_data();
    gadt::TrainConfig cfg;
    cfg.epochs = 6;
    cfg.seed = 5;
    auto spec = gadt::architecture("small", 3, 16, 16, d.classes);
    return gadt::train(gadt::build_model<float>(spec, 5), d.head(600), cfg);
  }();
  return m;
}

}  // namespace support
