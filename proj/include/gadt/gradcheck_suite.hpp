#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gadt {

enum class Precision { f32, f64 };

Precision parse_precision(const std::string& name);
std::string to_string(Precision p);

struct GradcheckCase {
  std::string name;
  /// "smooth" for single operations, "composed" for pipelines.
  std::string kind;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Finite-difference checks of every differentiable operation: conv2d, pooling,
/// dense, relu, cross-entropy, MSE, clamp, gather, blur kernel, saturation,
/// transform, the stage-one loss w.r.t. theta and full model input gradients.
/// f64 compares against central differences with tolerance 1e-6 (single ops)
/// and 1e-4 (pipelines). f32 compares 32-bit reverse-mode gradients against
/// 64-bit central differences, with errors measured relative to
/// max(|a|, |d|, 1e-3 * max|d|) and tolerance 1e-3.
std::vector<GradcheckCase> gradcheck_suite(Precision mode, std::uint64_t seed = 0);

}  // namespace gadt
