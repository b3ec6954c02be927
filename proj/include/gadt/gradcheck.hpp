#pragma once

#include <cstddef>
#include <functional>

#include "gadt/tensor.hpp"

namespace gadt {

struct GradcheckOptions {
  double step = 1e-6;
  /// Coordinates for which this returns false are skipped (for example
  /// points sitting on a clamp boundary). Empty means check everything.
  std::function<bool(std::size_t)> include;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

using ScalarFunction = std::function<Tensor<double>(const Tensor<double>&)>;

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
/// The per-coordinate error is |a - d| / max(|a|, |d|, 1e-8). Throws
/// ContractError when two evaluations of f at x disagree.
GradcheckResult finite_diff_gradcheck(const ScalarFunction& f, const Tensor<double>& x,
                                      const GradcheckOptions& options = {});

inline GradcheckResult finite_diff_gradcheck(const ScalarFunction& f, const Tensor<double>& x, double step) {
  GradcheckOptions o;
  o.step = step;
  return finite_diff_gradcheck(f, x, o);
}

}  // namespace gadt
