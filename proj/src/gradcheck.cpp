#include "gadt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gadt {

GradcheckResult finite_diff_gradcheck(const ScalarFunction& f, const Tensor<double>& x,
                                      const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("gradcheck: step must be positive");

  auto probe = x.clone(true);
  auto loss = f(probe);
  if (loss.size() != 1) throw ContractError("gradcheck: function must return a scalar");
  const double first = loss.item();
  if (f(x.detach()).item() != first) {
    throw ContractError("gradcheck: function is not deterministic (two evaluations differ)");
  }
  loss.backward();
  std::vector<double> analytic(x.size(), 0.0);
  if (probe.has_grad()) {
    auto g = probe.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  GradcheckResult result;
  auto base = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (options.include && !options.include(i)) continue;
    std::vector<double> plus(base.begin(), base.end()), minus(base.begin(), base.end());
    plus[i] += options.step;
    minus[i] -= options.step;
    const double fp = f(Tensor<double>::from(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor<double>::from(x.shape(), std::move(minus))).item();
    const double numeric = (fp - fm) / (2.0 * options.step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic[i] - numeric) / denom;
    ++result.checked;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace gadt
