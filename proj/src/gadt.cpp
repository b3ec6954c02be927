#include "gadt/gadt.hpp"

#include <algorithm>
#include <cmath>

#include "gadt/ops.hpp"

namespace gadt {

void GadtConfig::validate() const {
  if (iterations < 1) throw ConfigError("gadt: iterations must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("gadt: lambda must be non-negative");
  // Zero is allowed: it turns stage one into a fixed transform.
  if (!(learning_rate >= 0.0)) throw ConfigError("gadt: learning rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("gadt: Adam betas must be in [0,1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("gadt: Adam epsilon must be positive");
  if (!initial.valid()) throw ConfigError("gadt: initial augmentation parameters outside their valid ranges");
}

std::pair<AdamState, AugParams> adam_step(const AdamState& state, const AugParams& theta,
                                          const std::array<double, 3>& grad, const GadtConfig& cfg) {
  for (double g : grad) {
    if (!std::isfinite(g)) throw OptimizerError("adam_step: non-finite gradient at step " + std::to_string(state.step + 1));
  }
  AdamState next = state;
  next.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(next.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(next.step));
  auto p = theta.as_array();
  for (std::size_t i = 0; i < 3; ++i) {
    next.first[i] = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * grad[i];
    next.second[i] = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = next.first[i] / c1;
    const double v_hat = next.second[i] / c2;
    p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
  }
  return {next, AugParams::from_array(p).projected()};
}

template <typename T>
Tensor<T> loss_trans(const Tensor<T>& x_clean, const Tensor<T>& x_trans, std::span<const ClassIndex> y,
                     const Model<T>& model, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("loss_trans: lambda must be non-negative");
  auto ce = softmax_cross_entropy(model.forward(x_trans), y);
  return add(scale(ce, T(-1)), scale(mse(x_clean, x_trans), static_cast<T>(lambda)));
}

namespace {

template <typename T>
struct LossParts {
  Tensor<T> total;
  double ce;
  double mse;
};

template <typename T>
LossParts<T> evaluate(const Tensor<T>& x_clean, const Tensor<T>& x_input, ClassIndex y, const Model<T>& model,
                      const AugTensors<T>& theta, const GadtConfig& cfg) {
  const ClassIndex labels[1] = {y};
  auto xt = transform(x_input, theta, cfg.blur, cfg.fallback);
  auto ce = softmax_cross_entropy(model.forward(xt), labels);
  auto fid = mse(x_clean, xt);
  auto total = add(scale(ce, T(-1)), scale(fid, static_cast<T>(cfg.lambda)));
  return {total, static_cast<double>(ce.item()), static_cast<double>(fid.item())};
}

template <typename T>
std::array<double, 3> gradient_at(const Tensor<T>& x_clean, const Tensor<T>& x_input, ClassIndex y,
                                  const Model<T>& model, const AugParams& theta, const GadtConfig& cfg,
                                  GadtTraceEntry* entry) {
  auto params = make_aug_tensors<T>(theta, true);
  auto parts = evaluate(x_clean, x_input, y, model, params, cfg);
  parts.total.backward();
  if (entry) *entry = {theta, static_cast<double>(parts.total.item()), parts.ce, parts.mse};
  return {static_cast<double>(params.blur.grad()[0]), static_cast<double>(params.angle.grad()[0]),
          static_cast<double>(params.saturation.grad()[0])};
}

// Central differences of the loss in 64-bit against the analytic gradient.
template <typename T>
double spot_check(const Tensor<T>& x_clean, const Tensor<T>& x_input, ClassIndex y, const Model<T>& model,
                  const AugParams& theta, const GadtConfig& cfg, const std::array<double, 3>& analytic) {
  const auto model64 = cast_model<double>(model);
  const auto clean64 = cast_tensor<double>(x_clean);
  const auto input64 = cast_tensor<double>(x_input);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    auto plus = theta.as_array(), minus = theta.as_array();
    plus[j] += h;
    minus[j] -= h;
    const auto fp = evaluate(clean64, input64, y, model64, make_aug_tensors<double>(AugParams::from_array(plus), false), cfg);
    const auto fm = evaluate(clean64, input64, y, model64, make_aug_tensors<double>(AugParams::from_array(minus), false), cfg);
    const double numeric = (fp.total.item() - fm.total.item()) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
  }
  return worst;
}

}  // namespace

template <typename T>
std::array<double, 3> theta_gradient(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const AugParams& theta,
                                     const GadtConfig& cfg, double* loss, double* ce, double* mse_out) {
  GadtTraceEntry e;
  const auto g = gradient_at(x, x, y, model, theta, cfg, &e);
  if (loss) *loss = e.loss;
  if (ce) *ce = e.ce;
  if (mse_out) *mse_out = e.mse;
  return g;
}

template <typename T>
StageOneResult<T> optimize_da_params(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const GadtConfig& cfg,
                                     std::uint64_t stream_id) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(0) != 1) throw DimensionError("optimize_da_params: expects one [1,C,H,W] image");
  for (auto v : x.data()) {
    if (!(v >= T(0) && v <= T(1))) throw ContractError("optimize_da_params: image must lie in [0,1]");
  }
  StageOneResult<T> out;
  AugParams theta = cfg.initial;
  AdamState state;
  Tensor<T> input = x;
  for (std::size_t k = 0; k < cfg.iterations; ++k) {
    GadtTraceEntry entry;
    auto grad = gradient_at(x, input, y, model, theta, cfg, &entry);
    if (!cfg.optimize_angle) grad[1] = 0.0;
    if (k == 0 && cfg.verify_every > 0 && stream_id % cfg.verify_every == 0) {
      out.gradient_check = spot_check(x, input, y, model, theta, cfg, grad);
    }
    out.trace.push_back(entry);
    if (cfg.compound) input = transform(input, make_aug_tensors<T>(theta, false), cfg.blur, cfg.fallback).detach();
    std::tie(state, theta) = adam_step(state, theta, grad, cfg);
  }
  out.theta = theta;
  out.x_trans = transform(input, make_aug_tensors<T>(theta, false), cfg.blur, cfg.fallback).detach();
  return out;
}

template <typename T>
GadtAttackResult<T> attack_from_transformed(const Tensor<T>& x_clean, std::vector<StageOneResult<T>> stage_one,
                                            std::span<const ClassIndex> y, const Model<T>& surrogate, AttackId attack,
                                            const AttackConfig& attack_cfg, const AttackOptions& options) {
  const std::size_t N = x_clean.dim(0), n = x_clean.size() / N;
  if (stage_one.size() != N) throw DimensionError("attack_from_transformed: one stage-one result per image required");
  std::vector<T> start(x_clean.size());
  for (std::size_t i = 0; i < N; ++i) {
    auto d = stage_one[i].x_trans.data();
    std::copy(d.begin(), d.end(), start.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  GadtAttackResult<T> out;
  out.attack = run_attack(attack, Tensor<T>::from(x_clean.shape(), std::move(start)), y, surrogate, attack_cfg, options);
  auto adv = out.attack.adversarial.data();
  auto clean = x_clean.data();
  for (std::size_t i = 0; i < N; ++i) {
    auto a = adv.subspan(i * n, n);
    out.linf_to_trans.push_back(linf_distance(a, stage_one[i].x_trans.data()));
    out.linf_to_clean.push_back(linf_distance(a, clean.subspan(i * n, n)));
  }
  out.stage_one = std::move(stage_one);
  return out;
}

template <typename T>
GadtAttackResult<T> gadt_attack(const Tensor<T>& x, std::span<const ClassIndex> y, const Model<T>& surrogate,
                                AttackId attack, const AttackConfig& attack_cfg, const GadtConfig& gadt_cfg,
                                const AttackOptions& options) {
  if (x.rank() != 4) throw DimensionError("gadt_attack: expected [N,C,H,W]");
  if (y.size() != x.dim(0)) throw DimensionError("gadt_attack: label count does not match batch size");
  const std::size_t N = x.dim(0), n = x.size() / N;
  std::vector<StageOneResult<T>> stage_one;
  for (std::size_t i = 0; i < N; ++i) {
    auto d = x.data().subspan(i * n, n);
    const auto xi = Tensor<T>::from({1, x.dim(1), x.dim(2), x.dim(3)}, std::vector<T>(d.begin(), d.end()));
    const std::uint64_t stream = options.stream_ids.empty() ? i : options.stream_ids.at(i);
    stage_one.push_back(optimize_da_params(xi, y[i], surrogate, gadt_cfg, stream));
  }
  return attack_from_transformed(x, std::move(stage_one), y, surrogate, attack, attack_cfg, options);
}

#define GADT_INSTANTIATE_STAGE(T)                                                                                   \
  template Tensor<T> loss_trans(const Tensor<T>&, const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&,  \
                                double);                                                                            \
  template std::array<double, 3> theta_gradient(const Tensor<T>&, ClassIndex, const Model<T>&, const AugParams&,    \
                                                const GadtConfig&, double*, double*, double*);                      \
  template StageOneResult<T> optimize_da_params(const Tensor<T>&, ClassIndex, const Model<T>&, const GadtConfig&,   \
                                                std::uint64_t);                                                     \
  template GadtAttackResult<T> attack_from_transformed(const Tensor<T>&, std::vector<StageOneResult<T>>,           \
                                                       std::span<const ClassIndex>, const Model<T>&, AttackId,      \
                                                       const AttackConfig&, const AttackOptions&);                  \
  template GadtAttackResult<T> gadt_attack(const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&,          \
                                           AttackId, const AttackConfig&, const GadtConfig&, const AttackOptions&);

GADT_INSTANTIATE_STAGE(float)
GADT_INSTANTIATE_STAGE(double)

}  // namespace gadt
