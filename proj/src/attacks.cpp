#include "gadt/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "gadt/ops.hpp"
#include "gadt/random.hpp"

namespace gadt {

AttackId parse_attack_id(const std::string& name) {
  if (name == "mim") return AttackId::mim;
  if (name == "sim") return AttackId::sim;
  if (name == "dim") return AttackId::dim;
  if (name == "tim") return AttackId::tim;
  if (name == "admix") return AttackId::admix;
  throw ConfigError("unknown attack id '" + name + "' (expected mim, sim, dim, tim or admix)");
}

std::string to_string(AttackId id) {
  switch (id) {
    case AttackId::mim: return "mim";
    case AttackId::sim: return "sim";
    case AttackId::dim: return "dim";
    case AttackId::tim: return "tim";
    case AttackId::admix: return "admix";
  }
  return "?";
}

std::vector<AttackId> all_attack_ids() {
  return {AttackId::mim, AttackId::sim, AttackId::dim, AttackId::tim, AttackId::admix};
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("attack: epsilon must be positive");
  if (steps < 1) throw ConfigError("attack: steps must be at least 1");
  if (!(alpha() > 0.0)) throw ConfigError("attack: step size must be positive");
  if (alpha() * static_cast<double>(steps) > epsilon + 1e-9) {
    throw ConfigError("attack: step size * steps exceeds epsilon");
  }
  if (momentum < 0.0) throw ConfigError("attack: momentum must be non-negative");
  if (sim_scales < 1) throw ConfigError("attack: sim_scales must be at least 1");
  if (dim_probability < 0.0 || dim_probability > 1.0) throw ConfigError("attack: dim_probability must be in [0,1]");
  if (dim_min_scale <= 0.0 || dim_min_scale > 1.0) throw ConfigError("attack: dim_min_scale must be in (0,1]");
  if (tim_kernel_size % 2 == 0) throw ConfigError("attack: tim_kernel_size must be odd");
  if (!(tim_sigma > 0.0)) throw ConfigError("attack: tim_sigma must be positive");
  if (admix_count < 1) throw ConfigError("attack: admix_count must be at least 1");
  if (!(admix_eta > 0.0 && admix_eta < 1.0)) throw ConfigError("attack: admix_eta must be in (0,1)");
}

double linf_distance(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

double linf_distance(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
Tensor<T> input_gradient(const Model<T>& model, const Tensor<T>& x, std::span<const ClassIndex> y, double* loss) {
  auto probe = x.clone(true);
  auto l = softmax_cross_entropy(model.forward(probe), y);
  l.backward();
  if (loss) *loss = static_cast<double>(l.item());
  auto g = probe.grad();
  return Tensor<T>::from(x.shape(), std::vector<T>(g.begin(), g.end()));
}

namespace {

template <typename T>
T sign(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

template <typename T>
Tensor<T> image_at(const Tensor<T>& batch, std::size_t i) {
  const std::size_t n = batch.size() / batch.dim(0);
  auto d = batch.data().subspan(i * n, n);
  return Tensor<T>::from({1, batch.dim(1), batch.dim(2), batch.dim(3)}, std::vector<T>(d.begin(), d.end()));
}

// Per-image gradient hook: (x, label, iteration) -> gradient; sets the hook loss.
template <typename T>
using GradientHook = std::function<Tensor<T>(const Tensor<T>&, ClassIndex, std::size_t, double&)>;

template <typename T>
void require_batch(const Tensor<T>& start, std::span<const ClassIndex> y) {
  if (start.rank() != 4) throw DimensionError("attack: expected [N,C,H,W] start batch, got " + to_string(start.shape()));
  if (y.size() != start.dim(0)) throw DimensionError("attack: label count does not match batch size");
  for (auto v : start.data()) {
    if (!(v >= T(0) && v <= T(1))) throw ContractError("attack: start images must lie in [0,1]");
  }
}

template <typename T>
AttackResult<T> iterate(const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& model,
                        const AttackConfig& cfg, const AttackOptions& options,
                        const std::function<GradientHook<T>(std::size_t image, std::uint64_t seed)>& make_hook) {
  cfg.validate();
  require_batch(start, y);
  const std::size_t N = start.dim(0), n = start.size() / N;
  const T alpha = static_cast<T>(cfg.alpha());
  const T eps = static_cast<T>(cfg.epsilon);
  const T mu = static_cast<T>(cfg.momentum);

  AttackResult<T> result;
  result.iterations = cfg.steps;
  std::vector<T> out(start.size());
  result.loss_trace.resize(N);
  result.linf_to_start.resize(N);
  result.success.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::uint64_t stream = options.stream_ids.empty() ? i : options.stream_ids.at(i);
    auto hook = make_hook(i, mix_seed(cfg.seed, stream));
    const auto x0 = image_at(start, i);
    auto s0 = x0.data();
    std::vector<T> x(s0.begin(), s0.end());
    std::vector<T> g(n, T(0));
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      double hook_loss = 0.0;
      const auto grad_t = hook(Tensor<T>::from(x0.shape(), x), y[i], t, hook_loss);
      result.loss_trace[i].push_back(hook_loss);
      auto grad = grad_t.data();
      T l1 = 0;
      for (auto v : grad) {
        if (!std::isfinite(v)) {
          throw AttackError("non-finite gradient at iteration " + std::to_string(t) + " for image " + std::to_string(i));
        }
        l1 += std::abs(v);
      }
      for (std::size_t k = 0; k < n; ++k) {
        g[k] = mu * g[k] + (l1 > T(0) ? grad[k] / l1 : T(0));
        const T stepped = std::clamp(x[k] + alpha * sign(g[k]), T(0), T(1));
        x[k] = std::clamp(stepped, s0[k] - eps, s0[k] + eps);
      }
    }
    auto xt = Tensor<T>::from(x0.shape(), x);
    const auto logits = model.forward(xt);
    const ClassIndex yi[1] = {y[i]};
    result.loss_trace[i].push_back(static_cast<double>(cross_entropy_rows(logits, yi)[0]));
    result.success[i] = argmax_rows(logits)[0] != y[i];
    double linf = 0.0;
    for (std::size_t k = 0; k < n; ++k) linf = std::max(linf, std::abs(static_cast<double>(x[k]) - s0[k]));
    result.linf_to_start[i] = linf;
    std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  result.adversarial = Tensor<T>::from(start.shape(), std::move(out));
  return result;
}

}  // namespace

template <typename T>
Tensor<T> fgsm(const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& model, double epsilon) {
  require_batch(start, y);
  const T eps = static_cast<T>(epsilon);
  const std::size_t N = start.dim(0), n = start.size() / N;
  std::vector<T> out(start.size());
  for (std::size_t i = 0; i < N; ++i) {
    const auto xi = image_at(start, i);
    const ClassIndex yi[1] = {y[i]};
    const auto grad = input_gradient(model, xi, yi);
    auto g = grad.data();
    auto s = xi.data();
    for (std::size_t k = 0; k < n; ++k) out[i * n + k] = std::clamp(s[k] + eps * sign(g[k]), T(0), T(1));
  }
  return Tensor<T>::from(start.shape(), std::move(out));
}

template <typename T>
AttackResult<T> mifgsm(const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& model,
                       const AttackConfig& cfg, const AttackOptions& options) {
  return run_attack(AttackId::mim, start, y, model, cfg, options);
}

template <typename T>
Tensor<T> sim_gradient(const Tensor<T>& x, std::span<const ClassIndex> y, const Model<T>& model, std::size_t m,
                       double* loss) {
  if (m < 1) throw ContractError("sim_gradient: need at least one scale");
  std::vector<T> acc(x.size(), T(0));
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    auto probe = x.clone(true);
    const T factor = T(1) / static_cast<T>(std::uint64_t{1} << i);
    auto l = softmax_cross_entropy(model.forward(scale(probe, factor)), y);
    l.backward();
    total += static_cast<double>(l.item());
    auto g = probe.grad();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  }
  const T inv = T(1) / static_cast<T>(m);
  for (auto& v : acc) v *= inv;
  if (loss) *loss = total / static_cast<double>(m);
  return Tensor<T>::from(x.shape(), std::move(acc));
}

template <typename T>
Tensor<T> dim_transform(const Tensor<T>& x, double p, std::uint64_t seed, double min_scale) {
  if (x.rank() != 4) throw DimensionError("dim_transform: expected [N,C,H,W]");
  if (p < 0.0 || p > 1.0) throw ContractError("dim_transform: probability must be in [0,1]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<std::ptrdiff_t> index(x.size());
  Rng rng(seed);
  for (std::size_t n = 0; n < N; ++n) {
    const bool apply = rng.uniform() < p;
    const auto lo_h = static_cast<std::size_t>(std::ceil(min_scale * static_cast<double>(H) - 1e-9));
    const auto lo_w = static_cast<std::size_t>(std::ceil(min_scale * static_cast<double>(W) - 1e-9));
    // Draw the geometry unconditionally so the stream does not depend on `apply`.
    const double scale_draw = rng.uniform();
    const double top_draw = rng.uniform();
    const double left_draw = rng.uniform();
    std::size_t rh = H, rw = W, top = 0, left = 0;
    if (apply) {
      const double f = static_cast<double>(lo_h) / static_cast<double>(H) +
                       scale_draw * (1.0 - static_cast<double>(lo_h) / static_cast<double>(H));
      rh = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(f * static_cast<double>(H) + 0.5)), lo_h, H);
      rw = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(f * static_cast<double>(W) + 0.5)), lo_w, W);
      top = static_cast<std::size_t>(top_draw * static_cast<double>(H - rh + 1));
      left = static_cast<std::size_t>(left_draw * static_cast<double>(W - rw + 1));
    }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t o = ((n * C + c) * H + yy) * W + xx;
          if (yy < top || yy >= top + rh || xx < left || xx >= left + rw) {
            index[o] = -1;
            continue;
          }
          const std::size_t sy = (yy - top) * H / rh;
          const std::size_t sx = (xx - left) * W / rw;
          index[o] = static_cast<std::ptrdiff_t>(((n * C + c) * H + sy) * W + sx);
        }
  }
  return gather(x, std::move(index), x.shape());
}

template <typename T>
Tensor<T> tim_smooth_gradient(const Tensor<T>& grad, std::size_t kernel_size, double sigma) {
  if (kernel_size % 2 == 0) throw ContractError("tim_smooth_gradient: kernel size must be odd");
  if (!(sigma > 0.0)) throw ContractError("tim_smooth_gradient: sigma must be positive");
  if (grad.rank() != 4) throw DimensionError("tim_smooth_gradient: expected [N,C,H,W]");
  const std::size_t k = kernel_size;
  const double half = static_cast<double>(k / 2);
  std::vector<double> w(k * k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double dy = static_cast<double>(i) - half, dx = static_cast<double>(j) - half;
      w[i * k + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[i * k + j];
    }
  std::vector<T> kernel(k * k);
  for (std::size_t i = 0; i < w.size(); ++i) kernel[i] = static_cast<T>(w[i] / total);
  const Shape planes{grad.dim(0) * grad.dim(1), 1, grad.dim(2), grad.dim(3)};
  auto out = conv2d(reshape(grad.detach(), planes), Tensor<T>::from({1, 1, k, k}, std::move(kernel)), PadMode::replicate);
  return reshape(out, grad.shape()).detach();
}

template <typename T>
Tensor<T> admix_gradient(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const Dataset& pool, double eta,
                         std::size_t n_mix, std::size_t m_scales, std::uint64_t seed, double* loss, double* mixed_min,
                         double* mixed_max) {
  if (x.rank() != 4 || x.dim(0) != 1) throw DimensionError("admix_gradient: expects a single [1,C,H,W] image");
  if (!(eta > 0.0 && eta < 1.0)) throw ContractError("admix_gradient: eta must be in (0,1)");
  if (n_mix < 1 || m_scales < 1) throw ContractError("admix_gradient: need at least one draw and one scale");
  if (pool.image_size() != x.size() / x.dim(0)) throw DimensionError("admix_gradient: pool image shape mismatch");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool.labels[i] != y) candidates.push_back(i);
  if (candidates.empty()) throw ContractError("admix_gradient: mix pool has no image with a label other than y");

  Rng rng(seed);
  const ClassIndex labels[1] = {y};
  std::vector<T> acc(x.size(), T(0));
  double total = 0.0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  const T e = static_cast<T>(eta);
  for (std::size_t j = 0; j < n_mix; ++j) {
    auto other = pool.image(candidates[rng.below(candidates.size())]);
    std::vector<T> mix(other.size());
    for (std::size_t k = 0; k < mix.size(); ++k) mix[k] = e * static_cast<T>(other[k]);
    const auto mix_t = Tensor<T>::from(x.shape(), std::move(mix));
    for (std::size_t i = 0; i < m_scales; ++i) {
      auto probe = x.clone(true);
      const T factor = T(1) / static_cast<T>(std::uint64_t{1} << i);
      auto input = scale(add(probe, mix_t), factor);
      for (auto v : input.data()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
      auto l = softmax_cross_entropy(model.forward(input), labels);
      l.backward();
      total += static_cast<double>(l.item());
      auto g = probe.grad();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
    }
  }
  const T inv = T(1) / static_cast<T>(n_mix * m_scales);
  for (auto& v : acc) v *= inv;
  if (loss) *loss = total / static_cast<double>(n_mix * m_scales);
  if (mixed_min) *mixed_min = lo;
  if (mixed_max) *mixed_max = hi;
  return Tensor<T>::from(x.shape(), std::move(acc));
}

template <typename T>
AttackResult<T> run_attack(AttackId id, const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& surrogate,
                           const AttackConfig& cfg, const AttackOptions& options) {
  double mixed_lo = std::numeric_limits<double>::infinity(), mixed_hi = -mixed_lo;
  if (id == AttackId::admix && (!options.pool.images || options.pool.images->size() == 0)) {
    throw ContractError("admix: an image pool is required");
  }
  auto make_hook = [&](std::size_t, std::uint64_t seed) -> GradientHook<T> {
    switch (id) {
      case AttackId::mim:
        return [&](const Tensor<T>& x, ClassIndex y, std::size_t, double& loss) {
          const ClassIndex l[1] = {y};
          return input_gradient(surrogate, x, l, &loss);
        };
      case AttackId::sim:
        return [&](const Tensor<T>& x, ClassIndex y, std::size_t, double& loss) {
          const ClassIndex l[1] = {y};
          return sim_gradient(x, l, surrogate, cfg.sim_scales, &loss);
        };
      case AttackId::dim:
        return [&, seed](const Tensor<T>& x, ClassIndex y, std::size_t t, double& loss) {
          const ClassIndex l[1] = {y};
          auto probe = x.clone(true);
          auto lt = softmax_cross_entropy(
              surrogate.forward(dim_transform(probe, cfg.dim_probability, mix_seed(seed, t), cfg.dim_min_scale)), l);
          lt.backward();
          loss = static_cast<double>(lt.item());
          auto g = probe.grad();
          return Tensor<T>::from(x.shape(), std::vector<T>(g.begin(), g.end()));
        };
      case AttackId::tim:
        return [&](const Tensor<T>& x, ClassIndex y, std::size_t, double& loss) {
          const ClassIndex l[1] = {y};
          return tim_smooth_gradient(input_gradient(surrogate, x, l, &loss), cfg.tim_kernel_size, cfg.tim_sigma);
        };
      case AttackId::admix:
        return [&, seed](const Tensor<T>& x, ClassIndex y, std::size_t t, double& loss) {
          double lo = 0, hi = 0;
          auto g = admix_gradient(x, y, surrogate, *options.pool.images, cfg.admix_eta, cfg.admix_count, cfg.sim_scales,
                                  mix_seed(seed, t), &loss, &lo, &hi);
          mixed_lo = std::min(mixed_lo, lo);
          mixed_hi = std::max(mixed_hi, hi);
          return g;
        };
    }
    throw ConfigError("unknown attack id");
  };
  auto result = iterate<T>(start, y, surrogate, cfg, options, make_hook);
  if (id == AttackId::admix) {
    result.mixed_min = mixed_lo;
    result.mixed_max = mixed_hi;
  }
  return result;
}

#define GADT_INSTANTIATE_ATTACKS(T)                                                                                 \
  template Tensor<T> input_gradient(const Model<T>&, const Tensor<T>&, std::span<const ClassIndex>, double*);     \
  template Tensor<T> fgsm(const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&, double);                \
  template AttackResult<T> mifgsm(const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&,                 \
                                  const AttackConfig&, const AttackOptions&);                                     \
  template Tensor<T> sim_gradient(const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&, std::size_t,    \
                                  double*);                                                                       \
  template Tensor<T> dim_transform(const Tensor<T>&, double, std::uint64_t, double);                              \
  template Tensor<T> tim_smooth_gradient(const Tensor<T>&, std::size_t, double);                                  \
  template Tensor<T> admix_gradient(const Tensor<T>&, ClassIndex, const Model<T>&, const Dataset&, double,        \
                                    std::size_t, std::size_t, std::uint64_t, double*, double*, double*);          \
  template AttackResult<T> run_attack(AttackId, const Tensor<T>&, std::span<const ClassIndex>, const Model<T>&,   \
                                      const AttackConfig&, const AttackOptions&);

GADT_INSTANTIATE_ATTACKS(float)
GADT_INSTANTIATE_ATTACKS(double)

}  // namespace gadt
