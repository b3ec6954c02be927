#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gadt/dataset.hpp"
#include "gadt/model.hpp"
#include "gadt/tensor.hpp"

namespace gadt {

enum class AttackId { mim, sim, dim, tim, admix };

AttackId parse_attack_id(const std::string& name);
std::string to_string(AttackId id);
std::vector<AttackId> all_attack_ids();

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  std::size_t steps = 10;
  /// Defaults to epsilon / steps.
  std::optional<double> step_size;
  double momentum = 1.0;
  std::size_t sim_scales = 5;
  double dim_probability = 0.5;
  /// Smallest resize factor used by the DIM input transform.
  double dim_min_scale = 0.9;
  std::size_t tim_kernel_size = 7;
  double tim_sigma = 3.0;
  std::size_t admix_count = 3;
  double admix_eta = 0.2;
  std::uint64_t seed = 0;

  double alpha() const { return step_size ? *step_size : epsilon / static_cast<double>(steps); }
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

/// Images that Admix may blend in, with their labels.
struct MixPool {
  const Dataset* images = nullptr;
};

struct AttackOptions {
  /// Per-image random stream ids; image i uses index i when empty.
  std::vector<std::uint64_t> stream_ids;
  MixPool pool;
};

template <typename T>
struct AttackResult {
  Tensor<T> adversarial;
  /// Surrogate prediction differs from the label after the attack.
  std::vector<bool> success;
  std::size_t iterations = 0;
  std::vector<double> linf_to_start;
  /// Per image, the surrogate loss reported by the gradient hook at each
  /// iteration followed by the plain loss at the final iterate.
  std::vector<std::vector<double>> loss_trace;
  /// Smallest and largest pixel fed to the model by the Admix hook (unclamped).
  double mixed_min = 0.0;
  double mixed_max = 0.0;
};

/// Gradient of the mean cross-entropy w.r.t. the input batch.
template <typename T>
Tensor<T> input_gradient(const Model<T>& model, const Tensor<T>& x, std::span<const ClassIndex> y,
                         double* loss = nullptr);

/// Single-step FGSM: clamp01(start + epsilon * sign(grad)).
template <typename T>
Tensor<T> fgsm(const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& model, double epsilon);

/// Momentum iterative FGSM with L1-normalised gradients, clamped to [0,1]
/// and projected onto the L-infinity ball of radius epsilon around `start`.
template <typename T>
AttackResult<T> mifgsm(const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& model,
                       const AttackConfig& cfg, const AttackOptions& options = {});

/// Mean over i < m of the input gradient of L(x / 2^i, y), chain rule included.
template <typename T>
Tensor<T> sim_gradient(const Tensor<T>& x, std::span<const ClassIndex> y, const Model<T>& model, std::size_t m,
                       double* loss = nullptr);

/// With probability p per image: nearest-neighbour resize to a random side in
/// [ceil(min_scale * H), H], zero-padded back to H x W at a random offset.
/// Differentiable w.r.t. x.
template <typename T>
Tensor<T> dim_transform(const Tensor<T>& x, double p, std::uint64_t seed, double min_scale = 0.9);

/// Per-channel convolution of a gradient field with a normalised Gaussian kernel.
template <typename T>
Tensor<T> tim_smooth_gradient(const Tensor<T>& grad, std::size_t kernel_size, double sigma);

/// Mean over n_mix draws from the pool (labels different from y) and m scales
/// of the input gradient of L((x + eta * x') / 2^i, y). Single image only.
template <typename T>
Tensor<T> admix_gradient(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const Dataset& pool, double eta,
                         std::size_t n_mix, std::size_t m_scales, std::uint64_t seed, double* loss = nullptr,
                         double* mixed_min = nullptr, double* mixed_max = nullptr);

/// Dispatches to MI-FGSM with the hook of the named baseline.
template <typename T>
AttackResult<T> run_attack(AttackId id, const Tensor<T>& start, std::span<const ClassIndex> y, const Model<T>& surrogate,
                           const AttackConfig& cfg, const AttackOptions& options = {});

double linf_distance(std::span<const float> a, std::span<const float> b);
double linf_distance(std::span<const double> a, std::span<const double> b);

}  // namespace gadt
