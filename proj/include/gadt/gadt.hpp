#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "gadt/attacks.hpp"
#include "gadt/diffaug.hpp"
#include "gadt/model.hpp"

namespace gadt {

struct GadtConfig {
  std::size_t iterations = 20;
  double lambda = 1.0;
  double learning_rate = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool optimize_angle = true;
  /// Re-transform the previous iterate instead of the clean image at every
  /// step (literal reading of the update loop). Off by default.
  bool compound = false;
  AugParams initial{0.5, 0.0, 0.75};
  BlurShape blur{};
  GrayscaleFallback fallback = GrayscaleFallback::contrast;
  /// When non-zero, images whose stream id is a multiple of this value get a
  /// finite-difference check of the first theta-gradient (in 64-bit).
  std::size_t verify_every = 0;

  void validate() const;
};

struct AdamState {
  std::size_t step = 0;
  std::array<double, 3> first{};
  std::array<double, 3> second{};
};

/// Bias-corrected Adam descent step followed by projection into the valid box.
std::pair<AdamState, AugParams> adam_step(const AdamState& state, const AugParams& theta,
                                          const std::array<double, 3>& grad, const GadtConfig& cfg);

/// -CE(f(x_trans), y) + lambda * MSE(x_clean, x_trans)
template <typename T>
Tensor<T> loss_trans(const Tensor<T>& x_clean, const Tensor<T>& x_trans, std::span<const ClassIndex> y,
                     const Model<T>& model, double lambda);

struct GadtTraceEntry {
  AugParams theta;
  double loss = 0.0;
  double ce = 0.0;
  double mse = 0.0;
};

template <typename T>
struct StageOneResult {
  AugParams theta;
  Tensor<T> x_trans;
  std::vector<GadtTraceEntry> trace;
  /// Relative error of the spot finite-difference check, when one ran.
  std::optional<double> gradient_check;
};

/// Adam optimisation of the augmentation parameters for one [1,C,H,W] image.
template <typename T>
StageOneResult<T> optimize_da_params(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const GadtConfig& cfg,
                                     std::uint64_t stream_id = 0);

/// Analytic gradient of loss_trans w.r.t. (blur, angle, saturation) at theta,
/// with the transform applied to x.
template <typename T>
std::array<double, 3> theta_gradient(const Tensor<T>& x, ClassIndex y, const Model<T>& model, const AugParams& theta,
                                     const GadtConfig& cfg, double* loss = nullptr, double* ce = nullptr,
                                     double* mse = nullptr);

template <typename T>
struct GadtAttackResult {
  AttackResult<T> attack;
  std::vector<StageOneResult<T>> stage_one;
  std::vector<double> linf_to_trans;
  std::vector<double> linf_to_clean;
};

/// Stage one per image, then run_attack starting from the transformed images.
template <typename T>
GadtAttackResult<T> gadt_attack(const Tensor<T>& x, std::span<const ClassIndex> y, const Model<T>& surrogate,
                                AttackId attack, const AttackConfig& attack_cfg, const GadtConfig& gadt_cfg,
                                const AttackOptions& options = {});

/// Runs the attack from already-transformed images and fills the distance
/// fields; gadt_attack is optimize_da_params followed by this.
template <typename T>
GadtAttackResult<T> attack_from_transformed(const Tensor<T>& x_clean, std::vector<StageOneResult<T>> stage_one,
                                            std::span<const ClassIndex> y, const Model<T>& surrogate, AttackId attack,
                                            const AttackConfig& attack_cfg, const AttackOptions& options = {});

}  // namespace gadt
