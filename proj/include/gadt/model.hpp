#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gadt/dataset.hpp"
#include "gadt/ops.hpp"
#include "gadt/tensor.hpp"

namespace gadt {

enum class LayerKind { conv, relu, pool, flatten, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // conv: input channels, dense: input features
  std::size_t out = 0;  // conv: filters, dense: output features
  std::size_t kernel = 3;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel = 3) {
    return {LayerKind::conv, in, out, kernel};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 0}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec pool() { return {LayerKind::pool}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
};

struct ModelSpec {
  std::string arch;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;
  std::vector<LayerSpec> layers;

  /// Throws SpecError on incompatible consecutive layers.
  void validate() const;

  struct Parameter {
    std::string name;
    Shape shape;
    std::size_t fan_in = 0;
  };
  std::vector<Parameter> parameters() const;
};

/// conv8-pool-conv16-pool-dense
ModelSpec small_arch(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes);
/// conv16-conv16-pool-conv32-pool-dense
ModelSpec wide_arch(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes);
/// "small" or "wide"; throws SpecError for anything else.
ModelSpec architecture(const std::string& id, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t classes);
std::vector<std::string> architecture_ids();

struct TrainingRecord {
  std::size_t epochs = 0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
  bool adversarial = false;
};

template <typename T>
struct Model {
  ModelSpec spec;
  std::vector<Tensor<T>> weights;
  TrainingRecord record;

  /// Logits [N, classes]. Differentiable w.r.t. the batch and the weights.
  Tensor<T> forward(const Tensor<T>& batch) const;
  void set_requires_grad(bool on);
  /// CRC32 over the raw weight bytes, used to prove read-only use.
  std::uint32_t weight_crc() const;
};

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out{m.spec, {}, m.record};
  for (const auto& w : m.weights) out.weights.push_back(cast_tensor<To>(w));
  return out;
}

/// Conv and dense weights drawn uniformly from [-sqrt(6/fan_in), sqrt(6/fan_in)];
/// biases start at zero.
template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double learning_rate = 0.03;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 15;
  /// Cosine decay of the learning rate from its initial value towards zero.
  bool cosine_schedule = true;
  /// Linear ramp of the learning rate over the first epochs.
  std::size_t warmup_epochs = 1;
  std::uint64_t seed = 0;
  bool adversarial_training = false;
  double adversarial_epsilon = 16.0 / 255.0;
  /// Share of each batch (taken from its end) replaced by FGSM copies.
  double adversarial_fraction = 0.5;
  /// Plain epochs before adversarial batches start.
  std::size_t adversarial_clean_epochs = 5;
  /// Epochs over which the FGSM epsilon then grows linearly to its final value.
  std::size_t adversarial_ramp_epochs = 3;

  void validate() const;
};

/// Mini-batch training. With adversarial_training each batch is replaced by
/// its FGSM copy at adversarial_epsilon before the step. The returned model
/// records its clean accuracy on `test` when given, else on `train`.
template <typename T>
Model<T> train(Model<T> model, const Dataset& train_set, const TrainConfig& cfg, const Dataset* test = nullptr);

/// Argmax predictions, batched.
template <typename T>
std::vector<ClassIndex> predict(const Model<T>& model, const Dataset& data);
template <typename T>
std::vector<ClassIndex> predict(const Model<T>& model, const Tensor<T>& batch);

/// Fraction of correct argmax predictions (ties go to the lowest class index).
template <typename T>
double accuracy(const Model<T>& model, const Dataset& data);

/// Weight file: "DADV", u16 version, u16 tensor count, then per tensor a u8
/// name length, name, u8 rank, u32 dims and little-endian f32 values,
/// followed by a CRC32 of every preceding byte.
void save_model(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_model(const Model<float>& model);
Model<float> deserialize_model(std::span<const std::uint8_t> bytes);

}  // namespace gadt
