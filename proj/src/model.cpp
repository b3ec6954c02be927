#include "gadt/model.hpp"

#include <zlib.h>

#include <cmath>
#include <numeric>

#include "gadt/random.hpp"

namespace gadt {

void ModelSpec::validate() const {
  if (arch.empty()) throw SpecError("model spec needs an architecture id");
  if (channels == 0 || height == 0 || width == 0 || classes < 2) {
    throw SpecError("model spec: input shape and class count must be positive (classes >= 2)");
  }
  std::size_t c = channels, h = height, w = width;
  bool flat = false;
  std::size_t features = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto where = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::conv:
        if (flat) throw SpecError(where + "conv after flatten");
        if (l.in != c) {
          throw SpecError(where + "conv expects " + std::to_string(l.in) + " channels, receives " + std::to_string(c));
        }
        if (l.out == 0 || l.kernel % 2 == 0) throw SpecError(where + "conv needs filters and an odd kernel");
        c = l.out;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::pool:
        if (flat) throw SpecError(where + "pool after flatten");
        if (h % 2 || w % 2) throw SpecError(where + "pool needs even spatial size");
        h /= 2;
        w /= 2;
        break;
      case LayerKind::flatten:
        if (flat) throw SpecError(where + "double flatten");
        flat = true;
        features = c * h * w;
        break;
      case LayerKind::dense:
        if (!flat) throw SpecError(where + "dense before flatten");
        if (l.in != features) {
          throw SpecError(where + "dense expects " + std::to_string(l.in) + " features, receives " +
                          std::to_string(features));
        }
        features = l.out;
        break;
    }
  }
  if (!flat || features != classes) throw SpecError("model spec: final layer must be dense with `classes` outputs");
}

std::vector<ModelSpec::Parameter> ModelSpec::parameters() const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto prefix = arch + "/" + std::to_string(i);
    if (l.kind == LayerKind::conv) {
      const auto fan_in = l.in * l.kernel * l.kernel;
      out.push_back({prefix + ".conv.weight", {l.out, l.in, l.kernel, l.kernel}, fan_in});
      out.push_back({prefix + ".conv.bias", {l.out}, fan_in});
    } else if (l.kind == LayerKind::dense) {
      out.push_back({prefix + ".dense.weight", {l.out, l.in}, l.in});
      out.push_back({prefix + ".dense.bias", {l.out}, l.in});
    }
  }
  return out;
}

ModelSpec small_arch(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes) {
  ModelSpec s{"small", channels, height, width, classes, {}};
  s.layers = {LayerSpec::conv(channels, 8), LayerSpec::relu(),   LayerSpec::pool(),
              LayerSpec::conv(8, 16),       LayerSpec::relu(),   LayerSpec::pool(),
              LayerSpec::flatten(),         LayerSpec::dense(16 * (height / 4) * (width / 4), classes)};
  return s;
}

ModelSpec wide_arch(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes) {
  ModelSpec s{"wide", channels, height, width, classes, {}};
  s.layers = {LayerSpec::conv(channels, 16), LayerSpec::relu(), LayerSpec::conv(16, 16), LayerSpec::relu(),
              LayerSpec::pool(),             LayerSpec::conv(16, 32), LayerSpec::relu(), LayerSpec::pool(),
              LayerSpec::flatten(),          LayerSpec::dense(32 * (height / 4) * (width / 4), classes)};
  return s;
}

ModelSpec architecture(const std::string& id, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t classes) {
  if (id == "small") return small_arch(channels, height, width, classes);
  if (id == "wide") return wide_arch(channels, height, width, classes);
  throw SpecError("unknown architecture '" + id + "'");
}

std::vector<std::string> architecture_ids() { return {"small", "wide"}; }

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != spec.channels || batch.dim(2) != spec.height || batch.dim(3) != spec.width) {
    throw DimensionError("forward: batch " + to_string(batch.shape()) + " does not match model input [N," +
                         std::to_string(spec.channels) + "," + std::to_string(spec.height) + "," +
                         std::to_string(spec.width) + "]");
  }
  Tensor<T> h = batch;
  std::size_t w = 0;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv:
        h = add_channel_bias(conv2d(h, weights[w], PadMode::zero), weights[w + 1]);
        w += 2;
        break;
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::pool:
        h = avg_pool2x2(h);
        break;
      case LayerKind::flatten:
        h = reshape(h, {h.dim(0), h.size() / h.dim(0)});
        break;
      case LayerKind::dense:
        h = linear(h, weights[w], weights[w + 1]);
        w += 2;
        break;
    }
  }
  return h;
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& w : weights) {
    w.set_requires_grad(on);
    w.zero_grad();
  }
}

template <typename T>
std::uint32_t Model<T>::weight_crc() const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& w : weights) {
    auto d = w.data();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(d.data()), static_cast<uInt>(d.size_bytes()));
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> m{spec, {}, {}};
  m.record.seed = seed;
  Rng rng(mix_seed(seed, hash_name("init")));
  for (const auto& p : spec.parameters()) {
    const bool bias = p.name.ends_with(".bias");
    std::vector<T> v(numel(p.shape), T(0));
    if (!bias) {
      const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    }
    m.weights.push_back(Tensor<T>::from(p.shape, std::move(v)));
  }
  return m;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be at least 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
  if (!(adversarial_fraction > 0.0 && adversarial_fraction <= 1.0)) {
    throw ConfigError("train: adversarial fraction must be in (0,1]");
  }
  if (adversarial_training && !(adversarial_epsilon > 0.0)) {
    throw ConfigError("train: adversarial epsilon must be positive");
  }
}

template <typename T>
Model<T> train(Model<T> model, const Dataset& train_set, const TrainConfig& cfg, const Dataset* test) {
  cfg.validate();
  if (train_set.classes != model.spec.classes) {
    throw ContractError("train: dataset has " + std::to_string(train_set.classes) + " classes, model expects " +
                        std::to_string(model.spec.classes));
  }
  if (train_set.size() == 0) throw ContractError("train: empty dataset");

  const std::size_t batches_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(batches_per_epoch * cfg.epochs);
  const std::size_t warmup_steps = batches_per_epoch * std::min(cfg.warmup_epochs, cfg.epochs);
  const auto mu = static_cast<T>(cfg.momentum);
  const T beta1 = T(0.9), beta2 = T(0.999), adam_eps = T(1e-8);
  std::vector<std::vector<T>> m1, m2;
  for (const auto& w : model.weights) {
    m1.emplace_back(w.size(), T(0));
    m2.emplace_back(w.size(), T(0));
  }
  std::size_t step = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, hash_name("train")));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      auto x = train_set.batch<T>(idx);
      const auto y = train_set.labels_at(idx);

      if (cfg.adversarial_training && epoch >= cfg.adversarial_clean_epochs) {
        model.set_requires_grad(false);
        auto probe = x.clone(true);
        softmax_cross_entropy(model.forward(probe), std::span<const ClassIndex>(y)).backward();
        auto g = probe.grad();
        std::vector<T> adv(x.data().begin(), x.data().end());
        const double ramp = static_cast<double>(batches_per_epoch * cfg.adversarial_ramp_epochs);
        const double into = static_cast<double>(step - batches_per_epoch * cfg.adversarial_clean_epochs);
        const auto eps = static_cast<T>(cfg.adversarial_epsilon * (into < ramp ? (into + 1.0) / ramp : 1.0));
        const auto adv_rows = static_cast<std::size_t>(
            std::llround(static_cast<double>(idx.size()) * cfg.adversarial_fraction));
        const std::size_t first = (idx.size() - adv_rows) * (adv.size() / idx.size());
        for (std::size_t i = first; i < adv.size(); ++i) {
          const T s = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
          adv[i] = std::clamp(adv[i] + eps * s, T(0), T(1));
        }
        x = Tensor<T>::from(x.shape(), std::move(adv));
      }

      model.set_requires_grad(true);
      Tensor<T> loss;
      try {
        loss = softmax_cross_entropy(model.forward(x), std::span<const ClassIndex>(y));
      } catch (const NumericError&) {
        throw TrainingError("training diverged (non-finite logits) in epoch " + std::to_string(epoch + 1));
      }
      if (!std::isfinite(loss.item())) {
        throw TrainingError("training diverged (non-finite loss) in epoch " + std::to_string(epoch + 1));
      }
      loss.backward();
      double rate = cfg.cosine_schedule
                        ? cfg.learning_rate * 0.5 * (1.0 + std::cos(3.141592653589793 * static_cast<double>(step) / total_steps))
                        : cfg.learning_rate;
      if (step < warmup_steps) rate *= static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
      const auto lr = static_cast<T>(rate);
      ++step;
      for (std::size_t k = 0; k < model.weights.size(); ++k) {
        auto g = model.weights[k].grad();
        auto w = model.weights[k].mutable_data();
        if (cfg.optimizer == OptimizerKind::sgd_momentum) {
          for (std::size_t i = 0; i < w.size(); ++i) {
            m1[k][i] = mu * m1[k][i] + g[i];
            w[i] -= lr * m1[k][i];
          }
        } else {
          const T c1 = T(1) - static_cast<T>(std::pow(beta1, static_cast<T>(step)));
          const T c2 = T(1) - static_cast<T>(std::pow(beta2, static_cast<T>(step)));
          for (std::size_t i = 0; i < w.size(); ++i) {
            m1[k][i] = beta1 * m1[k][i] + (T(1) - beta1) * g[i];
            m2[k][i] = beta2 * m2[k][i] + (T(1) - beta2) * g[i] * g[i];
            w[i] -= lr * (m1[k][i] / c1) / (std::sqrt(m2[k][i] / c2) + adam_eps);
          }
        }
      }
      model.set_requires_grad(false);
    }
  }
  // Fresh leaves so no training graph stays attached.
  for (auto& w : model.weights) w = w.detach();
  model.record.epochs = cfg.epochs;
  model.record.seed = cfg.seed;
  model.record.adversarial = cfg.adversarial_training;
  model.record.accuracy = accuracy(model, test ? *test : train_set);
  return model;
}

template <typename T>
std::vector<ClassIndex> predict(const Model<T>& model, const Tensor<T>& batch) {
  return argmax_rows(model.forward(batch.detach()));
}

template <typename T>
std::vector<ClassIndex> predict(const Model<T>& model, const Dataset& data) {
  std::vector<ClassIndex> out;
  out.reserve(data.size());
  constexpr std::size_t chunk = 100;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.resize(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto p = predict(model, data.batch<T>(idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
double accuracy(const Model<T>& model, const Dataset& data) {
  if (data.size() == 0) throw ContractError("accuracy: empty dataset");
  if (data.classes > model.spec.classes) throw ContractError("accuracy: label space does not match the model");
  const auto pred = predict(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

#define GADT_INSTANTIATE_MODEL(T)                                                               \
  template struct Model<T>;                                                                     \
  template Model<T> build_model<T>(const ModelSpec&, std::uint64_t);                            \
  template Model<T> train(Model<T>, const Dataset&, const TrainConfig&, const Dataset*);        \
  template std::vector<ClassIndex> predict(const Model<T>&, const Dataset&);                    \
  template std::vector<ClassIndex> predict(const Model<T>&, const Tensor<T>&);                  \
  template double accuracy(const Model<T>&, const Dataset&);

GADT_INSTANTIATE_MODEL(float)
GADT_INSTANTIATE_MODEL(double)

}  // namespace gadt
