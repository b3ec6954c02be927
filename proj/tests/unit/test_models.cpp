#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "gadt/attacks.hpp"
#include "gadt/gradcheck.hpp"
#include "gadt/metrics.hpp"
#include "support.hpp"

using namespace gadt;

namespace {

std::filesystem::path scratch(const std::string& name) {
  static const bool fresh = [] {
    std::filesystem::remove_all(std::filesystem::temp_directory_path() / "gadt_unit_models");
    return true;
  }();
  (void)fresh;
  auto dir = std::filesystem::temp_directory_path() / "gadt_unit_models";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Two well-separated classes: a bright or a dark image with small noise.
Dataset separable(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.channels = 3;
  d.height = d.width = 8;
  d.classes = 2;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const ClassIndex label = i % 2;
    d.labels.push_back(label);
    for (std::size_t k = 0; k < d.image_size(); ++k) {
      d.images.push_back(static_cast<float>((label ? 0.75 : 0.25) + rng.uniform(-0.1, 0.1)));
    }
  }
  return d;
}

}  // namespace

TEST_CASE("reference architectures differ and validate") {
  const auto ids = architecture_ids();
  CHECK(ids.size() >= 2);
  auto small = architecture("small", 3, 32, 32, 10);
  auto wide = architecture("wide", 3, 32, 32, 10);
  small.validate();
  wide.validate();
  CHECK(small.parameters().size() != wide.parameters().size());
  CHECK_THROWS_AS(architecture("resnet", 3, 32, 32, 10), SpecError);
}

TEST_CASE("spec errors for incompatible layers") {
  auto spec = small_arch(3, 32, 32, 10);
  for (auto& l : spec.layers) {
    if (l.kind == LayerKind::dense) l.in += 1;
  }
  CHECK_THROWS_AS(spec.validate(), SpecError);
  CHECK_THROWS_AS(build_model<float>(spec, 1), SpecError);

  ModelSpec odd{"odd", 1, 6, 6, 2,
                {LayerSpec::conv(1, 4), LayerSpec::pool(), LayerSpec::pool(), LayerSpec::flatten(),
                 LayerSpec::dense(4, 2)}};
  CHECK_THROWS_AS(odd.validate(), SpecError);
}

TEST_CASE("build_model is seed-determined and respects the fan-in bound") {
  auto spec = small_arch(3, 32, 32, 10);
  auto a = build_model<float>(spec, 7), b = build_model<float>(spec, 7), c = build_model<float>(spec, 8);
  CHECK(a.weight_crc() == b.weight_crc());
  CHECK(a.weight_crc() != c.weight_crc());
  const auto params = spec.parameters();
  REQUIRE(params.size() == a.weights.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(a.weights[i].shape() == params[i].shape);
    const auto w = a.weights[i].data();
    if (a.weights[i].rank() == 1) {
      for (float v : w) CHECK(v == 0.0f);
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(params[i].fan_in));
    double largest = 0;
    for (float v : w) largest = std::max(largest, std::abs(static_cast<double>(v)));
    CHECK(largest <= bound);
    CHECK(largest > 0.5 * bound);
  }

  // conv with one input channel and 8 filters of 3x3: fan-in 9.
  ModelSpec gray{"gray", 1, 8, 8, 2,
                 {LayerSpec::conv(1, 8), LayerSpec::relu(), LayerSpec::pool(), LayerSpec::flatten(),
                  LayerSpec::dense(8 * 4 * 4, 2)}};
  auto g = build_model<double>(gray, 3);
  CHECK(gray.parameters()[0].fan_in == 9);
  for (double v : g.weights[0].data()) CHECK(std::abs(v) <= std::sqrt(6.0 / 9.0));
}

TEST_CASE("zero final dense layer gives uniform logits") {
  auto m = build_model<double>(small_arch(3, 16, 16, 6), 2);
  for (std::size_t i = m.weights.size() - 2; i < m.weights.size(); ++i) {
    for (auto& v : m.weights[i].mutable_data()) v = 0.0;
  }
  auto x = support::random_tensor({3, 3, 16, 16}, 4, 0, 1);
  const std::vector<ClassIndex> y{0, 3, 5};
  CHECK(softmax_cross_entropy(m.forward(x), y).item() == doctest::Approx(std::log(6.0)).epsilon(1e-14));
}

TEST_CASE("forward rejects mismatched input") {
  auto m = support::tiny_model<float>(1);
  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 3, 8, 8})), DimensionError);
  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 1, 16, 16})), DimensionError);
}

TEST_CASE("forward has no cross-batch coupling and is permutation equivariant") {
  for (const std::string arch : {"small", "wide"}) {
    auto m = support::tiny_model<double>(5, arch);
    auto batch = support::random_tensor({8, 3, 16, 16}, 9, 0, 1);
    auto logits = m.forward(batch);
    const std::size_t sz = 3 * 16 * 16;
    for (std::size_t i : {0u, 5u}) {
      auto one = Tensor<double>::from({1, 3, 16, 16},
                                      std::vector<double>(batch.data().begin() + i * sz, batch.data().begin() + (i + 1) * sz));
      auto row = m.forward(one);
      for (std::size_t c = 0; c < 6; ++c) CHECK(row.data()[c] == logits.data()[i * 6 + c]);
    }
    std::vector<double> reversed;
    for (std::size_t i = 8; i-- > 0;) reversed.insert(reversed.end(), batch.data().begin() + i * sz, batch.data().begin() + (i + 1) * sz);
    auto rl = m.forward(Tensor<double>::from({8, 3, 16, 16}, reversed));
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t c = 0; c < 6; ++c) CHECK(rl.data()[(7 - i) * 6 + c] == logits.data()[i * 6 + c]);
  }
}

TEST_CASE("input gradient of CE through the model") {
  for (const std::string arch : {"small", "wide"}) {
    auto m = support::tiny_model<double>(17, arch);
    auto x = support::random_tensor({1, 3, 16, 16}, 18, 0.05, 0.95);
    const std::vector<ClassIndex> y{2};
    auto r = finite_diff_gradcheck([&](const Tensor<double>& v) { return softmax_cross_entropy(m.forward(v), y); }, x,
                                   1e-5);
    CHECK(r.max_relative_error < 1e-5);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.epochs = 1;
  cfg.learning_rate = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  auto d = separable(20, 1);
  auto m = build_model<float>(small_arch(3, 8, 8, 2), 1);
  TrainConfig zero;
  zero.epochs = 0;
  CHECK_THROWS_AS(train(m, d, zero), ConfigError);
  auto other = build_model<float>(small_arch(3, 8, 8, 3), 1);
  CHECK_THROWS_AS(train(other, separable(20, 1), TrainConfig{}), ContractError);
}

TEST_CASE("separable two-class set is learned and training is reproducible") {
  const auto train_set = separable(200, 3), test_set = separable(100, 4);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 2;
  auto spec = small_arch(3, 8, 8, 2);
  auto a = train(build_model<float>(spec, 2), train_set, cfg, &test_set);
  auto b = train(build_model<float>(spec, 2), train_set, cfg, &test_set);
  CHECK(a.record.accuracy > 0.95);
  CHECK(accuracy(a, test_set) == a.record.accuracy);
  CHECK(a.weight_crc() == b.weight_crc());
  CHECK(a.record.accuracy == b.record.accuracy);
}

TEST_CASE("divergent training reports the epoch") {
  const auto d = separable(64, 5);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e30;
  cfg.warmup_epochs = 0;
  try {
    train(build_model<float>(small_arch(3, 8, 8, 2), 1), d, cfg);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("adversarial training lowers white-box FGSM success") {
  const auto& all = support::tiny_data();
  const auto train_set = all.head(600);
  std::vector<std::size_t> idx(100);
  std::iota(idx.begin(), idx.end(), 600);
  const auto test_set = all.subset(idx);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 5;
  cfg.adversarial_clean_epochs = 3;
  cfg.adversarial_ramp_epochs = 2;
  auto spec = small_arch(3, 16, 16, all.classes);
  auto standard = train(build_model<float>(spec, 5), train_set, cfg, &test_set);
  cfg.adversarial_training = true;
  auto robust = train(build_model<float>(spec, 5), train_set, cfg, &test_set);
  CHECK(robust.record.adversarial);

  std::vector<std::size_t> all_idx(test_set.size());
  std::iota(all_idx.begin(), all_idx.end(), 0);
  const auto batch = test_set.batch<float>(all_idx);
  const auto labels = test_set.labels_at(all_idx);
  const auto fooled = [&](const Model<float>& m) {
    const auto mask = correct_mask(predict(m, batch), labels);
    const auto adv = fgsm(batch, labels, m, cfg.adversarial_epsilon);
    return attack_success_rate(m, adv, labels, mask);
  };
  const double s = fooled(standard), r = fooled(robust);
  MESSAGE("FGSM success: standard " << s << "%, adversarially trained " << r << "%");
  CHECK(r < s);
}

TEST_CASE("accuracy tie-break and invariances") {
  auto m = build_model<double>(small_arch(3, 8, 8, 4), 1);
  for (std::size_t i = m.weights.size() - 2; i < m.weights.size(); ++i) {
    for (auto& v : m.weights[i].mutable_data()) v = 0.0;
  }
  Dataset d;
  d.channels = 3;
  d.height = d.width = 8;
  d.classes = 4;
  d.labels = {0, 1, 2, 3, 0, 3, 3, 2};
  d.images.assign(d.labels.size() * d.image_size(), 0.5f);
  const double expect = 2.0 / 8.0;  // two labels are class 0
  CHECK(accuracy(m, d) == expect);

  const auto& trained = support::trained_tiny();
  const auto& data = support::tiny_data();
  const auto test = data.head(200);
  const auto preds = predict(trained, test);
  std::vector<std::size_t> wrong;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (preds[i] != test.labels[i]) wrong.push_back(i);
  if (!wrong.empty()) CHECK(accuracy(trained, test.subset(wrong)) == 0.0);

  std::vector<std::size_t> perm(test.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng(4).shuffle(perm.begin(), perm.end());
  CHECK(accuracy(trained, test.subset(perm)) == accuracy(trained, test));

  Dataset empty = test.head(0);
  CHECK_THROWS_AS(accuracy(trained, empty), ContractError);
}

TEST_CASE("weight file round trip, size and corruption") {
  const auto& m = support::trained_tiny();
  const auto path = scratch("tiny.dadv");
  save_model(m, path);
  auto loaded = load_model(path);
  CHECK(loaded.weight_crc() == m.weight_crc());
  auto x = support::tiny_data().batch<float>(std::vector<std::size_t>{0, 1, 2, 3});
  auto a = m.forward(x), b = loaded.forward(x);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  std::size_t expect = 4 + 2 + 2 + 4;
  for (const auto& p : m.spec.parameters()) expect += 1 + p.name.size() + 1 + 4 * p.shape.size() + 4 * numel(p.shape);
  CHECK(std::filesystem::file_size(path) == expect);

  auto bytes = serialize_model(m);
  CHECK(bytes.size() == expect);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DADV");
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(deserialize_model(truncated), FormatError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 1;
  CHECK_THROWS_AS(deserialize_model(flipped), FormatError);
  auto version = bytes;
  version[4] = 2;
  CHECK_THROWS_AS(deserialize_model(version), FormatError);
  CHECK_THROWS_AS(load_model(scratch("does-not-exist.dadv")), Error);
}
