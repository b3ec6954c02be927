#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "gadt/experiment.hpp"
#include "gadt/gradcheck_suite.hpp"
#include "gadt/metrics.hpp"

using namespace gadt;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
  std::string mode = "f32";
};

// IDX with element type 0x0D (big-endian float32).
void write_idx_float(const std::filesystem::path& path, const Shape& shape, std::span<const float> data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  const unsigned char magic[4] = {0, 0, 0x0D, static_cast<unsigned char>(shape.size())};
  f.write(reinterpret_cast<const char*>(magic), 4);
  const auto be32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  for (auto d : shape) be32(static_cast<std::uint32_t>(d));
  for (float v : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    be32(bits);
  }
}

int cmd_train(const Globals& g, const std::string& arch, const std::string& data, const std::string& test,
              std::size_t epochs, double lr, bool adversarial) {
  const auto train_set = load_dataset(resolve_source(data, g.seed, "train"));
  const auto test_set = load_dataset(resolve_source(test, g.seed, "eval"));
  TrainConfig cfg;
  cfg.seed = g.seed;
  cfg.adversarial_training = adversarial;
  if (epochs) cfg.epochs = epochs;
  if (lr > 0) cfg.learning_rate = lr;
  auto spec = architecture(arch, train_set.channels, train_set.height, train_set.width, train_set.classes);
  auto model = train(build_model<float>(spec, g.seed), train_set, cfg, &test_set);
  const std::filesystem::path out = g.out.empty() ? std::filesystem::path(arch + ".dadv") : std::filesystem::path(g.out);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  save_model(model, out);
  std::printf("%s: test accuracy %.2f%%, crc %08x, written to %s\n", arch.c_str(), 100.0 * model.record.accuracy,
              model.weight_crc(), out.string().c_str());
  return 0;
}

template <typename T>
int cmd_attack_impl(const Globals& g, const std::string& surrogate_path, const std::vector<std::string>& target_paths,
                    const std::string& attack, bool use_gadt, const std::string& data, std::size_t n,
                    const AttackConfig& acfg, const GadtConfig& gcfg) {
  const auto surrogate32 = load_model(surrogate_path);
  auto eval = load_dataset(resolve_source(data, g.seed, "eval"));
  if (eval.size() < n) throw ConfigError("dataset has only " + std::to_string(eval.size()) + " images");
  eval = eval.head(n);
  const auto surrogate = cast_model<T>(surrogate32);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const auto x = eval.batch<T>(idx);
  const auto y = eval.labels_at(idx);
  AttackOptions opts;
  opts.stream_ids.assign(idx.begin(), idx.end());
  opts.pool.images = &eval;
  const auto id = parse_attack_id(attack);
  const auto adv = use_gadt ? gadt_attack(x, y, surrogate, id, acfg, gcfg, opts).attack.adversarial
                            : run_attack(id, x, y, surrogate, acfg, opts).adversarial;

  nlohmann::ordered_json j;
  j["attack"] = (use_gadt ? "gadt-" : "") + attack;
  j["images"] = n;
  double m = 0, p = 0, s = 0, linf = 0;
  const std::size_t sz = eval.image_size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = adv.data().subspan(i * sz, sz), b = x.data().subspan(i * sz, sz);
    m += image_mse(a, b);
    p += psnr(a, b);
    s += ssim(a, b, eval.image_shape());
    linf = std::max(linf, linf_distance(a, b));
  }
  j["mse"] = m / n;
  j["psnr"] = std::isfinite(p) ? nlohmann::ordered_json(p / n) : nlohmann::ordered_json("inf");
  j["ssim"] = s / n;
  j["linf_clean"] = linf;
  const auto rate = [&](const Model<T>& model) {
    const auto mask = correct_mask(predict(model, x), y);
    if (std::find(mask.begin(), mask.end(), true) == mask.end()) return nlohmann::ordered_json(nullptr);
    return nlohmann::ordered_json(attack_success_rate(model, adv, y, mask));
  };
  j["surrogate_success_rate"] = rate(surrogate);
  j["targets"] = nlohmann::ordered_json::array();
  for (const auto& path : target_paths) {
    const auto target = cast_model<T>(load_model(path));
    j["targets"].push_back({{"weights", path}, {"success_rate", rate(target)}});
  }
  std::cout << j.dump(2) << "\n";
  if (!g.out.empty()) {
    std::filesystem::create_directories(g.out);
    std::vector<float> out(adv.data().begin(), adv.data().end());
    write_idx_float(std::filesystem::path(g.out) / "adversarial.idx", adv.shape(), out);
    std::ofstream(std::filesystem::path(g.out) / "metrics.json") << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_eval(const Globals& g, bool seed_given, std::size_t workers) {
  if (g.config.empty()) throw ConfigError("eval requires --config");
  auto cfg = load_experiment_config(g.config);
  if (seed_given) {
    cfg.seed = g.seed;
    if (!cfg.attack_seed_set) cfg.attack.seed = g.seed;
  }
  if (!g.out.empty()) {
    cfg.csv = std::filesystem::path(g.out) / "report.csv";
    cfg.json = std::filesystem::path(g.out) / "report.json";
  }
  cfg.precision = parse_precision(g.mode);
  if (workers) cfg.workers = workers;
  const auto report = run_experiment(cfg);
  std::cout << render_report(report);
  std::fprintf(stderr, "wall clock %.1f s\n", report.wall_clock_seconds);
  if (!cfg.json.empty()) {
    std::ofstream(cfg.json.parent_path() / "timing.json")
        << "{\n  \"wall_clock_seconds\": " << format_number(report.wall_clock_seconds) << "\n}\n";
  }
  return 0;
}

int cmd_gradcheck(const Globals& g) {
  const auto mode = parse_precision(g.mode);
  const auto cases = gradcheck_suite(mode, g.seed);
  bool ok = true;
  std::printf("%-34s %-9s %12s %10s\n", "operation", "kind", "max error", "tolerance");
  for (const auto& c : cases) {
    std::printf("%-34s %-9s %12.3e %10.0e %s\n", c.name.c_str(), c.kind.c_str(), c.max_error, c.tolerance,
                c.passed ? "ok" : "FAIL");
    ok = ok && c.passed;
  }
  std::printf("%zu checks in %s mode: %s\n", cases.size(), to_string(mode).c_str(), ok ? "all passed" : "FAILED");
  return ok ? 0 : 2;
}

int cmd_report(const std::string& path) {
  std::cout << render_report(read_report(path));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-guided augmentation attacks: training, attacks, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--config", g.config, "Experiment config file (INI)");
  app.add_option("--out", g.out, "Output path (weights file for train, directory otherwise)");
  app.add_option("--mode", g.mode, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  auto* train_cmd = app.add_subcommand("train", "Train a classifier and save its weights");
  std::string arch = "small", data = "synthetic:n=4000", test = "synthetic:n=500";
  std::size_t epochs = 0;
  double lr = 0;
  bool adversarial = false;
  train_cmd->add_option("--arch", arch, "Architecture id")->check(CLI::IsMember(architecture_ids()));
  train_cmd->add_option("--data", data, "Training set source");
  train_cmd->add_option("--test", test, "Held-out set source");
  train_cmd->add_option("--epochs", epochs, "Epochs (default 15)");
  train_cmd->add_option("--lr", lr, "Learning rate (default 0.03)");
  train_cmd->add_flag("--adversarial", adversarial, "FGSM adversarial training");

  auto* attack_cmd = app.add_subcommand("attack", "Attack a batch with one surrogate and report metrics");
  std::string surrogate, attack = "mim", attack_data = "synthetic:n=500";
  std::vector<std::string> targets;
  bool use_gadt = false;
  std::size_t n = 100;
  AttackConfig acfg;
  GadtConfig gcfg;
  attack_cmd->add_option("--surrogate", surrogate, "Surrogate weights")->required();
  attack_cmd->add_option("--target", targets, "Target weights (repeatable)");
  attack_cmd->add_option("--attack", attack, "mim, sim, dim, tim or admix");
  attack_cmd->add_flag("--gadt", use_gadt, "Run stage-one augmentation optimisation first");
  attack_cmd->add_option("--data", attack_data, "Image source");
  attack_cmd->add_option("-n,--images", n, "Number of images");
  attack_cmd->add_option("--epsilon", acfg.epsilon, "L-infinity budget");
  attack_cmd->add_option("--steps", acfg.steps, "Attack iterations");
  attack_cmd->add_option("--lambda", gcfg.lambda, "Fidelity weight");
  attack_cmd->add_option("--iterations", gcfg.iterations, "Stage-one iterations");

  auto* eval_cmd = app.add_subcommand("eval", "Run a full experiment from --config");
  std::size_t workers = 0;
  eval_cmd->add_option("--workers", workers, "Worker threads");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op");

  auto* report_cmd = app.add_subcommand("report", "Render a stored JSON report as a table");
  std::string report_path;
  report_cmd->add_option("report", report_path, "report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train_cmd) return cmd_train(g, arch, data, test, epochs, lr, adversarial);
    if (*attack_cmd) {
      acfg.seed = g.seed;
      if (parse_precision(g.mode) == Precision::f64) {
        return cmd_attack_impl<double>(g, surrogate, targets, attack, use_gadt, attack_data, n, acfg, gcfg);
      }
      return cmd_attack_impl<float>(g, surrogate, targets, attack, use_gadt, attack_data, n, acfg, gcfg);
    }
    if (*eval_cmd) return cmd_eval(g, seed_opt->count() > 0, workers);
    if (*gradcheck_cmd) return cmd_gradcheck(g);
    if (*report_cmd) return cmd_report(report_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
