#include "gadt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include "json.hpp"

#include "gadt/metrics.hpp"
#include "gadt/random.hpp"

namespace gadt {

using nlohmann::ordered_json;

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_real(const std::string& key, const std::string& raw) {
  const auto text = trim(raw);
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash != std::string::npos) {
      const double num = std::stod(text.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument(key);
      const auto rest = text.substr(slash + 1);
      const double den = std::stod(rest, &used);
      if (used != rest.size() || den == 0.0) throw std::invalid_argument(key);
      return num / den;
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("'" + key + "' expects a number, got '" + raw + "'");
  }
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& raw) {
  const auto text = trim(raw);
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const auto text = trim(raw);
  if (text == "true" || text == "yes" || text == "on" || text == "1") return true;
  if (text == "false" || text == "no" || text == "off" || text == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + raw + "'");
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Section = boost::property_tree::ptree;
using Handler = std::function<void(const std::string& key, const std::string& value)>;

void apply_section(const std::string& name, const Section& section, const Handler& handle) {
  for (const auto& [key, child] : section) {
    if (!child.empty()) throw ConfigError("[" + name + "]: nested key '" + key + "' not supported");
    handle(key, child.get_value<std::string>());
  }
}

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
  throw ConfigError("[" + section + "]: unknown key '" + key + "'");
}

void apply_model_key(ModelEntry& m, const std::string& section, const std::string& key, const std::string& value) {
  if (key == "name") m.name = trim(value);
  else if (key == "arch") m.arch = trim(value);
  else if (key == "seed") m.seed = parse_unsigned(key, value);
  else if (key == "adversarial") m.adversarial = parse_bool(key, value);
  else if (key == "weights") m.weights = trim(value);
  else unknown_key(section, key);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (eval_size < 1) throw ConfigError("experiment: eval_size must be at least 1");
  if (workers < 1) throw ConfigError("experiment: workers must be at least 1");
  if (targets.empty()) throw ConfigError("experiment: at least one target is required");
  if (attacks.empty()) throw ConfigError("experiment: at least one attack is required");
  const auto ids = architecture_ids();
  std::set<std::string> names;
  bool transfer = false;
  if (std::find(ids.begin(), ids.end(), surrogate.arch) == ids.end()) {
    throw ConfigError("unknown architecture '" + surrogate.arch + "'");
  }
  if (surrogate.name.empty()) throw ConfigError("surrogate name must not be empty");
  names.insert(surrogate.name);
  for (const auto& t : targets) {
    if (std::find(ids.begin(), ids.end(), t.arch) == ids.end()) throw ConfigError("unknown architecture '" + t.arch + "'");
    if (t.name.empty()) throw ConfigError("target name must not be empty");
    if (!names.insert(t.name).second) throw ConfigError("duplicate model name '" + t.name + "'");
    if (t.arch != surrogate.arch) transfer = true;
  }
  if (!transfer) throw ConfigError("experiment: at least one target must use a different architecture than the surrogate");
  train.validate();
  attack.validate();
  gadt_cfg.validate();
  if (iteration_matched) {
    AttackConfig longer = attack;
    longer.steps += gadt_cfg.iterations;
    longer.step_size.reset();
    longer.validate();
  }
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  Section tree;
  try {
    std::istringstream in(text);
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig cfg;
  bool targets_given = false;
  for (const auto& [name, section] : tree) {
    if (section.empty() && !section.data().empty()) throw ConfigError("config: key '" + name + "' outside a section");
    if (name == "experiment") {
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        if (k == "seed") cfg.seed = parse_unsigned(k, v);
        else if (k == "eval_size") cfg.eval_size = parse_unsigned(k, v);
        else if (k == "workers") cfg.workers = parse_unsigned(k, v);
        else if (k == "precision") cfg.precision = parse_precision(trim(v));
        else if (k == "csv") cfg.csv = trim(v);
        else if (k == "json") cfg.json = trim(v);
        else if (k == "model_cache") cfg.model_cache = trim(v);
        else if (k == "include_surrogate") cfg.include_surrogate = parse_bool(k, v);
        else unknown_key(name, k);
      });
    } else if (name == "data") {
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        if (k == "train") cfg.train_source = trim(v);
        else if (k == "eval") cfg.eval_source = trim(v);
        else unknown_key(name, k);
      });
    } else if (name == "surrogate") {
      apply_section(name, section,
                    [&](const std::string& k, const std::string& v) { apply_model_key(cfg.surrogate, name, k, v); });
    } else if (name.rfind("target.", 0) == 0) {
      if (!targets_given) cfg.targets.clear();
      targets_given = true;
      ModelEntry t;
      t.name = name.substr(7);
      t.arch = "";
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        if (k == "name") throw ConfigError("[" + name + "]: the target name comes from the section header");
        apply_model_key(t, name, k, v);
      });
      if (t.arch.empty()) throw ConfigError("[" + name + "]: arch is required");
      cfg.targets.push_back(t);
    } else if (name == "train") {
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        if (k == "optimizer") {
          const auto o = trim(v);
          if (o == "sgd") cfg.train.optimizer = OptimizerKind::sgd_momentum;
          else if (o == "adam") cfg.train.optimizer = OptimizerKind::adam;
          else throw ConfigError("[train]: optimizer must be sgd or adam");
        } else if (k == "learning_rate") cfg.train.learning_rate = parse_real(k, v);
        else if (k == "momentum") cfg.train.momentum = parse_real(k, v);
        else if (k == "batch_size") cfg.train.batch_size = parse_unsigned(k, v);
        else if (k == "epochs") cfg.train.epochs = parse_unsigned(k, v);
        else if (k == "cosine_schedule") cfg.train.cosine_schedule = parse_bool(k, v);
        else if (k == "warmup_epochs") cfg.train.warmup_epochs = parse_unsigned(k, v);
        else if (k == "adversarial_epsilon") cfg.train.adversarial_epsilon = parse_real(k, v);
        else if (k == "adversarial_fraction") cfg.train.adversarial_fraction = parse_real(k, v);
        else if (k == "adversarial_clean_epochs") cfg.train.adversarial_clean_epochs = parse_unsigned(k, v);
        else if (k == "adversarial_ramp_epochs") cfg.train.adversarial_ramp_epochs = parse_unsigned(k, v);
        else unknown_key(name, k);
      });
    } else if (name == "attack") {
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        auto& a = cfg.attack;
        if (k == "ids") {
          cfg.attacks.clear();
          for (const auto& id : split_list(v)) cfg.attacks.push_back(parse_attack_id(id));
        } else if (k == "epsilon") a.epsilon = parse_real(k, v);
        else if (k == "steps") a.steps = parse_unsigned(k, v);
        else if (k == "step_size") a.step_size = parse_real(k, v);
        else if (k == "momentum") a.momentum = parse_real(k, v);
        else if (k == "sim_scales") a.sim_scales = parse_unsigned(k, v);
        else if (k == "dim_probability") a.dim_probability = parse_real(k, v);
        else if (k == "dim_min_scale") a.dim_min_scale = parse_real(k, v);
        else if (k == "tim_kernel_size") a.tim_kernel_size = parse_unsigned(k, v);
        else if (k == "tim_sigma") a.tim_sigma = parse_real(k, v);
        else if (k == "admix_count") a.admix_count = parse_unsigned(k, v);
        else if (k == "admix_eta") a.admix_eta = parse_real(k, v);
        else if (k == "seed") {
          a.seed = parse_unsigned(k, v);
          cfg.attack_seed_set = true;
        } else unknown_key(name, k);
      });
    } else if (name == "gadt") {
      apply_section(name, section, [&](const std::string& k, const std::string& v) {
        auto& g = cfg.gadt_cfg;
        if (k == "enabled") cfg.gadt = parse_bool(k, v);
        else if (k == "iterations") g.iterations = parse_unsigned(k, v);
        else if (k == "lambda") g.lambda = parse_real(k, v);
        else if (k == "learning_rate") g.learning_rate = parse_real(k, v);
        else if (k == "beta1") g.beta1 = parse_real(k, v);
        else if (k == "beta2") g.beta2 = parse_real(k, v);
        else if (k == "adam_epsilon") g.adam_epsilon = parse_real(k, v);
        else if (k == "optimize_angle") g.optimize_angle = parse_bool(k, v);
        else if (k == "compound") g.compound = parse_bool(k, v);
        else if (k == "initial_blur") g.initial.blur = parse_real(k, v);
        else if (k == "initial_angle") g.initial.angle = parse_real(k, v);
        else if (k == "initial_saturation") g.initial.saturation = parse_real(k, v);
        else if (k == "fallback") {
          const auto f = trim(v);
          if (f == "contrast") g.fallback = GrayscaleFallback::contrast;
          else if (f == "disabled") g.fallback = GrayscaleFallback::disabled;
          else throw ConfigError("[gadt]: fallback must be contrast or disabled");
        } else if (k == "verify_every") g.verify_every = parse_unsigned(k, v);
        else if (k == "fixed_da") cfg.fixed_da = parse_bool(k, v);
        else if (k == "ablation_ids") {
          cfg.ablation_attacks.clear();
          for (const auto& id : split_list(v)) cfg.ablation_attacks.push_back(parse_attack_id(id));
        }
        else if (k == "iteration_matched") cfg.iteration_matched = parse_bool(k, v);
        else unknown_key(name, k);
      });
    } else {
      throw ConfigError("config: unknown section [" + name + "]");
    }
  }
  if (!cfg.attack_seed_set) cfg.attack.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string format_experiment_config(const ExperimentConfig& cfg) {
  std::ostringstream o;
  const auto num = [](double v) { return format_number(v); };
  const auto flag = [](bool b) { return b ? "true" : "false"; };
  o << "[experiment]\nseed = " << cfg.seed << "\neval_size = " << cfg.eval_size << "\nworkers = " << cfg.workers
    << "\nprecision = " << to_string(cfg.precision) << "\ninclude_surrogate = " << flag(cfg.include_surrogate) << "\n";
  if (!cfg.csv.empty()) o << "csv = " << cfg.csv.string() << "\n";
  if (!cfg.json.empty()) o << "json = " << cfg.json.string() << "\n";
  if (!cfg.model_cache.empty()) o << "model_cache = " << cfg.model_cache.string() << "\n";
  o << "\n[data]\ntrain = " << cfg.train_source << "\neval = " << cfg.eval_source << "\n";
  const auto model = [&](const ModelEntry& m, bool with_name) {
    if (with_name) o << "name = " << m.name << "\n";
    o << "arch = " << m.arch << "\n";
    if (m.seed) o << "seed = " << *m.seed << "\n";
    o << "adversarial = " << flag(m.adversarial) << "\n";
    if (!m.weights.empty()) o << "weights = " << m.weights.string() << "\n";
  };
  o << "\n[surrogate]\n";
  model(cfg.surrogate, true);
  for (const auto& t : cfg.targets) {
    o << "\n[target." << t.name << "]\n";
    model(t, false);
  }
  const auto& tr = cfg.train;
  o << "\n[train]\noptimizer = " << (tr.optimizer == OptimizerKind::adam ? "adam" : "sgd")
    << "\nlearning_rate = " << num(tr.learning_rate) << "\nmomentum = " << num(tr.momentum)
    << "\nbatch_size = " << tr.batch_size << "\nepochs = " << tr.epochs
    << "\ncosine_schedule = " << flag(tr.cosine_schedule) << "\nwarmup_epochs = " << tr.warmup_epochs
    << "\nadversarial_epsilon = " << num(tr.adversarial_epsilon)
    << "\nadversarial_fraction = " << num(tr.adversarial_fraction)
    << "\nadversarial_clean_epochs = " << tr.adversarial_clean_epochs
    << "\nadversarial_ramp_epochs = " << tr.adversarial_ramp_epochs << "\n";
  const auto& a = cfg.attack;
  o << "\n[attack]\nids = ";
  for (std::size_t i = 0; i < cfg.attacks.size(); ++i) o << (i ? "," : "") << to_string(cfg.attacks[i]);
  o << "\nepsilon = " << num(a.epsilon) << "\nsteps = " << a.steps;
  if (a.step_size) o << "\nstep_size = " << num(*a.step_size);
  o << "\nmomentum = " << num(a.momentum) << "\nsim_scales = " << a.sim_scales
    << "\ndim_probability = " << num(a.dim_probability) << "\ndim_min_scale = " << num(a.dim_min_scale)
    << "\ntim_kernel_size = " << a.tim_kernel_size << "\ntim_sigma = " << num(a.tim_sigma)
    << "\nadmix_count = " << a.admix_count << "\nadmix_eta = " << num(a.admix_eta) << "\nseed = " << a.seed << "\n";
  const auto& g = cfg.gadt_cfg;
  o << "\n[gadt]\nenabled = " << flag(cfg.gadt) << "\niterations = " << g.iterations << "\nlambda = " << num(g.lambda)
    << "\nlearning_rate = " << num(g.learning_rate) << "\nbeta1 = " << num(g.beta1) << "\nbeta2 = " << num(g.beta2)
    << "\nadam_epsilon = " << num(g.adam_epsilon) << "\noptimize_angle = " << flag(g.optimize_angle)
    << "\ncompound = " << flag(g.compound) << "\ninitial_blur = " << num(g.initial.blur)
    << "\ninitial_angle = " << num(g.initial.angle) << "\ninitial_saturation = " << num(g.initial.saturation)
    << "\nfallback = " << (g.fallback == GrayscaleFallback::contrast ? "contrast" : "disabled")
    << "\nverify_every = " << g.verify_every << "\nfixed_da = " << flag(cfg.fixed_da)
    << "\niteration_matched = " << flag(cfg.iteration_matched);
  if (!cfg.ablation_attacks.empty()) {
    o << "\nablation_ids = ";
    for (std::size_t i = 0; i < cfg.ablation_attacks.size(); ++i) o << (i ? "," : "") << to_string(cfg.ablation_attacks[i]);
  }
  o << "\n";
  return o.str();
}

// ---------------------------------------------------------------- models

std::string resolve_source(const std::string& source, std::uint64_t seed, const std::string& tag) {
  if (source.rfind("synthetic:", 0) != 0 && source != "synthetic") return source;
  std::string s = source == "synthetic" ? "synthetic:" : source;
  if (s.find("seed=") != std::string::npos) return s;
  if (s.back() != ':') s += ",";
  return s + "seed=" + std::to_string(mix_seed(seed, hash_name(tag)));
}

namespace {

std::uint64_t model_seed(const ModelEntry& entry, std::uint64_t experiment_seed) {
  return entry.seed ? *entry.seed : mix_seed(experiment_seed, hash_name(entry.name));
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

}  // namespace

Model<float> obtain_model(const ModelEntry& entry, const ExperimentConfig& cfg, const Dataset& train_set,
                          const Dataset* test_set) {
  const auto spec = architecture(entry.arch, train_set.channels, train_set.height, train_set.width, train_set.classes);
  if (!entry.weights.empty()) {
    auto m = load_model(entry.weights);
    if (m.spec.arch != spec.arch || m.spec.channels != spec.channels || m.spec.height != spec.height ||
        m.spec.width != spec.width || m.spec.classes != spec.classes) {
      throw SpecError("weights " + entry.weights.string() + " do not match model '" + entry.name + "' (" + entry.arch +
                      ")");
    }
    return m;
  }
  TrainConfig tc = cfg.train;
  tc.seed = model_seed(entry, cfg.seed);
  tc.adversarial_training = entry.adversarial;

  std::filesystem::path cached;
  if (!cfg.model_cache.empty()) {
    std::ostringstream key;
    key << entry.arch << '|' << tc.seed << '|' << tc.adversarial_training << '|' << format_number(tc.learning_rate)
        << '|' << format_number(tc.momentum) << '|' << tc.batch_size << '|' << tc.epochs << '|' << tc.cosine_schedule
        << '|' << tc.warmup_epochs << '|' << static_cast<int>(tc.optimizer) << '|'
        << format_number(tc.adversarial_epsilon) << '|' << format_number(tc.adversarial_fraction) << '|'
        << tc.adversarial_clean_epochs << '|' << tc.adversarial_ramp_epochs << '|' << train_set.source << '|' << train_set.size() << '|'
        << spec.channels << 'x' << spec.height << 'x' << spec.width << 'x' << spec.classes;
    cached = cfg.model_cache / (entry.name + "-" + hex(hash_name(key.str())) + ".dadv");
    if (std::filesystem::exists(cached)) return load_model(cached);
  }
  auto model = train(build_model<float>(spec, tc.seed), train_set, tc, test_set);
  if (!cached.empty()) {
    std::filesystem::create_directories(cfg.model_cache);
    const auto tmp = cached.string() + ".tmp";
    save_model(model, tmp);
    std::filesystem::rename(tmp, cached);
  }
  return model;
}

// ---------------------------------------------------------------- running

namespace {

constexpr std::size_t kChunk = 50;

struct Variant {
  std::string attack;
  std::string name;
};

template <typename T>
struct ChunkOutput {
  // One adversarial batch per variant, in variant order.
  std::vector<std::vector<T>> adversarial;
  std::vector<AugParams> theta;
  std::vector<double> stage_mse;
  std::vector<bool> ce_rose;
  std::vector<double> gradient_errors;
};

template <typename T>
Model<T> at_precision(const Model<float>& m) {
  if constexpr (std::is_same_v<T, float>) {
    return m;
  } else {
    return cast_model<T>(m);
  }
}

void run_jobs(std::size_t jobs, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      try {
        job(j);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(workers, jobs);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<Variant> variants_of(const ExperimentConfig& cfg) {
  std::vector<Variant> out;
  for (auto id : cfg.attacks) {
    const auto a = to_string(id);
    out.push_back({a, "baseline"});
    if (cfg.gadt) out.push_back({a, "gadt"});
    const bool ablate = cfg.ablation_attacks.empty() ||
                        std::find(cfg.ablation_attacks.begin(), cfg.ablation_attacks.end(), id) != cfg.ablation_attacks.end();
    if (cfg.fixed_da && ablate) out.push_back({a, "fixed-da"});
    if (cfg.iteration_matched && ablate) out.push_back({a, "iter-matched"});
  }
  return out;
}

template <typename T>
void run_cells(const ExperimentConfig& cfg, const Dataset& eval, const Model<float>& surrogate32,
               const std::vector<std::pair<ModelEntry, const Model<float>*>>& targets32, ExperimentReport& report) {
  const auto surrogate = at_precision<T>(surrogate32);
  const auto variants = variants_of(cfg);
  const std::size_t N = eval.size(), n = eval.image_size();
  const std::size_t chunks = (N + kChunk - 1) / kChunk;
  std::vector<ChunkOutput<T>> outputs(chunks);

  AttackConfig longer = cfg.attack;
  longer.steps += cfg.gadt_cfg.iterations;
  longer.step_size.reset();

  run_jobs(chunks, cfg.workers, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(N, begin + kChunk);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const auto x = eval.batch<T>(idx);
    const auto y = eval.labels_at(idx);
    AttackOptions opts;
    opts.stream_ids.assign(idx.begin(), idx.end());
    opts.pool.images = &eval;

    auto& out = outputs[c];
    std::vector<StageOneResult<T>> stage, fixed_stage;
    if (cfg.gadt || cfg.fixed_da) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto xi = eval.single<T>(idx[i]);
        if (cfg.gadt) {
          auto s = optimize_da_params(xi, y[i], surrogate, cfg.gadt_cfg, idx[i]);
          const ClassIndex yi[1] = {y[i]};
          const double final_ce = static_cast<double>(cross_entropy_rows(surrogate.forward(s.x_trans), yi)[0]);
          out.theta.push_back(s.theta);
          out.stage_mse.push_back(image_mse(s.x_trans.data(), xi.data()));
          out.ce_rose.push_back(final_ce >= s.trace.front().ce);
          if (s.gradient_check) out.gradient_errors.push_back(*s.gradient_check);
          stage.push_back(std::move(s));
        }
        if (cfg.fixed_da) {
          StageOneResult<T> s;
          s.theta = cfg.gadt_cfg.initial;
          s.x_trans = transform(xi, cfg.gadt_cfg.initial, cfg.gadt_cfg.blur, cfg.gadt_cfg.fallback);
          fixed_stage.push_back(std::move(s));
        }
      }
    }
    for (const auto& v : variants) {
      const auto id = parse_attack_id(v.attack);
      Tensor<T> adv;
      if (v.name == "baseline") adv = run_attack(id, x, y, surrogate, cfg.attack, opts).adversarial;
      else if (v.name == "gadt") adv = attack_from_transformed(x, stage, y, surrogate, id, cfg.attack, opts).attack.adversarial;
      else if (v.name == "fixed-da")
        adv = attack_from_transformed(x, fixed_stage, y, surrogate, id, cfg.attack, opts).attack.adversarial;
      else adv = run_attack(id, x, y, surrogate, longer, opts).adversarial;
      auto d = adv.data();
      out.adversarial.emplace_back(d.begin(), d.end());
    }
  });

  // Assemble in eval order.
  std::vector<std::vector<T>> adversarial(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    adversarial[v].reserve(N * n);
    for (const auto& out : outputs) adversarial[v].insert(adversarial[v].end(), out.adversarial[v].begin(), out.adversarial[v].end());
  }
  std::vector<T> clean(eval.images.begin(), eval.images.end());

  struct Fidelity {
    double mse = 0, psnr = 0, ssim = 0, linf = 0;
  };
  std::vector<Fidelity> fidelity(variants.size());
  const auto shape = eval.image_shape();
  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto& f = fidelity[v];
    for (std::size_t i = 0; i < N; ++i) {
      const std::span<const T> a(adversarial[v].data() + i * n, n), b(clean.data() + i * n, n);
      f.mse += image_mse(a, b);
      f.psnr += psnr(a, b);
      f.ssim += ssim(a, b, shape);
      f.linf = std::max(f.linf, linf_distance(a, b));
    }
    f.mse /= static_cast<double>(N);
    f.psnr /= static_cast<double>(N);
    f.ssim /= static_cast<double>(N);
  }

  const Shape batch_shape{N, eval.channels, eval.height, eval.width};
  for (const auto& [entry, model32] : targets32) {
    const auto target = at_precision<T>(*model32);
    const auto clean_pred = predict(target, Tensor<T>::from(batch_shape, clean));
    const auto mask = correct_mask(clean_pred, eval.labels);
    const auto mask_size = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
    for (auto& m : report.models) {
      if (m.name == entry.name) {
        m.clean_accuracy = static_cast<double>(mask_size) / static_cast<double>(N);
        m.mask_size = mask_size;
      }
    }
    for (std::size_t v = 0; v < variants.size(); ++v) {
      const auto pred = predict(target, Tensor<T>::from(batch_shape, adversarial[v]));
      ReportCell cell;
      cell.surrogate = cfg.surrogate.name;
      cell.target = entry.name;
      cell.attack = variants[v].attack;
      cell.variant = variants[v].name;
      cell.success_rate = success_rate(pred, eval.labels, mask);
      cell.mse = fidelity[v].mse;
      cell.psnr = fidelity[v].psnr;
      cell.ssim = fidelity[v].ssim;
      cell.linf_clean = fidelity[v].linf;
      cell.n = N;
      cell.seed = cfg.seed;
      report.cells.push_back(cell);
    }
  }

  if (cfg.gadt) {
    StageOneSummary s;
    std::size_t count = 0, rose = 0;
    for (const auto& out : outputs) {
      for (std::size_t i = 0; i < out.theta.size(); ++i) {
        s.mean_mse += out.stage_mse[i];
        s.mean_blur += out.theta[i].blur;
        s.mean_angle += out.theta[i].angle;
        s.mean_saturation += out.theta[i].saturation;
        rose += out.ce_rose[i] ? 1 : 0;
        ++count;
      }
      for (double e : out.gradient_errors) {
        s.max_gradient_error = std::max(s.max_gradient_error, e);
        ++s.gradient_checks;
      }
    }
    const auto d = static_cast<double>(count);
    s.mean_mse /= d;
    s.mean_blur /= d;
    s.mean_angle /= d;
    s.mean_saturation /= d;
    s.ce_rise_fraction = static_cast<double>(rose) / d;
    report.stage_one = s;
  }
}

}  // namespace

const ReportCell* ExperimentReport::find(const std::string& target, const std::string& attack,
                                         const std::string& variant) const {
  for (const auto& c : cells) {
    if (c.target == target && c.attack == attack && c.variant == variant) return &c;
  }
  return nullptr;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  report.seed = cfg.seed;
  report.eval_size = cfg.eval_size;
  report.precision = to_string(cfg.precision);
  try {
    cfg.validate();
    report.config_text = format_experiment_config(cfg);
    const auto train_set = load_dataset(resolve_source(cfg.train_source, cfg.seed, "train"));
    auto eval_full = load_dataset(resolve_source(cfg.eval_source, cfg.seed, "eval"));
    if (eval_full.size() < cfg.eval_size) {
      throw ConfigError("eval source has " + std::to_string(eval_full.size()) + " images, eval_size is " +
                        std::to_string(cfg.eval_size));
    }
    auto eval = eval_full.head(cfg.eval_size);
    eval.split = "test";
    if (eval.channels != train_set.channels || eval.height != train_set.height || eval.width != train_set.width) {
      throw ConfigError("train and eval images differ in shape");
    }
    if (eval.classes > train_set.classes) throw ConfigError("eval set has labels unseen in training");
    eval.classes = train_set.classes;

    const auto surrogate = obtain_model(cfg.surrogate, cfg, train_set, &eval);
    std::vector<Model<float>> target_models;
    target_models.reserve(cfg.targets.size());
    for (const auto& t : cfg.targets) target_models.push_back(obtain_model(t, cfg, train_set, &eval));

    std::vector<std::pair<ModelEntry, const Model<float>*>> targets;
    for (std::size_t i = 0; i < cfg.targets.size(); ++i) targets.emplace_back(cfg.targets[i], &target_models[i]);
    if (cfg.include_surrogate) targets.emplace_back(cfg.surrogate, &surrogate);
    std::vector<std::uint32_t> crc_before;
    for (const auto& [entry, m] : targets) {
      ModelSummary s;
      s.name = entry.name;
      s.arch = entry.arch;
      s.seed = entry.weights.empty() ? model_seed(entry, cfg.seed) : m->record.seed;
      s.adversarial = entry.adversarial;
      s.weight_crc = m->weight_crc();
      crc_before.push_back(s.weight_crc);
      report.models.push_back(s);
    }

    if (cfg.precision == Precision::f32) run_cells<float>(cfg, eval, surrogate, targets, report);
    else run_cells<double>(cfg, eval, surrogate, targets, report);

    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i].second->weight_crc() != crc_before[i]) {
        throw ContractError("model '" + targets[i].first.name + "' changed during evaluation");
      }
    }
  } catch (const std::exception& e) {
    report.complete = false;
    report.error = e.what();
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
      write_report(report, cfg.csv, cfg.json);
    } catch (...) {
    }
    throw;
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_report(report, cfg.csv, cfg.json);
  return report;
}

// ---------------------------------------------------------------- report files

namespace {

ordered_json number_json(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

double json_number(const ordered_json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw FormatError("report: bad number '" + s + "'");
  }
  return j.get<double>();
}

}  // namespace

std::string report_csv(const ExperimentReport& report) {
  std::ostringstream o;
  o << "surrogate,target,attack,variant,success_rate,mse,psnr,ssim,linf_clean,n,seed\n";
  for (const auto& c : report.cells) {
    o << c.surrogate << ',' << c.target << ',' << c.attack << ',' << c.variant << ',' << format_number(c.success_rate)
      << ',' << format_number(c.mse) << ',' << format_number(c.psnr) << ',' << format_number(c.ssim) << ','
      << format_number(c.linf_clean) << ',' << c.n << ',' << c.seed << '\n';
  }
  return o.str();
}

std::string report_json(const ExperimentReport& report) {
  ordered_json j;
  j["complete"] = report.complete;
  if (!report.complete) j["error"] = report.error;
  j["seed"] = report.seed;
  j["eval_size"] = report.eval_size;
  j["precision"] = report.precision;
  j["success_rate_convention"] =
      "percentage of images the target classifies correctly when clean that it misclassifies after the attack";
  j["fidelity_reference"] = "clean image";
  j["models"] = ordered_json::array();
  for (const auto& m : report.models) {
    ordered_json e;
    e["name"] = m.name;
    e["arch"] = m.arch;
    e["seed"] = m.seed;
    e["adversarial"] = m.adversarial;
    e["clean_accuracy"] = number_json(m.clean_accuracy);
    e["mask_size"] = m.mask_size;
    e["weight_crc"] = m.weight_crc;
    j["models"].push_back(e);
  }
  j["cells"] = ordered_json::array();
  for (const auto& c : report.cells) {
    ordered_json e;
    e["surrogate"] = c.surrogate;
    e["target"] = c.target;
    e["attack"] = c.attack;
    e["variant"] = c.variant;
    e["success_rate"] = number_json(c.success_rate);
    e["mse"] = number_json(c.mse);
    e["psnr"] = number_json(c.psnr);
    e["ssim"] = number_json(c.ssim);
    e["linf_clean"] = number_json(c.linf_clean);
    e["n"] = c.n;
    e["seed"] = c.seed;
    j["cells"].push_back(e);
  }
  if (report.stage_one) {
    const auto& s = *report.stage_one;
    ordered_json e;
    e["mean_mse"] = number_json(s.mean_mse);
    e["mean_blur"] = number_json(s.mean_blur);
    e["mean_angle"] = number_json(s.mean_angle);
    e["mean_saturation"] = number_json(s.mean_saturation);
    e["ce_rise_fraction"] = number_json(s.ce_rise_fraction);
    e["gradient_checks"] = s.gradient_checks;
    e["max_gradient_error"] = number_json(s.max_gradient_error);
    j["stage_one"] = e;
  }
  j["config"] = report.config_text;
  return j.dump(2) + "\n";
}

ExperimentReport parse_report_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  ExperimentReport r;
  try {
    r.complete = j.at("complete").get<bool>();
    if (j.contains("error")) r.error = j["error"].get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.eval_size = j.at("eval_size").get<std::size_t>();
    r.precision = j.at("precision").get<std::string>();
    r.config_text = j.value("config", std::string{});
    for (const auto& e : j.at("models")) {
      ModelSummary m;
      m.name = e.at("name").get<std::string>();
      m.arch = e.at("arch").get<std::string>();
      m.seed = e.at("seed").get<std::uint64_t>();
      m.adversarial = e.at("adversarial").get<bool>();
      m.clean_accuracy = json_number(e.at("clean_accuracy"));
      m.mask_size = e.at("mask_size").get<std::size_t>();
      m.weight_crc = e.at("weight_crc").get<std::uint32_t>();
      r.models.push_back(m);
    }
    for (const auto& e : j.at("cells")) {
      ReportCell c;
      c.surrogate = e.at("surrogate").get<std::string>();
      c.target = e.at("target").get<std::string>();
      c.attack = e.at("attack").get<std::string>();
      c.variant = e.at("variant").get<std::string>();
      c.success_rate = json_number(e.at("success_rate"));
      c.mse = json_number(e.at("mse"));
      c.psnr = json_number(e.at("psnr"));
      c.ssim = json_number(e.at("ssim"));
      c.linf_clean = json_number(e.at("linf_clean"));
      c.n = e.at("n").get<std::size_t>();
      c.seed = e.at("seed").get<std::uint64_t>();
      r.cells.push_back(c);
    }
    if (j.contains("stage_one")) {
      const auto& e = j["stage_one"];
      StageOneSummary s;
      s.mean_mse = json_number(e.at("mean_mse"));
      s.mean_blur = json_number(e.at("mean_blur"));
      s.mean_angle = json_number(e.at("mean_angle"));
      s.mean_saturation = json_number(e.at("mean_saturation"));
      s.ce_rise_fraction = json_number(e.at("ce_rise_fraction"));
      s.gradient_checks = e.at("gradient_checks").get<std::size_t>();
      s.max_gradient_error = json_number(e.at("max_gradient_error"));
      r.stage_one = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

ExperimentReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report_json(ss.str());
}

void write_report(const ExperimentReport& report, const std::filesystem::path& csv, const std::filesystem::path& json) {
  const auto write = [](const std::filesystem::path& p, const std::string& text) {
    if (p.empty()) return;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
  };
  write(csv, report_csv(report));
  write(json, report_json(report));
}

std::string render_report(const ExperimentReport& report) {
  std::ostringstream o;
  o << "seed " << report.seed << ", " << report.eval_size << " eval images, " << report.precision
    << (report.complete ? "" : ", INCOMPLETE: " + report.error) << "\n";
  for (const auto& m : report.models) {
    o << "  " << std::left << std::setw(12) << m.name << std::setw(8) << m.arch
      << (m.adversarial ? "adv-trained " : "standard    ") << "clean acc " << std::fixed << std::setprecision(1)
      << 100.0 * m.clean_accuracy << "%  mask " << m.mask_size << "\n";
  }
  o << "\n"
    << std::left << std::setw(12) << "target" << std::setw(8) << "attack" << std::setw(14) << "variant" << std::right
    << std::setw(9) << "success" << std::setw(10) << "mse" << std::setw(8) << "psnr" << std::setw(8) << "ssim"
    << std::setw(8) << "linf" << std::setw(6) << "n" << "\n";
  for (const auto& c : report.cells) {
    o << std::left << std::setw(12) << c.target << std::setw(8) << c.attack << std::setw(14) << c.variant << std::right
      << std::fixed << std::setprecision(1) << std::setw(8) << c.success_rate << "%" << std::setprecision(5)
      << std::setw(10) << c.mse << std::setprecision(2) << std::setw(8) << c.psnr << std::setprecision(3)
      << std::setw(8) << c.ssim << std::setw(8) << c.linf_clean << std::setw(6) << c.n << "\n";
  }
  if (report.stage_one) {
    const auto& s = *report.stage_one;
    o << "\nstage one: mean mse " << std::setprecision(5) << s.mean_mse << ", theta (" << std::setprecision(3)
      << s.mean_blur << ", " << s.mean_angle << ", " << s.mean_saturation << "), CE rose for "
      << std::setprecision(1) << 100.0 * s.ce_rise_fraction << "%";
    if (s.gradient_checks) o << ", " << s.gradient_checks << " gradient checks, max error " << std::scientific
                             << std::setprecision(2) << s.max_gradient_error;
    o << "\n";
  }
  return o.str();
}

}  // namespace gadt
