#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "gadt/experiment.hpp"
#include "gadt/gradcheck_suite.hpp"
#include "gadt/metrics.hpp"

using namespace gadt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  int id = 0;
  bool pass = false;
  std::string summary;
  double seconds = 0.0;
  double limit = 0.0;
};

std::vector<Verdict> verdicts;
nlohmann::ordered_json details = nlohmann::ordered_json::object();

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void record(int id, bool pass, const std::string& summary, double seconds, double limit = 0.0) {
  if (limit > 0.0 && seconds > limit) pass = false;
  verdicts.push_back({id, pass, summary, seconds, limit});
  std::printf("criterion %d: %s - %s (%.1f s%s)\n", id, pass ? "PASS" : "FAIL", summary.c_str(), seconds,
              limit > 0.0 ? (", limit " + fmt("%.0f", limit) + " s").c_str() : "");
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Context {
  fs::path out;
  fs::path cache;
  std::string cli;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

ExperimentConfig base_config(const Context& ctx, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.attack.seed = seed;
  cfg.model_cache = ctx.cache;
  cfg.fixed_da = true;
  cfg.iteration_matched = true;
  cfg.ablation_attacks = {AttackId::mim};
  cfg.gadt_cfg.verify_every = 100;
  cfg.csv = ctx.out / ("seed" + std::to_string(seed)) / "report.csv";
  cfg.json = ctx.out / ("seed" + std::to_string(seed)) / "report.json";
  return cfg;
}

struct SeedModels {
  Dataset train;
  Dataset eval;
  Model<float> surrogate;
};

SeedModels seed_models(const Context& ctx, std::uint64_t seed) {
  const auto cfg = base_config(ctx, seed);
  SeedModels s;
  s.train = load_dataset(resolve_source(cfg.train_source, seed, "train"));
  s.eval = load_dataset(resolve_source(cfg.eval_source, seed, "eval")).head(cfg.eval_size);
  s.eval.classes = s.train.classes;
  s.surrogate = obtain_model(cfg.surrogate, cfg, s.train, &s.eval);
  return s;
}

std::vector<std::size_t> range(std::size_t first, std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), first);
  return v;
}

bool identical(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void criterion1() {
  const auto t0 = Clock::now();
  const auto cases = gradcheck_suite(Precision::f64, 0);
  bool ok = !cases.empty();
  double worst_smooth = 0, worst_composed = 0;
  auto& d = details["1"] = nlohmann::ordered_json::array();
  for (const auto& c : cases) {
    ok = ok && c.passed;
    (c.kind == "composed" ? worst_composed : worst_smooth) = std::max(c.kind == "composed" ? worst_composed : worst_smooth, c.max_error);
    d.push_back({{"name", c.name}, {"kind", c.kind}, {"max_error", c.max_error}, {"tolerance", c.tolerance}});
  }
  record(1, ok,
         std::to_string(cases.size()) + " checks, worst single-op error " + fmt("%.2e", worst_smooth) +
             ", worst pipeline error " + fmt("%.2e", worst_composed),
         since(t0), 120);
}

void criterion2(const SeedModels& s) {
  const auto t0 = Clock::now();
  AttackConfig acfg;
  acfg.seed = 1;
  GadtConfig gcfg;
  AttackOptions opts;
  opts.pool.images = &s.eval;
  const std::size_t per = 60;
  std::size_t images = 0, violations = 0;
  double worst = 0;
  const std::size_t n = s.eval.image_size();
  std::size_t first = 0;
  for (auto id : all_attack_ids()) {
    for (bool gadt : {false, true}) {
      const auto idx = range(first, per);
      first = (first + per) % (s.eval.size() - per);
      opts.stream_ids.assign(idx.begin(), idx.end());
      const auto x = s.eval.batch<float>(idx);
      const auto y = s.eval.labels_at(idx);
      Tensor<float> start = x, adv;
      if (gadt) {
        auto r = gadt_attack(x, y, s.surrogate, id, acfg, gcfg, opts);
        std::vector<float> st;
        for (const auto& so : r.stage_one) st.insert(st.end(), so.x_trans.data().begin(), so.x_trans.data().end());
        start = Tensor<float>::from(x.shape(), st);
        adv = r.attack.adversarial;
      } else {
        adv = run_attack(id, x, y, s.surrogate, acfg, opts).adversarial;
      }
      for (std::size_t i = 0; i < per; ++i) {
        const auto a = adv.data().subspan(i * n, n), b = start.data().subspan(i * n, n);
        const double d = linf_distance(a, b);
        worst = std::max(worst, d);
        bool ok = d <= acfg.epsilon + 1e-6;
        for (float v : a) ok = ok && v >= 0.0f && v <= 1.0f;
        violations += ok ? 0 : 1;
        ++images;
      }
    }
  }
  details["2"] = {{"images", images}, {"violations", violations}, {"max_linf_to_start", worst}};
  record(2, images >= 500 && violations == 0,
         std::to_string(images) + " attacked images over 5 attacks with and without GADT, " +
             std::to_string(violations) + " violations, max distance to start " + fmt("%.6f", worst) + " (eps " +
             fmt("%.6f", acfg.epsilon) + ")",
         since(t0), 600);
}

void criterion3(const SeedModels& s) {
  const auto t0 = Clock::now();
  const auto idx = range(0, 100);
  const auto x = s.eval.batch<float>(idx);
  const auto y = s.eval.labels_at(idx);
  AttackOptions opts;
  opts.pool.images = &s.eval;
  opts.stream_ids.assign(idx.begin(), idx.end());

  AttackConfig one;
  one.steps = 1;
  one.momentum = 0;
  const bool fgsm_eq = identical(run_attack(AttackId::mim, x, y, s.surrogate, one, opts).adversarial,
                                 fgsm(x, y, s.surrogate, one.alpha()));

  AttackConfig acfg;
  acfg.seed = 5;
  const auto mim = run_attack(AttackId::mim, x, y, s.surrogate, acfg, opts).adversarial;
  auto sim1 = acfg;
  sim1.sim_scales = 1;
  const bool sim_eq = identical(run_attack(AttackId::sim, x, y, s.surrogate, sim1, opts).adversarial, mim);

  GadtConfig off;
  off.iterations = 1;
  off.learning_rate = 0;
  off.initial = AugParams::identity();
  const auto small = range(100, 20);
  const auto xs = s.eval.batch<float>(small);
  const auto ys = s.eval.labels_at(small);
  AttackOptions so = opts;
  so.stream_ids.assign(small.begin(), small.end());
  bool gadt_eq = true;
  for (auto id : all_attack_ids()) {
    gadt_eq = gadt_eq && identical(gadt_attack(xs, ys, s.surrogate, id, acfg, off, so).attack.adversarial,
                                   run_attack(id, xs, ys, s.surrogate, acfg, so).adversarial);
  }

  double worst = 0;
  const auto all = s.eval.batch<float>(range(0, s.eval.size()));
  const auto tx = transform(all, AugParams::identity());
  worst = linf_distance(tx.data(), all.data());
  const bool ident = worst <= 1e-4;

  details["3"] = {{"mim_t1_mu0_equals_fgsm", fgsm_eq},
                  {"sim_m1_equals_mim", sim_eq},
                  {"gadt_disabled_equals_attack", gadt_eq},
                  {"identity_transform_max_diff", worst}};
  record(3, fgsm_eq && sim_eq && gadt_eq && ident,
         std::string("MIM(T=1,mu=0)==FGSM ") + (fgsm_eq ? "yes" : "no") + ", SIM(m=1)==MIM " + (sim_eq ? "yes" : "no") +
             ", GADT(K=1,lr=0,identity)-X==X for all 5 " + (gadt_eq ? "yes" : "no") +
             ", identity transform max diff " + fmt("%.1e", worst),
         since(t0));
}

void criterion4(const Context& ctx, Clock::time_point t0, const SeedModels& s) {
  const auto idx = range(0, s.eval.size());
  const auto x = s.eval.batch<float>(idx);
  const auto y = s.eval.labels_at(idx);
  const auto mask = correct_mask(predict(s.surrogate, x), y);
  const double acc = static_cast<double>(std::count(mask.begin(), mask.end(), true)) / static_cast<double>(idx.size());
  AttackConfig acfg;
  acfg.seed = ctx.seeds.front();
  AttackOptions opts;
  opts.stream_ids.assign(idx.begin(), idx.end());
  const auto adv = run_attack(AttackId::mim, x, y, s.surrogate, acfg, opts).adversarial;
  const double rate = attack_success_rate(s.surrogate, adv, y, mask);
  details["4"] = {{"surrogate_clean_accuracy", acc}, {"white_box_mim_success", rate}};
  record(4, acc >= 0.85 && rate >= 95.0,
         "surrogate clean accuracy " + fmt("%.1f%%", 100 * acc) + ", white-box MIM success " + fmt("%.1f%%", rate) +
             " (seed " + std::to_string(ctx.seeds.front()) + ", training included)",
         since(t0), 300);
}

struct Averages {
  std::map<std::string, double> cell;
  double get(const std::string& target, const std::string& attack, const std::string& variant) const {
    const auto it = cell.find(target + "/" + attack + "/" + variant);
    if (it == cell.end()) throw Error("missing cell " + target + "/" + attack + "/" + variant);
    return it->second;
  }
};

void criteria_transfer(const Context& ctx) {
  const auto t0 = Clock::now();
  Averages avg;
  auto& runs = details["runs"] = nlohmann::ordered_json::array();
  for (auto seed : ctx.seeds) {
    const auto ts = Clock::now();
    const auto report = run_experiment(base_config(ctx, seed));
    std::printf("  seed %llu: %.0f s\n", static_cast<unsigned long long>(seed), since(ts));
    std::fflush(stdout);
    nlohmann::ordered_json r;
    r["seed"] = seed;
    r["seconds"] = since(ts);
    for (const auto& m : report.models) r["clean_accuracy"][m.name] = m.clean_accuracy;
    for (const auto& c : report.cells) {
      avg.cell[c.target + "/" + c.attack + "/" + c.variant] += c.success_rate / static_cast<double>(ctx.seeds.size());
      r["success"][c.target + "/" + c.attack + "/" + c.variant] = c.success_rate;
    }
    if (report.stage_one) r["stage_one_mean_mse"] = report.stage_one->mean_mse;
    runs.push_back(r);
  }
  const double elapsed = since(t0);
  for (const auto& [k, v] : avg.cell) details["average_success"][k] = v;

  const std::string standard = "wide", robust = "wide_at";
  const double mim = avg.get(standard, "mim", "baseline"), gmim = avg.get(standard, "mim", "gadt");
  record(5, gmim >= mim + 3.0,
         "transfer to " + standard + ": GADT-MIM " + fmt("%.1f%%", gmim) + " vs MIM " + fmt("%.1f%%", mim) + " (" +
             fmt("%+.1f", gmim - mim) + " points, 3-seed mean)",
         elapsed, 1800);

  const double fixed = avg.get(standard, "mim", "fixed-da");
  record(6, gmim >= fixed,
         "transfer to " + standard + ": GADT-MIM " + fmt("%.1f%%", gmim) + " vs MIM-k " + fmt("%.1f%%", fixed) +
             " (3-seed mean)",
         elapsed);

  const double longer = avg.get(standard, "mim", "iter-matched");
  record(7, gmim >= longer,
         "transfer to " + standard + ": GADT-MIM (T=10, K=20) " + fmt("%.1f%%", gmim) + " vs MIM (T=30) " +
             fmt("%.1f%%", longer) + " (3-seed mean)",
         elapsed);

  bool lower = true, gadt_helps = true;
  std::string worst;
  double min_gap = 1e9;
  for (auto id : all_attack_ids()) {
    const auto a = to_string(id);
    for (const std::string v : {"baseline", "gadt"}) {
      const double gap = avg.get(standard, a, v) - avg.get(robust, a, v);
      lower = lower && gap > 0;
      min_gap = std::min(min_gap, gap);
    }
    if (avg.get(robust, a, "gadt") < avg.get(robust, a, "baseline")) {
      gadt_helps = false;
      worst += " " + a;
    }
  }
  std::string s = "adversarially trained target below standard for every attack and variant: ";
  s += lower ? "yes" : "no";
  s += " (smallest gap " + fmt("%.1f", min_gap) + " points); GADT-X >= X against it: ";
  s += gadt_helps ? "all 5" : "fails for" + worst;
  for (auto id : all_attack_ids()) {
    const auto a = to_string(id);
    s += "; " + a + " " + fmt("%.1f", avg.get(robust, a, "baseline")) + "->" + fmt("%.1f", avg.get(robust, a, "gadt"));
  }
  record(9, lower && gadt_helps, s, elapsed);
}

void criterion8(const SeedModels& s) {
  const auto t0 = Clock::now();
  const std::size_t n = 200;
  std::vector<double> mean;
  for (double lambda : {0.0, 1.0, 10.0}) {
    GadtConfig cfg;
    cfg.lambda = lambda;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = s.eval.single<float>(i);
      const auto r = optimize_da_params(x, s.eval.labels[i], s.surrogate, cfg, i);
      total += image_mse(r.x_trans.data(), x.data());
    }
    mean.push_back(total / static_cast<double>(n));
  }
  details["8"] = {{"lambda", {0, 1, 10}}, {"mean_mse", mean}};
  record(8, mean[1] < mean[0] && mean[2] <= mean[1],
         "mean MSE(x, x_trans) over 200 images: lambda 0 " + fmt("%.5f", mean[0]) + ", lambda 1 " +
             fmt("%.5f", mean[1]) + ", lambda 10 " + fmt("%.5f", mean[2]),
         since(t0));
}

void criterion10(const Context& ctx) {
  const auto t0 = Clock::now();
  const auto dir = ctx.out / "determinism";
  fs::create_directories(dir);
  std::ofstream(dir / "config.ini") << "[experiment]\nseed = 1\neval_size = 100\nmodel_cache = " << ctx.cache.string()
                                    << "\n\n[gadt]\nverify_every = 50\n";
  const auto config = dir / "config.ini";
  std::string csv[2], json[2];
  bool ran = true;
  for (int rep = 0; rep < 2; ++rep) {
    if (!ctx.cli.empty()) {
      const std::string cmd = "\"" + ctx.cli + "\" eval --config \"" + config.string() + "\" --out \"" +
                              (dir / "out").string() + "\" > \"" + (dir / "stdout.txt").string() + "\" 2>&1";
      ran = ran && std::system(cmd.c_str()) == 0;
    } else {
      auto cfg = load_experiment_config(config);
      cfg.csv = dir / "out" / "report.csv";
      cfg.json = dir / "out" / "report.json";
      run_experiment(cfg);
    }
    csv[rep] = slurp(dir / "out" / "report.csv");
    json[rep] = slurp(dir / "out" / "report.json");
  }
  const bool same = ran && !csv[0].empty() && csv[0] == csv[1] && json[0] == json[1];
  record(10, same,
         std::string("two eval runs") + (ctx.cli.empty() ? "" : " through the CLI") + ": CSV " +
             std::to_string(csv[0].size()) + " bytes " + (csv[0] == csv[1] ? "identical" : "DIFFERENT") + ", JSON " +
             std::to_string(json[0].size()) + " bytes " + (json[0] == json[1] ? "identical" : "DIFFERENT"),
         since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  Context ctx;
  std::string out = "acceptance_out";
  bool keep_cache = false;
  app.add_option("--out", out, "Working directory for reports and trained models");
  app.add_option("--cli", ctx.cli, "Path of the gadt executable used for the determinism check");
  app.add_flag("--keep-cache", keep_cache, "Reuse models trained by an earlier run");
  app.add_option("--seeds", ctx.seeds, "Experiment seeds");
  CLI11_PARSE(app, argc, argv);
  ctx.out = out;
  ctx.cache = ctx.out / "models";
  if (!keep_cache) fs::remove_all(ctx.cache);
  fs::create_directories(ctx.out);

  const auto t0 = Clock::now();
  try {
    criterion1();
    const auto t4 = Clock::now();
    const auto first = seed_models(ctx, ctx.seeds.front());
    criterion4(ctx, t4, first);
    criterion2(first);
    criterion3(first);
    criterion8(first);
    criteria_transfer(ctx);
    criterion10(ctx);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  nlohmann::ordered_json j;
  std::size_t passed = 0;
  std::printf("\nsummary\n");
  for (const auto& v : verdicts) {
    std::printf("criterion %d: %s - %s\n", v.id, v.pass ? "PASS" : "FAIL", v.summary.c_str());
    passed += v.pass;
    j["criteria"].push_back({{"id", v.id}, {"pass", v.pass}, {"summary", v.summary}, {"seconds", v.seconds}});
  }
  j["details"] = details;
  j["total_seconds"] = since(t0);
  std::ofstream(ctx.out / "acceptance.json") << j.dump(2) << "\n";
  std::printf("%zu of %zu criteria passed in %.0f s\n", passed, verdicts.size(), since(t0));
  return 0;
}
