#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gadt/attacks.hpp"
#include "gadt/gadt.hpp"
#include "gadt/gradcheck_suite.hpp"
#include "gadt/model.hpp"

namespace gadt {

struct ModelEntry {
  std::string name;
  std::string arch;
  /// Derived from the experiment seed and the name when unset.
  std::optional<std::uint64_t> seed;
  bool adversarial = false;
  /// Load these weights instead of training.
  std::filesystem::path weights;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  /// Synthetic sources without an explicit seed get one derived from `seed`.
  std::string train_source = "synthetic:n=4000";
  std::string eval_source = "synthetic:n=500";
  std::size_t eval_size = 500;

  ModelEntry surrogate{"small", "small", std::nullopt, false, {}};
  std::vector<ModelEntry> targets{{"wide", "wide", std::nullopt, false, {}},
                                  {"wide_at", "wide", std::nullopt, true, {}}};
  /// Also report the surrogate itself as a (white-box) target.
  bool include_surrogate = true;
  TrainConfig train;

  std::vector<AttackId> attacks{AttackId::mim, AttackId::sim, AttackId::dim, AttackId::tim, AttackId::admix};
  AttackConfig attack;
  /// Attack seed follows the experiment seed unless set.
  bool attack_seed_set = false;

  bool gadt = true;
  GadtConfig gadt_cfg;
  /// Attack from transform(x, initial theta) without stage-one optimisation.
  bool fixed_da = false;
  /// Baselines with steps + gadt iterations.
  bool iteration_matched = false;
  /// Attacks that get the fixed-da and iteration-matched variants; empty means all.
  std::vector<AttackId> ablation_attacks;

  std::size_t workers = 1;
  Precision precision = Precision::f32;
  std::filesystem::path csv;
  std::filesystem::path json;
  /// Directory of trained weights reused across runs; empty disables it.
  std::filesystem::path model_cache;

  /// Throws ConfigError.
  void validate() const;
};

/// INI text: sections [experiment], [data], [surrogate], [target.<name>],
/// [train], [attack], [gadt]. Unknown sections or keys are errors.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// INI rendering that parses back to an equal configuration.
std::string format_experiment_config(const ExperimentConfig& cfg);

struct ReportCell {
  std::string surrogate;
  std::string target;
  std::string attack;
  std::string variant;
  double success_rate = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double linf_clean = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

struct ModelSummary {
  std::string name;
  std::string arch;
  std::uint64_t seed = 0;
  bool adversarial = false;
  double clean_accuracy = 0.0;
  std::size_t mask_size = 0;
  std::uint32_t weight_crc = 0;
};

struct StageOneSummary {
  double mean_mse = 0.0;
  double mean_blur = 0.0;
  double mean_angle = 0.0;
  double mean_saturation = 0.0;
  /// Share of images whose final CE is at least the initial CE.
  double ce_rise_fraction = 0.0;
  std::size_t gradient_checks = 0;
  double max_gradient_error = 0.0;
};

struct ExperimentReport {
  bool complete = true;
  std::string error;
  std::uint64_t seed = 0;
  std::size_t eval_size = 0;
  std::string precision = "f32";
  std::string config_text;
  std::vector<ModelSummary> models;
  std::vector<ReportCell> cells;
  std::optional<StageOneSummary> stage_one;
  /// Not written to the report files.
  double wall_clock_seconds = 0.0;

  const ReportCell* find(const std::string& target, const std::string& attack, const std::string& variant) const;
};

/// Trains or loads the models, runs every attack variant and writes the
/// configured report files. On failure a partial report marked incomplete is
/// written before the error is rethrown.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

std::string report_csv(const ExperimentReport& report);
std::string report_json(const ExperimentReport& report);
ExperimentReport parse_report_json(const std::string& text);
ExperimentReport read_report(const std::filesystem::path& path);
void write_report(const ExperimentReport& report, const std::filesystem::path& csv, const std::filesystem::path& json);
/// Fixed-width text table of the cells.
std::string render_report(const ExperimentReport& report);

/// Numbers as written in reports: shortest round-trip form, "inf" for +infinity.
std::string format_number(double v);

/// Synthetic sources without "seed=" get one derived from `seed` and `tag`.
std::string resolve_source(const std::string& source, std::uint64_t seed, const std::string& tag);

/// Obtains a model as the experiment would: weights file, cache, or training.
Model<float> obtain_model(const ModelEntry& entry, const ExperimentConfig& cfg, const Dataset& train_set,
                          const Dataset* test_set);

}  // namespace gadt
