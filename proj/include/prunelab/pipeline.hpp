#pragma once
// Experiment manifests and the pretrain -> prune -> recover -> eval chain,
// both in memory and as content-addressed run directories on disk.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prunelab/data.hpp"
#include "prunelab/evalkit.hpp"
#include "prunelab/layerprune.hpp"
#include "prunelab/model.hpp"
#include "prunelab/plan.hpp"
#include "prunelab/recovery.hpp"
#include "prunelab/widthprune.hpp"

namespace prunelab::pipeline {

using model::ToyLVLM;

struct DataConfig {
  int train_size = 8192;
  int recovery_size = 2048;
  int bench_size = 512;
  int dev_size = 256;
  int image_dim = 24;
  double noise = 0.05;
  data::TaskMix task_mix{0.3, 0.3, 0.2, 0.2};
};

struct PretrainConfig {
  int steps = 8000;
  double lr = 2e-3;
  int batch = 16;
  int eval_every = 500;
  double target_accuracy = 0.9;
  double min_accuracy = 0.6;
};

struct PruneStage {
  PruneMethod method = PruneMethod::kWidth;
  double ratio = 0.15;
  int calibration_n = 16;
  bool per_layer_uniform = false;
  layerprune::BiTokens bi_tokens = layerprune::BiTokens::kAll;
  widthprune::Floors floors;
};

struct RecoverStage {
  std::string preset = "sft";
  recovery::Scope scope = recovery::Scope::kProjectorOnly;
  bool lora = true;
  int lora_rank = 8;
  double lora_scaling = 16.0;
  double fraction = 1.0;
  int steps = 200;
  int batch = 16;
  double lr = 0.0;  // 0 selects the scope default
  double tau = 2.0;
  double grad_clip = 1.0;
  recovery::MatchLayers match_layers = recovery::MatchLayers::kAuto;
  bool kd_all_positions = false;

  recovery::RecoveryConfig to_config(std::uint64_t seed) const;
};

struct Manifest {
  model::ModelConfig model;
  DataConfig data;
  PretrainConfig pretrain;
  std::optional<PruneStage> prune;
  std::optional<RecoverStage> recover;
  bool eval_latency = false;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "runs";

  void validate() const;
};

// Flat `section.key = value` lines; `#` starts a comment. Unknown keys and
// malformed values throw ConfigError.
Manifest parse_manifest(const std::string& text);
Manifest load_manifest(const std::filesystem::path& path);
// Overrides one key as if it appeared in the manifest file.
void set_key(Manifest& m, const std::string& key, const std::string& value);
std::string render_manifest(const Manifest& m);

// Canonical text of the settings each stage depends on (upstream included).
std::string pretrain_canonical(const Manifest& m, std::uint64_t seed);
std::string prune_canonical(const Manifest& m, std::uint64_t seed);
std::string recover_canonical(const Manifest& m, std::uint64_t seed);
std::string eval_canonical(const Manifest& m, std::uint64_t seed);
std::string content_hash(const std::string& text);

struct Datasets {
  data::DatasetSpec base;
  std::vector<Triplet> recovery;  // also the calibration pool
  std::vector<data::Suite> suites;
  data::Suite dev_mcq;
};

// Everything except the pretraining corpus, all derived from `seed`.
Datasets make_datasets(const Manifest& m, std::uint64_t seed);
std::vector<Triplet> pretrain_corpus(const Manifest& m, std::uint64_t seed);

struct Reference {
  ToyLVLM model;
  evalkit::Scores scores;
  double dev_accuracy = 0.0;
  int steps_run = 0;
  std::vector<recovery::LossBreakdown> curve;
};

// Trains the reference until dev mcq accuracy reaches the target or the
// step budget runs out; throws Error below min_accuracy.
Reference pretrain(const Manifest& m, std::uint64_t seed, const Datasets& ds, int jobs = 1);

struct PruneOutcome {
  ToyLVLM student;
  PruningPlan plan;
  std::optional<layerprune::BlockInfluenceReport> bi;
  std::vector<DependencyGroup> groups;
  std::optional<widthprune::GroupImportanceReport> importance;
};

PruneOutcome prune(const ToyLVLM& teacher, const PruneStage& stage, const std::vector<Triplet>& pool,
                   std::uint64_t seed, int jobs = 1);

recovery::TrainResult recover(const ToyLVLM& student, const ToyLVLM& teacher, const RecoverStage& stage,
                              const std::vector<Triplet>& data, std::uint64_t seed);

// ---- on-disk runs ------------------------------------------------------------

std::filesystem::path cache_root(const Manifest& m);

// Stage directory under the cache root; creates it and records the canonical
// text, or throws ConfigError if the directory holds a different manifest.
std::filesystem::path stage_dir(const Manifest& m, const std::string& stage, const std::string& canonical);

struct RunPaths {
  std::filesystem::path pretrain, prune, recover, eval;
};

RunPaths run_paths(const Manifest& m, std::uint64_t seed);

// Each command reuses cached upstream outputs and throws MissingArtifactError
// when they are absent. Returns the stage directory.
std::filesystem::path cmd_pretrain(const Manifest& m, std::uint64_t seed, int jobs = 1);
std::filesystem::path cmd_prune(const Manifest& m, std::uint64_t seed, int jobs = 1);
std::filesystem::path cmd_recover(const Manifest& m, std::uint64_t seed, int jobs = 1);
std::filesystem::path cmd_eval(const Manifest& m, std::uint64_t seed, int jobs = 1);
// Runs every stage the manifest names, reusing cached artifacts.
std::filesystem::path run_all(const Manifest& m, std::uint64_t seed, int jobs = 1);

enum class SweepAxis { kRatio, kFraction, kCalibrationN, kPreset };
SweepAxis parse_axis(const std::string& s);
std::string axis_name(SweepAxis a);

struct SweepRow {
  std::string value;
  std::uint64_t seed = 0;
  std::string metric;
  double result = 0.0;
  std::string error;  // non-empty when the run failed
};

// Runs the full chain per (value, seed) using up to `jobs` worker threads.
std::vector<SweepRow> cmd_sweep(const Manifest& m, SweepAxis axis, const std::vector<std::string>& values,
                                int jobs = 1);
void write_sweep(const std::vector<SweepRow>& rows, SweepAxis axis, std::ostream& os);

enum class Strategy { kWidthNoRecovery, kLayerProjectorFt, kWidthSftL2Full };
enum class Budget { kNone, kProjectorOnly, kFull };

struct Recommendation {
  Strategy strategy;
  std::string rationale;
};

Recommendation cmd_advise(double target_ratio, Budget budget);
Budget parse_budget(const std::string& s);
std::string strategy_name(Strategy s);

// Aligned text summary of every eval report reachable from the manifest.
std::string cmd_report(const Manifest& m);

}  // namespace prunelab::pipeline
