#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hm3/arch_search.hpp"
#include "hm3/error.hpp"
#include "hm3/merge_param.hpp"
#include "hm3/mo_eval.hpp"
#include "hm3/ppo.hpp"
#include "hm3/toy_zoo.hpp"

namespace hm3 {

enum class Ablation { full, no_arch, no_para };

std::string_view to_string(Ablation a);
Ablation parse_ablation(std::string_view name);

struct RunConfig {
  ZooConfig zoo;
  std::filesystem::path zoo_dir;  // load an existing zoo instead of training one
  int num_tasks = 3;
  int divisions = 4;
  MergeConfig merge;
  EnvConfig env;  // t_max <= 0 means 2L
  PPOConfig ppo;
  bool warm_start = false;
  Ablation ablation = Ablation::full;
  Split eval_split = Split::test;
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t master_seed = 0;

  void validate() const;
};

RunConfig parse_run_config(const std::string& toml_text);
RunConfig load_run_config(const std::filesystem::path& file);
// Canonical TOML for a config; parse_run_config(to_toml(c)) reproduces c.
std::string to_toml(const RunConfig& cfg);
// Hash of every semantically meaningful field (out_dir excluded).
std::string config_hash(const RunConfig& cfg);

// Standalone merge settings: the MergeConfig fields at top level
// (weight_vector as an array) plus zoo_dir.
struct MergeJob {
  MergeConfig merge;
  std::filesystem::path zoo_dir;
};
MergeJob parse_merge_job(const std::string& toml_text);

// Failure inside a named pipeline stage; keeps the underlying kind.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause);
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct LambdaRecord {
  WeightVector lambda;
  std::vector<double> param_metrics;  // empty under no_para
  std::vector<double> path_metrics;   // empty under no_arch
  std::vector<double> final_metrics;
  double best_return = 0.0;
  int path_length = 0;
  std::optional<PathRecord> path;
  std::vector<std::pair<int, std::vector<double>>> snapshots;  // (iteration, metrics)
};

struct RunReport {
  RunConfig config;
  std::vector<LambdaRecord> records;
  std::vector<ObjectivePoint> baselines;
  ParetoFront front;  // normalized to minimization
  double hv = 0.0;
  std::vector<std::pair<int, double>> hv_history;
  double wall_clock = 0.0;
  std::string config_hash;
};

// Labelled accuracy points: every fine-tuned model, then task arithmetic,
// ties and dare_ties at uniform weights.
std::vector<ObjectivePoint> run_baselines(const RunConfig& cfg, const Zoo& zoo);

Zoo obtain_zoo(const RunConfig& cfg);

RunReport run_hm3(const RunConfig& cfg);

// One weight vector: merge (unless no_para), search (unless no_arch) and
// evaluate, writing artifacts under out_dir/lambda_<index>.
LambdaRecord run_lambda(const RunConfig& cfg, const Zoo& zoo, const WeightVector& lambda);

// Writes front.csv, metrics.csv, lambda_records.csv, hv_history.csv,
// pareto.svg, report.json and timing.json into out_dir.
void emit_reports(const RunReport& report, const std::filesystem::path& out_dir);

// Rebuilds the report of a finished run from its persisted checkpoints and
// paths, re-running evaluation only.
RunReport rebuild_report(const std::filesystem::path& run_dir);

// Rows `label,f_1..f_K`; no header.
struct LabelledRow {
  std::string label;
  std::vector<double> values;
};
std::vector<LabelledRow> read_metrics_csv(const std::filesystem::path& file);
void write_metrics_csv(const std::vector<LabelledRow>& rows, const std::filesystem::path& file);

double singleton_hv(const std::vector<double>& accuracies);

// Worker count: HM3_THREADS when set and positive, else hardware concurrency.
int worker_count();

}  // namespace hm3
