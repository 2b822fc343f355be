#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hm3/network.hpp"
#include "hm3/simplex_weights.hpp"
#include "hm3/tensor_store.hpp"
#include "hm3/toy_zoo.hpp"

namespace hm3 {

// (model, layer), both 1-based. Models 1..K are the fine-tuned checkpoints,
// K+1 the parameter-level merge when it is part of the zoo.
struct LayerRef {
  int model = 1;
  int layer = 1;

  bool operator==(const LayerRef&) const = default;
};

struct InferencePath {
  std::vector<LayerRef> hops;
  std::vector<std::vector<float>> scales;  // one d_h vector per hop

  int length() const { return static_cast<int>(hops.size()); }
  bool operator==(const InferencePath&) const = default;
};

// Replays layers 1..L of `model` at unit scale.
InferencePath identity_path(int model, int num_layers, int hidden_width);

enum class RewardMode { per_step, terminal };

std::string_view to_string(RewardMode mode);
RewardMode parse_reward_mode(std::string_view name);

struct EnvConfig {
  double beta1 = 0.01;
  int t_max = 8;
  RewardMode reward_mode = RewardMode::per_step;
  int probe_batch = 64;
  WeightVector lambda;
  std::uint64_t eval_seed = 0;
  // false: the zoo holds only the K fine-tuned models and the base model
  // supplies the input projection and heads.
  bool include_merged = true;

  void validate() const;
  bool operator==(const EnvConfig&) const = default;
};

// The candidate models plus the anchor whose input projection and heads
// frame every assembled path.
struct SearchZoo {
  std::vector<Checkpoint> models;
  Checkpoint anchor;
};

// K fine-tuned models followed by the merged model; anchored on the merge.
SearchZoo make_search_zoo(std::span<const Checkpoint> finetuned, const Checkpoint& merged);
// K fine-tuned models only; anchored on the base.
SearchZoo make_search_zoo_without_merge(std::span<const Checkpoint> finetuned, const Checkpoint& base);

struct PathAction {
  enum class Kind { hop, stop };
  Kind kind = Kind::stop;
  LayerRef target;

  static PathAction hop(int model, int layer) { return {Kind::hop, {model, layer}}; }
  static PathAction stop() { return {Kind::stop, {}}; }
  bool is_stop() const { return kind == Kind::stop; }
};

struct PathState {
  bool at_start = true;
  LayerRef current;
  int t = 0;
  InferencePath path;
  bool done = false;
  // Probe hidden states for each task after the current prefix.
  std::vector<std::vector<float>> hidden;
};

struct StepResult {
  PathState state;
  double reward = 0.0;
  double metric_reward = 0.0;
  double penalty = 0.0;
  bool done = false;
};

double scalarize(const MetricVector& f, const WeightVector& lambda);
double scalarize(std::span<const double> f, std::span<const double> lambda);

// The path MDP over a fixed zoo and task suite. Immutable after
// construction; episodes are carried in PathState values.
class PathEnvironment {
 public:
  PathEnvironment(EnvConfig cfg, SearchZoo zoo, const TaskSuite& tasks);

  const EnvConfig& config() const { return cfg_; }
  int num_models() const { return static_cast<int>(layers_.size()); }
  int num_layers() const { return num_layers_; }
  int hidden_width() const { return width_; }
  int num_tasks() const { return num_tasks_; }

  PathState reset() const;
  StepResult step(const PathState& state, const PathAction& action, std::span<const float> scale) const;

  // Per-task probe accuracy of the network formed by the state's prefix.
  std::vector<double> probe_metrics(const PathState& state) const;

  Network assemble(const InferencePath& path) const;

 private:
  void apply_hop(PathState& s, const LayerRef& ref, std::span<const float> scale) const;

  EnvConfig cfg_;
  SearchZoo zoo_;
  int num_layers_;
  int width_;
  int num_tasks_;
  Activation act_;
  Dense input_;
  std::vector<std::vector<Dense>> layers_;  // [model][layer]
  std::vector<Dense> heads_;
  std::vector<std::vector<int>> probe_labels_;
  std::vector<std::vector<float>> probe_h0_;  // [task] packed [probe x width]
};

PathState env_reset(const EnvConfig& cfg, const SearchZoo& zoo);
StepResult env_step(const PathState& state, const PathAction& action, std::span<const float> scale,
                    const PathEnvironment& env);

// Input projection and heads of the anchor, hops drawn from the zoo.
Network assemble_model(const InferencePath& path, const SearchZoo& zoo);

struct PathRecord {
  InferencePath path;
  std::vector<double> lambda;
  double episode_return = 0.0;
};

std::string path_to_json(const PathRecord& record);
PathRecord path_from_json(const std::string& text);
void save_path(const PathRecord& record, const std::filesystem::path& file);
PathRecord load_path(const std::filesystem::path& file);

}  // namespace hm3
