#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hm3/network.hpp"
#include "hm3/tensor_store.hpp"

namespace hm3 {

inline constexpr int kToyInputDim = 8;

struct TaskSpec {
  int task_id = 1;
  std::uint64_t generator_seed = 0;
  int train_size = 2000;
  int val_size = 500;
  int test_size = 500;
  std::string metric_name = "accuracy";

  bool operator==(const TaskSpec&) const = default;
};

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

// Labels are +1 / -1; inputs are row-major [size x input_dim].
struct Dataset {
  int input_dim = kToyInputDim;
  std::vector<float> inputs;
  std::vector<std::int8_t> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::span<const float> input(int i) const {
    return {inputs.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(input_dim),
            static_cast<std::size_t>(input_dim)};
  }
};

enum class TaskFamily { linear, quadratic, parity };

// The labelling rule of one task: sign(w.x + c * g(x)), where g is zero,
// a centred quadratic form, or a product of coordinate threshold signs.
class TaskFunction {
 public:
  explicit TaskFunction(const TaskSpec& spec);

  TaskFamily family() const { return family_; }
  double score(std::span<const float> x) const;
  int label(std::span<const float> x) const { return score(x) >= 0.0 ? 1 : -1; }

 private:
  TaskFamily family_;
  std::vector<double> direction_;
  double coupling_ = 0.0;
  std::vector<double> quad_;  // row-major input_dim x input_dim
  double quad_trace_ = 0.0;
  std::vector<int> parity_coords_;
  std::vector<double> thresholds_;
};

struct TaskData {
  TaskSpec spec;
  Dataset train;
  Dataset val;
  Dataset test;

  const Dataset& split(Split s) const;
};

// Task specs plus their generated splits (generation is deterministic in
// the task specs, so a suite can always be rebuilt from tasks.json).
class TaskSuite {
 public:
  explicit TaskSuite(std::vector<TaskSpec> specs);

  int size() const { return static_cast<int>(tasks_.size()); }
  const TaskData& operator[](int k) const { return tasks_[static_cast<std::size_t>(k)]; }
  std::vector<TaskSpec> specs() const;

 private:
  std::vector<TaskData> tasks_;
};

// Balanced split: exactly half of the examples carry each label (odd sizes
// round the positive count up).
Dataset generate_split(const TaskSpec& spec, Split split, int size);

struct TaskSizes {
  int train_size = 2000;
  int val_size = 500;
  int test_size = 500;
};

std::vector<TaskSpec> make_tasks(int num_tasks, std::uint64_t seed, TaskSizes sizes = {});

struct MetricVector {
  std::vector<double> values;
  std::uint64_t eval_seed = 0;
  Split split = Split::val;

  int size() const { return static_cast<int>(values.size()); }
};

// Indices of the evaluated subset: all of [0, n) when max_samples is 0 or
// >= n, else a seed-chosen subset in ascending order.
std::vector<int> evaluation_subset(int n, int max_samples, std::uint64_t seed, int task_index);

// Per-task accuracy of head k on task k's split.
MetricVector evaluate(const Network& model, const TaskSuite& tasks, Split split, std::uint64_t seed,
                      int max_samples = 0);

struct TrainConfig {
  int steps = 2000;
  double learning_rate = 0.001;
  int batch_size = 16;  // examples per task per step

  bool operator==(const TrainConfig&) const = default;
};

Checkpoint init_checkpoint(const ArchDescriptor& arch, std::uint64_t seed);

// Mini-batch SGD on the equal-weight mixture of all task losses.
Checkpoint train_base(const ArchDescriptor& arch, const TaskSuite& tasks, const TrainConfig& cfg, std::uint64_t seed);

// Continues SGD from `base` on task `task_id` (1-based) alone.
Checkpoint finetune_task(const Checkpoint& base, const TaskSuite& tasks, int task_id, const TrainConfig& cfg,
                         std::uint64_t seed);

struct ZooConfig {
  int num_tasks = 3;
  int num_layers = 4;
  int hidden_width = 32;
  Activation activation = Activation::tanh;
  TaskSizes sizes;
  TrainConfig base_train{2000, 0.001, 16};
  TrainConfig finetune{1500, 0.1, 32};

  ArchDescriptor arch() const;
  bool operator==(const ZooConfig&) const = default;
};

struct Zoo {
  TaskSuite tasks;
  Checkpoint base;
  std::vector<Checkpoint> finetuned;
};

Zoo build_zoo(const ZooConfig& cfg, std::uint64_t seed);

// base.ckpt, task<k>.ckpt and tasks.json.
void save_zoo(const Zoo& zoo, const std::filesystem::path& dir, std::uint64_t seed);
Zoo load_zoo(const std::filesystem::path& dir);

}  // namespace hm3
