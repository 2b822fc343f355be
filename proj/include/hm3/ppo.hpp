#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hm3/arch_search.hpp"

namespace hm3 {

struct PPOConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double c1 = 0.5;
  double c2 = 0.01;
  double learning_rate = 3e-4;
  int epochs_per_batch = 4;
  int episodes_per_iter = 8;
  int minibatch_size = 16;  // 0: one full-batch step per epoch
  int max_iter = 1000;
  int warmup_iters = 200;
  std::uint64_t seed = 0;
  int hidden = 64;
  double init_log_std = -1.0;
  bool normalize_advantages = true;

  void validate() const;
  bool operator==(const PPOConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Environment seen by the learner

struct Observation {
  bool at_start = true;
  int model = 0;  // 1-based, 0 at START
  int layer = 0;
  int t = 0;
};

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

// Discrete actions are (m - 1) * L + (l - 1) for HOP(m, l) and M * L for
// STOP; every action also carries a d_h scale vector (ignored on STOP).
class Environment {
 public:
  virtual ~Environment() = default;
  virtual int num_models() const = 0;
  virtual int num_layers() const = 0;
  virtual int scale_dim() const = 0;
  virtual int t_max() const = 0;
  virtual void reset() = 0;
  virtual StepOutcome step(int action, std::span<const float> scale) = 0;
  virtual Observation observe() const = 0;
  virtual InferencePath current_path() const = 0;
};

int stop_action(int num_models, int num_layers);
PathAction decode_action(int action, int num_models, int num_layers);

// Adapts the merge-path MDP to the learner interface.
class PathMdp final : public Environment {
 public:
  explicit PathMdp(const PathEnvironment& env) : env_(env), state_(env.reset()) {}

  int num_models() const override { return env_.num_models(); }
  int num_layers() const override { return env_.num_layers(); }
  int scale_dim() const override { return env_.hidden_width(); }
  int t_max() const override { return env_.config().t_max; }
  void reset() override { state_ = env_.reset(); }
  StepOutcome step(int action, std::span<const float> scale) override;
  Observation observe() const override;
  InferencePath current_path() const override { return state_.path; }

 private:
  const PathEnvironment& env_;
  PathState state_;
};

// one-hot(m) over {START, 1..M} ++ one-hot(l) over {START, 1..L} ++ t / T_max
std::vector<double> state_features(const Observation& obs, int num_models, int num_layers, int t_max);

// ---------------------------------------------------------------------------
// Networks

// Fully connected tanh network with a linear output layer; parameters are
// one flat vector, each layer stored as row-major W [out x in] then b.
struct MlpShape {
  std::vector<int> sizes;  // input, hidden..., output

  std::size_t num_params() const;
};

struct MlpCache {
  std::vector<std::vector<double>> acts;  // input, hidden outputs, output
};

void mlp_forward(const MlpShape& shape, std::span<const double> params, std::span<const double> x, MlpCache& cache);
// Accumulates d(out . dout)/d(params) into grad.
void mlp_backward(const MlpShape& shape, std::span<const double> params, const MlpCache& cache,
                  std::span<const double> dout, std::span<double> grad);
std::vector<double> mlp_init(const MlpShape& shape, std::uint64_t seed, double output_gain);

// Logits over all discrete actions plus the mean of the scale offset
// u ~ N(mean, exp(log_std)^2); the applied scale is 1 + u.
struct PolicyNetwork {
  MlpShape trunk;
  int num_actions = 0;
  int scale_dim = 0;
  std::vector<double> params;  // trunk parameters then log_std [scale_dim]

  static PolicyNetwork create(int feature_dim, int num_actions, int scale_dim, int hidden, double init_log_std,
                              std::uint64_t seed);
  std::span<const double> log_std() const;
};

struct ValueNetwork {
  MlpShape net;
  std::vector<double> params;

  static ValueNetwork create(int feature_dim, int hidden, std::uint64_t seed);
  double value(std::span<const double> features) const;
};

struct Transition {
  std::vector<double> features;
  bool stop_masked = false;
  int action = 0;
  std::vector<double> offset;  // sampled u for HOP actions, empty for STOP
  double logprob = 0.0;        // under the behaviour policy
  double reward = 0.0;
  double value = 0.0;
  bool done = false;
  double advantage = 0.0;
  double target = 0.0;  // return target G-hat
};

using Batch = std::vector<Transition>;

struct ActionDistribution {
  std::vector<double> probs;  // masked entries are exactly 0
  std::vector<double> mean;
};

ActionDistribution policy_distribution(const PolicyNetwork& policy, std::span<const double> features,
                                       bool stop_masked);
double log_prob(const PolicyNetwork& policy, const Transition& tr);

// ---------------------------------------------------------------------------
// Losses

struct Gae {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// values has one more entry than rewards (the bootstrap, 0 when terminal).
Gae gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda);

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;
};

LossValue policy_loss(const Batch& batch, const PolicyNetwork& policy, double clip);
LossValue value_loss(const Batch& batch, const ValueNetwork& value);
// Mean over the batch of discrete entropy plus Gaussian differential entropy.
LossValue policy_entropy(const Batch& batch, const PolicyNetwork& policy);

struct TotalLoss {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  std::vector<double> grad_policy;
  std::vector<double> grad_value;
};

// policy + c1 * value - c2 * entropy
TotalLoss total_loss(const Batch& batch, const PolicyNetwork& policy, const ValueNetwork& value, double clip,
                     double c1, double c2);

class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grad, double lr);

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct IterationStats {
  int iter = 0;
  double mean_return = 0.0;
  double best_return = 0.0;  // best episode return so far
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

struct TrainResult {
  PolicyNetwork policy;
  ValueNetwork value;
  InferencePath best_path;
  double best_return = 0.0;
  std::vector<IterationStats> history;
};

struct TrainHooks {
  std::optional<PolicyNetwork> initial_policy;
  std::optional<ValueNetwork> initial_value;
  int snapshot_every = 50;
  // Called after iterations snapshot_every, 2 * snapshot_every, ...
  std::function<void(int iterations_done, const InferencePath& best, double best_return)> on_snapshot;
};

TrainResult train(Environment& env, const PPOConfig& cfg, const TrainHooks& hooks = {});

void write_history_csv(const std::vector<IterationStats>& history, const std::filesystem::path& file);
void save_policy(const PolicyNetwork& policy, const std::filesystem::path& file);
PolicyNetwork load_policy(const std::filesystem::path& file);

}  // namespace hm3
