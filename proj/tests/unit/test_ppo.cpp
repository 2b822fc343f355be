#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "../support/fixtures.hpp"
#include "../support/ppo_oracle.hpp"
#include "../support/rigged_env.hpp"
#include "hm3/error.hpp"
#include "hm3/ppo.hpp"

using namespace hm3;
using hm3::testing::RiggedPathEnv;
using hm3::testing::forward;
using hm3::testing::oracle_log_prob;
using hm3::testing::Problem;
using hm3::testing::random_problem;

namespace {

void check_gradient(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                    const std::vector<double>& analytic) {
  REQUIRE(analytic.size() == x.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    const double numeric = (up - down) / (2 * h);
    CAPTURE(i);
    CHECK(std::abs(numeric - analytic[i]) <= 1e-4 * std::max(std::abs(numeric), std::abs(analytic[i])) + 1e-8);
  }
}

std::size_t count_flat(const Problem& pr, double clip) {
  std::size_t flat = 0;
  for (const auto& tr : pr.batch) {
    const double r = std::exp(oracle_log_prob(pr.policy, tr) - tr.logprob);
    flat += (tr.advantage >= 0 && r > 1 + clip) || (tr.advantage < 0 && r < 1 - clip);
  }
  return flat;
}

}  // namespace

TEST_CASE("GAE recursion equals the direct discounted sum") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(1 + rng.below(50));
    std::vector<double> rewards(n), values(n + 1);
    for (auto& r : rewards) r = rng.normal();
    for (std::size_t t = 0; t < n; ++t) values[t] = rng.normal();
    values[n] = trial % 2 == 0 ? 0.0 : rng.normal();
    const double gamma = rng.uniform(0.5, 1.0), lambda = rng.uniform(0.0, 1.0);
    const Gae g = gae(rewards, values, gamma, lambda);
    for (std::size_t t = 0; t < n; ++t) {
      double direct = 0.0;
      for (std::size_t i = 0; t + i < n; ++i) {
        const double zeta = rewards[t + i] + gamma * values[t + i + 1] - values[t + i];
        direct += std::pow(gamma * lambda, static_cast<double>(i)) * zeta;
      }
      CHECK(std::abs(g.advantages[t] - direct) <= 1e-10);
      CHECK(std::abs(g.returns[t] - (values[t] + direct)) <= 1e-10);
    }
  }
}

TEST_CASE("GAE with zero values and unit discounts is the reward to go") {
  const std::vector<double> r{1.0, -2.0, 0.5};
  const std::vector<double> v(4, 0.0);
  const Gae g = gae(r, v, 1.0, 1.0);
  CHECK(g.advantages == std::vector<double>{-0.5, -1.5, 0.5});
  CHECK_THROWS_AS(gae(r, std::vector<double>(3, 0.0), 0.9, 0.9), Error);
}

TEST_CASE("log-probabilities match a hand-rolled softmax and Gaussian") {
  const Problem pr = random_problem(3);
  for (const auto& tr : pr.batch) CHECK(std::abs(log_prob(pr.policy, tr) - oracle_log_prob(pr.policy, tr)) < 1e-10);
  const auto d = policy_distribution(pr.policy, pr.batch[0].features, true);
  CHECK(d.probs.back() == 0.0);
  double total = 0.0;
  for (const double p : d.probs) total += p;
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("analytic gradients match central differences") {
  for (const std::uint64_t seed : {5u, 6u, 7u}) {
    const Problem pr = random_problem(seed);
    CHECK(count_flat(pr, 0.2) > 0);
    const auto with_policy = [&](const std::vector<double>& p) {
      PolicyNetwork q = pr.policy;
      q.params = p;
      return q;
    };
    const auto with_value = [&](const std::vector<double>& p) {
      ValueNetwork q = pr.value;
      q.params = p;
      return q;
    };
    SUBCASE("clipped surrogate") {
      check_gradient([&](const auto& p) { return policy_loss(pr.batch, with_policy(p), 0.2).value; }, pr.policy.params,
                     policy_loss(pr.batch, pr.policy, 0.2).grad);
    }
    SUBCASE("entropy") {
      check_gradient([&](const auto& p) { return policy_entropy(pr.batch, with_policy(p)).value; }, pr.policy.params,
                     policy_entropy(pr.batch, pr.policy).grad);
    }
    SUBCASE("value") {
      check_gradient([&](const auto& p) { return value_loss(pr.batch, with_value(p)).value; }, pr.value.params,
                     value_loss(pr.batch, pr.value).grad);
    }
    SUBCASE("total") {
      const TotalLoss t = total_loss(pr.batch, pr.policy, pr.value, 0.2, 0.5, 0.01);
      check_gradient([&](const auto& p) { return total_loss(pr.batch, with_policy(p), pr.value, 0.2, 0.5, 0.01).total; },
                     pr.policy.params, t.grad_policy);
      check_gradient([&](const auto& p) { return total_loss(pr.batch, pr.policy, with_value(p), 0.2, 0.5, 0.01).total; },
                     pr.value.params, t.grad_value);
    }
  }
}

TEST_CASE("value loss is the mean squared error against the targets") {
  const Problem pr = random_problem(9);
  double mse = 0.0;
  for (const auto& tr : pr.batch) {
    const double v = forward(pr.value.net, pr.value.params, tr.features)[0];
    mse += (v - tr.target) * (v - tr.target) / static_cast<double>(pr.batch.size());
  }
  CHECK(std::abs(value_loss(pr.batch, pr.value).value - mse) < 1e-12);
}

TEST_CASE("at the behaviour policy the surrogate gradient is the plain policy gradient") {
  Problem pr = random_problem(11);
  for (auto& tr : pr.batch) tr.logprob = oracle_log_prob(pr.policy, tr);
  const auto reinforce = [&](const std::vector<double>& p) {
    PolicyNetwork q = pr.policy;
    q.params = p;
    double s = 0.0;
    for (const auto& tr : pr.batch) s -= tr.advantage * oracle_log_prob(q, tr);
    return s / static_cast<double>(pr.batch.size());
  };
  check_gradient(reinforce, pr.policy.params, policy_loss(pr.batch, pr.policy, 0.2).grad);
  double expected = 0.0;
  for (const auto& tr : pr.batch) expected -= tr.advantage / static_cast<double>(pr.batch.size());
  CHECK(std::abs(policy_loss(pr.batch, pr.policy, 0.2).value - expected) < 1e-12);
}

TEST_CASE("loss composition") {
  const Problem pr = random_problem(13);
  const TotalLoss zero = total_loss(pr.batch, pr.policy, pr.value, 0.2, 0.0, 0.0);
  CHECK(zero.total == doctest::Approx(policy_loss(pr.batch, pr.policy, 0.2).value).epsilon(1e-14));
  const TotalLoss t = total_loss(pr.batch, pr.policy, pr.value, 0.2, 0.5, 0.01);
  CHECK(std::abs(t.total - (t.policy + 0.5 * t.value - 0.01 * t.entropy)) < 1e-14);
  REQUIRE(t.entropy > 0.0);
  CHECK(total_loss(pr.batch, pr.policy, pr.value, 0.2, 0.5, 0.02).total < t.total);
}

TEST_CASE("uniform logits give discrete entropy ln A") {
  const int models = 3, layers = 4, scale_dim = 2;
  PolicyNetwork pol = PolicyNetwork::create(models + layers + 3, models * layers + 1, scale_dim, 8, -1.0, 1);
  const std::size_t last = static_cast<std::size_t>((pol.num_actions + scale_dim) * (8 + 1));
  std::fill(pol.params.begin() + static_cast<long>(pol.trunk.num_params() - last),
            pol.params.begin() + static_cast<long>(pol.trunk.num_params()), 0.0);
  Transition tr;
  tr.features = state_features({false, 2, 3, 1}, models, layers, 8);
  tr.action = 0;
  tr.offset.assign(scale_dim, 0.0);
  const double gaussian = scale_dim * (0.5 + 0.5 * std::log(2.0 * std::numbers::pi)) - 1.0 * scale_dim;
  const double h = policy_entropy(Batch{tr}, pol).value;
  CHECK(std::abs(h - gaussian - std::log(static_cast<double>(models * layers + 1))) < 1e-12);
}

TEST_CASE("action encoding") {
  CHECK(stop_action(4, 4) == 16);
  CHECK(decode_action(16, 4, 4).is_stop());
  const PathAction a = decode_action(5, 4, 4);
  CHECK(a.target == LayerRef{2, 2});
  const auto f = state_features({true, 0, 0, 0}, 2, 3, 6);
  CHECK(f.size() == 2 + 3 + 3);
  CHECK(f[0] == 1.0);
  CHECK(f[3] == 1.0);
  CHECK(f.back() == 0.0);
}

TEST_CASE("pure warmup leaves the networks at initialization") {
  RiggedPathEnv env(3, 3, 3, 0.01, 6, 2, 1);
  PPOConfig cfg;
  cfg.max_iter = 20;
  cfg.warmup_iters = 20;
  cfg.hidden = 16;
  cfg.seed = 4;
  const TrainResult r = train(env, cfg);
  const int fd = 3 + 3 + 3;
  CHECK(r.policy.params ==
        PolicyNetwork::create(fd, 10, 2, 16, cfg.init_log_std, derive_seed(cfg.seed, "policy_init")).params);
  CHECK(r.value.params == ValueNetwork::create(fd, 16, derive_seed(cfg.seed, "value_init")).params);
  double best = -1e300;
  for (const auto& s : r.history) best = std::max(best, s.best_return);
  CHECK(r.best_return == best);
  CHECK(r.history.size() == 20);
}

TEST_CASE("training is bit-reproducible and snapshots fire on schedule") {
  RiggedPathEnv env(3, 3, 3, 0.01, 6, 2, 2);
  PPOConfig cfg;
  cfg.max_iter = 60;
  cfg.warmup_iters = 10;
  cfg.hidden = 16;
  cfg.seed = 9;
  std::vector<int> snaps;
  TrainHooks hooks;
  hooks.snapshot_every = 25;
  hooks.on_snapshot = [&](int it, const InferencePath&, double) { snaps.push_back(it); };
  const TrainResult a = train(env, cfg, hooks);
  const TrainResult b = train(env, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].mean_return == b.history[i].mean_return);
    CHECK(a.history[i].policy_loss == b.history[i].policy_loss);
  }
  CHECK(a.policy.params == b.policy.params);
  CHECK(snaps == std::vector<int>{25, 50});
}

namespace {

class NanEnv final : public Environment {
 public:
  int num_models() const override { return 1; }
  int num_layers() const override { return 1; }
  int scale_dim() const override { return 1; }
  int t_max() const override { return 1; }
  void reset() override { t_ = 0; }
  StepOutcome step(int, std::span<const float>) override {
    ++t_;
    return {std::nan(""), true};
  }
  Observation observe() const override { return {t_ == 0, t_ ? 1 : 0, t_ ? 1 : 0, t_}; }
  InferencePath current_path() const override { return {}; }

 private:
  int t_ = 0;
};

}  // namespace

TEST_CASE("a NaN loss aborts training with the iteration index") {
  NanEnv env;
  PPOConfig cfg;
  cfg.max_iter = 3;
  cfg.warmup_iters = 0;
  cfg.hidden = 4;
  try {
    train(env, cfg);
    FAIL("expected a training error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::training);
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("PPO configuration is validated") {
  PPOConfig c;
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = PPOConfig{};
  c.clip = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = PPOConfig{};
  c.episodes_per_iter = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("policy checkpoints round trip") {
  const Problem pr = random_problem(17);
  const auto dir = hm3::testing::temp_dir("policy_ckpt");
  save_policy(pr.policy, dir / "policy.ckpt");
  const PolicyNetwork back = load_policy(dir / "policy.ckpt");
  // Stored as f32 tensors.
  REQUIRE(back.params.size() == pr.policy.params.size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    CHECK(back.params[i] == static_cast<double>(static_cast<float>(pr.policy.params[i])));
  }
  CHECK(back.trunk.sizes == pr.policy.trunk.sizes);
  CHECK(back.num_actions == pr.policy.num_actions);
}
