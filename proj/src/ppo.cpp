#include "hm3/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "hm3/error.hpp"
#include "hm3/rng.hpp"

namespace hm3 {

using nlohmann::json;

void PPOConfig::validate() const {
  const auto fail = [](const char* what) { throw Error(ErrorKind::configuration, what); };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
  if (!(clip > 0.0)) fail("clip must be positive");
  if (!(c1 >= 0.0) || !(c2 >= 0.0)) fail("loss coefficients must be nonnegative");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (epochs_per_batch < 1) fail("epochs_per_batch must be positive");
  if (episodes_per_iter < 1) fail("episodes_per_iter must be positive");
  if (max_iter < 1) fail("max_iter must be positive");
  if (warmup_iters < 0) fail("warmup_iters must be nonnegative");
  if (hidden < 1) fail("hidden width must be positive");
  if (minibatch_size < 0) fail("minibatch_size must be nonnegative");
}

int stop_action(int num_models, int num_layers) { return num_models * num_layers; }

PathAction decode_action(int action, int num_models, int num_layers) {
  if (action == stop_action(num_models, num_layers)) return PathAction::stop();
  if (action < 0 || action > stop_action(num_models, num_layers)) {
    throw Error(ErrorKind::protocol, "action index " + std::to_string(action) + " out of range");
  }
  return PathAction::hop(action / num_layers + 1, action % num_layers + 1);
}

StepOutcome PathMdp::step(int action, std::span<const float> scale) {
  const PathAction a = decode_action(action, num_models(), num_layers());
  StepResult r = env_.step(state_, a, scale);
  state_ = std::move(r.state);
  return {r.reward, r.done};
}

Observation PathMdp::observe() const {
  return {state_.at_start, state_.at_start ? 0 : state_.current.model, state_.at_start ? 0 : state_.current.layer,
          state_.t};
}

std::vector<double> state_features(const Observation& obs, int num_models, int num_layers, int t_max) {
  std::vector<double> f(static_cast<std::size_t>(num_models + num_layers + 3), 0.0);
  f[static_cast<std::size_t>(obs.at_start ? 0 : obs.model)] = 1.0;
  f[static_cast<std::size_t>(num_models + 1 + (obs.at_start ? 0 : obs.layer))] = 1.0;
  f.back() = static_cast<double>(obs.t) / static_cast<double>(t_max);
  return f;
}

// ---------------------------------------------------------------------------
// MLP

std::size_t MlpShape::num_params() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    n += static_cast<std::size_t>(sizes[i + 1]) * static_cast<std::size_t>(sizes[i] + 1);
  }
  return n;
}

void mlp_forward(const MlpShape& shape, std::span<const double> params, std::span<const double> x, MlpCache& cache) {
  const std::size_t layers = shape.sizes.size() - 1;
  cache.acts.resize(layers + 1);
  cache.acts[0].assign(x.begin(), x.end());
  const double* p = params.data();
  for (std::size_t i = 0; i < layers; ++i) {
    const auto in = static_cast<std::size_t>(shape.sizes[i]);
    const auto out = static_cast<std::size_t>(shape.sizes[i + 1]);
    const auto& a = cache.acts[i];
    auto& z = cache.acts[i + 1];
    z.resize(out);
    const double* b = p + out * in;
    for (std::size_t r = 0; r < out; ++r) {
      const double* w = p + r * in;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t c = 0;
      for (; c + 4 <= in; c += 4) {
        s0 += w[c] * a[c];
        s1 += w[c + 1] * a[c + 1];
        s2 += w[c + 2] * a[c + 2];
        s3 += w[c + 3] * a[c + 3];
      }
      double s = b[r] + ((s0 + s1) + (s2 + s3));
      for (; c < in; ++c) s += w[c] * a[c];
      z[r] = i + 1 < layers ? std::tanh(s) : s;
    }
    p += out * (in + 1);
  }
}

void mlp_backward(const MlpShape& shape, std::span<const double> params, const MlpCache& cache,
                  std::span<const double> dout, std::span<double> grad) {
  const std::size_t layers = shape.sizes.size() - 1;
  std::vector<std::size_t> offsets(layers);
  std::size_t off = 0;
  for (std::size_t i = 0; i < layers; ++i) {
    offsets[i] = off;
    off += static_cast<std::size_t>(shape.sizes[i + 1]) * static_cast<std::size_t>(shape.sizes[i] + 1);
  }
  std::vector<double> delta(dout.begin(), dout.end());
  std::vector<double> prev;
  for (std::size_t i = layers; i-- > 0;) {
    const auto in = static_cast<std::size_t>(shape.sizes[i]);
    const auto out = static_cast<std::size_t>(shape.sizes[i + 1]);
    const double* w = params.data() + offsets[i];
    double* gw = grad.data() + offsets[i];
    double* gb = gw + out * in;
    const auto& a = cache.acts[i];
    prev.assign(in, 0.0);
    for (std::size_t r = 0; r < out; ++r) {
      const double d = delta[r];
      gb[r] += d;
      for (std::size_t c = 0; c < in; ++c) {
        gw[r * in + c] += d * a[c];
        prev[c] += w[r * in + c] * d;
      }
    }
    if (i > 0) {
      for (std::size_t c = 0; c < in; ++c) prev[c] *= 1.0 - a[c] * a[c];
    }
    delta.swap(prev);
  }
}

std::vector<double> mlp_init(const MlpShape& shape, std::uint64_t seed, double output_gain) {
  Rng rng(seed);
  std::vector<double> params;
  params.reserve(shape.num_params());
  const std::size_t layers = shape.sizes.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const auto in = static_cast<std::size_t>(shape.sizes[i]);
    const auto out = static_cast<std::size_t>(shape.sizes[i + 1]);
    const double sd = (i + 1 == layers ? output_gain : 1.0) / std::sqrt(static_cast<double>(in));
    for (std::size_t j = 0; j < out * in; ++j) params.push_back(rng.normal(0.0, sd));
    params.insert(params.end(), out, 0.0);
  }
  return params;
}

PolicyNetwork PolicyNetwork::create(int feature_dim, int num_actions, int scale_dim, int hidden, double init_log_std,
                                    std::uint64_t seed) {
  PolicyNetwork p;
  p.trunk.sizes = {feature_dim, hidden, hidden, num_actions + scale_dim};
  p.num_actions = num_actions;
  p.scale_dim = scale_dim;
  p.params = mlp_init(p.trunk, seed, 0.01);
  p.params.insert(p.params.end(), static_cast<std::size_t>(scale_dim), init_log_std);
  return p;
}

std::span<const double> PolicyNetwork::log_std() const {
  return std::span<const double>(params).subspan(trunk.num_params());
}

ValueNetwork ValueNetwork::create(int feature_dim, int hidden, std::uint64_t seed) {
  ValueNetwork v;
  v.net.sizes = {feature_dim, hidden, hidden, 1};
  v.params = mlp_init(v.net, seed, 1.0);
  return v;
}

double ValueNetwork::value(std::span<const double> features) const {
  MlpCache cache;
  mlp_forward(net, params, features, cache);
  return cache.acts.back()[0];
}

// ---------------------------------------------------------------------------
// Action distribution

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 ln(2 pi)

struct SampleEval {
  MlpCache cache;
  std::vector<double> probs;
  double lse = 0.0;
  double discrete_entropy = 0.0;
  double logp = 0.0;
};

bool masked(int action, int num_actions, bool stop_masked) { return stop_masked && action == num_actions - 1; }

SampleEval evaluate_sample(const PolicyNetwork& pol, std::span<const double> features, bool stop_masked) {
  SampleEval e;
  mlp_forward(pol.trunk, pol.params, features, e.cache);
  const auto& out = e.cache.acts.back();
  const int a_n = pol.num_actions;
  double mx = -HUGE_VAL;
  for (int j = 0; j < a_n; ++j) {
    if (!masked(j, a_n, stop_masked)) mx = std::max(mx, out[static_cast<std::size_t>(j)]);
  }
  double sum = 0.0;
  for (int j = 0; j < a_n; ++j) {
    if (!masked(j, a_n, stop_masked)) sum += std::exp(out[static_cast<std::size_t>(j)] - mx);
  }
  e.lse = mx + std::log(sum);
  e.probs.assign(static_cast<std::size_t>(a_n), 0.0);
  double weighted_logit = 0.0;
  for (int j = 0; j < a_n; ++j) {
    if (masked(j, a_n, stop_masked)) continue;
    const auto jj = static_cast<std::size_t>(j);
    e.probs[jj] = std::exp(out[jj] - e.lse);
    weighted_logit += e.probs[jj] * out[jj];
  }
  e.discrete_entropy = e.lse - weighted_logit;
  return e;
}

double gaussian_log_density(const PolicyNetwork& pol, const SampleEval& e, std::span<const double> offset) {
  const auto& out = e.cache.acts.back();
  const auto log_std = pol.log_std();
  double lp = 0.0;
  for (int j = 0; j < pol.scale_dim; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    const double z = (offset[jj] - out[static_cast<std::size_t>(pol.num_actions) + jj]) * std::exp(-log_std[jj]);
    lp += -0.5 * z * z - log_std[jj] - kHalfLog2Pi;
  }
  return lp;
}

double sample_log_prob(const PolicyNetwork& pol, const SampleEval& e, const Transition& tr) {
  const auto& out = e.cache.acts.back();
  double lp = out[static_cast<std::size_t>(tr.action)] - e.lse;
  if (!tr.offset.empty()) lp += gaussian_log_density(pol, e, tr.offset);
  return lp;
}

// Adds coef * d(log pi(a|s))/d(outputs) into dout and coef * d/d(log_std)
// into dlogstd.
void add_log_prob_grad(const PolicyNetwork& pol, const SampleEval& e, const Transition& tr, double coef,
                       std::span<double> dout, std::span<double> dlogstd) {
  for (int j = 0; j < pol.num_actions; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    dout[jj] += coef * ((j == tr.action ? 1.0 : 0.0) - e.probs[jj]);
  }
  if (tr.offset.empty()) return;
  const auto& out = e.cache.acts.back();
  const auto log_std = pol.log_std();
  for (int j = 0; j < pol.scale_dim; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    const double inv = std::exp(-log_std[jj]);
    const double diff = tr.offset[jj] - out[static_cast<std::size_t>(pol.num_actions) + jj];
    const double z = diff * inv;
    dout[static_cast<std::size_t>(pol.num_actions) + jj] += coef * diff * inv * inv;
    dlogstd[jj] += coef * (z * z - 1.0);
  }
}

double gaussian_entropy(const PolicyNetwork& pol) {
  double h = 0.0;
  for (const double ls : pol.log_std()) h += 0.5 + kHalfLog2Pi + ls;
  return h;
}

void add_entropy_grad(const PolicyNetwork& pol, const SampleEval& e, double coef, std::span<double> dout,
                      std::span<double> dlogstd) {
  const auto& out = e.cache.acts.back();
  for (int j = 0; j < pol.num_actions; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    if (e.probs[jj] == 0.0) continue;
    dout[jj] += coef * (-e.probs[jj] * (out[jj] - e.lse + e.discrete_entropy));
  }
  for (auto& g : dlogstd) g += coef;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(ErrorKind::numeric, std::string("non-finite ") + what);
}

}  // namespace

ActionDistribution policy_distribution(const PolicyNetwork& policy, std::span<const double> features,
                                       bool stop_masked) {
  const SampleEval e = evaluate_sample(policy, features, stop_masked);
  const auto& out = e.cache.acts.back();
  ActionDistribution d;
  d.probs = e.probs;
  d.mean.assign(out.begin() + policy.num_actions, out.end());
  return d;
}

double log_prob(const PolicyNetwork& policy, const Transition& tr) {
  return sample_log_prob(policy, evaluate_sample(policy, tr.features, tr.stop_masked), tr);
}

// ---------------------------------------------------------------------------
// Losses

Gae gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda) {
  if (values.size() != rewards.size() + 1) {
    throw Error(ErrorKind::domain, "gae needs one more value than rewards");
  }
  const std::size_t n = rewards.size();
  Gae g{std::vector<double>(n), std::vector<double>(n)};
  double next = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double zeta = rewards[t] + gamma * values[t + 1] - values[t];
    next = zeta + gamma * lambda * next;
    g.advantages[t] = next;
    g.returns[t] = values[t] + next;
  }
  return g;
}

namespace {

// Shared accumulation for the clipped surrogate and entropy terms.
void accumulate_policy_terms(const Batch& batch, const PolicyNetwork& pol, double clip, double w_clip,
                               double w_entropy, std::vector<double>& grad, double* clip_value,
                               double* entropy_value, bool need_grad = true) {
  const std::size_t trunk_n = pol.trunk.num_params();
  grad.assign(pol.params.size(), 0.0);
  std::span<double> g_trunk(grad.data(), trunk_n);
  std::span<double> g_logstd(grad.data() + trunk_n, static_cast<std::size_t>(pol.scale_dim));
  std::vector<double> dout(static_cast<std::size_t>(pol.num_actions + pol.scale_dim));
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double gauss_h = gaussian_entropy(pol);
  double obj_sum = 0.0;
  double ent_sum = 0.0;
  for (const auto& tr : batch) {
    const SampleEval e = evaluate_sample(pol, tr.features, tr.stop_masked);
    std::fill(dout.begin(), dout.end(), 0.0);
    const double ratio = std::exp(sample_log_prob(pol, e, tr) - tr.logprob);
    require_finite(ratio, "policy ratio");
    const double a = tr.advantage;
    const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
    obj_sum += std::min(ratio * a, clipped * a);
    ent_sum += e.discrete_entropy + gauss_h;
    if (!need_grad) continue;
    const bool flat = (a >= 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
    if (w_clip != 0.0 && !flat) add_log_prob_grad(pol, e, tr, -w_clip * inv_n * a * ratio, dout, g_logstd);
    if (w_entropy != 0.0) add_entropy_grad(pol, e, w_entropy * inv_n, dout, g_logstd);
    mlp_backward(pol.trunk, pol.params, e.cache, dout, g_trunk);
  }
  if (clip_value) *clip_value = -obj_sum * inv_n;
  if (entropy_value) *entropy_value = ent_sum * inv_n;
}

}  // namespace

LossValue policy_loss(const Batch& batch, const PolicyNetwork& policy, double clip) {
  if (batch.empty()) throw Error(ErrorKind::domain, "empty batch");
  LossValue r;
  accumulate_policy_terms(batch, policy, clip, 1.0, 0.0, r.grad, &r.value, nullptr);
  return r;
}

LossValue policy_entropy(const Batch& batch, const PolicyNetwork& policy) {
  if (batch.empty()) throw Error(ErrorKind::domain, "empty batch");
  LossValue r;
  accumulate_policy_terms(batch, policy, 1.0, 0.0, 1.0, r.grad, nullptr, &r.value);
  return r;
}

LossValue value_loss(const Batch& batch, const ValueNetwork& value) {
  if (batch.empty()) throw Error(ErrorKind::domain, "empty batch");
  LossValue r;
  r.grad.assign(value.params.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  MlpCache cache;
  for (const auto& tr : batch) {
    mlp_forward(value.net, value.params, tr.features, cache);
    const double diff = cache.acts.back()[0] - tr.target;
    r.value += diff * diff * inv_n;
    const double dout = 2.0 * diff * inv_n;
    mlp_backward(value.net, value.params, cache, {&dout, 1}, r.grad);
  }
  require_finite(r.value, "value loss");
  return r;
}

TotalLoss total_loss(const Batch& batch, const PolicyNetwork& policy, const ValueNetwork& value, double clip,
                     double c1, double c2) {
  if (batch.empty()) throw Error(ErrorKind::domain, "empty batch");
  TotalLoss t;
  accumulate_policy_terms(batch, policy, clip, 1.0, -c2, t.grad_policy, &t.policy, &t.entropy);
  LossValue v = value_loss(batch, value);
  t.value = v.value;
  t.grad_value = std::move(v.grad);
  for (auto& g : t.grad_value) g *= c1;
  t.total = t.policy + c1 * t.value - c2 * t.entropy;
  return t;
}

namespace {

// Loss values without gradients, for per-iteration logging.
TotalLoss loss_statistics(const Batch& batch, const PolicyNetwork& policy, const ValueNetwork& value, double clip,
                          double c1, double c2) {
  TotalLoss t;
  accumulate_policy_terms(batch, policy, clip, 1.0, -c2, t.grad_policy, &t.policy, &t.entropy, false);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& tr : batch) {
    const double diff = value.value(tr.features) - tr.target;
    t.value += diff * diff * inv_n;
  }
  t.total = t.policy + c1 * t.value - c2 * t.entropy;
  return t;
}

}  // namespace

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

int sample_categorical(std::span<const double> probs, double u) {
  double acc = 0.0;
  int last = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] == 0.0) continue;
    acc += probs[j];
    last = static_cast<int>(j);
    if (u < acc) return last;
  }
  return last;
}

struct Episode {
  Batch steps;
  double episode_return = 0.0;
  InferencePath path;
};

Episode rollout(Environment& env, const PolicyNetwork& pol, const ValueNetwork& val, Rng& rng) {
  Episode ep;
  env.reset();
  const int m = env.num_models();
  const int l = env.num_layers();
  const int stop = stop_action(m, l);
  std::vector<float> scale(static_cast<std::size_t>(env.scale_dim()));
  for (bool done = false; !done;) {
    const Observation obs = env.observe();
    Transition tr;
    tr.features = state_features(obs, m, l, env.t_max());
    tr.stop_masked = obs.t == 0;
    const SampleEval e = evaluate_sample(pol, tr.features, tr.stop_masked);
    tr.action = sample_categorical(e.probs, rng.uniform());
    std::fill(scale.begin(), scale.end(), 1.0f);
    if (tr.action != stop) {
      const auto& out = e.cache.acts.back();
      const auto log_std = pol.log_std();
      tr.offset.resize(scale.size());
      for (std::size_t j = 0; j < scale.size(); ++j) {
        tr.offset[j] = rng.normal(out[static_cast<std::size_t>(pol.num_actions) + j], std::exp(log_std[j]));
        scale[j] = static_cast<float>(1.0 + tr.offset[j]);
      }
    }
    tr.logprob = sample_log_prob(pol, e, tr);
    tr.value = val.value(tr.features);
    const StepOutcome out = env.step(tr.action, scale);
    tr.reward = out.reward;
    tr.done = out.done;
    done = out.done;
    ep.episode_return += out.reward;
    ep.steps.push_back(std::move(tr));
  }
  ep.path = env.current_path();
  return ep;
}

}  // namespace

TrainResult train(Environment& env, const PPOConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const int m = env.num_models();
  const int l = env.num_layers();
  const int feature_dim = m + l + 3;
  const int num_actions = m * l + 1;

  TrainResult result;
  result.policy = hooks.initial_policy
                      ? *hooks.initial_policy
                      : PolicyNetwork::create(feature_dim, num_actions, env.scale_dim(), cfg.hidden, cfg.init_log_std,
                                              derive_seed(cfg.seed, "policy_init"));
  result.value = hooks.initial_value ? *hooks.initial_value
                                     : ValueNetwork::create(feature_dim, cfg.hidden, derive_seed(cfg.seed, "value_init"));
  if (result.policy.num_actions != num_actions || result.policy.trunk.sizes.front() != feature_dim ||
      result.policy.scale_dim != env.scale_dim() || result.value.net.sizes.front() != feature_dim) {
    throw Error(ErrorKind::configuration, "warm-start networks do not match the environment");
  }
  Adam policy_opt(result.policy.params.size());
  Adam value_opt(result.value.params.size());
  Rng rng(derive_seed(cfg.seed, "rollout"));
  Rng shuffle_rng(derive_seed(cfg.seed, "minibatch"));
  bool have_best = false;

  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    Batch batch;
    double return_sum = 0.0;
    for (int e = 0; e < cfg.episodes_per_iter; ++e) {
      Episode ep = rollout(env, result.policy, result.value, rng);
      return_sum += ep.episode_return;
      if (!have_best || ep.episode_return > result.best_return) {
        have_best = true;
        result.best_return = ep.episode_return;
        result.best_path = ep.path;
      }
      std::vector<double> rewards, values;
      for (const auto& tr : ep.steps) {
        rewards.push_back(tr.reward);
        values.push_back(tr.value);
      }
      values.push_back(0.0);
      const Gae g = gae(rewards, values, cfg.gamma, cfg.gae_lambda);
      for (std::size_t t = 0; t < ep.steps.size(); ++t) {
        ep.steps[t].advantage = g.advantages[t];
        ep.steps[t].target = g.returns[t];
        batch.push_back(std::move(ep.steps[t]));
      }
    }
    if (cfg.normalize_advantages && batch.size() > 1) {
      double mean = 0.0;
      for (const auto& tr : batch) mean += tr.advantage;
      mean /= static_cast<double>(batch.size());
      double var = 0.0;
      for (const auto& tr : batch) var += (tr.advantage - mean) * (tr.advantage - mean);
      const double sd = std::sqrt(var / static_cast<double>(batch.size()));
      for (auto& tr : batch) tr.advantage = (tr.advantage - mean) / (sd + 1e-8);
    }

    IterationStats stats;
    stats.iter = iter;
    stats.mean_return = return_sum / cfg.episodes_per_iter;
    const TotalLoss before = loss_statistics(batch, result.policy, result.value, cfg.clip, cfg.c1, cfg.c2);
    if (!std::isfinite(before.total)) {
      throw Error(ErrorKind::training, "loss diverged at iteration " + std::to_string(iter));
    }
    stats.policy_loss = before.policy;
    stats.value_loss = before.value;
    stats.entropy = before.entropy;
    if (iter >= cfg.warmup_iters) {
      const std::size_t mb = cfg.minibatch_size == 0 ? batch.size() : static_cast<std::size_t>(cfg.minibatch_size);
      std::vector<std::size_t> order(batch.size());
      for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        for (std::size_t start = 0; start < order.size(); start += mb) {
          Batch part;
          for (std::size_t i = start; i < std::min(start + mb, order.size()); ++i) part.push_back(batch[order[i]]);
          const TotalLoss loss = total_loss(part, result.policy, result.value, cfg.clip, cfg.c1, cfg.c2);
          if (!std::isfinite(loss.total)) {
            throw Error(ErrorKind::training, "loss diverged at iteration " + std::to_string(iter));
          }
          policy_opt.step(result.policy.params, loss.grad_policy, cfg.learning_rate);
          value_opt.step(result.value.params, loss.grad_value, cfg.learning_rate);
        }
      }
    }
    stats.best_return = result.best_return;
    result.history.push_back(stats);
    if (hooks.on_snapshot && hooks.snapshot_every > 0 && (iter + 1) % hooks.snapshot_every == 0) {
      hooks.on_snapshot(iter + 1, result.best_path, result.best_return);
    }
  }
  return result;
}

void write_history_csv(const std::vector<IterationStats>& history, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + file.string() + "'");
  out << "iter,mean_return,best_return,policy_loss,value_loss,entropy\n";
  for (const auto& s : history) {
    out << fmt::format("{},{},{},{},{},{}\n", s.iter, s.mean_return, s.best_return, s.policy_loss, s.value_loss,
                       s.entropy);
  }
}

void save_policy(const PolicyNetwork& policy, const std::filesystem::path& file) {
  TensorContainer c;
  c.arch_json = json{{"kind", "ppo_policy"},
                     {"layer_sizes", policy.trunk.sizes},
                     {"num_actions", policy.num_actions},
                     {"scale_dim", policy.scale_dim}}
                    .dump();
  std::size_t off = 0;
  const auto& sizes = policy.trunk.sizes;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const auto in = static_cast<std::int64_t>(sizes[i]);
    const auto out = static_cast<std::int64_t>(sizes[i + 1]);
    Tensor w{{out, in}, {}};
    for (std::int64_t j = 0; j < out * in; ++j) w.data.push_back(static_cast<float>(policy.params[off++]));
    Tensor b{{out}, {}};
    for (std::int64_t j = 0; j < out; ++j) b.data.push_back(static_cast<float>(policy.params[off++]));
    c.tensors["trunk" + std::to_string(i + 1) + ".weight"] = std::move(w);
    c.tensors["trunk" + std::to_string(i + 1) + ".bias"] = std::move(b);
  }
  Tensor ls{{static_cast<std::int64_t>(policy.scale_dim)}, {}};
  for (const double v : policy.log_std()) ls.data.push_back(static_cast<float>(v));
  c.tensors["log_std"] = std::move(ls);
  write_bytes(encode_container(c), file);
}

PolicyNetwork load_policy(const std::filesystem::path& file) {
  const TensorContainer c = decode_container(read_bytes(file));
  PolicyNetwork p;
  try {
    const json arch = json::parse(c.arch_json);
    if (arch.at("kind").get<std::string>() != "ppo_policy") throw Error(ErrorKind::format, "not a policy checkpoint");
    p.trunk.sizes = arch.at("layer_sizes").get<std::vector<int>>();
    p.num_actions = arch.at("num_actions").get<int>();
    p.scale_dim = arch.at("scale_dim").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("invalid policy header: ") + e.what());
  }
  const auto get = [&](const std::string& name) -> const Tensor& {
    const auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw Error(ErrorKind::format, "policy checkpoint lacks '" + name + "'");
    return it->second;
  };
  for (std::size_t i = 0; i + 1 < p.trunk.sizes.size(); ++i) {
    for (const float v : get("trunk" + std::to_string(i + 1) + ".weight").data) p.params.push_back(v);
    for (const float v : get("trunk" + std::to_string(i + 1) + ".bias").data) p.params.push_back(v);
  }
  for (const float v : get("log_std").data) p.params.push_back(v);
  if (p.params.size() != p.trunk.num_params() + static_cast<std::size_t>(p.scale_dim)) {
    throw Error(ErrorKind::format, "policy checkpoint has the wrong parameter count");
  }
  return p;
}

}  // namespace hm3
