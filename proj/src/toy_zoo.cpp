#include "hm3/toy_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "hm3/error.hpp"
#include "hm3/rng.hpp"

namespace hm3 {

using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "val";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error(ErrorKind::configuration, "unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Task generation

namespace {

constexpr double kQuadraticCoupling = 1.5;
constexpr double kParityCoupling = 0.8;
constexpr int kParityArity = 2;

}  // namespace

TaskFunction::TaskFunction(const TaskSpec& spec) {
  family_ = static_cast<TaskFamily>((spec.task_id - 1) % 3);
  Rng rng(derive_seed(spec.generator_seed, "task_function"));
  constexpr int d = kToyInputDim;

  direction_.resize(d);
  double norm = 0.0;
  for (auto& w : direction_) {
    w = rng.normal();
    norm += w * w;
  }
  for (auto& w : direction_) w /= std::sqrt(norm);

  if (family_ == TaskFamily::quadratic) {
    std::vector<double> a(d * d);
    for (auto& v : a) v = rng.normal();
    quad_.assign(d * d, 0.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int r = 0; r < d; ++r) s += a[r * d + i] * a[r * d + j];
        quad_[i * d + j] = s / d;
      }
    }
    // Normalize so x'Qx - tr(Q) has unit variance under x ~ N(0, I).
    double trace = 0.0;
    double frob = 0.0;
    for (int i = 0; i < d; ++i) trace += quad_[i * d + i];
    for (const double q : quad_) frob += q * q;
    const double sd = std::sqrt(2.0 * frob);
    for (auto& q : quad_) q /= sd;
    quad_trace_ = trace / sd;
    coupling_ = kQuadraticCoupling;
  } else if (family_ == TaskFamily::parity) {
    std::vector<int> coords(d);
    std::iota(coords.begin(), coords.end(), 0);
    for (int i = 0; i < kParityArity; ++i) {
      const auto j = static_cast<int>(i + rng.below(static_cast<std::uint64_t>(d - i)));
      std::swap(coords[i], coords[j]);
      parity_coords_.push_back(coords[i]);
      thresholds_.push_back(rng.uniform(-0.3, 0.3));
    }
    coupling_ = kParityCoupling;
  }
}

double TaskFunction::score(std::span<const float> x) const {
  double s = 0.0;
  for (std::size_t i = 0; i < direction_.size(); ++i) s += direction_[i] * x[i];
  if (family_ == TaskFamily::quadratic) {
    const std::size_t d = direction_.size();
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) q += x[i] * quad_[i * d + j] * x[j];
    }
    s += coupling_ * (q - quad_trace_);
  } else if (family_ == TaskFamily::parity) {
    double sign = 1.0;
    for (std::size_t i = 0; i < parity_coords_.size(); ++i) {
      if (x[static_cast<std::size_t>(parity_coords_[i])] < thresholds_[i]) sign = -sign;
    }
    s += coupling_ * sign;
  }
  return s;
}

Dataset generate_split(const TaskSpec& spec, Split split, int size) {
  const TaskFunction fn(spec);
  Rng rng(derive_seed(spec.generator_seed, to_string(split)));
  Dataset ds;
  ds.inputs.reserve(static_cast<std::size_t>(size) * kToyInputDim);
  ds.labels.reserve(static_cast<std::size_t>(size));
  int positives_left = (size + 1) / 2;
  int negatives_left = size / 2;
  std::vector<float> x(kToyInputDim);
  while (positives_left + negatives_left > 0) {
    for (auto& v : x) v = static_cast<float>(rng.normal());
    const int y = fn.label(x);
    int& quota = y > 0 ? positives_left : negatives_left;
    if (quota == 0) continue;
    --quota;
    ds.inputs.insert(ds.inputs.end(), x.begin(), x.end());
    ds.labels.push_back(static_cast<std::int8_t>(y));
  }
  return ds;
}

const Dataset& TaskData::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return val;
}

TaskSuite::TaskSuite(std::vector<TaskSpec> specs) {
  tasks_.reserve(specs.size());
  for (auto& spec : specs) {
    if (spec.train_size < 1 || spec.val_size < 1 || spec.test_size < 1) {
      throw Error(ErrorKind::configuration, "task split sizes must be positive");
    }
    TaskData data{spec, generate_split(spec, Split::train, spec.train_size),
                  generate_split(spec, Split::val, spec.val_size), generate_split(spec, Split::test, spec.test_size)};
    tasks_.push_back(std::move(data));
  }
}

std::vector<TaskSpec> TaskSuite::specs() const {
  std::vector<TaskSpec> out;
  for (const auto& t : tasks_) out.push_back(t.spec);
  return out;
}

std::vector<TaskSpec> make_tasks(int num_tasks, std::uint64_t seed, TaskSizes sizes) {
  if (num_tasks < 2 || num_tasks > 6) throw Error(ErrorKind::domain, "task count must lie in [2, 6]");
  std::vector<TaskSpec> specs;
  for (int k = 1; k <= num_tasks; ++k) {
    specs.push_back({k, derive_seed(seed, "task", static_cast<std::uint64_t>(k)), sizes.train_size, sizes.val_size,
                     sizes.test_size, "accuracy"});
  }
  return specs;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<int> evaluation_subset(int n, int max_samples, std::uint64_t seed, int task_index) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (max_samples <= 0 || max_samples >= n) return idx;
  Rng rng(derive_seed(seed, "eval_subset", static_cast<std::uint64_t>(task_index)));
  for (int i = 0; i < max_samples; ++i) {
    const auto j = static_cast<int>(i + rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(max_samples));
  std::sort(idx.begin(), idx.end());
  return idx;
}

MetricVector evaluate(const Network& model, const TaskSuite& tasks, Split split, std::uint64_t seed,
                      int max_samples) {
  if (model.num_heads() != tasks.size()) {
    throw Error(ErrorKind::evaluation, "model has " + std::to_string(model.num_heads()) + " heads for " +
                                           std::to_string(tasks.size()) + " tasks");
  }
  if (model.input_dim() != kToyInputDim) throw Error(ErrorKind::evaluation, "model input width must be 8");
  MetricVector mv;
  mv.eval_seed = seed;
  mv.split = split;
  std::vector<float> h(static_cast<std::size_t>(model.hidden_width()));
  float logit = 0.0f;
  for (int k = 0; k < tasks.size(); ++k) {
    if (model.head_dim(k) != 1) throw Error(ErrorKind::evaluation, "binary tasks need single-logit heads");
    const Dataset& ds = tasks[k].split(split);
    const auto subset = evaluation_subset(ds.size(), max_samples, seed, k);
    int correct = 0;
    for (const int i : subset) {
      model.hidden(ds.input(i), h);
      model.head(k, h, {&logit, 1});
      const int pred = logit >= 0.0f ? 1 : -1;
      correct += pred == ds.labels[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    mv.values.push_back(static_cast<double>(correct) / static_cast<double>(subset.size()));
  }
  return mv;
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Row-major mirror of a checkpoint's parameters for SGD.
struct Params {
  int in = 0;
  int width = 0;
  int layers = 0;
  int tasks = 0;
  std::vector<float> w_in, b_in;
  std::vector<std::vector<float>> w, b;   // per layer
  std::vector<std::vector<float>> w_head; // per task, [width]
  std::vector<float> b_head;

  static Params zeros_like(const Params& p) {
    Params z = p;
    const auto clear = [](std::vector<float>& v) { std::fill(v.begin(), v.end(), 0.0f); };
    clear(z.w_in);
    clear(z.b_in);
    for (auto& v : z.w) clear(v);
    for (auto& v : z.b) clear(v);
    for (auto& v : z.w_head) clear(v);
    clear(z.b_head);
    return z;
  }
};

Params params_from(const Checkpoint& c) {
  const auto& a = c.arch();
  for (const int d : a.head_dims) {
    if (d != 1) throw Error(ErrorKind::training, "training supports single-logit heads only");
  }
  Params p;
  p.in = a.input_dim;
  p.width = a.hidden_width;
  p.layers = a.num_layers;
  p.tasks = a.num_tasks();
  p.w_in = c.tensor(input_weight_name()).data;
  p.b_in = c.tensor(input_bias_name()).data;
  for (int l = 1; l <= p.layers; ++l) {
    p.w.push_back(c.tensor(layer_weight_name(l)).data);
    p.b.push_back(c.tensor(layer_bias_name(l)).data);
  }
  for (int k = 1; k <= p.tasks; ++k) {
    p.w_head.push_back(c.tensor(head_weight_name(k)).data);
    p.b_head.push_back(c.tensor(head_bias_name(k)).data.at(0));
  }
  return p;
}

TensorMap tensors_from(const Params& p) {
  const auto h = static_cast<std::int64_t>(p.width);
  TensorMap t;
  t[input_weight_name()] = {{h, p.in}, p.w_in};
  t[input_bias_name()] = {{h}, p.b_in};
  for (int l = 1; l <= p.layers; ++l) {
    t[layer_weight_name(l)] = {{h, h}, p.w[static_cast<std::size_t>(l - 1)]};
    t[layer_bias_name(l)] = {{h}, p.b[static_cast<std::size_t>(l - 1)]};
  }
  for (int k = 1; k <= p.tasks; ++k) {
    t[head_weight_name(k)] = {{1, h}, p.w_head[static_cast<std::size_t>(k - 1)]};
    t[head_bias_name(k)] = {{1}, {p.b_head[static_cast<std::size_t>(k - 1)]}};
  }
  return t;
}

// Forward + backward of the logistic loss for one example on head `task`;
// accumulates into `g` and returns the loss.
class Backprop {
 public:
  explicit Backprop(const Params& p)
      : acts_(static_cast<std::size_t>(p.layers + 1), std::vector<float>(static_cast<std::size_t>(p.width))),
        deriv_(static_cast<std::size_t>(p.layers), std::vector<float>(static_cast<std::size_t>(p.width))),
        dh_(static_cast<std::size_t>(p.width)),
        dz_(static_cast<std::size_t>(p.width)) {}

  double run(const Params& p, Activation act, std::span<const float> x, int label, int task, Params& g) {
    const auto width = static_cast<std::size_t>(p.width);
    const auto in = static_cast<std::size_t>(p.in);
    auto& h0 = acts_[0];
    for (std::size_t i = 0; i < width; ++i) {
      float s = p.b_in[i];
      for (std::size_t j = 0; j < in; ++j) s += p.w_in[i * in + j] * x[j];
      h0[i] = s;
    }
    for (std::size_t l = 0; l < static_cast<std::size_t>(p.layers); ++l) {
      const auto& prev = acts_[l];
      auto& next = acts_[l + 1];
      const auto& w = p.w[l];
      for (std::size_t i = 0; i < width; ++i) {
        float z = p.b[l][i];
        for (std::size_t j = 0; j < width; ++j) z += w[i * width + j] * prev[j];
        const float a = activate(act, z);
        deriv_[l][i] = act == Activation::relu ? (z > 0.0f ? 1.0f : 0.0f) : 1.0f - a * a;
        next[i] = prev[i] + a;
      }
    }
    const auto k = static_cast<std::size_t>(task);
    const auto& top = acts_[static_cast<std::size_t>(p.layers)];
    float logit = p.b_head[k];
    for (std::size_t i = 0; i < width; ++i) logit += p.w_head[k][i] * top[i];

    const double target = label > 0 ? 1.0 : 0.0;
    const double lg = logit;
    const double loss = std::max(lg, 0.0) + std::log1p(std::exp(-std::abs(lg))) - target * lg;
    const auto dlogit = static_cast<float>(1.0 / (1.0 + std::exp(-lg)) - target);

    g.b_head[k] += dlogit;
    for (std::size_t i = 0; i < width; ++i) {
      g.w_head[k][i] += dlogit * top[i];
      dh_[i] = dlogit * p.w_head[k][i];
    }
    for (std::size_t l = static_cast<std::size_t>(p.layers); l-- > 0;) {
      const auto& prev = acts_[l];
      const auto& w = p.w[l];
      auto& gw = g.w[l];
      for (std::size_t i = 0; i < width; ++i) {
        dz_[i] = dh_[i] * deriv_[l][i];
        g.b[l][i] += dz_[i];
      }
      for (std::size_t i = 0; i < width; ++i) {
        const float dzi = dz_[i];
        for (std::size_t j = 0; j < width; ++j) {
          gw[i * width + j] += dzi * prev[j];
          dh_[j] += w[i * width + j] * dzi;
        }
      }
    }
    for (std::size_t i = 0; i < width; ++i) {
      g.b_in[i] += dh_[i];
      for (std::size_t j = 0; j < in; ++j) g.w_in[i * in + j] += dh_[i] * x[j];
    }
    return loss;
  }

 private:
  std::vector<std::vector<float>> acts_;
  std::vector<std::vector<float>> deriv_;
  std::vector<float> dh_;
  std::vector<float> dz_;
};

void sgd_update(Params& p, const Params& g, float step) {
  const auto axpy = [step](std::vector<float>& v, const std::vector<float>& d) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= step * d[i];
  };
  axpy(p.w_in, g.w_in);
  axpy(p.b_in, g.b_in);
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    axpy(p.w[l], g.w[l]);
    axpy(p.b[l], g.b[l]);
  }
  for (std::size_t k = 0; k < p.w_head.size(); ++k) axpy(p.w_head[k], g.w_head[k]);
  axpy(p.b_head, g.b_head);
}

Params run_sgd(Params p, Activation act, const TaskSuite& tasks, std::span<const int> active_tasks,
               const TrainConfig& cfg, std::uint64_t seed) {
  if (cfg.steps < 0 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0)) {
    throw Error(ErrorKind::configuration, "invalid training configuration");
  }
  Rng rng(derive_seed(seed, "batches"));
  Backprop bp(p);
  const int per_step = static_cast<int>(active_tasks.size()) * cfg.batch_size;
  const auto step_size = static_cast<float>(cfg.learning_rate / per_step);
  for (int step = 0; step < cfg.steps; ++step) {
    Params g = Params::zeros_like(p);
    double loss = 0.0;
    for (const int k : active_tasks) {
      const Dataset& train = tasks[k].train;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto i = static_cast<int>(rng.below(static_cast<std::uint64_t>(train.size())));
        loss += bp.run(p, act, train.input(i), train.labels[static_cast<std::size_t>(i)], k, g);
      }
    }
    if (!std::isfinite(loss)) throw Error(ErrorKind::training, "loss diverged at step " + std::to_string(step));
    sgd_update(p, g, step_size);
  }
  return p;
}

}  // namespace

Checkpoint init_checkpoint(const ArchDescriptor& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  TensorMap tensors;
  for (const auto& [name, shape] : expected_tensor_shapes(arch)) {
    Tensor t{shape, {}};
    std::size_t n = 1;
    for (const auto d : shape) n *= static_cast<std::size_t>(d);
    t.data.assign(n, 0.0f);
    if (shape.size() == 2) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, sd));
    }
    tensors.emplace(name, std::move(t));
  }
  return Checkpoint(arch, std::move(tensors), {});
}

Checkpoint train_base(const ArchDescriptor& arch, const TaskSuite& tasks, const TrainConfig& cfg,
                      std::uint64_t seed) {
  if (arch.num_tasks() != tasks.size()) {
    throw Error(ErrorKind::configuration, "architecture heads do not match the task count");
  }
  ArchDescriptor a = arch;
  if (a.model_id.empty()) a.model_id = "base";
  const Checkpoint init = init_checkpoint(a, derive_seed(seed, "init"));
  if (cfg.steps == 0) return init;
  std::vector<int> all(static_cast<std::size_t>(tasks.size()));
  std::iota(all.begin(), all.end(), 0);
  const Params trained = run_sgd(params_from(init), a.activation, tasks, all, cfg, seed);
  return Checkpoint(a, tensors_from(trained), {{"role", "base"}});
}

Checkpoint finetune_task(const Checkpoint& base, const TaskSuite& tasks, int task_id, const TrainConfig& cfg,
                         std::uint64_t seed) {
  if (task_id < 1 || task_id > tasks.size()) throw Error(ErrorKind::domain, "task id out of range");
  if (base.arch().num_tasks() != tasks.size()) {
    throw Error(ErrorKind::configuration, "architecture heads do not match the task count");
  }
  if (cfg.steps == 0) return base;
  ArchDescriptor a = base.arch();
  a.base_id = base.arch().model_id;
  a.model_id = "task" + std::to_string(task_id);
  const int active[] = {task_id - 1};
  const Params tuned = run_sgd(params_from(base), a.activation, tasks, active, cfg, seed);
  return Checkpoint(a, tensors_from(tuned), {{"role", "finetuned"}, {"task_id", std::to_string(task_id)}});
}

// ---------------------------------------------------------------------------
// Zoo

ArchDescriptor ZooConfig::arch() const {
  ArchDescriptor a;
  a.num_layers = num_layers;
  a.hidden_width = hidden_width;
  a.input_dim = kToyInputDim;
  a.activation = activation;
  a.head_dims.assign(static_cast<std::size_t>(num_tasks), 1);
  a.model_id = "base";
  return a;
}

Zoo build_zoo(const ZooConfig& cfg, std::uint64_t seed) {
  TaskSuite tasks(make_tasks(cfg.num_tasks, derive_seed(seed, "tasks"), cfg.sizes));
  Checkpoint base = train_base(cfg.arch(), tasks, cfg.base_train, derive_seed(seed, "base"));
  std::vector<Checkpoint> finetuned;
  for (int k = 1; k <= cfg.num_tasks; ++k) {
    finetuned.push_back(
        finetune_task(base, tasks, k, cfg.finetune, derive_seed(seed, "finetune", static_cast<std::uint64_t>(k))));
  }
  return Zoo{std::move(tasks), std::move(base), std::move(finetuned)};
}

void save_zoo(const Zoo& zoo, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  save_checkpoint(zoo.base, dir / "base.ckpt");
  for (std::size_t k = 0; k < zoo.finetuned.size(); ++k) {
    save_checkpoint(zoo.finetuned[k], dir / ("task" + std::to_string(k + 1) + ".ckpt"));
  }
  json tasks = json::array();
  for (const auto& s : zoo.tasks.specs()) {
    tasks.push_back(json{{"task_id", s.task_id},       {"generator_seed", s.generator_seed},
                         {"train_size", s.train_size}, {"val_size", s.val_size},
                         {"test_size", s.test_size},   {"metric_name", s.metric_name}});
  }
  const json manifest{{"seed", seed}, {"num_tasks", zoo.tasks.size()}, {"tasks", tasks}};
  std::ofstream out(dir / "tasks.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + (dir / "tasks.json").string() + "'");
  out << manifest.dump(2) << '\n';
}

Zoo load_zoo(const std::filesystem::path& dir) {
  std::ifstream in(dir / "tasks.json");
  if (!in) throw Error(ErrorKind::io, "cannot open '" + (dir / "tasks.json").string() + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::configuration, std::string("malformed tasks.json: ") + e.what());
  }
  std::vector<TaskSpec> specs;
  for (const auto& t : manifest.at("tasks")) {
    specs.push_back({t.at("task_id").get<int>(), t.at("generator_seed").get<std::uint64_t>(),
                     t.at("train_size").get<int>(), t.at("val_size").get<int>(), t.at("test_size").get<int>(),
                     t.at("metric_name").get<std::string>()});
  }
  TaskSuite tasks(std::move(specs));
  Checkpoint base = load_checkpoint(dir / "base.ckpt");
  std::vector<Checkpoint> finetuned;
  for (int k = 1; k <= tasks.size(); ++k) finetuned.push_back(load_checkpoint(dir / ("task" + std::to_string(k) + ".ckpt")));
  return Zoo{std::move(tasks), std::move(base), std::move(finetuned)};
}

}  // namespace hm3
