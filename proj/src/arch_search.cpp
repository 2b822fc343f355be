#include "hm3/arch_search.hpp"

#include <fstream>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "hm3/error.hpp"

namespace hm3 {

using nlohmann::json;

InferencePath identity_path(int model, int num_layers, int hidden_width) {
  InferencePath p;
  for (int l = 1; l <= num_layers; ++l) {
    p.hops.push_back({model, l});
    p.scales.emplace_back(static_cast<std::size_t>(hidden_width), 1.0f);
  }
  return p;
}

std::string_view to_string(RewardMode mode) { return mode == RewardMode::per_step ? "per_step" : "terminal"; }

RewardMode parse_reward_mode(std::string_view name) {
  if (name == "per_step") return RewardMode::per_step;
  if (name == "terminal") return RewardMode::terminal;
  throw Error(ErrorKind::configuration, "unknown reward mode '" + std::string(name) + "'");
}

void EnvConfig::validate() const {
  if (!(beta1 >= 0.0)) throw Error(ErrorKind::configuration, "beta1 must be nonnegative");
  if (t_max < 1) throw Error(ErrorKind::configuration, "t_max must be at least 1");
  if (probe_batch < 1) throw Error(ErrorKind::configuration, "probe_batch must be at least 1");
}

SearchZoo make_search_zoo(std::span<const Checkpoint> finetuned, const Checkpoint& merged) {
  SearchZoo z{{finetuned.begin(), finetuned.end()}, merged};
  z.models.push_back(merged);
  return z;
}

SearchZoo make_search_zoo_without_merge(std::span<const Checkpoint> finetuned, const Checkpoint& base) {
  return SearchZoo{{finetuned.begin(), finetuned.end()}, base};
}

double scalarize(std::span<const double> f, std::span<const double> lambda) {
  if (f.size() != lambda.size()) {
    throw Error(ErrorKind::domain, "scalarize: " + std::to_string(f.size()) + " metrics for " +
                                       std::to_string(lambda.size()) + " weights");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) s += lambda[k] * f[k];
  return s;
}

double scalarize(const MetricVector& f, const WeightVector& lambda) {
  return scalarize(f.values, lambda.components);
}

namespace {

void check_zoo(const EnvConfig& cfg, const SearchZoo& zoo) {
  const int k = zoo.anchor.arch().num_tasks();
  const int expected = cfg.include_merged ? k + 1 : k;
  if (static_cast<int>(zoo.models.size()) != expected) {
    throw Error(ErrorKind::configuration, "search zoo holds " + std::to_string(zoo.models.size()) +
                                              " models, expected " + std::to_string(expected));
  }
  for (const auto& m : zoo.models) {
    if (!m.arch().same_structure(zoo.anchor.arch())) {
      throw Error(ErrorKind::configuration, "model '" + m.arch().model_id + "' does not match the anchor");
    }
  }
}

}  // namespace

PathEnvironment::PathEnvironment(EnvConfig cfg, SearchZoo zoo, const TaskSuite& tasks)
    : cfg_(std::move(cfg)), zoo_(std::move(zoo)) {
  cfg_.validate();
  check_zoo(cfg_, zoo_);
  const ArchDescriptor& arch = zoo_.anchor.arch();
  num_layers_ = arch.num_layers;
  width_ = arch.hidden_width;
  num_tasks_ = arch.num_tasks();
  act_ = arch.activation;
  if (tasks.size() != num_tasks_) throw Error(ErrorKind::configuration, "task suite size does not match the zoo");
  if (cfg_.lambda.size() != num_tasks_) {
    throw Error(ErrorKind::configuration, "weight vector length does not match the task count");
  }

  input_ = dense_from(zoo_.anchor, input_weight_name(), input_bias_name());
  for (int k = 1; k <= num_tasks_; ++k) heads_.push_back(dense_from(zoo_.anchor, head_weight_name(k), head_bias_name(k)));
  for (const auto& m : zoo_.models) {
    std::vector<Dense> per_model;
    for (int l = 1; l <= num_layers_; ++l) per_model.push_back(dense_from(m, layer_weight_name(l), layer_bias_name(l)));
    layers_.push_back(std::move(per_model));
  }

  const auto w = static_cast<std::size_t>(width_);
  for (int k = 0; k < num_tasks_; ++k) {
    const Dataset& val = tasks[k].val;
    const auto idx = evaluation_subset(val.size(), cfg_.probe_batch, cfg_.eval_seed, k);
    std::vector<int> labels;
    std::vector<float> h0(idx.size() * w);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      labels.push_back(val.labels[static_cast<std::size_t>(idx[r])]);
      input_.apply(val.input(idx[r]), std::span<float>(h0).subspan(r * w, w));
    }
    probe_labels_.push_back(std::move(labels));
    probe_h0_.push_back(std::move(h0));
  }
}

PathState PathEnvironment::reset() const { return PathState{}; }

namespace {

using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXf>;

}  // namespace

// Probe rows are stored back to back, so each packed buffer is a column-major
// d_h x rows matrix.
void PathEnvironment::apply_hop(PathState& s, const LayerRef& ref, std::span<const float> scale) const {
  if (s.hidden.empty()) s.hidden = probe_h0_;
  const Dense& layer = layers_[static_cast<std::size_t>(ref.model - 1)][static_cast<std::size_t>(ref.layer - 1)];
  const Eigen::Index w = width_;
  const ConstMatrixMap weight(layer.weight_t.data(), w, w);
  const Eigen::Map<const Eigen::VectorXf> bias(layer.bias.data(), w);
  const Eigen::Map<const Eigen::VectorXf> sc(scale.data(), w);
  const Eigen::MatrixXf scaled_weight = weight * sc.asDiagonal();
  for (auto& packed : s.hidden) {
    Eigen::Map<Eigen::MatrixXf> h(packed.data(), w, static_cast<Eigen::Index>(packed.size()) / w);
    Eigen::MatrixXf z = scaled_weight * h;
    z.colwise() += bias;
    if (act_ == Activation::tanh) {
      h.array() += z.array().tanh();
    } else {
      h.array() += z.array().max(0.0f);
    }
  }
}

std::vector<double> PathEnvironment::probe_metrics(const PathState& state) const {
  const Eigen::Index w = width_;
  std::vector<double> out;
  for (int k = 0; k < num_tasks_; ++k) {
    const auto& packed = state.hidden.empty() ? probe_h0_[static_cast<std::size_t>(k)]
                                              : state.hidden[static_cast<std::size_t>(k)];
    const auto& labels = probe_labels_[static_cast<std::size_t>(k)];
    const Dense& head = heads_[static_cast<std::size_t>(k)];
    const ConstMatrixMap h(packed.data(), w, static_cast<Eigen::Index>(labels.size()));
    const Eigen::RowVectorXf logits = Eigen::Map<const Eigen::RowVectorXf>(head.weight_t.data(), w) * h;
    int correct = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      correct += (logits(static_cast<Eigen::Index>(r)) + head.bias[0] >= 0.0f ? 1 : -1) == labels[r] ? 1 : 0;
    }
    out.push_back(static_cast<double>(correct) / static_cast<double>(labels.size()));
  }
  return out;
}

StepResult PathEnvironment::step(const PathState& state, const PathAction& action, std::span<const float> scale) const {
  if (state.done) throw Error(ErrorKind::protocol, "step after the episode finished");
  StepResult r;
  r.state = state;
  PathState& next = r.state;
  if (action.is_stop()) {
    if (state.t == 0) throw Error(ErrorKind::protocol, "STOP before the first hop");
    r.metric_reward = scalarize(probe_metrics(next), cfg_.lambda.components);
    r.penalty = -cfg_.beta1 * next.t;
    next.done = true;
  } else {
    const LayerRef ref = action.target;
    if (ref.model < 1 || ref.model > num_models() || ref.layer < 1 || ref.layer > num_layers_) {
      throw Error(ErrorKind::protocol, "hop target (" + std::to_string(ref.model) + ", " + std::to_string(ref.layer) +
                                           ") is out of range");
    }
    if (static_cast<int>(scale.size()) != width_) throw Error(ErrorKind::protocol, "scale length must equal d_h");
    apply_hop(next, ref, scale);
    next.at_start = false;
    next.current = ref;
    next.path.hops.push_back(ref);
    next.path.scales.emplace_back(scale.begin(), scale.end());
    next.t += 1;
    next.done = next.t >= cfg_.t_max;
    if (cfg_.reward_mode == RewardMode::per_step || next.done) {
      r.metric_reward = scalarize(probe_metrics(next), cfg_.lambda.components);
    }
    r.penalty = -cfg_.beta1 * next.t;
  }
  r.reward = r.metric_reward + r.penalty;
  r.done = next.done;
  return r;
}

Network PathEnvironment::assemble(const InferencePath& path) const {
  if (path.hops.size() != path.scales.size()) throw Error(ErrorKind::assembly, "path has mismatched hops and scales");
  std::vector<ResidualHop> hops;
  for (std::size_t t = 0; t < path.hops.size(); ++t) {
    const LayerRef& ref = path.hops[t];
    if (ref.model < 1 || ref.model > num_models() || ref.layer < 1 || ref.layer > num_layers_) {
      throw Error(ErrorKind::assembly, "invalid layer reference (" + std::to_string(ref.model) + ", " +
                                           std::to_string(ref.layer) + ")");
    }
    hops.push_back({layers_[static_cast<std::size_t>(ref.model - 1)][static_cast<std::size_t>(ref.layer - 1)],
                    path.scales[t]});
  }
  return Network(act_, input_, std::move(hops), heads_);
}

PathState env_reset(const EnvConfig& cfg, const SearchZoo& zoo) {
  cfg.validate();
  check_zoo(cfg, zoo);
  return PathState{};
}

StepResult env_step(const PathState& state, const PathAction& action, std::span<const float> scale,
                    const PathEnvironment& env) {
  return env.step(state, action, scale);
}

Network assemble_model(const InferencePath& path, const SearchZoo& zoo) {
  if (path.hops.size() != path.scales.size()) throw Error(ErrorKind::assembly, "path has mismatched hops and scales");
  const ArchDescriptor& arch = zoo.anchor.arch();
  std::vector<ResidualHop> hops;
  for (std::size_t t = 0; t < path.hops.size(); ++t) {
    const LayerRef& ref = path.hops[t];
    if (ref.model < 1 || ref.model > static_cast<int>(zoo.models.size()) || ref.layer < 1 ||
        ref.layer > arch.num_layers) {
      throw Error(ErrorKind::assembly, "invalid layer reference (" + std::to_string(ref.model) + ", " +
                                           std::to_string(ref.layer) + ")");
    }
    const Checkpoint& m = zoo.models[static_cast<std::size_t>(ref.model - 1)];
    hops.push_back({dense_from(m, layer_weight_name(ref.layer), layer_bias_name(ref.layer)), path.scales[t]});
  }
  std::vector<Dense> heads;
  for (int k = 1; k <= arch.num_tasks(); ++k) heads.push_back(dense_from(zoo.anchor, head_weight_name(k), head_bias_name(k)));
  return Network(arch.activation, dense_from(zoo.anchor, input_weight_name(), input_bias_name()), std::move(hops),
                 std::move(heads));
}

std::string path_to_json(const PathRecord& record) {
  json hops = json::array();
  for (const auto& h : record.path.hops) hops.push_back({h.model, h.layer});
  const json j{{"hops", hops}, {"scales", record.path.scales}, {"lambda", record.lambda}, {"return", record.episode_return}};
  return j.dump();
}

PathRecord path_from_json(const std::string& text) {
  PathRecord r;
  try {
    const json j = json::parse(text);
    for (const auto& h : j.at("hops")) r.path.hops.push_back({h.at(0).get<int>(), h.at(1).get<int>()});
    r.path.scales = j.at("scales").get<std::vector<std::vector<float>>>();
    r.lambda = j.at("lambda").get<std::vector<double>>();
    r.episode_return = j.at("return").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("malformed path JSON: ") + e.what());
  }
  if (r.path.hops.size() != r.path.scales.size()) throw Error(ErrorKind::format, "path has mismatched hops and scales");
  return r;
}

void save_path(const PathRecord& record, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + file.string() + "'");
  out << path_to_json(record) << '\n';
}

PathRecord load_path(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + file.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return path_from_json(text);
}

}  // namespace hm3
