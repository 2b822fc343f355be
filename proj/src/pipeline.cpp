#include "hm3/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "hm3/error.hpp"
#include "hm3/rng.hpp"
#include "hm3/simplex_weights.hpp"

namespace hm3 {

using nlohmann::json;

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_arch: return "no_arch";
    case Ablation::no_para: return "no_para";
  }
  return "full";
}

Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::full;
  if (name == "no_arch") return Ablation::no_arch;
  if (name == "no_para") return Ablation::no_para;
  throw Error(ErrorKind::configuration, "unknown ablation '" + std::string(name) + "'");
}

StageError::StageError(std::string stage, const Error& cause)
    : Error(cause.kind(), "stage " + stage + " failed: " + cause.what(), Verbatim{}), stage_(std::move(stage)) {}

void RunConfig::validate() const {
  const auto fail = [](const std::string& what) { throw Error(ErrorKind::configuration, what); };
  if (num_tasks < 2 || num_tasks > 6) fail("num_tasks must lie in [2, 6]");
  if (divisions < 1) fail("divisions must be positive");
  if (zoo.num_tasks != num_tasks) fail("zoo.num_tasks must equal num_tasks");
  if (zoo.num_layers < 1 || zoo.hidden_width < 1) fail("zoo layers and width must be positive");
  if (merge.method == MergeMethod::average || merge.method == MergeMethod::soup) {
    fail("the parameter-level merge must be delta-based");
  }
  try {
    MergeConfig probe = merge;
    probe.weight_vector = uniform_weights(num_tasks);
    probe.validate();
    EnvConfig e = env;
    if (e.t_max <= 0) e.t_max = 1;
    e.validate();
    ppo.validate();
  } catch (const Error& err) {
    fail(err.what());
  }
}

// ---------------------------------------------------------------------------
// TOML configuration

namespace {

class TableReader {
 public:
  TableReader(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!table_) return;
    const toml::node* node = table_->get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      const auto v = node->value_exact<bool>();
      if (!v) bad(key, "a boolean");
      out = *v;
    } else if constexpr (std::is_floating_point_v<T>) {
      const auto v = node->value<double>();
      if (!v) bad(key, "a number");
      out = *v;
    } else if constexpr (std::is_integral_v<T>) {
      const auto v = node->value_exact<std::int64_t>();
      if (!v) bad(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (*v < 0) bad(key, "a nonnegative integer");
      }
      out = static_cast<T>(*v);
    } else {
      const auto v = node->value_exact<std::string>();
      if (!v) bad(key, "a string");
      out = *v;
    }
  }

  void allow(const char* key) { seen_.insert(key); }

  void finish() const {
    if (!table_) return;
    for (const auto& [k, _] : *table_) {
      if (!seen_.count(std::string(k.str()))) {
        throw Error(ErrorKind::configuration, "unknown key '" + prefix() + std::string(k.str()) + "'");
      }
    }
  }

 private:
  [[noreturn]] void bad(const char* key, const char* what) const {
    throw Error(ErrorKind::configuration, "'" + prefix() + key + "' must be " + what);
  }
  std::string prefix() const { return name_.empty() ? "" : name_ + "."; }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> seen_;
};

const toml::table* subtable(const toml::table& root, const char* name) {
  const toml::node* n = root.get(name);
  if (!n) return nullptr;
  if (!n->is_table()) throw Error(ErrorKind::configuration, std::string("'") + name + "' must be a table");
  return n->as_table();
}

}  // namespace

RunConfig parse_run_config(const std::string& toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw Error(ErrorKind::configuration,
                fmt::format("TOML parse error at line {}: {}", e.source().begin.line, e.description()));
  }
  RunConfig c;
  std::string s;

  TableReader top(&root, "");
  top.read("num_tasks", c.num_tasks);
  top.read("divisions", c.divisions);
  top.read("master_seed", c.master_seed);
  s = std::string(to_string(c.ablation));
  top.read("ablation", s);
  c.ablation = parse_ablation(s);
  s = std::string(to_string(c.eval_split));
  top.read("eval_split", s);
  c.eval_split = parse_split(s);
  s = c.out_dir.string();
  top.read("out_dir", s);
  c.out_dir = s;
  s = c.zoo_dir.string();
  top.read("zoo_dir", s);
  c.zoo_dir = s;
  top.read("warm_start", c.warm_start);
  for (const char* t : {"zoo", "merge", "env", "ppo"}) top.allow(t);
  c.zoo.num_tasks = c.num_tasks;

  TableReader zoo(subtable(root, "zoo"), "zoo");
  zoo.read("num_layers", c.zoo.num_layers);
  zoo.read("hidden_width", c.zoo.hidden_width);
  s = std::string(to_string(c.zoo.activation));
  zoo.read("activation", s);
  c.zoo.activation = parse_activation(s);
  zoo.read("train_size", c.zoo.sizes.train_size);
  zoo.read("val_size", c.zoo.sizes.val_size);
  zoo.read("test_size", c.zoo.sizes.test_size);
  zoo.read("base_steps", c.zoo.base_train.steps);
  zoo.read("base_learning_rate", c.zoo.base_train.learning_rate);
  zoo.read("base_batch_size", c.zoo.base_train.batch_size);
  zoo.read("finetune_steps", c.zoo.finetune.steps);
  zoo.read("finetune_learning_rate", c.zoo.finetune.learning_rate);
  zoo.read("finetune_batch_size", c.zoo.finetune.batch_size);
  zoo.finish();

  TableReader merge(subtable(root, "merge"), "merge");
  s = std::string(to_string(c.merge.method));
  merge.read("method", s);
  c.merge.method = parse_merge_method(s);
  merge.read("drop_prob", c.merge.drop_prob);
  merge.read("keep_fraction", c.merge.keep_fraction);
  merge.read("lambda_scalar", c.merge.lambda_scalar);
  s = std::string(to_string(c.merge.trim_scope));
  merge.read("trim_scope", s);
  c.merge.trim_scope = parse_trim_scope(s);
  s = std::string(to_string(c.merge.lambda_placement));
  merge.read("lambda_placement", s);
  c.merge.lambda_placement = parse_lambda_placement(s);
  merge.finish();

  TableReader env(subtable(root, "env"), "env");
  env.read("beta1", c.env.beta1);
  c.env.t_max = 0;
  env.read("t_max", c.env.t_max);
  s = std::string(to_string(c.env.reward_mode));
  env.read("reward_mode", s);
  c.env.reward_mode = parse_reward_mode(s);
  env.read("probe_batch", c.env.probe_batch);
  env.finish();

  TableReader ppo(subtable(root, "ppo"), "ppo");
  ppo.read("gamma", c.ppo.gamma);
  ppo.read("gae_lambda", c.ppo.gae_lambda);
  ppo.read("clip", c.ppo.clip);
  ppo.read("c1", c.ppo.c1);
  ppo.read("c2", c.ppo.c2);
  ppo.read("learning_rate", c.ppo.learning_rate);
  ppo.read("epochs_per_batch", c.ppo.epochs_per_batch);
  ppo.read("episodes_per_iter", c.ppo.episodes_per_iter);
  ppo.read("minibatch_size", c.ppo.minibatch_size);
  ppo.read("max_iter", c.ppo.max_iter);
  ppo.read("warmup_iters", c.ppo.warmup_iters);
  ppo.read("hidden", c.ppo.hidden);
  ppo.read("init_log_std", c.ppo.init_log_std);
  ppo.read("normalize_advantages", c.ppo.normalize_advantages);
  ppo.finish();

  top.finish();
  c.validate();
  return c;
}

MergeJob parse_merge_job(const std::string& toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw Error(ErrorKind::configuration,
                fmt::format("TOML parse error at line {}: {}", e.source().begin.line, e.description()));
  }
  MergeJob job;
  MergeConfig& m = job.merge;
  std::string s;
  TableReader r(&root, "");
  s = std::string(to_string(m.method));
  r.read("method", s);
  m.method = parse_merge_method(s);
  r.read("drop_prob", m.drop_prob);
  r.read("keep_fraction", m.keep_fraction);
  r.read("rng_seed", m.rng_seed);
  r.read("lambda_scalar", m.lambda_scalar);
  s = std::string(to_string(m.trim_scope));
  r.read("trim_scope", s);
  m.trim_scope = parse_trim_scope(s);
  s = std::string(to_string(m.lambda_placement));
  r.read("lambda_placement", s);
  m.lambda_placement = parse_lambda_placement(s);
  s.clear();
  r.read("zoo_dir", s);
  job.zoo_dir = s;
  r.allow("weight_vector");
  if (const toml::node* node = root.get("weight_vector")) {
    const toml::array* arr = node->as_array();
    if (!arr) throw Error(ErrorKind::configuration, "'weight_vector' must be an array of numbers");
    std::vector<double> comps;
    for (const auto& el : *arr) {
      const auto v = el.value<double>();
      if (!v) throw Error(ErrorKind::configuration, "'weight_vector' must be an array of numbers");
      comps.push_back(*v);
    }
    try {
      m.weight_vector = make_weight_vector(comps);
    } catch (const Error& e) {
      throw Error(ErrorKind::configuration, std::string("weight_vector: ") + e.what());
    }
  }
  r.finish();
  try {
    m.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::configuration, e.what());
  }
  return job;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::configuration, "cannot open config '" + file.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

namespace {

std::string toml_string(const std::string& s) {
  std::ostringstream os;
  os << toml::value<std::string>(s);
  return os.str();
}

std::string toml_double(double v) {
  std::string s = fmt::format("{}", v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string semantic_toml(const RunConfig& c, bool with_out_dir) {
  std::string t;
  t += fmt::format("num_tasks = {}\ndivisions = {}\nmaster_seed = {}\n", c.num_tasks, c.divisions, c.master_seed);
  t += fmt::format("ablation = \"{}\"\neval_split = \"{}\"\n", to_string(c.ablation), to_string(c.eval_split));
  t += fmt::format("warm_start = {}\n", c.warm_start);
  if (!c.zoo_dir.empty()) t += "zoo_dir = " + toml_string(c.zoo_dir.string()) + "\n";
  if (with_out_dir) t += "out_dir = " + toml_string(c.out_dir.string()) + "\n";
  const auto& z = c.zoo;
  t += fmt::format("\n[zoo]\nnum_layers = {}\nhidden_width = {}\nactivation = \"{}\"\n", z.num_layers,
                   z.hidden_width, to_string(z.activation));
  t += fmt::format("train_size = {}\nval_size = {}\ntest_size = {}\n", z.sizes.train_size, z.sizes.val_size,
                   z.sizes.test_size);
  t += fmt::format("base_steps = {}\nbase_learning_rate = {}\nbase_batch_size = {}\n", z.base_train.steps,
                   toml_double(z.base_train.learning_rate), z.base_train.batch_size);
  t += fmt::format("finetune_steps = {}\nfinetune_learning_rate = {}\nfinetune_batch_size = {}\n", z.finetune.steps,
                   toml_double(z.finetune.learning_rate), z.finetune.batch_size);
  const auto& m = c.merge;
  t += fmt::format("\n[merge]\nmethod = \"{}\"\ndrop_prob = {}\nkeep_fraction = {}\nlambda_scalar = {}\n",
                   to_string(m.method), toml_double(m.drop_prob), toml_double(m.keep_fraction),
                   toml_double(m.lambda_scalar));
  t += fmt::format("trim_scope = \"{}\"\nlambda_placement = \"{}\"\n", to_string(m.trim_scope),
                   to_string(m.lambda_placement));
  const auto& e = c.env;
  t += fmt::format("\n[env]\nbeta1 = {}\nt_max = {}\nreward_mode = \"{}\"\nprobe_batch = {}\n", toml_double(e.beta1),
                   e.t_max, to_string(e.reward_mode), e.probe_batch);
  const auto& p = c.ppo;
  t += fmt::format("\n[ppo]\ngamma = {}\ngae_lambda = {}\nclip = {}\nc1 = {}\nc2 = {}\nlearning_rate = {}\n",
                   toml_double(p.gamma), toml_double(p.gae_lambda), toml_double(p.clip), toml_double(p.c1),
                   toml_double(p.c2), toml_double(p.learning_rate));
  t += fmt::format("epochs_per_batch = {}\nepisodes_per_iter = {}\nminibatch_size = {}\nmax_iter = {}\n",
                   p.epochs_per_batch, p.episodes_per_iter, p.minibatch_size, p.max_iter);
  t += fmt::format("warmup_iters = {}\nhidden = {}\ninit_log_std = {}\nnormalize_advantages = {}\n", p.warmup_iters,
                   p.hidden, toml_double(p.init_log_std), p.normalize_advantages);
  return t;
}

}  // namespace

std::string to_toml(const RunConfig& cfg) { return semantic_toml(cfg, true); }

std::string config_hash(const RunConfig& cfg) {
  return fmt::format("{:016x}", hash_string(semantic_toml(cfg, false)));
}

// ---------------------------------------------------------------------------
// Metrics files

std::vector<LabelledRow> read_metrics_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + file.string() + "'");
  std::vector<LabelledRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    LabelledRow row;
    std::getline(ss, row.label, ',');
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.values.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorKind::format, fmt::format("{}:{}: '{}' is not a number", file.string(), line_no, cell));
      }
    }
    if (!rows.empty() && rows.front().values.size() != row.values.size()) {
      throw Error(ErrorKind::format, fmt::format("{}:{}: inconsistent column count", file.string(), line_no));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_metrics_csv(const std::vector<LabelledRow>& rows, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + file.string() + "'");
  for (const auto& r : rows) {
    out << r.label;
    for (const double v : r.values) out << ',' << fmt::format("{}", v);
    out << '\n';
  }
}

double singleton_hv(const std::vector<double>& accuracies) {
  const ObjectivePoint p{accuracies, Orientation::maximize, "", false};
  return hypervolume(normalized_front(std::span<const ObjectivePoint>(&p, 1)));
}

int worker_count() {
  if (const char* env = std::getenv("HM3_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const std::exception& e) {
    throw StageError(name, Error(ErrorKind::io, e.what()));
  }
}

std::filesystem::path lambda_dir(const std::filesystem::path& out, int index) {
  return out / ("lambda_" + std::to_string(index));
}

std::uint64_t eval_seed(const RunConfig& cfg) { return derive_seed(cfg.master_seed, "eval"); }

EnvConfig env_for(const RunConfig& cfg, const WeightVector& w) {
  EnvConfig e = cfg.env;
  if (e.t_max <= 0) e.t_max = 2 * cfg.zoo.num_layers;
  e.lambda = w;
  e.eval_seed = derive_seed(cfg.master_seed, "probe", static_cast<std::uint64_t>(w.index));
  e.include_merged = cfg.ablation != Ablation::no_para;
  return e;
}

SearchZoo search_zoo_for(const RunConfig& cfg, const Zoo& zoo, const std::optional<Checkpoint>& merged) {
  if (cfg.ablation == Ablation::no_para) return make_search_zoo_without_merge(zoo.finetuned, zoo.base);
  return make_search_zoo(zoo.finetuned, *merged);
}

Checkpoint parameter_merge(const RunConfig& cfg, const Zoo& zoo, const WeightVector& w) {
  MergeConfig m = cfg.merge;
  m.weight_vector = w;
  m.rng_seed = derive_seed(cfg.master_seed, "merge", static_cast<std::uint64_t>(w.index));
  return merge_models(m, zoo.base, zoo.finetuned);
}

std::vector<double> evaluate_path(const PathEnvironment& env, const InferencePath& path, const TaskSuite& tasks,
                                  const RunConfig& cfg) {
  return evaluate(env.assemble(path), tasks, cfg.eval_split, eval_seed(cfg)).values;
}

void save_snapshots(const std::vector<std::pair<int, PathRecord>>& snaps, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + file.string() + "'");
  for (const auto& [it, rec] : snaps) out << it << ' ' << path_to_json(rec) << '\n';
}

std::vector<std::pair<int, PathRecord>> load_snapshots(const std::filesystem::path& file) {
  std::vector<std::pair<int, PathRecord>> out;
  std::ifstream in(file);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw Error(ErrorKind::format, "malformed snapshot line");
    out.emplace_back(std::stoi(line.substr(0, sp)), path_from_json(line.substr(sp + 1)));
  }
  return out;
}

struct LambdaOutcome {
  LambdaRecord record;
  std::optional<PolicyNetwork> policy;
  std::optional<ValueNetwork> value;
};

LambdaOutcome run_lambda_outcome(const RunConfig& cfg, const Zoo& zoo, const WeightVector& w,
                         const std::optional<PolicyNetwork>& warm_policy,
                         const std::optional<ValueNetwork>& warm_value) {
  const auto dir = lambda_dir(cfg.out_dir, w.index);
  std::filesystem::create_directories(dir);
  LambdaOutcome out;
  LambdaRecord& rec = out.record;
  rec.lambda = w;
  const std::string tag = "lambda_" + std::to_string(w.index);

  std::optional<Checkpoint> merged;
  if (cfg.ablation != Ablation::no_para) {
    merged = stage("merge[" + tag + "]", [&] {
      Checkpoint c = parameter_merge(cfg, zoo, w);
      save_checkpoint(c, dir / "merged.ckpt");
      return c;
    });
    rec.param_metrics = stage("evaluate[" + tag + "]", [&] {
      return evaluate(network_from_checkpoint(*merged), zoo.tasks, cfg.eval_split, eval_seed(cfg)).values;
    });
  }

  if (cfg.ablation != Ablation::no_arch) {
    stage("search[" + tag + "]", [&] {
      const PathEnvironment env(env_for(cfg, w), search_zoo_for(cfg, zoo, merged), zoo.tasks);
      PathMdp mdp(env);
      PPOConfig ppo = cfg.ppo;
      ppo.seed = derive_seed(cfg.master_seed, "ppo", static_cast<std::uint64_t>(w.index));
      TrainHooks hooks;
      hooks.initial_policy = warm_policy;
      hooks.initial_value = warm_value;
      std::vector<std::pair<int, PathRecord>> snaps;
      hooks.on_snapshot = [&](int iter, const InferencePath& best, double ret) {
        snaps.emplace_back(iter, PathRecord{best, w.components, ret});
      };
      TrainResult result = train(mdp, ppo, hooks);

      const PathRecord best{result.best_path, w.components, result.best_return};
      save_path(best, dir / "best_path.json");
      save_snapshots(snaps, dir / "snapshots.jsonl");
      write_history_csv(result.history, dir / "history.csv");
      save_policy(result.policy, dir / "policy.ckpt");

      rec.path = best;
      rec.best_return = result.best_return;
      rec.path_length = result.best_path.length();
      rec.path_metrics = evaluate_path(env, result.best_path, zoo.tasks, cfg);
      const InferencePath* last = nullptr;
      for (const auto& [iter, snap] : snaps) {
        if (last && *last == snap.path) {
          rec.snapshots.emplace_back(iter, rec.snapshots.back().second);
        } else {
          rec.snapshots.emplace_back(iter, evaluate_path(env, snap.path, zoo.tasks, cfg));
        }
        last = &snap.path;
      }
      out.policy = std::move(result.policy);
      out.value = std::move(result.value);
      return 0;
    });
  }
  rec.final_metrics = cfg.ablation == Ablation::no_arch ? rec.param_metrics : rec.path_metrics;
  return out;
}

std::vector<ObjectivePoint> lambda_points(const std::vector<LambdaRecord>& records) {
  std::vector<ObjectivePoint> pts;
  for (const auto& r : records) {
    pts.push_back({r.final_metrics, Orientation::maximize, "lambda_" + std::to_string(r.lambda.index), false});
  }
  return pts;
}

void finish_report(RunReport& report) {
  const auto pts = lambda_points(report.records);
  report.front = normalized_front(pts);
  report.hv = hypervolume(report.front);
  report.hv_history.clear();
  if (report.config.ablation == Ablation::no_arch || report.records.empty()) {
    report.hv_history.emplace_back(0, report.hv);
    return;
  }
  const std::size_t n_snap = report.records.front().snapshots.size();
  for (std::size_t s = 0; s < n_snap; ++s) {
    std::vector<ObjectivePoint> snap_pts;
    for (const auto& r : report.records) {
      snap_pts.push_back({r.snapshots[s].second, Orientation::maximize, "", false});
    }
    report.hv_history.emplace_back(report.records.front().snapshots[s].first, hypervolume(normalized_front(snap_pts)));
  }
  const int last = report.config.ppo.max_iter;
  if (report.hv_history.empty() || report.hv_history.back().first != last) report.hv_history.emplace_back(last, report.hv);
}

}  // namespace

LambdaRecord run_lambda(const RunConfig& cfg, const Zoo& zoo, const WeightVector& lambda) {
  cfg.validate();
  return run_lambda_outcome(cfg, zoo, lambda, std::nullopt, std::nullopt).record;
}

Zoo obtain_zoo(const RunConfig& cfg) {
  if (!cfg.zoo_dir.empty()) {
    Zoo z = load_zoo(cfg.zoo_dir);
    if (z.tasks.size() != cfg.num_tasks) throw Error(ErrorKind::configuration, "loaded zoo has the wrong task count");
    return z;
  }
  return build_zoo(cfg.zoo, derive_seed(cfg.master_seed, "zoo"));
}

std::vector<ObjectivePoint> run_baselines(const RunConfig& cfg, const Zoo& zoo) {
  std::vector<ObjectivePoint> pts;
  const std::uint64_t seed = eval_seed(cfg);
  for (std::size_t k = 0; k < zoo.finetuned.size(); ++k) {
    pts.push_back({evaluate(network_from_checkpoint(zoo.finetuned[k]), zoo.tasks, cfg.eval_split, seed).values,
                   Orientation::maximize, "finetuned_" + std::to_string(k + 1), false});
  }
  for (const MergeMethod method : {MergeMethod::task_arithmetic, MergeMethod::ties, MergeMethod::dare_ties}) {
    MergeConfig m = cfg.merge;
    m.method = method;
    m.weight_vector = uniform_weights(cfg.num_tasks);
    m.rng_seed = derive_seed(cfg.master_seed, "baseline", static_cast<std::uint64_t>(method));
    const Checkpoint merged = merge_models(m, zoo.base, zoo.finetuned);
    pts.push_back({evaluate(network_from_checkpoint(merged), zoo.tasks, cfg.eval_split, seed).values,
                   Orientation::maximize, std::string(to_string(method)), false});
  }
  return pts;
}

RunReport run_hm3(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  RunReport report;
  report.config = cfg;
  report.config_hash = config_hash(cfg);

  const Zoo zoo = stage("zoo", [&] {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir / "config.toml", std::ios::trunc) << to_toml(cfg);
    Zoo z = obtain_zoo(cfg);
    save_zoo(z, cfg.out_dir / "zoo", derive_seed(cfg.master_seed, "zoo"));
    return z;
  });
  const auto weights = stage("weights", [&] {
    auto w = generate_simplex(cfg.num_tasks, cfg.divisions);
    write_weights_csv(w, cfg.out_dir / "weights.csv");
    return w;
  });

  std::vector<LambdaOutcome> outcomes(weights.size());
  if (cfg.warm_start && cfg.ablation != Ablation::no_arch) {
    std::optional<PolicyNetwork> pol;
    std::optional<ValueNetwork> val;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      outcomes[i] = run_lambda_outcome(cfg, zoo, weights[i], pol, val);
      pol = outcomes[i].policy;
      val = outcomes[i].value;
    }
  } else {
    std::vector<std::exception_ptr> errors(weights.size());
    std::atomic<std::size_t> next{0};
    const auto work = [&] {
      for (std::size_t i = next++; i < weights.size(); i = next++) {
        try {
          outcomes[i] = run_lambda_outcome(cfg, zoo, weights[i], std::nullopt, std::nullopt);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const int n_workers = std::min<int>(worker_count(), static_cast<int>(weights.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < n_workers; ++t) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (auto& o : outcomes) report.records.push_back(std::move(o.record));

  report.baselines = stage("baselines", [&] { return run_baselines(cfg, zoo); });
  finish_report(report);
  report.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  stage("report", [&] {
    emit_reports(report, cfg.out_dir);
    return 0;
  });
  return report;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string svg_report(const RunReport& report) {
  constexpr double size = 480.0, margin = 48.0;
  const auto px = [&](double v) { return margin + v * (size - 2 * margin); };
  const auto py = [&](double v) { return size - margin - v * (size - 2 * margin); };
  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      size);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", px(0), py(0), px(1));
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", px(0), py(0), py(1));
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n", px(v),
                     py(0) + 14, v);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n", px(0) - 4,
                     py(v) + 3, v);
  }
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"12\" text-anchor=\"middle\">f_1</text>\n",
                   size / 2, size - 12);
  s += fmt::format("<text x=\"14\" y=\"{:.1f}\" font-size=\"12\" text-anchor=\"middle\" "
                   "transform=\"rotate(-90 14 {:.1f})\">f_2</text>\n",
                   size / 2, size / 2);
  std::set<std::string> on_front;
  for (const auto& p : report.front.points) on_front.insert(p.label);
  for (const auto& r : report.records) {
    if (r.final_metrics.size() < 2) continue;
    const bool front = on_front.count("lambda_" + std::to_string(r.lambda.index)) > 0;
    s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"{}\"/>\n", px(r.final_metrics[0]),
                     py(r.final_metrics[1]), front ? "steelblue" : "lightgray");
  }
  for (const auto& b : report.baselines) {
    const double x = px(b.values[0]), y = py(b.values[1]);
    s += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"7\" height=\"7\" fill=\"firebrick\"/>\n", x - 3.5,
                     y - 3.5);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"9\">{}</text>\n", x + 6, y - 4, b.label);
  }
  s += "</svg>\n";
  return s;
}

json vec_json(const std::vector<double>& v) { return v.empty() ? json::array() : json(v); }

}  // namespace

void emit_reports(const RunReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto open = [&](const char* name) {
    std::ofstream f(out_dir / name, std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write '" + (out_dir / name).string() + "'");
    return f;
  };

  std::vector<LabelledRow> metrics;
  for (const auto& r : report.records) metrics.push_back({"lambda_" + std::to_string(r.lambda.index), r.final_metrics});
  for (const auto& b : report.baselines) metrics.push_back({b.label, b.values});
  write_metrics_csv(metrics, out_dir / "metrics.csv");

  std::vector<LabelledRow> front;
  for (const auto& p : report.front.points) {
    for (const auto& row : metrics) {
      if (row.label == p.label) front.push_back(row);
    }
  }
  write_metrics_csv(front, out_dir / "front.csv");

  {
    auto f = open("lambda_records.csv");
    const int k = report.config.num_tasks;
    f << "index";
    for (int i = 1; i <= k; ++i) f << ",lambda_" << i;
    for (const char* what : {"param_f", "path_f", "final_f"}) {
      for (int i = 1; i <= k; ++i) f << ',' << what << i;
    }
    f << ",best_return,path_length\n";
    for (const auto& r : report.records) {
      f << r.lambda.index;
      for (const double v : r.lambda.components) f << ',' << fmt::format("{}", v);
      for (const auto* vec : {&r.param_metrics, &r.path_metrics, &r.final_metrics}) {
        for (int i = 0; i < k; ++i) {
          f << ',';
          if (!vec->empty()) f << fmt::format("{}", (*vec)[static_cast<std::size_t>(i)]);
        }
      }
      f << ',' << fmt::format("{}", r.best_return) << ',' << r.path_length << '\n';
    }
  }

  {
    auto f = open("hv_history.csv");
    f << "iteration,hv\n";
    for (const auto& [it, hv] : report.hv_history) f << it << ',' << fmt::format("{}", hv) << '\n';
  }

  open("pareto.svg") << svg_report(report);

  json baselines = json::array();
  for (const auto& b : report.baselines) {
    baselines.push_back({{"label", b.label}, {"metrics", b.values}, {"hv", singleton_hv(b.values)}});
  }
  json records = json::array();
  for (const auto& r : report.records) {
    records.push_back({{"index", r.lambda.index},
                       {"lambda", r.lambda.components},
                       {"param_metrics", vec_json(r.param_metrics)},
                       {"path_metrics", vec_json(r.path_metrics)},
                       {"final_metrics", r.final_metrics},
                       {"best_return", r.best_return},
                       {"path_length", r.path_length}});
  }
  json front_labels = json::array();
  for (const auto& p : report.front.points) front_labels.push_back(p.label);
  const json doc{{"config_hash", report.config_hash},
                 {"ablation", std::string(to_string(report.config.ablation))},
                 {"master_seed", report.config.master_seed},
                 {"eval_split", std::string(to_string(report.config.eval_split))},
                 {"hv", report.hv},
                 {"front", front_labels},
                 {"records", records},
                 {"baselines", baselines}};
  open("report.json") << doc.dump(2) << '\n';
  open("timing.json") << json{{"wall_clock_seconds", report.wall_clock}}.dump() << '\n';
}

RunReport rebuild_report(const std::filesystem::path& run_dir) {
  RunConfig cfg = stage("config", [&] { return load_run_config(run_dir / "config.toml"); });
  cfg.out_dir = run_dir;
  RunReport report;
  report.config = cfg;
  report.config_hash = config_hash(cfg);
  const Zoo zoo = stage("zoo", [&] { return load_zoo(run_dir / "zoo"); });
  const auto weights = generate_simplex(cfg.num_tasks, cfg.divisions);
  for (const auto& w : weights) {
    stage("rebuild[lambda_" + std::to_string(w.index) + "]", [&] {
      const auto dir = lambda_dir(run_dir, w.index);
      LambdaRecord rec;
      rec.lambda = w;
      std::optional<Checkpoint> merged;
      if (cfg.ablation != Ablation::no_para) {
        merged = load_checkpoint(dir / "merged.ckpt");
        rec.param_metrics =
            evaluate(network_from_checkpoint(*merged), zoo.tasks, cfg.eval_split, eval_seed(cfg)).values;
      }
      if (cfg.ablation != Ablation::no_arch) {
        const PathEnvironment env(env_for(cfg, w), search_zoo_for(cfg, zoo, merged), zoo.tasks);
        rec.path = load_path(dir / "best_path.json");
        rec.best_return = rec.path->episode_return;
        rec.path_length = rec.path->path.length();
        rec.path_metrics = evaluate_path(env, rec.path->path, zoo.tasks, cfg);
        for (const auto& [it, snap] : load_snapshots(dir / "snapshots.jsonl")) {
          rec.snapshots.emplace_back(it, evaluate_path(env, snap.path, zoo.tasks, cfg));
        }
      }
      rec.final_metrics = cfg.ablation == Ablation::no_arch ? rec.param_metrics : rec.path_metrics;
      report.records.push_back(std::move(rec));
      return 0;
    });
  }
  report.baselines = stage("baselines", [&] { return run_baselines(cfg, zoo); });
  finish_report(report);
  if (std::ifstream timing(run_dir / "timing.json"); timing) {
    try {
      report.wall_clock = json::parse(timing).value("wall_clock_seconds", 0.0);
    } catch (const json::exception&) {
    }
  }
  return report;
}

}  // namespace hm3
