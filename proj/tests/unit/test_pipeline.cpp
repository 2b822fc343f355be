#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <string>

#include "../support/fixtures.hpp"
#include "hm3/pipeline.hpp"
#include "hm3/rng.hpp"

using namespace hm3;
namespace fs = std::filesystem;

namespace {

const char* kFastToml = R"(num_tasks = 3
divisions = 2
master_seed = 5

[zoo]
num_layers = 2
hidden_width = 8
train_size = 200
val_size = 100
test_size = 100
base_steps = 300
finetune_steps = 150

[env]
probe_batch = 32
reward_mode = "terminal"

[ppo]
max_iter = 24
warmup_iters = 6
hidden = 8
episodes_per_iter = 4
)";

RunConfig fast_config(const std::string& tag, Ablation a = Ablation::full) {
  RunConfig c = parse_run_config(kFastToml);
  c.ablation = a;
  c.out_dir = hm3::testing::temp_dir(tag);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

const RunReport& full_run() {
  static const RunReport r = run_hm3(fast_config("pipe_full"));
  return r;
}

const RunReport& no_arch_run() {
  static const RunReport r = run_hm3(fast_config("pipe_no_arch", Ablation::no_arch));
  return r;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(HM3_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run config survives a TOML round trip") {
  RunConfig c = parse_run_config(kFastToml);
  c.merge.method = MergeMethod::ties;
  c.env.beta1 = 0.03;
  c.warm_start = true;
  const RunConfig back = parse_run_config(to_toml(c));
  CHECK(to_toml(back) == to_toml(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(back.zoo.hidden_width == 8);
  CHECK(back.ppo.max_iter == 24);
  CHECK(back.env.reward_mode == RewardMode::terminal);
}

TEST_CASE("config hash ignores out_dir and tracks everything else") {
  const RunConfig c = parse_run_config(kFastToml);
  const std::string h = config_hash(c);
  RunConfig moved = c;
  moved.out_dir = "/somewhere/else";
  CHECK(config_hash(moved) == h);

  std::vector<RunConfig> edits(6, c);
  edits[0].master_seed = 6;
  edits[1].env.beta1 = 0.02;
  edits[2].ppo.max_iter = 25;
  edits[3].zoo.hidden_width = 9;
  edits[4].merge.drop_prob = 0.3;
  edits[5].ablation = Ablation::no_para;
  std::set<std::string> seen{h};
  for (const auto& e : edits) seen.insert(config_hash(e));
  CHECK(seen.size() == edits.size() + 1);
}

TEST_CASE("malformed run configs are configuration errors") {
  const char* bad[] = {
      "num_taskz = 3\n",
      "[zoo]\nwidth = 3\n",
      "divisions = \"four\"\n",
      "num_tasks = 7\n",
      "divisions = 0\n",
      "ablation = \"half\"\n",
      "[ppo]\nclip = -0.1\n",
      "[env]\nbeta1 = -1.0\n",
      "num_tasks = [\n",
  };
  for (const char* text : bad) {
    CAPTURE(text);
    try {
      parse_run_config(text);
      FAIL("expected a configuration error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::configuration);
    }
  }
}

TEST_CASE("metrics CSV round trip and singleton hypervolume") {
  const auto dir = hm3::testing::temp_dir("metrics_csv");
  const std::vector<LabelledRow> rows{{"a", {0.5, 0.25, 1.0}}, {"b", {0.1, 0.2, 0.3}}};
  write_metrics_csv(rows, dir / "m.csv");
  const auto back = read_metrics_csv(dir / "m.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].label == "a");
  CHECK(back[1].values == rows[1].values);
  CHECK(singleton_hv({0.5, 0.5}) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(singleton_hv({1.0, 0.0, 1.0}) == 0.0);
}

TEST_CASE("front.csv lists exactly the front and recomputes the reported hypervolume") {
  const RunReport& r = full_run();
  const auto dir = r.config.out_dir;
  const auto front_rows = read_metrics_csv(dir / "front.csv");
  CHECK(front_rows.size() == r.front.points.size());
  std::vector<ObjectivePoint> pts;
  for (const auto& row : front_rows) pts.push_back({row.values, Orientation::maximize, row.label, false});
  CHECK(hypervolume(normalized_front(pts)) == doctest::Approx(r.hv).epsilon(1e-12));
  CHECK(r.hv > 0.0);
  CHECK(r.records.size() == 6);  // K=3, q=2
  CHECK(r.config_hash == config_hash(r.config));
}

TEST_CASE("metrics.csv carries every lambda and all baselines") {
  const RunReport& r = full_run();
  const auto rows = read_metrics_csv(r.config.out_dir / "metrics.csv");
  std::set<std::string> labels;
  for (const auto& row : rows) labels.insert(row.label);
  for (const auto& rec : r.records) CHECK(labels.count("lambda_" + std::to_string(rec.lambda.index)) == 1);
  CHECK(r.baselines.size() == 3 + 3);
  for (const char* name : {"finetuned_1", "finetuned_2", "finetuned_3", "task_arithmetic", "ties", "dare_ties"}) {
    CAPTURE(name);
    CHECK(labels.count(name) == 1);
  }
  CHECK(rows.size() == r.records.size() + r.baselines.size());
}

TEST_CASE("full records carry both stages and snapshots") {
  const RunReport& r = full_run();
  for (const auto& rec : r.records) {
    CHECK(rec.param_metrics.size() == 3);
    CHECK(rec.path_metrics.size() == 3);
    CHECK(rec.final_metrics == rec.path_metrics);
    REQUIRE(rec.path.has_value());
    CHECK(rec.path_length == static_cast<int>(rec.path->path.hops.size()));
    CHECK(fs::exists(r.config.out_dir / ("lambda_" + std::to_string(rec.lambda.index))));
  }
  REQUIRE_FALSE(r.hv_history.empty());
  CHECK(r.hv_history.back().first == r.config.ppo.max_iter);
  CHECK(r.hv_history.back().second == doctest::Approx(r.hv).epsilon(1e-12));
}

TEST_CASE("re-emitting a report is byte-identical and a rebuild reproduces it") {
  const RunReport& r = full_run();
  const auto again = hm3::testing::temp_dir("pipe_reemit");
  emit_reports(r, again);
  for (const char* f : {"front.csv", "metrics.csv", "lambda_records.csv", "hv_history.csv", "pareto.svg"}) {
    CAPTURE(f);
    CHECK(slurp(again / f) == slurp(r.config.out_dir / f));
  }
  const RunReport rebuilt = rebuild_report(r.config.out_dir);
  CHECK(rebuilt.hv == r.hv);
  REQUIRE(rebuilt.records.size() == r.records.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) CHECK(rebuilt.records[i].final_metrics == r.records[i].final_metrics);
}

TEST_CASE("a repeated run is deterministic") {
  const RunReport& a = full_run();
  const RunReport b = run_hm3(fast_config("pipe_full_repeat"));
  CHECK(b.hv == a.hv);
  for (const char* f : {"front.csv", "metrics.csv", "lambda_records.csv", "hv_history.csv"}) {
    CAPTURE(f);
    CHECK(slurp(b.config.out_dir / f) == slurp(a.config.out_dir / f));
  }
}

TEST_CASE("no_arch reports the merged models and shares the merge stage with full") {
  const RunReport& na = no_arch_run();
  const RunReport& full = full_run();
  REQUIRE(na.records.size() == full.records.size());
  for (std::size_t i = 0; i < na.records.size(); ++i) {
    CHECK(na.records[i].final_metrics == na.records[i].param_metrics);
    CHECK(na.records[i].path_metrics.empty());
    CHECK(na.records[i].param_metrics == full.records[i].param_metrics);
  }
  CHECK(na.hv_history.size() == 1);
  CHECK(config_hash(na.config) != config_hash(full.config));
}

TEST_CASE("no_para searches without a merged model") {
  RunConfig c = fast_config("pipe_no_para", Ablation::no_para);
  c.divisions = 1;
  c.ppo.max_iter = 10;
  c.ppo.warmup_iters = 2;
  const RunReport r = run_hm3(c);
  REQUIRE(r.records.size() == 3);
  for (const auto& rec : r.records) {
    CHECK(rec.param_metrics.empty());
    CHECK(rec.final_metrics == rec.path_metrics);
  }
}

TEST_CASE("a missing zoo directory fails in the zoo stage") {
  RunConfig c = fast_config("pipe_bad_zoo");
  c.zoo_dir = c.out_dir / "does_not_exist";
  try {
    run_hm3(c);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "zoo");
  }
}

TEST_CASE("each fine-tuned model is the best baseline on its own task") {
  const RunConfig cfg;
  const Zoo zoo = obtain_zoo([&] {
    RunConfig c = cfg;
    c.out_dir = hm3::testing::temp_dir("pipe_default_zoo");
    return c;
  }());
  const auto base = run_baselines(cfg, zoo);
  REQUIRE(base.size() == 6);
  for (int k = 0; k < 3; ++k) {
    const auto& own = base[static_cast<std::size_t>(k)];
    CHECK(own.label == "finetuned_" + std::to_string(k + 1));
    for (const auto& other : base) {
      if (other.label != own.label) CHECK(other.values[static_cast<std::size_t>(k)] <= own.values[static_cast<std::size_t>(k)]);
    }
  }
}

TEST_CASE("CLI exit codes") {
  const auto dir = hm3::testing::temp_dir("pipe_cli");
  CHECK(cli("--bogus-flag") == 2);
  CHECK(cli("--config " + (dir / "missing.toml").string() + " run") == 2);
  CHECK(cli("weights --k 3 --q 4 --out " + (dir / "w.csv").string()) == 0);
  int lines = 0;
  {
    std::ifstream f(dir / "w.csv");
    for (std::string line; std::getline(f, line);) lines += !line.empty();
  }
  CHECK(lines >= 15);
  CHECK(lines <= 16);
  CHECK(cli("weights --k 1 --q 4 --out " + (dir / "w1.csv").string()) == 2);
  CHECK(cli("merge --zoo " + (dir / "nozoo").string() + " --out " + (dir / "m.ckpt").string()) == 3);
}
