#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "hm3/error.hpp"
#include "hm3/pipeline.hpp"
#include "hm3/rng.hpp"
#include "hm3/simplex_weights.hpp"

namespace fs = std::filesystem;
using namespace hm3;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string ablation;
};

RunConfig resolve_config(const GlobalFlags& g) {
  RunConfig cfg = g.config.empty() ? parse_run_config("") : load_run_config(g.config);
  if (g.seed) cfg.master_seed = *g.seed;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (!g.ablation.empty()) cfg.ablation = parse_ablation(g.ablation);
  cfg.validate();
  return cfg;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw Error(ErrorKind::configuration, "'" + cell + "' is not a number");
    }
  }
  return out;
}

fs::path zoo_path(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!cfg.zoo_dir.empty()) return cfg.zoo_dir;
  return cfg.out_dir / "zoo";
}

Zoo load_or_fail(const fs::path& dir) {
  try {
    return load_zoo(dir);
  } catch (const Error& e) {
    throw StageError("zoo", e);
  }
}

void print_metrics(const std::string& label, const std::vector<double>& values) {
  fmt::print("{}: {}\n", label, fmt::join(values, " "));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-objective model merging on a toy zoo"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags g;
  app.add_option("--config", g.config, "TOML run configuration");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out-dir", g.out_dir, "output directory");
  app.add_option("--ablation", g.ablation, "full | no_arch | no_para");

  auto* zoo_cmd = app.add_subcommand("zoo", "train the base and fine-tuned models into <out-dir>");
  std::optional<int> zoo_k;
  zoo_cmd->add_option("--k", zoo_k, "number of tasks");

  auto* weights_cmd = app.add_subcommand("weights", "write the simplex lattice as index,lambda_1..lambda_K");
  std::optional<int> k_flag, q_flag;
  std::string weights_out;
  weights_cmd->add_option("--k", k_flag, "number of objectives");
  weights_cmd->add_option("--q", q_flag, "lattice divisions");
  weights_cmd->add_option("--out", weights_out, "output CSV (default <out-dir>/weights.csv)");

  auto* merge_cmd = app.add_subcommand("merge", "merge a zoo; --config names a merge TOML here");
  std::string merge_zoo, merge_lambda, merge_method, merge_out;
  merge_cmd->add_option("--zoo", merge_zoo, "zoo directory (overrides zoo_dir)");
  merge_cmd->add_option("--lambda", merge_lambda, "comma-separated weights (overrides weight_vector)");
  merge_cmd->add_option("--method", merge_method, "merge method override");
  merge_cmd->add_option("--out", merge_out, "output checkpoint")->required();

  auto* search_cmd = app.add_subcommand("search", "merge and search one lattice weight vector");
  std::string search_zoo;
  int search_index = 0;
  search_cmd->add_option("--zoo", search_zoo, "zoo directory");
  search_cmd->add_option("--index", search_index, "lattice index of the weight vector");

  auto* run_cmd = app.add_subcommand("run", "full pipeline");

  auto* pareto_cmd = app.add_subcommand("pareto", "non-dominated filter and hypervolume of a metrics CSV");
  std::string pareto_in, pareto_out, pareto_ref, pareto_orientation = "max";
  bool pareto_hv = false;
  pareto_cmd->add_option("--in", pareto_in, "rows label,f_1..f_K")->required();
  pareto_cmd->add_option("--out", pareto_out, "front rows");
  pareto_cmd->add_option("--ref", pareto_ref, "reference point in minimization space (default all ones)");
  pareto_cmd->add_option("--orientation", pareto_orientation, "max (accuracies in [0,1]) | min");
  pareto_cmd->add_flag("--hv", pareto_hv, "print the hypervolume");

  auto* report_cmd = app.add_subcommand("report", "re-evaluate a finished run and re-emit its reports");
  std::string report_dir;
  report_cmd->add_option("--run-dir", report_dir, "run directory (default <out-dir>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (pareto_cmd->parsed()) {
      if (pareto_orientation != "max" && pareto_orientation != "min") {
        throw Error(ErrorKind::configuration, "orientation must be max or min");
      }
      std::vector<LabelledRow> rows;
      try {
        rows = read_metrics_csv(pareto_in);
      } catch (const Error& e) {
        throw StageError("pareto", e);
      }
      std::vector<ObjectivePoint> pts;
      for (const auto& r : rows) {
        pts.push_back({r.values, pareto_orientation == "max" ? Orientation::maximize : Orientation::minimize,
                       r.label, false});
      }
      ParetoFront front = pareto_orientation == "max" ? normalized_front(pts) : nondominated_filter(pts);
      if (!pareto_ref.empty()) front.reference = parse_list(pareto_ref);
      if (!pts.empty() && front.reference.size() != pts.front().values.size()) {
        throw Error(ErrorKind::configuration, "reference point has the wrong dimension");
      }
      std::vector<LabelledRow> kept;
      for (const auto& p : front.points) {
        for (const auto& r : rows) {
          if (r.label == p.label) {
            kept.push_back(r);
            break;
          }
        }
      }
      if (!pareto_out.empty()) write_metrics_csv(kept, pareto_out);
      else
        for (const auto& r : kept) print_metrics(r.label, r.values);
      if (pareto_hv) fmt::print("HV={}\n", hypervolume(front));
      return 0;
    }

    if (merge_cmd->parsed()) {
      MergeJob job;
      if (!g.config.empty()) {
        std::ifstream in(g.config);
        if (!in) throw Error(ErrorKind::configuration, "cannot open config '" + g.config + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        job = parse_merge_job(ss.str());
      }
      MergeConfig& m = job.merge;
      if (!merge_zoo.empty()) job.zoo_dir = merge_zoo;
      if (job.zoo_dir.empty()) throw Error(ErrorKind::configuration, "merge needs zoo_dir or --zoo");
      if (!merge_method.empty()) m.method = parse_merge_method(merge_method);
      if (g.seed) m.rng_seed = *g.seed;
      const Zoo zoo = load_or_fail(job.zoo_dir);
      try {
        if (!merge_lambda.empty()) m.weight_vector = make_weight_vector(parse_list(merge_lambda));
        if (!m.weight_vector) m.weight_vector = uniform_weights(zoo.tasks.size());
        m.validate();
      } catch (const Error& e) {
        throw Error(ErrorKind::configuration, e.what());
      }
      try {
        const Checkpoint merged = merge_models(m, zoo.base, zoo.finetuned);
        const fs::path out = merge_out;
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        save_checkpoint(merged, out);
        print_metrics(std::string(to_string(m.method)),
                      evaluate(network_from_checkpoint(merged), zoo.tasks, Split::test, 0).values);
      } catch (const Error& e) {
        throw StageError("merge", e);
      }
      return 0;
    }

    RunConfig cfg = resolve_config(g);

    if (zoo_cmd->parsed()) {
      if (zoo_k) {
        cfg.num_tasks = cfg.zoo.num_tasks = *zoo_k;
        cfg.validate();
      }
      const Zoo zoo = [&] {
        try {
          Zoo z = obtain_zoo(cfg);
          save_zoo(z, cfg.out_dir, derive_seed(cfg.master_seed, "zoo"));
          return z;
        } catch (const Error& e) {
          throw StageError("zoo", e);
        }
      }();
      const auto seed = derive_seed(cfg.master_seed, "eval");
      for (std::size_t k = 0; k < zoo.finetuned.size(); ++k) {
        print_metrics(zoo.finetuned[k].arch().model_id,
                      evaluate(network_from_checkpoint(zoo.finetuned[k]), zoo.tasks, cfg.eval_split, seed).values);
      }
      print_metrics("base", evaluate(network_from_checkpoint(zoo.base), zoo.tasks, cfg.eval_split, seed).values);
    } else if (weights_cmd->parsed()) {
      std::vector<WeightVector> w;
      try {
        w = generate_simplex(k_flag.value_or(cfg.num_tasks), q_flag.value_or(cfg.divisions));
      } catch (const Error& e) {
        throw Error(ErrorKind::configuration, e.what());
      }
      const fs::path out = weights_out.empty() ? cfg.out_dir / "weights.csv" : fs::path(weights_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      write_weights_csv(w, out);
      fmt::print("{} weight vectors -> {}\n", w.size(), out.string());
    } else if (search_cmd->parsed()) {
      RunConfig c = cfg;
      c.zoo_dir = zoo_path(cfg, search_zoo);
      const Zoo zoo = load_or_fail(c.zoo_dir);
      const auto weights = generate_simplex(c.num_tasks, c.divisions);
      if (search_index < 0 || search_index >= static_cast<int>(weights.size())) {
        throw Error(ErrorKind::configuration, fmt::format("--index must lie in [0, {})", weights.size()));
      }
      const LambdaRecord rec = run_lambda(c, zoo, weights[static_cast<std::size_t>(search_index)]);
      fmt::print("lambda {}\n", fmt::join(rec.lambda.components, " "));
      if (!rec.param_metrics.empty()) print_metrics("merged", rec.param_metrics);
      if (!rec.path_metrics.empty()) {
        print_metrics("path", rec.path_metrics);
        fmt::print("best_return {} path_length {}\n", rec.best_return, rec.path_length);
      }
    } else if (run_cmd->parsed()) {
      const RunReport report = run_hm3(cfg);
      fmt::print("hv {}\nfront {} of {}\nconfig_hash {}\nwall_clock {:.1f}s\nout_dir {}\n", report.hv,
                 report.front.points.size(), report.records.size(), report.config_hash, report.wall_clock,
                 cfg.out_dir.string());
    } else if (report_cmd->parsed()) {
      const fs::path dir = report_dir.empty() ? cfg.out_dir : fs::path(report_dir);
      const RunReport report = rebuild_report(dir);
      try {
        emit_reports(report, dir);
      } catch (const Error& e) {
        throw StageError("report", e);
      }
      fmt::print("hv {}\n", report.hv);
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "hm3: %s\n", e.what());
    return kExitStage;
  } catch (const Error& e) {
    std::fprintf(stderr, "hm3: %s\n", e.what());
    return e.kind() == ErrorKind::configuration ? kExitConfig : kExitStage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "hm3: %s\n", e.what());
    return kExitStage;
  }
  return 0;
}
