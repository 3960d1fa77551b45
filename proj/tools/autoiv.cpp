// autoiv command line: run plans, print tables, sweep one hyperparameter,
// write synthetic datasets.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "autoiv/datagen.hpp"
#include "autoiv/errors.hpp"
#include "autoiv/harness.hpp"

namespace h = autoiv::harness;
namespace data = autoiv::data;

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::stringstream conv(item);
    T v{};
    if (!(conv >> v) || !conv.eof()) throw autoiv::ContractViolation("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw autoiv::ContractViolation("empty list '" + s + "'");
  return out;
}

struct CommonArgs {
  std::string plan_path;
  std::string seeds;
  std::size_t jobs = 0;
  std::string out;
};

h::ExperimentPlan resolve_plan(const CommonArgs& a) {
  h::ExperimentPlan plan = h::load_plan(a.plan_path);
  if (!a.seeds.empty()) plan.seeds = parse_list<std::uint64_t>(a.seeds);
  if (a.jobs > 0) plan.jobs = a.jobs;
  if (!a.out.empty()) plan.out_dir = a.out;
  return plan;
}

int report(const std::vector<h::RunRecord>& records, std::size_t computed) {
  std::size_t failed = 0;
  for (const auto& r : records)
    if (!r.ok()) {
      ++failed;
      std::fprintf(stderr, "FAILED %s: %s\n", r.run_id.c_str(), r.error.c_str());
    }
  std::printf("%zu runs (%zu computed, %zu resumed), %zu failed\n", records.size(), computed,
              records.size() - computed, failed);
  return failed == 0 ? 0 : 1;
}

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--plan", a.plan_path, "experiment plan (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seeds", a.seeds, "comma-separated seed list, overrides the plan");
  cmd->add_option("--jobs", a.jobs, "parallel workers");
  cmd->add_option("--out", a.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AutoIV counterfactual toolkit"};
  app.require_subcommand(1);

  CommonArgs run_args;
  auto* run = app.add_subcommand("run", "execute an experiment plan");
  add_common(run, run_args);

  std::string records_dir;
  auto* table = app.add_subcommand("table", "print the aggregated results table");
  table->add_option("--records", records_dir, "output directory of a run")->required();

  CommonArgs sweep_args;
  std::string axis, values;
  auto* sweep = app.add_subcommand("sweep", "run a plan once per value of one hyperparameter");
  add_common(sweep, sweep_args);
  sweep->add_option("--axis", axis, "rep_dim | n_train | alpha | eta");
  sweep->add_option("--values", values, "comma-separated values");

  std::string scenario = "confounded_low_dim", response = "abs", regime = "with_z", out_csv;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  auto* gen = app.add_subcommand("generate", "write one synthetic split as CSV plus JSON sidecar");
  gen->add_option("--scenario", scenario);
  gen->add_option("--response", response);
  gen->add_option("--regime", regime);
  gen->add_option("--seed", seed);
  gen->add_option("--n", n, "rows (default: n_train of the default spec)");
  gen->add_option("--out", out_csv, "CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto plan = resolve_plan(run_args);
      const auto summary = h::run_experiment(plan);
      std::cout << h::format_table(h::aggregate(summary.records, &plan));
      return report(summary.records, summary.computed);
    }
    if (*table) {
      const std::filesystem::path dir(records_dir);
      const auto records = h::read_results_csv(dir / "results.csv");
      if (std::filesystem::exists(dir / "manifest.json")) {
        const auto plan = h::read_manifest_plan(dir / "manifest.json");
        std::cout << h::format_table(h::aggregate(records, &plan));
      } else {
        std::cout << h::format_table(h::aggregate(records));
      }
      return 0;
    }
    if (*sweep) {
      const auto plan = resolve_plan(sweep_args);
      std::vector<h::SweepAxis> axes;
      if (!axis.empty()) {
        if (values.empty()) throw autoiv::ContractViolation("--axis needs --values");
        axes.push_back({axis, parse_list<double>(values)});
      } else {
        axes = plan.sweeps;
      }
      if (axes.empty()) throw autoiv::ContractViolation("no sweep axis given and none in the plan");
      int rc = 0;
      for (const auto& a : axes) {
        const auto records = h::run_sweep(plan, a);
        std::printf("axis %s: ", a.axis.c_str());
        rc |= report(records, records.size());
      }
      return rc;
    }
    if (*gen) {
      data::DgpSpec spec;
      spec.scenario = data::scenario_from_string(scenario);
      spec.response = data::response_from_string(response);
      spec.regime = data::regime_from_string(regime);
      if (n > 0) spec.n_train = n;
      const auto splits = data::generate_splits(spec, seed);
      data::save_dataset_csv(splits.train, spec, seed, out_csv);
      std::printf("wrote %s (%zu rows)\n", out_csv.c_str(), splits.train.rows());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
