#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autoiv/datagen.hpp"
#include "autoiv/downstream.hpp"
#include "autoiv/trainer.hpp"

namespace autoiv::harness {

// Row order of the results table.
enum class Instrument { None, RandIv, TrueIv, Uas, Was, AutoIv };
// Column-block order of the results table.
enum class Downstream { DirectNn, TwoSlsVan, TwoSlsPoly, TwoSlsNn, KernelIv };

std::string to_string(Instrument i);
std::string to_string(Downstream d);
Instrument instrument_from_string(const std::string& s);
Downstream downstream_from_string(const std::string& s);

/// AutoIV ablation variants: full, no_z_mi, no_c_mi, no_zc_reg, no_two_stage.
const std::vector<std::string>& autoiv_variants();
mi::Ablation variant_ablation(const std::string& variant);

struct MethodCell {
  Instrument instrument = Instrument::TrueIv;
  data::Regime regime = data::Regime::WithZ;
  Downstream downstream = Downstream::TwoSlsVan;
  std::string variant = "full";  // AutoIV only

  /// Label used in the instrument column: "autoiv", "autoiv-no_z_mi", "uas", ...
  std::string instrument_label() const;
  friend bool operator==(const MethodCell&, const MethodCell&) = default;
};

/// The eight instrument rows of each estimator block plus DirectNN.
std::vector<MethodCell> table1_methods(const std::vector<Downstream>& downstreams);

struct DownstreamConfig {
  int poly_degree = 3;
  double poly_ridge = 1e-3;
  ds::NnOptions nn_stage1;
  ds::NnOptions nn_stage2;
  ds::NnOptions direct;
  ds::KernelIvOptions kernel;
  friend bool operator==(const DownstreamConfig&, const DownstreamConfig&);
};

struct SweepAxis {
  std::string axis;  // rep_dim | n_train | alpha | eta
  std::vector<double> values;
  friend bool operator==(const SweepAxis&, const SweepAxis&) = default;
};

struct ExperimentPlan {
  data::DgpSpec dgp;  // sizes and block widths; scenario/response/regime come from the grids
  std::vector<data::Scenario> scenarios = {data::Scenario::ConfoundedLowDim};
  std::vector<data::Response> responses = {data::Response::Abs};
  std::vector<MethodCell> methods;
  std::vector<std::uint64_t> seeds = {0};
  AutoIvConfig autoiv;
  DownstreamConfig downstream;
  std::vector<SweepAxis> sweeps;
  std::size_t grid_size = 100;
  std::string out_dir = "results";
  std::size_t jobs = 1;
  bool save_models = false;

  /// Throws ContractViolation on empty grids, duplicate seeds or bad sizes.
  void validate() const;
  /// Hash of everything that changes results except the seed list, output
  /// directory and job count.
  std::string hash() const;
  friend bool operator==(const ExperimentPlan&, const ExperimentPlan&);
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
/// `methods` may be the string "table1" or a list of cells; absent fields keep defaults.
void from_json(const nlohmann::json& j, ExperimentPlan& p);
ExperimentPlan load_plan(const std::filesystem::path& path);

struct RunRecord {
  std::string run_id;
  data::Scenario scenario = data::Scenario::ConfoundedLowDim;
  data::Response response = data::Response::Abs;
  MethodCell cell;
  std::uint64_t seed = 0;
  double mse_test = 0.0;
  double wall_ms = 0.0;
  std::string error;  // empty on success
  std::string model_path;

  bool ok() const noexcept { return error.empty(); }
};

std::string make_run_id(data::Scenario s, data::Response r, const MethodCell& c, std::uint64_t seed);

/// Seed shared by every method on one (scenario, response, seed) so that all
/// of them see the same draws.
std::uint64_t dataset_seed(std::uint64_t seed, data::Scenario s, data::Response r);

struct RunSummary {
  std::vector<RunRecord> records;  // canonical grid order
  std::size_t computed = 0;        // runs executed in this call (not resumed)
  std::size_t failed = 0;
};

/// Executes every grid point x seed, skipping runs already recorded in the
/// output directory, and writes results.csv, failures.csv, summary.csv,
/// curves/ and manifest.json. Individual failures are recorded, not thrown.
RunSummary run_experiment(const ExperimentPlan& plan);

struct SummaryRow {
  data::Scenario scenario;
  data::Response response;
  MethodCell cell;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 when n == 1
  bool single_seed = false;
  bool missing = false;
};

/// Mean and sample std of mse_test per cell, failed runs excluded. With a
/// plan, every requested cell appears and empty ones are flagged missing.
std::vector<SummaryRow> aggregate(const std::vector<RunRecord>& records,
                                  const ExperimentPlan* plan = nullptr);

/// Rows grouped into estimator blocks and instrument rows,
/// one column per response ("mean+-std").
std::string format_table(const std::vector<SummaryRow>& rows);

inline constexpr const char* kResultsHeader =
    "run_id,scenario,response,regime,instrument,downstream,seed,mse_test,wall_ms";

void write_results_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path);
std::vector<RunRecord> read_results_csv(const std::filesystem::path& path);
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);
void write_curve_csv(const ds::EvalReport& report, const std::filesystem::path& path);
void write_manifest(const ExperimentPlan& plan, const RunSummary& summary,
                    const std::filesystem::path& path);
/// The plan stored in a manifest.
ExperimentPlan read_manifest_plan(const std::filesystem::path& path);

/// Runs the plan once per axis value (each into <out>/<axis>=<value>) and
/// writes <out>/sweep_<axis>.csv in long format.
std::vector<RunRecord> run_sweep(const ExperimentPlan& plan, const SweepAxis& axis);

/// Destandardized response on the standardized x scale, offset by the mean
/// covariate contribution of the raw test split.
double structural_curve(const data::StandardizationStats& stats, data::Response r, double offset,
                        double x_standardized);

}  // namespace autoiv::harness
