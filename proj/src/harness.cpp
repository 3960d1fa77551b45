#include "autoiv/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/Core>

#include "autoiv/errors.hpp"
#include "autoiv/seed.hpp"

namespace autoiv::harness {

namespace {

constexpr const char* kManifestFormat = "autoiv-run/1";
constexpr const char* kVersion = "0.1.0";

std::string fmt_double(double v, const char* f = "%.17g") {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

template <typename E>
std::size_t rank_of(const std::vector<E>& order, E v) {
  auto it = std::find(order.begin(), order.end(), v);
  return static_cast<std::size_t>(it - order.begin());
}

nlohmann::json nn_json(const ds::NnOptions& o) {
  return {{"hidden", o.hidden},
          {"activation", nn::to_string(o.activation)},
          {"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"lr", o.lr}};
}

void nn_from(const nlohmann::json& j, ds::NnOptions& o) {
  if (j.contains("hidden")) j.at("hidden").get_to(o.hidden);
  if (j.contains("activation"))
    o.activation = nn::activation_from_string(j.at("activation").get<std::string>());
  if (j.contains("epochs")) j.at("epochs").get_to(o.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(o.batch_size);
  if (j.contains("lr")) j.at("lr").get_to(o.lr);
}

nlohmann::json downstream_json(const DownstreamConfig& d) {
  return {{"poly_degree", d.poly_degree},
          {"poly_ridge", d.poly_ridge},
          {"nn_stage1", nn_json(d.nn_stage1)},
          {"nn_stage2", nn_json(d.nn_stage2)},
          {"direct", nn_json(d.direct)},
          {"kernel",
           {{"instrument_scale", d.kernel.instrument_scale},
            {"treatment_scale", d.kernel.treatment_scale},
            {"ridge1", d.kernel.ridge1},
            {"ridge2", d.kernel.ridge2}}}};
}

void downstream_from(const nlohmann::json& j, DownstreamConfig& d) {
  if (j.contains("poly_degree")) j.at("poly_degree").get_to(d.poly_degree);
  if (j.contains("poly_ridge")) j.at("poly_ridge").get_to(d.poly_ridge);
  if (j.contains("nn")) {
    nn_from(j.at("nn"), d.nn_stage1);
    nn_from(j.at("nn"), d.nn_stage2);
    nn_from(j.at("nn"), d.direct);
  }
  if (j.contains("nn_stage1")) nn_from(j.at("nn_stage1"), d.nn_stage1);
  if (j.contains("nn_stage2")) nn_from(j.at("nn_stage2"), d.nn_stage2);
  if (j.contains("direct")) nn_from(j.at("direct"), d.direct);
  if (j.contains("kernel")) {
    const auto& k = j.at("kernel");
    if (k.contains("instrument_scale")) k.at("instrument_scale").get_to(d.kernel.instrument_scale);
    if (k.contains("treatment_scale")) k.at("treatment_scale").get_to(d.kernel.treatment_scale);
    if (k.contains("ridge1")) k.at("ridge1").get_to(d.kernel.ridge1);
    if (k.contains("ridge2")) k.at("ridge2").get_to(d.kernel.ridge2);
  }
}

nlohmann::json cell_json(const MethodCell& c) {
  nlohmann::json j = {{"instrument", to_string(c.instrument)},
                      {"regime", data::to_string(c.regime)},
                      {"downstream", to_string(c.downstream)}};
  if (c.instrument == Instrument::AutoIv) j["variant"] = c.variant;
  return j;
}

MethodCell cell_from(const nlohmann::json& j) {
  MethodCell c;
  c.instrument = instrument_from_string(j.at("instrument").get<std::string>());
  if (j.contains("regime")) c.regime = data::regime_from_string(j.at("regime").get<std::string>());
  c.downstream = downstream_from_string(j.at("downstream").get<std::string>());
  if (j.contains("variant")) c.variant = j.at("variant").get<std::string>();
  if (c.instrument == Instrument::None && c.downstream != Downstream::DirectNn) {
    throw ContractViolation("method cell: instrument none only pairs with direct_nn");
  }
  if (c.downstream == Downstream::DirectNn) c.instrument = Instrument::None;
  variant_ablation(c.variant);
  return c;
}

std::size_t instrument_row(const MethodCell& c) {
  // randiv, trueiv, uas w/o, uas w/, was w/o, was w/, autoiv w/o, autoiv w/
  const std::size_t wz = c.regime == data::Regime::WithZ ? 1 : 0;
  switch (c.instrument) {
    case Instrument::None: return 0;
    case Instrument::RandIv: return 1;
    case Instrument::TrueIv: return 2;
    case Instrument::Uas: return 3 + wz;
    case Instrument::Was: return 5 + wz;
    case Instrument::AutoIv: {
      const auto& v = autoiv_variants();
      const std::size_t vi = rank_of(v, c.variant);
      return 7 + 2 * vi + wz;
    }
  }
  return 99;
}

bool cell_less(const MethodCell& a, const MethodCell& b) {
  const auto da = static_cast<int>(a.downstream), db = static_cast<int>(b.downstream);
  if (da != db) return da < db;
  return instrument_row(a) < instrument_row(b);
}

struct CellKey {
  data::Scenario scenario;
  data::Response response;
  std::string cell;
  auto operator<=>(const CellKey&) const = default;
};

std::string cell_id(const MethodCell& c) {
  return c.instrument_label() + "|" + data::to_string(c.regime) + "|" + to_string(c.downstream);
}

void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

std::string csv_line(const RunRecord& r) {
  return r.run_id + "," + data::to_string(r.scenario) + "," + data::to_string(r.response) + "," +
         data::to_string(r.cell.regime) + "," + r.cell.instrument_label() + "," +
         to_string(r.cell.downstream) + "," + std::to_string(r.seed) + "," +
         fmt_double(r.ok() ? r.mse_test : std::numeric_limits<double>::quiet_NaN()) + "," +
         fmt_double(r.wall_ms, "%.3f");
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

std::string to_string(Instrument i) {
  switch (i) {
    case Instrument::None: return "none";
    case Instrument::RandIv: return "randiv";
    case Instrument::TrueIv: return "trueiv";
    case Instrument::Uas: return "uas";
    case Instrument::Was: return "was";
    case Instrument::AutoIv: return "autoiv";
  }
  return "?";
}

std::string to_string(Downstream d) {
  switch (d) {
    case Downstream::DirectNn: return "direct_nn";
    case Downstream::TwoSlsVan: return "2sls_van";
    case Downstream::TwoSlsPoly: return "2sls_poly";
    case Downstream::TwoSlsNn: return "2sls_nn";
    case Downstream::KernelIv: return "kerneliv";
  }
  return "?";
}

Instrument instrument_from_string(const std::string& s) {
  for (auto i : {Instrument::None, Instrument::RandIv, Instrument::TrueIv, Instrument::Uas,
                 Instrument::Was, Instrument::AutoIv})
    if (to_string(i) == s) return i;
  throw ContractViolation("unknown instrument source '" + s + "'");
}

Downstream downstream_from_string(const std::string& s) {
  for (auto d : {Downstream::DirectNn, Downstream::TwoSlsVan, Downstream::TwoSlsPoly,
                 Downstream::TwoSlsNn, Downstream::KernelIv})
    if (to_string(d) == s) return d;
  throw ContractViolation("unknown downstream method '" + s + "'");
}

const std::vector<std::string>& autoiv_variants() {
  static const std::vector<std::string> v = {"full", "no_z_mi", "no_c_mi", "no_zc_reg",
                                             "no_two_stage"};
  return v;
}

mi::Ablation variant_ablation(const std::string& variant) {
  mi::Ablation a;
  if (variant == "full") return a;
  if (variant == "no_z_mi") a.disable_z_mi = true;
  else if (variant == "no_c_mi") a.disable_c_mi = true;
  else if (variant == "no_zc_reg") a.disable_zc_reg = true;
  else if (variant == "no_two_stage") a.disable_two_stage = true;
  else throw ContractViolation("unknown AutoIV variant '" + variant + "'");
  return a;
}

std::string MethodCell::instrument_label() const {
  if (instrument == Instrument::AutoIv && variant != "full") return "autoiv-" + variant;
  return to_string(instrument);
}

std::vector<MethodCell> table1_methods(const std::vector<Downstream>& downstreams) {
  using data::Regime;
  std::vector<MethodCell> out;
  for (auto d : downstreams) {
    if (d == Downstream::DirectNn) {
      out.push_back({Instrument::None, Regime::WithZ, d, "full"});
      continue;
    }
    out.push_back({Instrument::RandIv, Regime::WithZ, d, "full"});
    out.push_back({Instrument::TrueIv, Regime::WithZ, d, "full"});
    for (auto i : {Instrument::Uas, Instrument::Was, Instrument::AutoIv})
      for (auto r : {Regime::WithoutZ, Regime::WithZ}) out.push_back({i, r, d, "full"});
  }
  return out;
}

bool operator==(const DownstreamConfig& a, const DownstreamConfig& b) {
  return downstream_json(a) == downstream_json(b);
}

bool operator==(const ExperimentPlan& a, const ExperimentPlan& b) {
  nlohmann::json ja, jb;
  to_json(ja, a);
  to_json(jb, b);
  return ja == jb;
}

void ExperimentPlan::validate() const {
  if (scenarios.empty() || responses.empty() || methods.empty() || seeds.empty()) {
    throw ContractViolation("ExperimentPlan: scenarios, responses, methods and seeds must be non-empty");
  }
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) throw ContractViolation("ExperimentPlan: duplicate seeds");
  std::set<std::string> cells;
  for (const auto& c : methods)
    if (!cells.insert(cell_id(c)).second) {
      throw ContractViolation("ExperimentPlan: duplicate method cell " + cell_id(c));
    }
  if (grid_size < 2) throw ContractViolation("ExperimentPlan: grid_size must be >= 2");
  if (jobs < 1) throw ContractViolation("ExperimentPlan: jobs must be >= 1");
  data::DgpSpec probe = dgp;
  for (auto s : scenarios) {
    probe.scenario = s;
    probe.validate();
  }
  autoiv.validate(dgp.n_train);
  for (const auto& s : sweeps)
    if (s.values.empty()) throw ContractViolation("ExperimentPlan: sweep axis without values");
}

std::string ExperimentPlan::hash() const {
  nlohmann::json j;
  to_json(j, *this);
  j.erase("seeds");
  j.erase("out_dir");
  j.erase("jobs");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  nlohmann::json scen = nlohmann::json::array(), resp = nlohmann::json::array(),
                 methods = nlohmann::json::array(), sweeps = nlohmann::json::array();
  for (auto s : p.scenarios) scen.push_back(data::to_string(s));
  for (auto r : p.responses) resp.push_back(data::to_string(r));
  for (const auto& c : p.methods) methods.push_back(cell_json(c));
  for (const auto& s : p.sweeps) sweeps.push_back({{"axis", s.axis}, {"values", s.values}});
  j = {{"dgp", p.dgp},
       {"scenarios", scen},
       {"responses", resp},
       {"methods", methods},
       {"seeds", p.seeds},
       {"autoiv", p.autoiv},
       {"downstream", downstream_json(p.downstream)},
       {"sweeps", sweeps},
       {"grid_size", p.grid_size},
       {"out_dir", p.out_dir},
       {"jobs", p.jobs},
       {"save_models", p.save_models}};
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  if (j.contains("dgp")) j.at("dgp").get_to(p.dgp);
  if (j.contains("scenarios")) {
    p.scenarios.clear();
    for (const auto& s : j.at("scenarios"))
      p.scenarios.push_back(data::scenario_from_string(s.get<std::string>()));
  }
  if (j.contains("responses")) {
    p.responses.clear();
    for (const auto& r : j.at("responses"))
      p.responses.push_back(data::response_from_string(r.get<std::string>()));
  }
  if (j.contains("methods")) {
    const auto& m = j.at("methods");
    p.methods.clear();
    if (m.is_string()) {
      if (m.get<std::string>() != "table1") {
        throw ContractViolation("plan: methods must be a list or \"table1\"");
      }
      p.methods = table1_methods({Downstream::DirectNn, Downstream::TwoSlsVan, Downstream::TwoSlsPoly,
                                  Downstream::TwoSlsNn, Downstream::KernelIv});
    } else {
      for (const auto& c : m) p.methods.push_back(cell_from(c));
    }
  }
  if (j.contains("seeds")) j.at("seeds").get_to(p.seeds);
  if (j.contains("autoiv")) j.at("autoiv").get_to(p.autoiv);
  if (j.contains("downstream")) downstream_from(j.at("downstream"), p.downstream);
  if (j.contains("sweeps")) {
    p.sweeps.clear();
    for (const auto& s : j.at("sweeps"))
      p.sweeps.push_back({s.at("axis").get<std::string>(), s.at("values").get<std::vector<double>>()});
  }
  if (j.contains("grid_size")) j.at("grid_size").get_to(p.grid_size);
  if (j.contains("out_dir")) j.at("out_dir").get_to(p.out_dir);
  if (j.contains("jobs")) j.at("jobs").get_to(p.jobs);
  if (j.contains("save_models")) j.at("save_models").get_to(p.save_models);
}

ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan " + path.string());
  ExperimentPlan p;
  try {
    p = nlohmann::json::parse(in).get<ExperimentPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("plan " + path.string() + ": " + e.what());
  }
  return p;
}

std::string make_run_id(data::Scenario s, data::Response r, const MethodCell& c,
                        std::uint64_t seed) {
  return data::to_string(s) + "." + data::to_string(r) + "." + data::to_string(c.regime) + "." +
         c.instrument_label() + "." + to_string(c.downstream) + ".s" + std::to_string(seed);
}

std::uint64_t dataset_seed(std::uint64_t seed, data::Scenario s, data::Response r) {
  return derive_seed(seed, data::to_string(s) + "/" + data::to_string(r));
}

double structural_curve(const data::StandardizationStats& stats, data::Response r, double offset,
                        double x_standardized) {
  const double x = x_standardized * stats.x.std[0] + stats.x.mean[0];
  return (data::response_function(r, x) + offset - stats.y.mean[0]) / stats.y.std[0];
}

namespace {

struct Prepared {
  data::Splits raw, std;
  data::StandardizationStats stats;
  double curve_offset = 0.0;
};

struct LearnedReps {
  Tensor z_train, c_train, c_test;
  std::string error;
  std::string model_path;
};

class Group {
 public:
  Group(const ExperimentPlan& plan, data::Scenario s, data::Response r, std::uint64_t seed)
      : plan_(plan), scenario_(s), response_(r), seed_(seed), data_seed_(dataset_seed(seed, s, r)) {}

  RunRecord run(const MethodCell& cell) {
    RunRecord rec;
    rec.run_id = make_run_id(scenario_, response_, cell, seed_);
    rec.scenario = scenario_;
    rec.response = response_;
    rec.cell = cell;
    rec.seed = seed_;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const ds::EvalReport report = evaluate_cell(cell, rec);
      rec.mse_test = report.mse_test;
      if (!std::isfinite(rec.mse_test)) throw NumericError("non-finite test MSE");
      const auto dir = std::filesystem::path(plan_.out_dir) / "curves";
      ensure_dir(dir);
      write_curve_csv(report, dir / (rec.run_id + ".csv"));
    } catch (const std::exception& e) {
      rec.error = e.what();
      if (rec.error.empty()) rec.error = "unknown failure";
      rec.mse_test = std::numeric_limits<double>::quiet_NaN();
    }
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

 private:
  const Prepared& prepared(data::Regime regime) {
    auto it = prepared_.find(regime);
    if (it != prepared_.end()) return it->second;
    data::DgpSpec spec = plan_.dgp;
    spec.scenario = scenario_;
    spec.response = response_;
    spec.regime = regime;
    Prepared p;
    p.raw = data::generate_splits(spec, data_seed_);
    auto [s, stats] = data::standardize(p.raw);
    p.std = std::move(s);
    p.stats = std::move(stats);
    const auto& t = p.raw.test;
    double off = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i)
      off += t.y_structural[i] - data::response_function(response_, t.x[i]);
    p.curve_offset = off / static_cast<double>(t.rows());
    return prepared_.emplace(regime, std::move(p)).first->second;
  }

  const LearnedReps& learned(data::Regime regime, const std::string& variant) {
    const auto key = std::make_pair(regime, variant);
    auto it = reps_.find(key);
    if (it != reps_.end()) return it->second;
    LearnedReps reps;
    try {
      const Prepared& p = prepared(regime);
      AutoIvConfig cfg = plan_.autoiv;
      cfg.seed = derive_seed(data_seed_, "autoiv/" + data::to_string(regime));
      cfg.ablation = variant_ablation(variant);
      const AutoIvModel model = train_autoiv(p.std.train, &p.std.valid, cfg);
      auto [zt, ct] = extract_representations(model, p.std.train.v);
      reps.z_train = std::move(zt);
      reps.c_train = std::move(ct);
      reps.c_test = extract_representations(model, p.std.test.v).second;
      if (plan_.save_models) {
        const auto dir = std::filesystem::path(plan_.out_dir) / "models";
        const auto prefix = dir / (data::to_string(scenario_) + "." + data::to_string(response_) +
                                   "." + data::to_string(regime) + "." + variant + ".s" +
                                   std::to_string(seed_));
        save_model(model, prefix);
        reps.model_path = prefix.string();
      }
    } catch (const std::exception& e) {
      reps.error = std::string("AutoIV training failed: ") + e.what();
    }
    return reps_.emplace(key, std::move(reps)).first->second;
  }

  ds::EvalReport evaluate_cell(const MethodCell& cell, RunRecord& rec) {
    const Prepared& p = prepared(cell.regime);
    const auto& train = p.std.train;
    const auto& test = p.std.test;
    const DownstreamConfig& dc = plan_.downstream;
    const std::uint64_t method_seed = derive_seed(data_seed_, rec.run_id.substr(0, rec.run_id.rfind(".s")));

    ds::InstrumentBundle bundle{Tensor(train.rows(), 0), train.exogenous_extra};
    Tensor test_exog = test.exogenous_extra;
    switch (cell.instrument) {
      case Instrument::None: break;
      case Instrument::TrueIv: bundle.instrument = train.true_iv; break;
      case Instrument::RandIv: {
        data::DgpSpec spec = plan_.dgp;
        spec.scenario = scenario_;
        spec.response = response_;
        spec.regime = cell.regime;
        bundle.instrument = data::apply_stats(
            data::draw_random_iv(spec, train.rows(), derive_seed(data_seed_, "randiv")), p.stats.true_iv);
        break;
      }
      case Instrument::Uas: bundle.instrument = ds::uas_summary(train.v); break;
      case Instrument::Was: bundle.instrument = ds::was_summary(train.v, train.x); break;
      case Instrument::AutoIv: {
        const LearnedReps& reps = learned(cell.regime, cell.variant);
        if (!reps.error.empty()) throw FitError(reps.error);
        rec.model_path = reps.model_path;
        bundle.instrument = reps.z_train;
        bundle.exogenous = hconcat(reps.c_train, train.exogenous_extra);
        test_exog = hconcat(reps.c_test, test.exogenous_extra);
        break;
      }
    }

    std::unique_ptr<ds::FittedEstimator> fitted;
    switch (cell.downstream) {
      case Downstream::DirectNn: {
        ds::NnOptions o = dc.direct;
        o.seed = method_seed;
        fitted = ds::direct_nn_fit(train.x, train.y, bundle.exogenous, o);
        break;
      }
      case Downstream::TwoSlsVan: fitted = ds::twosls_van_fit(bundle, train.x, train.y); break;
      case Downstream::TwoSlsPoly:
        fitted = ds::twosls_poly_fit(bundle, train.x, train.y, dc.poly_degree, dc.poly_ridge);
        break;
      case Downstream::TwoSlsNn: {
        ds::NnOptions a = dc.nn_stage1, b = dc.nn_stage2;
        a.seed = derive_seed(method_seed, "stage1");
        b.seed = derive_seed(method_seed, "stage2");
        fitted = ds::twosls_nn_fit(bundle, train.x, train.y, a, b);
        break;
      }
      case Downstream::KernelIv: fitted = ds::kerneliv_fit(bundle, train.x, train.y, dc.kernel); break;
    }
    const data::StandardizationStats& stats = p.stats;
    const double offset = p.curve_offset;
    const data::Response resp = response_;
    return ds::evaluate(*fitted, test.x, test_exog, test.y_structural, plan_.grid_size,
                        [&stats, offset, resp](double x) { return structural_curve(stats, resp, offset, x); });
  }

  const ExperimentPlan& plan_;
  data::Scenario scenario_;
  data::Response response_;
  std::uint64_t seed_;
  std::uint64_t data_seed_;
  std::map<data::Regime, Prepared> prepared_;
  std::map<std::pair<data::Regime, std::string>, LearnedReps> reps_;
};

struct GroupTask {
  data::Scenario scenario;
  data::Response response;
  std::uint64_t seed;
  std::vector<MethodCell> todo;
};

std::map<std::string, RunRecord> load_existing(const std::filesystem::path& dir,
                                               const std::string& hash) {
  std::map<std::string, RunRecord> out;
  const auto results = dir / "results.csv";
  if (!std::filesystem::exists(results)) return out;
  const auto manifest = dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed " + manifest.string() + ": " + e.what());
    }
    if (doc.value("plan_hash", std::string{}) != hash) {
      throw IoError(dir.string() + " holds records of a different plan (hash " +
                    doc.value("plan_hash", std::string{"?"}) + "); use another --out");
    }
  }
  for (auto& r : read_results_csv(results))
    if (r.ok() && std::isfinite(r.mse_test)) out.emplace(r.run_id, std::move(r));
  return out;
}

void write_failures(const std::vector<RunRecord>& records, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "run_id,error\n";
  for (const auto& r : records)
    if (!r.ok()) out << r.run_id << "," << sanitize(r.error) << "\n";
}

}  // namespace

RunSummary run_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const std::filesystem::path dir(plan.out_dir);
  ensure_dir(dir);
  const std::string hash = plan.hash();
  std::map<std::string, RunRecord> done = load_existing(dir, hash);

  // record the plan first so an interrupted run can be resumed
  {
    RunSummary pending;
    write_manifest(plan, pending, dir / "manifest.json");
  }

  std::vector<GroupTask> tasks;
  for (auto s : plan.scenarios)
    for (auto r : plan.responses)
      for (auto seed : plan.seeds) {
        GroupTask t{s, r, seed, {}};
        for (const auto& c : plan.methods)
          if (!done.count(make_run_id(s, r, c, seed))) t.todo.push_back(c);
        if (!t.todo.empty()) tasks.push_back(std::move(t));
      }

  std::mutex sink;
  std::vector<RunRecord> fresh;
  auto append = open_out(dir / "results.csv", std::ios::app);
  if (std::filesystem::file_size(dir / "results.csv") == 0) append << kResultsHeader << "\n";

  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= tasks.size()) return;
      const GroupTask& t = tasks[k];
      try {
        Group group(plan, t.scenario, t.response, t.seed);
        for (const auto& c : t.todo) {
          RunRecord rec = group.run(c);
          std::lock_guard<std::mutex> lock(sink);
          append << csv_line(rec) << "\n" << std::flush;
          fresh.push_back(std::move(rec));
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(sink);
        if (!fatal) fatal = std::current_exception();
        return;
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(plan.jobs, tasks.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  append.close();
  if (fatal) std::rethrow_exception(fatal);

  RunSummary summary;
  summary.computed = fresh.size();
  std::map<std::string, RunRecord> all = std::move(done);
  for (auto& r : fresh) all.insert_or_assign(r.run_id, std::move(r));
  for (auto s : plan.scenarios)
    for (auto r : plan.responses)
      for (const auto& c : plan.methods)
        for (auto seed : plan.seeds) {
          auto it = all.find(make_run_id(s, r, c, seed));
          if (it == all.end()) continue;
          if (!it->second.ok()) ++summary.failed;
          summary.records.push_back(it->second);
        }

  write_results_csv(summary.records, dir / "results.csv");
  write_failures(summary.records, dir / "failures.csv");
  write_summary_csv(aggregate(summary.records, &plan), dir / "summary.csv");
  write_manifest(plan, summary, dir / "manifest.json");
  return summary;
}

std::vector<SummaryRow> aggregate(const std::vector<RunRecord>& records, const ExperimentPlan* plan) {
  std::map<CellKey, std::vector<double>> values;
  std::map<CellKey, SummaryRow> rows;
  auto touch = [&](data::Scenario s, data::Response r, const MethodCell& c) -> SummaryRow& {
    const CellKey key{s, r, cell_id(c)};
    auto it = rows.find(key);
    if (it == rows.end()) {
      SummaryRow row{s, r, c};
      it = rows.emplace(key, row).first;
      values[key];
    }
    return it->second;
  };
  if (plan != nullptr)
    for (auto s : plan->scenarios)
      for (auto r : plan->responses)
        for (const auto& c : plan->methods) touch(s, r, c);
  for (const auto& rec : records) {
    touch(rec.scenario, rec.response, rec.cell);
    if (rec.ok() && std::isfinite(rec.mse_test))
      values[CellKey{rec.scenario, rec.response, cell_id(rec.cell)}].push_back(rec.mse_test);
  }

  std::vector<SummaryRow> out;
  for (auto& [key, row] : rows) {
    std::vector<double> v = values[key];
    std::sort(v.begin(), v.end());  // order-independent summation
    row.n = v.size();
    row.missing = v.empty();
    row.single_seed = v.size() == 1;
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      row.mean = sum / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - row.mean) * (x - row.mean);
      row.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    } else {
      row.mean = row.std = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(row);
  }
  std::stable_sort(out.begin(), out.end(), [](const SummaryRow& a, const SummaryRow& b) {
    if (a.scenario != b.scenario) return a.scenario < b.scenario;
    if (cell_less(a.cell, b.cell)) return true;
    if (cell_less(b.cell, a.cell)) return false;
    return a.response < b.response;
  });
  return out;
}

std::string format_table(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  std::vector<data::Scenario> scenarios;
  std::vector<data::Response> responses;
  for (const auto& r : rows) {
    if (std::find(scenarios.begin(), scenarios.end(), r.scenario) == scenarios.end())
      scenarios.push_back(r.scenario);
    if (std::find(responses.begin(), responses.end(), r.response) == responses.end())
      responses.push_back(r.response);
  }
  std::sort(scenarios.begin(), scenarios.end());
  std::sort(responses.begin(), responses.end());

  auto cell_text = [](const SummaryRow& r) {
    if (r.missing) return std::string("missing");
    std::string s = fmt_double(r.mean, "%.2f") + "+-" + fmt_double(r.std, "%.2f");
    if (r.single_seed) s += "*";
    return s;
  };
  char buf[64];
  for (auto s : scenarios) {
    os << "scenario: " << data::to_string(s) << "\n";
    std::snprintf(buf, sizeof buf, "%-12s %-26s", "method", "IV");
    os << buf;
    for (auto r : responses) {
      std::snprintf(buf, sizeof buf, " %-14s", data::to_string(r).c_str());
      os << buf;
    }
    os << "\n";
    std::vector<MethodCell> cells;
    for (const auto& row : rows)
      if (row.scenario == s &&
          std::find(cells.begin(), cells.end(), row.cell) == cells.end())
        cells.push_back(row.cell);
    std::stable_sort(cells.begin(), cells.end(), cell_less);
    Downstream last = Downstream::KernelIv;
    bool first = true;
    for (const auto& c : cells) {
      std::string iv = c.instrument == Instrument::None ? "-" : c.instrument_label();
      if (c.instrument == Instrument::Uas || c.instrument == Instrument::Was ||
          c.instrument == Instrument::AutoIv)
        iv += c.regime == data::Regime::WithZ ? " (w/ Z)" : " (w/o Z)";
      std::snprintf(buf, sizeof buf, "%-12s %-26s",
                    (first || c.downstream != last) ? to_string(c.downstream).c_str() : "",
                    iv.c_str());
      os << buf;
      first = false;
      last = c.downstream;
      for (auto r : responses) {
        std::string text = "";
        for (const auto& row : rows)
          if (row.scenario == s && row.response == r && row.cell == c) text = cell_text(row);
        std::snprintf(buf, sizeof buf, " %-14s", text.c_str());
        os << buf;
      }
      os << "\n";
    }
    os << "\n";
  }
  os << "* single seed (std reported as 0)\n";
  return os.str();
}

void write_results_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kResultsHeader << "\n";
  for (const auto& r : records) out << csv_line(r) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<RunRecord> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw IoError(path.string() + ": unexpected header");
  }
  std::vector<RunRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 9) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 9 fields");
    }
    try {
      RunRecord r;
      r.run_id = f[0];
      r.scenario = data::scenario_from_string(f[1]);
      r.response = data::response_from_string(f[2]);
      r.cell.regime = data::regime_from_string(f[3]);
      const std::string& label = f[4];
      const auto dash = label.find('-');
      r.cell.instrument = instrument_from_string(label.substr(0, dash));
      r.cell.variant = dash == std::string::npos ? "full" : label.substr(dash + 1);
      variant_ablation(r.cell.variant);
      r.cell.downstream = downstream_from_string(f[5]);
      r.seed = std::stoull(f[6]);
      r.mse_test = f[7] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[7]);
      r.wall_ms = std::stod(f[8]);
      if (std::isnan(r.mse_test)) r.error = "failed";
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "scenario,response,regime,instrument,downstream,n,mean_mse,std_mse,single_seed,missing\n";
  for (const auto& r : rows) {
    out << data::to_string(r.scenario) << "," << data::to_string(r.response) << ","
        << data::to_string(r.cell.regime) << "," << r.cell.instrument_label() << ","
        << to_string(r.cell.downstream) << "," << r.n << "," << fmt_double(r.mean) << ","
        << fmt_double(r.std) << "," << (r.single_seed ? 1 : 0) << "," << (r.missing ? 1 : 0)
        << "\n";
  }
}

void write_curve_csv(const ds::EvalReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "x,g_true,g_hat\n";
  for (std::size_t k = 0; k < report.curve_x.size(); ++k) {
    out << fmt_double(report.curve_x[k]) << "," << fmt_double(report.curve_g_true[k]) << ","
        << fmt_double(report.curve_g_hat[k]) << "\n";
  }
}

void write_manifest(const ExperimentPlan& plan, const RunSummary& summary,
                    const std::filesystem::path& path) {
  nlohmann::json models = nlohmann::json::object();
  for (const auto& r : summary.records)
    if (!r.model_path.empty()) models[r.run_id] = r.model_path;
  const nlohmann::json doc = {
      {"format", kManifestFormat},
      {"plan", plan},
      {"plan_hash", plan.hash()},
      {"seeds", plan.seeds},
      {"versions",
       {{"autoiv", kVersion},
        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                      "." + std::to_string(EIGEN_MINOR_VERSION)},
        {"compiler", __VERSION__}}},
      {"records", summary.records.size()},
      {"failed", summary.failed},
      {"models", models}};
  auto out = open_out(path);
  out << doc.dump(2) << "\n";
}

ExperimentPlan read_manifest_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.value("format", std::string{}) != kManifestFormat) {
      throw IoError(path.string() + ": unsupported manifest format");
    }
    return doc.at("plan").get<ExperimentPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<RunRecord> run_sweep(const ExperimentPlan& plan, const SweepAxis& axis) {
  if (axis.values.empty()) throw ContractViolation("sweep: no values for axis " + axis.axis);
  const std::filesystem::path root(plan.out_dir);
  ensure_dir(root);
  std::vector<RunRecord> all;
  auto out = open_out(root / ("sweep_" + axis.axis + ".csv"));
  out << "axis,value," << kResultsHeader << "\n";
  for (double v : axis.values) {
    ExperimentPlan p = plan;
    p.sweeps.clear();
    if (axis.axis == "rep_dim") {
      if (v < 1 || v != std::floor(v)) throw ContractViolation("sweep: rep_dim must be a positive integer");
      p.autoiv.rep_dim = static_cast<std::size_t>(v);
    } else if (axis.axis == "n_train") {
      if (v < 2 || v != std::floor(v)) throw ContractViolation("sweep: n_train must be an integer >= 2");
      p.dgp.n_train = static_cast<std::size_t>(v);
      p.autoiv.batch_size = std::min(p.autoiv.batch_size, p.dgp.n_train);
    } else if (axis.axis == "alpha") {
      p.autoiv.alpha = v;
    } else if (axis.axis == "eta") {
      p.autoiv.eta = v;
    } else {
      throw ContractViolation("sweep: unknown axis '" + axis.axis + "' (rep_dim, n_train, alpha, eta)");
    }
    const std::string tag = fmt_double(v, "%g");
    p.out_dir = (root / (axis.axis + "=" + tag)).string();
    RunSummary s = run_experiment(p);
    for (auto& r : s.records) {
      out << axis.axis << "," << tag << "," << csv_line(r) << "\n";
      all.push_back(std::move(r));
    }
  }
  return all;
}

}  // namespace autoiv::harness
