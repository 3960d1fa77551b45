// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 only
// when every line passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "autoiv/datagen.hpp"
#include "autoiv/downstream.hpp"
#include "autoiv/harness.hpp"
#include "autoiv/linalg.hpp"
#include "autoiv/mi.hpp"
#include "autoiv/nets.hpp"
#include "autoiv/optim.hpp"

using namespace autoiv;
using namespace autoiv::harness;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// The pinned reduced AutoIV setup used for every AutoIV run below.
AutoIvConfig acceptance_autoiv() {
  AutoIvConfig c;
  c.rep_hidden = {32, 32};
  c.head_hidden = {32, 32};
  c.regression_hidden = {32, 32};
  c.emb_hidden = {16};
  c.epochs = 600;
  return c;
}

ExperimentPlan base_plan(const fs::path& out, std::size_t n_seeds) {
  ExperimentPlan p;
  p.autoiv = acceptance_autoiv();
  p.seeds.clear();
  for (std::uint64_t s = 0; s < n_seeds; ++s) p.seeds.push_back(s);
  p.out_dir = out.string();
  p.grid_size = 100;
  return p;
}

MethodCell cell(Instrument i, data::Regime r, Downstream d, std::string variant = "full") {
  return {i, r, d, std::move(variant)};
}

using Means = std::map<std::string, SummaryRow>;

// summary rows keyed by "<response>/<instrument label>/<regime>/<downstream>"
Means summarize(const RunSummary& s, const ExperimentPlan& p) {
  Means m;
  for (const auto& r : aggregate(s.records, &p)) {
    m[data::to_string(r.response) + "/" + r.cell.instrument_label() + "/" +
      data::to_string(r.cell.regime) + "/" + to_string(r.cell.downstream)] = r;
  }
  return m;
}

const SummaryRow& get(const Means& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::runtime_error("no summary row " + key);
  return it->second;
}

std::string row_text(const SummaryRow& r) {
  if (r.missing) return "missing";
  return fmt("%.4f", r.mean) + "+-" + fmt("%.4f", r.std) + " (n=" + std::to_string(r.n) + ")";
}

bool complete(const SummaryRow& r, std::size_t n) { return !r.missing && r.n == n; }

RunSummary run_plan(const ExperimentPlan& p, const char* name) {
  auto t0 = std::chrono::steady_clock::now();
  auto s = run_experiment(p);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "[%s] %zu records, %zu computed, %zu failed, %.0f s\n", name, s.records.size(),
               s.computed, s.failed, sec);
  std::ofstream(fs::path(p.out_dir) / "table.txt") << format_table(aggregate(s.records, &p));
  return s;
}

// ---- property criteria ----

Outcome gradient_check() {
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<int> dim(1, 4), depth(0, 3), width(1, 8), act(0, 1);
  std::normal_distribution<double> nd(0, 1);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    nn::MlpSpec spec;
    spec.input_dim = dim(rng);
    spec.output_dim = dim(rng);
    spec.hidden.assign(depth(rng), 0);
    for (auto& h : spec.hidden) h = width(rng);
    spec.activation = act(rng) ? nn::Activation::Tanh : nn::Activation::Elu;
    ParameterStore store;
    auto net = nn::Mlp::create(store, spec, "m", rng());
    // nonzero biases so every unit sits at a generic point
    for (std::size_t l = 0; l < net.layers(); ++l)
      for (auto& v : store.value(net.bias(l)).data()) v = 0.3 * nd(rng);
    Tensor in(5, spec.input_dim), target(5, spec.output_dim);
    for (auto& v : in.data()) v = nd(rng);
    for (auto& v : target.data()) v = nd(rng);

    auto loss_of = [&](Graph& g) {
      NodeId out = net.forward(g, store, g.constant(in), true);
      return g.mean(g.square(g.sub(out, g.constant(target))));
    };
    Graph g;
    auto grads = gradients_by_param(g, backward(g, loss_of(g)));
    const double h = 1e-6;
    for (auto id : net.params()) {
      for (std::size_t k = 0; k < store.value(id).size(); ++k) {
        const double orig = store.value(id)[k];
        store.value(id)[k] = orig + h;
        Graph gp;
        const double fp = gp.value(loss_of(gp)).item();
        store.value(id)[k] = orig - h;
        Graph gm;
        const double fm = gm.value(loss_of(gm)).item();
        store.value(id)[k] = orig;
        const double fd = (fp - fm) / (2 * h);
        const double ad = grads.at(id)[k];
        // relative error, floored so vanishing gradients are compared absolutely
        const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-3});
        worst = std::max(worst, rel);
      }
    }
  }
  return {worst <= 1e-4, "max relative error " + fmt("%.2e", worst) + " over 100 networks"};
}

double trained_gap(const Tensor& a, const Tensor& b) {
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, nn::MlpSpec{1, 1, {16}, nn::Activation::Elu}, "h", 7);
  AdamState st(AdamOptions{1e-2});
  for (int step = 0; step < 2000; ++step) {
    Graph g;
    auto loss = mi::lld_loss(g, store, head, g.constant(a), g.constant(b));
    adam_step(store, gradients_by_param(g, backward(g, loss)), st);
    head.clamp_log_var(store);
  }
  return mi::gap_statistic(nn::cross_loglik_matrix(store, head, a, b));
}

Outcome mi_sanity() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0, 1);
  const std::size_t n = 512;
  Tensor a(n, 1), indep(n, 1);
  for (auto& v : a.data()) v = nd(rng);
  for (auto& v : indep.data()) v = nd(rng);
  const double g_ind = trained_gap(a, indep), g_same = trained_gap(a, a);
  return {std::abs(g_ind) <= 0.1 && g_same >= 1.0,
          "independent gap " + fmt("%.4f", g_ind) + ", identical gap " + fmt("%.4f", g_same)};
}

Outcome pair_weights() {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> size(1, 64);
  std::uniform_real_distribution<double> scale(0.01, 10.0), sig(0.05, 2.0);
  std::normal_distribution<double> nd(0, 1);
  double worst_sum = 0, min_entry = INFINITY;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = size(rng);
    const double s = scale(rng);
    Tensor x(n, 1);
    for (auto& v : x.data()) v = s * nd(rng);
    auto w = mi::rbf_pair_weights(x, sig(rng));
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        row += w.omega(i, j);
        min_entry = std::min(min_entry, w.omega(i, j));
      }
      worst_sum = std::max(worst_sum, std::abs(row - 1.0));
    }
  }
  return {worst_sum <= 1e-10 && min_entry > 0.0,
          "max |row sum - 1| " + fmt("%.2e", worst_sum) + ", min entry " + fmt("%.2e", min_entry)};
}

Outcome twosls_oracle() {
  data::DgpSpec spec;
  spec.scenario = data::Scenario::BasicLowDim;
  spec.response = data::Response::Linear;
  spec.noise_scale = 1.0;
  auto d = data::gen_basic(spec, 10000, 2024);
  auto est = ds::twosls_van_fit({d.true_iv, Tensor(d.rows(), 0)}, d.x, d.y);
  const double iv = est->treatment_coefficient();
  Tensor ols = least_squares(hconcat(d.x, Tensor(d.rows(), 1, 1.0)), d.y, "ols");
  const double bias = std::abs(ols[0] + 1.0);
  return {std::abs(iv + 1.0) <= 0.05 && bias >= 0.1,
          "2SLS " + fmt("%.4f", iv) + ", OLS " + fmt("%.4f", ols[0]) + " (bias " + fmt("%.4f", bias) + ")"};
}

std::vector<std::string> results_without_wall(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l.substr(0, l.rfind(',')));
  return out;
}

Outcome determinism(const fs::path& root) {
  ExperimentPlan p = base_plan(root / "det_a", 2);
  p.autoiv.epochs = 60;
  p.responses = {data::Response::Abs, data::Response::Step};
  p.downstream.direct.epochs = 30;
  p.downstream.nn_stage1.epochs = p.downstream.nn_stage2.epochs = 30;
  p.methods = {cell(Instrument::None, data::Regime::WithZ, Downstream::DirectNn),
               cell(Instrument::RandIv, data::Regime::WithZ, Downstream::TwoSlsPoly),
               cell(Instrument::Was, data::Regime::WithoutZ, Downstream::TwoSlsNn),
               cell(Instrument::AutoIv, data::Regime::WithZ, Downstream::TwoSlsVan),
               cell(Instrument::AutoIv, data::Regime::WithZ, Downstream::KernelIv, "no_c_mi")};
  fs::remove_all(p.out_dir);
  run_plan(p, "determinism a");
  ExperimentPlan q = p;
  q.out_dir = (root / "det_b").string();
  fs::remove_all(q.out_dir);
  run_plan(q, "determinism b");
  auto a = results_without_wall(fs::path(p.out_dir) / "results.csv");
  auto b = results_without_wall(fs::path(q.out_dir) / "results.csv");
  return {a == b && a.size() == 21, std::to_string(a.size() - 1) + " rows, identical: " + (a == b ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string out = "acceptance_out";
  std::size_t seeds = 10;
  bool resume = false;
  app.add_option("--out", out, "scratch directory for experiment outputs");
  app.add_option("--seeds", seeds, "seeds per experiment criterion");
  app.add_flag("--resume", resume, "keep records from a previous run in --out");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(out);
  if (!resume) fs::remove_all(root);
  fs::create_directories(root);

  std::vector<std::pair<std::string, Outcome>> lines;
  auto record = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    lines.emplace_back(name, o);
  };

  const auto W = data::Regime::WithZ, WO = data::Regime::WithoutZ;
  const std::string n_str = std::to_string(seeds);

  // linear response, AutoIV under 2SLS(poly)
  ExperimentPlan lin = base_plan(root / "linear", seeds);
  lin.responses = {data::Response::Linear};
  lin.methods = {cell(Instrument::AutoIv, W, Downstream::TwoSlsPoly)};
  Means lin_m;
  // abs response: every cell criteria 2-5 read
  ExperimentPlan abs = base_plan(root / "abs", seeds);
  abs.responses = {data::Response::Abs};
  abs.methods = {cell(Instrument::AutoIv, W, Downstream::TwoSlsPoly),
                 cell(Instrument::RandIv, W, Downstream::TwoSlsPoly),
                 cell(Instrument::None, W, Downstream::DirectNn),
                 cell(Instrument::TrueIv, W, Downstream::TwoSlsVan),
                 cell(Instrument::Was, W, Downstream::TwoSlsVan),
                 cell(Instrument::Was, WO, Downstream::TwoSlsVan)};
  for (const auto& v : autoiv_variants()) abs.methods.push_back(cell(Instrument::AutoIv, W, Downstream::KernelIv, v));
  Means abs_m;

  record("criterion 1 (linear recovery, AutoIV w/ Z + 2SLS poly, mean MSE <= 0.05)", [&] {
    lin_m = summarize(run_plan(lin, "linear"), lin);
    const auto& r = get(lin_m, "linear/autoiv/with_z/2sls_poly");
    return Outcome{complete(r, seeds) && r.mean <= 0.05, "mean MSE " + row_text(r)};
  });

  record("criterion 2 (abs, AutoIV w/ Z <= 0.5 x RandIV under 2SLS poly)", [&] {
    abs_m = summarize(run_plan(abs, "abs"), abs);
    const auto& a = get(abs_m, "abs/autoiv/with_z/2sls_poly");
    const auto& r = get(abs_m, "abs/randiv/with_z/2sls_poly");
    return Outcome{complete(a, seeds) && complete(r, seeds) && a.mean <= 0.5 * r.mean,
                   "AutoIV " + row_text(a) + ", RandIV " + row_text(r) + ", ratio " +
                       fmt("%.3f", a.mean / r.mean)};
  });

  record("criterion 3 (abs, DirectNN >= 2 x TrueIV 2SLS van)", [&] {
    const auto& d = get(abs_m, "abs/none/with_z/direct_nn");
    const auto& t = get(abs_m, "abs/trueiv/with_z/2sls_van");
    return Outcome{complete(d, seeds) && complete(t, seeds) && d.mean >= 2.0 * t.mean,
                   "DirectNN " + row_text(d) + ", TrueIV " + row_text(t) + ", ratio " +
                       fmt("%.3f", d.mean / t.mean)};
  });

  record("criterion 4 (abs, WAS w/ Z < WAS w/o Z under 2SLS van)", [&] {
    const auto& w = get(abs_m, "abs/was/with_z/2sls_van");
    const auto& wo = get(abs_m, "abs/was/without_z/2sls_van");
    return Outcome{complete(w, seeds) && complete(wo, seeds) && w.mean < wo.mean,
                   "w/ Z " + row_text(w) + ", w/o Z " + row_text(wo)};
  });

  record("criterion 5 (abs, KernelIV: every single ablation worse than full AutoIV)", [&] {
    const auto& full = get(abs_m, "abs/autoiv/with_z/kerneliv");
    bool ok = complete(full, seeds);
    std::string detail = "full " + row_text(full) + (std::abs(full.mean - 0.9) <= 0.3 ? " [in 0.90+-0.3 band]" : " [outside 0.90+-0.3 band]");
    for (const auto& v : autoiv_variants()) {
      if (v == "full") continue;
      const auto& r = get(abs_m, "abs/autoiv-" + v + "/with_z/kerneliv");
      ok = ok && complete(r, seeds) && r.mean > full.mean;
      detail += "; " + v + " " + fmt("%.4f", r.mean) + (r.mean > full.mean ? " (worse)" : " (not worse)");
    }
    return Outcome{ok, detail};
  });

  record("criterion 6 (autodiff vs finite differences, 100 random MLPs, rel err <= 1e-4)", gradient_check);
  record("criterion 7 (MI estimator sanity, N=512, 2000 steps)", mi_sanity);
  record("criterion 8 (pair weights, 1000 random batches)", pair_weights);
  record("criterion 9 (2SLS oracle on 1e4 basic linear samples)", twosls_oracle);
  record("criterion 10 (determinism of results.csv excluding wall_ms)", [&] { return determinism(root); });

  record("composition note (AutoIV w/ Z < RandIV under 2SLS NN, dZ=10 dF=10 dA=4 dU=1)", [&] {
    ExperimentPlan p = base_plan(root / "composition", seeds);
    p.scenarios = {data::Scenario::GaussianComposition};
    p.responses = {data::Response::Abs};
    p.dgp.d_z = 10;
    p.dgp.d_f = 10;
    p.dgp.d_a = 4;
    p.dgp.d_u = 1;
    p.methods = {cell(Instrument::RandIv, W, Downstream::TwoSlsNn), cell(Instrument::AutoIv, W, Downstream::TwoSlsNn)};
    auto m = summarize(run_plan(p, "composition"), p);
    const auto& a = get(m, "abs/autoiv/with_z/2sls_nn");
    const auto& r = get(m, "abs/randiv/with_z/2sls_nn");
    return Outcome{complete(a, seeds) && complete(r, seeds) && a.mean < r.mean,
                   "AutoIV " + row_text(a) + ", RandIV " + row_text(r)};
  });

  const auto passed = std::count_if(lines.begin(), lines.end(), [](const auto& l) { return l.second.pass; });
  std::printf("%td/%zu passed (seeds per experiment criterion: %s)\n", passed, lines.size(), n_str.c_str());
  return passed == static_cast<std::ptrdiff_t>(lines.size()) ? 0 : 1;
}
