#include "autoiv/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "autoiv/errors.hpp"
#include "autoiv/seed.hpp"

namespace autoiv::data {

// ---------------------------------------------------------------------------
// Names

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::BasicLowDim: return "basic_low_dim";
    case Scenario::ConfoundedLowDim: return "confounded_low_dim";
    case Scenario::GaussianComposition: return "gaussian_composition";
  }
  return "?";
}

std::string to_string(Response r) {
  switch (r) {
    case Response::Step: return "step";
    case Response::Abs: return "abs";
    case Response::Linear: return "linear";
    case Response::Poly2d: return "poly2d";
    case Response::Poly3d: return "poly3d";
  }
  return "?";
}

std::string to_string(Regime r) { return r == Regime::WithZ ? "with_z" : "without_z"; }

std::string to_string(Role r) {
  switch (r) {
    case Role::Iv: return "iv";
    case Role::Confounder: return "confounder";
    case Role::Adjustment: return "adjustment";
    case Role::Unconcerned: return "unconcerned";
    case Role::Noise: return "noise";
  }
  return "?";
}

Scenario scenario_from_string(const std::string& s) {
  for (auto v : {Scenario::BasicLowDim, Scenario::ConfoundedLowDim, Scenario::GaussianComposition})
    if (to_string(v) == s) return v;
  throw ContractViolation("unknown scenario '" + s + "'");
}

Response response_from_string(const std::string& s) {
  for (auto v : {Response::Step, Response::Abs, Response::Linear, Response::Poly2d, Response::Poly3d})
    if (to_string(v) == s) return v;
  throw ContractViolation("unknown response function '" + s + "'");
}

Regime regime_from_string(const std::string& s) {
  if (s == "with_z") return Regime::WithZ;
  if (s == "without_z") return Regime::WithoutZ;
  throw ContractViolation("unknown candidate regime '" + s + "'");
}

Role role_from_string(const std::string& s) {
  for (auto v : {Role::Iv, Role::Confounder, Role::Adjustment, Role::Unconcerned, Role::Noise})
    if (to_string(v) == s) return v;
  throw ContractViolation("unknown column role '" + s + "'");
}

double response_function(Response r, double x) {
  switch (r) {
    case Response::Step: return x >= 0.0 ? -1.0 : 0.0;
    case Response::Abs: return std::abs(x);
    case Response::Linear: return -x;
    case Response::Poly2d: return -0.1 * x * x - 0.4 * x;
    case Response::Poly3d: return 0.05 * x * x * x + 0.1 * x * x - 0.8 * x;
  }
  throw ContractViolation("unknown response function");
}

double response_function(const std::string& name, double x) {
  return response_function(response_from_string(name), x);
}

// ---------------------------------------------------------------------------
// Spec

void DgpSpec::validate() const {
  if (n_train == 0 || n_valid == 0 || n_test == 0) {
    throw ContractViolation("DgpSpec: sample counts must be >= 1");
  }
  if (scenario == Scenario::GaussianComposition && d_z == 0) {
    throw ContractViolation("DgpSpec: composition scenario needs d_z >= 1");
  }
  if (!(noise_scale >= 0.0)) throw ContractViolation("DgpSpec: noise_scale must be >= 0");
}

void to_json(nlohmann::json& j, const DgpSpec& s) {
  j = {{"scenario", to_string(s.scenario)},
       {"response", to_string(s.response)},
       {"n_train", s.n_train},
       {"n_valid", s.n_valid},
       {"n_test", s.n_test},
       {"regime", to_string(s.regime)},
       {"d_z", s.d_z},
       {"d_f", s.d_f},
       {"d_a", s.d_a},
       {"d_u", s.d_u},
       {"noise_scale", s.noise_scale}};
}

void from_json(const nlohmann::json& j, DgpSpec& s) {
  DgpSpec d;
  if (j.contains("scenario")) d.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  if (j.contains("response")) d.response = response_from_string(j.at("response").get<std::string>());
  if (j.contains("regime")) d.regime = regime_from_string(j.at("regime").get<std::string>());
  d.n_train = j.value("n_train", d.n_train);
  d.n_valid = j.value("n_valid", d.n_valid);
  d.n_test = j.value("n_test", d.n_test);
  d.d_z = j.value("d_z", d.d_z);
  d.d_f = j.value("d_f", d.d_f);
  d.d_a = j.value("d_a", d.d_a);
  d.d_u = j.value("d_u", d.d_u);
  d.noise_scale = j.value("noise_scale", d.noise_scale);
  s = d;
}

// ---------------------------------------------------------------------------
// Generators

namespace {

struct Sampler {
  explicit Sampler(std::uint64_t seed) : rng(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal(double sd) { return std::normal_distribution<double>(0.0, sd)(rng); }
  std::mt19937_64 rng;
};

// Standard deviation of the gamma / sigma noise columns.
constexpr double kSmallNoiseSd = 0.1;

void require_scenario(const DgpSpec& spec, Scenario s) {
  spec.validate();
  if (spec.scenario != s) {
    throw ContractViolation("generator for " + to_string(s) + " called with scenario " +
                            to_string(spec.scenario));
  }
}

SyntheticDataset allocate(std::size_t n, std::size_t dv, std::size_t d_extra, std::size_t d_iv,
                          Response r) {
  SyntheticDataset d;
  d.v = Tensor(n, dv);
  d.x = Tensor(n, 1);
  d.y = Tensor(n, 1);
  d.y_structural = Tensor(n, 1);
  d.outcome_noise = Tensor(n, 1);
  d.exogenous_extra = Tensor(n, d_extra);
  d.true_iv = Tensor(n, d_iv);
  d.response = r;
  return d;
}

}  // namespace

SyntheticDataset gen_basic(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  require_scenario(spec, Scenario::BasicLowDim);
  const bool with_z = spec.regime == Regime::WithZ;
  SyntheticDataset d = allocate(n, with_z ? 4 : 2, 0, 2, spec.response);
  if (with_z) d.column_roles = {Role::Iv, Role::Iv};
  d.column_roles.push_back(Role::Noise);
  d.column_roles.push_back(Role::Noise);

  Sampler s(seed);
  const double ns = spec.noise_scale;
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = s.uniform(-3.0, 3.0);
    const double z2 = s.uniform(-3.0, 3.0);
    const double e = ns * s.normal(1.0);
    const double gamma = ns * s.normal(kSmallNoiseSd);
    const double sigma = ns * s.normal(kSmallNoiseSd);

    const double x = z1 + e + gamma;
    d.x[i] = x;
    d.y_structural[i] = response_function(spec.response, x);
    d.outcome_noise[i] = e + sigma;
    d.y[i] = d.y_structural[i] + d.outcome_noise[i];
    d.true_iv(i, 0) = z1;
    d.true_iv(i, 1) = z2;
    std::size_t c = 0;
    if (with_z) {
      d.v(i, c++) = z1;
      d.v(i, c++) = z2;
    }
    d.v(i, c++) = gamma;
    d.v(i, c++) = sigma;
  }
  return d;
}

SyntheticDataset gen_confounded(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  require_scenario(spec, Scenario::ConfoundedLowDim);
  const bool with_z = spec.regime == Regime::WithZ;
  SyntheticDataset d = allocate(n, with_z ? 8 : 6, 2, 2, spec.response);
  if (with_z) d.column_roles = {Role::Iv, Role::Iv};
  for (int k = 0; k < 4; ++k) d.column_roles.push_back(Role::Confounder);
  d.column_roles.push_back(Role::Noise);
  d.column_roles.push_back(Role::Noise);

  Sampler s(seed);
  const double ns = spec.noise_scale;
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = s.uniform(-0.5, 0.5);
    const double z2 = s.uniform(-0.5, 0.5);
    double cvals[6];
    double csum = 0.0;
    for (double& c : cvals) {
      c = s.uniform(-0.5, 0.5);
      csum += c;
    }
    const double e = ns * s.normal(1.0);
    const double gamma = ns * s.normal(kSmallNoiseSd);
    const double sigma = ns * s.normal(kSmallNoiseSd);

    const double x = z1 + z2 + csum + e + gamma;
    d.x[i] = x;
    d.y_structural[i] = response_function(spec.response, x) + csum;
    d.outcome_noise[i] = e + sigma;
    d.y[i] = d.y_structural[i] + d.outcome_noise[i];
    d.true_iv(i, 0) = z1;
    d.true_iv(i, 1) = z2;
    d.exogenous_extra(i, 0) = cvals[4];
    d.exogenous_extra(i, 1) = cvals[5];
    std::size_t c = 0;
    if (with_z) {
      d.v(i, c++) = z1;
      d.v(i, c++) = z2;
    }
    for (int k = 0; k < 4; ++k) d.v(i, c++) = cvals[k];
    d.v(i, c++) = gamma;
    d.v(i, c++) = sigma;
  }
  return d;
}

SyntheticDataset gen_composition(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  require_scenario(spec, Scenario::GaussianComposition);
  const bool with_z = spec.regime == Regime::WithZ;
  const std::size_t dv = (with_z ? spec.d_z : 0) + spec.d_f + spec.d_a + spec.d_u;
  SyntheticDataset d = allocate(n, dv, 0, spec.d_z, spec.response);
  if (with_z) d.column_roles.assign(spec.d_z, Role::Iv);
  d.column_roles.insert(d.column_roles.end(), spec.d_f, Role::Confounder);
  d.column_roles.insert(d.column_roles.end(), spec.d_a, Role::Adjustment);
  d.column_roles.insert(d.column_roles.end(), spec.d_u, Role::Unconcerned);

  auto block_mean = [](const std::vector<double>& b) {
    if (b.empty()) return 0.0;
    double s = 0.0;
    for (double v : b) s += v;
    return s / static_cast<double>(b.size());
  };

  Sampler s(seed);
  std::vector<double> z(spec.d_z), f(spec.d_f), a(spec.d_a), u(spec.d_u);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto* block : {&z, &f, &a, &u})
      for (double& v : *block) v = s.normal(1.0);
    const double e = spec.noise_scale * s.normal(1.0);
    const double mz = block_mean(z);
    const double mf = block_mean(f);
    const double ma = block_mean(a);

    const double x = mz + mf + e;
    d.x[i] = x;
    d.y_structural[i] = response_function(spec.response, x) + mf + ma;
    d.outcome_noise[i] = e;
    d.y[i] = d.y_structural[i] + d.outcome_noise[i];
    for (std::size_t k = 0; k < spec.d_z; ++k) d.true_iv(i, k) = z[k];
    std::size_t c = 0;
    if (with_z)
      for (double v : z) d.v(i, c++) = v;
    for (auto* block : {&f, &a, &u})
      for (double v : *block) d.v(i, c++) = v;
  }
  return d;
}

SyntheticDataset generate(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  switch (spec.scenario) {
    case Scenario::BasicLowDim: return gen_basic(spec, n, seed);
    case Scenario::ConfoundedLowDim: return gen_confounded(spec, n, seed);
    case Scenario::GaussianComposition: return gen_composition(spec, n, seed);
  }
  throw ContractViolation("unknown scenario");
}

Tensor draw_random_iv(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  Sampler s(seed);
  switch (spec.scenario) {
    case Scenario::BasicLowDim: {
      Tensor t(n, 2);
      for (double& v : t.data()) v = s.uniform(-3.0, 3.0);
      return t;
    }
    case Scenario::ConfoundedLowDim: {
      Tensor t(n, 2);
      for (double& v : t.data()) v = s.uniform(-0.5, 0.5);
      return t;
    }
    case Scenario::GaussianComposition: {
      Tensor t(n, spec.d_z);
      for (double& v : t.data()) v = s.normal(1.0);
      return t;
    }
  }
  throw ContractViolation("unknown scenario");
}

Splits generate_splits(const DgpSpec& spec, std::uint64_t seed) {
  spec.validate();
  return {generate(spec, spec.n_train, derive_seed(seed, "train")),
          generate(spec, spec.n_valid, derive_seed(seed, "valid")),
          generate(spec, spec.n_test, derive_seed(seed, "test"))};
}

// ---------------------------------------------------------------------------
// Standardization

ColumnStats column_stats(const Tensor& t, const std::string& label) {
  ColumnStats s;
  const std::size_t n = t.rows();
  if (n == 0 && t.cols() > 0) throw ContractViolation("standardize: no rows in " + label);
  for (std::size_t c = 0; c < t.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += t(r, c);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) v += (t(r, c) - m) * (t(r, c) - m);
    const double sd = std::sqrt(v / static_cast<double>(n));
    if (!(sd > 0.0)) {
      throw ContractViolation("standardize: zero variance in column " + std::to_string(c) + " of " +
                              label);
    }
    s.mean.push_back(m);
    s.std.push_back(sd);
  }
  return s;
}

Tensor apply_stats(const Tensor& t, const ColumnStats& s) {
  if (t.cols() != s.mean.size()) throw ContractViolation("standardize: column count mismatch");
  Tensor out = t;
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = (t(r, c) - s.mean[c]) / s.std[c];
  return out;
}

Tensor invert_stats(const Tensor& t, const ColumnStats& s) {
  if (t.cols() != s.mean.size()) throw ContractViolation("destandardize: column count mismatch");
  Tensor out = t;
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = t(r, c) * s.std[c] + s.mean[c];
  return out;
}

StandardizationStats fit_standardization(const SyntheticDataset& train) {
  return {column_stats(train.v, "V"), column_stats(train.x, "X"), column_stats(train.y, "Y"),
          column_stats(train.exogenous_extra, "exogenous_extra"),
          column_stats(train.true_iv, "true_iv")};
}

SyntheticDataset apply_standardization(const SyntheticDataset& d, const StandardizationStats& s) {
  SyntheticDataset out = d;
  out.v = apply_stats(d.v, s.v);
  out.x = apply_stats(d.x, s.x);
  out.y = apply_stats(d.y, s.y);
  out.y_structural = apply_stats(d.y_structural, s.y);
  out.outcome_noise = d.outcome_noise;
  for (double& v : out.outcome_noise.data()) v /= s.y.std[0];
  out.exogenous_extra = apply_stats(d.exogenous_extra, s.extra);
  out.true_iv = apply_stats(d.true_iv, s.true_iv);
  return out;
}

SyntheticDataset destandardize(const SyntheticDataset& d, const StandardizationStats& s) {
  SyntheticDataset out = d;
  out.v = invert_stats(d.v, s.v);
  out.x = invert_stats(d.x, s.x);
  out.y = invert_stats(d.y, s.y);
  out.y_structural = invert_stats(d.y_structural, s.y);
  out.outcome_noise = d.outcome_noise;
  for (double& v : out.outcome_noise.data()) v *= s.y.std[0];
  out.exogenous_extra = invert_stats(d.exogenous_extra, s.extra);
  out.true_iv = invert_stats(d.true_iv, s.true_iv);
  return out;
}

std::pair<SyntheticDataset, StandardizationStats> standardize(const SyntheticDataset& d) {
  auto stats = fit_standardization(d);
  return {apply_standardization(d, stats), std::move(stats)};
}

std::pair<Splits, StandardizationStats> standardize(const Splits& raw) {
  auto stats = fit_standardization(raw.train);
  Splits out{apply_standardization(raw.train, stats), apply_standardization(raw.valid, stats),
             apply_standardization(raw.test, stats)};
  return {std::move(out), std::move(stats)};
}

// ---------------------------------------------------------------------------
// CSV export

namespace {

struct Block {
  const char* prefix;
  Tensor SyntheticDataset::*member;
};

constexpr Block kBlocks[] = {
    {"v", &SyntheticDataset::v},
    {"x", &SyntheticDataset::x},
    {"y", &SyntheticDataset::y},
    {"y_structural", &SyntheticDataset::y_structural},
    {"outcome_noise", &SyntheticDataset::outcome_noise},
    {"extra", &SyntheticDataset::exogenous_extra},
    {"true_iv", &SyntheticDataset::true_iv},
};

std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".json");
}

}  // namespace

void save_dataset_csv(const SyntheticDataset& d, const DgpSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& csv) {
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv.string());
  nlohmann::json widths = nlohmann::json::object();
  bool first = true;
  for (const auto& b : kBlocks) {
    const Tensor& t = d.*b.member;
    widths[b.prefix] = t.cols();
    for (std::size_t c = 0; c < t.cols(); ++c) {
      out << (first ? "" : ",") << b.prefix;
      if (t.cols() > 1 || b.member == &SyntheticDataset::v ||
          b.member == &SyntheticDataset::exogenous_extra || b.member == &SyntheticDataset::true_iv) {
        out << c;
      }
      first = false;
    }
  }
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < d.rows(); ++r) {
    first = true;
    for (const auto& b : kBlocks) {
      const Tensor& t = d.*b.member;
      for (std::size_t c = 0; c < t.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", t(r, c));
        out << (first ? "" : ",") << buf;
        first = false;
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + csv.string());

  nlohmann::json roles = nlohmann::json::array();
  for (auto r : d.column_roles) roles.push_back(to_string(r));
  nlohmann::json side = {{"format", "autoiv-dataset/1"},
                         {"seed", seed},
                         {"spec", spec},
                         {"response", to_string(d.response)},
                         {"rows", d.rows()},
                         {"widths", widths},
                         {"column_roles", roles}};
  std::ofstream js(sidecar_path(csv));
  if (!js) throw IoError("cannot write " + sidecar_path(csv).string());
  js << side.dump(2) << '\n';
}

SyntheticDataset load_dataset_csv(const std::filesystem::path& csv) {
  std::ifstream js(sidecar_path(csv));
  if (!js) throw IoError("missing sidecar " + sidecar_path(csv).string());
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar " + sidecar_path(csv).string() + ": " + e.what());
  }
  if (side.value("format", "") != "autoiv-dataset/1") {
    throw IoError("unsupported dataset format in " + sidecar_path(csv).string());
  }
  const auto rows = side.at("rows").get<std::size_t>();

  SyntheticDataset d;
  d.response = response_from_string(side.at("response").get<std::string>());
  for (const auto& r : side.at("column_roles")) d.column_roles.push_back(role_from_string(r.get<std::string>()));
  std::size_t total = 0;
  for (const auto& b : kBlocks) {
    const auto w = side.at("widths").at(b.prefix).get<std::size_t>();
    d.*b.member = Tensor(rows, w);
    total += w;
  }

  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::string line;
  std::getline(in, line);  // header
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) throw IoError(csv.string() + ": fewer rows than sidecar declares");
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    if (values.size() != total) throw IoError(csv.string() + ": wrong column count on row " + std::to_string(r));
    std::size_t k = 0;
    for (const auto& b : kBlocks) {
      Tensor& t = d.*b.member;
      for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) = values[k++];
    }
  }
  return d;
}

}  // namespace autoiv::data
