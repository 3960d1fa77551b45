#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autoiv/tensor.hpp"

namespace autoiv::data {

enum class Scenario { BasicLowDim, ConfoundedLowDim, GaussianComposition };
enum class Response { Step, Abs, Linear, Poly2d, Poly3d };
enum class Regime { WithZ, WithoutZ };
enum class Role { Iv, Confounder, Adjustment, Unconcerned, Noise };

std::string to_string(Scenario s);
std::string to_string(Response r);
std::string to_string(Regime r);
std::string to_string(Role r);
Scenario scenario_from_string(const std::string& s);
Response response_from_string(const std::string& s);
Regime regime_from_string(const std::string& s);
Role role_from_string(const std::string& s);

/// step: -1 for x >= 0 else 0; abs: |x|; linear: -x;
/// poly2d: -0.1x^2 - 0.4x; poly3d: 0.05x^3 + 0.1x^2 - 0.8x.
double response_function(Response r, double x);
double response_function(const std::string& name, double x);

struct DgpSpec {
  Scenario scenario = Scenario::ConfoundedLowDim;
  Response response = Response::Abs;
  std::size_t n_train = 500;
  std::size_t n_valid = 500;
  std::size_t n_test = 500;
  Regime regime = Regime::WithZ;
  // block widths for the composition scenario
  std::size_t d_z = 10;
  std::size_t d_f = 10;
  std::size_t d_a = 4;
  std::size_t d_u = 1;
  /// Multiplier on every noise term (e, gamma, sigma). 0 gives the noise-free
  /// degenerate process used in tests.
  double noise_scale = 1.0;

  void validate() const;
  friend bool operator==(const DgpSpec&, const DgpSpec&) = default;
};

void to_json(nlohmann::json& j, const DgpSpec& s);
void from_json(const nlohmann::json& j, DgpSpec& s);

struct SyntheticDataset {
  Tensor v;              // [N x dV] IV candidates
  Tensor x;              // [N x 1] treatment
  Tensor y;              // [N x 1] outcome
  Tensor y_structural;   // [N x 1] g(x) plus structural covariate terms, no noise
  Tensor outcome_noise;  // [N x 1] y - y_structural as generated
  Tensor exogenous_extra;  // [N x k] covariates handed straight to downstream methods (k may be 0)
  Tensor true_iv;        // [N x dZ] ground-truth instruments
  std::vector<Role> column_roles;  // one per column of v
  Response response = Response::Abs;

  std::size_t rows() const noexcept { return x.rows(); }
};

/// Fresh draws for one split. Pure in (spec, n, seed).
SyntheticDataset gen_basic(const DgpSpec& spec, std::size_t n, std::uint64_t seed);
SyntheticDataset gen_confounded(const DgpSpec& spec, std::size_t n, std::uint64_t seed);
SyntheticDataset gen_composition(const DgpSpec& spec, std::size_t n, std::uint64_t seed);
SyntheticDataset generate(const DgpSpec& spec, std::size_t n, std::uint64_t seed);

/// Instrument columns drawn from the true IVs' marginal, independent of everything else.
Tensor draw_random_iv(const DgpSpec& spec, std::size_t n, std::uint64_t seed);

struct Splits {
  SyntheticDataset train, valid, test;
};

/// Train/validation/test drawn independently from seeds derived from `seed`.
Splits generate_splits(const DgpSpec& spec, std::uint64_t seed);

struct ColumnStats {
  std::vector<double> mean;
  std::vector<double> std;  // population (1/N) standard deviation
};

struct StandardizationStats {
  ColumnStats v, x, y, extra, true_iv;
};

ColumnStats column_stats(const Tensor& t, const std::string& label);
Tensor apply_stats(const Tensor& t, const ColumnStats& s);
Tensor invert_stats(const Tensor& t, const ColumnStats& s);

/// Statistics from `train`; throws ContractViolation naming any zero-variance column.
StandardizationStats fit_standardization(const SyntheticDataset& train);
SyntheticDataset apply_standardization(const SyntheticDataset& d, const StandardizationStats& s);
SyntheticDataset destandardize(const SyntheticDataset& d, const StandardizationStats& s);
std::pair<SyntheticDataset, StandardizationStats> standardize(const SyntheticDataset& d);

/// Standardize every split with the training split's statistics.
std::pair<Splits, StandardizationStats> standardize(const Splits& raw);

/// CSV with a JSON sidecar (<csv>.json) holding roles, spec and seed.
void save_dataset_csv(const SyntheticDataset& d, const DgpSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& csv);
SyntheticDataset load_dataset_csv(const std::filesystem::path& csv);

}  // namespace autoiv::data
