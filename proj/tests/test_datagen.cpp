#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "autoiv/datagen.hpp"
#include "autoiv/errors.hpp"

using namespace autoiv;
using namespace autoiv::data;

namespace {

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean(a), mb = mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

DgpSpec spec_for(Scenario s, Response r = Response::Linear, Regime g = Regime::WithZ) {
  DgpSpec spec;
  spec.scenario = s;
  spec.response = r;
  spec.regime = g;
  return spec;
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_TRUE(a.same_shape(b)) << a.shape_str() << " vs " << b.shape_str();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], tol);
}

}  // namespace

TEST(ResponseFunction, Values) {
  EXPECT_EQ(response_function(Response::Step, 0.5), -1.0);
  EXPECT_EQ(response_function(Response::Step, -0.1), 0.0);
  EXPECT_EQ(response_function(Response::Linear, 2.0), -2.0);
  EXPECT_EQ(response_function(Response::Abs, -3.0), 3.0);
  EXPECT_NEAR(response_function("poly3d", 2.0), 0.05 * 8 + 0.1 * 4 - 0.8 * 2, 1e-15);
  EXPECT_NEAR(response_function("poly2d", 2.0), -0.1 * 4 - 0.4 * 2, 1e-15);
  EXPECT_THROW(response_function("cubic", 1.0), ContractViolation);
}

TEST(GenBasic, NoiseFreeLinear) {
  DgpSpec spec = spec_for(Scenario::BasicLowDim);
  spec.noise_scale = 0.0;
  auto d = gen_basic(spec, 50, 1);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(d.x[i], d.true_iv(i, 0));
    EXPECT_EQ(d.y[i], -d.x[i]);
  }
}

TEST(GenBasic, MomentsOfZ) {
  auto d = gen_basic(spec_for(Scenario::BasicLowDim), 100000, 2);
  std::vector<double> z(d.rows());
  for (std::size_t i = 0; i < d.rows(); ++i) z[i] = d.true_iv(i, 0);
  const double m = mean(z);
  double v = 0;
  for (double x : z) v += (x - m) * (x - m);
  v /= static_cast<double>(z.size());
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(v, 36.0 / 12.0, 0.05);
}

TEST(GenBasic, TreatmentIsEndogenous) {
  auto d = gen_basic(spec_for(Scenario::BasicLowDim), 10000, 3);
  EXPECT_GT(corr(d.x.vec(), d.outcome_noise.vec()), 0.3);
}

TEST(GenConfounded, NoiseFreeLinear) {
  DgpSpec spec = spec_for(Scenario::ConfoundedLowDim);
  spec.noise_scale = 0.0;
  auto d = gen_confounded(spec, 40, 4);
  for (std::size_t i = 0; i < 40; ++i) {
    double csum = d.exogenous_extra(i, 0) + d.exogenous_extra(i, 1);
    for (std::size_t k = 2; k < 6; ++k) csum += d.v(i, k);
    EXPECT_NEAR(d.y[i], -d.x[i] + csum, 1e-14);
  }
}

TEST(GenConfounded, CandidateWidthByRegime) {
  EXPECT_EQ(gen_confounded(spec_for(Scenario::ConfoundedLowDim), 5, 0).v.cols(), 8u);
  auto without = gen_confounded(spec_for(Scenario::ConfoundedLowDim, Response::Abs, Regime::WithoutZ), 5, 0);
  EXPECT_EQ(without.v.cols(), 6u);
  EXPECT_EQ(without.column_roles.size(), 6u);
  EXPECT_EQ(without.column_roles.front(), Role::Confounder);
}

TEST(GenConfounded, ConfoundingStrength) {
  auto d = gen_confounded(spec_for(Scenario::ConfoundedLowDim), 10000, 5);
  std::vector<double> csum(d.rows()), resid(d.rows());
  for (std::size_t i = 0; i < d.rows(); ++i) {
    csum[i] = d.exogenous_extra(i, 0) + d.exogenous_extra(i, 1);
    for (std::size_t k = 2; k < 6; ++k) csum[i] += d.v(i, k);
    resid[i] = d.y[i] - response_function(Response::Linear, d.x[i]);
  }
  EXPECT_GT(corr(csum, d.x.vec()), 0.5);
  EXPECT_GT(corr(csum, resid), 0.5);
}

TEST(GenComposition, Widths) {
  DgpSpec spec = spec_for(Scenario::GaussianComposition);
  EXPECT_EQ(gen_composition(spec, 3, 0).v.cols(), 25u);
  spec.d_u = 0;
  auto d = gen_composition(spec, 3, 0);
  EXPECT_EQ(d.v.cols(), spec.d_z + spec.d_f + spec.d_a);
  for (auto r : d.column_roles) EXPECT_NE(r, Role::Unconcerned);
  spec.regime = Regime::WithoutZ;
  EXPECT_EQ(gen_composition(spec, 3, 0).v.cols(), spec.d_f + spec.d_a);
}

TEST(GenComposition, OnlyZBlock) {
  DgpSpec spec = spec_for(Scenario::GaussianComposition, Response::Poly3d);
  spec.d_f = spec.d_a = spec.d_u = 0;
  spec.noise_scale = 0;
  auto d = gen_composition(spec, 20, 6);
  for (std::size_t i = 0; i < 20; ++i) {
    double m = 0;
    for (std::size_t k = 0; k < spec.d_z; ++k) m += d.v(i, k);
    m /= static_cast<double>(spec.d_z);
    EXPECT_NEAR(d.x[i], m, 1e-14);
    EXPECT_NEAR(d.y[i], response_function(Response::Poly3d, d.x[i]), 1e-14);
  }
}

TEST(Generate, PureInSeed) {
  auto spec = spec_for(Scenario::ConfoundedLowDim, Response::Abs);
  auto a = generate_splits(spec, 9), b = generate_splits(spec, 9), c = generate_splits(spec, 10);
  EXPECT_EQ(a.test.v, b.test.v);
  EXPECT_NE(a.test.v, c.test.v);
  EXPECT_NE(a.train.v, a.test.v);
}

TEST(Generate, ScenarioMismatchRejected) {
  EXPECT_THROW(gen_basic(spec_for(Scenario::ConfoundedLowDim), 5, 0), ContractViolation);
  DgpSpec bad = spec_for(Scenario::BasicLowDim);
  bad.n_test = 0;
  EXPECT_THROW(generate_splits(bad, 0), ContractViolation);
}

TEST(Standardize, HandColumn) {
  Tensor t = Tensor::from_rows({{0}, {2}});
  auto s = column_stats(t, "t");
  EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(s.std[0], 1.0);
  EXPECT_EQ(apply_stats(t, s), Tensor::from_rows({{-1}, {1}}));
  EXPECT_THROW(column_stats(Tensor::from_rows({{3}, {3}}), "const"), ContractViolation);
}

TEST(Standardize, IdempotentAndInverse) {
  auto d = gen_confounded(spec_for(Scenario::ConfoundedLowDim, Response::Abs), 300, 7);
  auto [s1, st1] = standardize(d);
  auto [s2, st2] = standardize(s1);
  expect_near(s2.v, s1.v, 1e-12);
  expect_near(s2.y_structural, s1.y_structural, 1e-12);
  expect_near(s2.exogenous_extra, s1.exogenous_extra, 1e-12);
  auto back = destandardize(s1, st1);
  expect_near(back.v, d.v, 1e-12);
  expect_near(back.x, d.x, 1e-12);
  expect_near(back.y, d.y, 1e-12);
  expect_near(back.y_structural, d.y_structural, 1e-12);
  expect_near(back.true_iv, d.true_iv, 1e-12);
}

TEST(Standardize, SplitsUseTrainStatistics) {
  auto raw = generate_splits(spec_for(Scenario::ConfoundedLowDim, Response::Abs), 3);
  auto [s, stats] = standardize(raw);
  auto own = fit_standardization(raw.train);
  EXPECT_EQ(stats.x.mean, own.x.mean);
  EXPECT_NEAR(s.test.x[0], (raw.test.x[0] - own.x.mean[0]) / own.x.std[0], 1e-15);
  EXPECT_NEAR(s.test.y_structural[0], (raw.test.y_structural[0] - own.y.mean[0]) / own.y.std[0], 1e-15);
}

TEST(DatasetCsv, RoundTripWithSidecar) {
  auto spec = spec_for(Scenario::ConfoundedLowDim, Response::Poly2d, Regime::WithoutZ);
  auto d = gen_confounded(spec, 25, 11);
  const auto dir = std::filesystem::temp_directory_path() / "autoiv_test_csv";
  std::filesystem::create_directories(dir);
  save_dataset_csv(d, spec, 11, dir / "d.csv");
  ASSERT_TRUE(std::filesystem::exists(dir / "d.csv.json"));
  auto back = load_dataset_csv(dir / "d.csv");
  EXPECT_EQ(back.v, d.v);
  EXPECT_EQ(back.y_structural, d.y_structural);
  EXPECT_EQ(back.exogenous_extra, d.exogenous_extra);
  EXPECT_EQ(back.true_iv, d.true_iv);
  EXPECT_EQ(back.column_roles, d.column_roles);
  EXPECT_EQ(back.response, Response::Poly2d);
  std::filesystem::remove(dir / "d.csv.json");
  EXPECT_THROW(load_dataset_csv(dir / "d.csv"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(DgpSpecJson, RoundTrip) {
  DgpSpec s = spec_for(Scenario::GaussianComposition, Response::Step, Regime::WithoutZ);
  s.d_u = 3;
  s.n_valid = 17;
  nlohmann::json j = s;
  EXPECT_EQ(j.get<DgpSpec>(), s);
}
