#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "autoiv/errors.hpp"
#include "autoiv/mi.hpp"
#include "autoiv/optim.hpp"

using namespace autoiv;

namespace {

double eval(const Tensor& L, NodeId (*fn)(Graph&, NodeId)) {
  Graph g;
  return g.value(fn(g, g.constant(L))).item();
}

double eval_cond(const Tensor& L, const mi::PairWeights& w) {
  Graph g;
  return g.value(mi::mi_min_conditional_loss(g, g.constant(L), w)).item();
}

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Tensor t(r, c);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST(PairWeights, Singleton) {
  auto w = mi::rbf_pair_weights(Tensor::scalar(3.0), 0.5);
  EXPECT_EQ(w.omega, Tensor::scalar(1.0));
}

TEST(PairWeights, EqualTreatmentsAreUniform) {
  auto w = mi::rbf_pair_weights(Tensor::from_rows({{1.2}, {1.2}}), 0.5);
  for (double v : w.omega.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(PairWeights, FarApartIsSoftmaxOfOneZero) {
  auto w = mi::rbf_pair_weights(Tensor::from_rows({{0}, {10}}), 0.5);
  const double e = std::exp(1.0);
  EXPECT_NEAR(w.omega(0, 0), e / (e + 1), 1e-12);
  EXPECT_NEAR(w.omega(0, 1), 1 / (e + 1), 1e-12);
  EXPECT_NEAR(w.omega(0, 0), 0.7311, 1e-4);
}

TEST(PairWeights, RowsSumToOne) {
  std::mt19937_64 rng(1);
  auto w = mi::rbf_pair_weights(random_tensor(40, 1, rng), 0.3);
  for (std::size_t i = 0; i < 40; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 40; ++j) {
      EXPECT_GT(w.omega(i, j), 0.0);
      s += w.omega(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(mi::rbf_pair_weights(Tensor::scalar(0), 0.0), ContractViolation);
}

TEST(LldLoss, PerfectFitFloor) {
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, nn::MlpSpec{1, 1, {}, nn::Activation::Elu}, "h", 0);
  store.value(head.mean_net().weight(0)) = Tensor::scalar(2.0);
  store.value(head.mean_net().bias(0)) = Tensor::scalar(0.0);
  Tensor a = Tensor::from_rows({{0.1}, {-1}, {3}});
  Tensor b = Tensor::from_rows({{0.2}, {-2}, {6}});
  Graph g;
  double loss = g.value(mi::lld_loss(g, store, head, g.constant(a), g.constant(b))).item();
  EXPECT_NEAR(loss, 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(LldLoss, DuplicationInvariantAndDiagonalMean) {
  std::mt19937_64 rng(2);
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, nn::MlpSpec{2, 1, {5}, nn::Activation::Elu}, "h", 4);
  Tensor a = random_tensor(4, 2, rng), b = random_tensor(4, 1, rng);
  Graph g;
  const double loss = g.value(mi::lld_loss(g, store, head, g.constant(a), g.constant(b))).item();

  Tensor L = nn::cross_loglik_matrix(store, head, a, b);
  double diag = 0;
  for (std::size_t i = 0; i < 4; ++i) diag += L(i, i);
  EXPECT_NEAR(loss, -diag / 4, 1e-12);

  Tensor a2(8, 2), b2(8, 1);
  for (std::size_t i = 0; i < 8; ++i) {
    a2(i, 0) = a(i % 4, 0);
    a2(i, 1) = a(i % 4, 1);
    b2[i] = b[i % 4];
  }
  Graph g2;
  EXPECT_NEAR(g2.value(mi::lld_loss(g2, store, head, g2.constant(a2), g2.constant(b2))).item(), loss,
              1e-12);
}

TEST(LldLoss, GradientReachesOnlyHead) {
  std::mt19937_64 rng(3);
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, nn::MlpSpec{1, 1, {3}, nn::Activation::Elu}, "h", 1);
  auto rep = store.add("rep", random_tensor(5, 1, rng));
  Graph g;
  auto loss = mi::lld_loss(g, store, head, g.parameter(store, rep, true), g.constant(random_tensor(5, 1, rng)));
  auto grads = gradients_by_param(g, backward(g, loss));
  EXPECT_EQ(max_abs(grads.at(rep)), 0.0);
  EXPECT_GT(max_abs(grads.at(head.log_var_param())), 0.0);
}

TEST(MiMax, ConstantMatrixIsZero) {
  EXPECT_NEAR(eval(Tensor(3, 3, 1.7), mi::mi_max_loss), 0.0, 1e-15);
}

TEST(MiMax, HandValue) {
  EXPECT_NEAR(eval(Tensor::from_rows({{1, 0}, {0, 1}}), mi::mi_max_loss), -0.5, 1e-15);
}

TEST(MiMax, ShiftInvariant) {
  std::mt19937_64 rng(5);
  Tensor L = random_tensor(5, 5, rng);
  Tensor S = L;
  for (auto& v : S.data()) v += 3.25;
  EXPECT_NEAR(eval(L, mi::mi_max_loss), eval(S, mi::mi_max_loss), 1e-12);
}

TEST(MiMin, ValuesAndNegation) {
  EXPECT_NEAR(eval(Tensor(4, 4, -2.0), mi::mi_min_loss), 0.0, 1e-15);
  EXPECT_NEAR(eval(Tensor::from_rows({{2, 0}, {0, 2}}), mi::mi_min_loss), 1.0, 1e-15);
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    Tensor L = random_tensor(6, 6, rng);
    EXPECT_NEAR(eval(L, mi::mi_min_loss), -eval(L, mi::mi_max_loss), 1e-14);
  }
}

TEST(MiMinConditional, HandEnumeration) {
  mi::PairWeights w{Tensor(2, 2, 0.5), 0.5};
  EXPECT_NEAR(eval_cond(Tensor::from_rows({{1, 0}, {0, 1}}), w), 0.25, 1e-15);
  EXPECT_NEAR(eval_cond(Tensor(2, 2, 4.0), w), 0.0, 1e-15);
}

TEST(MiMinConditional, DiagonalWeightsVanish) {
  std::mt19937_64 rng(7);
  mi::PairWeights w{Tensor::identity(4), 0.5};
  EXPECT_NEAR(eval_cond(random_tensor(4, 4, rng), w), 0.0, 1e-15);
}

TEST(MiMinConditional, MatchesLoop) {
  std::mt19937_64 rng(8);
  Tensor L = random_tensor(5, 5, rng);
  auto w = mi::rbf_pair_weights(random_tensor(5, 1, rng), 0.5);
  double s = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) s += w.omega(i, j) * (L(i, i) - L(i, j));
  EXPECT_NEAR(eval_cond(L, w), s / 25, 1e-14);
  EXPECT_NEAR(mi::weighted_gap(L, w), s / 5, 1e-14);
}

TEST(GapStatistic, DiagonalMinusOffDiagonal) {
  Tensor L = Tensor::from_rows({{3, 1, 1}, {0, 3, 2}, {1, 1, 3}});
  EXPECT_NEAR(mi::gap_statistic(L), 3.0 - 6.0 / 6.0, 1e-15);
  EXPECT_THROW(mi::gap_statistic(Tensor::scalar(1)), ContractViolation);
}

TEST(CombineObjectives, WeightCollapse) {
  Graph g;
  mi::ObjectiveTerms t;
  t.mi_zx = g.constant(Tensor::scalar(0.5));
  t.mi_zy = g.constant(Tensor::scalar(0.25));
  t.mi_cx = g.constant(Tensor::scalar(7));
  t.mi_cy = g.constant(Tensor::scalar(7));
  t.mi_zc = g.constant(Tensor::scalar(7));
  auto b = mi::combine_objectives(g, t, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(g.value(*b.mi_total).item(), 0.75);
}

TEST(CombineObjectives, Arithmetic) {
  Graph g;
  mi::ObjectiveTerms t;
  auto one = g.constant(Tensor::scalar(1));
  t.mi_zx = t.mi_zy = t.mi_cx = t.mi_cy = t.mi_zc = one;
  t.lld_zx = t.lld_zy = t.lld_cx = t.lld_cy = t.lld_zc = one;
  auto b = mi::combine_objectives(g, t, 2.0, 3.0);
  const double want = 1 + 1 + 2.0 * (1 + 1) + 3.0 * 1;  // zx + zy + alpha (cx + cy) + eta zc
  EXPECT_DOUBLE_EQ(g.value(*b.mi_total).item(), want);
  EXPECT_DOUBLE_EQ(g.value(*b.lld_total).item(), 5.0);
  EXPECT_THROW(mi::combine_objectives(g, t, -1.0, 0.0), ContractViolation);
}

TEST(CombineObjectives, AblationsZeroTheirGroupOnly) {
  Graph g;
  mi::ObjectiveTerms t;
  t.mi_zx = g.constant(Tensor::scalar(1));
  t.mi_zy = g.constant(Tensor::scalar(2));
  t.mi_cx = g.constant(Tensor::scalar(4));
  t.mi_cy = g.constant(Tensor::scalar(8));
  t.mi_zc = g.constant(Tensor::scalar(16));
  t.l_x = g.constant(Tensor::scalar(1));
  t.l_y = g.constant(Tensor::scalar(1));
  auto total = [&](mi::Ablation a) { return g.value(*mi::combine_objectives(g, t, 1, 1, a).mi_total).item(); };
  EXPECT_DOUBLE_EQ(total({}), 31);
  EXPECT_DOUBLE_EQ(total({.disable_zc_reg = true}), 15);
  EXPECT_DOUBLE_EQ(total({.disable_c_mi = true}), 19);
  EXPECT_DOUBLE_EQ(total({.disable_z_mi = true}), 28);
  auto b = mi::combine_objectives(g, t, 1, 1, {.disable_two_stage = true});
  EXPECT_FALSE(b.l_x.has_value());
  EXPECT_FALSE(b.l_y.has_value());
  EXPECT_DOUBLE_EQ(g.value(*b.mi_total).item(), 31);
}

// A head trained by lld_loss on dependent pairs separates positives from
// negatives; on independent pairs it cannot.
TEST(GapStatistic, TrainedHeadDistinguishesDependence) {
  std::mt19937_64 rng(10);
  const std::size_t n = 200;
  Tensor a = random_tensor(n, 1, rng);
  Tensor indep = random_tensor(n, 1, rng);
  auto train = [&](const Tensor& b) {
    ParameterStore store;
    auto head = nn::GaussianHead::create(store, nn::MlpSpec{1, 1, {16}, nn::Activation::Elu}, "h", 2);
    AdamState st(AdamOptions{1e-2});
    for (int step = 0; step < 600; ++step) {
      Graph g;
      auto loss = mi::lld_loss(g, store, head, g.constant(a), g.constant(b));
      adam_step(store, gradients_by_param(g, backward(g, loss)), st);
      head.clamp_log_var(store);
    }
    return mi::gap_statistic(nn::cross_loglik_matrix(store, head, a, b));
  };
  EXPECT_LT(std::abs(train(indep)), 0.1);
  EXPECT_GE(train(a), 1.0);
}
