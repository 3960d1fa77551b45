#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "autoiv/errors.hpp"
#include "autoiv/nets.hpp"
#include "autoiv/serialize.hpp"

using namespace autoiv;
using nn::Activation;
using nn::MlpSpec;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Tensor t(r, c);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

double act(Activation a, double v) {
  switch (a) {
    case Activation::Tanh: return std::tanh(v);
    case Activation::Relu: return v > 0 ? v : 0.0;
    case Activation::Elu: return v > 0 ? v : std::expm1(v);
  }
  return v;
}

// plain loops, no Eigen
Tensor oracle_forward(const ParameterStore& store, const nn::Mlp& net, const Tensor& in) {
  Tensor h = in;
  for (std::size_t l = 0; l < net.layers(); ++l) {
    const Tensor& W = store.value(net.weight(l));
    const Tensor& b = store.value(net.bias(l));
    Tensor out(h.rows(), W.cols());
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < W.cols(); ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < W.rows(); ++k) s += h(i, k) * W(k, j);
        out(i, j) = l + 1 < net.layers() ? act(net.spec().activation, s) : s;
      }
    h = out;
  }
  return h;
}

}  // namespace

TEST(MlpInit, DeterministicInSeed) {
  MlpSpec spec{3, 2, {8, 8}, Activation::Elu};
  ParameterStore a, b, c;
  nn::Mlp::create(a, spec, "net", 42);
  nn::Mlp::create(b, spec, "net", 42);
  nn::Mlp::create(c, spec, "net", 43);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
}

TEST(MlpInit, ParameterCount) {
  MlpSpec spec{4, 2, {16}, Activation::Tanh};
  EXPECT_EQ(spec.parameter_count(), 114u);
  ParameterStore store;
  nn::Mlp::create(store, spec, "n", 1);
  EXPECT_EQ(store.scalar_count(), 4u * 16 + 16 + 16 * 2 + 2);
}

TEST(MlpInit, WeightsWithinGlorotBound) {
  MlpSpec spec{16, 16, {16}, Activation::Relu};
  ParameterStore store;
  auto net = nn::Mlp::create(store, spec, "n", 9);
  const double bound = std::sqrt(6.0 / 32.0);
  EXPECT_NEAR(bound, 0.433, 1e-3);
  for (std::size_t l = 0; l < net.layers(); ++l) {
    EXPECT_LE(max_abs(store.value(net.weight(l))), bound);
    EXPECT_EQ(max_abs(store.value(net.bias(l))), 0.0);
  }
}

TEST(MlpSpec, RejectsZeroWidths) {
  EXPECT_THROW((MlpSpec{0, 1, {}, Activation::Elu}.validate()), ContractViolation);
  EXPECT_THROW((MlpSpec{1, 1, {0}, Activation::Elu}.validate()), ContractViolation);
}

TEST(MlpForward, NoHiddenLayerIsAffine) {
  MlpSpec spec{2, 1, {}, Activation::Elu};
  ParameterStore store;
  auto net = nn::Mlp::create(store, spec, "n", 0);
  store.value(net.weight(0)) = Tensor::from_rows({{2}, {-3}});
  store.value(net.bias(0)) = Tensor::scalar(0.5);
  Tensor out = net.predict(store, Tensor::from_rows({{1, 1}, {0, 2}}));
  EXPECT_DOUBLE_EQ(out(0, 0), 2 - 3 + 0.5);
  EXPECT_DOUBLE_EQ(out(1, 0), -6 + 0.5);
}

TEST(MlpForward, ZeroWeightsGiveZeroOutput) {
  MlpSpec spec{3, 2, {5, 4}, Activation::Tanh};
  ParameterStore store;
  auto net = nn::Mlp::create(store, spec, "n", 0);
  for (auto id : net.params())
    for (auto& v : store.value(id).data()) v = 0.0;
  std::mt19937_64 rng(1);
  EXPECT_EQ(max_abs(net.predict(store, random_tensor(6, 3, rng))), 0.0);
}

TEST(MlpForward, MatchesLoopOracle) {
  std::mt19937_64 rng(2);
  for (auto a : {Activation::Tanh, Activation::Relu, Activation::Elu}) {
    MlpSpec spec{3, 2, {7, 5}, a};
    ParameterStore store;
    auto net = nn::Mlp::create(store, spec, "n", 77);
    for (auto id : net.params())
      for (auto& v : store.value(id).data()) v += 0.1;  // nonzero biases too
    Tensor in = random_tensor(9, 3, rng);
    Tensor got = net.predict(store, in);
    Tensor want = oracle_forward(store, net, in);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
  }
}

TEST(MlpForward, WrongInputWidthThrows) {
  ParameterStore store;
  auto net = nn::Mlp::create(store, MlpSpec{3, 1, {4}, Activation::Elu}, "n", 0);
  EXPECT_THROW(net.predict(store, Tensor(2, 2)), ContractViolation);
}

TEST(MlpAttach, RebindsByName) {
  MlpSpec spec{2, 1, {3}, Activation::Elu};
  ParameterStore store;
  auto net = nn::Mlp::create(store, spec, "n", 5);
  auto again = nn::Mlp::attach(store, spec, "n");
  EXPECT_EQ(net.params(), again.params());
  EXPECT_THROW(nn::Mlp::attach(store, MlpSpec{2, 1, {4}, Activation::Elu}, "n"), ContractViolation);
}

TEST(CrossLoglik, SingletonIsPositivePair) {
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, MlpSpec{2, 1, {4}, Activation::Elu}, "h", 3);
  Tensor a = Tensor::from_rows({{0.3, -0.2}});
  Tensor b = Tensor::scalar(0.7);
  Tensor L = nn::cross_loglik_matrix(store, head, a, b);
  ASSERT_EQ(L.rows(), 1u);
  Tensor mu = head.mean_net().predict(store, a);
  EXPECT_NEAR(L.item(), gaussian_log_density(b, mu, store.value(head.log_var_param())).item(), 1e-14);
}

TEST(CrossLoglik, DuplicateTargetsGiveEqualColumns) {
  std::mt19937_64 rng(4);
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, MlpSpec{2, 1, {4}, Activation::Elu}, "h", 3);
  Tensor a = random_tensor(3, 2, rng);
  Tensor b = Tensor::from_rows({{0.5}, {0.5}, {-1}});
  Tensor L = nn::cross_loglik_matrix(store, head, a, b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(L(i, 0), L(i, 1));
}

TEST(CrossLoglik, MatchesDoubleLoop) {
  std::mt19937_64 rng(6);
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, MlpSpec{2, 2, {4}, Activation::Elu}, "h", 3);
  store.value(head.log_var_param()) = Tensor::from_rows({{0.3, -0.4}});
  Tensor a = random_tensor(3, 2, rng);
  Tensor b = random_tensor(3, 2, rng);
  Tensor L = nn::cross_loglik_matrix(store, head, a, b);
  Tensor mu = head.mean_net().predict(store, a);
  const Tensor& lv = store.value(head.log_var_param());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double want = 0;
      for (std::size_t d = 0; d < 2; ++d) {
        const double r = b(j, d) - mu(i, d);
        want += -0.5 * (std::log(2 * std::numbers::pi) + lv[d] + r * r * std::exp(-lv[d]));
      }
      EXPECT_NEAR(L(i, j), want, 1e-12);
    }
}

TEST(GaussianHead, ClampsLogVar) {
  ParameterStore store;
  auto head = nn::GaussianHead::create(store, MlpSpec{1, 2, {}, Activation::Elu}, "h", 0);
  store.value(head.log_var_param()) = Tensor::from_rows({{-50, 50}});
  head.clamp_log_var(store);
  EXPECT_EQ(store.value(head.log_var_param()), Tensor::from_rows({{-6, 6}}));
}

TEST(Serialize, BlobRoundTrip) {
  ParameterStore store;
  nn::Mlp::create(store, MlpSpec{3, 2, {4}, Activation::Elu}, "n", 8);
  const auto dir = std::filesystem::temp_directory_path() / "autoiv_test_blob";
  std::filesystem::create_directories(dir);
  write_parameter_blob(store, dir / "p.bin");
  ParameterStore back = read_parameters(parameter_manifest(store), dir / "p.bin");
  EXPECT_EQ(back.values(), store.values());
  std::filesystem::resize_file(dir / "p.bin", 8);
  EXPECT_THROW(read_parameters(parameter_manifest(store), dir / "p.bin"), IoError);
  std::filesystem::remove_all(dir);
}
