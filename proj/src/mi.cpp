#include "autoiv/mi.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "autoiv/errors.hpp"

namespace autoiv::mi {

PairWeights rbf_pair_weights(const Tensor& x, double sigma) {
  if (!(sigma > 0.0)) throw ContractViolation("rbf_pair_weights: sigma must be > 0");
  if (x.rows() == 0) throw ContractViolation("rbf_pair_weights: empty batch");
  const std::size_t n = x.rows();
  const double denom = 2.0 * sigma * sigma;
  Tensor omega(n, n);
  std::vector<double> k(n);
  for (std::size_t i = 0; i < n; ++i) {
    double kmax = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(j, c);
        d2 += diff * diff;
      }
      k[j] = std::exp(-d2 / denom);
      kmax = std::max(kmax, k[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      k[j] = std::exp(k[j] - kmax);
      z += k[j];
    }
    for (std::size_t j = 0; j < n; ++j) omega(i, j) = k[j] / z;
  }
  return {std::move(omega), sigma};
}

NodeId lld_loss(Graph& g, const ParameterStore& store, const nn::GaussianHead& head, NodeId a_repr,
                NodeId b) {
  const NodeId a = g.stop_gradient(a_repr);
  const NodeId target = g.stop_gradient(b);
  if (g.value(a).rows() != g.value(target).rows()) throw ContractViolation("lld_loss: row mismatch");
  const NodeId mean = head.mean(g, store, a, true);
  const NodeId lv = head.log_var(g, store, true);
  return g.scale(g.mean(g.gaussian_log_density(target, mean, lv)), -1.0);
}

namespace {

void require_square(const Graph& g, NodeId l, const char* what) {
  const Tensor& L = g.value(l);
  if (L.rows() != L.cols() || L.rows() == 0) {
    throw ContractViolation(std::string(what) + ": expected non-empty square matrix, got " +
                            L.shape_str());
  }
}

}  // namespace

NodeId mi_max_loss(Graph& g, NodeId loglik) {
  require_square(g, loglik, "mi_max_loss");
  return g.scale(g.sub(g.mean(g.diag(loglik)), g.mean(loglik)), -1.0);
}

NodeId mi_min_loss(Graph& g, NodeId loglik) {
  require_square(g, loglik, "mi_min_loss");
  return g.sub(g.mean(g.diag(loglik)), g.mean(loglik));
}

NodeId mi_min_conditional_loss(Graph& g, NodeId loglik, const PairWeights& weights) {
  require_square(g, loglik, "mi_min_conditional_loss");
  const std::size_t n = g.value(loglik).rows();
  if (!weights.omega.same_shape(g.value(loglik))) {
    throw ContractViolation("mi_min_conditional_loss: weights " + weights.omega.shape_str() +
                            " vs loglik " + g.value(loglik).shape_str());
  }
  Tensor row_sums(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) row_sums[i] += weights.omega(i, j);
  const NodeId positive = g.sum(g.mul(g.diag(loglik), g.constant(std::move(row_sums))));
  const NodeId negative = g.sum(g.mul(loglik, g.constant(weights.omega)));
  return g.scale(g.sub(positive, negative), 1.0 / static_cast<double>(n * n));
}

double gap_statistic(const Tensor& loglik) {
  const std::size_t n = loglik.rows();
  if (n < 2 || loglik.cols() != n) throw ContractViolation("gap_statistic: need square N >= 2");
  double diag = 0.0;
  double off = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += loglik(i, j);
  return diag / static_cast<double>(n) - off / static_cast<double>(n * (n - 1));
}

double weighted_gap(const Tensor& loglik, const PairWeights& weights) {
  const std::size_t n = loglik.rows();
  if (!weights.omega.same_shape(loglik) || loglik.cols() != n) {
    throw ContractViolation("weighted_gap: shape mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s += weights.omega(i, j) * (loglik(i, i) - loglik(i, j));
  return s / static_cast<double>(n);
}

LossBundle combine_objectives(Graph& g, const ObjectiveTerms& terms, double alpha, double eta,
                              const Ablation& ablation) {
  if (!(alpha >= 0.0) || !(eta >= 0.0)) {
    throw ContractViolation("combine_objectives: alpha and eta must be >= 0");
  }
  LossBundle out;
  auto record = [&](const char* name, const std::optional<NodeId>& node) {
    if (node) out.breakdown[name] = g.value(*node).item();
  };

  auto accumulate = [&](std::optional<NodeId>& total, const std::optional<NodeId>& term,
                        double weight) {
    if (!term || weight == 0.0) return;
    const NodeId t = weight == 1.0 ? *term : g.scale(*term, weight);
    total = total ? g.add(*total, t) : t;
  };

  for (const auto& term : {terms.lld_zx, terms.lld_zy, terms.lld_cx, terms.lld_cy, terms.lld_zc})
    accumulate(out.lld_total, term, 1.0);

  if (!ablation.disable_z_mi) {
    accumulate(out.mi_total, terms.mi_zx, 1.0);
    accumulate(out.mi_total, terms.mi_zy, 1.0);
  }
  if (!ablation.disable_c_mi) {
    accumulate(out.mi_total, terms.mi_cx, alpha);
    accumulate(out.mi_total, terms.mi_cy, alpha);
  }
  if (!ablation.disable_zc_reg) accumulate(out.mi_total, terms.mi_zc, eta);

  if (!ablation.disable_two_stage) {
    out.l_x = terms.l_x;
    out.l_y = terms.l_y;
  }

  record("lld_zx", terms.lld_zx);
  record("lld_zy", terms.lld_zy);
  record("lld_cx", terms.lld_cx);
  record("lld_cy", terms.lld_cy);
  record("lld_zc", terms.lld_zc);
  record("mi_zx", terms.mi_zx);
  record("mi_zy", terms.mi_zy);
  record("mi_cx", terms.mi_cx);
  record("mi_cy", terms.mi_cy);
  record("mi_zc", terms.mi_zc);
  record("lld_total", out.lld_total);
  record("mi_total", out.mi_total);
  record("l_x", out.l_x);
  record("l_y", out.l_y);
  return out;
}

}  // namespace autoiv::mi
