#pragma once

#include <map>
#include <optional>
#include <string>

#include "autoiv/graph.hpp"
#include "autoiv/nets.hpp"

namespace autoiv::mi {

/// Row-stochastic pair weights: row i is a softmax over j of the RBF kernel
/// exp(-|x_i - x_j|^2 / (2 sigma^2)).
struct PairWeights {
  Tensor omega;
  double sigma = 0.5;
};

PairWeights rbf_pair_weights(const Tensor& x, double sigma);

/// -(1/N) sum_i log q(b_i | a_i). a_repr and b enter through stop-gradient,
/// so only the head's parameters can learn from this term.
NodeId lld_loss(Graph& g, const ParameterStore& store, const nn::GaussianHead& head, NodeId a_repr,
                NodeId b);

/// -(1/N^2) sum_ij (L_ii - L_ij): minimizing widens the positive/negative gap.
NodeId mi_max_loss(Graph& g, NodeId loglik);
/// (1/N^2) sum_ij w_ij (L_ii - L_ij): minimizing shrinks the weighted gap.
NodeId mi_min_conditional_loss(Graph& g, NodeId loglik, const PairWeights& weights);
/// (1/N^2) sum_ij (L_ii - L_ij).
NodeId mi_min_loss(Graph& g, NodeId loglik);

/// Mean diagonal minus mean off-diagonal entry (N >= 2); the quantity the MI
/// losses push on.
double gap_statistic(const Tensor& loglik);
/// (1/N) sum_ij w_ij (L_ii - L_ij); the conditional analogue used for exclusion.
double weighted_gap(const Tensor& loglik, const PairWeights& weights);

/// Switches that remove loss groups, one per ablation row.
struct Ablation {
  bool disable_z_mi = false;    // L_ZX^MI + L_ZY^MI
  bool disable_c_mi = false;    // L_CX^MI + L_CY^MI
  bool disable_zc_reg = false;  // L_ZC^MI
  bool disable_two_stage = false;  // L_X + L_Y
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

/// Scalar loss nodes feeding the combined objectives; absent terms are skipped.
struct ObjectiveTerms {
  std::optional<NodeId> lld_zx, lld_zy, lld_cx, lld_cy, lld_zc;
  std::optional<NodeId> mi_zx, mi_zy, mi_cx, mi_cy, mi_zc;
  std::optional<NodeId> l_x, l_y;
};

struct LossBundle {
  std::optional<NodeId> lld_total;
  std::optional<NodeId> mi_total;
  std::optional<NodeId> l_x;
  std::optional<NodeId> l_y;
  std::map<std::string, double> breakdown;
};

/// lld_total = sum of the LLD terms; mi_total = zx + zy + alpha (cx + cy) + eta zc
/// after ablation. Throws ContractViolation for negative alpha or eta.
LossBundle combine_objectives(Graph& g, const ObjectiveTerms& terms, double alpha, double eta,
                              const Ablation& ablation = {});

}  // namespace autoiv::mi
