#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autoiv/graph.hpp"

namespace autoiv::nn {

enum class Activation { Tanh, Relu, Elu };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct MlpSpec {
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  std::vector<std::size_t> hidden = {128, 128};
  Activation activation = Activation::Elu;

  void validate() const;
  std::size_t parameter_count() const;
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Fully connected network: affine layers with the activation between them and
/// a linear output layer. Weights live in a ParameterStore.
class Mlp {
 public:
  Mlp() = default;

  /// Register weights drawn from U(-b, b), b = sqrt(6 / (fan_in + fan_out)),
  /// and zero biases. Deterministic in `seed`.
  static Mlp create(ParameterStore& store, const MlpSpec& spec, const std::string& prefix,
                    std::uint64_t seed);
  /// Re-attach to parameters already present in `store` under `prefix`.
  static Mlp attach(const ParameterStore& store, const MlpSpec& spec, const std::string& prefix);

  NodeId forward(Graph& g, const ParameterStore& store, NodeId input, bool trainable) const;
  Tensor predict(const ParameterStore& store, const Tensor& input) const;

  const MlpSpec& spec() const noexcept { return spec_; }
  std::size_t layers() const noexcept { return weights_.size(); }
  ParamId weight(std::size_t layer) const { return weights_.at(layer); }
  ParamId bias(std::size_t layer) const { return biases_.at(layer); }
  std::vector<ParamId> params() const;

 private:
  MlpSpec spec_;
  std::vector<ParamId> weights_;
  std::vector<ParamId> biases_;
};

/// Conditional density q(b | a) = N(mean_net(a), diag(exp(log_var))) with a
/// learned, input-independent log variance.
class GaussianHead {
 public:
  static constexpr double kLogVarMin = -6.0;
  static constexpr double kLogVarMax = 6.0;

  GaussianHead() = default;
  static GaussianHead create(ParameterStore& store, const MlpSpec& mean_spec,
                             const std::string& prefix, std::uint64_t seed);
  static GaussianHead attach(const ParameterStore& store, const MlpSpec& mean_spec,
                             const std::string& prefix);

  NodeId mean(Graph& g, const ParameterStore& store, NodeId a, bool trainable) const;
  NodeId log_var(Graph& g, const ParameterStore& store, bool trainable) const;

  /// Project log_var back into [kLogVarMin, kLogVarMax]; call after every update.
  void clamp_log_var(ParameterStore& store) const;

  const Mlp& mean_net() const noexcept { return mean_net_; }
  ParamId log_var_param() const noexcept { return log_var_; }
  std::size_t input_dim() const noexcept { return mean_net_.spec().input_dim; }
  std::size_t output_dim() const noexcept { return mean_net_.spec().output_dim; }
  std::vector<ParamId> params() const;

 private:
  Mlp mean_net_;
  ParamId log_var_ = 0;
};

/// [N x N] matrix with entry (i, j) = log q(b_j | a_i); the diagonal holds the
/// positive pairs. Gradients reach the head (when trainable) and whichever of
/// a_repr / b require them.
NodeId cross_loglik_matrix(Graph& g, const ParameterStore& store, const GaussianHead& head,
                           NodeId a_repr, NodeId b, bool head_trainable);

/// Tensor-only version for evaluation.
Tensor cross_loglik_matrix(const ParameterStore& store, const GaussianHead& head, const Tensor& a,
                           const Tensor& b);

}  // namespace autoiv::nn
