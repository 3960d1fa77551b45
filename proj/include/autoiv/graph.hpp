#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "autoiv/tensor.hpp"

namespace autoiv {

using NodeId = std::size_t;
using ParamId = std::size_t;

/// Owns trainable tensors across many graphs. Graphs are rebuilt per
/// minibatch; the store is what persists between them.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor init);

  std::size_t size() const noexcept { return values_.size(); }
  Tensor& value(ParamId id) { return values_.at(id); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  /// Lookup by name; throws ContractViolation when absent.
  ParamId find(const std::string& name) const;

  const std::vector<Tensor>& values() const noexcept { return values_; }
  void restore(std::vector<Tensor> values);
  std::size_t scalar_count() const noexcept;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

enum class OpKind : std::uint8_t {
  Constant,
  Parameter,
  StopGradient,
  MatMul,
  Add,
  AddRow,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Relu,
  Elu,
  Square,
  Sum,
  Mean,
  Diag,
  ConcatCols,
  GaussianLogDensity,
  CrossGaussianLogLik,
};

const char* op_name(OpKind kind);

/// Define-by-run reverse-mode trace. Nodes are appended in topological
/// order, so every parent id is smaller than its child's id.
class Graph {
 public:
  struct Node {
    OpKind kind;
    std::vector<NodeId> parents;
    Tensor value;
    double attr = 0.0;
    bool requires_grad = false;
    std::ptrdiff_t param = -1;  // store id for trainable Parameter nodes
  };

  NodeId constant(Tensor value);
  /// Register a store parameter. Frozen parameters enter as constants but
  /// gradients still flow through any op that consumes them.
  NodeId parameter(const ParameterStore& store, ParamId id, bool trainable);

  NodeId stop_gradient(NodeId a);
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  /// [N x d] + [1 x d], broadcast over rows.
  NodeId add_row(NodeId a, NodeId row);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId elu(NodeId a);
  NodeId square(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  /// Diagonal of a square matrix as an [N x 1] column.
  NodeId diag(NodeId a);
  NodeId concat_cols(NodeId a, NodeId b);
  /// Row-wise diagonal-Gaussian log density of b [N x d] under mean [N x d]
  /// with shared log variance [1 x d]; result is [N x 1].
  NodeId gaussian_log_density(NodeId b, NodeId mean, NodeId log_var);
  /// Entry (i, j) is log N(b_j; mean_i, diag(exp(log_var))); result is [N x N].
  NodeId cross_gaussian_loglik(NodeId mean, NodeId b, NodeId log_var);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Trainable Parameter nodes, in insertion order.
  const std::vector<NodeId>& trainable() const noexcept { return trainable_; }

 private:
  NodeId push(OpKind kind, std::vector<NodeId> parents, Tensor value, double attr = 0.0);
  void check(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> trainable_;
};

/// Gradients of a scalar loss with respect to every trainable parameter node
/// of the graph. Parameters the loss does not reach get a zero tensor.
/// Throws ContractViolation for a non-scalar loss and NumericError (carrying
/// the node id) when a NaN appears in any propagated gradient.
std::map<NodeId, Tensor> backward(const Graph& graph, NodeId loss);

/// Re-key backward() output by store parameter id.
std::map<ParamId, Tensor> gradients_by_param(const Graph& graph,
                                             const std::map<NodeId, Tensor>& grads);

/// Pure-tensor density with the same arithmetic as the graph op.
Tensor gaussian_log_density(const Tensor& b, const Tensor& mean, const Tensor& log_var);

}  // namespace autoiv
