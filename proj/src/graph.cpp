#include "autoiv/graph.hpp"

#include <cmath>
#include <numbers>
#include <optional>

#include "autoiv/errors.hpp"

namespace autoiv {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

ParamId ParameterStore::add(std::string name, Tensor init) {
  for (const auto& n : names_) require(n != name, "duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

ParamId ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw ContractViolation("no parameter named '" + name + "'");
}

void ParameterStore::restore(std::vector<Tensor> values) {
  require(values.size() == values_.size(), "restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i)
    require(values[i].same_shape(values_[i]), "restore: shape mismatch for " + names_[i]);
  values_ = std::move(values);
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

// ---------------------------------------------------------------------------
// Graph construction

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::StopGradient: return "stop_gradient";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Elu: return "elu";
    case OpKind::Square: return "square";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Diag: return "diag";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::GaussianLogDensity: return "gaussian_log_density";
    case OpKind::CrossGaussianLogLik: return "cross_gaussian_loglik";
  }
  return "?";
}

void Graph::check(NodeId id) const {
  if (id >= nodes_.size()) throw ContractViolation("unknown graph node " + std::to_string(id));
}

NodeId Graph::push(OpKind kind, std::vector<NodeId> parents, Tensor value, double attr) {
  bool rg = false;
  for (NodeId p : parents) {
    check(p);
    rg = rg || nodes_[p].requires_grad;
  }
  nodes_.push_back(Node{kind, std::move(parents), std::move(value), attr, rg, -1});
  return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) { return push(OpKind::Constant, {}, std::move(value)); }

NodeId Graph::parameter(const ParameterStore& store, ParamId id, bool trainable) {
  nodes_.push_back(Node{OpKind::Parameter, {}, store.value(id), 0.0, trainable,
                        trainable ? static_cast<std::ptrdiff_t>(id) : -1});
  const NodeId nid = nodes_.size() - 1;
  if (trainable) trainable_.push_back(nid);
  return nid;
}

NodeId Graph::stop_gradient(NodeId a) {
  check(a);
  nodes_.push_back(Node{OpKind::StopGradient, {a}, nodes_[a].value, 0.0, false, -1});
  return nodes_.size() - 1;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check(a);
  check(b);
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  require(A.cols() == B.rows(), "matmul shape mismatch " + A.shape_str() + " * " + B.shape_str());
  Tensor out(A.rows(), B.cols());
  out.mat().noalias() = A.mat() * B.mat();
  return push(OpKind::MatMul, {a, b}, std::move(out));
}

NodeId Graph::add(NodeId a, NodeId b) {
  check(a);
  check(b);
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  require(A.same_shape(B), "add shape mismatch " + A.shape_str() + " + " + B.shape_str());
  Tensor out = A;
  out.mat() += B.mat();
  return push(OpKind::Add, {a, b}, std::move(out));
}

NodeId Graph::add_row(NodeId a, NodeId row) {
  check(a);
  check(row);
  const Tensor& A = nodes_[a].value;
  const Tensor& R = nodes_[row].value;
  require(R.rows() == 1 && R.cols() == A.cols(),
          "add_row shape mismatch " + A.shape_str() + " + " + R.shape_str());
  Tensor out = A;
  out.mat().rowwise() += R.mat().row(0);
  return push(OpKind::AddRow, {a, row}, std::move(out));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check(a);
  check(b);
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  require(A.same_shape(B), "sub shape mismatch " + A.shape_str() + " - " + B.shape_str());
  Tensor out = A;
  out.mat() -= B.mat();
  return push(OpKind::Sub, {a, b}, std::move(out));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check(a);
  check(b);
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  require(A.same_shape(B), "mul shape mismatch " + A.shape_str() + " * " + B.shape_str());
  Tensor out = A;
  out.mat().array() *= B.mat().array();
  return push(OpKind::Mul, {a, b}, std::move(out));
}

NodeId Graph::scale(NodeId a, double c) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v *= c;
  return push(OpKind::Scale, {a}, std::move(out), c);
}

NodeId Graph::add_scalar(NodeId a, double c) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v += c;
  return push(OpKind::AddScalar, {a}, std::move(out), c);
}

NodeId Graph::tanh(NodeId a) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v = std::tanh(v);
  return push(OpKind::Tanh, {a}, std::move(out));
}

NodeId Graph::relu(NodeId a) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return push(OpKind::Relu, {a}, std::move(out));
}

NodeId Graph::elu(NodeId a) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v = v > 0.0 ? v : std::expm1(v);
  return push(OpKind::Elu, {a}, std::move(out));
}

NodeId Graph::square(NodeId a) {
  check(a);
  Tensor out = nodes_[a].value;
  for (double& v : out.data()) v = v * v;
  return push(OpKind::Square, {a}, std::move(out));
}

NodeId Graph::sum(NodeId a) {
  check(a);
  double s = 0.0;
  for (double v : nodes_[a].value.data()) s += v;
  return push(OpKind::Sum, {a}, Tensor::scalar(s));
}

NodeId Graph::mean(NodeId a) {
  check(a);
  const Tensor& A = nodes_[a].value;
  require(A.size() > 0, "mean of empty tensor");
  double s = 0.0;
  for (double v : A.data()) s += v;
  return push(OpKind::Mean, {a}, Tensor::scalar(s / static_cast<double>(A.size())));
}

NodeId Graph::diag(NodeId a) {
  check(a);
  const Tensor& A = nodes_[a].value;
  require(A.rows() == A.cols(), "diag of non-square " + A.shape_str());
  Tensor out(A.rows(), 1);
  for (std::size_t i = 0; i < A.rows(); ++i) out[i] = A(i, i);
  return push(OpKind::Diag, {a}, std::move(out));
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
  check(a);
  check(b);
  return push(OpKind::ConcatCols, {a, b}, hconcat(nodes_[a].value, nodes_[b].value));
}

Tensor gaussian_log_density(const Tensor& b, const Tensor& mean, const Tensor& log_var) {
  require(b.same_shape(mean), "gaussian_log_density: b " + b.shape_str() + " vs mean " +
                                  mean.shape_str());
  require(log_var.rows() == 1 && log_var.cols() == b.cols(),
          "gaussian_log_density: log_var " + log_var.shape_str() + " vs b " + b.shape_str());
  const std::size_t n = b.rows();
  const std::size_t d = b.cols();
  std::vector<double> inv_var(d);
  for (std::size_t k = 0; k < d; ++k) inv_var[k] = std::exp(-log_var[k]);
  Tensor out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = b(i, k) - mean(i, k);
      s += diff * diff * inv_var[k] + log_var[k] + kLog2Pi;
    }
    out[i] = -0.5 * s;
  }
  return out;
}

NodeId Graph::gaussian_log_density(NodeId b, NodeId mean, NodeId log_var) {
  check(b);
  check(mean);
  check(log_var);
  Tensor out =
      autoiv::gaussian_log_density(nodes_[b].value, nodes_[mean].value, nodes_[log_var].value);
  return push(OpKind::GaussianLogDensity, {b, mean, log_var}, std::move(out));
}

NodeId Graph::cross_gaussian_loglik(NodeId mean, NodeId b, NodeId log_var) {
  check(mean);
  check(b);
  check(log_var);
  const Tensor& M = nodes_[mean].value;
  const Tensor& B = nodes_[b].value;
  const Tensor& LV = nodes_[log_var].value;
  require(M.cols() == B.cols(),
          "cross_gaussian_loglik: mean " + M.shape_str() + " vs b " + B.shape_str());
  require(LV.rows() == 1 && LV.cols() == B.cols(),
          "cross_gaussian_loglik: log_var " + LV.shape_str() + " vs b " + B.shape_str());
  const std::size_t n = M.rows();
  const std::size_t m = B.rows();
  const std::size_t d = B.cols();
  std::vector<double> inv_var(d);
  for (std::size_t k = 0; k < d; ++k) inv_var[k] = std::exp(-LV[k]);
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        // same expression order as gaussian_log_density so the diagonal matches bitwise
        const double diff = B(j, k) - M(i, k);
        s += diff * diff * inv_var[k] + LV[k] + kLog2Pi;
      }
      out(i, j) = -0.5 * s;
    }
  }
  return push(OpKind::CrossGaussianLogLik, {mean, b, log_var}, std::move(out));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void accumulate(std::vector<std::optional<Tensor>>& grads, NodeId id, Tensor g) {
  auto& slot = grads[id];
  if (!slot) {
    slot = std::move(g);
  } else {
    slot->mat() += g.mat();
  }
}

bool has_nan(const Tensor& t) {
  for (double v : t.data())
    if (std::isnan(v)) return true;
  return false;
}

}  // namespace

std::map<NodeId, Tensor> backward(const Graph& graph, NodeId loss) {
  if (loss >= graph.size()) throw ContractViolation("backward: unknown loss node");
  if (!graph.value(loss).is_scalar()) {
    throw ContractViolation("backward: loss must be scalar, got " +
                            graph.value(loss).shape_str());
  }
  std::vector<std::optional<Tensor>> grads(graph.size());
  grads[loss] = Tensor::scalar(1.0);

  for (NodeId k = loss + 1; k-- > 0;) {
    const auto& node = graph.node(k);
    if (!node.requires_grad || !grads[k]) continue;
    const Tensor& G = *grads[k];
    if (has_nan(G)) {
      throw NumericError("NaN gradient at node " + std::to_string(k) + " (" +
                             op_name(node.kind) + ")",
                         static_cast<std::ptrdiff_t>(k));
    }
    const auto& ps = node.parents;
    auto wants = [&](std::size_t i) { return graph.node(ps[i]).requires_grad; };

    switch (node.kind) {
      case OpKind::Constant:
      case OpKind::Parameter:
      case OpKind::StopGradient:
        break;
      case OpKind::MatMul: {
        const Tensor& A = graph.value(ps[0]);
        const Tensor& B = graph.value(ps[1]);
        if (wants(0)) {
          Tensor ga(A.rows(), A.cols());
          ga.mat().noalias() = G.mat() * B.mat().transpose();
          accumulate(grads, ps[0], std::move(ga));
        }
        if (wants(1)) {
          Tensor gb(B.rows(), B.cols());
          gb.mat().noalias() = A.mat().transpose() * G.mat();
          accumulate(grads, ps[1], std::move(gb));
        }
        break;
      }
      case OpKind::Add:
        if (wants(0)) accumulate(grads, ps[0], G);
        if (wants(1)) accumulate(grads, ps[1], G);
        break;
      case OpKind::AddRow:
        if (wants(0)) accumulate(grads, ps[0], G);
        if (wants(1)) {
          Tensor gr(1, G.cols());
          gr.mat() = G.mat().colwise().sum();
          accumulate(grads, ps[1], std::move(gr));
        }
        break;
      case OpKind::Sub:
        if (wants(0)) accumulate(grads, ps[0], G);
        if (wants(1)) {
          Tensor gb = G;
          for (double& v : gb.data()) v = -v;
          accumulate(grads, ps[1], std::move(gb));
        }
        break;
      case OpKind::Mul: {
        const Tensor& A = graph.value(ps[0]);
        const Tensor& B = graph.value(ps[1]);
        if (wants(0)) {
          Tensor ga = G;
          ga.mat().array() *= B.mat().array();
          accumulate(grads, ps[0], std::move(ga));
        }
        if (wants(1)) {
          Tensor gb = G;
          gb.mat().array() *= A.mat().array();
          accumulate(grads, ps[1], std::move(gb));
        }
        break;
      }
      case OpKind::Scale: {
        Tensor ga = G;
        for (double& v : ga.data()) v *= node.attr;
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::AddScalar:
        accumulate(grads, ps[0], G);
        break;
      case OpKind::Tanh: {
        Tensor ga = G;
        const auto y = node.value.data();
        auto g = ga.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - y[i] * y[i];
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::Relu: {
        Tensor ga = G;
        const auto x = graph.value(ps[0]).data();
        auto g = ga.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(x[i] > 0.0)) g[i] = 0.0;
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::Elu: {
        Tensor ga = G;
        const auto x = graph.value(ps[0]).data();
        const auto y = node.value.data();
        auto g = ga.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(x[i] > 0.0)) g[i] *= y[i] + 1.0;
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::Square: {
        Tensor ga = G;
        const auto x = graph.value(ps[0]).data();
        auto g = ga.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * x[i];
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::Sum: {
        const Tensor& A = graph.value(ps[0]);
        accumulate(grads, ps[0], Tensor(A.rows(), A.cols(), G.item()));
        break;
      }
      case OpKind::Mean: {
        const Tensor& A = graph.value(ps[0]);
        accumulate(grads, ps[0],
                   Tensor(A.rows(), A.cols(), G.item() / static_cast<double>(A.size())));
        break;
      }
      case OpKind::Diag: {
        const Tensor& A = graph.value(ps[0]);
        Tensor ga(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.rows(); ++i) ga(i, i) = G[i];
        accumulate(grads, ps[0], std::move(ga));
        break;
      }
      case OpKind::ConcatCols: {
        const Tensor& A = graph.value(ps[0]);
        const Tensor& B = graph.value(ps[1]);
        if (wants(0)) {
          Tensor ga(A.rows(), A.cols());
          for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) = G(r, c);
          accumulate(grads, ps[0], std::move(ga));
        }
        if (wants(1)) {
          Tensor gb(B.rows(), B.cols());
          for (std::size_t r = 0; r < B.rows(); ++r)
            for (std::size_t c = 0; c < B.cols(); ++c) gb(r, c) = G(r, A.cols() + c);
          accumulate(grads, ps[1], std::move(gb));
        }
        break;
      }
      case OpKind::GaussianLogDensity: {
        const Tensor& B = graph.value(ps[0]);
        const Tensor& M = graph.value(ps[1]);
        const Tensor& LV = graph.value(ps[2]);
        const std::size_t n = B.rows();
        const std::size_t d = B.cols();
        Tensor gb(n, d), gm(n, d), glv(1, d);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < d; ++k) {
            const double w = std::exp(-LV[k]);
            const double diff = B(i, k) - M(i, k);
            gb(i, k) = -G[i] * diff * w;
            gm(i, k) = G[i] * diff * w;
            glv[k] += G[i] * 0.5 * (diff * diff * w - 1.0);
          }
        }
        if (wants(0)) accumulate(grads, ps[0], std::move(gb));
        if (wants(1)) accumulate(grads, ps[1], std::move(gm));
        if (wants(2)) accumulate(grads, ps[2], std::move(glv));
        break;
      }
      case OpKind::CrossGaussianLogLik: {
        const Tensor& M = graph.value(ps[0]);
        const Tensor& B = graph.value(ps[1]);
        const Tensor& LV = graph.value(ps[2]);
        const std::size_t n = M.rows();
        const std::size_t m = B.rows();
        const std::size_t d = B.cols();
        Tensor gm(n, d), gb(m, d), glv(1, d);
        for (std::size_t k = 0; k < d; ++k) {
          const double w = std::exp(-LV[k]);
          double lv_acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            double m_acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double g = G(i, j);
              const double diff = B(j, k) - M(i, k);
              m_acc += g * diff;
              gb(j, k) -= g * diff * w;
              lv_acc += g * (diff * diff * w - 1.0);
            }
            gm(i, k) = m_acc * w;
          }
          glv[k] = 0.5 * lv_acc;
        }
        if (wants(0)) accumulate(grads, ps[0], std::move(gm));
        if (wants(1)) accumulate(grads, ps[1], std::move(gb));
        if (wants(2)) accumulate(grads, ps[2], std::move(glv));
        break;
      }
    }
  }

  std::map<NodeId, Tensor> out;
  for (NodeId id : graph.trainable()) {
    if (grads[id]) {
      if (has_nan(*grads[id])) {
        throw NumericError("NaN gradient at parameter node " + std::to_string(id),
                           static_cast<std::ptrdiff_t>(id));
      }
      out.emplace(id, std::move(*grads[id]));
    } else {
      const Tensor& v = graph.value(id);
      out.emplace(id, Tensor(v.rows(), v.cols()));
    }
  }
  return out;
}

std::map<ParamId, Tensor> gradients_by_param(const Graph& graph,
                                             const std::map<NodeId, Tensor>& grads) {
  std::map<ParamId, Tensor> out;
  for (const auto& [nid, g] : grads) {
    const auto pid = graph.node(nid).param;
    if (pid < 0) continue;
    auto [it, inserted] = out.emplace(static_cast<ParamId>(pid), g);
    if (!inserted) it->second.mat() += g.mat();  // same parameter registered twice
  }
  return out;
}

}  // namespace autoiv
