#include "autoiv/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "autoiv/errors.hpp"

namespace autoiv::nn {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Elu: return "elu";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "elu") return Activation::Elu;
  throw ContractViolation("unknown activation '" + s + "'");
}

void MlpSpec::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ContractViolation("MlpSpec: zero input/output dim");
  for (auto w : hidden)
    if (w == 0) throw ContractViolation("MlpSpec: hidden width must be >= 1");
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  std::size_t prev = input_dim;
  for (auto w : hidden) {
    n += prev * w + w;
    prev = w;
  }
  return n + prev * output_dim + output_dim;
}

namespace {

std::vector<std::size_t> widths(const MlpSpec& spec) {
  std::vector<std::size_t> w{spec.input_dim};
  w.insert(w.end(), spec.hidden.begin(), spec.hidden.end());
  w.push_back(spec.output_dim);
  return w;
}

std::string layer_name(const std::string& prefix, std::size_t l, char kind) {
  return prefix + "/" + kind + std::to_string(l);
}

}  // namespace

Mlp Mlp::create(ParameterStore& store, const MlpSpec& spec, const std::string& prefix,
                std::uint64_t seed) {
  spec.validate();
  Mlp net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);
  const auto w = widths(spec);
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w[l] + w[l + 1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor W(w[l], w[l + 1]);
    for (double& v : W.data()) v = dist(rng);
    net.weights_.push_back(store.add(layer_name(prefix, l, 'W'), std::move(W)));
    net.biases_.push_back(store.add(layer_name(prefix, l, 'b'), Tensor(1, w[l + 1])));
  }
  return net;
}

Mlp Mlp::attach(const ParameterStore& store, const MlpSpec& spec, const std::string& prefix) {
  spec.validate();
  Mlp net;
  net.spec_ = spec;
  const auto w = widths(spec);
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const ParamId W = store.find(layer_name(prefix, l, 'W'));
    const ParamId b = store.find(layer_name(prefix, l, 'b'));
    if (store.value(W).rows() != w[l] || store.value(W).cols() != w[l + 1] ||
        store.value(b).cols() != w[l + 1]) {
      throw ContractViolation("Mlp::attach: shape mismatch at layer " + std::to_string(l) +
                              " of " + prefix);
    }
    net.weights_.push_back(W);
    net.biases_.push_back(b);
  }
  return net;
}

NodeId Mlp::forward(Graph& g, const ParameterStore& store, NodeId input, bool trainable) const {
  if (g.value(input).cols() != spec_.input_dim) {
    throw ContractViolation("mlp_forward: input width " + std::to_string(g.value(input).cols()) +
                            " != spec input_dim " + std::to_string(spec_.input_dim));
  }
  NodeId h = input;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const NodeId W = g.parameter(store, weights_[l], trainable);
    const NodeId b = g.parameter(store, biases_[l], trainable);
    h = g.add_row(g.matmul(h, W), b);
    if (l + 1 < weights_.size()) {
      switch (spec_.activation) {
        case Activation::Tanh: h = g.tanh(h); break;
        case Activation::Relu: h = g.relu(h); break;
        case Activation::Elu: h = g.elu(h); break;
      }
    }
  }
  return h;
}

Tensor Mlp::predict(const ParameterStore& store, const Tensor& input) const {
  Graph g;
  const NodeId out = forward(g, store, g.constant(input), false);
  return g.value(out);
}

std::vector<ParamId> Mlp::params() const {
  std::vector<ParamId> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(weights_[l]);
    out.push_back(biases_[l]);
  }
  return out;
}

GaussianHead GaussianHead::create(ParameterStore& store, const MlpSpec& mean_spec,
                                  const std::string& prefix, std::uint64_t seed) {
  GaussianHead h;
  h.mean_net_ = Mlp::create(store, mean_spec, prefix + "/mean", seed);
  h.log_var_ = store.add(prefix + "/log_var", Tensor(1, mean_spec.output_dim));
  return h;
}

GaussianHead GaussianHead::attach(const ParameterStore& store, const MlpSpec& mean_spec,
                                  const std::string& prefix) {
  GaussianHead h;
  h.mean_net_ = Mlp::attach(store, mean_spec, prefix + "/mean");
  h.log_var_ = store.find(prefix + "/log_var");
  return h;
}

NodeId GaussianHead::mean(Graph& g, const ParameterStore& store, NodeId a, bool trainable) const {
  return mean_net_.forward(g, store, a, trainable);
}

NodeId GaussianHead::log_var(Graph& g, const ParameterStore& store, bool trainable) const {
  return g.parameter(store, log_var_, trainable);
}

void GaussianHead::clamp_log_var(ParameterStore& store) const {
  for (double& v : store.value(log_var_).data()) v = std::clamp(v, kLogVarMin, kLogVarMax);
}

std::vector<ParamId> GaussianHead::params() const {
  auto out = mean_net_.params();
  out.push_back(log_var_);
  return out;
}

NodeId cross_loglik_matrix(Graph& g, const ParameterStore& store, const GaussianHead& head,
                           NodeId a_repr, NodeId b, bool head_trainable) {
  if (g.value(a_repr).cols() != head.input_dim() || g.value(b).cols() != head.output_dim()) {
    throw ContractViolation("cross_loglik_matrix: head expects " +
                            std::to_string(head.input_dim()) + " -> " +
                            std::to_string(head.output_dim()) + ", got a " +
                            g.value(a_repr).shape_str() + ", b " + g.value(b).shape_str());
  }
  if (g.value(a_repr).rows() != g.value(b).rows()) {
    throw ContractViolation("cross_loglik_matrix: row count mismatch");
  }
  const NodeId mean = head.mean(g, store, a_repr, head_trainable);
  const NodeId lv = head.log_var(g, store, head_trainable);
  return g.cross_gaussian_loglik(mean, b, lv);
}

Tensor cross_loglik_matrix(const ParameterStore& store, const GaussianHead& head, const Tensor& a,
                           const Tensor& b) {
  Graph g;
  const NodeId m = cross_loglik_matrix(g, store, head, g.constant(a), g.constant(b), false);
  return g.value(m);
}

}  // namespace autoiv::nn
