#include "autoiv/optim.hpp"

#include <cmath>

#include "autoiv/errors.hpp"

namespace autoiv {

void adam_step(ParameterStore& params, const std::map<ParamId, Tensor>& grads, AdamState& state) {
  for (const auto& [id, g] : grads) {
    if (id >= params.size()) throw ContractViolation("adam_step: unknown parameter id");
    if (!g.same_shape(params.value(id))) {
      throw ContractViolation("adam_step: gradient " + g.shape_str() + " vs parameter " +
                              params.value(id).shape_str() + " for " + params.name(id));
    }
    for (auto* buffers : {&state.first_moment, &state.second_moment}) {
      auto it = buffers->find(id);
      if (it == buffers->end()) {
        buffers->emplace(id, Tensor(g.rows(), g.cols()));
      } else if (!it->second.same_shape(g)) {
        throw ContractViolation("adam_step: moment buffer shape changed for " + params.name(id));
      }
    }
  }

  state.t += 1;
  const auto& o = state.options;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));

  for (const auto& [id, g] : grads) {
    auto m = state.first_moment.at(id).data();
    auto v = state.second_moment.at(id).data();
    auto p = params.value(id).data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gd[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gd[i] * gd[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

}  // namespace autoiv
