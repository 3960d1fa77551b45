#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "autoiv/graph.hpp"

namespace autoiv {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for one optimizer. Buffers are created lazily on the first
/// step a parameter receives, then must keep that parameter's shape.
struct AdamState {
  AdamOptions options;
  std::map<ParamId, Tensor> first_moment;
  std::map<ParamId, Tensor> second_moment;
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(AdamOptions opts) : options(opts) {}
};

/// One bias-corrected Adam update of every parameter present in `grads`.
/// t advances by exactly one per call.
void adam_step(ParameterStore& params, const std::map<ParamId, Tensor>& grads, AdamState& state);

}  // namespace autoiv
