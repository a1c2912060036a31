#pragma once

// Per-layer forward/backward kernels shared by model::forward and the tape.

#include <vector>

#include "obc/model.hpp"

namespace obc::detail {

struct LayerCache {
  Tensor output;
  // batchnorm: normalized input; train mode also fills batch statistics.
  Tensor normalized;
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  // maxpool: flat input index chosen for each output element.
  std::vector<std::size_t> argmax;
};

LayerCache forward_layer(const Model& model, const Layer& layer, const std::vector<const Tensor*>& inputs,
                         BnMode mode);

// Accumulates parameter gradients into param_grads (indexed like model.params,
// entries for untrainable parameters are left untouched) and returns one
// gradient per layer input.
std::vector<Tensor> backward_layer(const Model& model, const Layer& layer, const std::vector<const Tensor*>& inputs,
                                   const LayerCache& cache, const Tensor& grad_out, BnMode mode,
                                   std::vector<Tensor>& param_grads);

// Channel extent of an activation (axis 1 for both (N,C) and (N,C,H,W)).
std::size_t channels_of(const Tensor& activation);

}  // namespace obc::detail
