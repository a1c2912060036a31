#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "obc/tensor.hpp"

namespace obc {

enum class LayerKind {
  input,
  conv,
  linear,
  batchnorm,
  relu,
  gelu,
  maxpool,
  global_avgpool,
  flatten,
  add,
  ep_compress,
  ep_decompress,
};

enum class BnMode { eval, train };

// cross_entropy is the training loss. label_logit (mean of the label's logit)
// and half_squared_norm (mean of 0.5*|z|^2) keep the loss affine/quadratic in
// the logits so that linearization identities can be checked exactly.
enum class LossKind { cross_entropy, label_logit, half_squared_norm };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

inline constexpr int kNoParam = -1;

struct Layer {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<std::size_t> inputs;

  // Indices into Model::params, kNoParam when the slot is unused.
  int weight = kNoParam;
  int bias = kNoParam;
  int gamma = kNoParam;
  int beta = kNoParam;
  int running_mean = kNoParam;
  int running_var = kNoParam;

  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t pool = 2;
  double eps = 1e-5;
  double momentum = 0.1;

  int ep_site = -1;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Compressor/decompressor pair attached to one channel class. C and D are
// both stored as (kept x original) matrices; decompressor layers apply D^T.
struct EpSite {
  std::size_t channel_class = 0;
  std::size_t original_extent = 0;
  std::vector<std::size_t> keep;
  std::size_t compressor = 0;    // param index of C
  std::size_t decompressor = 0;  // param index of D
  std::vector<std::size_t> compress_layers;
  std::vector<std::size_t> decompress_layers;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Directed acyclic layer graph. layers[0] is the input; the last layer
// produces the logits. Every layer's inputs precede it.
struct Model {
  std::string arch;
  Shape input_shape;  // per-sample, e.g. {1, 8, 8} or {64}
  std::size_t num_classes = 0;
  LossKind loss = LossKind::cross_entropy;
  std::vector<Layer> layers;
  std::vector<Parameter> params;
  std::vector<EpSite> ep_sites;

  std::size_t add_layer(Layer layer);
  std::size_t add_param(std::string name, Tensor value, bool trainable = true);

  std::size_t output_layer() const { return layers.size() - 1; }
  std::size_t trainable_count() const;
  int find_param(const std::string& name) const;

  Parameter& param(int index) { return params.at(static_cast<std::size_t>(index)); }
  const Parameter& param(int index) const { return params.at(static_cast<std::size_t>(index)); }
};

struct ModelConfig {
  Shape input_shape = {1, 8, 8};
  std::size_t num_classes = 10;
  // mlp: hidden widths; vggtiny: conv widths; restiny: {stem/block1, block2} widths.
  std::vector<std::size_t> widths;
  std::string activation = "relu";  // relu | gelu (mlp only)
  bool bias = true;                 // linear layers
  // vggtiny only: 2x2 max-pool after the conv at these positions.
  std::vector<std::size_t> pool_after;
  std::uint64_t seed = 0;
};

// arch in {mlp, vggtiny, restiny}. He-uniform weights, BN gamma=1 beta=0.
Model build_model(const std::string& arch, const ModelConfig& config);

// Per-sample output shape of every layer, derived from input_shape.
std::vector<Shape> infer_shapes(const Model& model);

// Throws ModelError when the graph is malformed (bad ordering, residual
// branches with different channel extents, parameter shape mismatches).
void check_model(const Model& model);

Tensor forward(const Model& model, const Tensor& input, BnMode mode = BnMode::eval);

// Conv: O*I*K^2*Hout*Wout, linear: O*I; everything else is free. Inserted
// compressor/decompressor layers count as the 1x1 conv / linear they are.
std::uint64_t macs_count(const Model& model);

// Per-output-channel gradient norms of a conv/linear weight; a diagnostic for
// the observation that converged filters keep nonzero, uneven gradients.
std::vector<double> filter_gradient_norms(const Tensor& weight_gradient);

}  // namespace obc
