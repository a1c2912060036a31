#include "obc/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <utility>

#include "layers.hpp"

namespace obc {

namespace {

constexpr std::array<std::pair<LayerKind, const char*>, 12> kLayerNames{{
    {LayerKind::input, "input"},
    {LayerKind::conv, "conv"},
    {LayerKind::linear, "linear"},
    {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::relu, "relu"},
    {LayerKind::gelu, "gelu"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::global_avgpool, "global_avgpool"},
    {LayerKind::flatten, "flatten"},
    {LayerKind::add, "add"},
    {LayerKind::ep_compress, "ep_compress"},
    {LayerKind::ep_decompress, "ep_decompress"},
}};

}  // namespace

std::string to_string(LayerKind kind) {
  for (const auto& [k, name] : kLayerNames)
    if (k == kind) return name;
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (const auto& [k, n] : kLayerNames)
    if (name == n) return k;
  throw ModelError("unknown layer kind '" + name + "'");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::label_logit: return "label_logit";
    case LossKind::half_squared_norm: return "half_squared_norm";
  }
  return "unknown";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "cross_entropy") return LossKind::cross_entropy;
  if (name == "label_logit") return LossKind::label_logit;
  if (name == "half_squared_norm") return LossKind::half_squared_norm;
  throw ModelError("unknown loss kind '" + name + "'");
}

std::size_t Model::add_layer(Layer layer) {
  for (auto in : layer.inputs) {
    if (in >= layers.size()) throw ModelError("layer '" + layer.name + "' references a later layer");
  }
  layers.push_back(std::move(layer));
  return layers.size() - 1;
}

std::size_t Model::add_param(std::string name, Tensor value, bool trainable) {
  params.push_back({std::move(name), std::move(value), trainable});
  return params.size() - 1;
}

std::size_t Model::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.trainable) n += p.value.size();
  return n;
}

int Model::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name == name) return static_cast<int>(i);
  return kNoParam;
}

namespace {

class Builder {
 public:
  Builder(Model& model, std::uint64_t seed) : model_(model), rng_(seed) {}

  Tensor he_uniform(Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng_);
    return t;
  }

  std::size_t input() {
    Layer l;
    l.kind = LayerKind::input;
    l.name = "input";
    return model_.add_layer(l);
  }

  std::size_t conv(const std::string& name, std::size_t in, std::size_t cin, std::size_t cout, std::size_t k,
                   std::size_t padding) {
    Layer l;
    l.kind = LayerKind::conv;
    l.name = name;
    l.inputs = {in};
    l.padding = padding;
    l.weight = static_cast<int>(model_.add_param(name + ".weight", he_uniform({cout, cin, k, k}, cin * k * k)));
    return model_.add_layer(l);
  }

  std::size_t linear(const std::string& name, std::size_t in, std::size_t fin, std::size_t fout, bool bias) {
    Layer l;
    l.kind = LayerKind::linear;
    l.name = name;
    l.inputs = {in};
    l.weight = static_cast<int>(model_.add_param(name + ".weight", he_uniform({fout, fin}, fin)));
    if (bias) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor b({fout});
      for (auto& v : b.data()) v = dist(rng_);
      l.bias = static_cast<int>(model_.add_param(name + ".bias", std::move(b)));
    }
    return model_.add_layer(l);
  }

  std::size_t batchnorm(const std::string& name, std::size_t in, std::size_t c) {
    Layer l;
    l.kind = LayerKind::batchnorm;
    l.name = name;
    l.inputs = {in};
    l.gamma = static_cast<int>(model_.add_param(name + ".gamma", Tensor({c}, 1.0)));
    l.beta = static_cast<int>(model_.add_param(name + ".beta", Tensor({c}, 0.0)));
    l.running_mean = static_cast<int>(model_.add_param(name + ".running_mean", Tensor({c}, 0.0), false));
    l.running_var = static_cast<int>(model_.add_param(name + ".running_var", Tensor({c}, 1.0), false));
    return model_.add_layer(l);
  }

  std::size_t simple(LayerKind kind, const std::string& name, std::vector<std::size_t> inputs) {
    Layer l;
    l.kind = kind;
    l.name = name;
    l.inputs = std::move(inputs);
    return model_.add_layer(l);
  }

 private:
  Model& model_;
  std::mt19937_64 rng_;
};

void build_mlp(const ModelConfig& cfg, Builder& b) {
  std::size_t x = b.input();
  std::size_t features = shape_product(cfg.input_shape);
  if (cfg.input_shape.size() > 1) x = b.simple(LayerKind::flatten, "flatten", {x});
  const auto widths = cfg.widths.empty() ? std::vector<std::size_t>{128} : cfg.widths;
  const LayerKind act = cfg.activation == "gelu" ? LayerKind::gelu : LayerKind::relu;
  if (cfg.activation != "gelu" && cfg.activation != "relu") {
    throw ModelError("unknown activation '" + cfg.activation + "'");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const auto name = "fc" + std::to_string(i + 1);
    x = b.linear(name, x, features, widths[i], cfg.bias);
    x = b.simple(act, name + "." + to_string(act), {x});
    features = widths[i];
  }
  b.linear("classifier", x, features, cfg.num_classes, cfg.bias);
}

void build_vggtiny(const ModelConfig& cfg, Builder& b) {
  if (cfg.input_shape.size() != 3) throw ModelError("vggtiny needs a (C,H,W) input shape");
  const auto widths = cfg.widths.empty() ? std::vector<std::size_t>{16, 16, 32} : cfg.widths;
  const auto pools = cfg.widths.empty() && cfg.pool_after.empty() ? std::vector<std::size_t>{1, 2} : cfg.pool_after;
  std::size_t x = b.input();
  std::size_t channels = cfg.input_shape[0], h = cfg.input_shape[1], w = cfg.input_shape[2];
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const auto name = "conv" + std::to_string(i + 1);
    x = b.conv(name, x, channels, widths[i], 3, 1);
    x = b.batchnorm("bn" + std::to_string(i + 1), x, widths[i]);
    x = b.simple(LayerKind::relu, "relu" + std::to_string(i + 1), {x});
    channels = widths[i];
    if (std::find(pools.begin(), pools.end(), i) != pools.end()) {
      x = b.simple(LayerKind::maxpool, "pool" + std::to_string(i + 1), {x});
      h /= 2;
      w /= 2;
      if (h == 0 || w == 0) throw ModelError("vggtiny: too many pooling stages for the input size");
    }
  }
  x = b.simple(LayerKind::flatten, "flatten", {x});
  b.linear("classifier", x, channels * h * w, cfg.num_classes, true);
}

void build_restiny(const ModelConfig& cfg, Builder& b) {
  if (cfg.input_shape.size() != 3) throw ModelError("restiny needs a (C,H,W) input shape");
  const auto widths = cfg.widths.empty() ? std::vector<std::size_t>{8, 16} : cfg.widths;
  if (widths.size() != 2) throw ModelError("restiny takes exactly two widths");
  const auto w0 = widths[0], w1 = widths[1];
  std::size_t x = b.input();
  x = b.conv("stem", x, cfg.input_shape[0], w0, 3, 1);
  x = b.batchnorm("stem.bn", x, w0);
  const std::size_t stem = b.simple(LayerKind::relu, "stem.relu", {x});

  // block1: identity shortcut
  x = b.conv("block1.conv1", stem, w0, w0, 3, 1);
  x = b.batchnorm("block1.bn1", x, w0);
  x = b.simple(LayerKind::relu, "block1.relu1", {x});
  x = b.conv("block1.conv2", x, w0, w0, 3, 1);
  x = b.batchnorm("block1.bn2", x, w0);
  x = b.simple(LayerKind::add, "block1.add", {x, stem});
  x = b.simple(LayerKind::relu, "block1.relu2", {x});
  const std::size_t pooled = b.simple(LayerKind::maxpool, "pool1", {x});

  // block2: projection shortcut
  x = b.conv("block2.conv1", pooled, w0, w1, 3, 1);
  x = b.batchnorm("block2.bn1", x, w1);
  x = b.simple(LayerKind::relu, "block2.relu1", {x});
  x = b.conv("block2.conv2", x, w1, w1, 3, 1);
  x = b.batchnorm("block2.bn2", x, w1);
  std::size_t sc = b.conv("block2.shortcut", pooled, w0, w1, 1, 0);
  sc = b.batchnorm("block2.shortcut_bn", sc, w1);
  x = b.simple(LayerKind::add, "block2.add", {x, sc});
  x = b.simple(LayerKind::relu, "block2.relu2", {x});
  x = b.simple(LayerKind::global_avgpool, "gap", {x});
  b.linear("classifier", x, w1, cfg.num_classes, true);
}

}  // namespace

Model build_model(const std::string& arch, const ModelConfig& config) {
  Model model;
  model.arch = arch;
  model.input_shape = config.input_shape;
  model.num_classes = config.num_classes;
  if (config.num_classes == 0) throw ModelError("num_classes must be positive");
  Builder b(model, config.seed);
  if (arch == "mlp") {
    build_mlp(config, b);
  } else if (arch == "vggtiny") {
    build_vggtiny(config, b);
  } else if (arch == "restiny") {
    build_restiny(config, b);
  } else {
    throw ModelError("unknown architecture '" + arch + "' (expected mlp, vggtiny or restiny)");
  }
  check_model(model);
  return model;
}

std::vector<Shape> infer_shapes(const Model& model) {
  std::vector<Shape> shapes(model.layers.size());
  auto fail = [](const Layer& l, const std::string& what) {
    throw ModelError("layer '" + l.name + "' (" + to_string(l.kind) + "): " + what);
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind == LayerKind::input) {
      if (i != 0) fail(l, "input must be the first layer");
      shapes[i] = model.input_shape;
      continue;
    }
    if (l.inputs.empty()) fail(l, "has no inputs");
    for (auto in : l.inputs)
      if (in >= i) fail(l, "inputs must precede the layer");
    const Shape& x = shapes[l.inputs[0]];
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& w = model.param(l.weight).value.shape();
        if (x.size() != 3) fail(l, "expects (C,H,W) input, got " + shape_to_string(x));
        if (w.size() != 4 || w[1] != x[0]) {
          fail(l, "weight " + shape_to_string(w) + " does not accept " + std::to_string(x[0]) + " channels");
        }
        if (x[1] + 2 * l.padding < w[2] || x[2] + 2 * l.padding < w[3]) fail(l, "kernel larger than input");
        shapes[i] = {w[0], (x[1] + 2 * l.padding - w[2]) / l.stride + 1, (x[2] + 2 * l.padding - w[3]) / l.stride + 1};
        if (l.bias != kNoParam && model.param(l.bias).value.size() != w[0]) fail(l, "bias extent mismatch");
        break;
      }
      case LayerKind::linear: {
        const auto& w = model.param(l.weight).value.shape();
        if (x.size() != 1) fail(l, "expects flat input, got " + shape_to_string(x));
        if (w.size() != 2 || w[1] != x[0]) {
          fail(l, "weight " + shape_to_string(w) + " does not accept " + std::to_string(x[0]) + " features");
        }
        if (l.bias != kNoParam && model.param(l.bias).value.size() != w[0]) fail(l, "bias extent mismatch");
        shapes[i] = {w[0]};
        break;
      }
      case LayerKind::batchnorm: {
        for (int p : {l.gamma, l.beta, l.running_mean, l.running_var}) {
          if (p == kNoParam) fail(l, "missing batchnorm parameter");
          if (model.param(p).value.size() != x[0]) {
            fail(l, "has " + std::to_string(model.param(p).value.size()) + " channels but input has " +
                        std::to_string(x[0]));
          }
        }
        shapes[i] = x;
        break;
      }
      case LayerKind::relu:
      case LayerKind::gelu:
        shapes[i] = x;
        break;
      case LayerKind::maxpool:
        if (x.size() != 3 || x[1] / l.pool == 0 || x[2] / l.pool == 0) fail(l, "bad pooling input");
        shapes[i] = {x[0], x[1] / l.pool, x[2] / l.pool};
        break;
      case LayerKind::global_avgpool:
        if (x.size() != 3) fail(l, "expects (C,H,W) input");
        shapes[i] = {x[0]};
        break;
      case LayerKind::flatten:
        shapes[i] = {shape_product(x)};
        break;
      case LayerKind::add:
        if (l.inputs.size() < 2) fail(l, "needs at least two branches");
        for (auto in : l.inputs)
          if (shapes[in] != x) {
            fail(l, "residual branches disagree: " + shape_to_string(x) + " vs " + shape_to_string(shapes[in]));
          }
        shapes[i] = x;
        break;
      case LayerKind::ep_compress:
      case LayerKind::ep_decompress: {
        const auto& m = model.param(l.weight).value.shape();
        if (m.size() != 2) fail(l, "mixing matrix must be rank 2");
        const auto in_extent = l.kind == LayerKind::ep_compress ? m[1] : m[0];
        const auto out_extent = l.kind == LayerKind::ep_compress ? m[0] : m[1];
        if (x[0] != in_extent) {
          fail(l, "expects " + std::to_string(in_extent) + " channels, got " + std::to_string(x[0]));
        }
        shapes[i] = x;
        shapes[i][0] = out_extent;
        break;
      }
      case LayerKind::input:
        break;
    }
  }
  return shapes;
}

void check_model(const Model& model) {
  if (model.layers.empty() || model.layers[0].kind != LayerKind::input) {
    throw ModelError("model must start with an input layer");
  }
  for (const auto& l : model.layers) {
    for (int p : {l.weight, l.bias, l.gamma, l.beta, l.running_mean, l.running_var}) {
      if (p != kNoParam && static_cast<std::size_t>(p) >= model.params.size()) {
        throw ModelError("layer '" + l.name + "' references a missing parameter");
      }
    }
  }
  const auto shapes = infer_shapes(model);
  if (shapes.back() != Shape{model.num_classes}) {
    throw ModelError("model output " + shape_to_string(shapes.back()) + " does not match " +
                     std::to_string(model.num_classes) + " classes");
  }
}

Tensor forward(const Model& model, const Tensor& input, BnMode mode) {
  Shape expected = model.input_shape;
  expected.insert(expected.begin(), input.rank() ? input.shape()[0] : 1);
  if (input.shape() != expected) {
    throw ShapeError("input shape " + shape_to_string(input.shape()) + " does not match model input " +
                     shape_to_string(model.input_shape));
  }
  std::vector<Tensor> outputs(model.layers.size());
  std::vector<const Tensor*> ins;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    ins.clear();
    if (l.kind == LayerKind::input) {
      ins.push_back(&input);
    } else {
      for (auto in : l.inputs) ins.push_back(&outputs[in]);
    }
    outputs[i] = detail::forward_layer(model, l, ins, mode).output;
  }
  return outputs.back();
}

std::uint64_t macs_count(const Model& model) {
  const auto shapes = infer_shapes(model);
  std::uint64_t macs = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    const auto& out = shapes[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& w = model.param(l.weight).value.shape();
        macs += static_cast<std::uint64_t>(w[0]) * w[1] * w[2] * w[3] * out[1] * out[2];
        break;
      }
      case LayerKind::linear: {
        const auto& w = model.param(l.weight).value.shape();
        macs += static_cast<std::uint64_t>(w[0]) * w[1];
        break;
      }
      case LayerKind::ep_compress:
      case LayerKind::ep_decompress: {
        std::uint64_t spatial = 1;
        for (std::size_t k = 1; k < out.size(); ++k) spatial *= out[k];
        macs += static_cast<std::uint64_t>(model.param(l.weight).value.size()) * spatial;
        break;
      }
      default:
        break;
    }
  }
  return macs;
}

std::vector<double> filter_gradient_norms(const Tensor& weight_gradient) {
  const auto o = weight_gradient.dim(0);
  const auto per = weight_gradient.size() / o;
  std::vector<double> norms(o, 0.0);
  for (std::size_t r = 0; r < o; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < per; ++k) acc += weight_gradient[r * per + k] * weight_gradient[r * per + k];
    norms[r] = std::sqrt(acc);
  }
  return norms;
}

}  // namespace obc
