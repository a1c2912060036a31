#pragma once

// Shared fixtures and brute-force references for the test suites. Nothing in
// here calls into the code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "obc/autodiff.hpp"
#include "obc/data.hpp"
#include "obc/model.hpp"
#include "obc/tensor.hpp"

namespace obc::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Batch random_batch(const Model& model, std::size_t n, std::mt19937_64& rng) {
  Shape s = model.input_shape;
  s.insert(s.begin(), n);
  Batch b;
  b.inputs = random_tensor(s, rng);
  std::uniform_int_distribution<std::size_t> label(0, model.num_classes - 1);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(label(rng));
  return b;
}

inline Dataset random_dataset(const Model& model, std::size_t n, std::mt19937_64& rng) {
  const auto b = random_batch(model, n, rng);
  Dataset d;
  d.images = b.inputs;
  d.labels = b.labels;
  d.num_classes = model.num_classes;
  return d;
}

// Gives BN layers non-trivial running statistics and affine parameters so
// eval-mode checks do not degenerate to identities.
inline void randomize_batchnorm(Model& model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5), c(-0.3, 0.3);
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::batchnorm) continue;
    for (auto& v : model.param(l.gamma).value.data()) v = u(rng);
    for (auto& v : model.param(l.beta).value.data()) v = c(rng);
    for (auto& v : model.param(l.running_mean).value.data()) v = c(rng);
    for (auto& v : model.param(l.running_var).value.data()) v = u(rng);
  }
}

// Naive six-loop cross-correlation.
inline Tensor reference_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const auto o = w.shape()[0], k = w.shape()[2];
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, o, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t bb = 0; bb < k; ++bb) {
                const long long yy = static_cast<long long>(i * stride + a) - static_cast<long long>(pad);
                const long long xx = static_cast<long long>(j * stride + bb) - static_cast<long long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(wd)) continue;
                acc += x.at(b, ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) * w.at(f, ch, a, bb);
              }
          y.at(b, f, i, j) = acc;
        }
  return y;
}

// Central finite differences of the batch loss with respect to every
// trainable parameter element. Returns values in ParameterLayout order.
inline std::vector<double> finite_difference_gradient(Model model, const Batch& batch, BnMode mode, double h) {
  std::vector<double> g;
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    if (!model.params[p].trainable) continue;
    auto& value = model.params[p].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss_from_logits(model.loss, forward(model, batch.inputs, mode), batch.labels);
      value[i] = saved - h;
      const double down = loss_from_logits(model.loss, forward(model, batch.inputs, mode), batch.labels);
      value[i] = saved;
      g.push_back((up - down) / (2.0 * h));
    }
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor): relative error with an absolute floor so
// that near-zero gradients are judged on absolute scale.
inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// conv(+bias) -> bn -> relu -> maxpool -> [conv -> bn] + [conv 1x1] -> add
// -> gelu -> gap -> linear -> relu -> linear. Flatten and the compressor /
// decompressor layers are covered by the vggtiny and EP fixtures.
inline Model every_layer_model(std::uint64_t seed) {
  Model m;
  m.arch = "every_layer";
  m.input_shape = {2, 6, 6};
  m.num_classes = 3;
  std::mt19937_64 rng(seed);
  auto add_param = [&](const std::string& name, const Shape& s, double scale) {
    return static_cast<int>(m.add_param(name, random_tensor(s, rng, scale)));
  };
  auto layer = [&](LayerKind kind, const std::string& name, std::vector<std::size_t> in) {
    Layer l;
    l.kind = kind;
    l.name = name;
    l.inputs = std::move(in);
    return l;
  };
  auto bn = [&](const std::string& name, std::size_t in, std::size_t c) {
    Layer l = layer(LayerKind::batchnorm, name, {in});
    l.gamma = add_param(name + ".gamma", {c}, 0.5);
    l.beta = add_param(name + ".beta", {c}, 0.5);
    l.running_mean = static_cast<int>(m.add_param(name + ".running_mean", random_tensor({c}, rng, 0.2), false));
    Tensor var({c});
    for (auto& v : var.data()) v = 0.5 + std::abs(random_tensor({1}, rng)[0]);
    l.running_var = static_cast<int>(m.add_param(name + ".running_var", var, false));
    return m.add_layer(l);
  };
  const auto in = m.add_layer(layer(LayerKind::input, "input", {}));
  Layer c1 = layer(LayerKind::conv, "conv1", {in});
  c1.padding = 1;
  c1.weight = add_param("conv1.weight", {4, 2, 3, 3}, 0.4);
  c1.bias = add_param("conv1.bias", {4}, 0.2);
  auto x = m.add_layer(c1);
  x = bn("bn1", x, 4);
  x = m.add_layer(layer(LayerKind::relu, "relu1", {x}));
  const auto pooled = m.add_layer(layer(LayerKind::maxpool, "pool1", {x}));
  Layer c2 = layer(LayerKind::conv, "conv2", {pooled});
  c2.padding = 1;
  c2.weight = add_param("conv2.weight", {4, 4, 3, 3}, 0.3);
  auto y = m.add_layer(c2);
  y = bn("bn2", y, 4);
  Layer sc = layer(LayerKind::conv, "shortcut", {pooled});
  sc.weight = add_param("shortcut.weight", {4, 4, 1, 1}, 0.4);
  const auto s = m.add_layer(sc);
  auto z = m.add_layer(layer(LayerKind::add, "add", {y, s}));
  z = m.add_layer(layer(LayerKind::gelu, "gelu", {z}));
  const auto gap = m.add_layer(layer(LayerKind::global_avgpool, "gap", {z}));
  Layer fc = layer(LayerKind::linear, "fc", {gap});
  fc.weight = add_param("fc.weight", {5, 4}, 0.5);
  fc.bias = add_param("fc.bias", {5}, 0.2);
  auto h = m.add_layer(fc);
  h = m.add_layer(layer(LayerKind::relu, "fc.relu", {h}));
  Layer cls = layer(LayerKind::linear, "classifier", {h});
  cls.weight = add_param("classifier.weight", {3, 5}, 0.5);
  cls.bias = add_param("classifier.bias", {3}, 0.2);
  m.add_layer(cls);
  check_model(m);
  return m;
}

// input(2ch) -> conv1(4ch, no bias) -> bn1 -> relu1 -> conv2(3ch) -> gap.
// The conv2 output is the logit vector, so only conv1's class is prunable.
inline Model chain_model(std::uint64_t seed) {
  Model m;
  m.arch = "chain";
  m.input_shape = {2, 5, 5};
  m.num_classes = 3;
  std::mt19937_64 rng(seed);
  Layer in;
  in.kind = LayerKind::input;
  in.name = "input";
  m.add_layer(in);
  Layer c1;
  c1.kind = LayerKind::conv;
  c1.name = "conv1";
  c1.inputs = {0};
  c1.padding = 1;
  c1.weight = static_cast<int>(m.add_param("conv1.weight", random_tensor({4, 2, 3, 3}, rng, 0.4)));
  m.add_layer(c1);
  Layer bn;
  bn.kind = LayerKind::batchnorm;
  bn.name = "bn1";
  bn.inputs = {1};
  bn.gamma = static_cast<int>(m.add_param("bn1.gamma", Tensor({4}, 1.0)));
  bn.beta = static_cast<int>(m.add_param("bn1.beta", Tensor({4}, 0.0)));
  bn.running_mean = static_cast<int>(m.add_param("bn1.running_mean", Tensor({4}, 0.0), false));
  bn.running_var = static_cast<int>(m.add_param("bn1.running_var", Tensor({4}, 1.0), false));
  m.add_layer(bn);
  Layer r;
  r.kind = LayerKind::relu;
  r.name = "relu1";
  r.inputs = {2};
  m.add_layer(r);
  Layer c2;
  c2.kind = LayerKind::conv;
  c2.name = "conv2";
  c2.inputs = {3};
  c2.weight = static_cast<int>(m.add_param("conv2.weight", random_tensor({3, 4, 3, 3}, rng, 0.4)));
  c2.bias = static_cast<int>(m.add_param("conv2.bias", random_tensor({3}, rng, 0.1)));
  m.add_layer(c2);
  Layer gap;
  gap.kind = LayerKind::global_avgpool;
  gap.name = "gap";
  gap.inputs = {4};
  m.add_layer(gap);
  randomize_batchnorm(m, rng);
  check_model(m);
  return m;
}

// A single linear layer under the label-logit loss: affine in (W, b).
inline Model affine_model(std::uint64_t seed, std::size_t in_features = 5, std::size_t classes = 3) {
  Model m;
  m.arch = "affine";
  m.input_shape = {in_features};
  m.num_classes = classes;
  m.loss = LossKind::label_logit;
  std::mt19937_64 rng(seed);
  Layer in;
  in.kind = LayerKind::input;
  in.name = "input";
  m.add_layer(in);
  Layer fc;
  fc.kind = LayerKind::linear;
  fc.name = "fc";
  fc.inputs = {0};
  fc.weight = static_cast<int>(m.add_param("fc.weight", random_tensor({classes, in_features}, rng)));
  fc.bias = static_cast<int>(m.add_param("fc.bias", random_tensor({classes}, rng)));
  m.add_layer(fc);
  check_model(m);
  return m;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
  return eig;
}

}  // namespace obc::testing
