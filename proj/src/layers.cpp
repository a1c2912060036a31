#include "layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace obc::detail {

namespace {

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("gradient shape " + shape_to_string(src.shape()) + " does not match " +
                     shape_to_string(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::size_t spatial_size(const Tensor& t) {
  std::size_t s = 1;
  for (std::size_t i = 2; i < t.rank(); ++i) s *= t.shape()[i];
  return s;
}

// y = x W^T (+ b) for x (N, F), W (O, F).
Tensor dense(const Tensor& x, const Tensor& w, const Tensor* b) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("linear: input " + shape_to_string(x.shape()) + " incompatible with weight " +
                     shape_to_string(w.shape()));
  }
  const auto n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
  Tensor y({n, o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < o; ++r) {
      double acc = b ? (*b)[r] : 0.0;
      const double* xr = x.data().data() + i * f;
      const double* wr = w.data().data() + r * f;
      for (std::size_t k = 0; k < f; ++k) acc += xr[k] * wr[k];
      y.at(i, r) = acc;
    }
  return y;
}

// Applies a channel-mixing matrix (out x in): 1x1 conv on NCHW, dense on NC.
Tensor mix_channels(const Tensor& x, const Tensor& m) {
  if (x.rank() == 4) return conv2d(x, unsqueeze_to_conv(m), 1, 0);
  return dense(x, m, nullptr);
}

// Gradients of mix_channels: returns input gradient, accumulates into grad_m.
Tensor mix_channels_backward(const Tensor& x, const Tensor& m, const Tensor& gy, Tensor& grad_m) {
  if (x.rank() == 4) {
    const auto w = unsqueeze_to_conv(m);
    auto gw = conv2d_grad_weight(gy, x, w.shape(), 1, 0);
    add_into(grad_m, gw.reshaped(m.shape()));
    return conv2d_grad_input(gy, w, x.shape(), 1, 0);
  }
  const auto n = x.shape()[0], f = x.shape()[1], o = m.shape()[0];
  Tensor gx({n, f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < o; ++r) {
      const double g = gy.at(i, r);
      if (g == 0.0) continue;
      for (std::size_t k = 0; k < f; ++k) {
        gx.at(i, k) += g * m.at(r, k);
        grad_m.at(r, k) += g * x.at(i, k);
      }
    }
  return gx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

const Tensor& need(const Model& model, int index, const char* what, const Layer& layer) {
  if (index == kNoParam) throw ModelError("layer '" + layer.name + "' is missing its " + what + " parameter");
  return model.param(index).value;
}

}  // namespace

std::size_t channels_of(const Tensor& activation) {
  if (activation.rank() < 2) throw ShapeError("activation without channel axis");
  return activation.shape()[1];
}

LayerCache forward_layer(const Model& model, const Layer& layer, const std::vector<const Tensor*>& inputs,
                         BnMode mode) {
  LayerCache cache;
  const Tensor& x = *inputs.at(0);
  switch (layer.kind) {
    case LayerKind::input:
      cache.output = x;
      break;
    case LayerKind::conv: {
      const auto& w = need(model, layer.weight, "weight", layer);
      if (x.rank() != 4) throw ShapeError("conv '" + layer.name + "' needs NCHW input");
      cache.output = conv2d(x, w, layer.stride, layer.padding);
      if (layer.bias != kNoParam) {
        const auto& b = model.param(layer.bias).value;
        const auto n = cache.output.shape()[0], o = cache.output.shape()[1], s = spatial_size(cache.output);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < o; ++c) {
            double* p = cache.output.data().data() + (i * o + c) * s;
            for (std::size_t k = 0; k < s; ++k) p[k] += b[c];
          }
      }
      break;
    }
    case LayerKind::linear: {
      const auto& w = need(model, layer.weight, "weight", layer);
      const Tensor* b = layer.bias != kNoParam ? &model.param(layer.bias).value : nullptr;
      cache.output = dense(x, w, b);
      break;
    }
    case LayerKind::batchnorm: {
      const auto& gamma = need(model, layer.gamma, "gamma", layer);
      const auto& beta = need(model, layer.beta, "beta", layer);
      const auto c = channels_of(x);
      if (gamma.size() != c) {
        throw ShapeError("batchnorm '" + layer.name + "' has " + std::to_string(gamma.size()) +
                         " channels but input has " + std::to_string(c));
      }
      const auto n = x.shape()[0], s = spatial_size(x);
      cache.inv_std.assign(c, 0.0);
      std::vector<double> mean(c, 0.0);
      if (mode == BnMode::eval) {
        const auto& rm = need(model, layer.running_mean, "running_mean", layer);
        const auto& rv = need(model, layer.running_var, "running_var", layer);
        for (std::size_t k = 0; k < c; ++k) {
          mean[k] = rm[k];
          cache.inv_std[k] = 1.0 / std::sqrt(rv[k] + layer.eps);
        }
      } else {
        const double count = static_cast<double>(n * s);
        cache.batch_mean.assign(c, 0.0);
        cache.batch_var.assign(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k) {
            const double* p = x.data().data() + (i * c + k) * s;
            for (std::size_t j = 0; j < s; ++j) cache.batch_mean[k] += p[j];
          }
        for (auto& m : cache.batch_mean) m /= count;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k) {
            const double* p = x.data().data() + (i * c + k) * s;
            for (std::size_t j = 0; j < s; ++j) {
              const double d = p[j] - cache.batch_mean[k];
              cache.batch_var[k] += d * d;
            }
          }
        for (auto& v : cache.batch_var) v /= count;
        for (std::size_t k = 0; k < c; ++k) {
          mean[k] = cache.batch_mean[k];
          cache.inv_std[k] = 1.0 / std::sqrt(cache.batch_var[k] + layer.eps);
        }
      }
      cache.normalized = Tensor(x.shape());
      cache.output = Tensor(x.shape());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t off = (i * c + k) * s;
          for (std::size_t j = 0; j < s; ++j) {
            const double xh = (x[off + j] - mean[k]) * cache.inv_std[k];
            cache.normalized[off + j] = xh;
            cache.output[off + j] = gamma[k] * xh + beta[k];
          }
        }
      break;
    }
    case LayerKind::relu:
      cache.output = x;
      for (auto& v : cache.output.data()) v = v > 0.0 ? v : 0.0;
      break;
    case LayerKind::gelu:
      cache.output = x;
      for (auto& v : cache.output.data()) v = gelu(v);
      break;
    case LayerKind::maxpool: {
      if (x.rank() != 4) throw ShapeError("maxpool '" + layer.name + "' needs NCHW input");
      const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3], k = layer.pool;
      const auto oh = h / k, ow = w / k;
      if (oh == 0 || ow == 0) throw ShapeError("maxpool '" + layer.name + "' window larger than input");
      cache.output = Tensor({n, c, oh, ow});
      cache.argmax.assign(cache.output.size(), 0);
      std::size_t out_index = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z, ++out_index) {
              double best = -std::numeric_limits<double>::infinity();
              std::size_t best_index = 0;
              for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dz = 0; dz < k; ++dz) {
                  const std::size_t idx = ((i * c + ch) * h + y * k + dy) * w + z * k + dz;
                  if (x[idx] > best) {
                    best = x[idx];
                    best_index = idx;
                  }
                }
              cache.output[out_index] = best;
              cache.argmax[out_index] = best_index;
            }
      break;
    }
    case LayerKind::global_avgpool: {
      if (x.rank() != 4) throw ShapeError("global_avgpool '" + layer.name + "' needs NCHW input");
      const auto n = x.shape()[0], c = x.shape()[1], s = spatial_size(x);
      cache.output = Tensor({n, c});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          double acc = 0.0;
          const double* p = x.data().data() + (i * c + k) * s;
          for (std::size_t j = 0; j < s; ++j) acc += p[j];
          cache.output.at(i, k) = acc / static_cast<double>(s);
        }
      break;
    }
    case LayerKind::flatten:
      cache.output = x.reshaped({x.shape()[0], x.size() / x.shape()[0]});
      break;
    case LayerKind::add: {
      cache.output = x;
      for (std::size_t j = 1; j < inputs.size(); ++j) {
        if (inputs[j]->shape() != x.shape()) {
          throw ShapeError("add '" + layer.name + "' branches differ: " + shape_to_string(x.shape()) + " vs " +
                           shape_to_string(inputs[j]->shape()));
        }
        add_into(cache.output, *inputs[j]);
      }
      break;
    }
    case LayerKind::ep_compress:
      cache.output = mix_channels(x, need(model, layer.weight, "compressor", layer));
      break;
    case LayerKind::ep_decompress:
      cache.output = mix_channels(x, transpose(need(model, layer.weight, "decompressor", layer)));
      break;
  }
  return cache;
}

std::vector<Tensor> backward_layer(const Model& model, const Layer& layer, const std::vector<const Tensor*>& inputs,
                                   const LayerCache& cache, const Tensor& gy, BnMode mode,
                                   std::vector<Tensor>& param_grads) {
  const Tensor& x = *inputs.at(0);
  auto grad_slot = [&](int index) -> Tensor* {
    if (index == kNoParam || !model.param(index).trainable) return nullptr;
    return &param_grads.at(static_cast<std::size_t>(index));
  };

  switch (layer.kind) {
    case LayerKind::input:
      return {gy};
    case LayerKind::conv: {
      const auto& w = model.param(layer.weight).value;
      if (auto* gw = grad_slot(layer.weight)) add_into(*gw, conv2d_grad_weight(gy, x, w.shape(), layer.stride, layer.padding));
      if (auto* gb = grad_slot(layer.bias)) {
        const auto n = gy.shape()[0], o = gy.shape()[1], s = spatial_size(gy);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < o; ++c) {
            const double* p = gy.data().data() + (i * o + c) * s;
            double acc = 0.0;
            for (std::size_t k = 0; k < s; ++k) acc += p[k];
            (*gb)[c] += acc;
          }
      }
      return {conv2d_grad_input(gy, w, x.shape(), layer.stride, layer.padding)};
    }
    case LayerKind::linear: {
      const auto& w = model.param(layer.weight).value;
      const auto n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
      Tensor gx({n, f});
      Tensor* gw = grad_slot(layer.weight);
      Tensor* gb = grad_slot(layer.bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < o; ++r) {
          const double g = gy.at(i, r);
          if (gb) (*gb)[r] += g;
          if (g == 0.0) continue;
          const double* wr = w.data().data() + r * f;
          const double* xr = x.data().data() + i * f;
          double* gxr = gx.data().data() + i * f;
          for (std::size_t k = 0; k < f; ++k) gxr[k] += g * wr[k];
          if (gw) {
            double* gwr = gw->data().data() + r * f;
            for (std::size_t k = 0; k < f; ++k) gwr[k] += g * xr[k];
          }
        }
      return {gx};
    }
    case LayerKind::batchnorm: {
      const auto& gamma = model.param(layer.gamma).value;
      const auto c = channels_of(x), n = x.shape()[0], s = spatial_size(x);
      std::vector<double> sum_gy(c, 0.0), sum_gy_xh(c, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t off = (i * c + k) * s;
          for (std::size_t j = 0; j < s; ++j) {
            sum_gy[k] += gy[off + j];
            sum_gy_xh[k] += gy[off + j] * cache.normalized[off + j];
          }
        }
      if (auto* gg = grad_slot(layer.gamma))
        for (std::size_t k = 0; k < c; ++k) (*gg)[k] += sum_gy_xh[k];
      if (auto* gb = grad_slot(layer.beta))
        for (std::size_t k = 0; k < c; ++k) (*gb)[k] += sum_gy[k];
      Tensor gx(x.shape());
      const double count = static_cast<double>(n * s);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t off = (i * c + k) * s;
          const double scale = gamma[k] * cache.inv_std[k];
          for (std::size_t j = 0; j < s; ++j) {
            if (mode == BnMode::eval) {
              gx[off + j] = gy[off + j] * scale;
            } else {
              gx[off + j] = scale * (gy[off + j] - sum_gy[k] / count - cache.normalized[off + j] * sum_gy_xh[k] / count);
            }
          }
        }
      return {gx};
    }
    case LayerKind::relu: {
      Tensor gx = gy;
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (!(x[i] > 0.0)) gx[i] = 0.0;
      return {gx};
    }
    case LayerKind::gelu: {
      Tensor gx = gy;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= gelu_derivative(x[i]);
      return {gx};
    }
    case LayerKind::maxpool: {
      Tensor gx(x.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) gx[cache.argmax[i]] += gy[i];
      return {gx};
    }
    case LayerKind::global_avgpool: {
      Tensor gx(x.shape());
      const auto n = x.shape()[0], c = x.shape()[1], s = spatial_size(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          const double g = gy.at(i, k) / static_cast<double>(s);
          double* p = gx.data().data() + (i * c + k) * s;
          for (std::size_t j = 0; j < s; ++j) p[j] = g;
        }
      return {gx};
    }
    case LayerKind::flatten:
      return {gy.reshaped(x.shape())};
    case LayerKind::add:
      return std::vector<Tensor>(inputs.size(), gy);
    case LayerKind::ep_compress: {
      const auto& m = model.param(layer.weight).value;
      Tensor scratch(m.shape());
      Tensor* gm = grad_slot(layer.weight);
      auto gx = mix_channels_backward(x, m, gy, gm ? *gm : scratch);
      return {gx};
    }
    case LayerKind::ep_decompress: {
      const auto& d = model.param(layer.weight).value;
      const auto m = transpose(d);
      Tensor gm_t(m.shape());
      auto gx = mix_channels_backward(x, m, gy, gm_t);
      if (auto* gd = grad_slot(layer.weight)) add_into(*gd, transpose(gm_t));
      return {gx};
    }
  }
  throw ModelError("unhandled layer kind in backward");
}

}  // namespace obc::detail
