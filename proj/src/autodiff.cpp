#include "obc/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "layers.hpp"

namespace obc {

ParameterLayout ParameterLayout::of(const Model& model) {
  ParameterLayout layout;
  layout.offsets.assign(model.params.size(), npos);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!model.params[i].trainable) continue;
    layout.param_ids.push_back(i);
    layout.offsets[i] = layout.total;
    layout.total += model.params[i].value.size();
  }
  return layout;
}

std::size_t ParameterLayout::offset(std::size_t param) const {
  if (param >= offsets.size() || offsets[param] == npos) {
    throw std::out_of_range("parameter " + std::to_string(param) + " is not in the trainable layout");
  }
  return offsets[param];
}

struct TapeData {
  const Model* model = nullptr;
  BnMode mode = BnMode::eval;
  Tensor input;
  std::vector<std::size_t> labels;
  std::vector<detail::LayerCache> caches;
  double loss = 0.0;
  bool consumed = false;
};

struct TapeAccess {
  static TapeData& data(Tape& t) { return *t.data_; }
  static const TapeData& data(const Tape& t) { return *t.data_; }
};

Tape::Tape() : data_(std::make_unique<TapeData>()) {}
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;
Tape::~Tape() = default;

double Tape::loss() const { return data_->loss; }
const Tensor& Tape::logits() const {
  if (data_->caches.empty()) throw TapeError("tape has no recorded forward pass");
  return data_->caches.back().output;
}
BnMode Tape::mode() const { return data_->mode; }
bool Tape::consumed() const { return data_->consumed; }

double loss_from_logits(LossKind kind, const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size()) {
    throw ShapeError("loss: logits " + shape_to_string(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto n = logits.shape()[0], k = logits.shape()[1];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw ShapeError("label " + std::to_string(labels[i]) + " out of range");
    const double* z = logits.data().data() + i * k;
    switch (kind) {
      case LossKind::cross_entropy: {
        const double zmax = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
        total += std::log(sum) + zmax - z[labels[i]];
        break;
      }
      case LossKind::label_logit:
        total += z[labels[i]];
        break;
      case LossKind::half_squared_norm:
        for (std::size_t j = 0; j < k; ++j) total += 0.5 * z[j] * z[j];
        break;
    }
  }
  return total / static_cast<double>(n);
}

namespace {

Tensor loss_gradient(LossKind kind, const Tensor& logits, std::span<const std::size_t> labels) {
  const auto n = logits.shape()[0], k = logits.shape()[1];
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor g(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    double* gi = g.data().data() + i * k;
    switch (kind) {
      case LossKind::cross_entropy: {
        const double zmax = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
        for (std::size_t j = 0; j < k; ++j) gi[j] = std::exp(z[j] - zmax) / sum * inv_n;
        gi[labels[i]] -= inv_n;
        break;
      }
      case LossKind::label_logit:
        gi[labels[i]] = inv_n;
        break;
      case LossKind::half_squared_norm:
        for (std::size_t j = 0; j < k; ++j) gi[j] = z[j] * inv_n;
        break;
    }
  }
  return g;
}

}  // namespace

LossResult forward_loss(const Model& model, const Batch& batch, BnMode mode) {
  Shape expected = model.input_shape;
  expected.insert(expected.begin(), batch.size());
  if (batch.size() == 0 || batch.inputs.shape() != expected) {
    throw ShapeError("batch input " + shape_to_string(batch.inputs.shape()) + " does not match model input " +
                     shape_to_string(model.input_shape) + " with " + std::to_string(batch.size()) + " labels");
  }
  LossResult result;
  auto& d = TapeAccess::data(result.tape);
  d.model = &model;
  d.mode = mode;
  d.input = batch.inputs;
  d.labels = batch.labels;
  d.caches.resize(model.layers.size());
  std::vector<const Tensor*> ins;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    ins.clear();
    if (l.kind == LayerKind::input) {
      ins.push_back(&d.input);
    } else {
      for (auto in : l.inputs) ins.push_back(&d.caches[in].output);
    }
    d.caches[i] = detail::forward_layer(model, l, ins, mode);
  }
  d.loss = loss_from_logits(model.loss, d.caches.back().output, d.labels);
  if (!std::isfinite(d.loss)) throw NumericError("non-finite loss " + std::to_string(d.loss) + " (diverged)");
  result.loss = d.loss;
  return result;
}

std::vector<Tensor> backward_params(Tape& tape) {
  auto& d = TapeAccess::data(tape);
  if (d.model == nullptr) throw TapeError("backward called on an empty tape");
  if (d.consumed) throw TapeError("tape already consumed by a previous backward pass");
  d.consumed = true;
  const Model& model = *d.model;

  std::vector<Tensor> param_grads(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i)
    if (model.params[i].trainable) param_grads[i] = Tensor(model.params[i].value.shape());

  std::vector<Tensor> grads(model.layers.size());
  std::vector<bool> has_grad(model.layers.size(), false);
  grads.back() = loss_gradient(model.loss, d.caches.back().output, d.labels);
  has_grad.back() = true;

  std::vector<const Tensor*> ins;
  for (std::size_t i = model.layers.size(); i-- > 1;) {
    if (!has_grad[i]) continue;
    const auto& l = model.layers[i];
    ins.clear();
    for (auto in : l.inputs) ins.push_back(&d.caches[in].output);
    auto input_grads = detail::backward_layer(model, l, ins, d.caches[i], grads[i], d.mode, param_grads);
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      const auto in = l.inputs[j];
      if (!has_grad[in]) {
        grads[in] = std::move(input_grads[j]);
        has_grad[in] = true;
      } else {
        for (std::size_t k = 0; k < grads[in].size(); ++k) grads[in][k] += input_grads[j][k];
      }
    }
    grads[i] = Tensor();
  }
  return param_grads;
}

JacobianRow backward(Tape& tape) {
  const Model* model = TapeAccess::data(tape).model;
  auto param_grads = backward_params(tape);
  const auto layout = ParameterLayout::of(*model);
  JacobianRow row;
  row.values.resize(layout.total);
  for (auto id : layout.param_ids) {
    const auto& g = param_grads[id];
    std::copy(g.data().begin(), g.data().end(), row.values.begin() + static_cast<std::ptrdiff_t>(layout.offsets[id]));
  }
  return row;
}

std::vector<JacobianRow> jacobian_rows(const Model& model, std::span<const Batch> batches) {
  if (batches.empty()) throw std::invalid_argument("jacobian_rows: at least one batch is required");
  std::vector<JacobianRow> rows;
  rows.reserve(batches.size());
  for (std::size_t n = 0; n < batches.size(); ++n) {
    auto result = forward_loss(model, batches[n], BnMode::eval);
    auto row = backward(result.tape);
    row.batch_index = n;
    rows.push_back(std::move(row));
  }
  return rows;
}

void update_running_stats(Model& model, const Tape& tape) {
  const auto& d = TapeAccess::data(tape);
  if (d.mode != BnMode::train) return;
  if (d.model != &model) throw TapeError("tape was recorded on a different model");
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind != LayerKind::batchnorm) continue;
    const auto& cache = d.caches[i];
    const auto& out = cache.output;
    std::size_t count = out.shape()[0];
    for (std::size_t k = 2; k < out.rank(); ++k) count *= out.shape()[k];
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    auto& rm = model.param(l.running_mean).value;
    auto& rv = model.param(l.running_var).value;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - l.momentum) * rm[c] + l.momentum * cache.batch_mean[c];
      rv[c] = (1.0 - l.momentum) * rv[c] + l.momentum * cache.batch_var[c] * unbias;
    }
  }
}

}  // namespace obc
