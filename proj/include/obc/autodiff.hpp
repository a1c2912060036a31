#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "obc/data.hpp"
#include "obc/model.hpp"

namespace obc {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Flat layout of all trainable parameters in registry order.
struct ParameterLayout {
  std::vector<std::size_t> param_ids;
  std::vector<std::size_t> offsets;  // indexed by param id; npos for untrainable
  std::size_t total = 0;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  static ParameterLayout of(const Model& model);
  std::size_t offset(std::size_t param) const;
};

// Gradient of one batch loss with respect to every trainable parameter,
// segmented per ParameterLayout.
struct JacobianRow {
  std::size_t batch_index = 0;
  std::vector<double> values;

  std::span<const double> segment(const ParameterLayout& layout, std::size_t param, std::size_t length) const {
    return std::span<const double>(values).subspan(layout.offset(param), length);
  }
};

struct TapeData;

// Cached forward values for a single backward pass. Holds a pointer to the
// model, which must outlive the tape and stay unmodified until backward.
class Tape {
 public:
  Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  ~Tape();

  double loss() const;
  const Tensor& logits() const;
  BnMode mode() const;
  bool consumed() const;

 private:
  friend struct TapeAccess;
  std::unique_ptr<TapeData> data_;
};

struct LossResult {
  double loss = 0.0;
  Tape tape;
};

// Mean batch loss (model.loss) and the tape to differentiate it.
LossResult forward_loss(const Model& model, const Batch& batch, BnMode mode = BnMode::eval);

// Per-parameter gradients (indexed like model.params; untrainable entries are
// empty tensors). A tape can be consumed once.
std::vector<Tensor> backward_params(Tape& tape);
JacobianRow backward(Tape& tape);

// One row per batch, all at the same (frozen) parameters, BN in eval mode.
std::vector<JacobianRow> jacobian_rows(const Model& model, std::span<const Batch> batches);

// Applies the batch statistics recorded on a train-mode tape to the model's
// BN running estimates.
void update_running_stats(Model& model, const Tape& tape);

// Loss value recomputed from logits and labels without any tape.
double loss_from_logits(LossKind kind, const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace obc
