#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "obc/tensor.hpp"

namespace obc {

struct Batch {
  Tensor inputs;  // (N, ...) matching the model's per-sample input shape
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

// A labelled sample collection held as one (N, ...) tensor.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  bool empty() const { return labels.empty(); }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

// `count` batches of `batch_size` samples drawn without replacement; the
// permutation is refreshed when the dataset runs out.
std::vector<Batch> sample_batches(const Dataset& data, std::size_t count, std::size_t batch_size,
                                  std::uint64_t seed);

// Consecutive, unshuffled batches covering the whole dataset.
std::vector<Batch> sequential_batches(const Dataset& data, std::size_t batch_size);

Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace obc
