#include "obc/data.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

namespace obc {

Shape Dataset::sample_shape() const {
  const auto& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  Batch batch;
  batch.inputs = index_select(data.images, 0, indices);
  batch.labels.reserve(indices.size());
  for (auto i : indices) batch.labels.push_back(data.labels.at(i));
  return batch;
}

std::vector<Batch> sample_batches(const Dataset& data, std::size_t count, std::size_t batch_size,
                                  std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("sample_batches: dataset is empty");
  if (count == 0 || batch_size == 0) throw std::invalid_argument("sample_batches: count and batch size must be positive");
  batch_size = std::min(batch_size, data.size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::vector<Batch> batches;
  batches.reserve(count);
  std::vector<std::size_t> picked;
  for (std::size_t b = 0; b < count; ++b) {
    picked.clear();
    while (picked.size() < batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      picked.push_back(order[cursor++]);
    }
    batches.push_back(make_batch(data, picked));
  }
  return batches;
}

std::vector<Batch> sequential_batches(const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("sequential_batches: batch size must be positive");
  std::vector<Batch> batches;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    batches.push_back(make_batch(data, idx));
  }
  return batches;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.images = index_select(data.images, 0, indices);
  for (auto i : indices) out.labels.push_back(data.labels.at(i));
  out.num_classes = data.num_classes;
  return out;
}

}  // namespace obc
