#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "obc/data.hpp"
#include "obc/dependency.hpp"
#include "obc/model.hpp"
#include "obc/tensor.hpp"

namespace obc {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kFullGramLimit = 2000;

// Mean loss of every batch, BN in eval mode.
std::vector<double> batch_losses(const Model& model, std::span<const Batch> batches);

// sum_n [l_n(w + dw) - l_n(w)]^2 by direct forward passes. `delta` is laid
// out like `elements`. The model is restored bit-exactly before returning.
double brute_force_delta(Model& model, const std::vector<ParamElement>& elements, std::span<const double> delta,
                         std::span<const Batch> batches);

// brute_force_delta with dw = -w over every member of the group.
double brute_force_saliency(Model& model, const GroupPartition& partition, std::size_t group,
                            std::span<const Batch> batches);

// One brute-force value per group.
std::vector<double> brute_force_all(Model& model, const GroupPartition& partition, std::span<const Batch> batches);

// Dense sum_n g_n g_n^T over every trainable parameter (ParameterLayout order).
Tensor full_gram(const Model& model, std::span<const Batch> batches);

// x^T G x for a dense square G.
double quadratic_form(const Tensor& gram, std::span<const double> x);

// Ranks with ties sharing their average rank, starting at 1.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> a, std::span<const double> b);

// Indices of the k smallest values, ties broken by index.
std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k);

struct TopKOverlap {
  std::string label;  // "5", "10", "25%"
  std::size_t k = 0;
  double overlap = 0.0;  // |lowest_k(a) ∩ lowest_k(b)| / k
};

struct RankingFidelity {
  double spearman = 0.0;
  std::vector<TopKOverlap> top_k;
};

// k in {5, 10, 25% of the groups}, each clamped to the group count.
RankingFidelity ranking_fidelity(std::span<const double> criterion, std::span<const double> oracle);

struct OracleReport {
  std::string name;
  double max_abs = 0.0;
  double max_rel = 0.0;
  double rank_correlation = 0.0;
  bool has_rank_correlation = false;
  double tolerance = 0.0;
  bool pass = false;
};

// Elementwise comparison; passes when max_abs <= tolerance.
OracleReport compare_values(const std::string& name, std::span<const double> value, std::span<const double> reference,
                            double tolerance);

void write_oracle_csv(std::ostream& out, const std::vector<OracleReport>& reports);

}  // namespace obc
