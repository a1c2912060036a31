#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "obc/autodiff.hpp"
#include "obc/dependency.hpp"

namespace obc {

class SaliencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CriterionKind { random, l1, l2, bn_scale, fpgm, whc, taylor, fisher, jacobian };
enum class Aggregator { sum, mean, max };
enum class Normalizer { none, layer_mean };

std::string to_string(CriterionKind kind);
std::string to_string(Aggregator kind);
std::string to_string(Normalizer kind);
CriterionKind criterion_from_string(const std::string& name);
Aggregator aggregator_from_string(const std::string& name);
Normalizer normalizer_from_string(const std::string& name);
bool is_data_driven(CriterionKind kind);

struct SaliencyConfig {
  CriterionKind criterion = CriterionKind::jacobian;
  Aggregator aggregator = Aggregator::sum;
  Normalizer normalizer = Normalizer::none;
  std::uint64_t seed = 0;
  // Ablation: score BN (gamma, beta) members with the diagonal of their Gram
  // only, dropping the gamma-beta cross term.
  bool bn_diagonal = false;
};

// Dense symmetric sum of outer products of one member's gradient segments.
class GramAccumulator {
 public:
  explicit GramAccumulator(std::size_t extent = 0) : extent_(extent), data_(extent * extent, 0.0) {}

  void add(std::span<const double> g);
  std::size_t extent() const { return extent_; }
  double at(std::size_t i, std::size_t j) const { return data_[i * extent_ + j]; }
  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t extent_;
  std::vector<double> data_;
};

// Flat positions of a member's elements inside a JacobianRow.
std::vector<std::size_t> member_row_indices(const Model& model, const ParameterLayout& layout,
                                            const MemberSlice& member);
std::vector<double> member_weights(const Model& model, const MemberSlice& member);

// One accumulator per partition member.
std::vector<GramAccumulator> accumulate_grams(const Model& model, const GroupPartition& partition,
                                              std::span<const JacobianRow> rows);

double jacobian_saliency(std::span<const double> w, const GramAccumulator& gram);
double taylor_saliency(std::span<const double> w, const GramAccumulator& gram);
// member_rows[n] is the member's gradient segment in row n.
double fisher_diag_hessian_saliency(std::span<const double> w, const std::vector<std::vector<double>>& member_rows);

// kind in {l1, l2, bn_scale, fpgm, whc}. siblings are all slices of the same
// tensor along the same axis; the scored one is siblings[index].
double data_free_saliency(CriterionKind kind, const std::vector<std::vector<double>>& siblings, std::size_t index);

// Geometric median by Weiszfeld iteration (100 iterations or 1e-9 step).
std::vector<double> geometric_median(const std::vector<std::vector<double>>& points);

// Per-member saliency for every partition member. Data-driven kinds read the
// rows directly: JC as sum_n (g_n . w)^2, Taylor/Fisher as sum_i w_i^2 sum_n g_ni^2.
std::vector<double> member_saliencies(const Model& model, const GroupPartition& partition,
                                      std::span<const JacobianRow> rows, const SaliencyConfig& config);

struct GroupScore {
  std::size_t group = 0;
  double score = 0.0;
  std::vector<double> members;
};

// Scores the groups flagged in `active` (all when empty). Layer-mean
// normalization averages over the active members of the same layer and role.
std::vector<GroupScore> score_groups(const GroupPartition& partition, std::span<const double> member_saliency,
                                     const SaliencyConfig& config, const std::vector<bool>& active = {});

// Group ids ordered by ascending score, ties by ascending id.
std::vector<std::size_t> rank_ascending(const std::vector<GroupScore>& scores);

// CSV rows: step,group,layer,score,criterion
void write_score_header(std::ostream& out);
void write_score_rows(std::ostream& out, std::size_t step, const std::vector<GroupScore>& scores,
                      const GroupPartition& partition, const Model& model, CriterionKind criterion);

}  // namespace obc
