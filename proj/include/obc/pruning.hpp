#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "obc/data.hpp"
#include "obc/dependency.hpp"
#include "obc/saliency.hpp"

namespace obc {

class PruningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ObcConfig {
  double tau = 0.5;          // target MACs as a fraction of the original
  double step = 0.01;        // p: fraction of the original group count pruned per step
  std::size_t samples = 50;  // N Jacobian batches per step
  std::size_t batch_size = 64;
  SaliencyConfig saliency;
  PartitionOptions partition;
  bool ep = false;
  bool reuse_rows = false;  // compute the N rows once instead of every step
  // When > 0, stop after this fraction of groups is pruned instead of at tau.
  double target_group_fraction = 0.0;
  std::uint64_t seed = 0;  // batch sampler

  void validate() const;
};

struct PlanStep {
  std::size_t step = 0;
  std::uint64_t macs_before = 0;
  std::uint64_t macs_after = 0;
  std::vector<std::size_t> groups;
};

struct ClassMask {
  std::string name;
  std::vector<bool> keep;

  std::vector<std::size_t> kept() const;
};

struct PruningPlan {
  std::vector<std::size_t> pruned;  // group ids in pruning order
  std::vector<ClassMask> classes;   // one per channel class of the partition
  std::vector<PlanStep> steps;
  std::size_t group_count = 0;
  std::uint64_t macs_original = 0;
  std::uint64_t macs_final = 0;

  static PruningPlan empty(const Model& model, const GroupPartition& partition);
  void add_group(const GroupPartition& partition, std::size_t group);
  bool is_pruned(std::size_t group) const;
};

// Zeroes every member slice of the given groups.
Model mask_groups(const Model& model, const GroupPartition& partition, const std::vector<std::size_t>& groups);

// MACs of the model after removing the channels dropped by the plan's masks.
std::uint64_t pruned_macs(const Model& model, const GroupPartition& partition, const PruningPlan& plan);

using ScoreObserver = std::function<void(std::size_t step, const std::vector<GroupScore>& scores)>;

// One iteration of the ranking loop on the masked model; appends to the plan.
// `rows` is used when non-empty, otherwise rows come from `batches`.
void prune_step(const Model& model, const GroupPartition& partition, std::span<const Batch> batches,
                const ObcConfig& config, PruningPlan& plan, std::span<const JacobianRow> rows = {},
                const ScoreObserver& observer = {});

PruningPlan run_ranking(const Model& model, const Dataset& data, const ObcConfig& config,
                        const ScoreObserver& observer = {});

// Physically removes the channels dropped by the plan.
Model apply_surgery(const Model& model, const GroupPartition& partition, const PruningPlan& plan);

}  // namespace obc
