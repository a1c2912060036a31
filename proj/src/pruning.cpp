#include "obc/pruning.hpp"

#include <algorithm>
#include <cmath>

namespace obc {

void ObcConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw PruningError("tau must lie in (0, 1)");
  if (!(step > 0.0 && step < 1.0)) throw PruningError("step proportion p must lie in (0, 1)");
  if (samples == 0) throw PruningError("sample count N must be at least 1");
  if (batch_size == 0) throw PruningError("batch size must be positive");
  if (target_group_fraction < 0.0 || target_group_fraction >= 1.0) {
    throw PruningError("target group fraction must lie in [0, 1)");
  }
}

std::vector<std::size_t> ClassMask::kept() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

PruningPlan PruningPlan::empty(const Model& model, const GroupPartition& partition) {
  PruningPlan plan;
  for (const auto& c : partition.classes) plan.classes.push_back({c.name, std::vector<bool>(c.extent, true)});
  plan.group_count = partition.group_count();
  plan.macs_original = macs_count(model);
  plan.macs_final = plan.macs_original;
  return plan;
}

void PruningPlan::add_group(const GroupPartition& partition, std::size_t group) {
  const auto& g = partition.groups.at(group);
  auto& mask = classes.at(g.channel_class);
  if (!mask.keep.at(g.channel)) throw PruningError("group " + std::to_string(group) + " is already pruned");
  if (mask.kept().size() == 1) {
    throw PruningError("pruning group " + std::to_string(group) + " would leave channel class '" + mask.name +
                       "' with no channels");
  }
  mask.keep[g.channel] = false;
  pruned.push_back(group);
}

bool PruningPlan::is_pruned(std::size_t group) const {
  return std::find(pruned.begin(), pruned.end(), group) != pruned.end();
}

Model mask_groups(const Model& model, const GroupPartition& partition, const std::vector<std::size_t>& groups) {
  Model out = model;
  for (auto g : groups)
    for (auto m : partition.groups.at(g).members)
      for (const auto& e : member_elements(model, partition.members[m])) out.params[e.param].value[e.index] = 0.0;
  return out;
}

namespace {

// ceil(fraction * total) without letting 0.0025 * 400 round up to 2
std::size_t ceil_fraction(double fraction, std::size_t total) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total) - 1e-9));
}

void check_plan(const GroupPartition& partition, const PruningPlan& plan) {
  if (plan.classes.size() != partition.classes.size()) {
    throw PruningError("plan has " + std::to_string(plan.classes.size()) + " channel classes, model has " +
                       std::to_string(partition.classes.size()));
  }
  for (std::size_t k = 0; k < plan.classes.size(); ++k) {
    const auto& c = partition.classes[k];
    const auto& mask = plan.classes[k];
    if (mask.keep.size() != c.extent || mask.name != c.name) {
      throw PruningError("plan class '" + mask.name + "' does not match model class '" + c.name + "'");
    }
    if (mask.kept().empty()) throw PruningError("plan empties channel class '" + c.name + "'");
    if (c.is_protected && mask.kept().size() != c.extent) {
      throw PruningError("plan prunes protected channel class '" + c.name + "'");
    }
  }
}

// kept channel indices of the class feeding a consumer, expanded over the
// flatten span
std::vector<std::size_t> expand(const std::vector<std::size_t>& kept, std::size_t span) {
  std::vector<std::size_t> out;
  for (auto c : kept)
    for (std::size_t s = 0; s < span; ++s) out.push_back(c * span + s);
  return out;
}

}  // namespace

std::uint64_t pruned_macs(const Model& model, const GroupPartition& partition, const PruningPlan& plan) {
  check_plan(partition, plan);
  std::vector<std::size_t> layer_class;
  trace_channel_classes(model, &layer_class);
  const auto shapes = infer_shapes(model);
  std::uint64_t macs = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    const auto& w = model.param(l.weight).value.shape();
    const auto& in_cls = partition.classes[layer_class[l.inputs[0]]];
    const std::uint64_t out = plan.classes[layer_class[i]].kept().size();
    const std::uint64_t in = plan.classes[layer_class[l.inputs[0]]].kept().size() * (w[1] / in_cls.extent);
    macs += l.kind == LayerKind::conv ? out * in * w[2] * w[3] * shapes[i][1] * shapes[i][2] : out * in;
  }
  return macs;
}

void prune_step(const Model& model, const GroupPartition& partition, std::span<const Batch> batches,
                const ObcConfig& config, PruningPlan& plan, std::span<const JacobianRow> rows,
                const ScoreObserver& observer) {
  const Model masked = mask_groups(model, partition, plan.pruned);
  std::vector<JacobianRow> fresh;
  if (is_data_driven(config.saliency.criterion) && rows.empty()) {
    fresh = jacobian_rows(masked, batches);
    rows = fresh;
  }
  const auto saliency = member_saliencies(masked, partition, rows, config.saliency);
  std::vector<bool> active(partition.group_count(), true);
  for (auto g : plan.pruned) active[g] = false;
  const auto scores = score_groups(partition, saliency, config.saliency, active);
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw PruningError("non-finite score for group " + std::to_string(s.group));
  }
  const std::size_t step_index = plan.steps.size();
  if (observer) observer(step_index, scores);

  std::size_t count = ceil_fraction(config.step, plan.group_count);
  if (config.target_group_fraction > 0.0) {
    const auto target = ceil_fraction(config.target_group_fraction, plan.group_count);
    count = std::min(count, target > plan.pruned.size() ? target - plan.pruned.size() : 0);
  }
  count = std::min(count, scores.size());
  if (count == 0) throw PruningError("no prunable groups remain");

  PlanStep step;
  step.step = step_index;
  step.macs_before = pruned_macs(model, partition, plan);
  const auto order = rank_ascending(scores);
  for (std::size_t i = 0; i < count; ++i) {
    plan.add_group(partition, order[i]);
    step.groups.push_back(order[i]);
  }
  step.macs_after = pruned_macs(model, partition, plan);
  plan.macs_final = step.macs_after;
  plan.steps.push_back(std::move(step));
}

PruningPlan run_ranking(const Model& model, const Dataset& data, const ObcConfig& config,
                        const ScoreObserver& observer) {
  config.validate();
  const auto partition = build_partition(model, config.partition);
  if (partition.group_count() == 0) throw PruningError("model has no prunable groups");
  auto plan = PruningPlan::empty(model, partition);

  std::vector<Batch> batches;
  if (is_data_driven(config.saliency.criterion)) {
    if (data.empty()) throw PruningError("criterion '" + to_string(config.saliency.criterion) + "' needs data");
    batches = sample_batches(data, config.samples, config.batch_size, config.seed);
  }
  std::vector<JacobianRow> reused;
  if (config.reuse_rows && !batches.empty()) reused = jacobian_rows(model, batches);

  const double budget = config.tau * static_cast<double>(plan.macs_original);
  const auto target = ceil_fraction(config.target_group_fraction, partition.group_count());
  auto done = [&] {
    if (config.target_group_fraction > 0.0) return plan.pruned.size() >= target;
    return static_cast<double>(plan.macs_final) <= budget;
  };
  while (!done()) {
    prune_step(model, partition, batches, config, plan, reused, observer);
    const auto& s = plan.steps.back();
    if (s.macs_after >= s.macs_before) {
      throw PruningError("MACs did not decrease at step " + std::to_string(s.step) + "; tau is unreachable");
    }
  }
  return plan;
}

Model apply_surgery(const Model& model, const GroupPartition& partition, const PruningPlan& plan) {
  check_plan(partition, plan);
  if (!model.ep_sites.empty()) throw PruningError("surgery expects a model without compressor sites");
  std::vector<std::size_t> layer_class;
  trace_channel_classes(model, &layer_class);
  Model out = model;
  auto kept = [&](std::size_t layer) { return plan.classes[layer_class[layer]].kept(); };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
      auto& w = out.param(l.weight).value;
      const auto in_extent = partition.classes[layer_class[l.inputs[0]]].extent;
      const auto span = w.shape()[1] / in_extent;
      const auto rows = kept(i);
      const auto cols = expand(kept(l.inputs[0]), span);
      if (rows.size() != w.shape()[0]) w = index_select(w, 0, rows);
      if (cols.size() != w.shape()[1]) w = index_select(w, 1, cols);
      if (l.bias != kNoParam && rows.size() != out.param(l.bias).value.size()) {
        out.param(l.bias).value = index_select(out.param(l.bias).value, 0, rows);
      }
    } else if (l.kind == LayerKind::batchnorm) {
      const auto rows = kept(i);
      for (int p : {l.gamma, l.beta, l.running_mean, l.running_var}) {
        if (rows.size() != out.param(p).value.size()) out.param(p).value = index_select(out.param(p).value, 0, rows);
      }
    }
  }
  check_model(out);
  return out;
}

}  // namespace obc
