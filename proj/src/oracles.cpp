#include "obc/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

#include "obc/autodiff.hpp"

namespace obc {

std::vector<double> batch_losses(const Model& model, std::span<const Batch> batches) {
  std::vector<double> out;
  out.reserve(batches.size());
  for (const auto& b : batches) {
    out.push_back(loss_from_logits(model.loss, forward(model, b.inputs, BnMode::eval), b.labels));
  }
  return out;
}

namespace {

double perturbed_sum(Model& model, const std::vector<ParamElement>& elements, std::span<const double> delta,
                     std::span<const Batch> batches, const std::vector<double>& before) {
  if (delta.size() != elements.size()) throw OracleError("perturbation length does not match the element list");
  std::vector<double> saved;
  saved.reserve(elements.size());
  for (const auto& e : elements) saved.push_back(model.params.at(e.param).value[e.index]);
  auto restore = [&] {
    for (std::size_t i = elements.size(); i-- > 0;) model.params[elements[i].param].value[elements[i].index] = saved[i];
  };
  for (std::size_t i = 0; i < elements.size(); ++i) model.params[elements[i].param].value[elements[i].index] += delta[i];
  std::vector<double> after;
  try {
    after = batch_losses(model, batches);
  } catch (...) {
    restore();
    throw;
  }
  restore();
  double s = 0.0;
  for (std::size_t n = 0; n < before.size(); ++n) {
    const double d = after[n] - before[n];
    s += d * d;
  }
  return s;
}

double group_saliency(Model& model, const GroupPartition& partition, std::size_t group, std::span<const Batch> batches,
                      const std::vector<double>& before) {
  if (group >= partition.group_count()) throw OracleError("group index out of range");
  std::vector<ParamElement> elements;
  std::vector<double> delta;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (auto m : partition.groups[group].members) {
    for (const auto& e : member_elements(model, partition.members[m])) {
      if (!seen.insert({e.param, e.index}).second) continue;
      elements.push_back(e);
      delta.push_back(-model.params.at(e.param).value[e.index]);
    }
  }
  return perturbed_sum(model, elements, delta, batches, before);
}

}  // namespace

double brute_force_delta(Model& model, const std::vector<ParamElement>& elements, std::span<const double> delta,
                         std::span<const Batch> batches) {
  if (batches.empty()) throw OracleError("brute-force saliency needs at least one batch");
  return perturbed_sum(model, elements, delta, batches, batch_losses(model, batches));
}

double brute_force_saliency(Model& model, const GroupPartition& partition, std::size_t group,
                            std::span<const Batch> batches) {
  if (batches.empty()) throw OracleError("brute-force saliency needs at least one batch");
  if (group >= partition.group_count()) throw OracleError("group index out of range");
  return group_saliency(model, partition, group, batches, batch_losses(model, batches));
}

std::vector<double> brute_force_all(Model& model, const GroupPartition& partition, std::span<const Batch> batches) {
  if (batches.empty()) throw OracleError("brute-force saliency needs at least one batch");
  const auto before = batch_losses(model, batches);
  std::vector<double> out(partition.group_count());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = group_saliency(model, partition, g, batches, before);
  return out;
}

Tensor full_gram(const Model& model, std::span<const Batch> batches) {
  const auto layout = ParameterLayout::of(model);
  if (layout.total > kFullGramLimit) {
    throw OracleError("full Gram matrix refused: " + std::to_string(layout.total) + " parameters exceed the limit of " +
                      std::to_string(kFullGramLimit));
  }
  const auto rows = jacobian_rows(model, batches);
  const auto p = layout.total;
  Tensor g({p, p});
  auto d = g.data();
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) d[i * p + j] += row.values[i] * row.values[j];
  }
  return g;
}

double quadratic_form(const Tensor& gram, std::span<const double> x) {
  if (gram.rank() != 2 || gram.shape()[0] != x.size() || gram.shape()[1] != x.size()) {
    throw OracleError("quadratic form: matrix and vector sizes disagree");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) r += gram.at(i, j) * x[j];
    s += x[i] * r;
  }
  return s;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw OracleError("rank correlation: score vectors have different lengths");
  if (a.size() < 2) throw OracleError("rank correlation needs at least two scores");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

RankingFidelity ranking_fidelity(std::span<const double> criterion, std::span<const double> oracle) {
  RankingFidelity f;
  f.spearman = spearman(criterion, oracle);
  const auto n = criterion.size();
  const std::size_t quarter = std::max<std::size_t>(1, (n + 3) / 4);
  for (const auto& [label, k] : std::vector<std::pair<std::string, std::size_t>>{{"5", 5}, {"10", 10}, {"25%", quarter}}) {
    const auto kk = std::min(k, n);
    auto a = lowest_k(criterion, kk);
    auto b = lowest_k(oracle, kk);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    f.top_k.push_back({label, kk, static_cast<double>(common.size()) / static_cast<double>(kk)});
  }
  return f;
}

OracleReport compare_values(const std::string& name, std::span<const double> value, std::span<const double> reference,
                            double tolerance) {
  if (value.size() != reference.size()) throw OracleError(name + ": compared vectors have different lengths");
  OracleReport r;
  r.name = name;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double d = std::abs(value[i] - reference[i]);
    r.max_abs = std::max(r.max_abs, d);
    const double scale = std::abs(reference[i]);
    if (scale > 0.0) r.max_rel = std::max(r.max_rel, d / scale);
  }
  r.pass = r.max_abs <= tolerance;
  return r;
}

void write_oracle_csv(std::ostream& out, const std::vector<OracleReport>& reports) {
  const auto old = out.precision(17);
  out << "name,max_abs,max_rel,rank_correlation,tolerance,pass\n";
  for (const auto& r : reports) {
    out << r.name << "," << r.max_abs << "," << r.max_rel << ",";
    if (r.has_rank_correlation) out << r.rank_correlation;
    out << "," << r.tolerance << "," << (r.pass ? "true" : "false") << "\n";
  }
  out.precision(old);
}

}  // namespace obc
