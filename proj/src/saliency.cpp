#include "obc/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <utility>

namespace obc {

namespace {

constexpr std::pair<CriterionKind, const char*> kCriteria[] = {
    {CriterionKind::random, "random"}, {CriterionKind::l1, "l1"},
    {CriterionKind::l2, "l2"},         {CriterionKind::bn_scale, "bn-scale"},
    {CriterionKind::fpgm, "fpgm"},     {CriterionKind::whc, "whc"},
    {CriterionKind::taylor, "taylor"}, {CriterionKind::fisher, "diag-hessian-fisher"},
    {CriterionKind::jacobian, "jacobian"},
};

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void check_extent(std::span<const double> w, std::size_t extent) {
  if (w.size() != extent) {
    throw SaliencyError("member has " + std::to_string(w.size()) + " weights but its Gram has extent " +
                        std::to_string(extent));
  }
}

std::vector<double> group_draws(std::size_t groups, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> d(groups);
  for (auto& v : d) v = u(rng);
  return d;
}

}  // namespace

std::string to_string(CriterionKind kind) {
  for (const auto& [k, n] : kCriteria)
    if (k == kind) return n;
  return "unknown";
}

CriterionKind criterion_from_string(const std::string& name) {
  for (const auto& [k, n] : kCriteria)
    if (name == n) return k;
  if (name == "fisher" || name == "hessian") return CriterionKind::fisher;
  if (name == "bn_scale") return CriterionKind::bn_scale;
  throw SaliencyError("unknown criterion '" + name + "'");
}

std::string to_string(Aggregator kind) {
  switch (kind) {
    case Aggregator::sum: return "sum";
    case Aggregator::mean: return "mean";
    case Aggregator::max: return "max";
  }
  return "unknown";
}

Aggregator aggregator_from_string(const std::string& name) {
  if (name == "sum") return Aggregator::sum;
  if (name == "mean") return Aggregator::mean;
  if (name == "max") return Aggregator::max;
  throw SaliencyError("unknown aggregator '" + name + "'");
}

std::string to_string(Normalizer kind) { return kind == Normalizer::none ? "none" : "layer-mean"; }

Normalizer normalizer_from_string(const std::string& name) {
  if (name == "none") return Normalizer::none;
  if (name == "layer-mean" || name == "layer_mean") return Normalizer::layer_mean;
  throw SaliencyError("unknown normalizer '" + name + "'");
}

bool is_data_driven(CriterionKind kind) {
  return kind == CriterionKind::taylor || kind == CriterionKind::fisher || kind == CriterionKind::jacobian;
}

void GramAccumulator::add(std::span<const double> g) {
  if (g.size() != extent_) throw SaliencyError("gradient segment does not match the accumulator extent");
  for (std::size_t i = 0; i < extent_; ++i) {
    if (g[i] == 0.0) continue;
    for (std::size_t j = 0; j < extent_; ++j) data_[i * extent_ + j] += g[i] * g[j];
  }
}

std::vector<std::size_t> member_row_indices(const Model& model, const ParameterLayout& layout,
                                            const MemberSlice& member) {
  std::vector<std::size_t> out;
  for (const auto& e : member_elements(model, member)) {
    const auto base = layout.offset(e.param);
    if (base == ParameterLayout::npos) throw SaliencyError(describe(model, member) + " is not trainable");
    out.push_back(base + e.index);
  }
  return out;
}

std::vector<double> member_weights(const Model& model, const MemberSlice& member) {
  std::vector<double> w;
  for (const auto& e : member_elements(model, member)) w.push_back(model.params[e.param].value[e.index]);
  return w;
}

std::vector<GramAccumulator> accumulate_grams(const Model& model, const GroupPartition& partition,
                                              std::span<const JacobianRow> rows) {
  if (rows.empty()) throw SaliencyError("no Jacobian rows to accumulate");
  const auto layout = ParameterLayout::of(model);
  std::vector<GramAccumulator> grams;
  grams.reserve(partition.member_count());
  std::vector<double> seg;
  for (const auto& m : partition.members) {
    const auto idx = member_row_indices(model, layout, m);
    GramAccumulator acc(idx.size());
    for (const auto& row : rows) {
      if (row.values.size() != layout.total) throw SaliencyError("Jacobian row length does not match the model");
      seg.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) seg[i] = row.values[idx[i]];
      acc.add(seg);
    }
    grams.push_back(std::move(acc));
  }
  return grams;
}

double jacobian_saliency(std::span<const double> w, const GramAccumulator& gram) {
  check_extent(w, gram.extent());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double gi = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) gi += gram.at(i, j) * w[j];
    s += w[i] * gi;
  }
  return s;
}

double taylor_saliency(std::span<const double> w, const GramAccumulator& gram) {
  check_extent(w, gram.extent());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * (gram.at(i, i) * w[i]);
  return s;
}

double fisher_diag_hessian_saliency(std::span<const double> w, const std::vector<std::vector<double>>& member_rows) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double h = 0.0;
    for (const auto& g : member_rows) {
      if (g.size() != w.size()) throw SaliencyError("gradient segment does not match the member size");
      h += g[i] * g[i];
    }
    s += w[i] * w[i] * h;
  }
  return s;
}

std::vector<double> geometric_median(const std::vector<std::vector<double>>& points) {
  if (points.empty()) throw SaliencyError("geometric median of an empty set");
  const std::size_t d = points[0].size();
  std::vector<double> y(d, 0.0);
  for (const auto& p : points)
    for (std::size_t k = 0; k < d; ++k) y[k] += p[k] / static_cast<double>(points.size());
  for (int it = 0; it < 100; ++it) {
    std::vector<double> num(d, 0.0);
    double den = 0.0;
    for (const auto& p : points) {
      const double dist = distance(p, y);
      if (dist < 1e-12) continue;
      for (std::size_t k = 0; k < d; ++k) num[k] += p[k] / dist;
      den += 1.0 / dist;
    }
    if (den == 0.0) break;
    std::vector<double> next(d);
    for (std::size_t k = 0; k < d; ++k) next[k] = num[k] / den;
    const double step = distance(next, y);
    y = std::move(next);
    if (step < 1e-9) break;
  }
  return y;
}

double data_free_saliency(CriterionKind kind, const std::vector<std::vector<double>>& siblings, std::size_t index) {
  const auto& w = siblings.at(index);
  switch (kind) {
    case CriterionKind::l1: {
      double s = 0.0;
      for (double x : w) s += std::abs(x);
      return s;
    }
    case CriterionKind::l2:
      return norm2(w);
    case CriterionKind::bn_scale:
      return std::abs(w.at(0));
    case CriterionKind::fpgm:
      return distance(w, geometric_median(siblings));
    case CriterionKind::whc: {
      const double nw = norm2(w);
      double dissimilarity = 0.0;
      for (std::size_t j = 0; j < siblings.size(); ++j) {
        if (j == index) continue;
        const double nj = norm2(siblings[j]);
        if (nw == 0.0 || nj == 0.0) {
          dissimilarity += nj;
          continue;
        }
        double dot = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) dot += w[k] * siblings[j][k];
        dissimilarity += nj * (1.0 - std::abs(dot) / (nw * nj));
      }
      return (nw * dissimilarity) * (nw * dissimilarity);
    }
    default:
      throw SaliencyError("criterion '" + to_string(kind) + "' is not data-free");
  }
}

std::vector<double> member_saliencies(const Model& model, const GroupPartition& partition,
                                      std::span<const JacobianRow> rows, const SaliencyConfig& config) {
  const std::size_t count = partition.member_count();
  std::vector<double> out(count, 0.0);
  const auto kind = config.criterion;

  if (kind == CriterionKind::random) {
    const auto draws = group_draws(partition.group_count(), config.seed);
    for (std::size_t m = 0; m < count; ++m) out[m] = draws[partition.member_group[m]];
    return out;
  }

  if (is_data_driven(kind)) {
    if (rows.empty()) throw SaliencyError("criterion '" + to_string(kind) + "' needs Jacobian rows");
    const auto layout = ParameterLayout::of(model);
    for (const auto& row : rows)
      if (row.values.size() != layout.total) throw SaliencyError("Jacobian row length does not match the model");
    for (std::size_t m = 0; m < count; ++m) {
      const auto& member = partition.members[m];
      const auto idx = member_row_indices(model, layout, member);
      const auto w = member_weights(model, member);
      const bool diagonal = kind != CriterionKind::jacobian || (config.bn_diagonal && member.role == AxisRole::bn_pair);
      double s = 0.0;
      if (diagonal) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
          double h = 0.0;
          for (const auto& row : rows) h += row.values[idx[i]] * row.values[idx[i]];
          s += w[i] * w[i] * h;
        }
      } else {
        for (const auto& row : rows) {
          double dot = 0.0;
          for (std::size_t i = 0; i < idx.size(); ++i) dot += row.values[idx[i]] * w[i];
          s += dot * dot;
        }
      }
      if (!std::isfinite(s)) throw SaliencyError("non-finite saliency for " + describe(model, member));
      out[m] = s;
    }
    return out;
  }

  // Data-free criteria compare a slice against its siblings along the same axis.
  if (kind == CriterionKind::bn_scale) {
    for (const auto& g : partition.groups) {
      const bool has_bn = std::any_of(g.members.begin(), g.members.end(), [&](std::size_t m) {
        return partition.members[m].role == AxisRole::bn_pair;
      });
      if (!has_bn) {
        throw SaliencyError("bn-scale needs a BN member but group " + std::to_string(g.id) + " (" +
                            partition.group_layer(model, g.id) + ") has none");
      }
    }
  }
  std::map<std::pair<int, AxisRole>, std::vector<std::size_t>> sibling_sets;
  for (std::size_t m = 0; m < count; ++m) {
    const auto& member = partition.members[m];
    if (kind == CriterionKind::bn_scale && member.role != AxisRole::bn_pair) continue;
    sibling_sets[{member.param, member.role}].push_back(m);
  }
  for (const auto& [key, ms] : sibling_sets) {
    const auto& first = partition.members[ms.front()];
    // full sibling set: every slice of the tensor along this axis
    std::size_t extent = model.param(first.param).value.shape()[first.role == AxisRole::input_channel ? 1 : 0];
    extent /= first.span;
    std::vector<std::vector<double>> siblings(extent);
    for (std::size_t c = 0; c < extent; ++c) {
      MemberSlice s = first;
      s.index = c;
      siblings[c] = member_weights(model, s);
    }
    if (kind == CriterionKind::fpgm) {
      const auto median = geometric_median(siblings);
      for (auto m : ms) out[m] = distance(siblings[partition.members[m].index], median);
    } else {
      for (auto m : ms) out[m] = data_free_saliency(kind, siblings, partition.members[m].index);
    }
  }
  return out;
}

std::vector<GroupScore> score_groups(const GroupPartition& partition, std::span<const double> member_saliency,
                                     const SaliencyConfig& config, const std::vector<bool>& active) {
  if (member_saliency.size() != partition.member_count()) {
    throw SaliencyError("expected " + std::to_string(partition.member_count()) + " member saliencies, got " +
                        std::to_string(member_saliency.size()));
  }
  auto is_active = [&](std::size_t g) { return active.empty() || active.at(g); };

  std::vector<double> values(member_saliency.begin(), member_saliency.end());
  if (config.normalizer == Normalizer::layer_mean) {
    std::map<std::pair<std::size_t, AxisRole>, std::pair<double, std::size_t>> layer_sum;
    for (std::size_t m = 0; m < values.size(); ++m) {
      if (!is_active(partition.member_group[m])) continue;
      auto& e = layer_sum[{partition.members[m].layer, partition.members[m].role}];
      e.first += values[m];
      e.second += 1;
    }
    for (std::size_t m = 0; m < values.size(); ++m) {
      const auto it = layer_sum.find({partition.members[m].layer, partition.members[m].role});
      if (it == layer_sum.end()) continue;
      const double mean = it->second.first / static_cast<double>(it->second.second);
      if (mean > 0.0) values[m] /= mean;
    }
  }

  std::vector<GroupScore> out;
  const auto draws = config.criterion == CriterionKind::random ? group_draws(partition.group_count(), config.seed)
                                                                : std::vector<double>{};
  for (const auto& g : partition.groups) {
    if (!is_active(g.id)) continue;
    GroupScore s;
    s.group = g.id;
    for (auto m : g.members) s.members.push_back(values[m]);
    if (config.criterion == CriterionKind::random) {
      s.score = draws[g.id];
    } else {
      switch (config.aggregator) {
        case Aggregator::sum:
          s.score = std::accumulate(s.members.begin(), s.members.end(), 0.0);
          break;
        case Aggregator::mean:
          s.score = std::accumulate(s.members.begin(), s.members.end(), 0.0) / static_cast<double>(s.members.size());
          break;
        case Aggregator::max:
          s.score = *std::max_element(s.members.begin(), s.members.end());
          break;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> rank_ascending(const std::vector<GroupScore>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].score != scores[b].score) return scores[a].score < scores[b].score;
    return scores[a].group < scores[b].group;
  });
  std::vector<std::size_t> ids;
  for (auto i : order) ids.push_back(scores[i].group);
  return ids;
}

void write_score_header(std::ostream& out) { out << "step,group,layer,score,criterion\n"; }

void write_score_rows(std::ostream& out, std::size_t step, const std::vector<GroupScore>& scores,
                      const GroupPartition& partition, const Model& model, CriterionKind criterion) {
  const auto old = out.precision(17);
  for (const auto& s : scores) {
    out << step << "," << s.group << "," << partition.group_layer(model, s.group) << "," << s.score << ","
        << to_string(criterion) << "\n";
  }
  out.precision(old);
}

}  // namespace obc
