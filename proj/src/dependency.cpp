#include "obc/dependency.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <tuple>

namespace obc {

std::string to_string(AxisRole role) {
  switch (role) {
    case AxisRole::output_channel: return "output_channel";
    case AxisRole::bias: return "bias";
    case AxisRole::bn_pair: return "bn_pair";
    case AxisRole::input_channel: return "input_channel";
  }
  return "unknown";
}

std::vector<ParamElement> member_elements(const Model& model, const MemberSlice& member) {
  std::vector<ParamElement> out;
  const auto p = static_cast<std::size_t>(member.param);
  const auto& shape = model.param(member.param).value.shape();
  switch (member.role) {
    case AxisRole::output_channel: {
      const std::size_t row = model.param(member.param).value.size() / shape[0];
      for (std::size_t k = 0; k < row; ++k) out.push_back({p, member.index * row + k});
      break;
    }
    case AxisRole::bias:
      out.push_back({p, member.index});
      break;
    case AxisRole::bn_pair:
      out.push_back({p, member.index});
      out.push_back({static_cast<std::size_t>(model.layers[member.layer].beta), member.index});
      break;
    case AxisRole::input_channel: {
      const std::size_t in = shape[1];
      const std::size_t inner = shape.size() == 4 ? shape[2] * shape[3] : 1;
      for (std::size_t o = 0; o < shape[0]; ++o)
        for (std::size_t s = 0; s < member.span; ++s)
          for (std::size_t k = 0; k < inner; ++k)
            out.push_back({p, (o * in + member.index * member.span + s) * inner + k});
      break;
    }
  }
  return out;
}

std::string describe(const Model& model, const MemberSlice& member) {
  return model.layers[member.layer].name + ":" + model.param(member.param).name + "[" + to_string(member.role) + " " +
         std::to_string(member.index) + "]";
}

const std::string& GroupPartition::group_layer(const Model& model, std::size_t group) const {
  const auto& cls = classes.at(groups.at(group).channel_class);
  return model.layers.at(cls.producers.front()).name;
}

namespace {

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t x) {
  while (parent[x] != x) x = parent[x] = parent[parent[x]];
  return x;
}

}  // namespace

std::vector<ChannelClass> trace_channel_classes(const Model& model, std::vector<std::size_t>* layer_class) {
  const auto shapes = infer_shapes(model);
  const std::size_t n = model.layers.size();
  std::vector<std::size_t> provisional(n), span(n, 1), parent;
  std::vector<ChannelClass> raw;

  auto fresh = [&](std::size_t layer, const std::string& name) {
    ChannelClass c;
    c.name = name;
    c.extent = shapes[layer][0];
    raw.push_back(c);
    parent.push_back(parent.size());
    return raw.size() - 1;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = model.layers[i];
    switch (l.kind) {
      case LayerKind::input:
        provisional[i] = fresh(i, "input");
        raw[provisional[i]].is_protected = true;
        break;
      case LayerKind::conv:
      case LayerKind::linear: {
        const auto in = l.inputs[0];
        raw[find_root(parent, provisional[in])].consumers.push_back({i, span[in]});
        provisional[i] = fresh(i, l.name);
        raw[provisional[i]].producers.push_back(i);
        break;
      }
      case LayerKind::batchnorm:
        provisional[i] = provisional[l.inputs[0]];
        raw[find_root(parent, provisional[i])].bn_layers.push_back(i);
        span[i] = span[l.inputs[0]];
        break;
      case LayerKind::relu:
      case LayerKind::gelu:
      case LayerKind::maxpool:
      case LayerKind::global_avgpool:
        provisional[i] = provisional[l.inputs[0]];
        span[i] = span[l.inputs[0]];
        break;
      case LayerKind::flatten: {
        const auto& x = shapes[l.inputs[0]];
        provisional[i] = provisional[l.inputs[0]];
        span[i] = span[l.inputs[0]] * (shape_product(x) / x[0]);
        break;
      }
      case LayerKind::add: {
        const auto root = find_root(parent, provisional[l.inputs[0]]);
        for (auto in : l.inputs) {
          if (span[in] != 1) throw PartitionError("add '" + l.name + "' joins flattened branches");
          const auto other = find_root(parent, provisional[in]);
          if (other == root) continue;
          parent[other] = root;
          auto& a = raw[root];
          auto& b = raw[other];
          a.producers.insert(a.producers.end(), b.producers.begin(), b.producers.end());
          a.bn_layers.insert(a.bn_layers.end(), b.bn_layers.begin(), b.bn_layers.end());
          a.consumers.insert(a.consumers.end(), b.consumers.begin(), b.consumers.end());
          a.is_protected = a.is_protected || b.is_protected;
        }
        raw[root].residual = true;
        provisional[i] = root;
        break;
      }
      case LayerKind::ep_compress:
      case LayerKind::ep_decompress:
        throw PartitionError("layer '" + l.name + "' (" + to_string(l.kind) +
                             ") has no grouping rule; partition the model before inserting compressors");
    }
  }
  raw[find_root(parent, provisional[n - 1])].is_protected = true;

  // Compact roots in order of first appearance.
  std::vector<std::size_t> compact(raw.size(), static_cast<std::size_t>(-1));
  std::vector<ChannelClass> classes;
  for (std::size_t c = 0; c < raw.size(); ++c) {
    const auto root = find_root(parent, c);
    if (compact[root] != static_cast<std::size_t>(-1)) continue;
    compact[root] = classes.size();
    auto cls = raw[root];
    std::sort(cls.producers.begin(), cls.producers.end());
    std::sort(cls.bn_layers.begin(), cls.bn_layers.end());
    std::sort(cls.consumers.begin(), cls.consumers.end(),
              [](const ConsumerRef& a, const ConsumerRef& b) { return a.layer < b.layer; });
    if (!cls.producers.empty()) cls.name = model.layers[cls.producers.front()].name;
    classes.push_back(std::move(cls));
  }
  if (layer_class) {
    layer_class->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*layer_class)[i] = compact[find_root(parent, provisional[i])];
  }
  return classes;
}

GroupPartition build_partition(const Model& model, const PartitionOptions& options) {
  check_model(model);
  GroupPartition part;
  part.classes = trace_channel_classes(model);
  for (std::size_t k = 0; k < part.classes.size(); ++k) {
    auto& cls = part.classes[k];
    if (cls.residual && !options.prune_residual) cls.is_protected = true;
    if (cls.is_protected) continue;
    for (std::size_t c = 0; c < cls.extent; ++c) {
      StructuralGroup g;
      g.id = part.groups.size();
      g.channel_class = k;
      g.channel = c;
      auto add = [&](MemberSlice m) {
        g.members.push_back(part.members.size());
        part.members.push_back(m);
        part.member_group.push_back(g.id);
      };
      for (auto p : cls.producers) {
        const auto& l = model.layers[p];
        add({p, l.weight, AxisRole::output_channel, c, 1});
        if (l.bias != kNoParam) add({p, l.bias, AxisRole::bias, c, 1});
      }
      for (auto b : cls.bn_layers) add({b, model.layers[b].gamma, AxisRole::bn_pair, c, 1});
      for (const auto& cons : cls.consumers) {
        add({cons.layer, model.layers[cons.layer].weight, AxisRole::input_channel, c, cons.span});
      }
      part.groups.push_back(std::move(g));
    }
  }
  return part;
}

std::vector<PartitionViolation> validate_partition(const GroupPartition& partition, const Model& model) {
  std::vector<std::size_t> layer_class;
  const auto traced = trace_channel_classes(model, &layer_class);
  auto is_protected = [&](std::size_t cls) {
    return cls >= partition.classes.size() || partition.classes[cls].is_protected || traced[cls].is_protected;
  };

  using Key = std::tuple<std::size_t, int, AxisRole, std::size_t>;
  std::map<Key, std::pair<MemberSlice, bool>> expected;  // slice -> prunable
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
      const auto& w = model.param(l.weight).value.shape();
      const bool out_prunable = !is_protected(layer_class[i]);
      for (std::size_t o = 0; o < w[0]; ++o) {
        expected[{i, l.weight, AxisRole::output_channel, o}] = {{i, l.weight, AxisRole::output_channel, o, 1},
                                                                out_prunable};
        if (l.bias != kNoParam) expected[{i, l.bias, AxisRole::bias, o}] = {{i, l.bias, AxisRole::bias, o, 1}, out_prunable};
      }
      const auto in_cls = layer_class[l.inputs[0]];
      const auto channels = traced[in_cls].extent;
      const auto span = w[1] / channels;
      for (std::size_t c = 0; c < channels; ++c) {
        expected[{i, l.weight, AxisRole::input_channel, c}] = {{i, l.weight, AxisRole::input_channel, c, span},
                                                               !is_protected(in_cls)};
      }
    } else if (l.kind == LayerKind::batchnorm) {
      const auto n = model.param(l.gamma).value.size();
      for (std::size_t c = 0; c < n; ++c) {
        expected[{i, l.gamma, AxisRole::bn_pair, c}] = {{i, l.gamma, AxisRole::bn_pair, c, 1},
                                                        !is_protected(layer_class[i])};
      }
    }
  }

  std::vector<PartitionViolation> out;
  std::map<Key, std::size_t> seen;
  for (const auto& m : partition.members) {
    const Key key{m.layer, m.param, m.role, m.index};
    const auto it = expected.find(key);
    if (it == expected.end() || !it->second.second || it->second.first.span != m.span) {
      out.push_back({PartitionViolation::Kind::foreign, m,
                     describe(model, m) + " is not a prunable slice of the model"});
      continue;
    }
    if (++seen[key] == 2) {
      out.push_back({PartitionViolation::Kind::duplicated, m, describe(model, m) + " appears in more than one group"});
    }
  }
  for (const auto& [key, entry] : expected) {
    if (entry.second && !seen.count(key)) {
      out.push_back({PartitionViolation::Kind::uncovered, entry.first,
                     describe(model, entry.first) + " is not covered by any group"});
    }
  }
  return out;
}

void write_partition_report(std::ostream& out, const GroupPartition& partition, const Model& model) {
  out << "classes " << partition.classes.size() << " groups " << partition.group_count() << " members "
      << partition.member_count() << "\n";
  for (std::size_t k = 0; k < partition.classes.size(); ++k) {
    const auto& c = partition.classes[k];
    out << "class " << k << " " << c.name << " extent " << c.extent << (c.is_protected ? " protected" : "")
        << (c.residual ? " residual" : "") << "\n";
  }
  for (const auto& g : partition.groups) {
    out << "group " << g.id << " class " << partition.classes[g.channel_class].name << " channel " << g.channel << ":";
    for (auto m : g.members) out << " " << describe(model, partition.members[m]);
    out << "\n";
  }
}

}  // namespace obc
