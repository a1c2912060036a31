#include "obc/ep.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <set>

namespace obc {

namespace {

std::vector<std::vector<std::size_t>> readers_of(const Model& model) {
  std::vector<std::vector<std::size_t>> readers(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    for (auto in : model.layers[i].inputs) readers[in].push_back(i);
  return readers;
}

bool mergeable(const Model& model, const ChannelClass& cls, const std::vector<std::vector<std::size_t>>& readers) {
  for (const auto& c : cls.consumers) {
    const auto& l = model.layers[c.layer];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) return false;
    const auto src = l.inputs[0];
    if (model.layers[src].kind == LayerKind::flatten && readers[src].size() != 1) return false;
  }
  return true;
}

}  // namespace

EpInsertResult insert_ep(const Model& model, const GroupPartition& partition, const PruningPlan& plan) {
  if (!model.ep_sites.empty()) throw EpError("model already carries compressor sites");
  const auto readers = readers_of(model);

  // Classes that need a site, and classes that fall back to naive surgery.
  std::vector<std::size_t> site_classes;
  PruningPlan naive = PruningPlan::empty(model, partition);
  EpInsertResult result;
  for (std::size_t k = 0; k < partition.classes.size(); ++k) {
    const auto kept = plan.classes.at(k).kept();
    if (kept.size() == partition.classes[k].extent) continue;
    if (partition.classes[k].is_protected) throw EpError("plan prunes protected class '" + partition.classes[k].name + "'");
    if (mergeable(model, partition.classes[k], readers)) {
      site_classes.push_back(k);
    } else {
      naive.classes[k] = plan.classes[k];
      result.fallback_classes.push_back(partition.classes[k].name);
      std::cerr << "warning: channel class '" << partition.classes[k].name
                << "' has an unmergeable consumer; pruning it without compressors\n";
    }
  }
  Model base = result.fallback_classes.empty() ? model : apply_surgery(model, partition, naive);

  // Per-layer roles.
  std::map<std::size_t, std::size_t> producer_site, consumer_site, flatten_site;
  std::map<std::size_t, std::size_t> flatten_consumer;
  for (std::size_t s = 0; s < site_classes.size(); ++s) {
    const auto& cls = partition.classes[site_classes[s]];
    for (auto p : cls.producers) producer_site[p] = s;
    for (const auto& c : cls.consumers) {
      const auto src = model.layers[c.layer].inputs[0];
      if (model.layers[src].kind == LayerKind::flatten) {
        flatten_site[src] = s;
        flatten_consumer[src] = c.layer;
      } else {
        consumer_site[c.layer] = s;
      }
    }
  }

  Model out;
  out.arch = base.arch;
  out.input_shape = base.input_shape;
  out.num_classes = base.num_classes;
  out.loss = base.loss;
  out.params = base.params;

  for (std::size_t s = 0; s < site_classes.size(); ++s) {
    const auto k = site_classes[s];
    const auto& cls = partition.classes[k];
    EpSite site;
    site.channel_class = k;
    site.original_extent = cls.extent;
    site.keep = plan.classes[k].kept();
    const auto sel = select_rows(cls.extent, site.keep);
    const auto prefix = "ep" + std::to_string(s) + "." + cls.name;
    site.compressor = out.add_param(prefix + ".C", sel);
    site.decompressor = out.add_param(prefix + ".D", sel);
    out.ep_sites.push_back(site);
    for (auto b : cls.bn_layers) {
      const auto& l = base.layers[b];
      for (int p : {l.gamma, l.beta, l.running_mean, l.running_var}) {
        out.param(p).value = index_select(out.param(p).value, 0, site.keep);
      }
    }
  }

  std::vector<std::size_t> map(base.layers.size());
  auto add_ep_layer = [&](LayerKind kind, std::size_t s, std::size_t input, const std::string& suffix) {
    Layer l;
    l.kind = kind;
    l.inputs = {input};
    l.ep_site = static_cast<int>(s);
    auto& site = out.ep_sites[s];
    const auto& tag = out.params[site.compressor].name;
    l.name = tag.substr(0, tag.size() - 2) + (kind == LayerKind::ep_compress ? ".compress." : ".decompress.") + suffix;
    l.weight = static_cast<int>(kind == LayerKind::ep_compress ? site.compressor : site.decompressor);
    const auto idx = out.add_layer(l);
    (kind == LayerKind::ep_compress ? site.compress_layers : site.decompress_layers).push_back(idx);
    return idx;
  };

  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    Layer l = base.layers[i];
    for (auto& in : l.inputs) in = map[in];
    if (auto it = consumer_site.find(i); it != consumer_site.end()) {
      l.inputs[0] = add_ep_layer(LayerKind::ep_decompress, it->second, l.inputs[0], l.name);
    }
    if (auto it = flatten_site.find(i); it != flatten_site.end()) {
      l.inputs[0] = add_ep_layer(LayerKind::ep_decompress, it->second, l.inputs[0],
                                 base.layers[flatten_consumer[i]].name);
    }
    map[i] = out.add_layer(l);
    if (auto it = producer_site.find(i); it != producer_site.end()) {
      map[i] = add_ep_layer(LayerKind::ep_compress, it->second, map[i], l.name);
    }
  }
  check_model(out);
  result.model = std::move(out);
  return result;
}

Model merge_ep(const Model& ep_model) {
  if (ep_model.ep_sites.empty()) return ep_model;
  Model work = ep_model;
  const auto readers = readers_of(ep_model);
  std::set<std::size_t> removed_params;

  for (std::size_t s = 0; s < ep_model.ep_sites.size(); ++s) {
    const auto& site = ep_model.ep_sites[s];
    const auto& c = ep_model.params.at(site.compressor).value;
    const auto& d = ep_model.params.at(site.decompressor).value;
    if (c.shape() != d.shape() || c.rank() != 2 || cols(c) != site.original_extent) {
      throw EpError("site " + std::to_string(s) + ": compressor and decompressor shapes disagree");
    }
    removed_params.insert(site.compressor);
    removed_params.insert(site.decompressor);
    for (auto cl : site.compress_layers) {
      const auto& layer = ep_model.layers.at(cl);
      if (layer.kind != LayerKind::ep_compress || layer.ep_site != static_cast<int>(s)) {
        throw EpError("site " + std::to_string(s) + ": layer " + std::to_string(cl) + " is not its compressor");
      }
      const auto& producer = ep_model.layers[layer.inputs[0]];
      if (producer.kind != LayerKind::conv && producer.kind != LayerKind::linear) {
        throw EpError("compressor '" + layer.name + "' does not follow a conv or linear layer");
      }
      auto& w = work.param(producer.weight).value;
      w = mode_n_product(w, c, 0);
      if (producer.bias != kNoParam) {
        auto& b = work.param(producer.bias).value;
        b = matmul(c, b.reshaped({b.size(), 1})).reshaped({rows(c)});
      }
    }
    for (auto dl : site.decompress_layers) {
      const auto& layer = ep_model.layers.at(dl);
      if (layer.kind != LayerKind::ep_decompress || layer.ep_site != static_cast<int>(s)) {
        throw EpError("site " + std::to_string(s) + ": layer " + std::to_string(dl) + " is not its decompressor");
      }
      if (readers[dl].size() != 1) throw EpError("decompressor '" + layer.name + "' must feed exactly one layer");
      auto next = readers[dl][0];
      if (ep_model.layers[next].kind == LayerKind::flatten) {
        if (readers[next].size() != 1) throw EpError("flatten after '" + layer.name + "' must feed one layer");
        next = readers[next][0];
      }
      const auto& consumer = ep_model.layers[next];
      auto& w = work.param(consumer.weight).value;
      if (consumer.kind == LayerKind::conv) {
        w = mode_n_product(w, d, 1);
      } else if (consumer.kind == LayerKind::linear) {
        const auto o2 = w.shape()[0];
        const auto span = w.shape()[1] / site.original_extent;
        w = mode_n_product(w.reshaped({o2, site.original_extent, span}), d, 1).reshaped({o2, rows(d) * span});
      } else {
        throw EpError("decompressor '" + layer.name + "' does not feed a conv or linear layer");
      }
    }
  }

  // Rebuild without compressor layers and their parameters.
  std::vector<int> param_map(work.params.size(), kNoParam);
  Model out;
  out.arch = work.arch;
  out.input_shape = work.input_shape;
  out.num_classes = work.num_classes;
  out.loss = work.loss;
  for (std::size_t p = 0; p < work.params.size(); ++p) {
    if (removed_params.count(p)) continue;
    param_map[p] = static_cast<int>(out.params.size());
    out.params.push_back(work.params[p]);
  }
  std::vector<std::size_t> map(work.layers.size());
  for (std::size_t i = 0; i < work.layers.size(); ++i) {
    const auto& l = work.layers[i];
    if (l.kind == LayerKind::ep_compress || l.kind == LayerKind::ep_decompress) {
      map[i] = map[l.inputs[0]];
      continue;
    }
    Layer copy = l;
    for (auto& in : copy.inputs) in = map[in];
    for (int* p : {&copy.weight, &copy.bias, &copy.gamma, &copy.beta, &copy.running_mean, &copy.running_var}) {
      if (*p != kNoParam) *p = param_map[static_cast<std::size_t>(*p)];
    }
    copy.ep_site = -1;
    map[i] = out.add_layer(copy);
  }
  check_model(out);
  return out;
}

ParameterGroups ep_parameter_registry(const Model& ep_model) {
  std::set<std::size_t> ep;
  for (const auto& s : ep_model.ep_sites) {
    ep.insert(s.compressor);
    ep.insert(s.decompressor);
  }
  ParameterGroups g;
  for (std::size_t p = 0; p < ep_model.params.size(); ++p) {
    if (!ep_model.params[p].trainable) continue;
    (ep.count(p) ? g.ep : g.rest).push_back(p);
  }
  return g;
}

}  // namespace obc
