#include <doctest.h>

#include <random>

#include "obc/ep.hpp"
#include "support.hpp"

using namespace obc;
using namespace obc::testing;

namespace {

struct Case {
  std::string label;
  Model model;
};

std::vector<Case> fixtures() {
  std::mt19937_64 rng(77);
  std::vector<Case> out;
  out.push_back({"chain", chain_model(1)});
  ModelConfig v;
  v.widths = {6, 8, 8};
  v.pool_after = {1, 2};
  v.seed = 2;
  auto vgg = build_model("vggtiny", v);
  randomize_batchnorm(vgg, rng);
  out.push_back({"vggtiny", vgg});
  auto res = build_model("restiny", ModelConfig{});
  randomize_batchnorm(res, rng);
  out.push_back({"restiny", res});
  ModelConfig g;
  g.widths = {9, 7};
  g.activation = "gelu";
  g.seed = 3;
  out.push_back({"mlp-gelu", build_model("mlp", g)});
  out.push_back({"every_layer", every_layer_model(4)});
  return out;
}

PruningPlan random_plan(const Model& m, const GroupPartition& part, std::mt19937_64& rng) {
  auto plan = PruningPlan::empty(m, part);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t g = 0; g < part.group_count(); ++g) {
    if (u(rng) >= 0.35) continue;
    try {
      plan.add_group(part, g);
    } catch (const PruningError&) {
    }
  }
  if (plan.pruned.empty()) plan.add_group(part, 0);
  return plan;
}

Tensor input_for(const Model& m, std::size_t n, std::mt19937_64& rng) {
  Shape s = m.input_shape;
  s.insert(s.begin(), n);
  return random_tensor(s, rng);
}

}  // namespace

TEST_CASE("selection initialisation: O=4, pruned {1}") {
  const auto m = chain_model(5);
  const auto part = build_partition(m);
  auto plan = PruningPlan::empty(m, part);
  plan.add_group(part, 1);
  const auto ep = insert_ep(m, part, plan).model;
  REQUIRE(ep.ep_sites.size() == 1);
  const auto& site = ep.ep_sites[0];
  const auto expected = Tensor::matrix(3, 4, {1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  CHECK(ep.params[site.compressor].value == expected);
  CHECK(ep.params[site.decompressor].value == expected);
  CHECK(site.keep == std::vector<std::size_t>{0, 2, 3});
  // Conv -> C -> BN -> ReLU -> D -> Conv
  std::vector<LayerKind> kinds;
  for (const auto& l : ep.layers) kinds.push_back(l.kind);
  CHECK(kinds == std::vector<LayerKind>{LayerKind::input, LayerKind::conv, LayerKind::ep_compress,
                                        LayerKind::batchnorm, LayerKind::relu, LayerKind::ep_decompress,
                                        LayerKind::conv, LayerKind::global_avgpool});
  CHECK(ep.param(ep.layers[3].gamma).value.size() == 3);
}

TEST_CASE("MLP site wraps the GELU") {
  ModelConfig g;
  g.input_shape = {6};
  g.widths = {5};
  g.activation = "gelu";
  const auto m = build_model("mlp", g);
  const auto part = build_partition(m);
  auto plan = PruningPlan::empty(m, part);
  plan.add_group(part, 2);
  const auto ep = insert_ep(m, part, plan).model;
  std::vector<LayerKind> kinds;
  for (const auto& l : ep.layers) kinds.push_back(l.kind);
  CHECK(kinds == std::vector<LayerKind>{LayerKind::input, LayerKind::linear, LayerKind::ep_compress, LayerKind::gelu,
                                        LayerKind::ep_decompress, LayerKind::linear});
}

TEST_CASE("initialisation equivalence with naive surgery") {
  std::mt19937_64 rng(6);
  for (const auto& c : fixtures()) {
    CAPTURE(c.label);
    const auto part = build_partition(c.model);
    const auto plan = random_plan(c.model, part, rng);
    const auto ep = insert_ep(c.model, part, plan);
    CHECK(ep.fallback_classes.empty());
    const auto cut = apply_surgery(c.model, part, plan);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = input_for(c.model, 3, rng);
      worst = std::max(worst, max_abs_diff(forward(ep.model, x), forward(cut, x)));
    }
    CHECK(worst <= 1e-12);

    // merging the untouched selection matrices reproduces surgery exactly
    const auto merged = merge_ep(ep.model);
    REQUIRE(merged.params.size() == cut.params.size());
    REQUIRE(merged.layers.size() == cut.layers.size());
    for (std::size_t p = 0; p < cut.params.size(); ++p) {
      CHECK(merged.params[p].name == cut.params[p].name);
      CHECK(merged.params[p].value == cut.params[p].value);
    }
    for (std::size_t i = 0; i < cut.layers.size(); ++i) {
      CHECK(merged.layers[i].name == cut.layers[i].name);
      CHECK(merged.layers[i].inputs == cut.layers[i].inputs);
    }
  }
}

TEST_CASE("merge equivalence for arbitrary C and D") {
  std::mt19937_64 rng(7);
  for (const auto& c : fixtures()) {
    CAPTURE(c.label);
    const auto part = build_partition(c.model);
    const auto plan = random_plan(c.model, part, rng);
    auto ep = insert_ep(c.model, part, plan).model;
    for (const auto& site : ep.ep_sites) {
      for (auto p : {site.compressor, site.decompressor}) {
        for (auto& v : ep.params[p].value.data()) v += 0.3 * random_tensor({1}, rng)[0];
      }
    }
    const auto merged = merge_ep(ep);
    CHECK(merged.ep_sites.empty());
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = input_for(c.model, 3, rng);
      worst = std::max(worst, max_abs_diff(forward(ep, x), forward(merged, x)));
    }
    CHECK(worst <= 1e-10);
    const auto cut = apply_surgery(c.model, part, plan);
    for (std::size_t p = 0; p < cut.params.size(); ++p) CHECK(merged.params[p].value.shape() == cut.params[p].value.shape());
    CHECK(macs_count(merged) == macs_count(cut));
  }
}

TEST_CASE("merging a model without sites is the identity") {
  const auto m = every_layer_model(8);
  const auto merged = merge_ep(m);
  for (std::size_t p = 0; p < m.params.size(); ++p) CHECK(merged.params[p].value == m.params[p].value);
  CHECK(merged.layers.size() == m.layers.size());
}

TEST_CASE("parameter registry splits C/D from the rest") {
  auto m = build_model("vggtiny", ModelConfig{});
  const auto part = build_partition(m);
  auto plan = PruningPlan::empty(m, part);
  plan.add_group(part, 0);
  plan.add_group(part, 20);
  const auto ep = insert_ep(m, part, plan).model;
  REQUIRE(ep.ep_sites.size() == 2);
  const auto groups = ep_parameter_registry(ep);
  CHECK(groups.ep.size() == 4);
  std::size_t total = 0;
  for (auto p : groups.ep) total += ep.params[p].value.size();
  for (auto p : groups.rest) total += ep.params[p].value.size();
  CHECK(total == ep.trainable_count());
  CHECK(ep_parameter_registry(m).ep.empty());
}

TEST_CASE("gradients through compressor layers") {
  std::mt19937_64 rng(9);
  auto m = every_layer_model(10);
  const auto part = build_partition(m);
  auto plan = PruningPlan::empty(m, part);
  plan.add_group(part, 1);
  plan.add_group(part, 6);
  auto ep = insert_ep(m, part, plan).model;
  for (const auto& site : ep.ep_sites)
    for (auto p : {site.compressor, site.decompressor})
      for (auto& v : ep.params[p].value.data()) v += 0.2 * random_tensor({1}, rng)[0];
  const auto batch = random_batch(ep, 3, rng);
  auto result = forward_loss(ep, batch);
  const auto row = backward(result.tape);
  const auto fd = finite_difference_gradient(ep, batch, BnMode::eval, 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, relative_error(row.values[i], fd[i]));
  CHECK(worst <= 1e-5);
}
