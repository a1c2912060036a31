#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "obc/dependency.hpp"
#include "support.hpp"

using namespace obc;
using namespace obc::testing;

namespace {

std::size_t layer_index(const Model& m, const std::string& name) {
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].name == name) return i;
  FAIL("no layer " << name);
  return 0;
}

std::set<std::string> names(const Model& m, const std::vector<std::size_t>& layers) {
  std::set<std::string> out;
  for (auto l : layers) out.insert(m.layers[l].name);
  return out;
}

}  // namespace

TEST_CASE("conv-bn-relu-conv chain: 4 groups of 3 members") {
  const auto m = chain_model(1);
  const auto p = build_partition(m);
  REQUIRE(p.group_count() == 4);
  for (const auto& g : p.groups) {
    REQUIRE(g.members.size() == 3);
    CHECK(p.members[g.members[0]].role == AxisRole::output_channel);
    CHECK(p.members[g.members[1]].role == AxisRole::bn_pair);
    CHECK(p.members[g.members[2]].role == AxisRole::input_channel);
    for (auto mi : g.members) CHECK(p.members[mi].index == g.channel);
  }
  CHECK(validate_partition(p, m).empty());
}

TEST_CASE("member elements address the expected tensor entries") {
  const auto m = chain_model(2);
  const auto p = build_partition(m);
  const auto& g = p.groups[2];
  const auto filter = member_elements(m, p.members[g.members[0]]);
  REQUIRE(filter.size() == 18);
  CHECK(filter.front().index == 2 * 18);
  const auto pair = member_elements(m, p.members[g.members[1]]);
  REQUIRE(pair.size() == 2);
  CHECK(m.params[pair[0].param].name == "bn1.gamma");
  CHECK(m.params[pair[1].param].name == "bn1.beta");
  const auto in = member_elements(m, p.members[g.members[2]]);
  REQUIRE(in.size() == 3 * 9);
  // conv2.weight (3,4,3,3): entry (o=1, c=2, 0, 0)
  CHECK(std::find(in.begin(), in.end(), ParamElement{in[0].param, (1 * 4 + 2) * 9}) != in.end());
}

TEST_CASE("mlp 784-128-10 has 128 hidden groups") {
  ModelConfig cfg;
  cfg.input_shape = {784};
  cfg.widths = {128};
  const auto m = build_model("mlp", cfg);
  const auto p = build_partition(m);
  CHECK(p.group_count() == 128);
  for (const auto& g : p.groups) CHECK(g.members.size() == 3);  // row, bias, classifier column
  CHECK(validate_partition(p, m).empty());
}

TEST_CASE("flatten consumers take spatial blocks") {
  const auto m = build_model("vggtiny", ModelConfig{});
  const auto p = build_partition(m);
  CHECK(p.group_count() == 16 + 16 + 32);
  const auto& last = p.groups.back();
  const auto& cons = p.members[last.members.back()];
  CHECK(cons.role == AxisRole::input_channel);
  CHECK(m.layers[cons.layer].name == "classifier");
  CHECK(cons.span == 4);
  CHECK(member_elements(m, cons).size() == 10 * 4);
  CHECK(validate_partition(p, m).empty());
}

TEST_CASE("restiny add junctions tie producers into one class") {
  const auto m = build_model("restiny", ModelConfig{});
  const auto p = build_partition(m);
  const auto stem = std::find_if(p.classes.begin(), p.classes.end(), [](const ChannelClass& c) { return c.name == "stem"; });
  REQUIRE(stem != p.classes.end());
  CHECK(stem->residual);
  CHECK(names(m, stem->producers) == std::set<std::string>{"stem", "block1.conv2"});
  CHECK(names(m, stem->bn_layers) == std::set<std::string>{"stem.bn", "block1.bn2"});
  std::vector<std::size_t> consumers;
  for (const auto& c : stem->consumers) consumers.push_back(c.layer);
  CHECK(names(m, consumers) == std::set<std::string>{"block1.conv1", "block2.conv1", "block2.shortcut"});

  const auto b2 = std::find_if(p.classes.begin(), p.classes.end(),
                               [](const ChannelClass& c) { return c.name == "block2.conv2"; });
  REQUIRE(b2 != p.classes.end());
  CHECK(names(m, b2->producers) == std::set<std::string>{"block2.conv2", "block2.shortcut"});

  // 8 + 8 (block1.conv1) + 16 (block2.conv1) + 16 (block2 junction)
  CHECK(p.group_count() == 48);
  const auto& g = p.groups[0];
  CHECK(g.members.size() == 2 + 2 + 3);
  CHECK(validate_partition(p, m).empty());
}

TEST_CASE("coverage audit: every prunable slice once, protected slices never") {
  for (const std::string arch : {"mlp", "vggtiny", "restiny"}) {
    const auto m = build_model(arch, ModelConfig{});
    const auto p = build_partition(m);
    std::set<std::tuple<std::size_t, int, int, std::size_t>> seen;
    for (const auto& s : p.members) {
      CHECK(seen.insert({s.layer, s.param, static_cast<int>(s.role), s.index}).second);
      // classifier rows and first-layer input channels are protected
      if (m.layers[s.layer].name == "classifier") CHECK(s.role == AxisRole::input_channel);
      if (s.role == AxisRole::input_channel) CHECK(m.layers[m.layers[s.layer].inputs[0]].kind != LayerKind::input);
    }
    // brute count of slices per layer
    std::size_t expected = 0;
    const auto classes = trace_channel_classes(m);
    for (const auto& c : classes) {
      if (c.is_protected) continue;
      std::size_t per_channel = c.bn_layers.size() + c.consumers.size();
      for (auto prod : c.producers) per_channel += 1 + (m.layers[prod].bias != kNoParam);
      expected += per_channel * c.extent;
    }
    CHECK(p.member_count() == expected);
  }
}

TEST_CASE("excluding shortcuts protects residual classes") {
  const auto m = build_model("restiny", ModelConfig{});
  PartitionOptions opt;
  opt.prune_residual = false;
  const auto p = build_partition(m, opt);
  CHECK(p.group_count() == 8 + 16);
  CHECK(validate_partition(p, m).empty());
}

TEST_CASE("validate_partition reports violations as data") {
  const auto m = chain_model(3);
  auto p = build_partition(m);
  REQUIRE(validate_partition(p, m).empty());

  SUBCASE("deleted member") {
    const auto removed = p.members[p.groups[1].members[1]];
    p.groups[1].members.erase(p.groups[1].members.begin() + 1);
    p.members.erase(p.members.begin() + 4);
    p.member_group.erase(p.member_group.begin() + 4);
    const auto v = validate_partition(p, m);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == PartitionViolation::Kind::uncovered);
    CHECK(v[0].member == removed);
    CHECK(v[0].message.find("bn1") != std::string::npos);
  }
  SUBCASE("duplicated member") {
    p.members.push_back(p.members[0]);
    p.member_group.push_back(3);
    p.groups[3].members.push_back(p.members.size() - 1);
    const auto v = validate_partition(p, m);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == PartitionViolation::Kind::duplicated);
  }
  SUBCASE("protected slice") {
    p.members.push_back({layer_index(m, "conv2"), m.find_param("conv2.weight"), AxisRole::output_channel, 0, 1});
    const auto v = validate_partition(p, m);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == PartitionViolation::Kind::foreign);
  }
}

TEST_CASE("compressor layers have no grouping rule") {
  auto m = chain_model(4);
  Layer c;
  c.kind = LayerKind::ep_compress;
  c.name = "ep";
  c.inputs = {1};
  c.weight = static_cast<int>(m.add_param("ep.C", Tensor::identity(4)));
  m.layers.insert(m.layers.begin() + 2, c);
  for (std::size_t i = 3; i < m.layers.size(); ++i)
    for (auto& in : m.layers[i].inputs)
      if (in >= 2) ++in;
  m.layers[3].inputs = {2};
  check_model(m);
  CHECK_THROWS_AS(build_partition(m), PartitionError);
}

TEST_CASE("partition report lists every group") {
  const auto m = chain_model(5);
  const auto p = build_partition(m);
  std::ostringstream os;
  write_partition_report(os, p, m);
  const auto text = os.str();
  CHECK(text.find("group 3 class conv1 channel 3:") != std::string::npos);
  CHECK(text.find("bn1:bn1.gamma[bn_pair 3]") != std::string::npos);
}
