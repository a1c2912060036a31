#include <doctest.h>

#include <random>
#include <sstream>

#include "obc/oracles.hpp"
#include "obc/saliency.hpp"
#include "support.hpp"

using namespace obc;
using namespace obc::testing;

namespace {

std::vector<Batch> batches_for(const Model& m, std::size_t count, std::size_t size, std::mt19937_64& rng) {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_batch(m, size, rng));
  return out;
}

bool same_params(const Model& a, const Model& b) {
  for (std::size_t p = 0; p < a.params.size(); ++p)
    if (!(a.params[p].value == b.params[p].value)) return false;
  return true;
}

}  // namespace

TEST_CASE("brute force: an all-zero group costs nothing") {
  std::mt19937_64 rng(1);
  auto m = chain_model(2);
  const auto part = build_partition(m);
  for (auto member : part.groups[1].members)
    for (const auto& e : member_elements(m, part.members[member])) m.params[e.param].value[e.index] = 0.0;
  const auto batches = batches_for(m, 3, 4, rng);
  CHECK(brute_force_saliency(m, part, 1, batches) == 0.0);
  CHECK(brute_force_saliency(m, part, 0, batches) > 0.0);
}

TEST_CASE("brute force: a duplicated batch doubles the value") {
  std::mt19937_64 rng(3);
  auto m = chain_model(4);
  const auto part = build_partition(m);
  const std::vector<Batch> one{random_batch(m, 5, rng)};
  const std::vector<Batch> two{one[0], one[0]};
  CHECK(brute_force_saliency(m, part, 2, two) == 2.0 * brute_force_saliency(m, part, 2, one));
}

TEST_CASE("brute force restores the weights bit-exactly") {
  std::mt19937_64 rng(5);
  auto m = every_layer_model(6);
  randomize_batchnorm(m, rng);
  const auto copy = m;
  const auto part = build_partition(m);
  const auto batches = batches_for(m, 2, 3, rng);
  const auto all = brute_force_all(m, part, batches);
  CHECK(all.size() == part.group_count());
  CHECK(same_params(m, copy));
  CHECK_THROWS_AS(brute_force_saliency(m, part, part.group_count(), batches), OracleError);
  CHECK_THROWS_AS(brute_force_saliency(m, part, 0, std::span<const Batch>{}), OracleError);
}

TEST_CASE("affine model: brute force equals the Gram quadratic form") {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = affine_model(100 + trial);
    const auto batches = batches_for(m, 4, 6, rng);
    const auto layout = ParameterLayout::of(m);
    std::vector<ParamElement> elements;
    std::vector<double> delta;
    for (auto p : layout.param_ids)
      for (std::size_t i = 0; i < m.params[p].value.size(); ++i) {
        elements.push_back({p, i});
        delta.push_back(random_tensor({1}, rng)[0]);
      }
    const double brute = brute_force_delta(m, elements, delta, batches);
    const double quad = quadratic_form(full_gram(m, batches), delta);
    worst = std::max(worst, std::abs(brute - quad));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("full Gram: blocks, symmetry, positive semidefinite") {
  std::mt19937_64 rng(9);
  const auto m = chain_model(10);
  const auto part = build_partition(m);
  const auto batches = batches_for(m, 5, 4, rng);
  const auto g = full_gram(m, batches);
  const auto layout = ParameterLayout::of(m);
  const auto p = layout.total;
  REQUIRE(g.shape() == Shape{p, p});

  const auto rows = jacobian_rows(m, batches);
  const auto grams = accumulate_grams(m, part, rows);
  for (std::size_t k = 0; k < part.member_count(); ++k) {
    const auto idx = member_row_indices(m, layout, part.members[k]);
    bool exact = true;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < idx.size(); ++j) exact = exact && grams[k].at(i, j) == g.at(idx[i], idx[j]);
    CHECK(exact);
  }

  double asym = 0.0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) asym = std::max(asym, std::abs(g.at(i, j) - g.at(j, i)));
  CHECK(asym == 0.0);

  const auto d = g.data();
  const auto eig = symmetric_eigenvalues(std::vector<double>(d.begin(), d.end()), p);
  CHECK(*std::min_element(eig.begin(), eig.end()) >= -1e-10);
}

TEST_CASE("full Gram refuses large models") {
  std::mt19937_64 rng(11);
  const auto m = build_model("mlp", ModelConfig{});
  const auto batches = batches_for(m, 1, 2, rng);
  CHECK_THROWS_AS(full_gram(m, batches), OracleError);
}

TEST_CASE("rank statistics") {
  CHECK(average_ranks(std::vector<double>{3.0, 1.0, 2.0, 2.0}) == std::vector<double>{4.0, 1.0, 2.5, 2.5});
  std::mt19937_64 rng(13);
  std::vector<double> a(40), rev(40);
  for (auto& v : a) v = random_tensor({1}, rng)[0];
  for (std::size_t i = 0; i < a.size(); ++i) rev[i] = -a[i];
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-15));

  // without ties: 1 - 6 sum d^2 / (n (n^2 - 1))
  std::vector<double> b(40);
  for (auto& v : b) v = random_tensor({1}, rng)[0];
  const auto ra = average_ranks(a), rb = average_ranks(b);
  double d2 = 0.0;
  for (std::size_t i = 0; i < 40; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  CHECK(spearman(a, b) == doctest::Approx(1.0 - 6.0 * d2 / (40.0 * (1600.0 - 1.0))).epsilon(1e-12));

  CHECK_THROWS_AS(spearman(a, std::vector<double>(3)), OracleError);
  CHECK(std::isnan(spearman(a, std::vector<double>(40, 1.0))));
}

TEST_CASE("top-k overlap of the lowest scores") {
  CHECK(lowest_k(std::vector<double>{5, 1, 3, 1, 0}, 3) == std::vector<std::size_t>{4, 1, 3});
  std::vector<double> crit(20), oracle(20);
  for (std::size_t i = 0; i < 20; ++i) {
    crit[i] = static_cast<double>(i);
    oracle[i] = static_cast<double>(i);
  }
  std::swap(oracle[0], oracle[19]);  // the lowest oracle group is now 19
  const auto f = ranking_fidelity(crit, oracle);
  REQUIRE(f.top_k.size() == 3);
  CHECK(f.top_k[0].label == "5");
  CHECK(f.top_k[0].overlap == doctest::Approx(4.0 / 5.0));
  CHECK(f.top_k[1].overlap == doctest::Approx(9.0 / 10.0));
  CHECK(f.top_k[2].label == "25%");
  CHECK(f.top_k[2].k == 5);
  const auto small = ranking_fidelity(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3});
  CHECK(small.top_k[0].k == 3);
  CHECK(small.top_k[0].overlap == 1.0);
}

TEST_CASE("criterion versus oracle on a small CNN") {
  std::mt19937_64 rng(15);
  ModelConfig cfg;
  cfg.widths = {16, 16};
  cfg.pool_after = {1};
  cfg.seed = 16;
  auto m = build_model("vggtiny", cfg);
  randomize_batchnorm(m, rng);
  const auto part = build_partition(m);
  const auto batches = batches_for(m, 6, 8, rng);
  const auto rows = jacobian_rows(m, batches);
  const auto ms = member_saliencies(m, part, rows, SaliencyConfig{});
  std::vector<double> jc;
  for (const auto& s : score_groups(part, ms, SaliencyConfig{})) jc.push_back(s.score);
  const auto brute = brute_force_all(m, part, batches);
  const auto f = ranking_fidelity(jc, brute);
  MESSAGE("spearman(JC, brute force) = " << f.spearman);
  CHECK(std::isfinite(f.spearman));
}

TEST_CASE("oracle reports") {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{1.0, 2.5, 3.0};
  auto r = compare_values("demo", a, b, 0.6);
  CHECK(r.pass);
  CHECK(r.max_abs == 0.5);
  CHECK(r.max_rel == doctest::Approx(0.2));
  CHECK_FALSE(compare_values("demo", a, b, 0.1).pass);
  r.rank_correlation = 0.9;
  r.has_rank_correlation = true;
  std::ostringstream csv;
  write_oracle_csv(csv, {r});
  CHECK(csv.str() == "name,max_abs,max_rel,rank_correlation,tolerance,pass\ndemo,0.5,0.20000000000000001,0.90000000000000002,0.59999999999999998,true\n");
}
