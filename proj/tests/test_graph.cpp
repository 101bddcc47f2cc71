// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "attrigraph/error.hpp"
#include "attrigraph/graph.hpp"
#include "attrigraph/json_io.hpp"
#include "support.hpp"

using namespace attrigraph;
using testing_support::close_rel;
using testing_support::identity_block_model;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an attrigraph::Error");
  return ErrorKind::computation;
}

RuleSet rules_for(RuleVariant v) {
  RuleSet r;
  r.variant = v;
  return r;
}

ContrastCase case_of_length(const ModelBundle& model, std::size_t n, std::uint64_t seed = 3) {
  SyntheticOptions opt;
  opt.count = 1;
  opt.min_len = opt.max_len = n;
  opt.seed = seed;
  return make_synthetic_cases(model, opt).front();
}

std::vector<std::size_t> all_targets(std::size_t n) {
  std::vector<std::size_t> t(n);
  for (std::size_t j = 0; j < n; ++j) t[j] = j;
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(std::string(ATTRIGRAPH_TEST_DIR) + "/" + path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

InteractionMatrix matrix_of(std::size_t n, const std::vector<double>& values) {
  InteractionMatrix m;
  m.A = Tensor({n, n}, values);
  return m;
}

// Reverse reachability by repeated relaxation until nothing changes.
std::set<std::pair<int, std::size_t>> reaches_target(const AttributionGraph& g) {
  std::set<std::pair<int, std::size_t>> nodes, in{{g.target.layer, g.target.pos}};
  for (const GraphNode& n : g.nodes) nodes.insert({n.layer, n.pos});
  nodes.insert({g.target.layer, g.target.pos});
  for (bool grew = true; grew;) {
    grew = false;
    for (const GraphEdge& e : g.edges)
      if (nodes.count({e.s, e.i}) && in.count({e.t, e.j}) && !in.count({e.s, e.i})) {
        in.insert({e.s, e.i});
        grew = true;
      }
  }
  return in;
}

AttributionGraph random_graph(std::mt19937_64& rng, int L, std::size_t n) {
  AttributionGraph g;
  g.case_id = "random";
  g.target = {L - 1, n - 1, 1.0};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::set<std::pair<int, std::size_t>> present;
  for (int l = -1; l < L; ++l)
    for (std::size_t i = 0; i < n; ++i)
      if (u(rng) < 0.6) {
        g.nodes.push_back({l, i, u(rng) - 0.5});
        present.insert({l, i});
      }
  for (int s = -1; s + 1 < L; ++s)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i <= j; ++i)
        if (present.count({s, i}) && (present.count({s + 1, j}) || (s + 1 == L - 1 && j == n - 1)) &&
            u(rng) < 0.3)
          g.edges.push_back({s, i, s + 1, j, u(rng) - 0.5});
  return g;
}

}  // namespace

TEST_CASE("node pass: embedding slot, final slot, and conservation through linearised blocks") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 14);
  for (RuleVariant v : {RuleVariant::attnlrp, RuleVariant::cplrp, RuleVariant::gradient}) {
    CAPTURE(to_string(v));
    const NodePass np = node_pass(*model, c, rules_for(v));
    const Heatmap h = input_attribution(*model, c, rules_for(v));
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(np.relev.at(-1, i) == h.raw[i]);

    // logits are linear in the last slot, so R there is h . (W_U[:,tgt] - W_U[:,con]).
    const int last = np.relev.last_layer();
    CHECK(last == 3);
    const auto hrow = np.states.row(last, c.position);
    double direct = 0.0;
    for (std::size_t e = 0; e < hrow.size(); ++e)
      direct += hrow[e] * (model->unembed().at({e, std::size_t(c.target)}) -
                           model->unembed().at({e, std::size_t(c.contrast)}));
    CHECK(close_rel(np.relev.at(last, c.position), direct, 1e-12, 1e-12));
    CHECK(close_rel(np.relev.delta_logit, delta_logit(*model, c), 1e-12, 1e-12));
    for (std::size_t j = 0; j < c.size(); ++j)
      if (j != c.position) CHECK(np.relev.at(last, j) == 0.0);
  }

  const auto id = identity_block_model();
  ContrastCase ic;
  ic.case_id = "id";
  ic.tokens = {0, 3, 5, 2, 7};
  ic.special_mask = {true, false, false, false, false};
  ic.position = 4;
  ic.target = 7;
  ic.contrast = 2;
  for (RuleVariant v : {RuleVariant::attnlrp, RuleVariant::cplrp}) {
    const NodePass np = node_pass(*id, ic, rules_for(v));
    for (int l = -1; l <= 0; ++l) {
      double total = 0.0;
      for (std::size_t i = 0; i < ic.size(); ++i) total += np.relev.at(l, i);
      CHECK(close_rel(total, np.relev.delta_logit, 1e-9));
    }
  }
}

TEST_CASE("edge matrix: batched equals the naive loop") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 12);
  const RuleSet rules = rules_for(RuleVariant::attnlrp);
  const NodePass np = node_pass(*model, c, rules);
  const auto targets = all_targets(c.size());
  for (auto [s, t] : std::vector<LayerPair>{{-1, 0}, {0, 2}, {2, 3}}) {
    CAPTURE(s);
    CAPTURE(t);
    const InteractionMatrix naive = edge_matrix_naive(*model, np.states, np.relev, s, t, targets, rules);
    CHECK(naive.backward_calls == targets.size());
    BatchPlan one{1, Replication::shared};
    const InteractionMatrix b1 = edge_matrix(*model, np.states, np.relev, s, t, targets, one, rules);
    CHECK(max_abs_diff(b1.A, naive.A) <= 1e-10);
    for (Replication rep : {Replication::shared, Replication::materialized})
      for (std::size_t B : {2u, 4u, 8u}) {
        CAPTURE(B);
        const BatchPlan plan{B, rep};
        const InteractionMatrix m = edge_matrix(*model, np.states, np.relev, s, t, targets, plan, rules);
        CHECK(max_abs_diff(m.A, naive.A) <= 1e-8);
        CHECK(m.backward_calls == plan.calls_for(targets.size()));
        CHECK(m.backward_calls == (targets.size() + B - 1) / B);
      }
    // Causal structure, and zero rows past the prediction position.
    for (std::size_t j = 0; j < c.size(); ++j)
      for (std::size_t i = 0; i < c.size(); ++i) {
        if (i > j) CHECK(naive.at(j, i) == 0.0);
        if (j > c.position) CHECK(naive.at(j, i) == 0.0);
      }
  }
}

TEST_CASE("edge matrix: subsets of targets, call counting, and errors") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 100);
  const RuleSet rules = rules_for(RuleVariant::cplrp);
  const NodePass np = node_pass(*model, c, rules);
  const InteractionMatrix m =
      edge_matrix(*model, np.states, np.relev, 2, 3, all_targets(100), {16, Replication::shared}, rules);
  CHECK(m.backward_calls == 7);

  const std::vector<std::size_t> subset = {99, 3, 50};
  const InteractionMatrix part =
      edge_matrix(*model, np.states, np.relev, 2, 3, subset, {2, Replication::shared}, rules);
  CHECK(part.backward_calls == 2);
  for (std::size_t j = 0; j < 100; ++j) {
    const bool asked = std::find(subset.begin(), subset.end(), j) != subset.end();
    for (std::size_t i = 0; i < 100; ++i) {
      if (asked) CHECK(std::abs(part.at(j, i) - m.at(j, i)) <= 1e-8);
      else CHECK(part.at(j, i) == 0.0);
    }
  }

  const BatchPlan plan;
  CHECK(kind_of([&] { edge_matrix(*model, np.states, np.relev, 2, 2, {0}, plan, rules); }) ==
        ErrorKind::input);
  CHECK(kind_of([&] { edge_matrix(*model, np.states, np.relev, 3, 1, {0}, plan, rules); }) ==
        ErrorKind::input);
  CHECK(kind_of([&] { edge_matrix(*model, np.states, np.relev, 0, 4, {0}, plan, rules); }) ==
        ErrorKind::input);
  CHECK(kind_of([&] { edge_matrix(*model, np.states, np.relev, 0, 1, {100}, plan, rules); }) ==
        ErrorKind::input);
  CHECK(kind_of([&] { edge_matrix(*model, np.states, np.relev, 0, 1, {1, 1}, plan, rules); }) ==
        ErrorKind::input);
  CHECK(kind_of([&] {
          edge_matrix(*model, np.states, np.relev, 0, 1, {1}, {0, Replication::shared}, rules);
        }) == ErrorKind::input);
}

TEST_CASE("batch plan") {
  CHECK(BatchPlan::default_for(3).batch == 3);
  CHECK(BatchPlan::default_for(300).batch == 8);
  CHECK(BatchPlan::default_for(0).batch == 1);
  const BatchPlan p{4, Replication::shared};
  const auto chunks = p.chunks(all_targets(10));
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[2] == std::vector<std::size_t>{8, 9});
  CHECK(p.calls_for(10) == 3);
  CHECK(p.chunks({}).empty());
}

TEST_CASE("cumulative pruning fixtures") {
  SUBCASE("{5,3,1,1} at p=0.85") {
    const PruneResult r = prune_cumulative(matrix_of(2, {5, -3, 1, -1}), 0.85);
    CHECK(r.k_star == 3);
    REQUIRE(r.tau);
    CHECK(*r.tau == 1.0);
    CHECK(r.retained.size() == 4);
    CHECK(r.total_mass == 10.0);
    CHECK(r.retained_mass == 10.0);
  }
  SUBCASE("{4,4,2} at p=0.5") {
    const PruneResult r = prune_cumulative(matrix_of(2, {4, 0, 4, 2}), 0.5);
    CHECK(r.k_star == 2);
    CHECK(*r.tau == 4.0);
    CHECK(r.retained == std::vector<Entry>{{0, 0}, {1, 0}});
    CHECK(r.retained_mass == 8.0);
  }
  SUBCASE("uniform values keep every tie") {
    for (std::size_t K : {1u, 7u, 20u, 33u}) {
      std::vector<double> v(36, 0.0);
      for (std::size_t k = 0; k < K; ++k) v[k] = (k % 2 ? -0.5 : 0.5);
      const PruneResult r = prune_cumulative(matrix_of(6, v), 0.85);
      CHECK(r.k_star == static_cast<std::size_t>(std::ceil(0.85 * (0.5 * K) / 0.5)));
      CHECK(r.retained.size() == K);
    }
  }
  SUBCASE("single nonzero entry survives any p") {
    for (double p : {0.01, 0.5, 1.0}) {
      const PruneResult r = prune_cumulative(matrix_of(3, {0, 0, 0, 0, -2e-7, 0, 0, 0, 0}), p);
      CHECK(r.retained == std::vector<Entry>{{1, 1}});
    }
  }
  SUBCASE("all-zero matrix has no threshold") {
    const PruneResult r = prune_cumulative(matrix_of(2, {0, 0, 0, 0}), 0.85);
    CHECK_FALSE(r.tau);
    CHECK(r.retained.empty());
  }
  SUBCASE("p = 1 keeps every nonzero entry") {
    const PruneResult r = prune_cumulative(matrix_of(2, {1e-9, 0, 3, -2}), 1.0);
    CHECK(r.retained.size() == 3);
  }
  CHECK(kind_of([] { prune_cumulative(matrix_of(1, {1}), 0.0); }) == ErrorKind::input);
  CHECK(kind_of([] { prune_cumulative(matrix_of(1, {1}), 1.5); }) == ErrorKind::input);
}

TEST_CASE("global pruning is strict") {
  CHECK(prune_global(matrix_of(2, {0.5, -0.7, 0.7, 0}), 0.7).retained.empty());
  CHECK(prune_global(matrix_of(2, {0.5, -0.7, 0.7, 0}), 10.0).retained.empty());
  CHECK(prune_global(matrix_of(2, {0.5, -0.7, 0.7, 0}), 1e-300).retained.size() == 3);
  CHECK(prune_global(matrix_of(2, {0.5, -0.7, 0.7, 0}), 0.6).retained ==
        std::vector<Entry>{{0, 1}, {1, 0}});
  CHECK(kind_of([] { prune_global(matrix_of(1, {1}), 0.0); }) == ErrorKind::input);
}

TEST_CASE("pruning properties on random matrices") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 9;
    std::vector<double> v(n * n);
    for (double& x : v) {
      const auto pick = rng() % 4;
      x = pick == 0 ? 0.0 : pick == 1 ? std::round(u(rng) * 3) / 4 : u(rng);
    }
    const double p = std::max(1e-3, std::abs(u(rng)));
    const InteractionMatrix m = matrix_of(n, v);
    const PruneResult r = prune_cumulative(m, p);

    std::vector<double> mags;
    for (double x : v)
      if (x != 0.0) mags.push_back(std::abs(x));
    std::sort(mags.rbegin(), mags.rend());
    double M = 0.0;
    for (double a : mags) M += a;
    if (mags.empty()) {
      CHECK(r.retained.empty());
      continue;
    }
    CHECK(r.retained_mass >= p * M);
    // The minimal prefix: one fewer entry falls short.
    double prefix = 0.0;
    for (std::size_t k = 0; k + 1 < r.k_star; ++k) prefix += mags[k];
    CHECK(prefix < p * M);
    CHECK(*r.tau == mags[r.k_star - 1]);
    // Retained = that prefix plus every tie at tau.
    std::size_t expected = 0;
    for (double a : mags) expected += a >= *r.tau;
    CHECK(r.retained.size() == expected);
    for (const auto& [j, i] : r.retained) CHECK(std::abs(m.at(j, i)) >= *r.tau);

    const double tau = std::abs(u(rng));
    const PruneResult g = prune_global(m, tau);
    std::vector<Entry> strict;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < n; ++i)
        if (std::abs(v[j * n + i]) > tau) strict.emplace_back(j, i);
    CHECK(g.retained == strict);
  }
}

TEST_CASE("pruning agrees with the Python fixture") {
  const json cases = json::parse(read_file("fixtures/prune_fixture.json"));
  REQUIRE(cases.size() == 12);
  for (const json& fx : cases) {
    const auto rows = fx.at("A").get<std::vector<std::vector<double>>>();
    std::vector<double> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    const InteractionMatrix m = matrix_of(rows.size(), flat);
    auto entries = [](const json& list) {
      std::vector<Entry> out;
      for (const json& e : list) out.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
      return out;
    };
    const PruneResult r = prune_cumulative(m, fx.at("p").get<double>());
    CHECK(r.retained == entries(fx.at("cumulative")));
    if (!fx.at("k_star").empty()) CHECK(r.k_star == fx.at("k_star").get<std::size_t>());
    CHECK(prune_global(m, fx.at("tau_global").get<double>()).retained == entries(fx.at("global")));
  }
}

TEST_CASE("connected subgraph") {
  AttributionGraph g;
  g.target = {2, 3, 0.5};
  g.nodes = {{0, 0, 0.1}, {0, 1, 0.2}, {1, 0, 0.3}, {1, 2, 0.4}, {2, 1, 0.1}, {2, 3, 0.5}};
  // a=(0,0) -> b=(1,0) -> target, plus c=(0,1) -> d=(1,2) detached; (2,1) isolated.
  g.edges = {{0, 0, 1, 0, 1.0}, {1, 0, 2, 3, 2.0}, {0, 1, 1, 2, 3.0}};
  const AttributionGraph out = connected_subgraph(g);
  CHECK(out.nodes == std::vector<GraphNode>{{0, 0, 0.1}, {1, 0, 0.3}, {2, 3, 0.5}});
  CHECK(out.edges.size() == 2);
  CHECK_FALSE(out.flags.target_reinstated);
  CHECK_FALSE(out.flags.empty);
  CHECK(connected_subgraph(out) == out);

  AttributionGraph lost = g;
  lost.nodes.pop_back();
  const AttributionGraph back = connected_subgraph(lost);
  CHECK(back.flags.target_reinstated);
  CHECK(back.nodes == out.nodes);

  AttributionGraph lone;
  lone.target = {3, 0, 1.0};
  lone.nodes = {{0, 0, 1.0}};
  const AttributionGraph solo = connected_subgraph(lone);
  CHECK(solo.flags.empty);
  CHECK(solo.flags.target_reinstated);
  CHECK(solo.nodes == std::vector<GraphNode>{{3, 0, 1.0}});
}

TEST_CASE("connected subgraph matches a reverse-reachability oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const AttributionGraph g = random_graph(rng, 2 + trial % 4, 2 + trial % 7);
    const AttributionGraph out = connected_subgraph(g);
    const auto oracle = reaches_target(g);
    std::set<std::pair<int, std::size_t>> got;
    for (const GraphNode& n : out.nodes) got.insert({n.layer, n.pos});
    CHECK(got == oracle);
    for (const GraphEdge& e : out.edges) {
      CHECK(out.find_node(e.s, e.i));
      CHECK(out.find_node(e.t, e.j));
    }
    std::size_t expected_edges = 0;
    for (const GraphEdge& e : g.edges) expected_edges += oracle.count({e.s, e.i}) && oracle.count({e.t, e.j});
    CHECK(out.edges.size() == expected_edges);
    CHECK(reaches_target(out) == got);
  }
}

TEST_CASE("build graph on the toy model") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 10);
  const RuleSet rules = rules_for(RuleVariant::attnlrp);
  const auto pairs = default_layer_pairs(model->config());
  REQUIRE(pairs.size() == 4);
  CHECK(pairs.front() == LayerPair{-1, 0});
  const BatchPlan plan = BatchPlan::default_for(c.size());
  const LayerMatrices lm = compute_layer_matrices(*model, c, rules, pairs, plan);

  PruneConfig everything;
  everything.p = 1.0;
  everything.node_threshold = 0.0;
  const AttributionGraph full = assemble_graph(lm, c, rules.variant, everything);
  CHECK_FALSE(full.flags.empty);
  CHECK(full.target.layer == 3);
  CHECK(full.target.pos == c.position);
  CHECK(full.find_node(3, c.position));
  for (const GraphEdge& e : full.edges) {
    const auto& m = lm.matrices[static_cast<std::size_t>(e.s + 1)];
    CHECK(m.s == e.s);
    CHECK(e.w == m.at(e.j, e.i));
    CHECK(e.w != 0.0);
    CHECK(full.find_node(e.s, e.i));
    CHECK(full.find_node(e.t, e.j));
  }
  std::set<std::pair<int, std::size_t>> got;
  for (const GraphNode& n : full.nodes) got.insert({n.layer, n.pos});
  CHECK(reaches_target(full) == got);

  // Every nonzero entry between surviving nodes is an edge at p = 1.
  std::size_t expected = 0;
  for (const InteractionMatrix& m : lm.matrices)
    for (std::size_t j = 0; j < c.size(); ++j)
      for (std::size_t i = 0; i <= j; ++i)
        expected += m.at(j, i) != 0.0 && got.count({m.s, i}) && got.count({m.t, j});
  CHECK(full.edges.size() == expected);

  const AttributionGraph dflt = build_graph(*model, c, rules, pairs, PruneConfig{}, plan);
  CHECK(dflt.edges.size() <= full.edges.size());
  for (const GraphNode& n : dflt.nodes)
    if (!(n.layer == dflt.target.layer && n.pos == dflt.target.pos))
      CHECK(std::abs(n.relevance) > 0.01);

  PruneConfig strict;
  strict.node_threshold = 1e12;
  const AttributionGraph none = assemble_graph(lm, c, rules.variant, strict);
  CHECK(none.flags.empty);
  CHECK(none.flags.target_reinstated);
  CHECK(none.edges.empty());
  CHECK(none.nodes.size() == 1);

  // Scheduling order of layer pairs does not change the result.
  const LayerMatrices threaded = compute_layer_matrices(*model, c, rules, pairs, plan, 3);
  CHECK(serialize_graph(assemble_graph(threaded, c, rules.variant, PruneConfig{})) ==
        serialize_graph(assemble_graph(lm, c, rules.variant, PruneConfig{})));

  CHECK(kind_of([&] { compute_layer_matrices(*model, c, rules, {{1, 1}}, plan); }) == ErrorKind::input);
  CHECK(kind_of([&] { compute_layer_matrices(*model, c, rules, {}, plan); }) == ErrorKind::input);
  PruneConfig bad;
  bad.p = 0.0;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::input);
  bad = PruneConfig{};
  bad.mode = PruneMode::global;
  bad.tau = 0.0;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::input);
  bad.tau = 0.5;
  bad.p = 7.0;  // not consulted in global mode
  CHECK_NOTHROW(bad.validate());
  bad.node_threshold = -1.0;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::input);
}

TEST_CASE("refinement") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 9);
  const RuleSet rules = rules_for(RuleVariant::cplrp);
  const NodePass np = node_pass(*model, c, rules);
  const std::vector<std::pair<int, std::size_t>> nodes = {{-1, 0}, {1, 4}, {3, c.position}};
  const auto vecs = refine_subgraph(*model, c, rules, nodes);
  REQUIRE(vecs.size() == 3);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto [layer, pos] = nodes[k];
    REQUIRE(vecs[k].size() == 32);
    double total = 0.0;
    for (double x : vecs[k]) total += x;
    CHECK(close_rel(total, np.relev.at(layer, pos), 1e-9, 1e-12));
    const auto h = np.states.row(layer, pos);
    const auto g = np.relev.grad_row(layer, pos);
    for (std::size_t e = 0; e < 32; ++e) CHECK(vecs[k][e] == h[e] * g[e]);
  }
  CHECK(kind_of([&] { refine_subgraph(*model, c, rules, {{4, 0}}); }) == ErrorKind::input);
  CHECK(kind_of([&] { refine_subgraph(*model, c, rules, {{-2, 0}}); }) == ErrorKind::input);
  CHECK(kind_of([&] { refine_subgraph(*model, c, rules, {{0, 9}}); }) == ErrorKind::input);

  // One hidden dimension: the vector is the scalar.
  NodePass tiny;
  tiny.states.num_slots = tiny.relev.num_slots = 2;
  tiny.states.seq_len = tiny.relev.seq_len = 3;
  tiny.states.hidden = tiny.relev.hidden = 1;
  tiny.states.h = Tensor({2, 3, 1}, {1, 2, 3, 4, 5, 6});
  tiny.relev.grads = Tensor({2, 3, 1}, {0.5, -1, 2, 0, 3, -0.25});
  tiny.relev.scalar = Tensor({2, 3}, {0.5, -2, 6, 0, 15, -1.5});
  const auto one = refine_nodes(tiny, {{-1, 2}, {0, 1}});
  CHECK(one[0] == std::vector<double>{tiny.relev.at(-1, 2)});
  CHECK(one[1] == std::vector<double>{tiny.relev.at(0, 1)});
}

TEST_CASE("graph serialization") {
  const auto model = make_toy_model();
  const ContrastCase c = case_of_length(*model, 8);
  const RuleSet rules = rules_for(RuleVariant::gradient);
  const auto pairs = default_layer_pairs(model->config());
  const AttributionGraph g = build_graph(*model, c, rules, pairs, PruneConfig{}, BatchPlan::default_for(8));
  const std::string text = serialize_graph(g);
  CHECK(deserialize_graph(text) == g);
  CHECK(serialize_graph(deserialize_graph(text)) == text);
  CHECK(json::parse(text).at("schema_version") == 1);

  PruneConfig strict;
  strict.node_threshold = 1e12;
  const AttributionGraph empty = build_graph(*model, c, rules, pairs, strict, BatchPlan::default_for(8));
  const AttributionGraph back = deserialize_graph(serialize_graph(empty));
  CHECK(back.flags.empty);
  CHECK(back.flags.target_reinstated);
  CHECK(back == empty);

  CHECK(kind_of([] { deserialize_graph("{"); }) == ErrorKind::malformed);
  CHECK(kind_of([] { deserialize_graph("{}"); }) == ErrorKind::malformed);
  json broken = json::parse(text);
  broken["rule_variant"] = "shapley";
  CHECK(kind_of([&] { deserialize_graph(broken.dump()); }) == ErrorKind::malformed);
  broken = json::parse(text);
  broken["schema_version"] = 2;
  CHECK(kind_of([&] { deserialize_graph(broken.dump()); }) == ErrorKind::malformed);
  broken = json::parse(text);
  broken["edges"].push_back({{"s", 0}, {"i", 99}, {"t", 1}, {"j", 0}, {"w", 1.0}});
  CHECK(kind_of([&] { deserialize_graph(broken.dump()); }) == ErrorKind::malformed);
}

TEST_CASE("cross-implementation graph fixture") {
  const json counts = json::parse(read_file("fixtures/graph_fixture_counts.json"));
  const AttributionGraph g = deserialize_graph(read_file("fixtures/graph_fixture.json"));
  CHECK(g.nodes.size() == counts.at("nodes").get<std::size_t>());
  CHECK(g.edges.size() == counts.at("edges").get<std::size_t>());
  CHECK(g.nodes.size() == 8);
  CHECK(g.edges.size() == 7);
  CHECK(connected_subgraph(g) == g);

  const AttributionGraph full = deserialize_graph(read_file("fixtures/graph_fixture_unreduced.json"));
  CHECK(full.nodes.size() == counts.at("unreduced_nodes").get<std::size_t>());
  CHECK(full.edges.size() == counts.at("unreduced_edges").get<std::size_t>());
  AttributionGraph reduced = connected_subgraph(full);
  reduced.case_id = g.case_id;
  CHECK(reduced == g);
}
