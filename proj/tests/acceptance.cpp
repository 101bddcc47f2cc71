// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attrigraph/analysis.hpp"
#include "attrigraph/graph.hpp"
#include "attrigraph/json_io.hpp"
#include "attrigraph/service.hpp"
#include "attrigraph/tape.hpp"

using namespace attrigraph;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

// Each check returns a one-line detail; `ok` is set by the check.
void criterion(const std::string& name, const std::function<std::string(bool&)>& check) {
  bool ok = false;
  std::string detail;
  try {
    detail = check(ok);
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  if (!ok) ++failures;
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ContrastCase case_of_length(const ModelBundle& model, std::size_t n, std::uint64_t seed) {
  SyntheticOptions so;
  so.count = 1;
  so.min_len = so.max_len = n;
  so.seed = seed;
  return make_synthetic_cases(model, so).at(0);
}

RuleSet rules_for(RuleVariant v) {
  RuleSet r;
  r.variant = v;
  return r;
}

// Batched edge matrices against the one-target-per-call loop.
struct EquivalenceRun {
  double worst = 0.0;
  std::size_t comparisons = 0;
  std::size_t call_mismatches = 0;
  std::size_t call_checks = 0;
  double seconds = 0.0;
};

EquivalenceRun run_equivalence(const ModelBundle& model) {
  EquivalenceRun out;
  const auto t0 = Clock::now();
  const RuleSet rules;
  for (std::size_t n : {16u, 64u, 128u}) {
    const ContrastCase c = case_of_length(model, n, 100 + n);
    const NodePass np = node_pass(model, c, rules);
    std::vector<std::size_t> targets(n);
    for (std::size_t j = 0; j < n; ++j) targets[j] = j;
    for (const auto& [s, t] : default_layer_pairs(model.config())) {
      const InteractionMatrix naive = edge_matrix_naive(model, np.states, np.relev, s, t, targets, rules);
      ++out.call_checks;
      if (naive.backward_calls != n) ++out.call_mismatches;
      for (std::size_t b : {2u, 4u, 8u}) {
        for (Replication rep : {Replication::shared, Replication::materialized}) {
          BatchPlan plan;
          plan.batch = b;
          plan.replication = rep;
          const InteractionMatrix m = edge_matrix(model, np.states, np.relev, s, t, targets, plan, rules);
          out.worst = std::max(out.worst, max_abs_diff(m.A, naive.A));
          ++out.comparisons;
          ++out.call_checks;
          if (m.backward_calls != (n + b - 1) / b) ++out.call_mismatches;
        }
      }
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

// Independent cumulative-mass oracle over a flat list of values.
struct PruneOracle {
  std::set<std::size_t> retained;
  std::optional<double> tau;
  std::size_t k_star = 0;
};

PruneOracle prune_oracle(const std::vector<double>& a, double p) {
  std::vector<double> mags;
  for (double v : a)
    if (v != 0.0) mags.push_back(std::abs(v));
  std::sort(mags.rbegin(), mags.rend());
  PruneOracle o;
  if (mags.empty()) return o;
  double total = 0.0;
  for (double m : mags) total += m;
  double prefix = 0.0;
  for (std::size_t k = 0; k < mags.size(); ++k) {
    prefix += mags[k];
    if (prefix >= p * total) {
      o.k_star = k + 1;
      o.tau = mags[k];
      break;
    }
  }
  if (!o.tau) {  // rounding left the full sum just short of p * total
    o.k_star = mags.size();
    o.tau = mags.back();
  }
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k] != 0.0 && std::abs(a[k]) >= *o.tau) o.retained.insert(k);
  return o;
}

std::set<std::size_t> flat(const std::vector<Entry>& entries, std::size_t n) {
  std::set<std::size_t> out;
  for (const auto& [j, i] : entries) out.insert(j * n + i);
  return out;
}

using NodeKey = std::pair<int, std::size_t>;

AttributionGraph random_graph(std::mt19937_64& rng) {
  const int L = 2 + static_cast<int>(rng() % 4);
  const std::size_t n = 2 + rng() % 6;
  AttributionGraph g;
  g.target = {L - 1, rng() % n, 1.0};
  std::vector<NodeKey> present;
  for (int l = -1; l < L; ++l)
    for (std::size_t pos = 0; pos < n; ++pos)
      if (rng() % 3 != 0) {
        g.nodes.push_back({l, pos, static_cast<double>(rng() % 100) / 10.0 - 5.0});
        present.emplace_back(l, pos);
      }
  // The target is usually present; sometimes it is not, to exercise reinstatement.
  const bool keep_target = rng() % 8 != 0;
  const NodeKey tk{g.target.layer, g.target.pos};
  const bool has_target = std::find(present.begin(), present.end(), tk) != present.end();
  if (keep_target && !has_target) {
    g.nodes.push_back(g.target);
    present.push_back(tk);
  } else if (!keep_target && has_target) {
    g.nodes.erase(std::remove_if(g.nodes.begin(), g.nodes.end(),
                                 [&](const GraphNode& x) { return NodeKey{x.layer, x.pos} == tk; }),
                  g.nodes.end());
    present.erase(std::find(present.begin(), present.end(), tk));
  }
  std::set<std::tuple<int, std::size_t, int, std::size_t>> seen;
  const std::size_t edges = present.size() * (1 + rng() % 3) / 2;
  for (std::size_t e = 0; e < edges && present.size() >= 2; ++e) {
    const NodeKey a = present[rng() % present.size()], b = present[rng() % present.size()];
    if (a.first >= b.first) continue;
    if (!seen.insert({a.first, a.second, b.first, b.second}).second) continue;
    g.edges.push_back({a.first, a.second, b.first, b.second, static_cast<double>(rng() % 9) - 4.0});
  }
  std::sort(g.nodes.begin(), g.nodes.end(),
            [](const GraphNode& x, const GraphNode& y) { return std::tie(x.layer, x.pos) < std::tie(y.layer, y.pos); });
  std::sort(g.edges.begin(), g.edges.end(), [](const GraphEdge& x, const GraphEdge& y) {
    return std::tie(x.s, x.t, x.j, x.i) < std::tie(y.s, y.t, y.j, y.i);
  });
  return g;
}

// Reverse reachability by fixpoint iteration.
std::set<NodeKey> reaching_target(const AttributionGraph& g) {
  std::set<NodeKey> reach{{g.target.layer, g.target.pos}};
  for (bool grew = true; grew;) {
    grew = false;
    for (const GraphEdge& e : g.edges)
      if (reach.count({e.t, e.j}) && reach.insert({e.s, e.i}).second) grew = true;
  }
  return reach;
}

double pairwise_variance(const std::vector<double>& v) {
  double s = 0.0;
  for (double a : v)
    for (double b : v) s += (a - b) * (a - b);
  return s / (2.0 * static_cast<double>(v.size() * v.size()));
}

double gini_pairwise(const std::vector<double>& v) {
  double diff = 0.0, total = 0.0;
  for (double a : v) {
    total += std::abs(a);
    for (double b : v) diff += std::abs(std::abs(a) - std::abs(b));
  }
  return diff / (2.0 * static_cast<double>(v.size()) * total);
}

}  // namespace

int main() {
  const ModelPtr toy = make_toy_model();

  EquivalenceRun eq;
  criterion("batch-packed equivalence", [&](bool& ok) {
    eq = run_equivalence(*toy);
    ok = eq.worst <= 1e-8 && eq.seconds < 60.0 && eq.comparisons == 3 * 4 * 3 * 2;
    return std::to_string(eq.comparisons) + " matrices (n in {16,64,128}, B in {2,4,8}, shared and materialized)" +
           ", max |diff| " + fmt("%.3g", eq.worst) + ", " + fmt("%.1f", eq.seconds) + " s";
  });

  criterion("backward-call accounting", [&](bool& ok) {
    ok = eq.call_checks > 0 && eq.call_mismatches == 0;
    return std::to_string(eq.call_checks - eq.call_mismatches) + "/" + std::to_string(eq.call_checks) +
           " layer pairs used exactly ceil(n/B) backward calls";
  });

  criterion("efficiency direction", [&](bool& ok) {
    const std::size_t n = 252;
    const ContrastCase c = case_of_length(*toy, n, 252);
    const auto pairs = default_layer_pairs(toy->config());
    const RuleSet rules;
    std::map<std::size_t, double> best;
    std::map<std::size_t, std::size_t> calls;
    for (int rep = 0; rep < 2; ++rep)
      for (std::size_t b : {1u, 8u}) {
        BatchPlan plan;
        plan.batch = b;
        const auto t0 = Clock::now();
        const LayerMatrices lm = compute_layer_matrices(*toy, c, rules, pairs, plan);
        const double secs = seconds_since(t0);
        best[b] = best.count(b) ? std::min(best[b], secs) : secs;
        calls[b] = 0;
        for (const InteractionMatrix& m : lm.matrices) calls[b] += m.backward_calls;
      }
    ok = best[8] < best[1] && calls[1] == pairs.size() * n && calls[8] == pairs.size() * ((n + 7) / 8);
    return "n=252: B=1 " + fmt("%.2f", best[1]) + " s / " + std::to_string(calls[1]) + " calls, B=8 " +
           fmt("%.2f", best[8]) + " s / " + std::to_string(calls[8]) + " calls";
  });

  criterion("linear exactness", [&](bool& ok) {
    std::mt19937_64 rng(4242);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0.0;
    std::size_t runs = 0;
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 2 + rng() % 6, d = 3 + rng() % 6, depth = 1 + rng() % 3, V = 5;
      auto rand_tensor = [&](Shape s) {
        Tensor t(std::move(s));
        for (double& v : t.data()) v = u(rng);
        return t;
      };
      const Tensor X = rand_tensor({n, d});
      std::vector<Tensor> W;
      for (std::size_t k = 0; k < depth; ++k) W.push_back(rand_tensor({d, d}));
      const Tensor U = rand_tensor({d, V});
      const std::size_t pos = rng() % n, tgt = rng() % V, con = (tgt + 1 + rng() % (V - 1)) % V;

      // Δℓ = (H[pos] · U[:, tgt]) - (H[pos] · U[:, con]) with H = X W_1 ... W_depth.
      std::vector<double> h(X.data().begin() + pos * d, X.data().begin() + (pos + 1) * d);
      for (const Tensor& w : W) {
        std::vector<double> next(d, 0.0);
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < d; ++b) next[b] += h[a] * w.at({a, b});
        h = next;
      }
      double delta = 0.0;
      for (std::size_t e = 0; e < d; ++e) delta += h[e] * (U.at({e, tgt}) - U.at({e, con}));

      Tape tape;
      const NodeId x = tape.input({n, d});
      NodeId y = x;
      for (const Tensor& w : W) y = tape.linear(y, tape.constant(w));
      auto sel = std::make_shared<Tensor>(Shape{n, d});
      for (std::size_t e = 0; e < d; ++e) sel->at({pos, e}) = U.at({e, tgt}) - U.at({e, con});
      const NodeId obj = tape.contract(y, sel);
      const Tensor inputs[] = {X};
      const Activations acts = forward(tape, inputs);
      for (RuleVariant v : {RuleVariant::attnlrp, RuleVariant::cplrp, RuleVariant::gradient}) {
        const Gradients g = backward(tape, acts, obj, Tensor::scalar(1.0), rules_for(v));
        const Tensor rel = relevance(X, g.at(x));
        double total = 0.0;
        for (double r : rel.data()) total += r;
        worst = std::max(worst, std::abs(total - delta) / std::max(std::abs(delta), 1e-300));
        ++runs;
      }
    }
    ok = worst <= 1e-9;
    return std::to_string(runs) + " (network, variant) runs, worst relative error " + fmt("%.3g", worst);
  });

  criterion("pruning properties", [&](bool& ok) {
    std::mt19937_64 rng(1000);
    std::size_t bad_cum = 0, bad_glob = 0, bad_mass = 0, bad_min = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng() % 12;
      std::vector<double> a(n * n);
      const int style = trial % 4;
      for (double& v : a) {
        const double r = std::uniform_real_distribution<double>(-1, 1)(rng);
        if (style == 0) v = r;
        else if (style == 1) v = std::round(r * 3) / 3;  // heavy ties
        else if (style == 2) v = rng() % 3 == 0 ? r : 0.0;  // sparse
        else v = (rng() % 2 ? 1.0 : -1.0) * 0.5;  // all magnitudes tied
      }
      InteractionMatrix m;
      m.s = 0;
      m.t = 1;
      m.A = Tensor({n, n}, a);
      const double p = trial % 10 == 0 ? 1.0 : std::uniform_real_distribution<double>(0.01, 1.0)(rng);
      const PruneResult got = prune_cumulative(m, p);
      const PruneOracle want = prune_oracle(a, p);
      if (flat(got.retained, n) != want.retained || got.tau != want.tau || got.k_star != want.k_star) ++bad_cum;

      // Masses summed in descending magnitude order, the order the cut is defined in.
      std::vector<double> all, mags;
      for (double v : a) all.push_back(std::abs(v));
      for (std::size_t k : want.retained) mags.push_back(std::abs(a[k]));
      std::sort(all.rbegin(), all.rend());
      std::sort(mags.rbegin(), mags.rend());
      double total = 0.0, kept = 0.0, before_last = 0.0;
      for (double v : all) total += v;
      for (std::size_t k = 0; k < mags.size(); ++k) {
        kept += mags[k];
        if (k + 1 < want.k_star) before_last += mags[k];
      }
      if (!want.retained.empty() && kept < p * total) ++bad_mass;
      if (!want.retained.empty() && got.retained_mass < p * got.total_mass) ++bad_mass;
      // Minimality: the prefix one shorter than k* misses the target mass.
      if (want.k_star > 0 && before_last >= p * total) ++bad_min;

      const double tau = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      std::set<std::size_t> strict;
      for (std::size_t k = 0; k < a.size(); ++k)
        if (std::abs(a[k]) > tau) strict.insert(k);
      if (flat(prune_global(m, tau).retained, n) != strict) ++bad_glob;
    }
    InteractionMatrix fx;
    fx.A = Tensor({2, 2}, {5, 3, 1, 1});
    const PruneResult hand = prune_cumulative(fx, 0.85);
    const bool hand_ok = hand.k_star == 3 && hand.tau == 1.0 && hand.retained.size() == 4;
    ok = bad_cum == 0 && bad_glob == 0 && bad_mass == 0 && bad_min == 0 && hand_ok;
    return "1000 matrices: cumulative mismatches " + std::to_string(bad_cum) + ", mass shortfalls " +
           std::to_string(bad_mass) + ", non-minimal " + std::to_string(bad_min) + ", global mismatches " +
           std::to_string(bad_glob) + "; {5,3,1,1} p=0.85 -> k*=" + std::to_string(hand.k_star) +
           " tau=" + fmt("%g", hand.tau.value_or(-1)) + " retained=" + std::to_string(hand.retained.size());
  });

  criterion("subgraph reachability", [&](bool& ok) {
    std::mt19937_64 rng(77);
    std::size_t mismatches = 0, unreachable = 0, reinstated = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const AttributionGraph g = random_graph(rng);
      const AttributionGraph sub = connected_subgraph(g);
      const std::set<NodeKey> reach = reaching_target(g);
      std::set<NodeKey> got_nodes;
      for (const GraphNode& x : sub.nodes) got_nodes.insert({x.layer, x.pos});
      std::set<NodeKey> want_nodes;
      for (const GraphNode& x : g.nodes)
        if (reach.count({x.layer, x.pos})) want_nodes.insert({x.layer, x.pos});
      want_nodes.insert({g.target.layer, g.target.pos});
      std::vector<GraphEdge> want_edges;
      for (const GraphEdge& e : g.edges)
        if (reach.count({e.t, e.j}) && reach.count({e.s, e.i})) want_edges.push_back(e);
      if (got_nodes != want_nodes || sub.edges != want_edges) ++mismatches;
      if (sub.flags.target_reinstated) ++reinstated;
      const std::set<NodeKey> sub_reach = reaching_target(sub);
      for (const NodeKey& k : got_nodes)
        if (!sub_reach.count(k)) ++unreachable;
    }
    ok = mismatches == 0 && unreachable == 0;
    return "100 graphs: " + std::to_string(mismatches) + " oracle mismatches, " + std::to_string(unreachable) +
           " retained nodes not reaching the target, " + std::to_string(reinstated) + " targets reinstated";
  });

  // The desk-scale pipeline: 20 synthetic cases, two seeded model variants.
  const auto t_pipeline = Clock::now();
  SyntheticOptions so;
  so.count = 20;
  so.seed = 2024;
  const std::vector<ContrastCase> cases = make_synthetic_cases(*toy, so);
  const ModelPtr variant = make_toy_model(11);
  PipelineOptions po;
  std::vector<CaseAnalysis> analyses;
  for (const ContrastCase& c : cases) analyses.push_back(run_case(*toy, c, po));
  const std::vector<RunData> runs{run_data("toy:7", *toy, cases, po.rules),
                                  run_data("toy:11", *variant, cases, po.rules)};
  std::vector<std::string> ids;
  for (const ContrastCase& c : cases) ids.push_back(c.case_id);
  const RunComparison cmp = compare_runs(ids, runs);
  const BatchReport report = batch_report(analyses, 3, 0, cmp);
  const std::string report_text = dump_stable(to_json(report));
  const double pipeline_seconds = seconds_since(t_pipeline);

  criterion("decomposition identity", [&](bool& ok) {
    double worst = 0.0, worst_r = 0.0;
    std::size_t layers = 0;
    const json parsed = json::parse(report_text);
    for (std::size_t k = 0; k < cases.size(); ++k) {
      const Decomposition d = decomposition_from_json(parsed.at("cases").at(k).at("decomposition"));
      const NodePass np = node_pass(*toy, cases[k], po.rules);
      for (const LayerComponents& lc : d.layers) {
        worst = std::max(worst, std::abs(lc.sb + lc.bos + lc.oc - lc.relevance));
        worst_r = std::max(worst_r, std::abs(lc.relevance - np.relev.at(lc.layer, cases[k].position)));
        ++layers;
      }
    }
    ok = layers > 0 && worst <= 1e-12 && worst_r <= 1e-12;
    return std::to_string(layers) + " (case, layer) rows after a JSON round-trip: max |SB+BOS+OC-R| " +
           fmt("%.3g", worst) + ", max |R - node pass| " + fmt("%.3g", worst_r);
  });

  criterion("profile normalization", [&](bool& ok) {
    const RelevanceProfile fixture = relevance_profile(std::vector<double>{0.66, 18.85});
    const double last = fixture.normalized.back();
    std::size_t checked = 0, bad = 0;
    for (const CaseAnalysis& a : analyses) {
      if (a.profile.degenerate) continue;
      ++checked;
      if (a.profile.normalized.front() != 0.0) ++bad;
    }
    ok = std::abs(last - 0.9650) <= 1e-4 && fixture.normalized.front() == 0.0 && checked > 0 && bad == 0;
    return "0.66 -> 18.85 gives " + fmt("%.6f", last) + "; R-hat(-1) = 0 in " +
           std::to_string(checked - bad) + "/" + std::to_string(checked) + " non-degenerate cases";
  });

  criterion("heatmap normalization", [&](bool& ok) {
    std::size_t heatmaps = 0, bad = 0;
    for (const ContrastCase& c : cases)
      for (RuleVariant v : {RuleVariant::attnlrp, RuleVariant::cplrp, RuleVariant::gradient}) {
        const Heatmap h = input_attribution(*toy, c, rules_for(v));
        if (h.degenerate) continue;
        ++heatmaps;
        double max_norm = 0.0, max_raw = 0.0;
        for (std::size_t i = 0; i < h.raw.size(); ++i) {
          if (h.special_mask[i]) continue;
          max_norm = std::max(max_norm, std::abs(h.normalized[i]));
          max_raw = std::max(max_raw, std::abs(h.raw[i]));
        }
        if (std::abs(max_norm - 1.0) > 1e-12 || h.normalizer != max_raw) ++bad;
      }
    // A dominant special token must not set the scale.
    const Heatmap special = make_heatmap({100.0, 2.0, -4.0}, {true, false, false}, 1.0);
    const bool excluded = special.normalizer == 4.0 && special.normalized[0] == 25.0;
    ok = heatmaps > 0 && bad == 0 && excluded;
    return std::to_string(heatmaps - bad) + "/" + std::to_string(heatmaps) +
           " heatmaps with max |normalized| = 1 over non-special tokens; special-token exclusion " +
           (excluded ? "holds" : "broken");
  });

  criterion("analysis oracles", [&](bool& ok) {
    std::mt19937_64 rng(555);
    std::normal_distribution<double> g;
    std::size_t bad_ari = 0, bad_det = 0, bad_var = 0, bad_gini = 0, bad_peak = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 6 + rng() % 20, k = 2 + rng() % 3;
      std::vector<std::size_t> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = i < k ? i : rng() % k;
      const AriResult ari = adjusted_rand_index(labels, labels);
      if (ari.degenerate || std::abs(ari.value - 1.0) > 1e-12) ++bad_ari;

      std::vector<std::vector<double>> pts(n, std::vector<double>(3));
      for (auto& p : pts)
        for (double& e : p) e = g(rng);
      const std::uint64_t seed = rng();
      const ClusterResult c1 = kmeans(pts, k, seed), c2 = kmeans(pts, k, seed);
      const Projection2D p1 = pca_2d(pts), p2 = pca_2d(pts);
      if (c1.assignments != c2.assignments || c1.centroids != c2.centroids || c1.inertia != c2.inertia ||
          p1.coords != p2.coords || p1.axes != p2.axes)
        ++bad_det;

      std::vector<double> f(n);
      for (double& x : f) x = g(rng);
      const VarianceRatio vr = variance_ratio(f, labels);
      double intra = 0.0;
      std::vector<double> means;
      for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> members;
        for (std::size_t i = 0; i < n; ++i)
          if (labels[i] == c) members.push_back(f[i]);
        intra += pairwise_variance(members);
        double m = 0.0;
        for (double x : members) m += x;
        means.push_back(m / static_cast<double>(members.size()));
      }
      intra /= static_cast<double>(k);
      if (std::abs(vr.intra - intra) > 1e-12 || std::abs(vr.inter - pairwise_variance(means)) > 1e-12) ++bad_var;

      if (std::abs(gini(f) - gini_pairwise(f)) > 1e-12) ++bad_gini;

      Decomposition d;
      const int L = 2 + static_cast<int>(rng() % 30);
      for (int l = -1; l < L; ++l)
        d.layers.push_back({l, 0, std::round(g(rng) * 4) / 4, std::round(g(rng) * 4) / 4, g(rng)});
      for (Component comp : {Component::sb, Component::bos, Component::oc}) {
        int best = -1;
        double best_delta = -1.0;
        for (int l = -1; l + 1 < L; ++l) {
          const double delta = std::abs(d.find(l + 1)->get(comp) - d.find(l)->get(comp));
          if (delta > best_delta) {
            best_delta = delta;
            best = l;
          }
        }
        if (peak_transition(d, comp) != best) ++bad_peak;
      }
    }
    ok = bad_ari + bad_det + bad_var + bad_gini + bad_peak == 0;
    return "50 trials each: ARI(identical) " + std::to_string(bad_ari) + " bad, kmeans/pca determinism " +
           std::to_string(bad_det) + " bad, variance ratio " + std::to_string(bad_var) + " bad, Gini " +
           std::to_string(bad_gini) + " bad, peak transition " + std::to_string(bad_peak) + " bad";
  });

  criterion("desk-scale pipeline", [&](bool& ok) {
    const bool clusters = report.profile_clusters && report.profile_clusters->k == 3 &&
                          report.composition_clusters && report.composition_clusters->k == 3;
    const bool complete = report.cases.size() == 20 && clusters && report.pca && report.ari &&
                          !report.variance_ratios.empty() && report.peaks.size() == 20 && report.comparison &&
                          report.comparison->run_ids.size() == 2 &&
                          report.comparison->rows.size() + report.comparison->excluded.size() == 20;
    std::size_t invariant_breaks = 0;
    for (const CaseAnalysis& a : report.cases) {
      for (const LayerComponents& lc : a.decomposition.layers)
        if (std::abs(lc.sb + lc.bos + lc.oc - lc.relevance) > 1e-12) ++invariant_breaks;
      if (!a.profile.degenerate && a.profile.normalized.front() != 0.0) ++invariant_breaks;
      if (a.sharpness.gini && (*a.sharpness.gini < 0.0 || *a.sharpness.gini > 1.0)) ++invariant_breaks;
      if (a.sharpness.concentration && (*a.sharpness.concentration < 0.0 || *a.sharpness.concentration > 1.0 + 1e-12))
        ++invariant_breaks;
    }
    const std::string again = dump_stable(to_json(batch_report(analyses, 3, 0, cmp)));
    ok = complete && invariant_breaks == 0 && again == report_text && pipeline_seconds < 300.0;
    return "20 cases, " + std::to_string(report.clustered.size()) + " clustered with k=3, comparison " +
           "toy:7 vs toy:11 over " + std::to_string(report.comparison ? report.comparison->rows.size() : 0) +
           " cases, " + std::to_string(invariant_breaks) + " invariant breaks, report " +
           (again == report_text ? "reproducible" : "NOT reproducible") + ", " + fmt("%.1f", pipeline_seconds) +
           " s";
  });

  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
