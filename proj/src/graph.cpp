// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <exception>
#include <functional>
#include <map>
#include <thread>

#include "attrigraph/error.hpp"
#include "attrigraph/json_io.hpp"

namespace attrigraph {

double NodeRelevances::at(int layer, std::size_t pos) const {
  const std::size_t s = LayerStates::slot(layer);
  require(layer >= -1 && s < num_slots && pos < seq_len, ErrorKind::input,
          "node (" + std::to_string(layer) + ", " + std::to_string(pos) + ") out of range");
  return scalar[s * seq_len + pos];
}

std::span<const double> NodeRelevances::grad_row(int layer, std::size_t pos) const {
  const std::size_t s = LayerStates::slot(layer);
  require(layer >= -1 && s < num_slots && pos < seq_len, ErrorKind::input,
          "node (" + std::to_string(layer) + ", " + std::to_string(pos) + ") out of range");
  return grads.data().subspan((s * seq_len + pos) * hidden, hidden);
}

NodePass node_pass(const ModelBundle& model, const ContrastCase& c, const RuleSet& rules) {
  ObjectivePass pass = objective_pass(model, c, rules);
  NodePass out;
  out.states = std::move(pass.forward.states);
  NodeRelevances& r = out.relev;
  r.num_slots = out.states.num_slots;
  r.seq_len = out.states.seq_len;
  r.hidden = out.states.hidden;
  r.delta_logit = pass.delta_logit;
  r.grads = std::move(pass.grads);
  r.scalar = Tensor({r.num_slots, r.seq_len});
  const double* h = out.states.h.data().data();
  const double* g = r.grads.data().data();
  for (std::size_t row = 0; row < r.num_slots * r.seq_len; ++row) {
    double acc = 0.0;
    for (std::size_t e = 0; e < r.hidden; ++e) acc += h[row * r.hidden + e] * g[row * r.hidden + e];
    r.scalar[row] = acc;
  }
  return out;
}

BatchPlan BatchPlan::default_for(std::size_t count) {
  BatchPlan plan;
  plan.batch = std::clamp<std::size_t>(count, 1, 8);
  return plan;
}

std::vector<std::vector<std::size_t>> BatchPlan::chunks(
    const std::vector<std::size_t>& targets) const {
  require(batch >= 1, ErrorKind::input, "batch size must be at least 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t k = 0; k < targets.size(); k += batch)
    out.emplace_back(targets.begin() + static_cast<std::ptrdiff_t>(k),
                     targets.begin() + static_cast<std::ptrdiff_t>(std::min(k + batch, targets.size())));
  return out;
}

namespace {

void check_edge_request(const ModelBundle& model, const LayerStates& states,
                        const NodeRelevances& relev, int s, int t,
                        const std::vector<std::size_t>& targets) {
  const int L = static_cast<int>(model.config().num_layers);
  require(s < t, ErrorKind::input,
          "layer pair (" + std::to_string(s) + ", " + std::to_string(t) + ") needs s < t");
  require(s >= -1 && t <= L - 1, ErrorKind::input,
          "layer pair (" + std::to_string(s) + ", " + std::to_string(t) + ") outside the model");
  require(relev.seq_len == states.seq_len && relev.num_slots == states.num_slots,
          ErrorKind::input, "node relevances do not match the layer states");
  std::vector<bool> seen(states.seq_len, false);
  for (std::size_t j : targets) {
    require(j < states.seq_len, ErrorKind::input,
            "target position " + std::to_string(j) + " outside the sequence");
    require(!seen[j], ErrorKind::input, "duplicate target position " + std::to_string(j));
    seen[j] = true;
  }
}

// A[j, i] = sum_e H[i, e] * grad[i, e] for one target row.
void write_row(Tensor& A, std::size_t j, const Tensor& H, const double* grad) {
  const std::size_t n = H.dim(0), d = H.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t e = 0; e < d; ++e) acc += H[i * d + e] * grad[i * d + e];
    A[j * n + i] = acc;
  }
}

}  // namespace

InteractionMatrix edge_matrix(const ModelBundle& model, const LayerStates& states,
                              const NodeRelevances& relev, int s, int t,
                              const std::vector<std::size_t>& targets, const BatchPlan& plan,
                              const RuleSet& rules) {
  check_edge_request(model, states, relev, s, t, targets);
  rules.validate();
  const std::size_t n = states.seq_len, d = states.hidden;
  const Tensor H = states.layer_tensor(s);

  InteractionMatrix out;
  out.s = s;
  out.t = t;
  out.A = Tensor({n, n});
  const std::uint64_t calls_before = backward_call_count();

  if (plan.replication == Replication::shared) {
    Tape tape;
    const NodeId x = tape.input({n, d});
    const NodeId y = append_blocks(tape, model, x, s + 1, t);
    const Tensor inputs[] = {H};
    const NodeId keep[] = {x};
    for (const auto& chunk : plan.chunks(targets)) {
      // Every replica of H^(s) runs the same forward, so one evaluation
      // serves the whole chunk; the B cotangents ride a leading axis.
      const Activations acts = forward(tape, inputs);
      const std::size_t b = chunk.size();
      Tensor seed({b, n, d});
      for (std::size_t k = 0; k < b; ++k) {
        const auto g = relev.grad_row(t, chunk[k]);
        std::copy(g.begin(), g.end(), seed.data().begin() + static_cast<std::ptrdiff_t>((k * n + chunk[k]) * d));
      }
      const Gradients grads = backward(tape, acts, y, seed, rules, keep);
      const double* gx = grads.at(x).data().data();
      for (std::size_t k = 0; k < b; ++k) write_row(out.A, chunk[k], H, gx + k * n * d);
    }
  } else {
    std::map<std::size_t, std::pair<Tape, std::pair<NodeId, NodeId>>> tapes;
    for (const auto& chunk : plan.chunks(targets)) {
      const std::size_t b = chunk.size();
      auto it = tapes.find(b);
      if (it == tapes.end()) {
        Tape tape;
        const NodeId x = tape.input({b, n, d});
        const NodeId y = append_blocks(tape, model, x, s + 1, t);
        it = tapes.emplace(b, std::make_pair(std::move(tape), std::make_pair(x, y))).first;
      }
      const Tape& tape = it->second.first;
      const auto [x, y] = it->second.second;
      Tensor batch({b, n, d});
      for (std::size_t k = 0; k < b; ++k)
        std::copy(H.data().begin(), H.data().end(),
                  batch.data().begin() + static_cast<std::ptrdiff_t>(k * n * d));
      const Tensor inputs[] = {std::move(batch)};
      const Activations acts = forward(tape, inputs);
      Tensor seed({b, n, d});
      for (std::size_t k = 0; k < b; ++k) {
        const auto g = relev.grad_row(t, chunk[k]);
        std::copy(g.begin(), g.end(), seed.data().begin() + static_cast<std::ptrdiff_t>((k * n + chunk[k]) * d));
      }
      const NodeId keep[] = {x};
      const Gradients grads = backward(tape, acts, y, seed, rules, keep);
      const double* gx = grads.at(x).data().data();
      for (std::size_t k = 0; k < b; ++k) write_row(out.A, chunk[k], H, gx + k * n * d);
    }
  }
  out.backward_calls = backward_call_count() - calls_before;
  return out;
}

InteractionMatrix edge_matrix_naive(const ModelBundle& model, const LayerStates& states,
                                    const NodeRelevances& relev, int s, int t,
                                    const std::vector<std::size_t>& targets,
                                    const RuleSet& rules) {
  check_edge_request(model, states, relev, s, t, targets);
  const std::size_t n = states.seq_len, d = states.hidden;
  const Tensor H = states.layer_tensor(s);
  Tape tape;
  const NodeId x = tape.input({n, d});
  const NodeId y = append_blocks(tape, model, x, s + 1, t);
  InteractionMatrix out;
  out.s = s;
  out.t = t;
  out.A = Tensor({n, n});
  const std::uint64_t calls_before = backward_call_count();
  for (std::size_t j : targets) {
    const Tensor inputs[] = {H};
    const Activations acts = forward(tape, inputs);
    Tensor seed({n, d});
    const auto g = relev.grad_row(t, j);
    std::copy(g.begin(), g.end(), seed.data().begin() + static_cast<std::ptrdiff_t>(j * d));
    const Gradients grads = backward(tape, acts, y, seed, rules);
    write_row(out.A, j, H, grads.at(x).data().data());
  }
  out.backward_calls = backward_call_count() - calls_before;
  return out;
}

std::vector<LayerPair> default_layer_pairs(const ModelConfig& config) {
  std::vector<LayerPair> pairs;
  for (int l = -1; l + 1 < static_cast<int>(config.num_layers); ++l) pairs.emplace_back(l, l + 1);
  return pairs;
}

void validate_layer_pairs(const std::vector<LayerPair>& pairs, const ModelConfig& config) {
  require(!pairs.empty(), ErrorKind::input, "no layer pairs requested");
  const int L = static_cast<int>(config.num_layers);
  for (const auto& [s, t] : pairs)
    require(s >= -1 && s < t && t <= L - 1, ErrorKind::input,
            "invalid layer pair (" + std::to_string(s) + ", " + std::to_string(t) + ")");
}

std::string_view to_string(PruneMode mode) {
  return mode == PruneMode::global ? "global" : "cumulative";
}

PruneMode parse_prune_mode(std::string_view text) {
  if (text == "global") return PruneMode::global;
  if (text == "cumulative") return PruneMode::cumulative;
  fail(ErrorKind::input, "unknown prune mode '" + std::string(text) + "'");
}

void PruneConfig::validate() const {
  if (mode == PruneMode::global)
    require(std::isfinite(tau) && tau > 0.0, ErrorKind::input, "tau must be positive");
  else
    require(p > 0.0 && p <= 1.0, ErrorKind::input, "p must lie in (0, 1]");
  require(std::isfinite(node_threshold) && node_threshold >= 0.0, ErrorKind::input,
          "node_threshold must be non-negative");
}

CumulativeCut cumulative_cut(std::vector<double> magnitudes, double p) {
  require(p > 0.0 && p <= 1.0, ErrorKind::input, "p must lie in (0, 1]");
  std::erase_if(magnitudes, [](double a) { return !(std::abs(a) > 0.0); });
  for (double& a : magnitudes) a = std::abs(a);
  std::sort(magnitudes.begin(), magnitudes.end(), std::greater<>());
  CumulativeCut cut;
  for (double a : magnitudes) cut.total_mass += a;
  if (magnitudes.empty()) return cut;
  const double goal = p * cut.total_mass;
  double prefix = 0.0;
  for (std::size_t k = 0; k < magnitudes.size(); ++k) {
    prefix += magnitudes[k];
    if (prefix >= goal) {
      cut.k_star = k + 1;
      cut.tau = magnitudes[k];
      return cut;
    }
  }
  // Unreachable for p <= 1: the full prefix is the total.
  cut.k_star = magnitudes.size();
  cut.tau = magnitudes.back();
  return cut;
}

namespace {

PruneResult select(const InteractionMatrix& m, const std::function<bool(double)>& keep) {
  PruneResult out;
  const std::size_t n = m.A.dim(0);
  std::vector<double> kept;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::abs(m.A[j * n + i]);
      if (a > 0.0 && keep(a)) {
        out.retained.emplace_back(j, i);
        kept.push_back(a);
      }
    }
  // Summed largest first, the order the total mass uses.
  std::sort(kept.begin(), kept.end(), std::greater<>());
  for (double a : kept) out.retained_mass += a;
  return out;
}

}  // namespace

PruneResult prune_cumulative(const InteractionMatrix& m, double p) {
  const CumulativeCut cut = cumulative_cut(m.A.values(), p);
  if (!cut.tau) {
    PruneResult empty;
    return empty;
  }
  const double tau = *cut.tau;
  PruneResult out = select(m, [tau](double a) { return a >= tau; });
  out.tau = cut.tau;
  out.k_star = cut.k_star;
  out.total_mass = cut.total_mass;
  return out;
}

PruneResult prune_global(const InteractionMatrix& m, double tau) {
  require(tau > 0.0, ErrorKind::input, "tau must be positive");
  PruneResult out = select(m, [tau](double a) { return a > tau; });
  out.tau = tau;
  std::vector<double> all;
  for (double a : m.A.data())
    if (a != 0.0) all.push_back(std::abs(a));
  std::sort(all.begin(), all.end(), std::greater<>());
  for (double a : all) out.total_mass += a;
  return out;
}

const GraphNode* AttributionGraph::find_node(int layer, std::size_t pos) const {
  auto it = std::lower_bound(nodes.begin(), nodes.end(), std::make_pair(layer, pos),
                             [](const GraphNode& n, const std::pair<int, std::size_t>& key) {
                               return std::make_pair(n.layer, n.pos) < key;
                             });
  return it != nodes.end() && it->layer == layer && it->pos == pos ? &*it : nullptr;
}

LayerMatrices compute_layer_matrices(const ModelBundle& model, const ContrastCase& c,
                                     const RuleSet& rules, const std::vector<LayerPair>& pairs,
                                     const BatchPlan& plan, std::size_t workers) {
  validate_layer_pairs(pairs, model.config());
  require(plan.batch >= 1, ErrorKind::input, "batch size must be at least 1");
  NodePass pass = node_pass(model, c, rules);
  std::vector<std::size_t> targets(c.size());
  for (std::size_t j = 0; j < targets.size(); ++j) targets[j] = j;

  LayerMatrices out;
  out.matrices.resize(pairs.size());
  auto run = [&](std::size_t k) {
    out.matrices[k] = edge_matrix(model, pass.states, pass.relev, pairs[k].first,
                                  pairs[k].second, targets, plan, rules);
  };
  workers = std::clamp<std::size_t>(workers, 1, pairs.size());
  if (workers == 1) {
    for (std::size_t k = 0; k < pairs.size(); ++k) run(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k; (k = next++) < pairs.size();) run(k);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  out.relev = std::move(pass.relev);
  return out;
}

AttributionGraph assemble_graph(const LayerMatrices& lm, const ContrastCase& c,
                                RuleVariant variant, const PruneConfig& prune) {
  prune.validate();
  const NodeRelevances& r = lm.relev;
  require(c.size() == r.seq_len, ErrorKind::input, "case does not match the node relevances");
  AttributionGraph g;
  g.case_id = c.case_id;
  g.variant = variant;
  g.prune = prune;
  const int last = r.last_layer();
  g.target = {last, c.position, r.at(last, c.position)};

  auto kept = [&](int layer, std::size_t pos) {
    return std::abs(r.at(layer, pos)) > prune.node_threshold;
  };
  std::vector<bool> layer_used(r.num_slots, false);
  for (const InteractionMatrix& m : lm.matrices) {
    g.layer_pairs.emplace_back(m.s, m.t);
    layer_used[LayerStates::slot(m.s)] = layer_used[LayerStates::slot(m.t)] = true;
    const PruneResult pr = prune.mode == PruneMode::cumulative ? prune_cumulative(m, prune.p)
                                                               : prune_global(m, prune.tau);
    for (const auto& [j, i] : pr.retained)
      if (kept(m.s, i) && kept(m.t, j)) g.edges.push_back({m.s, i, m.t, j, m.at(j, i)});
  }
  for (std::size_t slot = 0; slot < r.num_slots; ++slot) {
    if (!layer_used[slot]) continue;
    const int layer = static_cast<int>(slot) - 1;
    for (std::size_t pos = 0; pos < r.seq_len; ++pos)
      if (kept(layer, pos)) g.nodes.push_back({layer, pos, r.at(layer, pos)});
  }
  return connected_subgraph(g);
}

AttributionGraph build_graph(const ModelBundle& model, const ContrastCase& c,
                             const RuleSet& rules, const std::vector<LayerPair>& pairs,
                             const PruneConfig& prune, const BatchPlan& plan) {
  prune.validate();
  return assemble_graph(compute_layer_matrices(model, c, rules, pairs, plan), c, rules.variant,
                        prune);
}

AttributionGraph connected_subgraph(const AttributionGraph& graph) {
  using Key = std::pair<int, std::size_t>;
  AttributionGraph out = graph;
  std::map<Key, GraphNode> nodes;
  for (const GraphNode& n : graph.nodes) nodes[{n.layer, n.pos}] = n;
  const Key target{graph.target.layer, graph.target.pos};
  if (!nodes.count(target)) {
    nodes[target] = graph.target;
    out.flags.target_reinstated = true;
  }

  std::map<Key, std::vector<Key>> incoming;
  for (const GraphEdge& e : graph.edges) {
    const Key src{e.s, e.i}, dst{e.t, e.j};
    if (nodes.count(src) && nodes.count(dst)) incoming[dst].push_back(src);
  }
  std::map<Key, bool> reached{{target, true}};
  std::deque<Key> queue{target};
  while (!queue.empty()) {
    const Key k = queue.front();
    queue.pop_front();
    for (const Key& src : incoming[k])
      if (!reached[src]) {
        reached[src] = true;
        queue.push_back(src);
      }
  }

  out.nodes.clear();
  for (const auto& [k, n] : nodes)
    if (reached[k]) out.nodes.push_back(n);
  out.edges.clear();
  for (const GraphEdge& e : graph.edges)
    if (reached[{e.s, e.i}] && reached[{e.t, e.j}] && nodes.count({e.s, e.i}))
      out.edges.push_back(e);
  std::sort(out.edges.begin(), out.edges.end(), [](const GraphEdge& a, const GraphEdge& b) {
    return std::tie(a.s, a.t, a.j, a.i) < std::tie(b.s, b.t, b.j, b.i);
  });
  out.flags.empty = out.edges.empty();
  return out;
}

std::vector<std::vector<double>> refine_nodes(const NodePass& pass,
                                              const std::vector<std::pair<int, std::size_t>>& nodes) {
  std::vector<std::vector<double>> out;
  for (const auto& [layer, pos] : nodes) {
    const auto g = pass.relev.grad_row(layer, pos);
    const auto h = pass.states.row(layer, pos);
    std::vector<double> v(h.size());
    for (std::size_t e = 0; e < h.size(); ++e) v[e] = h[e] * g[e];
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::vector<double>> refine_subgraph(const ModelBundle& model, const ContrastCase& c,
                                                 const RuleSet& rules,
                                                 const std::vector<std::pair<int, std::size_t>>& nodes) {
  const int L = static_cast<int>(model.config().num_layers);
  for (const auto& [layer, pos] : nodes)
    require(layer >= -1 && layer < L && pos < c.size(), ErrorKind::input,
            "unknown node (" + std::to_string(layer) + ", " + std::to_string(pos) + ")");
  return refine_nodes(node_pass(model, c, rules), nodes);
}

std::string serialize_graph(const AttributionGraph& g) {
  json nodes = json::array(), edges = json::array(), pairs = json::array();
  for (const GraphNode& n : g.nodes)
    nodes.push_back({{"layer", n.layer}, {"pos", n.pos}, {"relevance", n.relevance}});
  for (const GraphEdge& e : g.edges)
    edges.push_back({{"s", e.s}, {"i", e.i}, {"t", e.t}, {"j", e.j}, {"w", e.w}});
  for (const auto& [s, t] : g.layer_pairs) pairs.push_back({s, t});
  const json j = {
      {"schema_version", kSchemaVersion},
      {"case_id", g.case_id},
      {"rule_variant", std::string(to_string(g.variant))},
      {"prune",
       {{"mode", std::string(to_string(g.prune.mode))},
        {"tau", g.prune.tau},
        {"p", g.prune.p},
        {"node_threshold", g.prune.node_threshold}}},
      {"layer_pairs", pairs},
      {"target", {{"layer", g.target.layer}, {"pos", g.target.pos}, {"relevance", g.target.relevance}}},
      {"nodes", nodes},
      {"edges", edges},
      {"flags", {{"empty", g.flags.empty}, {"target_reinstated", g.flags.target_reinstated}}}};
  return dump_stable(j);
}

AttributionGraph deserialize_graph(const std::string& text) {
  AttributionGraph g;
  try {
    const json j = json::parse(text);
    require(j.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::malformed,
            "unsupported graph schema_version");
    g.case_id = j.at("case_id").get<std::string>();
    g.variant = parse_rule_variant(j.at("rule_variant").get<std::string>());
    const json& p = j.at("prune");
    g.prune.mode = parse_prune_mode(p.at("mode").get<std::string>());
    g.prune.tau = p.at("tau").get<double>();
    g.prune.p = p.at("p").get<double>();
    g.prune.node_threshold = p.at("node_threshold").get<double>();
    for (const json& lp : j.at("layer_pairs"))
      g.layer_pairs.emplace_back(lp.at(0).get<int>(), lp.at(1).get<int>());
    const json& t = j.at("target");
    g.target = {t.at("layer").get<int>(), t.at("pos").get<std::size_t>(),
                t.at("relevance").get<double>()};
    for (const json& n : j.at("nodes"))
      g.nodes.push_back({n.at("layer").get<int>(), n.at("pos").get<std::size_t>(),
                         n.at("relevance").get<double>()});
    for (const json& e : j.at("edges"))
      g.edges.push_back({e.at("s").get<int>(), e.at("i").get<std::size_t>(), e.at("t").get<int>(),
                         e.at("j").get<std::size_t>(), e.at("w").get<double>()});
    const json& f = j.at("flags");
    g.flags = {f.at("empty").get<bool>(), f.at("target_reinstated").get<bool>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::malformed, std::string("malformed graph: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::malformed, std::string("malformed graph: ") + e.what());
  }
  std::sort(g.nodes.begin(), g.nodes.end(), [](const GraphNode& a, const GraphNode& b) {
    return std::tie(a.layer, a.pos) < std::tie(b.layer, b.pos);
  });
  for (std::size_t k = 1; k < g.nodes.size(); ++k)
    require(std::tie(g.nodes[k - 1].layer, g.nodes[k - 1].pos) !=
                std::tie(g.nodes[k].layer, g.nodes[k].pos),
            ErrorKind::malformed, "duplicate graph node");
  for (const GraphEdge& e : g.edges)
    require(g.find_node(e.s, e.i) && g.find_node(e.t, e.j), ErrorKind::malformed,
            "edge endpoint missing from the node list");
  return g;
}

}  // namespace attrigraph
