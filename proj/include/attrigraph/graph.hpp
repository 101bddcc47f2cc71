// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attrigraph/attribution.hpp"
#include "attrigraph/model.hpp"

namespace attrigraph {

/// Scalar relevance of every hidden state plus the cached gradients that seed
/// edge construction. Layer -1 is the embedding layer.
struct NodeRelevances {
  std::size_t num_slots = 0;
  std::size_t seq_len = 0;
  std::size_t hidden = 0;
  double delta_logit = 0.0;
  Tensor scalar;  // [(L+1) x n]
  Tensor grads;   // [(L+1) x n x d]

  double at(int layer, std::size_t pos) const;
  std::span<const double> grad_row(int layer, std::size_t pos) const;
  int last_layer() const { return static_cast<int>(num_slots) - 2; }
};

struct NodePass {
  LayerStates states;
  NodeRelevances relev;
};

NodePass node_pass(const ModelBundle& model, const ContrastCase& c, const RuleSet& rules);

/// A[j, i] is the relevance reaching h_t^(j) from h_s^(i).
struct InteractionMatrix {
  int s = -1;
  int t = 0;
  Tensor A;  // [n x n]
  std::size_t backward_calls = 0;

  double at(std::size_t j, std::size_t i) const { return A.at({j, i}); }
};

enum class Replication {
  shared,        // one forward per chunk; the B identical replicas share it
  materialized,  // an explicit [B x n x d] copy of H^(s) runs through F_{s->t}
};

struct BatchPlan {
  std::size_t batch = 8;
  Replication replication = Replication::shared;

  /// min(8, count), at least 1.
  static BatchPlan default_for(std::size_t count);
  std::vector<std::vector<std::size_t>> chunks(const std::vector<std::size_t>& targets) const;
  std::size_t calls_for(std::size_t count) const { return (count + batch - 1) / batch; }
};

InteractionMatrix edge_matrix(const ModelBundle& model, const LayerStates& states,
                              const NodeRelevances& relev, int s, int t,
                              const std::vector<std::size_t>& targets, const BatchPlan& plan,
                              const RuleSet& rules);

/// The unbatched reference: one forward and one backward per target.
InteractionMatrix edge_matrix_naive(const ModelBundle& model, const LayerStates& states,
                                    const NodeRelevances& relev, int s, int t,
                                    const std::vector<std::size_t>& targets,
                                    const RuleSet& rules);

using LayerPair = std::pair<int, int>;

/// (-1, 0), (0, 1), ..., (L-2, L-1).
std::vector<LayerPair> default_layer_pairs(const ModelConfig& config);
void validate_layer_pairs(const std::vector<LayerPair>& pairs, const ModelConfig& config);

enum class PruneMode { global, cumulative };

std::string_view to_string(PruneMode mode);
PruneMode parse_prune_mode(std::string_view text);

struct PruneConfig {
  PruneMode mode = PruneMode::cumulative;
  double tau = 0.01;
  double p = 0.85;
  double node_threshold = 0.01;

  void validate() const;
  friend bool operator==(const PruneConfig&, const PruneConfig&) = default;
};

using Entry = std::pair<std::size_t, std::size_t>;  // (j, i)

struct CumulativeCut {
  std::optional<double> tau;  // empty when every entry is zero
  std::size_t k_star = 0;
  double total_mass = 0.0;
};

/// The cumulative-mass threshold over nonzero magnitudes.
CumulativeCut cumulative_cut(std::vector<double> magnitudes, double p);

struct PruneResult {
  std::vector<Entry> retained;  // row-major order
  std::optional<double> tau;
  std::size_t k_star = 0;
  double total_mass = 0.0;
  double retained_mass = 0.0;
};

PruneResult prune_cumulative(const InteractionMatrix& m, double p);
PruneResult prune_global(const InteractionMatrix& m, double tau);

struct GraphNode {
  int layer = 0;
  std::size_t pos = 0;
  double relevance = 0.0;

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct GraphEdge {
  int s = 0;
  std::size_t i = 0;
  int t = 0;
  std::size_t j = 0;
  double w = 0.0;

  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

struct GraphFlags {
  bool empty = false;  // no edges survived
  bool target_reinstated = false;

  friend bool operator==(const GraphFlags&, const GraphFlags&) = default;
};

struct AttributionGraph {
  std::string case_id;
  RuleVariant variant = RuleVariant::attnlrp;
  PruneConfig prune;
  std::vector<LayerPair> layer_pairs;
  GraphNode target;  // (L-1, prediction position) with its relevance
  std::vector<GraphNode> nodes;  // sorted by (layer, pos)
  std::vector<GraphEdge> edges;  // sorted by (s, t, j, i)
  GraphFlags flags;

  const GraphNode* find_node(int layer, std::size_t pos) const;
  friend bool operator==(const AttributionGraph&, const AttributionGraph&) = default;
};

/// Node relevances and unpruned interaction matrices for a set of layer pairs.
struct LayerMatrices {
  NodeRelevances relev;
  std::vector<InteractionMatrix> matrices;
};

/// Layer pairs are independent; `workers` > 1 runs them on separate threads.
LayerMatrices compute_layer_matrices(const ModelBundle& model, const ContrastCase& c,
                                     const RuleSet& rules, const std::vector<LayerPair>& pairs,
                                     const BatchPlan& plan, std::size_t workers = 1);

/// Prunes nodes and edges, then keeps the part connected to the target.
AttributionGraph assemble_graph(const LayerMatrices& lm, const ContrastCase& c,
                                RuleVariant variant, const PruneConfig& prune);

AttributionGraph build_graph(const ModelBundle& model, const ContrastCase& c,
                             const RuleSet& rules, const std::vector<LayerPair>& pairs,
                             const PruneConfig& prune, const BatchPlan& plan);

/// Induced subgraph of nodes with a directed path to the target. A missing
/// target node is reinstated from graph.target and flagged.
AttributionGraph connected_subgraph(const AttributionGraph& graph);

/// Unreduced h ⊙ g for each requested (layer, pos).
std::vector<std::vector<double>> refine_subgraph(const ModelBundle& model, const ContrastCase& c,
                                                 const RuleSet& rules,
                                                 const std::vector<std::pair<int, std::size_t>>& nodes);
/// Same, reusing a finished node pass.
std::vector<std::vector<double>> refine_nodes(const NodePass& pass,
                                              const std::vector<std::pair<int, std::size_t>>& nodes);

std::string serialize_graph(const AttributionGraph& graph);
AttributionGraph deserialize_graph(const std::string& text);

}  // namespace attrigraph
