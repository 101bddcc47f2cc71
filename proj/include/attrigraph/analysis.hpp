// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attrigraph/attribution.hpp"
#include "attrigraph/graph.hpp"

namespace attrigraph {

struct RelevanceProfile {
  std::vector<double> raw;         // R^(l) at the prediction position, l = -1..L-1
  std::vector<double> normalized;  // empty when degenerate
  bool degenerate = false;         // |R^(L-1)| == 0
};

RelevanceProfile relevance_profile(std::vector<double> raw);
RelevanceProfile relevance_profile(const NodeRelevances& relev, std::size_t position);

enum class Component { sb, bos, oc };

std::string_view to_string(Component c);

struct LayerComponents {
  int layer = -1;
  double relevance = 0.0;
  double sb = 0.0;  // residual: relevance - bos - oc
  double bos = 0.0;
  double oc = 0.0;

  double get(Component c) const { return c == Component::sb ? sb : c == Component::bos ? bos : oc; }
  friend bool operator==(const LayerComponents&, const LayerComponents&) = default;
};

struct Decomposition {
  std::size_t position = 0;
  std::size_t bos_position = 0;
  std::vector<LayerComponents> layers;  // ascending; missing layers are absent
  std::vector<int> missing_layers;
  double mean_abs_relevance = 0.0;  // |R|-bar over present layers
  // Layer means of components divided by |R|-bar. Fractions are empty when
  // SB + OC means to zero.
  double mean_sb = 0.0, mean_bos = 0.0, mean_oc = 0.0;
  std::optional<double> sb_frac, oc_frac, bos_frac;
  double magnitude = 0.0;  // mean_sb + mean_oc

  const LayerComponents* find(int layer) const;
  friend bool operator==(const Decomposition&, const Decomposition&) = default;
};

/// Splits R at the prediction node of every layer -1..target.layer into
/// incoming BOS edges, incoming edges from other non-self positions, and the
/// residual.
Decomposition decompose(const AttributionGraph& graph, std::size_t position,
                        std::size_t bos_position = 0);

struct SegmentRange {
  std::string name;
  int first = -1;  // inclusive layer indices
  int last = -1;
};

/// Early / Mid / Late over layer slots -1..L-1.
std::vector<SegmentRange> layer_segments(std::size_t num_layers);

struct SegmentComposition {
  SegmentRange range;
  std::size_t layers_present = 0;
  std::optional<double> sb_frac, oc_frac, bos_frac;
};

struct SegmentStats {
  std::vector<SegmentComposition> segments;
};

SegmentStats segment_composition(const Decomposition& d, const ModelConfig& config);

struct ClusterResult {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  double silhouette = 0.0;
  std::size_t iterations = 0;
  bool repaired = false;  // an empty cluster was refilled
};

ClusterResult kmeans(const std::vector<std::vector<double>>& vectors, std::size_t k,
                     std::uint64_t seed);

double silhouette_score(const std::vector<std::vector<double>>& vectors,
                        const std::vector<std::size_t>& labels);

struct ElbowPoint {
  std::size_t k = 0;
  double inertia = 0.0;
  double silhouette = 0.0;
  std::optional<double> curvature;  // I(k-1) - 2 I(k) + I(k+1)
};

/// k in [2, 6] clamped to the sample count; advisory only.
std::vector<ElbowPoint> elbow_curve(const std::vector<std::vector<double>>& vectors,
                                    std::uint64_t seed);

struct Projection2D {
  std::vector<std::array<double, 2>> coords;
  std::array<double, 2> explained_variance{};  // eigenvalues of the population covariance
  std::array<double, 2> explained_ratio{};
  std::vector<std::vector<double>> axes;  // 2 rows of length dim
  bool rank_deficient = false;
};

Projection2D pca_2d(const std::vector<std::vector<double>>& vectors);

struct VarianceRatio {
  double intra = 0.0;
  double inter = 0.0;
  std::optional<double> ratio;  // empty when inter == 0
};

VarianceRatio variance_ratio(const std::vector<double>& features,
                             const std::vector<std::size_t>& labels);

struct AriResult {
  double value = 0.0;
  bool degenerate = false;  // zero denominator, reported as 0
};

AriResult adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

/// Transition l means l -> l+1; ties go to the smallest l.
std::optional<int> peak_transition(const Decomposition& d, Component c);

struct Sharpness {
  std::optional<double> concentration;  // top-10 share of |relevance|
  std::optional<double> gini;
  std::size_t tokens = 0;
};

double gini(std::vector<double> magnitudes);
Sharpness sharpness(const Heatmap& h, const ContrastCase& c, std::size_t top = 10);

struct RunData {
  std::string run_id;
  std::map<std::string, double> delta;
  std::map<std::string, SegmentBreakdown> segments;
};

struct ComparisonRow {
  std::string case_id;
  std::vector<double> delta;    // per run
  std::vector<double> change;   // run - reference
  std::vector<bool> corrected;  // reference > 0 and run < 0
};

struct SegmentSplit {
  std::string run_id;
  std::string segment;
  std::optional<double> mean_corrected, mean_uncorrected;
  std::size_t n_corrected = 0, n_uncorrected = 0;
};

struct RunComparison {
  std::vector<std::string> run_ids;
  std::vector<ComparisonRow> rows;
  std::vector<std::string> excluded;  // missing from at least one run
  std::vector<double> mean_delta;     // per run
  std::vector<double> corrected_fraction;
  std::vector<SegmentSplit> splits;   // grouped by correction in the last run
};

/// The first run is the reference.
RunComparison compare_runs(const std::vector<std::string>& case_ids, const std::vector<RunData>& runs);
std::string comparison_csv(const RunComparison& cmp);

struct CaseAnalysis {
  std::string case_id;
  double delta_logit = 0.0;
  RelevanceProfile profile;
  Decomposition decomposition;
  SegmentStats segments;
  Sharpness sharpness;
  SegmentBreakdown breakdown;
};

CaseAnalysis analyze_case(const ModelConfig& config, const ContrastCase& c,
                          const NodeRelevances& relev, const AttributionGraph& graph,
                          const Heatmap& heatmap);

struct PipelineOptions {
  RuleSet rules;
  PruneConfig prune;
  std::optional<std::size_t> batch;  // default min(8, n)
  std::size_t workers = 1;
};

/// Heatmap, node pass, graph and analysis for one case.
CaseAnalysis run_case(const ModelBundle& model, const ContrastCase& c, const PipelineOptions& opt);

struct PeakTransitions {
  std::string case_id;
  std::optional<int> sb, bos, oc;
};

struct BatchReport {
  std::vector<CaseAnalysis> cases;
  std::vector<std::string> clustered;  // case ids used for clustering, in order
  std::vector<std::string> skipped;    // degenerate profile or undefined fractions
  std::optional<ClusterResult> profile_clusters;
  std::optional<ClusterResult> composition_clusters;
  std::vector<ElbowPoint> elbow;
  std::optional<Projection2D> pca;
  std::map<std::string, VarianceRatio> variance_ratios;  // sb_frac, bos_frac, magnitude
  std::optional<AriResult> ari;
  std::vector<PeakTransitions> peaks;
  std::optional<RunComparison> comparison;
};

BatchReport batch_report(std::vector<CaseAnalysis> cases, std::size_t k, std::uint64_t seed,
                         std::optional<RunComparison> comparison = std::nullopt);

}  // namespace attrigraph
