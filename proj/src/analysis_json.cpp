// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/error.hpp"
#include "attrigraph/json_io.hpp"

namespace attrigraph {

namespace {

template <class T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

}  // namespace

json to_json(const RelevanceProfile& p) {
  return {{"raw", p.raw},
          {"normalized", p.degenerate ? json(nullptr) : json(p.normalized)},
          {"degenerate", p.degenerate}};
}

json to_json(const Decomposition& d) {
  json layers = json::array();
  for (const LayerComponents& c : d.layers)
    layers.push_back({{"layer", c.layer}, {"relevance", c.relevance}, {"sb", c.sb},
                      {"bos", c.bos}, {"oc", c.oc}});
  return {{"position", d.position},
          {"bos_position", d.bos_position},
          {"layers", layers},
          {"missing_layers", d.missing_layers},
          {"mean_abs_relevance", d.mean_abs_relevance},
          {"mean_sb", d.mean_sb},
          {"mean_bos", d.mean_bos},
          {"mean_oc", d.mean_oc},
          {"sb_frac", opt(d.sb_frac)},
          {"oc_frac", opt(d.oc_frac)},
          {"bos_frac", opt(d.bos_frac)},
          {"magnitude", d.magnitude}};
}

Decomposition decomposition_from_json(const json& j) {
  Decomposition d;
  try {
    d.position = j.at("position").get<std::size_t>();
    d.bos_position = j.at("bos_position").get<std::size_t>();
    for (const json& c : j.at("layers"))
      d.layers.push_back({c.at("layer").get<int>(), c.at("relevance").get<double>(),
                          c.at("sb").get<double>(), c.at("bos").get<double>(),
                          c.at("oc").get<double>()});
    d.missing_layers = j.at("missing_layers").get<std::vector<int>>();
    d.mean_abs_relevance = j.at("mean_abs_relevance").get<double>();
    d.mean_sb = j.at("mean_sb").get<double>();
    d.mean_bos = j.at("mean_bos").get<double>();
    d.mean_oc = j.at("mean_oc").get<double>();
    d.sb_frac = opt_from<double>(j.at("sb_frac"));
    d.oc_frac = opt_from<double>(j.at("oc_frac"));
    d.bos_frac = opt_from<double>(j.at("bos_frac"));
    d.magnitude = j.at("magnitude").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::malformed, std::string("malformed decomposition: ") + e.what());
  }
  return d;
}

json to_json(const SegmentStats& s) {
  json out = json::array();
  for (const SegmentComposition& c : s.segments)
    out.push_back({{"name", c.range.name},
                   {"first_layer", c.range.first},
                   {"last_layer", c.range.last},
                   {"layers_present", c.layers_present},
                   {"sb_frac", opt(c.sb_frac)},
                   {"oc_frac", opt(c.oc_frac)},
                   {"bos_frac", opt(c.bos_frac)}});
  return out;
}

json to_json(const Sharpness& s) {
  return {{"concentration", opt(s.concentration)}, {"gini", opt(s.gini)}, {"tokens", s.tokens}};
}

json to_json(const ClusterResult& r) {
  return {{"k", r.k},
          {"seed", r.seed},
          {"assignments", r.assignments},
          {"centroids", r.centroids},
          {"inertia", r.inertia},
          {"silhouette", r.silhouette},
          {"iterations", r.iterations},
          {"repaired", r.repaired}};
}

json to_json(const Projection2D& p) {
  json coords = json::array();
  for (const auto& c : p.coords) coords.push_back({c[0], c[1]});
  return {{"coords", coords},
          {"explained_variance", {p.explained_variance[0], p.explained_variance[1]}},
          {"explained_ratio", {p.explained_ratio[0], p.explained_ratio[1]}},
          {"axes", p.axes},
          {"rank_deficient", p.rank_deficient}};
}

json to_json(const RunComparison& c) {
  json rows = json::array(), splits = json::array();
  for (const ComparisonRow& r : c.rows) {
    json corrected = json::array();
    for (bool b : r.corrected) corrected.push_back(b);
    rows.push_back({{"case_id", r.case_id}, {"delta", r.delta}, {"change", r.change},
                    {"corrected", corrected}});
  }
  for (const SegmentSplit& s : c.splits)
    splits.push_back({{"run_id", s.run_id},
                      {"segment", s.segment},
                      {"mean_corrected", opt(s.mean_corrected)},
                      {"mean_uncorrected", opt(s.mean_uncorrected)},
                      {"n_corrected", s.n_corrected},
                      {"n_uncorrected", s.n_uncorrected}});
  return {{"run_ids", c.run_ids},
          {"rows", rows},
          {"excluded", c.excluded},
          {"mean_delta", c.mean_delta},
          {"corrected_fraction", c.corrected_fraction},
          {"splits", splits}};
}

json to_json(const CaseAnalysis& a) {
  return {{"case_id", a.case_id},
          {"delta_logit", a.delta_logit},
          {"profile", to_json(a.profile)},
          {"decomposition", to_json(a.decomposition)},
          {"fractions",
           {{"sb_frac", opt(a.decomposition.sb_frac)},
            {"oc_frac", opt(a.decomposition.oc_frac)},
            {"bos_frac", opt(a.decomposition.bos_frac)},
            {"magnitude", a.decomposition.magnitude}}},
          {"segments", to_json(a.segments)},
          {"sharpness", to_json(a.sharpness)},
          {"breakdown", to_json(a.breakdown)}};
}

json to_json(const BatchReport& r) {
  json cases = json::array(), peaks = json::array(), elbow = json::array(), ratios = json::object();
  for (const CaseAnalysis& a : r.cases) cases.push_back(to_json(a));
  for (const PeakTransitions& p : r.peaks)
    peaks.push_back({{"case_id", p.case_id}, {"sb", opt(p.sb)}, {"bos", opt(p.bos)}, {"oc", opt(p.oc)}});
  for (const ElbowPoint& e : r.elbow)
    elbow.push_back({{"k", e.k}, {"inertia", e.inertia}, {"silhouette", e.silhouette},
                     {"curvature", opt(e.curvature)}});
  for (const auto& [name, v] : r.variance_ratios)
    ratios[name] = {{"intra", v.intra}, {"inter", v.inter}, {"ratio", opt(v.ratio)}};
  auto clusters = [](const std::optional<ClusterResult>& c) { return c ? to_json(*c) : json(nullptr); };
  return {{"schema_version", kSchemaVersion},
          {"cases", cases},
          {"clustered", r.clustered},
          {"skipped", r.skipped},
          {"clusters", clusters(r.profile_clusters)},
          {"composition_clusters", clusters(r.composition_clusters)},
          {"elbow", elbow},
          {"pca", r.pca ? to_json(*r.pca) : json(nullptr)},
          {"variance_ratios", ratios},
          {"ari", r.ari ? json{{"value", r.ari->value}, {"degenerate", r.ari->degenerate}} : json(nullptr)},
          {"peak_transitions", peaks},
          {"run_comparison", r.comparison ? to_json(*r.comparison) : json(nullptr)}};
}

}  // namespace attrigraph
