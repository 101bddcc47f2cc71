// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "attrigraph/error.hpp"

namespace attrigraph {

RelevanceProfile relevance_profile(std::vector<double> raw) {
  require(raw.size() >= 2, ErrorKind::input, "a relevance profile needs at least two layers");
  RelevanceProfile p;
  p.raw = std::move(raw);
  const double first = p.raw.front(), scale = std::abs(p.raw.back());
  if (!(scale > 0.0)) {
    p.degenerate = true;
    return p;
  }
  p.normalized.reserve(p.raw.size());
  for (double r : p.raw) p.normalized.push_back((r - first) / scale);
  p.normalized.front() = 0.0;
  return p;
}

RelevanceProfile relevance_profile(const NodeRelevances& relev, std::size_t position) {
  require(position < relev.seq_len, ErrorKind::input, "prediction position outside the sequence");
  std::vector<double> raw;
  for (int l = -1; l <= relev.last_layer(); ++l) raw.push_back(relev.at(l, position));
  return relevance_profile(std::move(raw));
}

std::string_view to_string(Component c) {
  switch (c) {
    case Component::sb: return "sb";
    case Component::bos: return "bos";
    case Component::oc: return "oc";
  }
  return "?";
}

const LayerComponents* Decomposition::find(int layer) const {
  for (const LayerComponents& c : layers)
    if (c.layer == layer) return &c;
  return nullptr;
}

namespace {

struct Means {
  double sb = 0.0, bos = 0.0, oc = 0.0;
  std::size_t count = 0;
};

Means component_means(const std::vector<LayerComponents>& layers, int first, int last,
                      double scale) {
  Means m;
  for (const LayerComponents& c : layers)
    if (c.layer >= first && c.layer <= last) {
      m.sb += c.sb;
      m.bos += c.bos;
      m.oc += c.oc;
      ++m.count;
    }
  if (m.count == 0 || !(scale > 0.0)) return Means{0.0, 0.0, 0.0, m.count};
  const double denom = scale * static_cast<double>(m.count);
  return {m.sb / denom, m.bos / denom, m.oc / denom, m.count};
}

}  // namespace

Decomposition decompose(const AttributionGraph& graph, std::size_t position,
                        std::size_t bos_position) {
  Decomposition d;
  d.position = position;
  d.bos_position = bos_position;
  for (int l = -1; l <= graph.target.layer; ++l) {
    const GraphNode* node = graph.find_node(l, position);
    if (!node) {
      d.missing_layers.push_back(l);
      continue;
    }
    LayerComponents c;
    c.layer = l;
    c.relevance = node->relevance;
    for (const GraphEdge& e : graph.edges) {
      if (e.t != l || e.j != position || e.i == position) continue;
      (e.i == bos_position ? c.bos : c.oc) += e.w;
    }
    c.sb = c.relevance - c.bos - c.oc;
    d.layers.push_back(c);
  }
  if (d.layers.empty()) return d;
  for (const LayerComponents& c : d.layers) d.mean_abs_relevance += std::abs(c.relevance);
  d.mean_abs_relevance /= static_cast<double>(d.layers.size());

  const Means m = component_means(d.layers, -1, graph.target.layer, d.mean_abs_relevance);
  d.mean_sb = m.sb;
  d.mean_bos = m.bos;
  d.mean_oc = m.oc;
  d.magnitude = m.sb + m.oc;
  if (d.magnitude != 0.0) {
    d.sb_frac = m.sb / d.magnitude;
    d.oc_frac = m.oc / d.magnitude;
    d.bos_frac = std::abs(m.bos) / d.magnitude;
  }
  return d;
}

std::vector<SegmentRange> layer_segments(std::size_t num_layers) {
  require(num_layers >= 1, ErrorKind::input, "a model has at least one layer");
  const std::size_t slots = num_layers + 1;
  // Scaled from the 10 / 10 / 9 split of a 29-slot stack.
  const std::size_t early = std::min(slots, (slots * 10 + 28) / 29);
  const std::size_t late = std::min(slots - early, (slots * 9 + 28) / 29);
  const std::size_t mid = slots - early - late;
  std::vector<SegmentRange> out;
  int next = -1;
  for (auto [name, count] : {std::pair<const char*, std::size_t>{"Early", early},
                             {"Mid", mid},
                             {"Late", late}}) {
    if (count == 0) continue;
    out.push_back({name, next, next + static_cast<int>(count) - 1});
    next += static_cast<int>(count);
  }
  return out;
}

SegmentStats segment_composition(const Decomposition& d, const ModelConfig& config) {
  SegmentStats out;
  for (const SegmentRange& r : layer_segments(config.num_layers)) {
    SegmentComposition sc;
    sc.range = r;
    const Means m = component_means(d.layers, r.first, r.last, d.mean_abs_relevance);
    sc.layers_present = m.count;
    const double denom = m.sb + m.oc;
    if (m.count > 0 && denom != 0.0) {
      sc.sb_frac = m.sb / denom;
      sc.oc_frac = m.oc / denom;
      sc.bos_frac = std::abs(m.bos) / denom;
    }
    out.segments.push_back(std::move(sc));
  }
  return out;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) s += (a[e] - b[e]) * (a[e] - b[e]);
  return s;
}

void check_samples(const std::vector<std::vector<double>>& v) {
  require(!v.empty(), ErrorKind::input, "no samples");
  for (const auto& x : v) {
    require(x.size() == v.front().size(), ErrorKind::input, "samples differ in length");
    for (double e : x) require(std::isfinite(e), ErrorKind::input, "non-finite sample value");
  }
}

}  // namespace

double silhouette_score(const std::vector<std::vector<double>>& vectors,
                        const std::vector<std::size_t>& labels) {
  check_samples(vectors);
  require(labels.size() == vectors.size(), ErrorKind::input, "one label per sample");
  const std::set<std::size_t> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) return 0.0;
  const std::size_t n = vectors.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<std::size_t, std::pair<double, std::size_t>> by;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& [sum, count] = by[labels[j]];
      sum += std::sqrt(sq_dist(vectors[i], vectors[j]));
      ++count;
    }
    const auto own = by.find(labels[i]);
    if (own == by.end()) continue;  // singleton contributes 0
    const double a = own->second.first / static_cast<double>(own->second.second);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, sc] : by)
      if (label != labels[i]) b = std::min(b, sc.first / static_cast<double>(sc.second));
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

ClusterResult kmeans(const std::vector<std::vector<double>>& vectors, std::size_t k,
                     std::uint64_t seed) {
  check_samples(vectors);
  const std::size_t n = vectors.size();
  require(k >= 1 && k <= n, ErrorKind::input,
          "k = " + std::to_string(k) + " needs 1 <= k <= " + std::to_string(n));
  ClusterResult r;
  r.k = k;
  r.seed = seed;

  // Farthest-point seeding from a seed-chosen first center.
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picks{static_cast<std::size_t>(rng() % n)};
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(vectors[i], vectors[picks[0]]);
  while (picks.size() < k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (nearest[i] > nearest[best]) best = i;
    picks.push_back(best);
    for (std::size_t i = 0; i < n; ++i)
      nearest[i] = std::min(nearest[i], sq_dist(vectors[i], vectors[best]));
  }
  for (std::size_t p : picks) r.centroids.push_back(vectors[p]);

  std::vector<std::size_t> prev;
  r.assignments.assign(n, 0);
  const std::size_t dim = vectors.front().size();
  for (r.iterations = 1; r.iterations <= 300; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = sq_dist(vectors[i], r.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(vectors[i], r.centroids[c]);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      r.assignments[i] = best;
    }
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t a : r.assignments) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // Move the point farthest from the largest cluster's centroid.
      const std::size_t big = static_cast<std::size_t>(
          std::max_element(counts.begin(), counts.end()) - counts.begin());
      std::size_t far = n;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (r.assignments[i] == big) {
          const double dd = sq_dist(vectors[i], r.centroids[big]);
          if (dd > fd) {
            fd = dd;
            far = i;
          }
        }
      r.assignments[far] = c;
      --counts[big];
      ++counts[c];
      r.repaired = true;
    }
    for (std::size_t c = 0; c < k; ++c) r.centroids[c].assign(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < dim; ++e) r.centroids[r.assignments[i]][e] += vectors[i][e];
    for (std::size_t c = 0; c < k; ++c)
      for (double& e : r.centroids[c]) e /= static_cast<double>(counts[c]);
    if (r.assignments == prev) break;
    prev = r.assignments;
  }
  r.iterations = std::min<std::size_t>(r.iterations, 300);
  for (std::size_t i = 0; i < n; ++i) r.inertia += sq_dist(vectors[i], r.centroids[r.assignments[i]]);
  r.silhouette = silhouette_score(vectors, r.assignments);
  return r;
}

std::vector<ElbowPoint> elbow_curve(const std::vector<std::vector<double>>& vectors,
                                    std::uint64_t seed) {
  check_samples(vectors);
  std::vector<ElbowPoint> out;
  for (std::size_t k = 2; k <= std::min<std::size_t>(6, vectors.size()); ++k) {
    const ClusterResult r = kmeans(vectors, k, seed);
    out.push_back({k, r.inertia, r.silhouette, std::nullopt});
  }
  for (std::size_t q = 1; q + 1 < out.size(); ++q)
    out[q].curvature = out[q - 1].inertia - 2.0 * out[q].inertia + out[q + 1].inertia;
  return out;
}

Projection2D pca_2d(const std::vector<std::vector<double>>& vectors) {
  check_samples(vectors);
  const std::size_t n = vectors.size(), dim = vectors.front().size();
  require(n >= 2, ErrorKind::input, "PCA needs at least two samples");
  require(dim >= 1, ErrorKind::input, "PCA needs at least one feature");
  Eigen::MatrixXd X(n, dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < dim; ++e) X(i, e) = vectors[i][e];
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  require(eig.info() == Eigen::Success, ErrorKind::numeric, "eigensolver did not converge");

  Projection2D p;
  const double trace = cov.trace();
  const double top = std::max(eig.eigenvalues()(dim - 1), 0.0);
  for (std::size_t a = 0; a < 2; ++a) {
    std::vector<double> axis(dim, 0.0);
    double lambda = 0.0;
    if (a < dim) {
      const Eigen::Index col = static_cast<Eigen::Index>(dim - 1 - a);
      lambda = std::max(eig.eigenvalues()(col), 0.0);
      Eigen::VectorXd v = eig.eigenvectors().col(col);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      for (std::size_t e = 0; e < dim; ++e) axis[e] = v(static_cast<Eigen::Index>(e));
    }
    if (a == 1 && (a >= dim || !(lambda > 1e-12 * top))) {
      p.rank_deficient = true;
      lambda = 0.0;
      std::fill(axis.begin(), axis.end(), 0.0);
    }
    if (a == 0 && !(top > 0.0)) {
      p.rank_deficient = true;
      std::fill(axis.begin(), axis.end(), 0.0);
    }
    p.explained_variance[a] = lambda;
    p.explained_ratio[a] = trace > 0.0 ? lambda / trace : 0.0;
    p.axes.push_back(std::move(axis));
  }
  p.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 2; ++a) {
      double s = 0.0;
      for (std::size_t e = 0; e < dim; ++e) s += X(i, e) * p.axes[a][e];
      p.coords[i][a] = s;
    }
  return p;
}

VarianceRatio variance_ratio(const std::vector<double>& features,
                             const std::vector<std::size_t>& labels) {
  require(features.size() == labels.size(), ErrorKind::input, "one label per feature value");
  std::map<std::size_t, std::vector<double>> groups;
  for (std::size_t i = 0; i < features.size(); ++i) groups[labels[i]].push_back(features[i]);
  require(groups.size() >= 2, ErrorKind::input, "variance ratio needs at least two clusters");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto variance = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
  };
  VarianceRatio r;
  std::vector<double> means;
  for (const auto& [label, v] : groups) {
    r.intra += variance(v);
    means.push_back(mean(v));
  }
  r.intra /= static_cast<double>(groups.size());
  r.inter = variance(means);
  if (r.inter > 0.0) r.ratio = r.intra / r.inter;
  return r;
}

AriResult adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  require(a.size() == b.size(), ErrorKind::input, "labelings differ in length");
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [key, v] : table) index += c2(v);
  for (const auto& [key, v] : rows) sa += c2(v);
  for (const auto& [key, v] : cols) sb += c2(v);
  const double pairs = c2(static_cast<double>(a.size()));
  AriResult r;
  if (pairs == 0.0) {
    r.degenerate = true;
    return r;
  }
  const double expected = sa * sb / pairs;
  const double denom = (sa + sb) / 2.0 - expected;
  if (denom == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.value = (index - expected) / denom;
  return r;
}

std::optional<int> peak_transition(const Decomposition& d, Component c) {
  std::optional<int> best;
  double best_delta = -1.0;
  for (std::size_t k = 0; k + 1 < d.layers.size(); ++k) {
    if (d.layers[k + 1].layer != d.layers[k].layer + 1) continue;
    const double delta = std::abs(d.layers[k + 1].get(c) - d.layers[k].get(c));
    if (delta > best_delta) {
      best_delta = delta;
      best = d.layers[k].layer;
    }
  }
  return best;
}

double gini(std::vector<double> magnitudes) {
  require(!magnitudes.empty(), ErrorKind::input, "Gini of an empty set");
  for (double& m : magnitudes) m = std::abs(m);
  std::sort(magnitudes.begin(), magnitudes.end());
  double total = 0.0, weighted = 0.0;
  for (std::size_t k = 0; k < magnitudes.size(); ++k) {
    total += magnitudes[k];
    weighted += static_cast<double>(k + 1) * magnitudes[k];
  }
  require(total > 0.0, ErrorKind::input, "Gini of an all-zero set");
  const double K = static_cast<double>(magnitudes.size());
  return 2.0 * weighted / (K * total) - (K + 1.0) / K;
}

Sharpness sharpness(const Heatmap& h, const ContrastCase& c, std::size_t top) {
  require(h.raw.size() == c.size(), ErrorKind::input, "heatmap does not match the case");
  std::vector<double> mags;
  for (std::size_t i = 0; i < h.raw.size(); ++i)
    if (!h.special_mask[i]) mags.push_back(std::abs(h.raw[i]));
  require(!mags.empty(), ErrorKind::input, "sharpness needs a non-special token");
  Sharpness s;
  s.tokens = mags.size();
  double total = 0.0;
  for (double m : mags) total += m;
  if (!(total > 0.0)) return s;
  std::sort(mags.rbegin(), mags.rend());
  double head = 0.0;
  for (std::size_t k = 0; k < std::min(top, mags.size()); ++k) head += mags[k];
  s.concentration = head / total;
  s.gini = gini(mags);
  return s;
}

RunComparison compare_runs(const std::vector<std::string>& case_ids, const std::vector<RunData>& runs) {
  require(!runs.empty(), ErrorKind::input, "no runs to compare");
  RunComparison cmp;
  for (const RunData& r : runs) cmp.run_ids.push_back(r.run_id);
  const std::size_t R = runs.size();
  for (const std::string& id : case_ids) {
    ComparisonRow row;
    row.case_id = id;
    bool complete = true;
    for (const RunData& r : runs) {
      auto it = r.delta.find(id);
      if (it == r.delta.end()) {
        complete = false;
        break;
      }
      row.delta.push_back(it->second);
    }
    if (!complete) {
      cmp.excluded.push_back(id);
      continue;
    }
    for (std::size_t q = 0; q < R; ++q) {
      row.change.push_back(row.delta[q] - row.delta[0]);
      row.corrected.push_back(q > 0 && row.delta[0] > 0.0 && row.delta[q] < 0.0);
    }
    cmp.rows.push_back(std::move(row));
  }
  cmp.mean_delta.assign(R, 0.0);
  cmp.corrected_fraction.assign(R, 0.0);
  for (const ComparisonRow& row : cmp.rows)
    for (std::size_t q = 0; q < R; ++q) {
      cmp.mean_delta[q] += row.delta[q];
      cmp.corrected_fraction[q] += row.corrected[q] ? 1.0 : 0.0;
    }
  if (!cmp.rows.empty())
    for (std::size_t q = 0; q < R; ++q) {
      cmp.mean_delta[q] /= static_cast<double>(cmp.rows.size());
      cmp.corrected_fraction[q] /= static_cast<double>(cmp.rows.size());
    }

  for (const RunData& r : runs) {
    std::vector<std::string> names;
    std::map<std::string, std::array<std::pair<double, std::size_t>, 2>> acc;
    for (const ComparisonRow& row : cmp.rows) {
      auto it = r.segments.find(row.case_id);
      if (it == r.segments.end()) continue;
      const bool corrected = row.corrected.back();
      for (const SegmentSum& s : it->second.segments) {
        if (!acc.count(s.name)) names.push_back(s.name);
        auto& slot = acc[s.name][corrected ? 0 : 1];
        slot.first += s.sum;
        ++slot.second;
      }
    }
    for (const std::string& name : names) {
      const auto& a = acc[name];
      SegmentSplit split;
      split.run_id = r.run_id;
      split.segment = name;
      split.n_corrected = a[0].second;
      split.n_uncorrected = a[1].second;
      if (a[0].second) split.mean_corrected = a[0].first / static_cast<double>(a[0].second);
      if (a[1].second) split.mean_uncorrected = a[1].first / static_cast<double>(a[1].second);
      cmp.splits.push_back(std::move(split));
    }
  }
  return cmp;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

}  // namespace

std::string comparison_csv(const RunComparison& cmp) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "case_id";
  for (const std::string& id : cmp.run_ids)
    os << ',' << csv_field(id + "_delta") << ',' << csv_field(id + "_change") << ','
       << csv_field(id + "_corrected");
  os << '\n';
  for (const ComparisonRow& row : cmp.rows) {
    os << csv_field(row.case_id);
    for (std::size_t q = 0; q < row.delta.size(); ++q)
      os << ',' << row.delta[q] << ',' << row.change[q] << ',' << (row.corrected[q] ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

CaseAnalysis analyze_case(const ModelConfig& config, const ContrastCase& c,
                          const NodeRelevances& relev, const AttributionGraph& graph,
                          const Heatmap& heatmap) {
  CaseAnalysis a;
  a.case_id = c.case_id;
  a.delta_logit = relev.delta_logit;
  a.profile = relevance_profile(relev, c.position);
  a.decomposition = decompose(graph, c.position, 0);
  a.segments = segment_composition(a.decomposition, config);
  a.sharpness = sharpness(heatmap, c);
  a.breakdown = segment_breakdown(heatmap, c);
  return a;
}

CaseAnalysis run_case(const ModelBundle& model, const ContrastCase& c, const PipelineOptions& opt) {
  c.validate_for(model, true);
  BatchPlan plan = BatchPlan::default_for(c.size());
  if (opt.batch) plan.batch = *opt.batch;
  const auto pairs = default_layer_pairs(model.config());
  const LayerMatrices lm = compute_layer_matrices(model, c, opt.rules, pairs, plan, opt.workers);
  std::vector<double> raw;
  for (std::size_t i = 0; i < c.size(); ++i) raw.push_back(lm.relev.at(-1, i));
  const Heatmap h = make_heatmap(std::move(raw), c.special_mask, lm.relev.delta_logit);
  const AttributionGraph g = assemble_graph(lm, c, opt.rules.variant, opt.prune);
  CaseAnalysis a = analyze_case(model.config(), c, lm.relev, g, h);
  return a;
}

BatchReport batch_report(std::vector<CaseAnalysis> cases, std::size_t k, std::uint64_t seed,
                         std::optional<RunComparison> comparison) {
  BatchReport rep;
  std::vector<std::vector<double>> profiles, composition;
  for (const CaseAnalysis& a : cases) {
    rep.peaks.push_back({a.case_id, peak_transition(a.decomposition, Component::sb),
                         peak_transition(a.decomposition, Component::bos),
                         peak_transition(a.decomposition, Component::oc)});
    const Decomposition& d = a.decomposition;
    if (a.profile.degenerate || !d.sb_frac) {
      rep.skipped.push_back(a.case_id);
      continue;
    }
    rep.clustered.push_back(a.case_id);
    profiles.push_back(a.profile.normalized);
    composition.push_back({*d.sb_frac, *d.bos_frac, d.magnitude});
  }
  if (profiles.size() >= 2) {
    rep.pca = pca_2d(profiles);
    rep.elbow = elbow_curve(profiles, seed);
  }
  if (k >= 1 && profiles.size() >= k) {
    rep.profile_clusters = kmeans(profiles, k, seed);
    rep.composition_clusters = kmeans(composition, k, seed);
    rep.ari = adjusted_rand_index(rep.profile_clusters->assignments,
                                  rep.composition_clusters->assignments);
    const auto& labels = rep.profile_clusters->assignments;
    if (std::set<std::size_t>(labels.begin(), labels.end()).size() >= 2) {
      const char* names[] = {"sb_frac", "bos_frac", "magnitude"};
      for (std::size_t f = 0; f < 3; ++f) {
        std::vector<double> feature;
        for (const auto& row : composition) feature.push_back(row[f]);
        rep.variance_ratios[names[f]] = variance_ratio(feature, labels);
      }
    }
  }
  rep.cases = std::move(cases);
  rep.comparison = std::move(comparison);
  return rep;
}

}  // namespace attrigraph
