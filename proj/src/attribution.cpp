// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "attrigraph/error.hpp"
#include "attrigraph/json_io.hpp"

namespace attrigraph {

void ContrastCase::validate(bool allow_equal_pair) const {
  const std::string where = "case '" + case_id + "': ";
  require(!case_id.empty(), ErrorKind::input, "case without case_id");
  require(!tokens.empty(), ErrorKind::input, where + "empty token sequence");
  const std::size_t n = tokens.size();
  require(position < n, ErrorKind::input,
          where + "position " + std::to_string(position) + " outside [0, " + std::to_string(n) +
              ")");
  require(allow_equal_pair || target != contrast, ErrorKind::input,
          where + "target and contrast tokens are identical");
  require(display.empty() || display.size() == n, ErrorKind::input,
          where + "display strings do not match the token count");
  require(special_mask.size() == n, ErrorKind::input,
          where + "special_mask does not match the token count");
  require(mask_token_id >= 0, ErrorKind::input, where + "negative mask_token_id");
  for (TokenId t : tokens) require(t >= 0, ErrorKind::input, where + "negative token id");

  std::vector<const Segment*> order;
  std::set<std::string> names;
  for (const Segment& s : segments) {
    require(!s.name.empty() && names.insert(s.name).second, ErrorKind::input,
            where + "segment names must be unique and non-empty");
    require(s.begin <= s.end && s.end <= n, ErrorKind::input,
            where + "segment '" + s.name + "' outside [0, n)");
    order.push_back(&s);
  }
  std::sort(order.begin(), order.end(),
            [](const Segment* a, const Segment* b) { return a->begin < b->begin; });
  for (std::size_t k = 1; k < order.size(); ++k)
    require(order[k - 1]->end <= order[k]->begin, ErrorKind::input,
            where + "segments '" + order[k - 1]->name + "' and '" + order[k]->name +
                "' overlap");
}

void ContrastCase::validate_for(const ModelBundle& model, bool allow_equal_pair) const {
  validate(allow_equal_pair);
  const auto V = static_cast<TokenId>(model.config().vocab_size);
  const std::string where = "case '" + case_id + "': ";
  for (std::size_t i = 0; i < tokens.size(); ++i)
    require(tokens[i] < V, ErrorKind::input,
            where + "token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                " outside the vocabulary");
  require(target >= 0 && target < V && contrast >= 0 && contrast < V, ErrorKind::input,
          where + "target or contrast outside the vocabulary");
  require(mask_token_id < V, ErrorKind::input, where + "mask_token_id outside the vocabulary");
}

ContrastCase load_case(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::io, "cannot open case file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::input, "case file '" + path.string() + "' is not JSON: " + e.what());
  }
  return case_from_json(j);
}

void save_case(const ContrastCase& c, const std::filesystem::path& path) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write case file '" + path.string() + "'");
  f << dump_stable(to_json(c));
}

std::vector<ContrastCase> load_cases(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::io,
          "case directory '" + dir.string() + "' not found");
  std::vector<ContrastCase> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      out.push_back(load_case(entry.path()));
  std::sort(out.begin(), out.end(),
            [](const ContrastCase& a, const ContrastCase& b) { return a.case_id < b.case_id; });
  for (std::size_t k = 1; k < out.size(); ++k)
    require(out[k - 1].case_id != out[k].case_id, ErrorKind::input,
            "duplicate case id '" + out[k].case_id + "' in " + dir.string());
  return out;
}

Tensor contrast_direction(const ModelBundle& model, TokenId target, TokenId contrast) {
  const std::size_t d = model.config().hidden_dim, V = model.config().vocab_size;
  require(target >= 0 && contrast >= 0 && static_cast<std::size_t>(target) < V &&
              static_cast<std::size_t>(contrast) < V,
          ErrorKind::input, "contrast pair outside the vocabulary");
  const Tensor& W = model.unembed();
  Tensor dir({d});
  for (std::size_t e = 0; e < d; ++e)
    dir[e] = W[e * V + static_cast<std::size_t>(target)] -
             W[e * V + static_cast<std::size_t>(contrast)];
  return dir;
}

double delta_logit(const ModelBundle& model, const ContrastCase& c) {
  c.validate_for(model, true);
  const Tensor dir = contrast_direction(model, c.target, c.contrast);
  const std::span<const TokenId> prefix(c.tokens.data(), c.position + 1);
  const ForwardResult fr = forward_full(model, prefix);
  const auto h = fr.states.row(static_cast<int>(model.config().num_layers) - 1, c.position);
  double delta = 0.0;
  for (std::size_t e = 0; e < h.size(); ++e) delta += h[e] * dir[e];
  return delta;
}

ObjectivePass objective_pass(const ModelBundle& model, const ContrastCase& c,
                             const RuleSet& rules) {
  c.validate_for(model, true);
  rules.validate();
  const std::size_t n = c.size(), d = model.config().hidden_dim;
  const Tensor dir = contrast_direction(model, c.target, c.contrast);
  auto weights = std::make_shared<Tensor>(Shape{n, d});
  std::copy(dir.data().begin(), dir.data().end(),
            weights->data().begin() + static_cast<std::ptrdiff_t>(c.position * d));

  ModelTape mt = build_model_tape(model, n);
  const NodeId objective = mt.tape->contract(mt.slot_nodes.back(), std::move(weights));
  ObjectivePass out;
  out.forward = run_model_tape(model, std::move(mt), c.tokens);
  const ForwardResult& fr = out.forward;
  out.delta_logit = fr.acts[objective][0];

  const Gradients g =
      backward(*fr.tape, fr.acts, objective, Tensor::scalar(1.0), rules, fr.slot_nodes);
  const std::size_t slots = fr.slot_nodes.size();
  out.grads = Tensor({slots, n, d});
  for (std::size_t s = 0; s < slots; ++s) {
    // A slot the objective cannot reach keeps a zero gradient.
    if (!g.has(fr.slot_nodes[s])) continue;
    const Tensor& gs = g.at(fr.slot_nodes[s]);
    std::copy(gs.data().begin(), gs.data().end(),
              out.grads.data().begin() + static_cast<std::ptrdiff_t>(s * n * d));
  }
  return out;
}

Heatmap make_heatmap(std::vector<double> raw, std::vector<bool> special_mask, double delta) {
  require(raw.size() == special_mask.size(), ErrorKind::input,
          "heatmap values and special mask differ in length");
  Heatmap h;
  double peak = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (!special_mask[i]) peak = std::max(peak, std::abs(raw[i]));
  h.degenerate = peak == 0.0;
  h.normalizer = h.degenerate ? 1.0 : peak;
  h.normalized.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) h.normalized[i] = raw[i] / h.normalizer;
  h.raw = std::move(raw);
  h.special_mask = std::move(special_mask);
  h.delta_logit = delta;
  return h;
}

Heatmap input_attribution(const ModelBundle& model, const ContrastCase& c, const RuleSet& rules) {
  const ObjectivePass pass = objective_pass(model, c, rules);
  const std::size_t n = c.size(), d = model.config().hidden_dim;
  const Tensor& h0 = pass.forward.acts[pass.forward.slot_nodes[0]];
  std::vector<double> raw(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < d; ++e) raw[i] += h0[i * d + e] * pass.grads[i * d + e];
  Heatmap h = make_heatmap(std::move(raw), c.special_mask, pass.delta_logit);
  h.case_id = c.case_id;
  h.variant = rules.variant;
  return h;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string heatmap_html(const Heatmap& h, const ContrastCase& c) {
  require(h.normalized.size() == c.size(), ErrorKind::input, "heatmap does not match the case");
  std::string body;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const std::string text =
        c.display.empty() ? std::to_string(c.tokens[i]) : c.display[i];
    const double v = h.normalized[i];
    std::string style;
    if (h.special_mask[i]) {
      style = "background:#d4d4d4;color:#555";
    } else {
      const double alpha = std::min(1.0, std::abs(v));
      char buf[64];
      // Red supports the target token, blue disfavors it.
      std::snprintf(buf, sizeof buf, "background:rgba(%s,%.3f)",
                    v >= 0 ? "220,38,38" : "37,99,235", alpha);
      style = buf;
    }
    char title[64];
    std::snprintf(title, sizeof title, "%.4f", v);
    body += "<span class=\"tok\" style=\"" + style + "\" title=\"" + title + "\">" +
            html_escape(text) + "</span>";
    if (i == c.position) body += "<span class=\"pos\">&#9664;</span>";
  }
  char delta[64];
  std::snprintf(delta, sizeof delta, "%.6g", h.delta_logit);
  return "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" +
         html_escape(c.case_id) +
         "</title><style>body{font-family:monospace;line-height:2}"
         ".tok{padding:2px 3px;margin:1px;border-radius:3px;white-space:pre}"
         ".pos{color:#888}</style></head><body>\n<h3>" +
         html_escape(c.case_id) + " &middot; " + std::string(to_string(h.variant)) +
         " &middot; &Delta;&#8467; = " + delta + "</h3>\n<div>" + body +
         "</div>\n</body></html>\n";
}

const SegmentSum* SegmentBreakdown::find(const std::string& name) const {
  for (const SegmentSum& s : segments)
    if (s.name == name) return &s;
  return nullptr;
}

SegmentBreakdown segment_breakdown(const Heatmap& h, const ContrastCase& c) {
  require(h.normalized.size() == c.size(), ErrorKind::input, "heatmap does not match the case");
  SegmentBreakdown out;
  for (const Segment& s : c.segments) {
    SegmentSum sum{s.name, 0.0, 0};
    for (std::size_t i = s.begin; i < s.end; ++i) {
      if (c.special_mask[i]) continue;
      sum.sum += h.normalized[i];
      ++sum.count;
    }
    out.segments.push_back(sum);
  }
  return out;
}

std::vector<std::pair<TokenId, double>> topk_alternatives(const ModelBundle& model,
                                                          std::span<const TokenId> tokens,
                                                          std::size_t position, std::size_t k) {
  require(k >= 1, ErrorKind::input, "top-k needs k >= 1");
  const Tensor logits = logits_for(model, tokens, position);
  std::vector<TokenId> ids(logits.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  k = std::min(k, ids.size());
  auto before = [&](TokenId a, TokenId b) {
    const double la = logits[static_cast<std::size_t>(a)];
    const double lb = logits[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
  std::vector<std::pair<TokenId, double>> out;
  for (std::size_t r = 0; r < k; ++r)
    out.emplace_back(ids[r], logits[static_cast<std::size_t>(ids[r])]);
  return out;
}

TokenId greedy_token(const Tensor& logits) {
  require(logits.size() > 0, ErrorKind::input, "empty logits");
  std::size_t best = 0;
  for (std::size_t v = 1; v < logits.size(); ++v)
    if (logits[v] > logits[best]) best = v;
  return static_cast<TokenId>(best);
}

PairVerdict validate_pair(double delta, double threshold) {
  return {delta > threshold, delta};
}

PairVerdict validate_pair(const ModelBundle& model, const ContrastCase& c, double threshold) {
  return validate_pair(delta_logit(model, c), threshold);
}

PerturbationResult perturbation_fix(const ModelBundle& model, const ContrastCase& c,
                                    const Heatmap& h, std::size_t max_masked) {
  require(max_masked >= 1, ErrorKind::input, "perturbation budget must be at least 1");
  c.validate_for(model, true);
  require(h.normalized.size() == c.size(), ErrorKind::input, "heatmap does not match the case");

  // Later positions cannot influence the prediction under causal attention.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i <= c.position; ++i)
    if (!c.special_mask[i]) candidates.push_back(i);
  require(!candidates.empty(), ErrorKind::input,
          "case '" + c.case_id + "' has no non-special tokens to mask");
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return h.normalized[a] > h.normalized[b];
  });

  std::vector<TokenId> tokens(c.tokens.begin(), c.tokens.begin() + static_cast<std::ptrdiff_t>(c.position + 1));
  PerturbationResult out;
  auto predicts_target = [&] {
    return greedy_token(logits_for(model, tokens, c.position)) == c.target;
  };
  if (!predicts_target()) {
    out.fixed = true;
    return out;
  }
  for (std::size_t pos : candidates) {
    if (out.tokens_masked == max_masked) break;
    tokens[pos] = c.mask_token_id;
    out.masked_positions.push_back(pos);
    ++out.tokens_masked;
    if (!predicts_target()) {
      out.fixed = true;
      break;
    }
  }
  return out;
}

std::vector<ContrastCase> make_synthetic_cases(const ModelBundle& model,
                                               const SyntheticOptions& opt) {
  require(opt.min_len >= 2 && opt.min_len <= opt.max_len, ErrorKind::input,
          "synthetic lengths need 2 <= min_len <= max_len");
  const std::size_t V = model.config().vocab_size;
  std::vector<TokenId> pool;
  for (std::size_t v = 0; v < V; ++v)
    if (!model.is_special(static_cast<TokenId>(v))) pool.push_back(static_cast<TokenId>(v));
  require(!pool.empty(), ErrorKind::input, "model has no non-special tokens");
  const TokenId bos = model.is_special(0) ? 0 : pool.front();
  const TokenId mask = model.is_special(1) ? 1 : bos;

  std::mt19937_64 rng(opt.seed);
  std::vector<ContrastCase> out;
  for (std::size_t k = 0; k < opt.count; ++k) {
    ContrastCase c;
    char id[48];
    std::snprintf(id, sizeof id, "syn-%03zu", k);
    c.case_id = id;
    const std::size_t n = opt.min_len + rng() % (opt.max_len - opt.min_len + 1);
    c.tokens.push_back(bos);
    while (c.tokens.size() < n) c.tokens.push_back(pool[rng() % pool.size()]);
    for (TokenId t : c.tokens) {
      c.special_mask.push_back(model.is_special(t));
      c.display.push_back(model.is_special(t) ? "<s" + std::to_string(t) + ">"
                                              : "t" + std::to_string(t));
    }
    c.position = n - 1;
    const auto top = topk_alternatives(model, c.tokens, c.position, 2);
    c.target = top[0].first;
    c.contrast = top[1].first;
    c.mask_token_id = mask;
    const std::size_t third = (n - 1) / 3;
    c.segments = {{"Instruction", 1, 1 + third},
                  {"Query", 1 + third, 1 + 2 * third},
                  {"Answer", 1 + 2 * third, n}};
    c.validate_for(model);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace attrigraph
