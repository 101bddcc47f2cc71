// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/json_io.hpp"

#include "attrigraph/error.hpp"

namespace attrigraph {

std::string dump_stable(const json& j) { return j.dump(2) + "\n"; }

json to_json(const ContrastCase& c) {
  json segments = json::array();
  for (const Segment& s : c.segments)
    segments.push_back({{"name", s.name}, {"begin", s.begin}, {"end", s.end}});
  return {{"case_id", c.case_id},
          {"tokens", c.tokens},
          {"display", c.display},
          {"position", c.position},
          {"target", c.target},
          {"contrast", c.contrast},
          {"segments", segments},
          {"special_mask", c.special_mask},
          {"mask_token_id", c.mask_token_id}};
}

ContrastCase case_from_json(const json& j) {
  ContrastCase c;
  try {
    c.case_id = j.at("case_id").get<std::string>();
    c.tokens = j.at("tokens").get<std::vector<TokenId>>();
    if (j.contains("display")) c.display = j.at("display").get<std::vector<std::string>>();
    c.position = j.at("position").get<std::size_t>();
    c.target = j.at("target").get<TokenId>();
    c.contrast = j.at("contrast").get<TokenId>();
    if (j.contains("segments"))
      for (const json& s : j.at("segments"))
        c.segments.push_back({s.at("name").get<std::string>(), s.at("begin").get<std::size_t>(),
                              s.at("end").get<std::size_t>()});
    c.special_mask = j.at("special_mask").get<std::vector<bool>>();
    if (j.contains("mask_token_id")) c.mask_token_id = j.at("mask_token_id").get<TokenId>();
  } catch (const json::exception& e) {
    fail(ErrorKind::input, std::string("malformed case: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const Heatmap& h) {
  return {{"schema_version", kSchemaVersion},
          {"case_id", h.case_id},
          {"rule_variant", std::string(to_string(h.variant))},
          {"raw", h.raw},
          {"normalized", h.normalized},
          {"special_mask", h.special_mask},
          {"normalizer", h.normalizer},
          {"delta_logit", h.delta_logit},
          {"degenerate", h.degenerate}};
}

Heatmap heatmap_from_json(const json& j) {
  Heatmap h;
  try {
    h.case_id = j.at("case_id").get<std::string>();
    h.variant = parse_rule_variant(j.at("rule_variant").get<std::string>());
    h.raw = j.at("raw").get<std::vector<double>>();
    h.normalized = j.at("normalized").get<std::vector<double>>();
    h.special_mask = j.at("special_mask").get<std::vector<bool>>();
    h.normalizer = j.at("normalizer").get<double>();
    h.delta_logit = j.at("delta_logit").get<double>();
    h.degenerate = j.at("degenerate").get<bool>();
  } catch (const json::exception& e) {
    fail(ErrorKind::input, std::string("malformed heatmap: ") + e.what());
  }
  require(h.raw.size() == h.normalized.size() && h.raw.size() == h.special_mask.size(),
          ErrorKind::input, "heatmap arrays differ in length");
  return h;
}

json to_json(const SegmentBreakdown& b) {
  json out = json::array();
  for (const SegmentSum& s : b.segments)
    out.push_back({{"name", s.name}, {"sum", s.sum}, {"count", s.count}});
  return out;
}

}  // namespace attrigraph
