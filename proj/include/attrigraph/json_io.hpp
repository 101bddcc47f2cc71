// SPDX-License-Identifier: Apache-2.0
// JSON mappings for the file and wire formats.
#pragma once

#include <string>

#include <json.hpp>

#include "attrigraph/analysis.hpp"
#include "attrigraph/attribution.hpp"

namespace attrigraph {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

json to_json(const ContrastCase& c);
/// Throws ErrorKind::input on schema violations, then validates the case.
ContrastCase case_from_json(const json& j);

json to_json(const Heatmap& h);
Heatmap heatmap_from_json(const json& j);

json to_json(const SegmentBreakdown& b);

// Analysis reports. Undefined quantities are written as null.
json to_json(const RelevanceProfile& p);
json to_json(const Decomposition& d);
Decomposition decomposition_from_json(const json& j);
json to_json(const SegmentStats& s);
json to_json(const Sharpness& s);
json to_json(const ClusterResult& r);
json to_json(const Projection2D& p);
json to_json(const RunComparison& c);
json to_json(const CaseAnalysis& a);
json to_json(const BatchReport& r);

/// Stable output: sorted keys, fixed indentation, trailing newline.
std::string dump_stable(const json& j);

}  // namespace attrigraph
