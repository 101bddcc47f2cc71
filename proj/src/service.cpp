// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/service.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "attrigraph/json_io.hpp"

namespace attrigraph {

namespace {

// Requests for ids that are not in the store map to 404.
struct NotFound : Error {
  explicit NotFound(const std::string& message) : Error(ErrorKind::input, message) {}
};

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& name, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::input, "parameter '" + name + "' is not a number: '" + text + "'");
}

std::uint64_t parse_uint(const std::string& name, const std::string& text) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  require(ec == std::errc() && ptr == text.data() + text.size() && !text.empty(), ErrorKind::input,
          "parameter '" + name + "' is not a non-negative integer: '" + text + "'");
  return v;
}

int parse_int(const std::string& text) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  require(ec == std::errc() && ptr == text.data() + text.size() && !text.empty(), ErrorKind::input,
          "'" + text + "' is not an integer");
  return v;
}

Response json_response(const json& j, int status = 200) {
  Response r;
  r.status = status;
  r.body = dump_stable(j);
  return r;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input:
      return 2;
    case ErrorKind::structural:
    case ErrorKind::numeric:
    case ErrorKind::unsupported_rule:
    case ErrorKind::computation:
      return 3;
    case ErrorKind::bad_magic:
    case ErrorKind::bad_version:
    case ErrorKind::shape_mismatch:
    case ErrorKind::checksum:
    case ErrorKind::malformed:
    case ErrorKind::io:
      return 4;
  }
  return 3;
}

json error_json(ErrorKind kind, const std::string& message) {
  return {{"schema_version", kSchemaVersion},
          {"error", {{"kind", std::string(to_string(kind))}, {"message", message}}}};
}

ModelPtr load_model_spec(const std::string& spec) {
  if (spec == "toy") return make_toy_model();
  if (spec.rfind("toy:", 0) == 0) return make_toy_model(parse_uint("model", spec.substr(4)));
  return load_model(spec);
}

std::string model_id(const ModelBundle& model) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", model_checksum(model));
  return std::string("crc32:") + buf;
}

RunData run_data(const std::string& run_id, const ModelBundle& model,
                 const std::vector<ContrastCase>& cases, const RuleSet& rules) {
  RunData rd;
  rd.run_id = run_id;
  for (const ContrastCase& c : cases) {
    const Heatmap h = input_attribution(model, c, rules);
    rd.delta[c.case_id] = h.delta_logit;
    rd.segments[c.case_id] = segment_breakdown(h, c);
  }
  return rd;
}

std::vector<LayerPair> parse_layer_pairs(const std::string& text) {
  std::vector<LayerPair> out;
  for (const std::string& item : split(text, ',')) {
    const auto parts = split(item, ':');
    require(parts.size() == 2, ErrorKind::input, "layer pair '" + item + "' is not s:t");
    out.emplace_back(parse_int(parts[0]), parse_int(parts[1]));
  }
  return out;
}

std::string format_layer_pairs(const std::vector<LayerPair>& pairs) {
  std::string out;
  for (const auto& [s, t] : pairs) {
    if (!out.empty()) out += ',';
    out += std::to_string(s) + ":" + std::to_string(t);
  }
  return out;
}

void JobConfig::validate(const ModelConfig& config) const {
  require(!model.empty(), ErrorKind::input, "no model given");
  prune.validate();
  if (batch) require(*batch >= 1, ErrorKind::input, "batch size must be at least 1");
  if (layer_pairs) validate_layer_pairs(*layer_pairs, config);
}

BatchPlan JobConfig::plan_for(std::size_t n) const {
  BatchPlan plan = BatchPlan::default_for(n);
  if (batch) plan.batch = *batch;
  return plan;
}

std::vector<LayerPair> JobConfig::pairs_for(const ModelConfig& config) const {
  return layer_pairs ? *layer_pairs : default_layer_pairs(config);
}

json JobConfig::to_json() const {
  json pairs = nullptr;
  if (layer_pairs) {
    pairs = json::array();
    for (const auto& [s, t] : *layer_pairs) pairs.push_back({s, t});
  }
  return {{"model", model},
          {"rule_variant", std::string(to_string(rules))},
          {"prune",
           {{"mode", std::string(to_string(prune.mode))},
            {"tau", prune.tau},
            {"p", prune.p},
            {"node_threshold", prune.node_threshold}}},
          {"batch", batch ? json(*batch) : json(nullptr)},
          {"layer_pairs", pairs},
          {"out", out.generic_string()}};
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string cache_key(const std::string& artifact, const std::string& case_id,
                      const std::string& model_id, const JobConfig& job) {
  const json canonical = {
      {"artifact", artifact}, {"case_id", case_id}, {"model_id", model_id}, {"job", job.to_json()}};
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical.dump())));
  return artifact + "-" + buf;
}

ArtifactCache::ArtifactCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path ArtifactCache::default_dir() {
  if (const char* env = std::getenv("ATTRIGRAPH_CACHE_DIR"); env && *env) return env;
  return std::filesystem::temp_directory_path() / "attrigraph-cache";
}

std::optional<std::string> ArtifactCache::get(const std::string& key) const {
  std::ifstream in(dir_ / (key + ".json"), std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ArtifactCache::put(const std::string& key, const std::string& bytes) const {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  require(!ec, ErrorKind::io, "cannot create cache directory " + dir_.string() + ": " + ec.message());
  std::ostringstream tmp_name;
  tmp_name << key << ".json.tmp." << std::this_thread::get_id();
  const auto tmp = dir_ / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot write " + tmp.string());
    out << bytes;
    require(out.good(), ErrorKind::io, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, dir_ / (key + ".json"), ec);
  require(!ec, ErrorKind::io, "cannot publish cache entry " + key + ": " + ec.message());
}

CaseStore::CaseStore(std::vector<ContrastCase> cases) : cases_(std::move(cases)) {
  std::sort(cases_.begin(), cases_.end(),
            [](const ContrastCase& a, const ContrastCase& b) { return a.case_id < b.case_id; });
  for (std::size_t k = 1; k < cases_.size(); ++k)
    require(cases_[k - 1].case_id != cases_[k].case_id, ErrorKind::input,
            "duplicate case id '" + cases_[k].case_id + "'");
}

CaseStore CaseStore::load(const std::filesystem::path& dir) { return CaseStore(load_cases(dir)); }

const ContrastCase* CaseStore::find(const std::string& id) const {
  auto it = std::lower_bound(cases_.begin(), cases_.end(), id,
                             [](const ContrastCase& c, const std::string& key) { return c.case_id < key; });
  return it != cases_.end() && it->case_id == id ? &*it : nullptr;
}

Response guarded(const std::function<Response()>& fn) {
  try {
    return fn();
  } catch (const NotFound& e) {
    return json_response(error_json(e.kind(), e.what()), 404);
  } catch (const Error& e) {
    const int status = e.kind() == ErrorKind::input ? 400 : 500;
    return json_response(error_json(e.kind(), e.what()), status);
  } catch (const std::exception& e) {
    return json_response(error_json(ErrorKind::computation, e.what()), 500);
  }
}

Service::Service(ModelPtr model, CaseStore store, ServiceOptions opt,
                 std::map<std::string, ModelPtr> runs)
    : model_(std::move(model)),
      model_id_(model_id(*model_)),
      store_(std::move(store)),
      opt_(std::move(opt)),
      cache_(opt_.cache_dir),
      runs_(std::move(runs)) {
  runs_.emplace("default", model_);
  opt_.defaults.validate(model_->config());
}

std::size_t Service::matrix_builds() const {
  std::lock_guard lock(mu_);
  return builds_;
}

JobConfig Service::job_from(const Params& q) const {
  JobConfig job = opt_.defaults;
  auto get = [&](const char* name) -> const std::string* {
    auto it = q.find(name);
    return it == q.end() ? nullptr : &it->second;
  };
  if (auto v = get("rules")) job.rules = parse_rule_variant(*v);
  if (auto v = get("mode")) job.prune.mode = parse_prune_mode(*v);
  if (auto v = get("p")) job.prune.p = parse_double("p", *v);
  if (auto v = get("tau")) job.prune.tau = parse_double("tau", *v);
  if (auto v = get("node_threshold")) job.prune.node_threshold = parse_double("node_threshold", *v);
  if (auto v = get("batch")) job.batch = parse_uint("batch", *v);
  if (auto v = get("layer_pairs")) job.layer_pairs = parse_layer_pairs(*v);
  job.validate(model_->config());
  return job;
}

const ContrastCase& Service::case_from(const Params& q) const {
  auto it = q.find("case");
  require(it != q.end() && !it->second.empty(), ErrorKind::input, "missing 'case' parameter");
  const ContrastCase* c = store_.find(it->second);
  if (!c) throw NotFound("unknown case '" + it->second + "'");
  return *c;
}

std::shared_ptr<const LayerMatrices> Service::matrices(const ContrastCase& c,
                                                       const JobConfig& job) const {
  const BatchPlan plan = job.plan_for(c.size());
  const auto pairs = job.pairs_for(model_->config());
  const std::string key = c.case_id + "|" + std::string(to_string(job.rules)) + "|" +
                          std::to_string(plan.batch) + "|" + format_layer_pairs(pairs);
  using Ptr = std::shared_ptr<const LayerMatrices>;
  std::promise<Ptr> promise;
  std::unique_lock lock(mu_);
  if (auto it = matrices_.find(key); it != matrices_.end()) {
    auto pending = it->second;
    lock.unlock();
    return pending.get();
  }
  matrices_.emplace(key, promise.get_future().share());
  ++builds_;
  lock.unlock();
  try {
    build_slots_.acquire();
    struct Release {
      std::counting_semaphore<2>& s;
      ~Release() { s.release(); }
    } release{build_slots_};
    RuleSet rules;
    rules.variant = job.rules;
    auto built = std::make_shared<const LayerMatrices>(
        compute_layer_matrices(*model_, c, rules, pairs, plan));
    promise.set_value(built);
    return built;
  } catch (...) {
    promise.set_exception(std::current_exception());
    lock.lock();
    matrices_.erase(key);
    throw;
  }
}

Response Service::cases() const {
  return guarded([&] {
    json list = json::array();
    for (const ContrastCase& c : store_.cases()) {
      json segments = json::array();
      for (const Segment& s : c.segments) segments.push_back(s.name);
      list.push_back({{"case_id", c.case_id},
                      {"length", c.size()},
                      {"position", c.position},
                      {"target", c.target},
                      {"contrast", c.contrast},
                      {"segments", segments}});
    }
    return json_response({{"schema_version", kSchemaVersion}, {"model_id", model_id_}, {"cases", list}});
  });
}

Response Service::case_detail(const std::string& id) const {
  return guarded([&] {
    const ContrastCase& c = case_from({{"case", id}});
    return json_response({{"schema_version", kSchemaVersion}, {"case", to_json(c)}});
  });
}

Response Service::heatmap(const Params& q) const {
  return guarded([&] {
    const ContrastCase& c = case_from(q);
    const JobConfig job = job_from(q);
    const std::string key = cache_key("heatmap", c.case_id, model_id_, job);
    Response r;
    if (auto hit = cache_.get(key)) {
      r.body = *hit;
      r.headers["X-Attrigraph-Cache"] = "hit";
      return r;
    }
    RuleSet rules;
    rules.variant = job.rules;
    const Heatmap h = input_attribution(*model_, c, rules);
    json j = to_json(h);
    j["segments"] = to_json(segment_breakdown(h, c));
    j["valid_pair"] = validate_pair(h.delta_logit).valid;
    r.body = dump_stable(j);
    cache_.put(key, r.body);
    r.headers["X-Attrigraph-Cache"] = "miss";
    return r;
  });
}

Response Service::graph(const Params& q) const {
  return guarded([&] {
    const ContrastCase& c = case_from(q);
    const JobConfig job = job_from(q);
    const std::string key = cache_key("graph", c.case_id, model_id_, job);
    Response r;
    if (auto hit = cache_.get(key)) {
      r.body = *hit;
      r.headers["X-Attrigraph-Cache"] = "hit";
      return r;
    }
    const auto lm = matrices(c, job);
    r.body = serialize_graph(assemble_graph(*lm, c, job.rules, job.prune));
    cache_.put(key, r.body);
    r.headers["X-Attrigraph-Cache"] = "miss";
    return r;
  });
}

Response Service::refine(const std::string& body) const {
  return guarded([&] {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      fail(ErrorKind::input, std::string("request body is not JSON: ") + e.what());
    }
    Params q;
    std::vector<std::pair<int, std::size_t>> nodes;
    try {
      q["case"] = req.at("case").get<std::string>();
      if (req.contains("rules")) q["rules"] = req.at("rules").get<std::string>();
      for (const json& n : req.at("nodes"))
        nodes.emplace_back(n.at("layer").get<int>(), n.at("pos").get<std::size_t>());
    } catch (const json::exception& e) {
      fail(ErrorKind::input, std::string("malformed refine request: ") + e.what());
    }
    require(!nodes.empty(), ErrorKind::input, "no nodes to refine");
    const ContrastCase& c = case_from(q);
    const JobConfig job = job_from(q);
    RuleSet rules;
    rules.variant = job.rules;
    const auto vectors = refine_subgraph(*model_, c, rules, nodes);
    const NodePass np = node_pass(*model_, c, rules);
    json out = json::array();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      double sum = 0.0;
      for (double v : vectors[k]) sum += v;
      out.push_back({{"layer", nodes[k].first},
                     {"pos", nodes[k].second},
                     {"relevance", np.relev.at(nodes[k].first, nodes[k].second)},
                     {"vector", vectors[k]},
                     {"sum", sum}});
    }
    return json_response({{"schema_version", kSchemaVersion},
                          {"case_id", c.case_id},
                          {"rule_variant", std::string(to_string(job.rules))},
                          {"nodes", out}});
  });
}

Response Service::analysis(const Params& q) const {
  return guarded([&] {
    const JobConfig job = job_from(q);
    PipelineOptions po;
    po.rules.variant = job.rules;
    po.prune = job.prune;
    po.batch = job.batch;
    require(!job.layer_pairs, ErrorKind::input, "analysis uses consecutive layer pairs only");
    const bool single = q.count("case") > 0;
    const std::string id = single ? case_from(q).case_id : std::string("*");
    JobConfig keyed = job;
    const std::string key = cache_key(single ? "analysis" : "batch-report", id, model_id_, keyed) +
                            (single ? "" : "-k" + std::to_string(opt_.clusters) + "-s" +
                                               std::to_string(opt_.seed));
    Response r;
    if (auto hit = cache_.get(key)) {
      r.body = *hit;
      r.headers["X-Attrigraph-Cache"] = "hit";
      return r;
    }
    json j;
    if (single) {
      j = to_json(run_case(*model_, case_from(q), po));
      j["schema_version"] = kSchemaVersion;
    } else {
      std::vector<CaseAnalysis> all;
      for (const ContrastCase& c : store_.cases()) all.push_back(run_case(*model_, c, po));
      j = to_json(batch_report(std::move(all), opt_.clusters, opt_.seed));
    }
    r.body = dump_stable(j);
    cache_.put(key, r.body);
    r.headers["X-Attrigraph-Cache"] = "miss";
    return r;
  });
}

Response Service::compare(const Params& q) const {
  return guarded([&] {
    const JobConfig job = job_from(q);
    std::vector<std::string> ids, run_ids;
    std::vector<ContrastCase> selected;
    if (auto it = q.find("cases"); it != q.end() && !it->second.empty()) {
      ids = split(it->second, ',');
      for (const std::string& id : ids) {
        const ContrastCase* c = store_.find(id);
        if (!c) throw NotFound("unknown case '" + id + "'");
        selected.push_back(*c);
      }
    } else {
      selected = store_.cases();
      for (const ContrastCase& c : selected) ids.push_back(c.case_id);
    }
    if (auto it = q.find("runs"); it != q.end() && !it->second.empty()) {
      run_ids = split(it->second, ',');
    } else {
      run_ids.push_back("default");
      for (const auto& [id, m] : runs_)
        if (id != "default") run_ids.push_back(id);
    }
    RuleSet rules;
    rules.variant = job.rules;
    std::vector<RunData> runs;
    for (const std::string& rid : run_ids) {
      auto it = runs_.find(rid);
      if (it == runs_.end()) throw NotFound("unknown run '" + rid + "'");
      runs.push_back(run_data(rid, *it->second, selected, rules));
    }
    const RunComparison cmp = compare_runs(ids, runs);
    return json_response({{"schema_version", kSchemaVersion},
                          {"rule_variant", std::string(to_string(job.rules))},
                          {"comparison", to_json(cmp)},
                          {"csv", comparison_csv(cmp)}});
  });
}

}  // namespace attrigraph
