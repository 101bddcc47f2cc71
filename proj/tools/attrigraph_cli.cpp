// SPDX-License-Identifier: Apache-2.0
// attrigraph: command-line front end. Logs go to stderr as JSON lines,
// results to stdout and --out.
#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "attrigraph/json_io.hpp"
#include "attrigraph/service.hpp"
#include "attrigraph/tape.hpp"

using namespace attrigraph;
namespace fs = std::filesystem;

namespace {

void log_event(const json& j) { std::cerr << j.dump() << std::endl; }

void write_file(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path.string());
  out << bytes;
  require(out.good(), ErrorKind::io, "cannot write " + path.string());
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      require(used == item.size() && v > 0, ErrorKind::input, "bad size '" + item + "'");
      out.push_back(v);
    } catch (const std::logic_error&) {
      fail(ErrorKind::input, "bad size '" + item + "'");
    }
  }
  require(!out.empty(), ErrorKind::input, "empty size list");
  return out;
}

// "id=model" pairs for extra comparison runs.
std::vector<std::pair<std::string, ModelPtr>> load_runs(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, ModelPtr>> runs;
  for (const std::string& s : specs) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::input, "--run expects id=model, got '" + s + "'");
    runs.emplace_back(s.substr(0, eq), load_model_spec(s.substr(eq + 1)));
  }
  return runs;
}

struct Flags {
  JobConfig job;
  std::string mode = "cumulative";
  std::string rules = "attnlrp";
  std::string layer_pairs;
  std::optional<std::size_t> batch;
  std::string case_path;
  std::string cases_dir;
  std::string addr = "127.0.0.1:8080";
  bool html = false;
  std::size_t k = 3;
  std::uint64_t seed = 0;
  std::size_t count = 20;
  std::string lengths = "16,64,252";
  std::string batches = "1,2,4,8";
  std::vector<std::string> runs;
};

JobConfig resolve(const Flags& f, const ModelConfig& config) {
  JobConfig job = f.job;
  job.rules = parse_rule_variant(f.rules);
  job.prune.mode = parse_prune_mode(f.mode);
  if (f.batch) job.batch = *f.batch;
  if (!f.layer_pairs.empty()) job.layer_pairs = parse_layer_pairs(f.layer_pairs);
  job.validate(config);
  return job;
}

int cmd_attribute(const Flags& f) {
  require(!f.case_path.empty(), ErrorKind::input, "--case is required");
  const ModelPtr model = load_model_spec(f.job.model);
  const ContrastCase c = load_case(f.case_path);
  const JobConfig job = resolve(f, model->config());
  RuleSet rules;
  rules.variant = job.rules;
  const Heatmap h = input_attribution(*model, c, rules);
  const PairVerdict verdict = validate_pair(h.delta_logit);
  const fs::path out = job.out / (c.case_id + ".heatmap.json");
  write_file(out, dump_stable(to_json(h)));
  json result = {{"case_id", c.case_id},
                 {"delta_logit", h.delta_logit},
                 {"valid_pair", verdict.valid},
                 {"heatmap", out.generic_string()}};
  if (f.html) {
    const fs::path html = job.out / (c.case_id + ".heatmap.html");
    write_file(html, heatmap_html(h, c));
    result["html"] = html.generic_string();
  }
  std::cout << result.dump() << std::endl;
  return 0;
}

int cmd_graph(const Flags& f) {
  require(!f.case_path.empty(), ErrorKind::input, "--case is required");
  const ModelPtr model = load_model_spec(f.job.model);
  const ContrastCase c = load_case(f.case_path);
  const JobConfig job = resolve(f, model->config());
  RuleSet rules;
  rules.variant = job.rules;
  const BatchPlan plan = job.plan_for(c.size());
  const auto pairs = job.pairs_for(model->config());
  log_event({{"event", "plan"},
             {"case_id", c.case_id},
             {"targets", c.size()},
             {"batch", plan.batch},
             {"batch_default", !job.batch.has_value()},
             {"layer_pairs", format_layer_pairs(pairs)},
             {"expected_calls_per_pair", plan.calls_for(c.size())}});
  const LayerMatrices lm = compute_layer_matrices(*model, c, rules, pairs, plan);
  for (const InteractionMatrix& m : lm.matrices)
    log_event({{"event", "layer_pair"}, {"s", m.s}, {"t", m.t}, {"backward_calls", m.backward_calls}});
  const AttributionGraph g = assemble_graph(lm, c, job.rules, job.prune);
  const fs::path out = job.out / (c.case_id + ".graph.json");
  write_file(out, serialize_graph(g));
  std::cout << json({{"case_id", c.case_id},
                     {"nodes", g.nodes.size()},
                     {"edges", g.edges.size()},
                     {"empty", g.flags.empty},
                     {"graph", out.generic_string()}})
                   .dump()
            << std::endl;
  return 0;
}

int cmd_analyze(const Flags& f) {
  require(!f.cases_dir.empty(), ErrorKind::input, "--cases-dir is required");
  const ModelPtr model = load_model_spec(f.job.model);
  const JobConfig job = resolve(f, model->config());
  require(!job.layer_pairs, ErrorKind::input, "analyze uses consecutive layer pairs only");
  const auto extra = load_runs(f.runs);
  const std::vector<ContrastCase> cases = load_cases(f.cases_dir);
  PipelineOptions po;
  po.rules.variant = job.rules;
  po.prune = job.prune;
  po.batch = job.batch;
  std::vector<CaseAnalysis> analyses;
  for (const ContrastCase& c : cases) {
    analyses.push_back(run_case(*model, c, po));
    log_event({{"event", "case"}, {"case_id", c.case_id}, {"delta_logit", analyses.back().delta_logit}});
  }
  std::optional<RunComparison> cmp;
  if (!extra.empty()) {
    std::vector<RunData> runs{run_data("default", *model, cases, po.rules)};
    for (const auto& [id, m] : extra) runs.push_back(run_data(id, *m, cases, po.rules));
    std::vector<std::string> ids;
    for (const ContrastCase& c : cases) ids.push_back(c.case_id);
    cmp = compare_runs(ids, runs);
    write_file(job.out / "comparison.csv", comparison_csv(*cmp));
  }
  const BatchReport report = batch_report(std::move(analyses), f.k, f.seed, cmp);
  const fs::path out = job.out / "report.json";
  write_file(out, dump_stable(to_json(report)));
  std::cout << json({{"cases", report.cases.size()},
                     {"clustered", report.clustered.size()},
                     {"skipped", report.skipped.size()},
                     {"report", out.generic_string()}})
                   .dump()
            << std::endl;
  return 0;
}

int cmd_bench(const Flags& f) {
  const ModelPtr model = load_model_spec(f.job.model);
  const JobConfig job = resolve(f, model->config());
  RuleSet rules;
  rules.variant = job.rules;
  const auto pairs = job.pairs_for(model->config());
  json rows = json::array();
  for (std::size_t n : parse_sizes(f.lengths)) {
    SyntheticOptions so;
    so.count = 1;
    so.min_len = so.max_len = n;
    so.seed = f.seed + 1;
    const ContrastCase c = make_synthetic_cases(*model, so).at(0);
    for (std::size_t b : parse_sizes(f.batches)) {
      BatchPlan plan;
      plan.batch = b;
      const auto t0 = std::chrono::steady_clock::now();
      const LayerMatrices lm = compute_layer_matrices(*model, c, rules, pairs, plan);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::size_t calls = 0;
      for (const InteractionMatrix& m : lm.matrices) calls += m.backward_calls;
      json row = {{"length", n},
                  {"batch", b},
                  {"layer_pairs", pairs.size()},
                  {"wall_seconds", secs},
                  {"backward_calls", calls},
                  {"expected_calls", pairs.size() * plan.calls_for(n)}};
      log_event(row);
      rows.push_back(row);
    }
  }
  const json table = {{"schema_version", kSchemaVersion}, {"rule_variant", std::string(to_string(job.rules))},
                      {"rows", rows}};
  if (!f.job.out.empty() && f.job.out != ".") write_file(f.job.out / "bench.json", dump_stable(table));
  std::cout << dump_stable(table);
  return 0;
}

int cmd_serve(const Flags& f) {
  require(!f.cases_dir.empty(), ErrorKind::input, "--cases-dir is required");
  const auto colon = f.addr.rfind(':');
  require(colon != std::string::npos, ErrorKind::input, "--addr expects host:port");
  int port = 0;
  try {
    port = std::stoi(f.addr.substr(colon + 1));
  } catch (const std::logic_error&) {
    fail(ErrorKind::input, "bad port in --addr '" + f.addr + "'");
  }
  require(port >= 0 && port < 65536, ErrorKind::input, "port out of range");
  const ModelPtr model = load_model_spec(f.job.model);
  ServiceOptions opt;
  opt.defaults = resolve(f, model->config());
  opt.clusters = f.k;
  opt.seed = f.seed;
  std::map<std::string, ModelPtr> runs;
  for (auto& [id, m] : load_runs(f.runs)) runs[id] = m;
  const Service service(model, CaseStore::load(f.cases_dir), opt, runs);
  HttpServer server(service);
  const int bound = server.bind(f.addr.substr(0, colon), port);
  std::cout << json({{"event", "listening"}, {"port", bound}, {"cache_dir", opt.cache_dir.generic_string()}}).dump()
            << std::endl;
  server.listen();
  return 0;
}

int cmd_make_toy(const Flags& f) {
  const fs::path out = f.job.out == "." ? fs::path("toy.atgw") : f.job.out;
  const ModelPtr model = make_toy_model(f.seed == 0 ? 7 : f.seed);
  std::error_code ec;
  if (out.has_parent_path()) fs::create_directories(out.parent_path(), ec);
  save_model(*model, out);
  std::cout << json({{"model", out.generic_string()}, {"model_id", model_id(*model)}}).dump() << std::endl;
  return 0;
}

int cmd_make_cases(const Flags& f) {
  const ModelPtr model = load_model_spec(f.job.model);
  SyntheticOptions so;
  so.count = f.count;
  so.seed = f.seed == 0 ? 1 : f.seed;
  std::error_code ec;
  fs::create_directories(f.job.out, ec);
  require(!ec, ErrorKind::io, "cannot create " + f.job.out.string());
  const auto cases = make_synthetic_cases(*model, so);
  for (const ContrastCase& c : cases) save_case(c, f.job.out / (c.case_id + ".json"));
  std::cout << json({{"cases", cases.size()}, {"dir", f.job.out.generic_string()}}).dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive attribution graphs for small transformers"};
  app.require_subcommand(1);
  Flags f;

  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--model", f.job.model, "toy, toy:SEED, or an ATGW weight file");
  };
  auto add_job = [&](CLI::App* sub) {
    add_model(sub);
    sub->add_option("--rules", f.rules, "attnlrp | cplrp | gradient");
    sub->add_option("--prune-mode", f.mode, "global | cumulative");
    sub->add_option("--tau", f.job.prune.tau, "global edge threshold");
    sub->add_option("--p", f.job.prune.p, "cumulative mass fraction");
    sub->add_option("--node-threshold", f.job.prune.node_threshold, "minimum |R| for a node");
    sub->add_option("--batch", f.batch, "targets per backward call (default min(8, n))");
    sub->add_option("--layer-pairs", f.layer_pairs, "comma list of s:t, e.g. -1:0,0:1");
    sub->add_option("--out", f.job.out, "output directory");
  };

  auto* attribute = app.add_subcommand("attribute", "token heatmap for one case");
  add_job(attribute);
  attribute->add_option("--case", f.case_path)->required();
  attribute->add_flag("--html", f.html, "also write an HTML rendering");

  auto* graph = app.add_subcommand("graph", "pruned attribution graph for one case");
  add_job(graph);
  graph->add_option("--case", f.case_path)->required();

  auto* analyze = app.add_subcommand("analyze", "batch report over a case directory");
  add_job(analyze);
  analyze->add_option("--cases-dir", f.cases_dir)->required();
  analyze->add_option("--k", f.k, "clusters");
  analyze->add_option("--seed", f.seed, "clustering seed");
  analyze->add_option("--run", f.runs, "extra comparison run as id=model");

  auto* bench = app.add_subcommand("bench", "timing and call counts per batch size");
  add_job(bench);
  bench->add_option("--lengths", f.lengths, "comma list of sequence lengths");
  bench->add_option("--batches", f.batches, "comma list of batch sizes");
  bench->add_option("--seed", f.seed);

  auto* serve = app.add_subcommand("serve", "HTTP API over a case directory");
  add_job(serve);
  serve->add_option("--cases-dir", f.cases_dir)->required();
  serve->add_option("--addr", f.addr, "host:port; port 0 picks a free one");
  serve->add_option("--k", f.k);
  serve->add_option("--seed", f.seed);
  serve->add_option("--run", f.runs, "extra comparison run as id=model");

  auto* make_toy = app.add_subcommand("make-toy", "write the toy model as an ATGW file");
  make_toy->add_option("--seed", f.seed);
  make_toy->add_option("--out", f.job.out, "weight file path");

  auto* make_cases = app.add_subcommand("make-cases", "write synthetic contrast cases");
  add_model(make_cases);
  make_cases->add_option("--count", f.count);
  make_cases->add_option("--seed", f.seed);
  make_cases->add_option("--out", f.job.out, "case directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << error_json(ErrorKind::input, e.what()).dump() << std::endl;
    return 2;
  }

  try {
    if (*attribute) return cmd_attribute(f);
    if (*graph) return cmd_graph(f);
    if (*analyze) return cmd_analyze(f);
    if (*bench) return cmd_bench(f);
    if (*serve) return cmd_serve(f);
    if (*make_toy) return cmd_make_toy(f);
    if (*make_cases) return cmd_make_cases(f);
  } catch (const Error& e) {
    std::cerr << error_json(e.kind(), e.what()).dump() << std::endl;
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << error_json(ErrorKind::computation, e.what()).dump() << std::endl;
    return 3;
  }
  return 2;
}
