// SPDX-License-Identifier: Apache-2.0
// Job configuration, the on-disk artifact cache, and the request handlers
// behind both the CLI and the HTTP server.
#pragma once

#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

#include <json.hpp>

#include "attrigraph/analysis.hpp"
#include "attrigraph/error.hpp"
#include "attrigraph/graph.hpp"

namespace attrigraph {

/// 0 ok, 2 input/validation, 3 computation, 4 I/O and model loading.
int exit_code_for(ErrorKind kind);
nlohmann::json error_json(ErrorKind kind, const std::string& message);

/// "toy", "toy:SEED", or a path to an ATGW weight file.
ModelPtr load_model_spec(const std::string& spec);
/// Content hash of the weights, so equal models share cache entries.
std::string model_id(const ModelBundle& model);

/// Δℓ and segment sums of every case under one model, for compare_runs.
RunData run_data(const std::string& run_id, const ModelBundle& model,
                 const std::vector<ContrastCase>& cases, const RuleSet& rules);

std::vector<LayerPair> parse_layer_pairs(const std::string& text);  // "-1:0,0:1"
std::string format_layer_pairs(const std::vector<LayerPair>& pairs);

struct JobConfig {
  std::string model = "toy";
  RuleVariant rules = RuleVariant::attnlrp;
  PruneConfig prune;
  std::optional<std::size_t> batch;            // default min(8, n)
  std::optional<std::vector<LayerPair>> layer_pairs;  // default consecutive
  std::filesystem::path out = ".";

  void validate(const ModelConfig& config) const;
  BatchPlan plan_for(std::size_t n) const;
  std::vector<LayerPair> pairs_for(const ModelConfig& config) const;
  nlohmann::json to_json() const;
};

std::uint64_t fnv1a64(std::string_view bytes);

/// Key over every JobConfig field plus the case, model and artifact kind.
std::string cache_key(const std::string& artifact, const std::string& case_id,
                      const std::string& model_id, const JobConfig& job);

/// Directory-backed artifact cache. ATTRIGRAPH_CACHE_DIR overrides the default.
class ArtifactCache {
 public:
  explicit ArtifactCache(std::filesystem::path dir);
  static std::filesystem::path default_dir();

  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const std::string& bytes) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

/// Read-only view of a directory of case files.
class CaseStore {
 public:
  explicit CaseStore(std::vector<ContrastCase> cases);
  static CaseStore load(const std::filesystem::path& dir);

  const std::vector<ContrastCase>& cases() const { return cases_; }
  const ContrastCase* find(const std::string& id) const;

 private:
  std::vector<ContrastCase> cases_;
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
  std::map<std::string, std::string> headers;
};

using Params = std::map<std::string, std::string>;

struct ServiceOptions {
  JobConfig defaults;
  std::filesystem::path cache_dir = ArtifactCache::default_dir();
  std::size_t clusters = 3;
  std::uint64_t seed = 0;
};

class Service {
 public:
  /// `runs` maps run ids to models for /compare; the primary model is "default".
  Service(ModelPtr model, CaseStore store, ServiceOptions opt,
          std::map<std::string, ModelPtr> runs = {});

  Response cases() const;
  Response case_detail(const std::string& id) const;
  Response heatmap(const Params& q) const;
  Response graph(const Params& q) const;
  Response refine(const std::string& body) const;
  Response analysis(const Params& q) const;
  Response compare(const Params& q) const;

  const CaseStore& store() const { return store_; }
  std::size_t matrix_builds() const;

 private:
  JobConfig job_from(const Params& q) const;
  const ContrastCase& case_from(const Params& q) const;
  std::shared_ptr<const LayerMatrices> matrices(const ContrastCase& c, const JobConfig& job) const;

  ModelPtr model_;
  std::string model_id_;
  CaseStore store_;
  ServiceOptions opt_;
  ArtifactCache cache_;
  std::map<std::string, ModelPtr> runs_;

  mutable std::mutex mu_;
  // Builds in flight are shared, so concurrent misses on one key compute once.
  mutable std::map<std::string, std::shared_future<std::shared_ptr<const LayerMatrices>>> matrices_;
  mutable std::size_t builds_ = 0;
  mutable std::counting_semaphore<2> build_slots_{2};
};

/// Wraps a handler: Error kinds become 4xx/5xx responses with error JSON.
Response guarded(const std::function<Response()>& fn);

/// Blocks serving HTTP until `stop` is called from another thread.
class HttpServer {
 public:
  explicit HttpServer(const Service& service);
  ~HttpServer();
  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  void listen();  // blocks
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace attrigraph
