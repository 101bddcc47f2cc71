// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attrigraph/model.hpp"
#include "attrigraph/tape.hpp"

namespace attrigraph {

/// Half-open token range [begin, end).
struct Segment {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// A failure instance: the model prefers `target` at `position` where
/// `contrast` would have been correct.
struct ContrastCase {
  std::string case_id;
  std::vector<TokenId> tokens;
  std::vector<std::string> display;
  std::size_t position = 0;
  TokenId target = 0;
  TokenId contrast = 0;
  std::vector<Segment> segments;
  std::vector<bool> special_mask;
  TokenId mask_token_id = 1;

  std::size_t size() const noexcept { return tokens.size(); }
  /// Throws ErrorKind::input. `allow_equal_pair` relaxes target != contrast.
  void validate(bool allow_equal_pair = false) const;
  /// Also checks token ids against the model vocabulary.
  void validate_for(const ModelBundle& model, bool allow_equal_pair = false) const;

  friend bool operator==(const ContrastCase&, const ContrastCase&) = default;
};

ContrastCase load_case(const std::filesystem::path& path);
void save_case(const ContrastCase& c, const std::filesystem::path& path);
/// Every *.json file of a directory, sorted by case id.
std::vector<ContrastCase> load_cases(const std::filesystem::path& dir);

/// W_U[:, target] - W_U[:, contrast].
Tensor contrast_direction(const ModelBundle& model, TokenId target, TokenId contrast);

/// ℓ(target) - ℓ(contrast) at the case position.
double delta_logit(const ModelBundle& model, const ContrastCase& c);

/// One forward and one backward from Δℓ over the whole case sequence.
/// grads holds the gradient of every state slot, [(L+1) x n x d].
struct ObjectivePass {
  ForwardResult forward;
  double delta_logit = 0.0;
  Tensor grads;
};

ObjectivePass objective_pass(const ModelBundle& model, const ContrastCase& c,
                             const RuleSet& rules);

struct Heatmap {
  std::string case_id;
  RuleVariant variant = RuleVariant::attnlrp;
  std::vector<double> raw;
  std::vector<double> normalized;
  std::vector<bool> special_mask;
  double normalizer = 1.0;
  double delta_logit = 0.0;
  bool degenerate = false;  // every non-special relevance is zero

  friend bool operator==(const Heatmap&, const Heatmap&) = default;
};

/// Normalizes raw token relevances by max |raw| over non-special tokens.
Heatmap make_heatmap(std::vector<double> raw, std::vector<bool> special_mask, double delta);

Heatmap input_attribution(const ModelBundle& model, const ContrastCase& c, const RuleSet& rules);

std::string heatmap_html(const Heatmap& h, const ContrastCase& c);

struct SegmentSum {
  std::string name;
  double sum = 0.0;
  std::size_t count = 0;

  friend bool operator==(const SegmentSum&, const SegmentSum&) = default;
};

/// Per-segment sums of normalized relevance over the non-special members.
struct SegmentBreakdown {
  std::vector<SegmentSum> segments;

  const SegmentSum* find(const std::string& name) const;
};

SegmentBreakdown segment_breakdown(const Heatmap& h, const ContrastCase& c);

/// k highest logits at `position`, descending, ties by ascending id. k is
/// clamped to the vocabulary size.
std::vector<std::pair<TokenId, double>> topk_alternatives(const ModelBundle& model,
                                                          std::span<const TokenId> tokens,
                                                          std::size_t position, std::size_t k);

/// Greedy token with the lowest id winning ties.
TokenId greedy_token(const Tensor& logits);

struct PairVerdict {
  bool valid = false;
  double delta_logit = 0.0;
};

/// Strict Δℓ > threshold.
PairVerdict validate_pair(double delta, double threshold = 1.0);
PairVerdict validate_pair(const ModelBundle& model, const ContrastCase& c,
                          double threshold = 1.0);

struct PerturbationResult {
  std::size_t tokens_masked = 0;
  bool fixed = false;
  std::vector<std::size_t> masked_positions;
};

/// Replaces the highest-attributed non-special tokens at positions <= the
/// case position with the case mask id, one at a time, until the greedy
/// token stops being the target or `max_masked` tokens are gone.
PerturbationResult perturbation_fix(const ModelBundle& model, const ContrastCase& c,
                                    const Heatmap& h, std::size_t max_masked);

struct SyntheticOptions {
  std::size_t count = 20;
  std::size_t min_len = 12;
  std::size_t max_len = 24;
  std::uint64_t seed = 1;
};

/// Random contrast cases whose target is the model's greedy token and whose
/// contrast is the runner-up, so Δℓ > 0. Position 0 holds BOS (token 0).
std::vector<ContrastCase> make_synthetic_cases(const ModelBundle& model,
                                               const SyntheticOptions& opt = {});

}  // namespace attrigraph
