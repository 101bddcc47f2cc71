// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "attrigraph/tape.hpp"
#include "attrigraph/tensor.hpp"

namespace attrigraph {

using TokenId = std::int64_t;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 101;
  std::size_t ffn_dim = 64;
  double norm_epsilon = 1e-6;
  double rope_base = 10000.0;
  bool tied_unembedding = false;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  std::shared_ptr<const Tensor> wq, wk, wv, wo;  // [d x d]
  std::shared_ptr<const Tensor> gate, up;        // [d x f]
  std::shared_ptr<const Tensor> down;            // [f x d]
  std::shared_ptr<const Tensor> norm1, norm2;    // [d]
};

/// Decoder-only transformer: pre-norm RMS-norm blocks, rotary positions,
/// causal multi-head attention and a SiLU-gated MLP. Immutable once built.
class ModelBundle {
 public:
  /// Takes every named tensor of the weight format; validates shapes.
  ModelBundle(ModelConfig config, std::map<std::string, Tensor> tensors,
              std::set<TokenId> special_token_ids);

  const ModelConfig& config() const noexcept { return config_; }
  const std::set<TokenId>& special_token_ids() const noexcept { return special_; }
  bool is_special(TokenId id) const { return special_.count(id) > 0; }

  const Tensor& embed() const { return *embed_; }      // [V x d]
  const Tensor& unembed() const { return *unembed_; }  // [d x V]
  const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }
  const std::shared_ptr<const Tensor>& final_norm() const { return final_norm_; }

  /// Tensors in weight-file order.
  std::vector<std::pair<std::string, std::shared_ptr<const Tensor>>> named_tensors() const;

 private:
  ModelConfig config_;
  std::set<TokenId> special_;
  std::shared_ptr<const Tensor> embed_, unembed_, final_norm_;
  std::vector<LayerWeights> layers_;
};

using ModelPtr = std::shared_ptr<const ModelBundle>;

// Weight file: "ATGW", u32 version, u32 config length, config JSON,
// payload of row-major f32 tensors, u32 CRC32 of the payload.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

ModelPtr load_model(const std::filesystem::path& path);
ModelPtr parse_model(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_model(const ModelBundle& model);
void save_model(const ModelBundle& model, const std::filesystem::path& path);

/// CRC32 of the weight payload; doubles as a model identity.
std::uint32_t model_checksum(const ModelBundle& model);

/// Deterministic toy model with f32-representable weights.
/// Token 0 is BOS, 1 is the pad/mask token, 2 is EOS; all three are special.
ModelPtr make_toy_model(std::uint64_t seed = 7, ModelConfig config = {});

/// Hidden states: slot 0 holds the embeddings, slot l+1 the output of block l.
/// The last slot carries the final norm, so logits are slot_L . W_U.
struct LayerStates {
  std::size_t num_slots = 0;
  std::size_t seq_len = 0;
  std::size_t hidden = 0;
  Tensor h;  // [(L+1) x n x d]

  static std::size_t slot(int layer) { return static_cast<std::size_t>(layer + 1); }
  std::span<const double> row(int layer, std::size_t pos) const;
  Tensor layer_tensor(int layer) const;  // [n x d]
};

struct ForwardResult {
  LayerStates states;
  std::unique_ptr<Tape> tape;  // heap-pinned: acts refers to it
  Activations acts;
  std::vector<NodeId> slot_nodes;  // tape node of every state slot
};

Tensor embed_tokens(const ModelBundle& model, std::span<const TokenId> tokens);

/// Appends blocks [first, last] to the tape starting from `x` ([..., n, d]).
/// The final norm is appended when `last` is the last block.
/// Node ids of every block output are appended to `outputs` when given.
NodeId append_blocks(Tape& tape, const ModelBundle& model, NodeId x, int first, int last,
                     std::vector<NodeId>* outputs = nullptr);

/// Tape of the whole model over n positions, before any forward execution.
/// Callers may append further records (an objective) before running it.
struct ModelTape {
  std::unique_ptr<Tape> tape;
  std::vector<NodeId> slot_nodes;
};

ModelTape build_model_tape(const ModelBundle& model, std::size_t n);
ForwardResult run_model_tape(const ModelBundle& model, ModelTape mt,
                             std::span<const TokenId> tokens);

ForwardResult forward_full(const ModelBundle& model, std::span<const TokenId> tokens);

Tensor logits_at(const ModelBundle& model, const LayerStates& states, std::size_t position);

/// Logits at a position from a fresh forward pass.
Tensor logits_for(const ModelBundle& model, std::span<const TokenId> tokens,
                  std::size_t position);

}  // namespace attrigraph
