// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/model.hpp"

#include <cmath>
#include <random>

#include "attrigraph/error.hpp"

namespace attrigraph {

void ModelConfig::validate() const {
  require(num_layers >= 1 && hidden_dim >= 1 && num_heads >= 1 && vocab_size >= 1 &&
              ffn_dim >= 1,
          ErrorKind::malformed, "model counts must all be at least 1");
  require(hidden_dim % num_heads == 0, ErrorKind::malformed,
          "hidden_dim must be divisible by num_heads");
  require(head_dim() % 2 == 0, ErrorKind::malformed, "rotary head dimension must be even");
  require(norm_epsilon > 0.0 && rope_base > 0.0, ErrorKind::malformed,
          "norm_epsilon and rope_base must be positive");
}

namespace {

std::shared_ptr<const Tensor> take(std::map<std::string, Tensor>& tensors, const std::string& name,
                                   const Shape& expected) {
  auto it = tensors.find(name);
  require(it != tensors.end(), ErrorKind::shape_mismatch, "missing tensor '" + name + "'");
  require(it->second.shape() == expected, ErrorKind::shape_mismatch,
          "tensor '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
              shape_string(expected));
  auto out = std::make_shared<const Tensor>(std::move(it->second));
  tensors.erase(it);
  return out;
}

std::string layer_name(std::size_t l, const char* suffix) {
  return "layer." + std::to_string(l) + "." + suffix;
}

}  // namespace

ModelBundle::ModelBundle(ModelConfig config, std::map<std::string, Tensor> tensors,
                         std::set<TokenId> special_token_ids)
    : config_(config), special_(std::move(special_token_ids)) {
  config_.validate();
  const std::size_t d = config_.hidden_dim, V = config_.vocab_size, f = config_.ffn_dim;
  for (TokenId id : special_)
    require(id >= 0 && static_cast<std::size_t>(id) < V, ErrorKind::malformed,
            "special token id " + std::to_string(id) + " outside the vocabulary");

  embed_ = take(tensors, "embed", {V, d});
  unembed_ = take(tensors, "unembed", {d, V});
  if (config_.tied_unembedding) {
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t e = 0; e < d; ++e)
        require((*embed_)[v * d + e] == (*unembed_)[e * V + v], ErrorKind::malformed,
                "tied_unembedding set but unembed is not embed transposed");
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    LayerWeights w;
    w.wq = take(tensors, layer_name(l, "attn.wq"), {d, d});
    w.wk = take(tensors, layer_name(l, "attn.wk"), {d, d});
    w.wv = take(tensors, layer_name(l, "attn.wv"), {d, d});
    w.wo = take(tensors, layer_name(l, "attn.wo"), {d, d});
    w.gate = take(tensors, layer_name(l, "mlp.gate"), {d, f});
    w.up = take(tensors, layer_name(l, "mlp.up"), {d, f});
    w.down = take(tensors, layer_name(l, "mlp.down"), {f, d});
    w.norm1 = take(tensors, layer_name(l, "norm1"), {d});
    w.norm2 = take(tensors, layer_name(l, "norm2"), {d});
    layers_.push_back(std::move(w));
  }
  final_norm_ = take(tensors, "final_norm", {d});
  require(tensors.empty(), ErrorKind::malformed,
          "unexpected tensor '" + (tensors.empty() ? std::string() : tensors.begin()->first) + "'");
}

std::vector<std::pair<std::string, std::shared_ptr<const Tensor>>> ModelBundle::named_tensors()
    const {
  std::vector<std::pair<std::string, std::shared_ptr<const Tensor>>> out;
  out.emplace_back("embed", embed_);
  out.emplace_back("unembed", unembed_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerWeights& w = layers_[l];
    out.emplace_back(layer_name(l, "attn.wq"), w.wq);
    out.emplace_back(layer_name(l, "attn.wk"), w.wk);
    out.emplace_back(layer_name(l, "attn.wv"), w.wv);
    out.emplace_back(layer_name(l, "attn.wo"), w.wo);
    out.emplace_back(layer_name(l, "mlp.gate"), w.gate);
    out.emplace_back(layer_name(l, "mlp.up"), w.up);
    out.emplace_back(layer_name(l, "mlp.down"), w.down);
    out.emplace_back(layer_name(l, "norm1"), w.norm1);
    out.emplace_back(layer_name(l, "norm2"), w.norm2);
  }
  out.emplace_back("final_norm", final_norm_);
  return out;
}

ModelPtr make_toy_model(std::uint64_t seed, ModelConfig config) {
  config.validate();
  std::mt19937_64 rng(seed);
  // Raw engine output keeps the weights identical across standard libraries.
  auto uniform = [&](double bound) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return static_cast<double>(static_cast<float>((2.0 * u - 1.0) * bound));
  };
  auto fill = [&](Shape shape, double bound, double offset = 0.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(offset + uniform(bound)));
    return t;
  };
  const std::size_t d = config.hidden_dim, V = config.vocab_size, f = config.ffn_dim;
  const double proj = std::sqrt(3.0 / static_cast<double>(d));

  std::map<std::string, Tensor> tensors;
  tensors["embed"] = fill({V, d}, 1.0);
  if (config.tied_unembedding) {
    Tensor u({d, V});
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t e = 0; e < d; ++e) u[e * V + v] = tensors["embed"][v * d + e];
    tensors["unembed"] = std::move(u);
  } else {
    tensors["unembed"] = fill({d, V}, 3.0 * proj);
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    tensors[layer_name(l, "attn.wq")] = fill({d, d}, 2.0 * proj);
    tensors[layer_name(l, "attn.wk")] = fill({d, d}, 2.0 * proj);
    tensors[layer_name(l, "attn.wv")] = fill({d, d}, proj);
    tensors[layer_name(l, "attn.wo")] = fill({d, d}, proj);
    tensors[layer_name(l, "mlp.gate")] = fill({d, f}, proj);
    tensors[layer_name(l, "mlp.up")] = fill({d, f}, proj);
    tensors[layer_name(l, "mlp.down")] = fill({f, d}, std::sqrt(3.0 / static_cast<double>(f)));
    tensors[layer_name(l, "norm1")] = fill({d}, 0.1, 1.0);
    tensors[layer_name(l, "norm2")] = fill({d}, 0.1, 1.0);
  }
  tensors["final_norm"] = fill({d}, 0.1, 1.0);
  return std::make_shared<const ModelBundle>(config, std::move(tensors),
                                             std::set<TokenId>{0, 1, 2});
}

std::span<const double> LayerStates::row(int layer, std::size_t pos) const {
  const std::size_t s = slot(layer);
  require(s < num_slots && pos < seq_len, ErrorKind::input,
          "state (" + std::to_string(layer) + ", " + std::to_string(pos) + ") out of range");
  return h.data().subspan((s * seq_len + pos) * hidden, hidden);
}

Tensor LayerStates::layer_tensor(int layer) const {
  const std::size_t s = slot(layer);
  require(s < num_slots, ErrorKind::input, "layer " + std::to_string(layer) + " out of range");
  auto begin = h.values().begin() + static_cast<std::ptrdiff_t>(s * seq_len * hidden);
  return Tensor({seq_len, hidden},
                std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(seq_len * hidden)));
}

Tensor embed_tokens(const ModelBundle& model, std::span<const TokenId> tokens) {
  const ModelConfig& c = model.config();
  require(!tokens.empty(), ErrorKind::input, "empty token sequence");
  Tensor x({tokens.size(), c.hidden_dim});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    require(t >= 0 && static_cast<std::size_t>(t) < c.vocab_size, ErrorKind::input,
            "token id " + std::to_string(t) + " at position " + std::to_string(i) +
                " outside the vocabulary");
    const auto row = model.embed().data().subspan(static_cast<std::size_t>(t) * c.hidden_dim,
                                                  c.hidden_dim);
    std::copy(row.begin(), row.end(), x.data().begin() + static_cast<std::ptrdiff_t>(i * c.hidden_dim));
  }
  return x;
}

NodeId append_blocks(Tape& tape, const ModelBundle& model, NodeId x, int first, int last,
                     std::vector<NodeId>* outputs) {
  const ModelConfig& c = model.config();
  const int L = static_cast<int>(c.num_layers);
  require(first >= 0 && last < L, ErrorKind::input,
          "block range [" + std::to_string(first) + ", " + std::to_string(last) +
              "] outside the model");
  const std::size_t heads = c.num_heads;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));

  for (int l = first; l <= last; ++l) {
    const LayerWeights& w = model.layer(static_cast<std::size_t>(l));
    const NodeId a = tape.rms_norm(x, tape.constant(w.norm1), c.norm_epsilon);
    NodeId q = tape.linear(a, tape.constant(w.wq));
    NodeId k = tape.linear(a, tape.constant(w.wk));
    const NodeId v = tape.linear(a, tape.constant(w.wv));
    q = tape.rope(q, heads, c.rope_base);
    k = tape.rope(k, heads, c.rope_base);
    const NodeId s = tape.scale(
        tape.scores(tape.split_heads(q, heads), tape.split_heads(k, heads), true), score_scale);
    const NodeId p = tape.causal_softmax(s);
    const NodeId o = tape.merge_heads(tape.mix(p, tape.split_heads(v, heads), true));
    x = tape.add(x, tape.linear(o, tape.constant(w.wo)));

    const NodeId b = tape.rms_norm(x, tape.constant(w.norm2), c.norm_epsilon);
    const NodeId gate = tape.silu(tape.linear(b, tape.constant(w.gate)));
    const NodeId up = tape.linear(b, tape.constant(w.up));
    x = tape.add(x, tape.linear(tape.mul(gate, up), tape.constant(w.down)));

    if (l == L - 1) x = tape.rms_norm(x, tape.constant(model.final_norm()), c.norm_epsilon);
    if (outputs) outputs->push_back(x);
  }
  return x;
}

ModelTape build_model_tape(const ModelBundle& model, std::size_t n) {
  require(n > 0, ErrorKind::input, "empty token sequence");
  ModelTape mt;
  mt.tape = std::make_unique<Tape>();
  const NodeId in = mt.tape->input({n, model.config().hidden_dim});
  mt.slot_nodes.push_back(in);
  append_blocks(*mt.tape, model, in, 0, static_cast<int>(model.config().num_layers) - 1,
                &mt.slot_nodes);
  return mt;
}

ForwardResult run_model_tape(const ModelBundle& model, ModelTape mt,
                             std::span<const TokenId> tokens) {
  const ModelConfig& c = model.config();
  const std::size_t n = tokens.size(), d = c.hidden_dim;
  require(mt.tape && mt.tape->shape(mt.slot_nodes.front()) == Shape{n, d}, ErrorKind::input,
          "model tape was built for a different sequence length");
  const Tensor inputs[] = {embed_tokens(model, tokens)};

  ForwardResult out;
  out.tape = std::move(mt.tape);
  out.slot_nodes = std::move(mt.slot_nodes);
  out.acts = forward(*out.tape, inputs);

  LayerStates& st = out.states;
  st.num_slots = c.num_layers + 1;
  st.seq_len = n;
  st.hidden = d;
  st.h = Tensor({st.num_slots, n, d});
  for (std::size_t s = 0; s < st.num_slots; ++s) {
    const Tensor& v = out.acts[out.slot_nodes[s]];
    std::copy(v.data().begin(), v.data().end(),
              st.h.data().begin() + static_cast<std::ptrdiff_t>(s * n * d));
  }
  return out;
}

ForwardResult forward_full(const ModelBundle& model, std::span<const TokenId> tokens) {
  require(!tokens.empty(), ErrorKind::input, "empty token sequence");
  return run_model_tape(model, build_model_tape(model, tokens.size()), tokens);
}

Tensor logits_at(const ModelBundle& model, const LayerStates& states, std::size_t position) {
  const ModelConfig& c = model.config();
  require(position < states.seq_len, ErrorKind::input,
          "position " + std::to_string(position) + " outside sequence of length " +
              std::to_string(states.seq_len));
  const auto h = states.row(static_cast<int>(c.num_layers) - 1, position);
  const std::size_t V = c.vocab_size;
  Tensor logits({V});
  const Tensor& W = model.unembed();
  for (std::size_t e = 0; e < c.hidden_dim; ++e)
    for (std::size_t v = 0; v < V; ++v) logits[v] += h[e] * W[e * V + v];
  return logits;
}

Tensor logits_for(const ModelBundle& model, std::span<const TokenId> tokens,
                  std::size_t position) {
  require(position < tokens.size(), ErrorKind::input, "position outside the token sequence");
  // Causal attention: the prefix alone determines the state at `position`.
  return logits_at(model, forward_full(model, tokens.first(position + 1)).states, position);
}

}  // namespace attrigraph
