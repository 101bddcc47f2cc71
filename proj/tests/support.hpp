// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit tests.
#pragma once

#include <cmath>
#include <random>

#include "attrigraph/tensor.hpp"

namespace testing_support {

using attrigraph::Shape;
using attrigraph::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 0.0) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

}  // namespace testing_support

#include <map>
#include <string>

#include "attrigraph/model.hpp"

namespace testing_support {

inline std::map<std::string, Tensor> tensors_of(const attrigraph::ModelBundle& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m.named_tensors()) out[name] = *t;
  return out;
}

// Rows are orthonormal (Gram-Schmidt on random rows); needs rows <= cols.
inline Tensor orthonormal_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  Tensor E = random_tensor(rng, {rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < r; ++p) {
      double dot = 0.0;
      for (std::size_t e = 0; e < cols; ++e) dot += E.at({r, e}) * E.at({p, e});
      for (std::size_t e = 0; e < cols; ++e) E.at({r, e}) -= dot * E.at({p, e});
    }
    double norm = 0.0;
    for (std::size_t e = 0; e < cols; ++e) norm += E.at({r, e}) * E.at({r, e});
    for (std::size_t e = 0; e < cols; ++e) E.at({r, e}) /= std::sqrt(norm);
  }
  return E;
}

// One block whose attention output and MLP down projections are zero, so
// every position only sees its own token. Embeddings are orthonormal and
// tied, which makes the greedy token at a position equal its input token.
inline attrigraph::ModelPtr identity_block_model(std::size_t vocab = 8, std::uint64_t seed = 5) {
  attrigraph::ModelConfig c;
  c.num_layers = 1;
  c.hidden_dim = vocab;
  c.num_heads = 2;
  c.vocab_size = vocab;
  c.ffn_dim = 4;
  c.tied_unembedding = true;
  std::mt19937_64 rng(seed);
  const std::size_t d = vocab;
  Tensor E = orthonormal_rows(rng, vocab, d);
  Tensor U({d, vocab});
  for (std::size_t v = 0; v < vocab; ++v)
    for (std::size_t e = 0; e < d; ++e) U.at({e, v}) = E.at({v, e});
  std::map<std::string, Tensor> t;
  t["embed"] = E;
  t["unembed"] = U;
  t["layer.0.attn.wq"] = random_tensor(rng, {d, d});
  t["layer.0.attn.wk"] = random_tensor(rng, {d, d});
  t["layer.0.attn.wv"] = random_tensor(rng, {d, d});
  t["layer.0.attn.wo"] = Tensor({d, d});
  t["layer.0.mlp.gate"] = random_tensor(rng, {d, 4});
  t["layer.0.mlp.up"] = random_tensor(rng, {d, 4});
  t["layer.0.mlp.down"] = Tensor({4, d});
  t["layer.0.norm1"] = Tensor({d}, std::vector<double>(d, 1.0));
  t["layer.0.norm2"] = Tensor({d}, std::vector<double>(d, 1.0));
  t["final_norm"] = Tensor({d}, std::vector<double>(d, 1.0));
  return std::make_shared<const attrigraph::ModelBundle>(c, std::move(t),
                                                         std::set<attrigraph::TokenId>{0, 1});
}

}  // namespace testing_support
