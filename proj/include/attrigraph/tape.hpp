// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse pass whose backward rules are patched so that
// gradient x input reads out LRP relevance.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attrigraph/tensor.hpp"

namespace attrigraph {

enum class RuleVariant { attnlrp, cplrp, gradient };

std::string_view to_string(RuleVariant variant);
RuleVariant parse_rule_variant(std::string_view text);

/// Backward rule selection for one attribution run.
///
/// attnlrp: RMS statistic held constant, bilinear products split relevance
///          evenly between both factors, softmax uses its true Jacobian.
/// cplrp:   as attnlrp, but softmax outputs are detached so attention weights
///          act as constants and the value path carries all relevance.
/// gradient: the unmodified gradient of every primitive.
struct RuleSet {
  RuleVariant variant = RuleVariant::attnlrp;
  double epsilon = 1e-9;

  void validate() const;
};

using NodeId = std::uint32_t;

enum class OpKind {
  input,
  constant,
  linear,          // x[..., k] * W[k, m], W constant
  add,
  mul,             // elementwise product of two activations
  scale,
  silu,
  rms_norm,
  rope,
  split_heads,     // [..., n, H*dh] -> [..., H, n, dh]
  merge_heads,     // [..., H, n, dh] -> [..., n, H*dh]
  scores,          // q[..., n, k] * kᵀ[..., m, k] -> [..., n, m]
  mix,             // p[..., n, m] * v[..., m, k] -> [..., n, k]
  causal_softmax,  // softmax over the last axis with key j <= query i
  contract,        // scalar sum(x * W), W constant
  custom,          // forward-only probe, no backward rule under any variant
};

std::string_view to_string(OpKind kind);

using CustomFn = std::function<Tensor(std::span<const Tensor* const>)>;

/// One primitive on the tape. The record index is the id of its output node.
struct Record {
  OpKind kind = OpKind::input;
  std::vector<NodeId> inputs;
  NodeId output = 0;
  Shape shape;

  double scalar = 0.0;  // scale factor or norm epsilon
  std::size_t heads = 0;
  bool causal = false;
  std::shared_ptr<const Tensor> constant;
  std::shared_ptr<const std::vector<double>> table;  // rope cos | sin
  std::string name;
  CustomFn fn;
};

class Tape {
 public:
  NodeId input(Shape shape);
  NodeId constant(std::shared_ptr<const Tensor> value);
  NodeId constant(Tensor value);

  NodeId linear(NodeId x, NodeId weight);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId silu(NodeId x);
  NodeId rms_norm(NodeId x, NodeId weight, double eps);
  NodeId rope(NodeId x, std::size_t heads, double base);
  NodeId split_heads(NodeId x, std::size_t heads);
  NodeId merge_heads(NodeId x);
  NodeId scores(NodeId q, NodeId k, bool causal);
  NodeId mix(NodeId p, NodeId v, bool causal);
  NodeId causal_softmax(NodeId x);
  NodeId contract(NodeId x, std::shared_ptr<const Tensor> weights);
  NodeId custom(std::string name, std::vector<NodeId> inputs, Shape shape, CustomFn fn);

  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<Record>& records() const noexcept { return records_; }
  const Record& record(NodeId id) const;
  const Shape& shape(NodeId id) const { return record(id).shape; }
  /// Placeholder nodes in declaration order; forward binds inputs to these.
  const std::vector<NodeId>& inputs() const noexcept { return inputs_; }

 private:
  NodeId push(Record record);
  const Record& checked(NodeId id) const;

  std::vector<Record> records_;
  std::vector<NodeId> inputs_;
};

/// Values of every node produced by one forward execution of a tape.
class Activations {
 public:
  Activations() = default;
  Activations(const Tape* tape, std::vector<Tensor> values)
      : tape_(tape), values_(std::move(values)) {}

  const Tensor& operator[](NodeId id) const;
  std::size_t size() const noexcept { return values_.size(); }
  const Tape* tape() const noexcept { return tape_; }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> values_;  // constants stay empty and resolve via the tape
};

/// Executes every record in order. Inputs bind to placeholders positionally.
Activations forward(const Tape& tape, std::span<const Tensor> inputs);

/// Patched gradients of the seeded node with respect to upstream nodes.
///
/// A seed whose shape is [G, ...shape(from)] propagates G cotangents at once
/// over the same saved activations; the gradient of each node then carries
/// the same leading G axis.
class Gradients {
 public:
  std::size_t cotangents() const noexcept { return cotangents_; }
  bool has(NodeId id) const noexcept { return id < present_.size() && present_[id]; }
  const Tensor& at(NodeId id) const;

 private:
  friend Gradients backward(const Tape&, const Activations&, NodeId, const Tensor&,
                            const RuleSet&, std::span<const NodeId>);
  std::size_t cotangents_ = 1;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

/// `keep` lists the nodes whose gradients are returned; empty keeps all.
Gradients backward(const Tape& tape, const Activations& acts, NodeId from, const Tensor& seed,
                   const RuleSet& rules, std::span<const NodeId> keep = {});

/// Backward calls issued on this thread since it started.
std::uint64_t backward_call_count() noexcept;

/// activation * gradient, summed over `reduce_dims` (ascending, unique).
Tensor relevance(const Tensor& activation, const Tensor& gradient,
                 std::span<const std::size_t> reduce_dims = {});

}  // namespace attrigraph
