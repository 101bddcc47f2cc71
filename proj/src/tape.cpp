// SPDX-License-Identifier: Apache-2.0
#include "attrigraph/tape.hpp"

#include <cmath>

#include "attrigraph/error.hpp"
#include "kernels.hpp"

namespace attrigraph {

std::string_view to_string(RuleVariant variant) {
  switch (variant) {
    case RuleVariant::attnlrp: return "attnlrp";
    case RuleVariant::cplrp: return "cplrp";
    case RuleVariant::gradient: return "gradient";
  }
  return "unknown";
}

RuleVariant parse_rule_variant(std::string_view text) {
  if (text == "attnlrp") return RuleVariant::attnlrp;
  if (text == "cplrp") return RuleVariant::cplrp;
  if (text == "gradient") return RuleVariant::gradient;
  fail(ErrorKind::input, "unknown rule variant '" + std::string(text) + "'");
}

void RuleSet::validate() const {
  require(epsilon > 0.0 && std::isfinite(epsilon), ErrorKind::input,
          "rule epsilon must be a positive finite number");
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::linear: return "linear";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::silu: return "silu";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::rope: return "rope";
    case OpKind::split_heads: return "split_heads";
    case OpKind::merge_heads: return "merge_heads";
    case OpKind::scores: return "scores";
    case OpKind::mix: return "mix";
    case OpKind::causal_softmax: return "causal_softmax";
    case OpKind::contract: return "contract";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

namespace {

std::string describe(const Record& r) {
  return std::string(to_string(r.kind)) + " #" + std::to_string(r.output);
}

Shape leading(const Shape& s, std::size_t drop) { return Shape(s.begin(), s.end() - drop); }

}  // namespace

const Record& Tape::record(NodeId id) const { return checked(id); }

const Record& Tape::checked(NodeId id) const {
  require(id < records_.size(), ErrorKind::structural,
          "node " + std::to_string(id) + " is not on the tape");
  return records_[id];
}

NodeId Tape::push(Record record) {
  record.output = static_cast<NodeId>(records_.size());
  records_.push_back(std::move(record));
  return records_.back().output;
}

NodeId Tape::input(Shape shape) {
  require(!shape.empty(), ErrorKind::input, "input placeholders need at least one axis");
  for (std::size_t d : shape)
    require(d > 0, ErrorKind::input, "zero-length axis in input " + shape_string(shape));
  Record r;
  r.kind = OpKind::input;
  r.shape = std::move(shape);
  const NodeId id = push(std::move(r));
  inputs_.push_back(id);
  return id;
}

NodeId Tape::constant(std::shared_ptr<const Tensor> value) {
  require(value != nullptr, ErrorKind::input, "null constant");
  Record r;
  r.kind = OpKind::constant;
  r.shape = value->shape();
  r.constant = std::move(value);
  return push(std::move(r));
}

NodeId Tape::constant(Tensor value) {
  return constant(std::make_shared<const Tensor>(std::move(value)));
}

NodeId Tape::linear(NodeId x, NodeId weight) {
  const Record& w = checked(weight);
  const Shape& xs = checked(x).shape;
  require(w.kind == OpKind::constant && w.shape.size() == 2, ErrorKind::structural,
          "linear weight must be a rank-2 constant");
  require(!xs.empty() && xs.back() == w.shape[0], ErrorKind::structural,
          "linear: " + shape_string(xs) + " cannot multiply " + shape_string(w.shape));
  Record r;
  r.kind = OpKind::linear;
  r.inputs = {x, weight};
  r.shape = xs;
  r.shape.back() = w.shape[1];
  return push(std::move(r));
}

NodeId Tape::add(NodeId a, NodeId b) {
  require(checked(a).shape == checked(b).shape, ErrorKind::structural,
          "add: shape " + shape_string(checked(a).shape) + " vs " + shape_string(checked(b).shape));
  Record r;
  r.kind = OpKind::add;
  r.inputs = {a, b};
  r.shape = checked(a).shape;
  return push(std::move(r));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  require(checked(a).shape == checked(b).shape, ErrorKind::structural,
          "mul: shape " + shape_string(checked(a).shape) + " vs " + shape_string(checked(b).shape));
  Record r;
  r.kind = OpKind::mul;
  r.inputs = {a, b};
  r.shape = checked(a).shape;
  return push(std::move(r));
}

NodeId Tape::scale(NodeId x, double factor) {
  Record r;
  r.kind = OpKind::scale;
  r.inputs = {x};
  r.shape = checked(x).shape;
  r.scalar = factor;
  return push(std::move(r));
}

NodeId Tape::silu(NodeId x) {
  Record r;
  r.kind = OpKind::silu;
  r.inputs = {x};
  r.shape = checked(x).shape;
  return push(std::move(r));
}

NodeId Tape::rms_norm(NodeId x, NodeId weight, double eps) {
  const Record& w = checked(weight);
  const Shape& xs = checked(x).shape;
  require(w.kind == OpKind::constant && w.shape.size() == 1, ErrorKind::structural,
          "rms_norm weight must be a rank-1 constant");
  require(!xs.empty() && xs.back() == w.shape[0], ErrorKind::structural,
          "rms_norm: weight length does not match last axis");
  require(eps > 0.0, ErrorKind::input, "rms_norm epsilon must be positive");
  Record r;
  r.kind = OpKind::rms_norm;
  r.inputs = {x, weight};
  r.shape = xs;
  r.scalar = eps;
  return push(std::move(r));
}

NodeId Tape::rope(NodeId x, std::size_t heads, double base) {
  const Shape& xs = checked(x).shape;
  require(xs.size() >= 2 && heads > 0 && xs.back() % heads == 0, ErrorKind::structural,
          "rope: last axis must split into heads");
  const std::size_t dh = xs.back() / heads;
  require(dh % 2 == 0, ErrorKind::structural, "rope: head dimension must be even");
  require(base > 0.0, ErrorKind::input, "rope base must be positive");
  const std::size_t n = xs[xs.size() - 2];
  const std::size_t half = dh / 2;
  auto table = std::make_shared<std::vector<double>>(2 * n * half);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < half; ++e) {
      const double inv_freq =
          1.0 / std::pow(base, static_cast<double>(2 * e) / static_cast<double>(dh));
      const double angle = static_cast<double>(i) * inv_freq;
      (*table)[i * half + e] = std::cos(angle);
      (*table)[n * half + i * half + e] = std::sin(angle);
    }
  Record r;
  r.kind = OpKind::rope;
  r.inputs = {x};
  r.shape = xs;
  r.heads = heads;
  r.table = std::move(table);
  return push(std::move(r));
}

NodeId Tape::split_heads(NodeId x, std::size_t heads) {
  const Shape& xs = checked(x).shape;
  require(xs.size() >= 2 && heads > 0 && xs.back() % heads == 0, ErrorKind::structural,
          "split_heads: last axis must split into heads");
  Record r;
  r.kind = OpKind::split_heads;
  r.inputs = {x};
  r.shape = leading(xs, 2);
  r.shape.insert(r.shape.end(), {heads, xs[xs.size() - 2], xs.back() / heads});
  r.heads = heads;
  return push(std::move(r));
}

NodeId Tape::merge_heads(NodeId x) {
  const Shape& xs = checked(x).shape;
  require(xs.size() >= 3, ErrorKind::structural, "merge_heads needs [..., H, n, dh]");
  const std::size_t heads = xs[xs.size() - 3];
  Record r;
  r.kind = OpKind::merge_heads;
  r.inputs = {x};
  r.shape = leading(xs, 3);
  r.shape.insert(r.shape.end(), {xs[xs.size() - 2], heads * xs.back()});
  r.heads = heads;
  return push(std::move(r));
}

NodeId Tape::scores(NodeId q, NodeId k, bool causal) {
  const Shape& qs = checked(q).shape;
  const Shape& ks = checked(k).shape;
  require(qs.size() >= 2 && qs.size() == ks.size() && leading(qs, 2) == leading(ks, 2) &&
              qs.back() == ks.back(),
          ErrorKind::structural, "scores: " + shape_string(qs) + " vs " + shape_string(ks));
  const std::size_t n = qs[qs.size() - 2];
  const std::size_t m = ks[ks.size() - 2];
  require(!causal || n == m, ErrorKind::structural, "causal scores need square blocks");
  Record r;
  r.kind = OpKind::scores;
  r.inputs = {q, k};
  r.shape = leading(qs, 2);
  r.shape.insert(r.shape.end(), {n, m});
  r.causal = causal;
  return push(std::move(r));
}

NodeId Tape::mix(NodeId p, NodeId v, bool causal) {
  const Shape& ps = checked(p).shape;
  const Shape& vs = checked(v).shape;
  require(ps.size() >= 2 && ps.size() == vs.size() && leading(ps, 2) == leading(vs, 2) &&
              ps.back() == vs[vs.size() - 2],
          ErrorKind::structural, "mix: " + shape_string(ps) + " vs " + shape_string(vs));
  require(!causal || ps[ps.size() - 2] == ps.back(), ErrorKind::structural,
          "causal mix needs square weights");
  Record r;
  r.kind = OpKind::mix;
  r.inputs = {p, v};
  r.shape = leading(ps, 1);
  r.shape.push_back(vs.back());
  r.causal = causal;
  return push(std::move(r));
}

NodeId Tape::causal_softmax(NodeId x) {
  const Shape& xs = checked(x).shape;
  require(xs.size() >= 2 && xs.back() == xs[xs.size() - 2], ErrorKind::structural,
          "causal_softmax needs square trailing blocks");
  Record r;
  r.kind = OpKind::causal_softmax;
  r.inputs = {x};
  r.shape = xs;
  return push(std::move(r));
}

NodeId Tape::contract(NodeId x, std::shared_ptr<const Tensor> weights) {
  require(weights != nullptr && weights->shape() == checked(x).shape, ErrorKind::structural,
          "contract weights must match the contracted node's shape");
  Record r;
  r.kind = OpKind::contract;
  r.inputs = {x};
  r.shape = {};
  r.constant = std::move(weights);
  return push(std::move(r));
}

NodeId Tape::custom(std::string name, std::vector<NodeId> inputs, Shape shape, CustomFn fn) {
  for (NodeId id : inputs) checked(id);
  require(static_cast<bool>(fn), ErrorKind::input, "custom op needs a forward function");
  Record r;
  r.kind = OpKind::custom;
  r.inputs = std::move(inputs);
  r.shape = std::move(shape);
  r.name = std::move(name);
  r.fn = std::move(fn);
  return push(std::move(r));
}

const Tensor& Activations::operator[](NodeId id) const {
  require(tape_ != nullptr && id < values_.size(), ErrorKind::structural,
          "no saved activation for node " + std::to_string(id));
  const Record& r = tape_->record(id);
  if (r.kind == OpKind::constant) return *r.constant;
  return values_[id];
}

Activations forward(const Tape& tape, std::span<const Tensor> inputs) {
  namespace k = kernels;
  const auto& placeholders = tape.inputs();
  require(inputs.size() >= placeholders.size(), ErrorKind::structural,
          "tape needs " + std::to_string(placeholders.size()) + " inputs, got " +
              std::to_string(inputs.size()));

  std::vector<Tensor> values(tape.size());
  auto val = [&](NodeId id) -> const Tensor& {
    const Record& r = tape.record(id);
    return r.kind == OpKind::constant ? *r.constant : values[id];
  };

  std::size_t next_input = 0;
  for (const Record& r : tape.records()) {
    if (r.kind == OpKind::constant) continue;
    if (r.kind == OpKind::input) {
      const Tensor& given = inputs[next_input++];
      require(given.shape() == r.shape, ErrorKind::structural,
              "input #" + std::to_string(r.output) + " expects " + shape_string(r.shape) +
                  ", got " + shape_string(given.shape()));
      require(given.all_finite(), ErrorKind::numeric, "non-finite value in input");
      values[r.output] = given;
      continue;
    }

    Tensor out(r.shape);
    double* y = out.data().data();
    const Shape& s = r.shape;
    switch (r.kind) {
      case OpKind::linear: {
        const Tensor& x = val(r.inputs[0]);
        const Tensor& w = val(r.inputs[1]);
        const std::size_t kdim = w.dim(0), m = w.dim(1);
        k::linear_fwd(x.data().data(), w.data().data(), y, x.size() / kdim, kdim, m);
        break;
      }
      case OpKind::add: {
        const Tensor& a = val(r.inputs[0]);
        const Tensor& b = val(r.inputs[1]);
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = a[i] + b[i];
        break;
      }
      case OpKind::mul: {
        const Tensor& a = val(r.inputs[0]);
        const Tensor& b = val(r.inputs[1]);
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = a[i] * b[i];
        break;
      }
      case OpKind::scale: {
        const Tensor& x = val(r.inputs[0]);
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = r.scalar * x[i];
        break;
      }
      case OpKind::silu:
        k::silu_fwd(val(r.inputs[0]).data().data(), y, out.size());
        break;
      case OpKind::rms_norm: {
        const Tensor& x = val(r.inputs[0]);
        const std::size_t dim = s.back();
        k::rms_norm_fwd(x.data().data(), val(r.inputs[1]).data().data(), y, x.size() / dim, dim,
                        r.scalar);
        break;
      }
      case OpKind::rope: {
        const std::size_t n = s[s.size() - 2];
        const std::size_t dh = s.back() / r.heads;
        k::rope_apply(val(r.inputs[0]).data().data(), y, r.table->data(),
                      out.size() / (n * s.back()), n, r.heads, dh, false, false);
        break;
      }
      case OpKind::split_heads: {
        const std::size_t n = s[s.size() - 2], dh = s.back();
        k::split_heads(val(r.inputs[0]).data().data(), y, out.size() / (r.heads * n * dh), n,
                       r.heads, dh, true, false);
        break;
      }
      case OpKind::merge_heads: {
        const Shape& xs = tape.shape(r.inputs[0]);
        const std::size_t n = xs[xs.size() - 2], dh = xs.back();
        k::split_heads(val(r.inputs[0]).data().data(), y, out.size() / (r.heads * n * dh), n,
                       r.heads, dh, false, false);
        break;
      }
      case OpKind::scores: {
        const Shape& qs = tape.shape(r.inputs[0]);
        const std::size_t n = s[s.size() - 2], m = s.back(), dk = qs.back();
        k::scores_fwd(val(r.inputs[0]).data().data(), val(r.inputs[1]).data().data(), y,
                      out.size() / (n * m), n, m, dk, r.causal);
        break;
      }
      case OpKind::mix: {
        const Shape& ps = tape.shape(r.inputs[0]);
        const std::size_t n = ps[ps.size() - 2], m = ps.back(), dk = s.back();
        k::mix_fwd(val(r.inputs[0]).data().data(), val(r.inputs[1]).data().data(), y,
                   out.size() / (n * dk), n, m, dk, r.causal);
        break;
      }
      case OpKind::causal_softmax: {
        const std::size_t n = s.back();
        k::causal_softmax_fwd(val(r.inputs[0]).data().data(), y, out.size() / (n * n), n);
        break;
      }
      case OpKind::contract: {
        const Tensor& x = val(r.inputs[0]);
        double total = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * (*r.constant)[i];
        y[0] = total;
        break;
      }
      case OpKind::custom: {
        std::vector<const Tensor*> args;
        for (NodeId id : r.inputs) args.push_back(&val(id));
        out = r.fn(args);
        require(out.shape() == r.shape, ErrorKind::structural,
                "custom op '" + r.name + "' returned " + shape_string(out.shape()) +
                    ", declared " + shape_string(r.shape));
        break;
      }
      case OpKind::input:
      case OpKind::constant:
        break;
    }
    require(out.all_finite(), ErrorKind::numeric, "non-finite output from " + describe(r));
    values[r.output] = std::move(out);
  }
  return Activations(&tape, std::move(values));
}

Tensor relevance(const Tensor& activation, const Tensor& gradient,
                 std::span<const std::size_t> reduce_dims) {
  require(activation.shape() == gradient.shape(), ErrorKind::structural,
          "relevance: activation " + shape_string(activation.shape()) + " vs gradient " +
              shape_string(gradient.shape()));
  const Shape& s = activation.shape();
  std::vector<bool> reduced(s.size(), false);
  for (std::size_t axis : reduce_dims) {
    require(axis < s.size() && !reduced[axis], ErrorKind::structural,
            "relevance: invalid reduce axis " + std::to_string(axis));
    reduced[axis] = true;
  }
  Shape out_shape;
  for (std::size_t a = 0; a < s.size(); ++a)
    if (!reduced[a]) out_shape.push_back(s[a]);
  Tensor out(out_shape);

  std::vector<std::size_t> index(s.size(), 0);
  for (std::size_t flat = 0; flat < activation.size(); ++flat) {
    std::size_t target = 0;
    for (std::size_t a = 0; a < s.size(); ++a)
      if (!reduced[a]) target = target * s[a] + index[a];
    out[target] += activation[flat] * gradient[flat];
    for (std::size_t a = s.size(); a-- > 0;) {
      if (++index[a] < s[a]) break;
      index[a] = 0;
    }
  }
  return out;
}

}  // namespace attrigraph
