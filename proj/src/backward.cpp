// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "attrigraph/error.hpp"
#include "attrigraph/tape.hpp"
#include "kernels.hpp"

namespace attrigraph {

namespace {

thread_local std::uint64_t tl_backward_calls = 0;

// A node is live when relevance can reach an input through it under the
// variant. cplrp detaches softmax outputs.
std::vector<bool> live_nodes(const Tape& tape, RuleVariant variant) {
  std::vector<bool> live(tape.size(), false);
  for (const Record& r : tape.records()) {
    switch (r.kind) {
      case OpKind::input: live[r.output] = true; break;
      case OpKind::constant: break;
      case OpKind::causal_softmax:
        live[r.output] = variant != RuleVariant::cplrp && live[r.inputs[0]];
        break;
      default:
        live[r.output] = std::any_of(r.inputs.begin(), r.inputs.end(),
                                     [&](NodeId id) { return live[id]; });
    }
  }
  return live;
}

struct Factors {
  double a = 1.0;
  double b = 1.0;
};

// Bilinear products: the LRP variants give each live factor half of the
// product-rule gradient when both factors carry relevance.
Factors bilinear_factors(RuleVariant variant, bool live_a, bool live_b) {
  if (variant != RuleVariant::gradient && live_a && live_b) return {0.5, 0.5};
  return {1.0, 1.0};
}

}  // namespace

std::uint64_t backward_call_count() noexcept { return tl_backward_calls; }

const Tensor& Gradients::at(NodeId id) const {
  require(has(id), ErrorKind::input, "no gradient retained for node " + std::to_string(id));
  return grads_[id];
}

Gradients backward(const Tape& tape, const Activations& acts, NodeId from, const Tensor& seed,
                   const RuleSet& rules, std::span<const NodeId> keep) {
  namespace k = kernels;
  rules.validate();
  require(acts.tape() == &tape && acts.size() == tape.size(), ErrorKind::structural,
          "activations were not produced by this tape");
  const Shape& from_shape = tape.shape(from);

  std::size_t cotangents = 1;
  if (seed.shape() != from_shape) {
    require(seed.rank() == from_shape.size() + 1 &&
                std::equal(from_shape.begin(), from_shape.end(), seed.shape().begin() + 1),
            ErrorKind::structural,
            "seed " + shape_string(seed.shape()) + " does not match node " +
                shape_string(from_shape));
    cotangents = seed.dim(0);
    require(cotangents > 0, ErrorKind::structural, "seed has an empty cotangent axis");
  }
  require(seed.all_finite(), ErrorKind::numeric, "non-finite backward seed");
  ++tl_backward_calls;

  const RuleVariant variant = rules.variant;
  const std::vector<bool> live = live_nodes(tape, variant);
  std::vector<std::vector<double>> grad(tape.size());
  std::vector<bool> retain(tape.size(), keep.empty());
  for (NodeId id : keep) {
    require(id < tape.size(), ErrorKind::structural, "keep lists an unknown node");
    retain[id] = true;
  }

  const std::size_t G = cotangents;
  auto buffer = [&](NodeId id) -> double* {
    if (!live[id]) return nullptr;
    if (grad[id].empty()) grad[id].assign(G * shape_size(tape.shape(id)), 0.0);
    return grad[id].data();
  };
  grad[from] = seed.values();

  for (std::size_t idx = from + 1; idx-- > 0;) {
    const NodeId id = static_cast<NodeId>(idx);
    if (grad[id].empty()) continue;
    const Record& r = tape.record(id);
    const std::vector<double>& gout = grad[id];
    require(std::all_of(gout.begin(), gout.end(), [](double v) { return std::isfinite(v); }),
            ErrorKind::numeric, "non-finite gradient at " + std::string(to_string(r.kind)) +
                                    " #" + std::to_string(id));
    const Shape& s = r.shape;
    const std::size_t out_size = shape_size(s);

    switch (r.kind) {
      case OpKind::input:
      case OpKind::constant:
        break;

      case OpKind::linear: {
        const Tensor& w = acts[r.inputs[1]];
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const std::size_t kdim = w.dim(0), m = w.dim(1);
        const std::size_t in_size = out_size / m * kdim;
        for (std::size_t g = 0; g < G; ++g)
          k::linear_bwd(gout.data() + g * out_size, w.data().data(), gx + g * in_size,
                        out_size / m, kdim, m);
        break;
      }

      case OpKind::add:
        for (NodeId in : r.inputs) {
          double* gx = buffer(in);
          if (!gx) continue;
          for (std::size_t i = 0; i < G * out_size; ++i) gx[i] += gout[i];
        }
        break;

      case OpKind::mul: {
        const NodeId ia = r.inputs[0], ib = r.inputs[1];
        const Factors f = bilinear_factors(variant, live[ia], live[ib]);
        const Tensor& a = acts[ia];
        const Tensor& b = acts[ib];
        double* ga = buffer(ia);
        double* gb = buffer(ib);
        for (std::size_t g = 0; g < G; ++g) {
          const double* go = gout.data() + g * out_size;
          for (std::size_t i = 0; i < out_size; ++i) {
            if (ga) ga[g * out_size + i] += f.a * go[i] * b[i];
            if (gb) gb[g * out_size + i] += f.b * go[i] * a[i];
          }
        }
        break;
      }

      case OpKind::scale: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        for (std::size_t i = 0; i < G * out_size; ++i) gx[i] += r.scalar * gout[i];
        break;
      }

      case OpKind::silu: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const double* x = acts[r.inputs[0]].data().data();
        for (std::size_t g = 0; g < G; ++g)
          k::silu_bwd(gout.data() + g * out_size, x, gx + g * out_size, out_size);
        break;
      }

      case OpKind::rms_norm: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const double* x = acts[r.inputs[0]].data().data();
        const double* w = acts[r.inputs[1]].data().data();
        const std::size_t dim = s.back();
        const bool full = variant == RuleVariant::gradient;
        for (std::size_t g = 0; g < G; ++g)
          k::rms_norm_bwd(gout.data() + g * out_size, x, w, gx + g * out_size, out_size / dim,
                          dim, r.scalar, full);
        break;
      }

      case OpKind::rope: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const std::size_t n = s[s.size() - 2], dh = s.back() / r.heads;
        for (std::size_t g = 0; g < G; ++g)
          k::rope_apply(gout.data() + g * out_size, gx + g * out_size, r.table->data(),
                        out_size / (n * s.back()), n, r.heads, dh, true, true);
        break;
      }

      case OpKind::split_heads:
      case OpKind::merge_heads: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        std::size_t n, dh;
        if (r.kind == OpKind::split_heads) {
          n = s[s.size() - 2];
          dh = s.back();
        } else {
          const Shape& xs = tape.shape(r.inputs[0]);
          n = xs[xs.size() - 2];
          dh = xs.back();
        }
        const std::size_t lead = out_size / (r.heads * n * dh);
        // The adjoint of a split is a merge and vice versa.
        const bool to_heads = r.kind == OpKind::merge_heads;
        for (std::size_t g = 0; g < G; ++g)
          k::split_heads(gout.data() + g * out_size, gx + g * out_size, lead, n, r.heads, dh,
                         to_heads, true);
        break;
      }

      case OpKind::scores: {
        const NodeId iq = r.inputs[0], ik = r.inputs[1];
        const Factors f = bilinear_factors(variant, live[iq], live[ik]);
        const Shape& qs = tape.shape(iq);
        const Shape& ks = tape.shape(ik);
        const std::size_t n = s[s.size() - 2], m = s.back(), dk = qs.back();
        const std::size_t lead = out_size / (n * m);
        double* gq = buffer(iq);
        double* gk = buffer(ik);
        const std::size_t q_size = shape_size(qs), k_size = shape_size(ks);
        for (std::size_t g = 0; g < G; ++g)
          k::scores_bwd(gout.data() + g * out_size, acts[iq].data().data(),
                        acts[ik].data().data(), gq ? gq + g * q_size : nullptr,
                        gk ? gk + g * k_size : nullptr, f.a, f.b, lead, n, m, dk, r.causal);
        break;
      }

      case OpKind::mix: {
        const NodeId ip = r.inputs[0], iv = r.inputs[1];
        const Factors f = bilinear_factors(variant, live[ip], live[iv]);
        const Shape& ps = tape.shape(ip);
        const Shape& vs = tape.shape(iv);
        const std::size_t n = ps[ps.size() - 2], m = ps.back(), dk = s.back();
        const std::size_t lead = out_size / (n * dk);
        double* gp = buffer(ip);
        double* gv = buffer(iv);
        const std::size_t p_size = shape_size(ps), v_size = shape_size(vs);
        for (std::size_t g = 0; g < G; ++g)
          k::mix_bwd(gout.data() + g * out_size, acts[ip].data().data(), acts[iv].data().data(),
                     gp ? gp + g * p_size : nullptr, gv ? gv + g * v_size : nullptr, f.a, f.b,
                     lead, n, m, dk, r.causal);
        break;
      }

      case OpKind::causal_softmax: {
        if (variant == RuleVariant::cplrp) break;
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const std::size_t n = s.back();
        const double* y = acts[id].data().data();
        for (std::size_t g = 0; g < G; ++g)
          k::causal_softmax_bwd(gout.data() + g * out_size, y, gx + g * out_size,
                                out_size / (n * n), n);
        break;
      }

      case OpKind::contract: {
        double* gx = buffer(r.inputs[0]);
        if (!gx) break;
        const Tensor& w = *r.constant;
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t i = 0; i < w.size(); ++i) gx[g * w.size() + i] += gout[g] * w[i];
        break;
      }

      case OpKind::custom:
        fail(ErrorKind::unsupported_rule, "no " + std::string(to_string(variant)) +
                                              " backward rule for custom op '" + r.name + "'");
    }
    if (!retain[id]) std::vector<double>().swap(grad[id]);
  }

  Gradients result;
  result.cotangents_ = G;
  result.grads_.resize(tape.size());
  result.present_.assign(tape.size(), false);
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (!retain[id] || grad[id].empty()) continue;
    Shape shape = tape.shape(static_cast<NodeId>(id));
    if (G != 1 || seed.shape() != from_shape) shape.insert(shape.begin(), G);
    result.grads_[id] = Tensor(std::move(shape), std::move(grad[id]));
    result.present_[id] = true;
  }
  return result;
}

}  // namespace attrigraph
