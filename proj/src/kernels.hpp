// SPDX-License-Identifier: Apache-2.0
//
// Raw loops behind the tape primitives. Backward kernels accumulate (+=).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace attrigraph::kernels {

inline void linear_fwd(const double* x, const double* w, double* y, std::size_t rows,
                       std::size_t k, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y + r * m;
    std::fill(yr, yr + m, 0.0);
    const double* xr = x + r * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double xv = xr[kk];
      const double* wr = w + kk * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += xv * wr[j];
    }
  }
}

inline void linear_bwd(const double* g, const double* w, double* gx, std::size_t rows,
                       std::size_t k, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = g + r * m;
    double* gxr = gx + r * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* wr = w + kk * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += gr[j] * wr[j];
      gxr[kk] += s;
    }
  }
}

// q[lead, n, dk] . k[lead, m, dk]^T -> out[lead, n, m]; masked entries stay 0.
inline void scores_fwd(const double* q, const double* k, double* out, std::size_t lead,
                       std::size_t n, std::size_t m, std::size_t dk, bool causal) {
  for (std::size_t b = 0; b < lead; ++b) {
    const double* qb = q + b * n * dk;
    const double* kb = k + b * m * dk;
    double* ob = out + b * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t jend = causal ? i + 1 : m;
      const double* qi = qb + i * dk;
      for (std::size_t j = 0; j < m; ++j) {
        if (j >= jend) {
          ob[i * m + j] = 0.0;
          continue;
        }
        const double* kj = kb + j * dk;
        double s = 0.0;
        for (std::size_t e = 0; e < dk; ++e) s += qi[e] * kj[e];
        ob[i * m + j] = s;
      }
    }
  }
}

inline void scores_bwd(const double* g, const double* q, const double* k, double* gq, double* gk,
                       double fq, double fk, std::size_t lead, std::size_t n, std::size_t m,
                       std::size_t dk, bool causal) {
  for (std::size_t b = 0; b < lead; ++b) {
    const double* gb = g + b * n * m;
    const double* qb = q + b * n * dk;
    const double* kb = k + b * m * dk;
    double* gqb = gq ? gq + b * n * dk : nullptr;
    double* gkb = gk ? gk + b * m * dk : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t jend = causal ? i + 1 : m;
      for (std::size_t j = 0; j < jend; ++j) {
        const double gij = gb[i * m + j];
        if (gij == 0.0) continue;
        if (gqb) {
          const double a = fq * gij;
          for (std::size_t e = 0; e < dk; ++e) gqb[i * dk + e] += a * kb[j * dk + e];
        }
        if (gkb) {
          const double a = fk * gij;
          for (std::size_t e = 0; e < dk; ++e) gkb[j * dk + e] += a * qb[i * dk + e];
        }
      }
    }
  }
}

// p[lead, n, m] . v[lead, m, dk] -> out[lead, n, dk]
inline void mix_fwd(const double* p, const double* v, double* out, std::size_t lead,
                    std::size_t n, std::size_t m, std::size_t dk, bool causal) {
  for (std::size_t b = 0; b < lead; ++b) {
    const double* pb = p + b * n * m;
    const double* vb = v + b * m * dk;
    double* ob = out + b * n * dk;
    for (std::size_t i = 0; i < n; ++i) {
      double* oi = ob + i * dk;
      std::fill(oi, oi + dk, 0.0);
      const std::size_t jend = causal ? i + 1 : m;
      for (std::size_t j = 0; j < jend; ++j) {
        const double pij = pb[i * m + j];
        const double* vj = vb + j * dk;
        for (std::size_t e = 0; e < dk; ++e) oi[e] += pij * vj[e];
      }
    }
  }
}

inline void mix_bwd(const double* g, const double* p, const double* v, double* gp, double* gv,
                    double fp, double fv, std::size_t lead, std::size_t n, std::size_t m,
                    std::size_t dk, bool causal) {
  for (std::size_t b = 0; b < lead; ++b) {
    const double* gb = g + b * n * dk;
    const double* pb = p + b * n * m;
    const double* vb = v + b * m * dk;
    double* gpb = gp ? gp + b * n * m : nullptr;
    double* gvb = gv ? gv + b * m * dk : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double* gi = gb + i * dk;
      const std::size_t jend = causal ? i + 1 : m;
      for (std::size_t j = 0; j < jend; ++j) {
        const double* vj = vb + j * dk;
        if (gpb) {
          double s = 0.0;
          for (std::size_t e = 0; e < dk; ++e) s += gi[e] * vj[e];
          gpb[i * m + j] += fp * s;
        }
        if (gvb) {
          const double a = fv * pb[i * m + j];
          for (std::size_t e = 0; e < dk; ++e) gvb[j * dk + e] += a * gi[e];
        }
      }
    }
  }
}

// Row-wise softmax over [lead, n, n] blocks with key j <= query i.
inline void causal_softmax_fwd(const double* x, double* y, std::size_t lead, std::size_t n) {
  for (std::size_t b = 0; b < lead; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* xr = x + (b * n + i) * n;
      double* yr = y + (b * n + i) * n;
      double mx = xr[0];
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, xr[j]);
      double total = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        total += yr[j];
      }
      for (std::size_t j = 0; j <= i; ++j) yr[j] /= total;
      for (std::size_t j = i + 1; j < n; ++j) yr[j] = 0.0;
    }
  }
}

inline void causal_softmax_bwd(const double* g, const double* y, double* gx, std::size_t lead,
                               std::size_t n) {
  for (std::size_t b = 0; b < lead; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* gr = g + (b * n + i) * n;
      const double* yr = y + (b * n + i) * n;
      double* gxr = gx + (b * n + i) * n;
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j <= i; ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
  }
}

inline double rms_inverse(const double* x, std::size_t dim, double eps) {
  double ss = 0.0;
  for (std::size_t e = 0; e < dim; ++e) ss += x[e] * x[e];
  return 1.0 / std::sqrt(ss / static_cast<double>(dim) + eps);
}

inline void rms_norm_fwd(const double* x, const double* w, double* y, std::size_t rows,
                         std::size_t dim, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * dim;
    double* yr = y + r * dim;
    const double inv = rms_inverse(xr, dim, eps);
    for (std::size_t e = 0; e < dim; ++e) yr[e] = xr[e] * inv * w[e];
  }
}

// full=false holds the RMS statistic constant.
inline void rms_norm_bwd(const double* g, const double* x, const double* w, double* gx,
                         std::size_t rows, std::size_t dim, double eps, bool full) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * dim;
    const double* gr = g + r * dim;
    double* gxr = gx + r * dim;
    const double inv = rms_inverse(xr, dim, eps);
    double coupling = 0.0;
    if (full) {
      double s = 0.0;
      for (std::size_t e = 0; e < dim; ++e) s += gr[e] * w[e] * xr[e];
      coupling = inv * inv * inv * s / static_cast<double>(dim);
    }
    for (std::size_t e = 0; e < dim; ++e) gxr[e] += inv * gr[e] * w[e] - coupling * xr[e];
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void silu_fwd(const double* x, double* y, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) y[i] = x[i] * sigmoid(x[i]);
}

inline void silu_bwd(const double* g, const double* x, double* gx, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const double s = sigmoid(x[i]);
    gx[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
  }
}

// Rotate-half positional rotation over [lead, n, heads*dh]; table = cos[n*half] | sin[n*half].
inline void rope_apply(const double* x, double* y, const double* table, std::size_t lead,
                       std::size_t n, std::size_t heads, std::size_t dh, bool inverse,
                       bool accumulate) {
  const std::size_t half = dh / 2;
  const double* cos_t = table;
  const double* sin_t = table + n * half;
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t b = 0; b < lead; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = ((b * n + i) * heads + h) * dh;
        for (std::size_t e = 0; e < half; ++e) {
          const double c = cos_t[i * half + e];
          const double s = sign * sin_t[i * half + e];
          const double x1 = x[base + e];
          const double x2 = x[base + e + half];
          const double y1 = x1 * c - x2 * s;
          const double y2 = x2 * c + x1 * s;
          if (accumulate) {
            y[base + e] += y1;
            y[base + e + half] += y2;
          } else {
            y[base + e] = y1;
            y[base + e + half] = y2;
          }
        }
      }
    }
  }
}

// [lead, n, heads*dh] <-> [lead, heads, n, dh]
inline void split_heads(const double* x, double* y, std::size_t lead, std::size_t n,
                        std::size_t heads, std::size_t dh, bool to_heads, bool accumulate) {
  for (std::size_t b = 0; b < lead; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t flat = ((b * n + i) * heads + h) * dh;
        const std::size_t headed = ((b * heads + h) * n + i) * dh;
        const std::size_t src = to_heads ? flat : headed;
        const std::size_t dst = to_heads ? headed : flat;
        for (std::size_t e = 0; e < dh; ++e) {
          if (accumulate)
            y[dst + e] += x[src + e];
          else
            y[dst + e] = x[src + e];
        }
      }
}

}  // namespace attrigraph::kernels
