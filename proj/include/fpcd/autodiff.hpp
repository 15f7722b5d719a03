#pragma once

// Define-by-run reverse-mode autodiff on dense f64 tensors. The tape is
// rebuilt each forward pass; backward walks nodes in reverse insertion
// order exactly once and accumulates gradients additively into leaves.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "fpcd/error.hpp"
#include "fpcd/spectral.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::autodiff {

struct Node {
  Tensor value;
  std::vector<double> grad;   // allocated iff requires_grad
  bool requires_grad = false;
  bool is_leaf = true;
  std::function<void()> back; // adds this node's grad contribution into parents
};

using Var = Node*;

class Tape {
 public:
  // When set, every op output is scanned for NaN/Inf and the step aborts.
  bool check_finite = true;

  // Smallest |pre-activation| seen at relu inputs and smallest nonzero
  // spectrum magnitude this pass; finite-difference tests use these to
  // reject sample points sitting on a kink. Exactly-zero magnitudes are
  // excluded: they arise from features that are robustly zero (guarded by
  // the relu margin), where the subgradient convention and a symmetric
  // difference both yield zero.
  double min_relu_margin = std::numeric_limits<double>::infinity();
  double min_spectrum_mag = std::numeric_limits<double>::infinity();

  Var leaf(Tensor v, bool requires_grad) {
    return make("leaf", std::move(v), requires_grad, nullptr, true);
  }
  Var constant(Tensor v) { return leaf(std::move(v), false); }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same_shape(a->value, b->value, "add");
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
    bool rg = a->requires_grad || b->requires_grad;
    Var out = make("add", std::move(y), rg, nullptr);
    if (rg)
      out->back = [a, b, out] {
        if (a->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) b->grad[i] += out->grad[i];
      };
    return out;
  }

  Var sub(Var a, Var b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] -= b->value[i];
    bool rg = a->requires_grad || b->requires_grad;
    Var out = make("sub", std::move(y), rg, nullptr);
    if (rg)
      out->back = [a, b, out] {
        if (a->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) b->grad[i] -= out->grad[i];
      };
    return out;
  }

  Var mul(Var a, Var b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= b->value[i];
    bool rg = a->requires_grad || b->requires_grad;
    Var out = make("mul", std::move(y), rg, nullptr);
    if (rg)
      out->back = [a, b, out] {
        if (a->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += b->value[i] * out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < out->value.size(); ++i) b->grad[i] += a->value[i] * out->grad[i];
      };
    return out;
  }

  Var scale(Var a, double s) {
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= s;
    Var out = make("scale", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, s, out] {
        for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += s * out->grad[i];
      };
    return out;
  }

  Var add_scalar(Var a, double c) {
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] += c;
    Var out = make("add_scalar", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out] {
        for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i];
      };
    return out;
  }

  Var log(Var a) {
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::log(y[i]);
    Var out = make("log", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out] {
        for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i] / a->value[i];
      };
    return out;
  }

  Var relu(Var a) {
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) {
      double m = std::fabs(y[i]);
      if (m < min_relu_margin) min_relu_margin = m;
      if (y[i] < 0.0) y[i] = 0.0;
    }
    Var out = make("relu", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out] {
        for (int64_t i = 0; i < out->value.size(); ++i)
          if (a->value[i] > 0.0) a->grad[i] += out->grad[i];
      };
    return out;
  }

  // Constant (non-differentiated) elementwise weight, e.g. a frozen teacher map.
  Var mul_const(Var a, const Tensor& w) {
    check_same_shape(a->value, w, "mul_const");
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= w[i];
    Var out = make("mul_const", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad) {
      auto wc = std::make_shared<Tensor>(w);
      out->back = [a, out, wc] {
        for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += (*wc)[i] * out->grad[i];
      };
    }
    return out;
  }

  // ---- shape / reductions ----

  Var reshape(Var a, Dims dims) {
    if (numel(dims) != a->value.size())
      throw DimError("reshape: element count mismatch " + dims_str(a->value.dims()) + " -> " +
                     dims_str(dims));
    Tensor y(std::move(dims), a->value.vec());
    Var out = make("reshape", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out] {
        for (int64_t i = 0; i < out->value.size(); ++i) a->grad[i] += out->grad[i];
      };
    return out;
  }

  Var sum_all(Var a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    Var out = make("sum", Tensor::scalar(s), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out] {
        double g = out->grad[0];
        for (int64_t i = 0; i < a->value.size(); ++i) a->grad[i] += g;
      };
    return out;
  }

  Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

  // Mean over the leading axis; used for per-frame logit consensus.
  Var mean_axis0(Var a) {
    if (a->value.ndim() < 2) throw DimError("mean_axis0: need >= 2 dims");
    const int64_t n = a->value.dims()[0];
    const int64_t rest = a->value.size() / n;
    Dims d(a->value.dims().begin() + 1, a->value.dims().end());
    Tensor y(d);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < rest; ++j) y[j] += a->value[i * rest + j];
    for (int64_t j = 0; j < rest; ++j) y[j] /= static_cast<double>(n);
    Var out = make("mean_axis0", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out, n, rest] {
        double inv = 1.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < rest; ++j) a->grad[i * rest + j] += inv * out->grad[j];
      };
    return out;
  }

  // sum(w .* a) -> scalar, w constant.
  Var weighted_sum(Var a, const Tensor& w) {
    check_same_shape(a->value, w, "weighted_sum");
    double s = 0.0;
    for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i] * w[i];
    Var out = make("weighted_sum", Tensor::scalar(s), a->requires_grad, nullptr);
    if (out->requires_grad) {
      auto wc = std::make_shared<Tensor>(w);
      out->back = [a, out, wc] {
        double g = out->grad[0];
        for (int64_t i = 0; i < a->value.size(); ++i) a->grad[i] += g * (*wc)[i];
      };
    }
    return out;
  }

  // Stack rows (each [C] or [1,C]) into [N,C].
  Var concat_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ContractError("concat_rows: empty");
    int64_t c = rows[0]->value.size();
    bool rg = false;
    for (Var r : rows) {
      if (r->value.size() != c) throw DimError("concat_rows: row size mismatch");
      rg = rg || r->requires_grad;
    }
    const int64_t n = static_cast<int64_t>(rows.size());
    Tensor y({n, c});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) y[i * c + j] = rows[static_cast<size_t>(i)]->value[j];
    Var out = make("concat_rows", std::move(y), rg, nullptr);
    if (rg) {
      auto rs = std::make_shared<std::vector<Var>>(rows);
      out->back = [out, rs, c] {
        for (int64_t i = 0; i < static_cast<int64_t>(rs->size()); ++i) {
          Var r = (*rs)[static_cast<size_t>(i)];
          if (!r->requires_grad) continue;
          for (int64_t j = 0; j < c; ++j) r->grad[j] += out->grad[i * c + j];
        }
      };
    }
    return out;
  }

  Var mean_of(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw ContractError("mean_of: empty");
    Var acc = scalars[0];
    for (size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
    return scale(acc, 1.0 / static_cast<double>(scalars.size()));
  }

  // y = x / sum(x); caller guarantees sum > 0.
  Var l1_normalize(Var a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    if (s <= 0.0) throw ContractError("l1_normalize: non-positive mass");
    Tensor y = a->value;
    for (int64_t i = 0; i < y.size(); ++i) y[i] /= s;
    Var out = make("l1_normalize", std::move(y), a->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [a, out, s] {
        double dot = 0.0;
        for (int64_t i = 0; i < out->value.size(); ++i) dot += out->grad[i] * out->value[i];
        for (int64_t i = 0; i < out->value.size(); ++i)
          a->grad[i] += (out->grad[i] - dot) / s;
      };
    return out;
  }

  // ---- nn ops ----

  // x:[N,D] w:[D,M] b:[M] -> [N,M]
  Var linear(Var x, Var w, Var b) {
    if (x->value.ndim() != 2 || w->value.ndim() != 2 || b->value.ndim() != 1)
      throw DimError("linear: expected x[N,D], w[D,M], b[M]");
    const int64_t n = x->value.dims()[0], d = x->value.dims()[1];
    if (w->value.dims()[0] != d || b->value.dims()[0] != w->value.dims()[1])
      throw DimError("linear: inner dims mismatch");
    const int64_t m = w->value.dims()[1];
    Tensor y({n, m});
    for (int64_t i = 0; i < n; ++i) {
      const double* xi = x->value.data() + i * d;
      double* yi = y.data() + i * m;
      for (int64_t j = 0; j < m; ++j) yi[j] = b->value[j];
      for (int64_t kk = 0; kk < d; ++kk) {
        double a = xi[kk];
        const double* wr = w->value.data() + kk * m;
        for (int64_t j = 0; j < m; ++j) yi[j] += a * wr[j];
      }
    }
    bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
    Var out = make("linear", std::move(y), rg, nullptr);
    if (rg)
      out->back = [x, w, b, out, n, d, m] {
        for (int64_t i = 0; i < n; ++i) {
          const double* g = out->grad.data() + i * m;
          const double* xi = x->value.data() + i * d;
          if (b->requires_grad)
            for (int64_t j = 0; j < m; ++j) b->grad[j] += g[j];
          for (int64_t kk = 0; kk < d; ++kk) {
            const double* wr = w->value.data() + kk * m;
            if (x->requires_grad) {
              double s = 0.0;
              for (int64_t j = 0; j < m; ++j) s += wr[j] * g[j];
              x->grad[i * d + kk] += s;
            }
            if (w->requires_grad) {
              double a = xi[kk];
              double* dwr = w->grad.data() + kk * m;
              for (int64_t j = 0; j < m; ++j) dwr[j] += a * g[j];
            }
          }
        }
      };
    return out;
  }

  // Cross-correlation, NHWC input, [kh,kw,Cin,Cout] kernel.
  Var conv2d(Var x, Var k, int64_t stride, int64_t pad) {
    if (x->value.ndim() != 4 || k->value.ndim() != 4)
      throw DimError("conv2d: expected x[N,H,W,Ci], k[kh,kw,Ci,Co]");
    const auto& xd = x->value.dims();
    const auto& kd = k->value.dims();
    const int64_t n = xd[0], h = xd[1], w = xd[2], ci = xd[3];
    const int64_t kh = kd[0], kw = kd[1], co = kd[3];
    if (kd[2] != ci)
      throw DimError("conv2d: input channels " + std::to_string(ci) + " vs kernel " +
                     std::to_string(kd[2]));
    if (stride < 1) throw ContractError("conv2d: stride < 1");
    if (kh > h + 2 * pad || kw > w + 2 * pad) throw ContractError("conv2d: kernel larger than padded input");
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (w + 2 * pad - kw) / stride + 1;
    Tensor y({n, ho, wo, co});
    {
      const double* xp = x->value.data();
      const double* kp = k->value.data();
      double* yp = y.data();
      for (int64_t b = 0; b < n; ++b)
        for (int64_t yo = 0; yo < ho; ++yo)
          for (int64_t xo = 0; xo < wo; ++xo) {
            double* acc = yp + ((b * ho + yo) * wo + xo) * co;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = yo * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = xo * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                const double* xin = xp + ((b * h + iy) * w + ix) * ci;
                const double* kr = kp + (ky * kw + kx) * ci * co;
                for (int64_t c = 0; c < ci; ++c) {
                  double a = xin[c];
                  const double* kc = kr + c * co;
                  for (int64_t o = 0; o < co; ++o) acc[o] += a * kc[o];
                }
              }
            }
          }
    }
    bool rg = x->requires_grad || k->requires_grad;
    Var out = make("conv2d", std::move(y), rg, nullptr);
    if (rg)
      out->back = [x, k, out, n, h, w, ci, kh, kw, co, ho, wo, stride, pad] {
        const double* xp = x->value.data();
        const double* kp = k->value.data();
        const bool dx = x->requires_grad, dk = k->requires_grad;
        for (int64_t b = 0; b < n; ++b)
          for (int64_t yo = 0; yo < ho; ++yo)
            for (int64_t xo = 0; xo < wo; ++xo) {
              const double* g = out->grad.data() + ((b * ho + yo) * wo + xo) * co;
              for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = yo * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  int64_t ix = xo * stride + kx - pad;
                  if (ix < 0 || ix >= w) continue;
                  const int64_t xoff = ((b * h + iy) * w + ix) * ci;
                  const int64_t koff = (ky * kw + kx) * ci * co;
                  for (int64_t c = 0; c < ci; ++c) {
                    if (dx) {
                      const double* kc = kp + koff + c * co;
                      double s = 0.0;
                      for (int64_t o = 0; o < co; ++o) s += kc[o] * g[o];
                      x->grad[xoff + c] += s;
                    }
                    if (dk) {
                      double a = xp[xoff + c];
                      double* dkc = k->grad.data() + koff + c * co;
                      for (int64_t o = 0; o < co; ++o) dkc[o] += a * g[o];
                    }
                  }
                }
              }
            }
      };
    return out;
  }

  Var avgpool2d(Var x, int64_t win, int64_t stride) {
    if (x->value.ndim() != 4) throw DimError("avgpool2d: expected [N,H,W,C]");
    const auto& xd = x->value.dims();
    const int64_t n = xd[0], h = xd[1], w = xd[2], c = xd[3];
    if (win < 1 || stride < 1 || win > h || win > w) throw ContractError("avgpool2d: bad window");
    const int64_t ho = (h - win) / stride + 1;
    const int64_t wo = (w - win) / stride + 1;
    const double inv = 1.0 / static_cast<double>(win * win);
    Tensor y({n, ho, wo, c});
    for (int64_t b = 0; b < n; ++b)
      for (int64_t yo = 0; yo < ho; ++yo)
        for (int64_t xo = 0; xo < wo; ++xo) {
          double* acc = y.data() + ((b * ho + yo) * wo + xo) * c;
          for (int64_t ky = 0; ky < win; ++ky)
            for (int64_t kx = 0; kx < win; ++kx) {
              const double* xin =
                  x->value.data() + ((b * h + yo * stride + ky) * w + xo * stride + kx) * c;
              for (int64_t ch = 0; ch < c; ++ch) acc[ch] += xin[ch];
            }
          for (int64_t ch = 0; ch < c; ++ch) acc[ch] *= inv;
        }
    Var out = make("avgpool2d", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, n, h, w, c, ho, wo, win, stride, inv] {
        for (int64_t b = 0; b < n; ++b)
          for (int64_t yo = 0; yo < ho; ++yo)
            for (int64_t xo = 0; xo < wo; ++xo) {
              const double* g = out->grad.data() + ((b * ho + yo) * wo + xo) * c;
              for (int64_t ky = 0; ky < win; ++ky)
                for (int64_t kx = 0; kx < win; ++kx) {
                  double* dx =
                      x->grad.data() + ((b * h + yo * stride + ky) * w + xo * stride + kx) * c;
                  for (int64_t ch = 0; ch < c; ++ch) dx[ch] += g[ch] * inv;
                }
            }
      };
    return out;
  }

  // Global average pool: [N,H,W,C] -> [N,C].
  Var spatial_mean(Var x) {
    if (x->value.ndim() != 4) throw DimError("spatial_mean: expected [N,H,W,C]");
    const auto& xd = x->value.dims();
    const int64_t n = xd[0], hw = xd[1] * xd[2], c = xd[3];
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor y({n, c});
    for (int64_t b = 0; b < n; ++b)
      for (int64_t s = 0; s < hw; ++s) {
        const double* xin = x->value.data() + (b * hw + s) * c;
        double* acc = y.data() + b * c;
        for (int64_t ch = 0; ch < c; ++ch) acc[ch] += xin[ch];
      }
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= inv;
    Var out = make("spatial_mean", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, n, hw, c, inv] {
        for (int64_t b = 0; b < n; ++b)
          for (int64_t s = 0; s < hw; ++s) {
            double* dx = x->grad.data() + (b * hw + s) * c;
            const double* g = out->grad.data() + b * c;
            for (int64_t ch = 0; ch < c; ++ch) dx[ch] += g[ch] * inv;
          }
      };
    return out;
  }

  // ---- softmax family (last axis unless stated) ----

  Var softmax(Var x) {
    const int64_t c = x->value.dims().back();
    const int64_t rows = x->value.size() / c;
    Tensor y = x->value;
    softmax_rows(y.data(), rows, c);
    Var out = make("softmax", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, rows, c] {
        for (int64_t r = 0; r < rows; ++r) {
          const double* p = out->value.data() + r * c;
          const double* g = out->grad.data() + r * c;
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += p[j] * g[j];
          for (int64_t j = 0; j < c; ++j) x->grad[r * c + j] += p[j] * (g[j] - dot);
        }
      };
    return out;
  }

  Var log_softmax(Var x) {
    const int64_t c = x->value.dims().back();
    const int64_t rows = x->value.size() / c;
    Tensor y = x->value;
    for (int64_t r = 0; r < rows; ++r) log_softmax_row(y.data() + r * c, c, 1);
    Var out = make("log_softmax", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, rows, c] {
        for (int64_t r = 0; r < rows; ++r) {
          const double* ly = out->value.data() + r * c;
          const double* g = out->grad.data() + r * c;
          double gs = 0.0;
          for (int64_t j = 0; j < c; ++j) gs += g[j];
          for (int64_t j = 0; j < c; ++j) x->grad[r * c + j] += g[j] - std::exp(ly[j]) * gs;
        }
      };
    return out;
  }

  // log-softmax along the leading axis (frequency axis of a spectrum).
  Var log_softmax_axis0(Var x) {
    const int64_t k = x->value.dims()[0];
    const int64_t loc = x->value.size() / k;
    Tensor y = x->value;
    for (int64_t l = 0; l < loc; ++l) log_softmax_row(y.data() + l, k, loc);
    Var out = make("log_softmax_axis0", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, k, loc] {
        for (int64_t l = 0; l < loc; ++l) {
          double gs = 0.0;
          for (int64_t j = 0; j < k; ++j) gs += out->grad[j * loc + l];
          for (int64_t j = 0; j < k; ++j)
            x->grad[j * loc + l] +=
                out->grad[j * loc + l] - std::exp(out->value[j * loc + l]) * gs;
        }
      };
    return out;
  }

  // -(1/N) sum_i log softmax(logits)[i, labels[i]]
  Var cross_entropy(Var logits, const std::vector<int>& labels) {
    if (logits->value.ndim() != 2) throw DimError("cross_entropy: expected [N,C]");
    const int64_t n = logits->value.dims()[0], c = logits->value.dims()[1];
    if (static_cast<int64_t>(labels.size()) != n)
      throw DimError("cross_entropy: label count mismatch");
    for (int lb : labels)
      if (lb < 0 || lb >= c) throw IndexError("cross_entropy: label out of range");
    auto probs = std::make_shared<Tensor>(logits->value);
    softmax_rows(probs->data(), n, c);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i)
      loss -= std::log((*probs)[i * c + labels[static_cast<size_t>(i)]]);
    loss /= static_cast<double>(n);
    Var out = make("cross_entropy", Tensor::scalar(loss), logits->requires_grad, nullptr);
    if (out->requires_grad) {
      auto lab = std::make_shared<std::vector<int>>(labels);
      out->back = [logits, out, probs, lab, n, c] {
        double g = out->grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < c; ++j) {
            double p = (*probs)[i * c + j];
            double onehot = (j == (*lab)[static_cast<size_t>(i)]) ? 1.0 : 0.0;
            logits->grad[i * c + j] += g * (p - onehot);
          }
      };
    }
    return out;
  }

  // ---- spectral ops ----

  // One-sided temporal DFT magnitudes, [T,H,W,C] -> [K,H,W,C].
  // Subgradient 0 where the magnitude is exactly zero.
  Var magnitude_spectrum(Var x) {
    if (x->value.ndim() != 4) throw DimError("magnitude_spectrum: expected [T,H,W,C]");
    const int64_t t = x->value.dims()[0];
    if (t < 2) throw ContractError("magnitude_spectrum: T < 2");
    const int64_t kk = spectral::onesided_bins(t);
    const int64_t loc = x->value.size() / t;
    Tensor y({kk, x->value.dims()[1], x->value.dims()[2], x->value.dims()[3]});
    auto re = std::make_shared<std::vector<double>>(static_cast<size_t>(kk * loc));
    auto im = std::make_shared<std::vector<double>>(static_cast<size_t>(kk * loc));
    {
      std::vector<double> seq(static_cast<size_t>(t)), m(static_cast<size_t>(kk)),
          r(static_cast<size_t>(kk)), ii(static_cast<size_t>(kk));
      for (int64_t l = 0; l < loc; ++l) {
        for (int64_t p = 0; p < t; ++p) seq[static_cast<size_t>(p)] = x->value[p * loc + l];
        spectral::onesided(seq.data(), t, m.data(), r.data(), ii.data());
        for (int64_t k = 0; k < kk; ++k) {
          y[k * loc + l] = m[static_cast<size_t>(k)];
          (*re)[static_cast<size_t>(k * loc + l)] = r[static_cast<size_t>(k)];
          (*im)[static_cast<size_t>(k * loc + l)] = ii[static_cast<size_t>(k)];
          if (m[static_cast<size_t>(k)] > 0.0 && m[static_cast<size_t>(k)] < min_spectrum_mag)
            min_spectrum_mag = m[static_cast<size_t>(k)];
        }
      }
    }
    Var out = make("magnitude_spectrum", std::move(y), x->requires_grad, nullptr);
    if (out->requires_grad)
      out->back = [x, out, re, im, t, kk, loc] {
        const double w = 2.0 * std::numbers::pi / static_cast<double>(t);
        for (int64_t l = 0; l < loc; ++l)
          for (int64_t k = 0; k < kk; ++k) {
            double m = out->value[k * loc + l];
            if (m <= 0.0) continue;
            double g = out->grad[k * loc + l];
            if (g == 0.0) continue;
            double r = (*re)[static_cast<size_t>(k * loc + l)];
            double ii = (*im)[static_cast<size_t>(k * loc + l)];
            double s = g / m;
            for (int64_t p = 0; p < t; ++p) {
              double a = w * static_cast<double>(k * p);
              x->grad[p * loc + l] += s * (r * std::cos(a) - ii * std::sin(a));
            }
          }
      };
    return out;
  }

  // Spectral energy histogram over B index bins for the selected output
  // channels of a conv kernel [kh,kw,Ci,Co]. One spectrum per (input,
  // output) channel pair over the kh*kw spatial patch; flattening across
  // input channels would feed channel ordering, which carries no frequency
  // content, into the transform. Bin assignment depends only on indices so
  // the result is differentiable w.r.t. the weights.
  Var kernel_band_energy(Var kernel, const std::vector<int>& out_channels, int64_t bins) {
    if (kernel->value.ndim() != 4) throw DimError("kernel_band_energy: expected [kh,kw,Ci,Co]");
    if (bins < 2) throw ContractError("kernel_band_energy: B < 2");
    if (out_channels.empty()) throw ContractError("kernel_band_energy: no kernels selected");
    const auto& kd = kernel->value.dims();
    const int64_t ci = kd[2];
    const int64_t co = kd[3];
    const int64_t plen = kd[0] * kd[1];
    if (plen < 2) throw ContractError("kernel_band_energy: patch length < 2");
    const int64_t kl = spectral::onesided_bins(plen);
    for (int ch : out_channels)
      if (ch < 0 || ch >= co) throw IndexError("kernel_band_energy: channel out of range");
    Tensor e({bins});
    const size_t pairs = out_channels.size() * static_cast<size_t>(ci);
    auto re = std::make_shared<std::vector<double>>(pairs * static_cast<size_t>(kl));
    auto im = std::make_shared<std::vector<double>>(pairs * static_cast<size_t>(kl));
    {
      std::vector<double> seq(static_cast<size_t>(plen)), m(static_cast<size_t>(kl));
      size_t pair = 0;
      for (size_t s = 0; s < out_channels.size(); ++s) {
        int ch = out_channels[s];
        for (int64_t c = 0; c < ci; ++c, ++pair) {
          for (int64_t p = 0; p < plen; ++p)
            seq[static_cast<size_t>(p)] = kernel->value[(p * ci + c) * co + ch];
          spectral::onesided(seq.data(), plen, m.data(), re->data() + pair * static_cast<size_t>(kl),
                             im->data() + pair * static_cast<size_t>(kl));
          for (int64_t k = 0; k < kl; ++k) {
            double rr = (*re)[pair * static_cast<size_t>(kl) + static_cast<size_t>(k)];
            double ii = (*im)[pair * static_cast<size_t>(kl) + static_cast<size_t>(k)];
            e[band_bin(k, kl, bins)] += rr * rr + ii * ii;
          }
        }
      }
    }
    Var out = make("kernel_band_energy", std::move(e), kernel->requires_grad, nullptr);
    if (out->requires_grad) {
      auto chans = std::make_shared<std::vector<int>>(out_channels);
      out->back = [kernel, out, chans, re, im, plen, kl, ci, co, bins] {
        const double w = 2.0 * std::numbers::pi / static_cast<double>(plen);
        std::vector<double> ct(static_cast<size_t>(plen)), st(static_cast<size_t>(plen));
        for (int64_t j = 0; j < plen; ++j) {
          double a = w * static_cast<double>(j);
          ct[static_cast<size_t>(j)] = std::cos(a);
          st[static_cast<size_t>(j)] = std::sin(a);
        }
        size_t pair = 0;
        for (size_t s = 0; s < chans->size(); ++s) {
          int ch = (*chans)[s];
          for (int64_t c = 0; c < ci; ++c, ++pair) {
            for (int64_t k = 0; k < kl; ++k) {
              double g = out->grad[band_bin(k, kl, bins)];
              if (g == 0.0) continue;
              double rr = (*re)[pair * static_cast<size_t>(kl) + static_cast<size_t>(k)];
              double ii = (*im)[pair * static_cast<size_t>(kl) + static_cast<size_t>(k)];
              for (int64_t p = 0; p < plen; ++p) {
                int64_t j = (k * p) % plen;
                kernel->grad[(p * ci + c) * co + ch] +=
                    g * 2.0 * (rr * ct[static_cast<size_t>(j)] - ii * st[static_cast<size_t>(j)]);
              }
            }
          }
        }
      };
    }
    return out;
  }

  static int64_t band_bin(int64_t k, int64_t onesided, int64_t bins) {
    int64_t b = bins * k / onesided;
    return std::min(b, bins - 1);
  }

  // ---- backward ----

  // Accumulates gradients into leaves; intermediate grads are reset so
  // repeated calls add another full pass to leaf gradients.
  void backward(Var loss) {
    if (loss->value.size() != 1) throw ContractError("backward: loss must be scalar");
    if (!loss->requires_grad) throw ContractError("backward: loss does not require grad");
    for (auto& n : nodes_)
      if (!n.is_leaf && n.requires_grad) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->requires_grad && it->back) it->back();
    if (check_finite)
      for (auto& n : nodes_)
        if (n.is_leaf && n.requires_grad)
          for (double g : n.grad)
            if (!std::isfinite(g)) throw NumericError("non-finite gradient after backward");
  }

 private:
  std::deque<Node> nodes_;

  Var make(const char* op, Tensor v, bool requires_grad, std::function<void()> back,
           bool leaf = false) {
    if (check_finite && !v.all_finite())
      throw NumericError(std::string("non-finite values produced by ") + op);
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.is_leaf = leaf;
    n.back = std::move(back);
    if (requires_grad) n.grad.assign(static_cast<size_t>(n.value.size()), 0.0);
    return &n;
  }

  static void log_softmax_row(double* x, int64_t n, int64_t stride) {
    double mx = x[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - mx);
    double lse = mx + std::log(s);
    for (int64_t i = 0; i < n; ++i) x[i * stride] -= lse;
  }

  static void softmax_rows(double* x, int64_t rows, int64_t c) {
    for (int64_t r = 0; r < rows; ++r) {
      double* row = x + r * c;
      log_softmax_row(row, c, 1);
      for (int64_t j = 0; j < c; ++j) row[j] = std::exp(row[j]);
    }
  }
};

inline Tensor grad_tensor(Var v) {
  if (!v->requires_grad) throw ContractError("grad_tensor: node does not require grad");
  return Tensor(v->value.dims(), v->grad);
}

// Classic momentum SGD; velocity owned by the caller.
inline void sgd_step(Tensor& param, const std::vector<double>& grad, Tensor& velocity, double lr,
                     double momentum) {
  if (lr <= 0.0) throw ContractError("sgd_step: lr <= 0");
  if (static_cast<int64_t>(grad.size()) != param.size() || !param.same_shape(velocity))
    throw DimError("sgd_step: shape mismatch");
  for (int64_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[static_cast<size_t>(i)];
    param[i] -= lr * velocity[i];
  }
}

}  // namespace fpcd::autodiff
