#pragma once

// Independent reference implementations and the finite-difference gradient
// checker. These are written as straight scalar loops against the module
// parameter fields; they never touch the tape code paths they verify.

#include <functional>
#include <vector>

#include "doctest.h"
#include "stn/blocks.hpp"
#include "stn/rng.hpp"
#include "stn/ssm.hpp"

namespace oracle {

using stn::Rng;
using stn::Tensor;

inline Tensor<double> random_tensor(Rng& rng, stn::Shape sh, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(sh);
  rng.fill_uniform(t, lo, hi);
  return t;
}

// ---- scalar activations ------------------------------------------------------

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) { return x > 20 ? x : std::log1p(std::exp(x)); }

// ---- dense reference ops -------------------------------------------------------

inline Tensor<double> linear(const Tensor<double>& x, const stn::Linear<double>& l) {
  long M = x.rows(), K = x.cols(), N = l.w.value.cols();
  Tensor<double> y({M, N});
  for (long i = 0; i < M; ++i)
    for (long j = 0; j < N; ++j) {
      double acc = l.b.empty() ? 0.0 : l.b.value[j];
      for (long k = 0; k < K; ++k) acc += x(i, k) * l.w.value(k, j);
      y(i, j) = acc;
    }
  return y;
}

inline Tensor<double> layer_norm(const Tensor<double>& x,
                                 const stn::LayerNorm<double>& ln,
                                 double eps = 1e-5) {
  long M = x.rows(), N = x.cols();
  Tensor<double> y({M, N});
  for (long i = 0; i < M; ++i) {
    double mu = 0, var = 0;
    for (long j = 0; j < N; ++j) mu += x(i, j);
    mu /= N;
    for (long j = 0; j < N; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= N;
    double inv = 1.0 / std::sqrt(var + eps);
    for (long j = 0; j < N; ++j)
      y(i, j) = (x(i, j) - mu) * inv * ln.gamma.value[j] + ln.beta.value[j];
  }
  return y;
}

inline Tensor<double> dwconv(const Tensor<double>& x, const stn::DWConv2d<double>& cv,
                             long H, long W) {
  long C = x.cols();
  long K = (long)std::lround(std::sqrt((double)cv.w.value.rows()));
  long P = K / 2;
  Tensor<double> y({H * W, C});
  for (long h = 0; h < H; ++h)
    for (long w = 0; w < W; ++w)
      for (long c = 0; c < C; ++c) {
        double acc = cv.b.empty() ? 0.0 : cv.b.value[c];
        for (long i = 0; i < K; ++i)
          for (long j = 0; j < K; ++j) {
            long hy = h + i - P, wx = w + j - P;
            if (hy < 0 || hy >= H || wx < 0 || wx >= W) continue;
            acc += cv.w.value(i * K + j, c) * x(hy * W + wx, c);
          }
        y(h * W + w, c) = acc;
      }
  return y;
}

// ---- selective scan reference ---------------------------------------------------

// Straight per-step recurrence on explicit per-step dt/B/C arrays.
inline Tensor<double> selective_scan(const Tensor<double>& u, const Tensor<double>& dt,
                                     const Tensor<double>& B, const Tensor<double>& C,
                                     const Tensor<double>& A,
                                     const Tensor<double>& Dskip) {
  long L = u.rows(), D = u.cols(), N = A.cols();
  Tensor<double> y({L, D});
  std::vector<double> h((size_t)D * N, 0.0);
  for (long l = 0; l < L; ++l)
    for (long d = 0; d < D; ++d) {
      double acc = 0;
      for (long n = 0; n < N; ++n) {
        double abar = std::exp(dt(l, d) * A(d, n));
        double& hv = h[(size_t)d * N + n];
        hv = abar * hv + dt(l, d) * B(l, n) * u(l, d);
        acc += C(l, n) * hv;
      }
      y(l, d) = acc + Dskip[d] * u(l, d);
    }
  return y;
}

// Full S6 reference: recompute the dt/B/C projections by loops, then run the
// recurrence above.
inline Tensor<double> s6_forward(const Tensor<double>& u, const stn::S6Block<double>& s6) {
  long L = u.rows(), D = u.cols();
  long R = s6.dt_rank(), N = s6.state();
  Tensor<double> dt(stn::Shape{L, D});
  Tensor<double> B(stn::Shape{L, N});
  Tensor<double> C(stn::Shape{L, N});
  for (long l = 0; l < L; ++l) {
    std::vector<double> proj(R + 2 * N, 0.0);
    for (long j = 0; j < R + 2 * N; ++j)
      for (long d = 0; d < D; ++d) proj[j] += u(l, d) * s6.x_proj.value(d, j);
    for (long n = 0; n < N; ++n) {
      B(l, n) = proj[R + n];
      C(l, n) = proj[R + N + n];
    }
    for (long d = 0; d < D; ++d) {
      double acc = s6.dt_b.value[d];
      for (long r = 0; r < R; ++r) acc += proj[r] * s6.dt_w.value(r, d);
      dt(l, d) = softplus(acc);
    }
  }
  Tensor<double> A(stn::Shape{D, N});
  for (long d = 0; d < D; ++d)
    for (long n = 0; n < N; ++n) A(d, n) = -std::exp(s6.a_log.value(d, n));
  Tensor<double> Dskip(stn::Shape{D});
  for (long d = 0; d < D; ++d) Dskip[d] = s6.d_skip.value[d];
  return selective_scan(u, dt, B, C, A, Dskip);
}

inline Tensor<double> ss2d_forward(const Tensor<double>& x, stn::SS2D<double>& ss,
                                   long H, long W) {
  auto dirs = stn::cross_scan(x, H, W);
  std::array<Tensor<double>, 4> ys;
  for (int d = 0; d < 4; ++d) ys[d] = s6_forward(dirs[d], ss.direction(d));
  return stn::cross_merge(ys, H, W);
}

inline Tensor<double> vssb_forward(const Tensor<double>& x, stn::VSSB<double>& blk,
                                   long H, long W) {
  Tensor<double> gate = linear(x, blk.lin_gate);
  for (long i = 0; i < gate.numel(); ++i) gate[i] = silu(gate[i]);
  Tensor<double> t = linear(x, blk.lin_in);
  t = dwconv(t, blk.conv, H, W);
  for (long i = 0; i < t.numel(); ++i) t[i] = silu(t[i]);
  t = ss2d_forward(t, blk.ss2d, H, W);
  t = layer_norm(t, blk.norm);
  for (long i = 0; i < t.numel(); ++i) t[i] *= gate[i];
  Tensor<double> out = linear(t, blk.lin_out);
  for (long i = 0; i < out.numel(); ++i) out[i] += x[i];
  return out;
}

inline Tensor<double> msvssb_forward(const Tensor<double>& x, stn::MSVSSB<double>& blk,
                                     long H, long W) {
  Tensor<double> up = linear(x, blk.lin_up);
  for (long i = 0; i < up.numel(); ++i) up[i] = gelu(up[i]);
  Tensor<double> multi = dwconv(up, blk.dw1, H, W);
  Tensor<double> m3 = dwconv(up, blk.dw3, H, W);
  Tensor<double> m5 = dwconv(up, blk.dw5, H, W);
  for (long i = 0; i < multi.numel(); ++i) multi[i] += m3[i] + m5[i];
  Tensor<double> corr = linear(multi, blk.lin_down);
  for (long i = 0; i < corr.numel(); ++i) corr[i] += x[i];
  return vssb_forward(corr, blk.vssb, H, W);
}

// ---- finite differences ----------------------------------------------------------

struct FdResult {
  double max_err = 0;     // max over checked coords of |fd - an| / scale
  long checked = 0;
  bool pass(double tol = 1e-3) const { return checked > 0 && max_err < tol; }
};

// Central finite differences against analytic gradients.
//   watch:    tensors the scalar depends on (perturbed in place)
//   value:    fresh forward pass -> scalar
//   analytic: fresh forward+backward -> gradients aligned with `watch`
// Large tensors are subsampled to at most `max_coords` coordinates each.
inline FdResult fd_compare(std::vector<Tensor<double>*> watch,
                           const std::function<double()>& value,
                           const std::function<std::vector<Tensor<double>>()>& analytic,
                           Rng& rng, double eps = 1e-5, long max_coords = 24) {
  FdResult res;
  std::vector<Tensor<double>> an = analytic();
  REQUIRE(an.size() == watch.size());
  for (size_t t = 0; t < watch.size(); ++t) {
    Tensor<double>& x = *watch[t];
    long n = x.numel();
    std::vector<long> coords;
    if (n <= max_coords) {
      for (long i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (long k = 0; k < max_coords; ++k) coords.push_back(rng.uniform_int(n));
    }
    for (long i : coords) {
      double orig = x[i];
      x[i] = orig + eps;
      double fp = value();
      x[i] = orig - eps;
      double fm = value();
      x[i] = orig;
      double fd = (fp - fm) / (2 * eps);
      double ag = an[t][i];
      double err = std::abs(fd - ag) / std::max({std::abs(fd), std::abs(ag), 1e-4});
      res.max_err = std::max(res.max_err, err);
      ++res.checked;
    }
  }
  return res;
}

// Gradient check over a module: watches the given inputs plus every
// parameter the module registers. `build` assembles a scalar from the input
// leaf ids on a fresh tape.
template <class Visitable>
FdResult fd_check_module(
    Visitable& mod, std::vector<Tensor<double>*> inputs,
    const std::function<typename stn::Tape<double>::Id(
        stn::Ctx<double>&, const std::vector<typename stn::Tape<double>::Id>&)>& build,
    Rng& rng, long max_coords = 6) {
  std::vector<Tensor<double>*> watch = inputs;
  mod.visit("", [&](const std::string&, stn::Param<double>& p) {
    watch.push_back(&p.value);
  });
  auto value = [&]() {
    stn::Tape<double> g;
    stn::Ctx<double> ctx(g);
    std::vector<typename stn::Tape<double>::Id> ids;
    for (auto* t : inputs) ids.push_back(g.leaf(*t));
    return g.val(build(ctx, ids))[0];
  };
  auto analytic = [&]() {
    stn::Tape<double> g;
    stn::Ctx<double> ctx(g);
    std::vector<typename stn::Tape<double>::Id> ids;
    for (auto* t : inputs) ids.push_back(g.leaf(*t, /*needs_grad=*/true));
    g.backward(build(ctx, ids));
    std::vector<Tensor<double>> out;
    for (auto id : ids) out.push_back(g.grad(id).clone());
    mod.visit("", [&](const std::string&, stn::Param<double>& p) {
      Tensor<double> grad(p.value.shape());
      for (auto& [pp, id] : ctx.bound)
        if (pp == &p && g.has_grad(id)) grad = g.grad(id).clone();
      out.push_back(std::move(grad));
    });
    return out;
  };
  return fd_compare(watch, value, analytic, rng, 1e-5, max_coords);
}

}  // namespace oracle
