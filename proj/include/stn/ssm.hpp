#pragma once

// Selective-scan state-space primitives: the S6 recurrence with its
// data-dependent projections, the four-direction cross-scan/merge, the SS2D
// layer, and the VSS block that wraps it.

#include <array>
#include <cmath>

#include "stn/nn.hpp"

namespace stn {

// ---- cross-scan order ------------------------------------------------------
//
// Direction layout (fixed; checkpoints depend on it):
//   0: row-major forward      1: row-major reverse
//   2: column-major forward   3: column-major reverse
// perm[d][s] is the row-major source index of sequence position s.

inline std::array<std::vector<long>, 4> scan_perms(long H, long W) {
  long L = H * W;
  std::array<std::vector<long>, 4> p;
  for (auto& v : p) v.resize(L);
  for (long s = 0; s < L; ++s) {
    p[0][s] = s;
    p[1][s] = L - 1 - s;
    p[2][s] = (s % H) * W + (s / H);
    p[3][s] = ((L - 1 - s) % H) * W + ((L - 1 - s) / H);
  }
  return p;
}

inline std::vector<long> invert_perm(const std::vector<long>& p) {
  std::vector<long> inv(p.size());
  for (long s = 0; s < (long)p.size(); ++s) inv[p[s]] = s;
  return inv;
}

// Plain-tensor cross-scan: four L x D sequences from an (H*W) x D map.
template <class S>
std::array<Tensor<S>, 4> cross_scan(const Tensor<S>& x, long H, long W) {
  if (x.rows() != H * W) fail_shape("cross_scan", "rows", H * W, x.rows());
  auto perms = scan_perms(H, W);
  long D = x.cols();
  std::array<Tensor<S>, 4> out;
  for (int d = 0; d < 4; ++d) {
    out[d] = Tensor<S>({H * W, D});
    for (long s = 0; s < H * W; ++s)
      std::memcpy(&out[d](s, 0), &x(perms[d][s], 0), sizeof(S) * D);
  }
  return out;
}

// Inverse-permute each direction back to row-major order and sum.
template <class S>
Tensor<S> cross_merge(const std::array<Tensor<S>, 4>& dirs, long H, long W) {
  long L = H * W;
  long D = dirs[0].cols();
  for (int d = 1; d < 4; ++d)
    if (dirs[d].rows() != L || dirs[d].cols() != D)
      fail_shape("cross_merge", "dir" + std::to_string(d), L * D,
                 dirs[d].numel());
  if (dirs[0].rows() != L) fail_shape("cross_merge", "dir0", L, dirs[0].rows());
  auto perms = scan_perms(H, W);
  Tensor<S> y({L, D});
  for (int d = 0; d < 4; ++d)
    for (long s = 0; s < L; ++s) {
      const S* src = &dirs[d](s, 0);
      S* dst = &y(perms[d][s], 0);
      for (long c = 0; c < D; ++c) dst[c] += src[c];
    }
  return y;
}

// ---- S6 block ---------------------------------------------------------------

// One direction's selective scan: per-step dt/B/C are projected from the
// input, dt goes through softplus, A is stored as log of its negation so the
// effective state matrix is strictly negative.
template <class S>
class S6Block {
 private:
  long dim_ = 0, state_ = 0, rank_ = 0;

 public:
  using Id = typename Tape<S>::Id;

  S6Block() = default;
  S6Block(Rng& rng, long dim, long state, long dt_rank = 0)
      : dim_(dim),
        state_(state),
        rank_(dt_rank > 0 ? dt_rank : std::max<long>(1, dim / 16)),
        x_proj(Tensor<S>({dim, rank_ + 2 * state})),
        dt_w(Tensor<S>({rank_, dim})),
        dt_b(Tensor<S>(Shape{dim})),
        a_log(Tensor<S>({dim, state})),
        d_skip(Tensor<S>::full({dim}, S(1))) {
    rng.fill_trunc_normal(x_proj.value, 0.02);
    double s = 1.0 / std::sqrt((double)rank_);
    rng.fill_uniform(dt_w.value, -s, s);
    // dt at init lands in [1e-3, 1e-1] after softplus.
    for (long d = 0; d < dim; ++d) {
      double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      dt_b.value[d] = (S)std::log(std::expm1(dt0));
    }
    for (long d = 0; d < dim; ++d)
      for (long n = 0; n < state; ++n)
        a_log.value(d, n) = (S)std::log((double)(n + 1));
  }

  long dim() const { return dim_; }
  long state() const { return state_; }
  long dt_rank() const { return rank_; }

  // u: L x D -> y: L x D
  Id forward(Ctx<S>& ctx, Id u) {
    auto& g = ctx.g;
    if (g.val(u).cols() != dim_)
      fail_shape("S6Block", "channels", dim_, g.val(u).cols());
    Id proj = g.matmul(u, ctx.use(x_proj));
    Id dt_low = g.slice_cols(proj, 0, rank_);
    Id bm = g.slice_cols(proj, rank_, state_);
    Id cm = g.slice_cols(proj, rank_ + state_, state_);
    Id dt = g.softplus(g.add_bias(g.matmul(dt_low, ctx.use(dt_w)), ctx.use(dt_b)));
    Id a = g.neg_exp(ctx.use(a_log));
    return g.selective_scan(u, dt, bm, cm, a, ctx.use(d_skip));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".x_proj", x_proj);
    v(prefix + ".dt_w", dt_w);
    v(prefix + ".dt_b", dt_b);
    v(prefix + ".a_log", a_log);
    v(prefix + ".d_skip", d_skip);
  }

  Param<S> x_proj, dt_w, dt_b, a_log, d_skip;
};

// ---- SS2D -------------------------------------------------------------------

// Cross-scan along four directions, one S6 per direction, cross-merge.
template <class S>
class SS2D {
 public:
  using Id = typename Tape<S>::Id;

  SS2D() = default;
  SS2D(Rng& rng, long dim, long state) {
    for (int d = 0; d < 4; ++d) s6_[d] = S6Block<S>(rng, dim, state);
  }

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    auto& g = ctx.g;
    if (g.val(x).rows() != H * W)
      fail_shape("SS2D", "rows", H * W, g.val(x).rows());
    auto perms = scan_perms(H, W);
    Id acc = Tape<S>::kNone;
    for (int d = 0; d < 4; ++d) {
      Id seq = g.gather_rows(x, perms[d]);
      Id y = s6_[d].forward(ctx, seq);
      Id back = g.gather_rows(y, invert_perm(perms[d]));
      acc = acc == Tape<S>::kNone ? back : g.add(acc, back);
    }
    return acc;
  }

  S6Block<S>& direction(int d) { return s6_[d]; }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    for (int d = 0; d < 4; ++d)
      s6_[d].visit(prefix + ".dir" + std::to_string(d), v);
  }

 private:
  std::array<S6Block<S>, 4> s6_;
};

// ---- VSS block ---------------------------------------------------------------

// Two-branch gated block: silu(Linear) gate times LN(SS2D(silu(DWConv(Linear)))),
// projected back and added to the input.
template <class S>
class VSSB {
 private:
  long channels_ = 0, inner_ = 0;

 public:
  using Id = typename Tape<S>::Id;

  VSSB() = default;
  VSSB(Rng& rng, long channels, long state, long expand)
      : channels_(channels),
        inner_(channels * expand),
        lin_gate(rng, channels, inner_),
        lin_in(rng, channels, inner_),
        conv(rng, 3, inner_, /*bias=*/true),
        ss2d(rng, inner_, state),
        norm(inner_),
        lin_out(rng, inner_, channels) {}

  long channels() const { return channels_; }

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    auto& g = ctx.g;
    if (g.val(x).cols() != channels_)
      fail_shape("VSSB", "channels", channels_, g.val(x).cols());
    Id gate = g.silu(lin_gate.forward(ctx, x));
    Id t = g.silu(conv.forward(ctx, lin_in.forward(ctx, x), H, W));
    t = norm.forward(ctx, ss2d.forward(ctx, t, H, W));
    Id mixed = lin_out.forward(ctx, g.mul(gate, t));
    return g.add(x, mixed);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    lin_gate.visit(prefix + ".lin_gate", v);
    lin_in.visit(prefix + ".lin_in", v);
    conv.visit(prefix + ".conv", v);
    ss2d.visit(prefix + ".ss2d", v);
    norm.visit(prefix + ".norm", v);
    lin_out.visit(prefix + ".lin_out", v);
  }

  Linear<S> lin_gate, lin_in;
  DWConv2d<S> conv;
  SS2D<S> ss2d;
  LayerNorm<S> norm;
  Linear<S> lin_out;
};

}  // namespace stn
