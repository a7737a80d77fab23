#pragma once

// Memory bank of normal-pattern prototypes: cosine addressing, top-k sparse
// softmax read, L2-normalized write, and the balanced memory-augmented
// output. Reads are pure; writes mutate the item matrix and are only legal
// in training mode.

#include <algorithm>
#include <array>
#include <numeric>

#include "stn/nn.hpp"

namespace stn {

inline constexpr double kNormEps = 1e-8;

// 0/1 mask keeping the ceil(k_percent*N/100) largest entries per row.
// Ties break toward the lower column index.
template <class S>
Tensor<S> topk_mask(const Tensor<S>& sim, double k_percent) {
  if (k_percent <= 0.0 || k_percent > 100.0)
    fail_config("k_percent must be in (0, 100], got " + std::to_string(k_percent));
  long R = sim.rows(), N = sim.cols();
  long keep = (long)std::ceil(k_percent * (double)N / 100.0);
  keep = std::min(keep, N);
  Tensor<S> mask({R, N});
  std::vector<long> order(N);
  for (long i = 0; i < R; ++i) {
    std::iota(order.begin(), order.end(), 0L);
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](long a, long b) {
                        if (sim(i, a) != sim(i, b)) return sim(i, a) > sim(i, b);
                        return a < b;
                      });
    for (long k = 0; k < keep; ++k) mask(i, order[k]) = S(1);
  }
  return mask;
}

// Plain-tensor top-k softmax: zero out everything below the top k%, then
// softmax over all N positions with the zeroed entries participating as 0.
template <class S>
Tensor<S> topk_softmax(const Tensor<S>& w_hat, double k_percent) {
  Tensor<S> mask = topk_mask(w_hat, k_percent);
  long R = w_hat.rows(), N = w_hat.cols();
  Tensor<S> w({R, N});
  for (long i = 0; i < R; ++i) {
    S mx = w_hat(i, 0) * mask(i, 0);
    for (long j = 1; j < N; ++j) mx = std::max(mx, w_hat(i, j) * mask(i, j));
    S z = 0;
    for (long j = 0; j < N; ++j) {
      S e = (S)std::exp((double)(w_hat(i, j) * mask(i, j) - mx));
      w(i, j) = e;
      z += e;
    }
    for (long j = 0; j < N; ++j) w(i, j) /= z;
  }
  return w;
}

// Indices (and squared L2 distances) of the two nearest memory items per
// query; ties break toward the lower index.
template <class S>
struct NearestTwo {
  std::vector<long> first, second;
  std::vector<S> d1, d2;  // squared distances
};

template <class S>
NearestTwo<S> nearest_two_items(const Tensor<S>& Q, const Tensor<S>& M) {
  long R = Q.rows(), N = M.rows(), C = Q.cols();
  if (M.cols() != C) fail_shape("nearest_two_items", "dim", C, M.cols());
  if (N < 2)
    fail_config("nearest_two_items requires at least 2 memory items, got " +
                std::to_string(N));
  NearestTwo<S> out;
  out.first.resize(R);
  out.second.resize(R);
  out.d1.resize(R);
  out.d2.resize(R);
  for (long i = 0; i < R; ++i) {
    long b1 = -1, b2 = -1;
    S v1 = 0, v2 = 0;
    for (long j = 0; j < N; ++j) {
      S d = 0;
      for (long c = 0; c < C; ++c) {
        S t = Q(i, c) - M(j, c);
        d += t * t;
      }
      if (b1 < 0 || d < v1) {
        b2 = b1;
        v2 = v1;
        b1 = j;
        v1 = d;
      } else if (b2 < 0 || d < v2) {
        b2 = j;
        v2 = d;
      }
    }
    out.first[i] = b1;
    out.second[i] = b2;
    out.d1[i] = v1;
    out.d2[i] = v2;
  }
  return out;
}

template <class S>
struct MemoryRead {
  typename Tape<S>::Id q_hat = Tape<S>::kNone;    // reconstructed queries
  typename Tape<S>::Id weights = Tape<S>::kNone;  // read weights, rows sum to 1
};

template <class S>
class MemoryBank {
 public:
  using Id = typename Tape<S>::Id;

  MemoryBank() = default;
  MemoryBank(Rng& rng, long items, long channels, double k_percent)
      : k_percent_(k_percent),
        m(Tensor<S>({items, channels})),
        s(Tensor<S>::full({channels}, S(1))) {
    // Items start uniform in [-1,1], projected to the unit sphere; the write
    // operation keeps them there.
    rng.fill_uniform(m.value, -1.0, 1.0);
    normalize_rows(m.value);
  }

  long items() const { return m.value.rows(); }
  long channels() const { return m.value.cols(); }
  double k_percent() const { return k_percent_; }
  void set_k_percent(double k) {
    if (k <= 0.0 || k > 100.0) fail_config("k_percent must be in (0, 100]");
    k_percent_ = k;
  }

  // Reconstruct queries from memory items. The top-k mask is computed from
  // the current similarity values and held constant through backward.
  MemoryRead<S> read(Ctx<S>& ctx, Id q) {
    auto& g = ctx.g;
    Id mem = ctx.use(m);
    Id sim = g.cosine_sim(q, mem, (S)kNormEps);
    Tensor<S> mask = topk_mask(g.val(sim), k_percent_);
    Id w = g.softmax_rows(g.mask(sim, std::move(mask)));
    MemoryRead<S> out;
    out.weights = w;
    out.q_hat = g.matmul(w, mem);
    return out;
  }

  // Same read with a caller-fixed top-k mask (used by the gradient checks).
  MemoryRead<S> read_with_mask(Ctx<S>& ctx, Id q, Tensor<S> mask) {
    auto& g = ctx.g;
    Id mem = ctx.use(m);
    Id sim = g.cosine_sim(q, mem, (S)kNormEps);
    Id w = g.softmax_rows(g.mask(sim, std::move(mask)));
    return {g.matmul(w, mem), w};
  }

  // F_m + s * F_st with s broadcast over spatial positions.
  struct Augmented {
    Id out = Tape<S>::kNone;
    MemoryRead<S> read;
  };
  Augmented augment(Ctx<S>& ctx, Id f_st) {
    auto& g = ctx.g;
    Augmented a;
    a.read = read(ctx, f_st);
    a.out = g.add(a.read.q_hat, g.mul_cols(f_st, ctx.use(s)));
    return a;
  }

  // Update every item from the query set: softmax attention of each item over
  // the queries, then renormalize to the unit sphere. Training only.
  void write(const Tensor<S>& Q, bool train_mode) {
    if (!train_mode)
      fail_contract("memory write attempted at test time; the bank is frozen "
                    "outside training");
    long N = items(), C = channels(), R = Q.rows();
    if (Q.cols() != C) fail_shape("memory_write", "dim", C, Q.cols());
    Tensor<S>& M = m.value;
    // cos(m_j, q_i), softmax over queries per item
    std::vector<double> qn(R);
    for (long i = 0; i < R; ++i) {
      double t = 0;
      for (long c = 0; c < C; ++c) t += (double)Q(i, c) * (double)Q(i, c);
      qn[i] = std::sqrt(t);
    }
    Tensor<S> updated({N, C});
    std::vector<double> sims(R);
    for (long j = 0; j < N; ++j) {
      double mn = 0;
      for (long c = 0; c < C; ++c) mn += (double)M(j, c) * (double)M(j, c);
      mn = std::sqrt(mn);
      double mx = -1e300;
      for (long i = 0; i < R; ++i) {
        double dot = 0;
        for (long c = 0; c < C; ++c) dot += (double)M(j, c) * (double)Q(i, c);
        sims[i] = dot / (mn * qn[i] + kNormEps);
        mx = std::max(mx, sims[i]);
      }
      double z = 0;
      for (long i = 0; i < R; ++i) {
        sims[i] = std::exp(sims[i] - mx);
        z += sims[i];
      }
      for (long c = 0; c < C; ++c) updated(j, c) = M(j, c);
      for (long i = 0; i < R; ++i) {
        S wi = (S)(sims[i] / z);
        for (long c = 0; c < C; ++c) updated(j, c) += wi * Q(i, c);
      }
    }
    normalize_rows(updated);
    m.value = std::move(updated);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".m", m);
    v(prefix + ".s", s);
  }

  Param<S> m;  // N x C prototype matrix
  Param<S> s;  // per-channel balance coefficient

 private:
  double k_percent_ = 60.0;

  static void normalize_rows(Tensor<S>& t) {
    for (long j = 0; j < t.rows(); ++j) {
      double n = 0;
      for (long c = 0; c < t.cols(); ++c) n += (double)t(j, c) * (double)t(j, c);
      n = std::sqrt(n) + kNormEps;
      for (long c = 0; c < t.cols(); ++c) t(j, c) = (S)((double)t(j, c) / n);
    }
  }
};

}  // namespace stn
