#pragma once

// Anomaly scoring: PSNR in the display range, per-level memory distances,
// per-video min-max fusion, and the frame-level ROC AUC.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "stn/common.hpp"
#include "stn/memory.hpp"

namespace stn {

inline constexpr double kScoreEps = 1e-8;

// PSNR between prediction and ground truth, both given in [-1, 1] and
// remapped to the [0, 1] display range. The numerator is the predicted
// frame's own maximum; MSE (and a non-positive maximum) are floored at eps.
template <class S>
double psnr_score(const Tensor<S>& pred, const Tensor<S>& target) {
  check_same_shape("psnr_score", pred, target);
  double mx = 0.0;
  double mse = 0.0;
  for (long i = 0; i < pred.numel(); ++i) {
    double p = ((double)pred[i] + 1.0) * 0.5;
    double t = ((double)target[i] + 1.0) * 0.5;
    mx = std::max(mx, p);
    double d = p - t;
    mse += d * d;
  }
  mse /= (double)pred.numel();
  mse = std::max(mse, kScoreEps);
  mx = std::max(mx, kScoreEps);
  return 10.0 * std::log10(mx / mse);
}

// Mean squared distance from each query to its nearest memory item.
template <class S>
double memory_distance_score(const Tensor<S>& Q, const Tensor<S>& M) {
  auto nn = nearest_two_items(Q, M);
  double acc = 0.0;
  for (S d : nn.d1) acc += (double)d;
  return acc / (double)nn.d1.size();
}

inline std::vector<double> minmax_normalize(const std::vector<double>& v) {
  if (v.empty()) fail_data("minmax_normalize: empty sequence");
  double lo = v[0], hi = v[0];
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<double> out(v.size());
  double den = hi - lo + kScoreEps;
  for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / den;
  return out;
}

// Raw per-video sequences prior to normalization. sd[level] is empty when
// that level has no memory bank.
struct VideoScores {
  std::vector<long> frame;                  // target frame index per entry
  std::vector<double> sp;                   // PSNR
  std::array<std::vector<double>, 4> sd;    // per-level memory distances
  std::vector<int> labels;                  // optional (empty when unlabeled)
};

struct FusedScores {
  std::vector<double> anomaly;    // S in [0, 1]
  std::vector<double> normality;  // 1 - S
};

// Eq-style fusion, all normalizations per video: the PSNR channel enters as
// 1 - g(S_p); the distance channel as g(sum_i g(S_d^i)). Without any memory
// bank the distance channel is dropped and S = 1 - g(S_p).
inline FusedScores anomaly_scores(const VideoScores& v, double tau) {
  if (v.sp.empty()) fail_data("anomaly_scores: empty video");
  size_t n = v.sp.size();
  std::vector<double> gp = minmax_normalize(v.sp);
  bool any_sd = false;
  std::vector<double> dist_sum(n, 0.0);
  for (const auto& sd : v.sd) {
    if (sd.empty()) continue;
    if (sd.size() != n) fail_data("anomaly_scores: distance/psnr length mismatch");
    any_sd = true;
    std::vector<double> g = minmax_normalize(sd);
    for (size_t i = 0; i < n; ++i) dist_sum[i] += g[i];
  }
  FusedScores out;
  out.anomaly.resize(n);
  out.normality.resize(n);
  if (any_sd) {
    std::vector<double> gd = minmax_normalize(dist_sum);
    for (size_t i = 0; i < n; ++i)
      out.anomaly[i] = tau * (1.0 - gp[i]) + (1.0 - tau) * gd[i];
  } else {
    for (size_t i = 0; i < n; ++i) out.anomaly[i] = 1.0 - gp[i];
  }
  for (size_t i = 0; i < n; ++i) out.normality[i] = 1.0 - out.anomaly[i];
  return out;
}

// Frame-level ROC AUC of anomaly scores against binary labels (1 = anomalous),
// by the rank-statistic formulation with average ranks on ties.
inline double frame_level_auc(const std::vector<double>& scores,
                              const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    fail_data("frame_level_auc: score/label length mismatch");
  long n = (long)scores.size();
  long n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) fail_data("frame_level_auc: labels must be 0/1");
    n_pos += l;
  }
  long n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    fail_data("frame_level_auc: labels contain a single class; AUC undefined");
  std::vector<long> order(n);
  for (long i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](long a, long b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  long i = 0;
  while (i < n) {
    long j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (double)(i + j) + 1.0;  // ranks are 1-based
    for (long k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  double u = rank_sum_pos - 0.5 * (double)n_pos * (double)(n_pos + 1);
  return u / ((double)n_pos * (double)n_neg);
}

}  // namespace stn
