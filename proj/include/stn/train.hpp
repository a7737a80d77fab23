#pragma once

// Loss graph construction (templated, so the gradient checks can run it in
// float64) and the float training loop.

#include <functional>

#include "stn/checkpoint.hpp"
#include "stn/data.hpp"
#include "stn/optim.hpp"

namespace stn {

// Mean squared error over all pixels and channels.
template <class S>
typename Tape<S>::Id prediction_loss(Tape<S>& g, typename Tape<S>::Id pred,
                                     typename Tape<S>::Id target) {
  check_same_shape("prediction_loss", g.val(pred), g.val(target));
  auto d = g.sub(pred, target);
  return g.mean_all(g.mul(d, d));
}

// Sum over queries of the squared distance to the nearest memory item.
// The nearest-item assignment is computed from current values and held
// constant through backward; gradients flow into both queries and items.
template <class S>
typename Tape<S>::Id compactness_loss(Ctx<S>& ctx, typename Tape<S>::Id q,
                                      MemoryBank<S>& bank) {
  auto nn = nearest_two_items(ctx.g.val(q), bank.m.value);
  auto m1 = ctx.g.gather_rows(ctx.use(bank.m), std::move(nn.first));
  auto d = ctx.g.sub(q, m1);
  return ctx.g.sum_all(ctx.g.mul(d, d));
}

// Mean over queries of (d(q, m1)^2 - d(q, m2)^2); non-positive by
// construction of the nearest ordering.
template <class S>
typename Tape<S>::Id sparsity_loss(Ctx<S>& ctx, typename Tape<S>::Id q,
                                   MemoryBank<S>& bank) {
  long n_hat = ctx.g.val(q).rows();
  auto nn = nearest_two_items(ctx.g.val(q), bank.m.value);
  auto m1 = ctx.g.gather_rows(ctx.use(bank.m), std::move(nn.first));
  auto m2 = ctx.g.gather_rows(ctx.use(bank.m), std::move(nn.second));
  auto d1 = ctx.g.sub(q, m1);
  auto d2 = ctx.g.sub(q, m2);
  auto diff = ctx.g.sub(ctx.g.sum_all(ctx.g.mul(d1, d1)),
                        ctx.g.sum_all(ctx.g.mul(d2, d2)));
  return ctx.g.scale(diff, S(1) / (S)n_hat);
}

template <class S>
struct LossGraph {
  using Id = typename Tape<S>::Id;
  Id total = Tape<S>::kNone;
  Id pred = Tape<S>::kNone;
  std::array<Id, 4> compact;
  std::array<Id, 4> sparse;

  LossGraph() {
    compact.fill(Tape<S>::kNone);
    sparse.fill(Tape<S>::kNone);
  }
};

// total = L_p + lambda1 * sum_i L_c^i + lambda2 * sum_i L_s^i over the levels
// that carry a memory bank.
template <class S>
LossGraph<S> build_loss(Ctx<S>& ctx, STNMamba<S>& model,
                        const ForwardOut<S>& out, typename Tape<S>::Id target) {
  const ModelConfig& cfg = model.config();
  auto& g = ctx.g;
  LossGraph<S> loss;
  loss.pred = prediction_loss(g, out.prediction, target);
  loss.total = loss.pred;
  typename Tape<S>::Id c_sum = Tape<S>::kNone;
  typename Tape<S>::Id s_sum = Tape<S>::kNone;
  for (int i = 0; i < 4; ++i) {
    if (out.stim.queries[i] == Tape<S>::kNone || !model.stim.has_bank(i)) continue;
    MemoryBank<S>& bank = model.stim.bank(i);
    if (cfg.loss_compactness) {
      loss.compact[i] = compactness_loss(ctx, out.stim.queries[i], bank);
      c_sum = c_sum == Tape<S>::kNone ? loss.compact[i] : g.add(c_sum, loss.compact[i]);
    }
    if (cfg.loss_sparsity) {
      loss.sparse[i] = sparsity_loss(ctx, out.stim.queries[i], bank);
      s_sum = s_sum == Tape<S>::kNone ? loss.sparse[i] : g.add(s_sum, loss.sparse[i]);
    }
  }
  if (c_sum != Tape<S>::kNone)
    loss.total = g.add(loss.total, g.scale(c_sum, (S)cfg.lambda1));
  if (s_sum != Tape<S>::kNone)
    loss.total = g.add(loss.total, g.scale(s_sum, (S)cfg.lambda2));
  return loss;
}

struct LossBreakdown {
  double pred = 0, compact_total = 0, sparse_total = 0, total = 0;
};

struct TrainOptions {
  std::string out_dir;          // loss.csv, checkpoints, diagnostics
  long steps = 0;               // absolute final step count
  std::string resume_ckpt;      // continue from this checkpoint if set
  std::function<void(long, const LossBreakdown&)> on_step;
};

struct TrainResult {
  long final_step = 0;
  std::string final_checkpoint;
};

// Adam training loop: forward -> total loss -> backward -> optimizer step ->
// memory write (pooled batch queries), one loss-CSV row per step, periodic
// checkpoints. lr == 0 is a dry run; neither parameters nor memory change.
TrainResult train_model(STNMamba<float>& model, const DatasetIndex& data,
                        const TrainOptions& options);

}  // namespace stn
