#pragma once

// Spatial-Temporal Interaction Module: one fusion block plus one memory bank
// per encoder level. Ablation switches swap the fusion block for a
// concatenate+linear fuse, drop banks per level, or restrict interaction to
// the bottleneck with plain skips elsewhere.

#include <array>
#include <optional>

#include "stn/blocks.hpp"
#include "stn/memory.hpp"

namespace stn {

template <class S>
struct Feature {
  typename Tape<S>::Id id = Tape<S>::kNone;
  long h = 0, w = 0;
};

// Spatial-Temporal Fusion Block. Both streams are normalized and projected
// into a shared hidden space, mixed multiplicatively and additively, run
// through one SS2D, gated per stream, and recombined through an ECA layer.
template <class S>
class STFB {
 public:
  using Id = typename Tape<S>::Id;

  STFB() = default;
  STFB(Rng& rng, long channels, long state)
      : norm_s(channels),
        norm_t(channels),
        lin_s(rng, channels, channels),
        lin_t(rng, channels, channels),
        dw_s(rng, 3, channels, /*bias=*/true),
        dw_t(rng, 3, channels, /*bias=*/true),
        ss2d(rng, channels, state),
        norm_h(channels),
        norm_gs(channels),
        norm_gt(channels),
        lin_gs(rng, channels, channels),
        lin_gt(rng, channels, channels),
        lin_out(rng, channels, channels),
        eca(rng, channels) {}

  Id forward(Ctx<S>& ctx, Id f_s, Id f_t, long H, long W) {
    auto& g = ctx.g;
    check_same_shape("STFB", g.val(f_s), g.val(f_t));
    Id d_s = dw_s.forward(ctx, lin_s.forward(ctx, norm_s.forward(ctx, f_s)), H, W);
    Id d_t = dw_t.forward(ctx, lin_t.forward(ctx, norm_t.forward(ctx, f_t)), H, W);
    Id mixed = g.add(g.add(g.mul(d_s, d_t), d_s), d_t);
    Id hidden = norm_h.forward(ctx, ss2d.forward(ctx, mixed, H, W));
    Id h_s = g.mul(hidden, g.silu(lin_gs.forward(ctx, norm_gs.forward(ctx, f_s))));
    Id h_t = g.mul(hidden, g.silu(lin_gt.forward(ctx, norm_gt.forward(ctx, f_t))));
    Id out = lin_out.forward(ctx, g.add(h_s, h_t));
    return eca.forward(ctx, g.add(g.add(out, f_s), f_t));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    norm_s.visit(prefix + ".norm_s", v);
    norm_t.visit(prefix + ".norm_t", v);
    lin_s.visit(prefix + ".lin_s", v);
    lin_t.visit(prefix + ".lin_t", v);
    dw_s.visit(prefix + ".dw_s", v);
    dw_t.visit(prefix + ".dw_t", v);
    ss2d.visit(prefix + ".ss2d", v);
    norm_h.visit(prefix + ".norm_h", v);
    norm_gs.visit(prefix + ".norm_gs", v);
    norm_gt.visit(prefix + ".norm_gt", v);
    lin_gs.visit(prefix + ".lin_gs", v);
    lin_gt.visit(prefix + ".lin_gt", v);
    lin_out.visit(prefix + ".lin_out", v);
    eca.visit(prefix + ".eca", v);
  }

  LayerNorm<S> norm_s, norm_t;
  Linear<S> lin_s, lin_t;
  DWConv2d<S> dw_s, dw_t;
  SS2D<S> ss2d;
  LayerNorm<S> norm_h, norm_gs, norm_gt;
  Linear<S> lin_gs, lin_gt;
  Linear<S> lin_out;
  ECA<S> eca;
};

struct StimFlags {
  bool stfb = true;              // false: concatenate + linear fuse
  bool multi_level = true;       // false: fuse at the bottleneck only
  std::array<bool, 4> memory{true, true, true, true};

  bool any_memory() const {
    return memory[0] || memory[1] || memory[2] || memory[3];
  }
};

template <class S>
struct StimResult {
  std::array<Feature<S>, 4> fused;
  // Query maps (the flattened pre-memory fused features) and read weights,
  // kNone at levels without a bank.
  std::array<typename Tape<S>::Id, 4> queries;
  std::array<typename Tape<S>::Id, 4> weights;

  StimResult() {
    queries.fill(Tape<S>::kNone);
    weights.fill(Tape<S>::kNone);
  }
};

template <class S>
class STIM {
 public:
  using Id = typename Tape<S>::Id;

  STIM() = default;
  STIM(Rng& rng, const std::array<long, 4>& channels,
       const std::array<long, 4>& mem_items, long state, double k_percent,
       StimFlags flags)
      : flags_(flags) {
    for (int i = 0; i < 4; ++i) {
      bool active = flags_.multi_level || i == 3;
      if (!active) continue;
      if (flags_.stfb)
        stfb_[i] = STFB<S>(rng, channels[i], state);
      else
        concat_fuse_[i] = Linear<S>(rng, 2 * channels[i], channels[i]);
      if (flags_.memory[i])
        bank_[i] = MemoryBank<S>(rng, mem_items[i], channels[i], k_percent);
    }
  }

  const StimFlags& flags() const { return flags_; }
  bool has_bank(int i) const { return bank_[i].has_value(); }
  MemoryBank<S>& bank(int i) { return *bank_[i]; }
  STFB<S>* stfb_block(int i) { return stfb_[i] ? &*stfb_[i] : nullptr; }
  Linear<S>* concat_block(int i) {
    return concat_fuse_[i] ? &*concat_fuse_[i] : nullptr;
  }

  StimResult<S> forward(Ctx<S>& ctx, const std::array<Feature<S>, 4>& spatial,
                        const std::array<Feature<S>, 4>& temporal) {
    auto& g = ctx.g;
    StimResult<S> out;
    for (int i = 0; i < 4; ++i) {
      const Feature<S>& fs = spatial[i];
      const Feature<S>& ft = temporal[i];
      if (fs.id == Tape<S>::kNone || ft.id == Tape<S>::kNone)
        fail_config("stim_forward: missing level " + std::to_string(i + 1));
      check_same_shape("stim level", g.val(fs.id), g.val(ft.id));
      bool active = flags_.multi_level || i == 3;
      Id f_st;
      if (!active) {
        f_st = g.add(fs.id, ft.id);  // plain skip
      } else if (flags_.stfb) {
        f_st = stfb_[i]->forward(ctx, fs.id, ft.id, fs.h, fs.w);
      } else {
        f_st = concat_fuse_[i]->forward(ctx, g.concat_cols(fs.id, ft.id));
      }
      Id f_tilde = f_st;
      if (active && bank_[i]) {
        auto aug = bank_[i]->augment(ctx, f_st);
        f_tilde = aug.out;
        out.queries[i] = f_st;
        out.weights[i] = aug.read.weights;
      }
      out.fused[i] = {f_tilde, fs.h, fs.w};
    }
    return out;
  }

  // Memory update for one level from pooled batch queries. Caller sequences
  // this after the optimizer step.
  void write_level(int i, const Tensor<S>& queries, bool train_mode) {
    if (!bank_[i]) fail_config("write_level: no bank at level " + std::to_string(i + 1));
    bank_[i]->write(queries, train_mode);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    for (int i = 0; i < 4; ++i) {
      std::string lvl = prefix + ".l" + std::to_string(i + 1);
      if (stfb_[i]) stfb_[i]->visit(lvl + ".stfb", v);
      if (concat_fuse_[i]) concat_fuse_[i]->visit(lvl + ".concat_fuse", v);
      if (bank_[i]) bank_[i]->visit(lvl + ".bank", v);
    }
  }

 private:
  StimFlags flags_;
  std::array<std::optional<STFB<S>>, 4> stfb_;
  std::array<std::optional<Linear<S>>, 4> concat_fuse_;
  std::array<std::optional<MemoryBank<S>>, 4> bank_;
};

}  // namespace stn
