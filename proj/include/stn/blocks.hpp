#pragma once

// Composite building blocks: patch embedding/merging/expanding, the
// multi-scale and channel-aware VSS blocks, the ECA channel gate, and the
// final projection back to image space.

#include "stn/ssm.hpp"

namespace stn {

template <class S>
class PatchEmbed {
 public:
  using Id = typename Tape<S>::Id;

  PatchEmbed() = default;
  PatchEmbed(Rng& rng, long in_channels, long out_channels)
      : proj(rng, 16 * in_channels, out_channels), norm(out_channels) {}

  // H x W x Cin -> (H/4) x (W/4) x Cout
  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    Id patches = ctx.g.space_to_depth(x, H, W, 4);
    return norm.forward(ctx, proj.forward(ctx, patches));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    proj.visit(prefix + ".proj", v);
    norm.visit(prefix + ".norm", v);
  }

  Linear<S> proj;
  LayerNorm<S> norm;
};

template <class S>
class PatchMerge {
 public:
  using Id = typename Tape<S>::Id;

  PatchMerge() = default;
  PatchMerge(Rng& rng, long channels)
      : norm(4 * channels), reduce(rng, 4 * channels, 2 * channels, /*bias=*/false) {}

  // H x W x C -> (H/2) x (W/2) x 2C
  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    Id merged = ctx.g.space_to_depth(x, H, W, 2);
    return reduce.forward(ctx, norm.forward(ctx, merged));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    norm.visit(prefix + ".norm", v);
    reduce.visit(prefix + ".reduce", v);
  }

  LayerNorm<S> norm;
  Linear<S> reduce;
};

template <class S>
class PatchExpand {
 public:
  using Id = typename Tape<S>::Id;

  PatchExpand() = default;
  PatchExpand(Rng& rng, long channels, long factor)
      : factor_(factor),
        expand(rng, channels, factor * channels, /*bias=*/false) {
    if (channels % factor)
      fail_config("patch_expand: channels " + std::to_string(channels) +
                  " not divisible by factor " + std::to_string(factor));
  }

  // H x W x C -> (fH) x (fW) x (C/f)
  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    return ctx.g.depth_to_space(expand.forward(ctx, x), H, W, factor_);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    expand.visit(prefix + ".expand", v);
  }

  Linear<S> expand;

 private:
  long factor_ = 2;
};

// Final projection: 4x patch expand to full resolution, then a linear map to
// 3 channels. Output stays linear unless the tanh squash is enabled.
template <class S>
class FinalProjection {
 public:
  using Id = typename Tape<S>::Id;

  FinalProjection() = default;
  FinalProjection(Rng& rng, long channels, bool tanh_output = false)
      : expand(rng, channels, 4), to_rgb(rng, channels / 4, 3),
        tanh_output_(tanh_output) {}

  // (H/4) x (W/4) x C -> H x W x 3
  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    Id up = expand.forward(ctx, x, H, W);
    Id rgb = to_rgb.forward(ctx, up);
    return tanh_output_ ? ctx.g.tanh_op(rgb) : rgb;
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    expand.visit(prefix + ".expand", v);
    to_rgb.visit(prefix + ".to_rgb", v);
  }

  PatchExpand<S> expand;
  Linear<S> to_rgb;

 private:
  bool tanh_output_ = false;
};

// Efficient channel attention: global average pool, 1D conv across channels
// with an adaptive odd kernel, sigmoid gate.
template <class S>
class ECA {
 public:
  using Id = typename Tape<S>::Id;

  static long kernel_for(long channels) {
    long t = (long)std::floor((std::log2((double)channels) + 1.0) / 2.0);
    if (t % 2 == 0) t += 1;
    return std::max<long>(t, 3);
  }

  ECA() = default;
  ECA(Rng& rng, long channels) : w(Tensor<S>(Shape{kernel_for(channels)})) {
    rng.fill_trunc_normal(w.value, 0.02);
  }

  Id forward(Ctx<S>& ctx, Id x) {
    auto& g = ctx.g;
    Id pooled = g.avgpool_rows(x);
    Id gate = g.sigmoid(g.conv1d_row(pooled, ctx.use(w)));
    return g.mul_cols(x, gate);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".w", w);
  }

  Param<S> w;
};

// Multi-scale VSS block: parallel 1/3/5 depth-wise convolutions feed a
// residual correction before the VSSB.
template <class S>
class MSVSSB {
 public:
  using Id = typename Tape<S>::Id;

  MSVSSB() = default;
  MSVSSB(Rng& rng, long channels, long state, long expand)
      : lin_up(rng, channels, expand * channels),
        dw1(rng, 1, expand * channels, /*bias=*/false),
        dw3(rng, 3, expand * channels, /*bias=*/false),
        dw5(rng, 5, expand * channels, /*bias=*/false),
        lin_down(rng, expand * channels, channels),
        vssb(rng, channels, state, expand) {}

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    auto& g = ctx.g;
    Id up = g.gelu(lin_up.forward(ctx, x));
    Id multi = g.add(g.add(dw1.forward(ctx, up, H, W), dw3.forward(ctx, up, H, W)),
                     dw5.forward(ctx, up, H, W));
    Id corr = lin_down.forward(ctx, multi);
    return vssb.forward(ctx, g.add(x, corr), H, W);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    lin_up.visit(prefix + ".lin_up", v);
    dw1.visit(prefix + ".dw1", v);
    dw3.visit(prefix + ".dw3", v);
    dw5.visit(prefix + ".dw5", v);
    lin_down.visit(prefix + ".lin_down", v);
    vssb.visit(prefix + ".vssb", v);
  }

  Linear<S> lin_up;
  DWConv2d<S> dw1, dw3, dw5;
  Linear<S> lin_down;
  VSSB<S> vssb;
};

// Channel-aware VSS block: VSSB followed by a pooled per-channel gate.
// Pooling is global over the spatial grid, one gate value per channel.
template <class S>
class CAVSSB {
 public:
  using Id = typename Tape<S>::Id;

  CAVSSB() = default;
  CAVSSB(Rng& rng, long channels, long state, long expand)
      : vssb(rng, channels, state, expand),
        lin(rng, channels, channels),
        norm(channels) {}

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    auto& g = ctx.g;
    Id x1 = vssb.forward(ctx, x, H, W);
    Id xp = norm.forward(ctx, lin.forward(ctx, x1));
    Id gate = g.sigmoid(g.add(g.avgpool_rows(xp), g.maxpool_rows(xp)));
    Id x2 = g.mul_cols(xp, gate);
    return g.add(x1, x2);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    vssb.visit(prefix + ".vssb", v);
    lin.visit(prefix + ".lin", v);
    norm.visit(prefix + ".norm", v);
  }

  VSSB<S> vssb;
  Linear<S> lin;
  LayerNorm<S> norm;
};

}  // namespace stn
