#pragma once

// The full network: dual four-stage encoders, the spatial-temporal
// interaction module, and the prediction decoder, plus configuration and
// checkpoint serialization.

#include <optional>
#include <variant>

#include "json.hpp"
#include "stn/fusion.hpp"

namespace stn {

struct ModelConfig {
  // architecture
  long base_c = 32;              // stage-1 width; stages run [C, 2C, 4C, 8C]
  long frames = 4;               // input frames per clip (k); k-1 differences
  long image_size = 256;         // square input, divisible by 32
  long state = 16;               // SSM state dimension N
  long expand = 2;               // VSSB expansion factor
  long blocks_per_stage = 2;
  std::array<long, 4> mem_items{80, 60, 40, 20};
  double k_percent = 60.0;
  bool tanh_output = false;

  // ablation switches
  bool ms_vssb = true;       // spatial encoder blocks: MS-VSSB vs plain VSSB
  bool ca_vssb = true;       // temporal encoder blocks: CA-VSSB vs plain VSSB
  bool stfb = true;          // fusion block vs concatenate+linear
  bool multi_level = true;   // all four levels vs bottleneck only
  std::array<bool, 4> memory_levels{true, true, true, true};

  // loss & scoring
  double lambda1 = 0.1;   // compactness weight
  double lambda2 = 0.01;  // sparsity weight
  bool loss_compactness = true;
  bool loss_sparsity = true;
  double tau = 0.8;

  // training
  double lr = 4e-4;
  long batch = 8;
  long steps = 1500;
  long checkpoint_every = 500;
  uint64_t seed = 0;

  static ModelConfig full() { return ModelConfig{}; }

  static ModelConfig desk() {
    ModelConfig c;
    c.base_c = 16;
    c.image_size = 64;
    return c;
  }

  long levels_width(int i) const { return base_c << i; }
  long level_stride(int i) const { return 4L << i; }
  bool any_memory() const {
    for (int i = 0; i < 4; ++i)
      if (memory_levels[i] && (multi_level || i == 3)) return true;
    return false;
  }

  void validate() const {
    if (image_size <= 0 || image_size % 32)
      fail_config("image_size must be a positive multiple of 32, got " +
                  std::to_string(image_size));
    if (frames < 2) fail_config("frames must be >= 2 so at least one RGB difference exists");
    if (base_c < 4 || base_c % 4)
      fail_config("base_c must be a positive multiple of 4, got " + std::to_string(base_c));
    if (expand < 1) fail_config("expand must be >= 1");
    if (state < 1) fail_config("state must be >= 1");
    if (blocks_per_stage < 1) fail_config("blocks_per_stage must be >= 1");
    if (k_percent <= 0 || k_percent > 100) fail_config("k_percent must be in (0, 100]");
    if (tau < 0 || tau > 1) fail_config("tau must be in [0, 1]");
    for (long n : mem_items)
      if (n < 2) fail_config("memory banks need at least 2 items");
  }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

inline nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["base_c"] = base_c;
  j["frames"] = frames;
  j["image_size"] = image_size;
  j["state"] = state;
  j["expand"] = expand;
  j["blocks_per_stage"] = blocks_per_stage;
  j["mem_items"] = mem_items;
  j["k_percent"] = k_percent;
  j["tanh_output"] = tanh_output;
  j["ms_vssb"] = ms_vssb;
  j["ca_vssb"] = ca_vssb;
  j["stfb"] = stfb;
  j["multi_level"] = multi_level;
  j["memory_levels"] = memory_levels;
  j["lambda1"] = lambda1;
  j["lambda2"] = lambda2;
  j["loss_compactness"] = loss_compactness;
  j["loss_sparsity"] = loss_sparsity;
  j["tau"] = tau;
  j["lr"] = lr;
  j["batch"] = batch;
  j["steps"] = steps;
  j["checkpoint_every"] = checkpoint_every;
  j["seed"] = seed;
  return j;
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).template get<std::decay_t<decltype(field)>>();
  };
  get("base_c", c.base_c);
  get("frames", c.frames);
  get("image_size", c.image_size);
  get("state", c.state);
  get("expand", c.expand);
  get("blocks_per_stage", c.blocks_per_stage);
  get("mem_items", c.mem_items);
  get("k_percent", c.k_percent);
  get("tanh_output", c.tanh_output);
  get("ms_vssb", c.ms_vssb);
  get("ca_vssb", c.ca_vssb);
  get("stfb", c.stfb);
  get("multi_level", c.multi_level);
  get("memory_levels", c.memory_levels);
  get("lambda1", c.lambda1);
  get("lambda2", c.lambda2);
  get("loss_compactness", c.loss_compactness);
  get("loss_sparsity", c.loss_sparsity);
  get("tau", c.tau);
  get("lr", c.lr);
  get("batch", c.batch);
  get("steps", c.steps);
  get("checkpoint_every", c.checkpoint_every);
  get("seed", c.seed);
  c.validate();
  return c;
}

// ---- encoder ----------------------------------------------------------------

enum class VSSKind { Plain, MultiScale, ChannelAware };

template <class S>
class EncoderBlock {
 public:
  using Id = typename Tape<S>::Id;

  EncoderBlock() = default;
  EncoderBlock(Rng& rng, VSSKind kind, long channels, long state, long expand) {
    switch (kind) {
      case VSSKind::Plain: impl_ = VSSB<S>(rng, channels, state, expand); break;
      case VSSKind::MultiScale: impl_ = MSVSSB<S>(rng, channels, state, expand); break;
      case VSSKind::ChannelAware: impl_ = CAVSSB<S>(rng, channels, state, expand); break;
    }
  }

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    return std::visit([&](auto& b) { return b.forward(ctx, x, H, W); }, impl_);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    std::visit([&](auto& b) { b.visit(prefix, v); }, impl_);
  }

 private:
  std::variant<VSSB<S>, MSVSSB<S>, CAVSSB<S>> impl_;
};

// Four stages: patch embed + blocks, then (merge + blocks) x3. Emits every
// stage output so the fusion module sees all levels.
template <class S>
class Encoder {
 public:
  using Id = typename Tape<S>::Id;

  Encoder() = default;
  Encoder(Rng& rng, VSSKind kind, long in_channels, const ModelConfig& cfg)
      : embed(rng, in_channels, cfg.base_c) {
    for (int st = 0; st < 4; ++st) {
      long c = cfg.levels_width(st);
      if (st > 0) merge_[st - 1] = PatchMerge<S>(rng, cfg.levels_width(st - 1));
      for (long b = 0; b < cfg.blocks_per_stage; ++b)
        blocks_[st].push_back(EncoderBlock<S>(rng, kind, c, cfg.state, cfg.expand));
    }
  }

  std::array<Feature<S>, 4> forward(Ctx<S>& ctx, Id x, long H, long W) {
    std::array<Feature<S>, 4> levels;
    Feature<S> cur{embed.forward(ctx, x, H, W), H / 4, W / 4};
    for (int st = 0; st < 4; ++st) {
      if (st > 0) {
        cur.id = merge_[st - 1]->forward(ctx, cur.id, cur.h, cur.w);
        cur.h /= 2;
        cur.w /= 2;
      }
      for (auto& b : blocks_[st]) cur.id = b.forward(ctx, cur.id, cur.h, cur.w);
      levels[st] = cur;
    }
    return levels;
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    embed.visit(prefix + ".embed", v);
    for (int st = 0; st < 4; ++st) {
      std::string sp = prefix + ".s" + std::to_string(st + 1);
      if (st > 0) merge_[st - 1]->visit(sp + ".merge", v);
      for (size_t b = 0; b < blocks_[st].size(); ++b)
        blocks_[st][b].visit(sp + ".b" + std::to_string(b), v);
    }
  }

  PatchEmbed<S> embed;

 private:
  std::array<std::optional<PatchMerge<S>>, 3> merge_;
  std::array<std::vector<EncoderBlock<S>>, 4> blocks_;
};

// ---- decoder ----------------------------------------------------------------

// Four stages at widths [8C, 4C, 2C, C]; VSSB blocks per stage, patch expand
// between stages with element-wise skip adds from the fused levels, and the
// final projection back to an H x W x 3 frame.
template <class S>
class Decoder {
 public:
  using Id = typename Tape<S>::Id;

  Decoder() = default;
  Decoder(Rng& rng, const ModelConfig& cfg) {
    for (int st = 0; st < 4; ++st) {
      long c = cfg.levels_width(3 - st);
      for (long b = 0; b < cfg.blocks_per_stage; ++b)
        blocks_[st].push_back(VSSB<S>(rng, c, cfg.state, cfg.expand));
      if (st < 3) expand_[st] = PatchExpand<S>(rng, c, 2);
    }
    proj = FinalProjection<S>(rng, cfg.base_c, cfg.tanh_output);
  }

  // fused[0..3] are the level features at strides [4, 8, 16, 32].
  Feature<S> forward(Ctx<S>& ctx, const std::array<Feature<S>, 4>& fused) {
    auto& g = ctx.g;
    Feature<S> cur = fused[3];
    for (int st = 0; st < 4; ++st) {
      for (auto& b : blocks_[st]) cur.id = b.forward(ctx, cur.id, cur.h, cur.w);
      if (st < 3) {
        cur.id = expand_[st]->forward(ctx, cur.id, cur.h, cur.w);
        cur.h *= 2;
        cur.w *= 2;
        const Feature<S>& skip = fused[2 - st];
        check_same_shape("decoder skip", g.val(cur.id), g.val(skip.id));
        cur.id = g.add(cur.id, skip.id);
      }
    }
    Id pred = proj.forward(ctx, cur.id, cur.h, cur.w);
    return {pred, cur.h * 4, cur.w * 4};
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    for (int st = 0; st < 4; ++st) {
      std::string sp = prefix + ".s" + std::to_string(st + 1);
      for (size_t b = 0; b < blocks_[st].size(); ++b)
        blocks_[st][b].visit(sp + ".b" + std::to_string(b), v);
      if (st < 3) expand_[st]->visit(sp + ".expand", v);
    }
    proj.visit(prefix + ".proj", v);
  }

  FinalProjection<S> proj;

 private:
  std::array<std::vector<VSSB<S>>, 4> blocks_;
  std::array<std::optional<PatchExpand<S>>, 3> expand_;
};

// ---- full model ---------------------------------------------------------------

template <class S>
struct ForwardOut {
  typename Tape<S>::Id prediction = Tape<S>::kNone;  // (H*W) x 3
  StimResult<S> stim;
};

template <class S>
class STNMamba {
 public:
  using Id = typename Tape<S>::Id;

  explicit STNMamba(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    spatial = Encoder<S>(rng, cfg_.ms_vssb ? VSSKind::MultiScale : VSSKind::Plain,
                         3 * cfg_.frames, cfg_);
    temporal = Encoder<S>(rng, cfg_.ca_vssb ? VSSKind::ChannelAware : VSSKind::Plain,
                          3 * (cfg_.frames - 1), cfg_);
    StimFlags flags;
    flags.stfb = cfg_.stfb;
    flags.multi_level = cfg_.multi_level;
    flags.memory = cfg_.memory_levels;
    stim = STIM<S>(rng, {cfg_.levels_width(0), cfg_.levels_width(1),
                         cfg_.levels_width(2), cfg_.levels_width(3)},
                   cfg_.mem_items, cfg_.state, cfg_.k_percent, flags);
    decoder = Decoder<S>(rng, cfg_);
  }

  const ModelConfig& config() const { return cfg_; }

  // frames_cat: (H*W) x 3k stacked context frames, diffs_cat: (H*W) x 3(k-1)
  // stacked RGB differences, both in [-1, 1].
  ForwardOut<S> forward(Ctx<S>& ctx, Id frames_cat, Id diffs_cat) {
    if (!ctx.train && step_in_progress_)
      fail_contract("evaluation during an optimizer step; snapshot the model first");
    auto& g = ctx.g;
    long H = cfg_.image_size, W = cfg_.image_size;
    if (g.val(frames_cat).rows() != H * W)
      fail_shape("stnmamba_forward", "pixels", H * W, g.val(frames_cat).rows());
    if (g.val(frames_cat).cols() != 3 * cfg_.frames)
      fail_shape("stnmamba_forward", "frame_channels", 3 * cfg_.frames,
                 g.val(frames_cat).cols());
    if (g.val(diffs_cat).cols() != 3 * (cfg_.frames - 1))
      fail_shape("stnmamba_forward", "diff_channels", 3 * (cfg_.frames - 1),
                 g.val(diffs_cat).cols());
    auto s_levels = spatial.forward(ctx, frames_cat, H, W);
    auto t_levels = temporal.forward(ctx, diffs_cat, H, W);
    ForwardOut<S> out;
    out.stim = stim.forward(ctx, s_levels, t_levels);
    out.prediction = decoder.forward(ctx, out.stim.fused).id;
    return out;
  }

  void visit(const ParamVisitor<S>& v) {
    spatial.visit("enc_s", v);
    temporal.visit("enc_t", v);
    stim.visit("stim", v);
    decoder.visit("dec", v);
  }

  std::vector<std::pair<std::string, Param<S>*>> named_params() {
    std::vector<std::pair<std::string, Param<S>*>> out;
    visit([&](const std::string& n, Param<S>& p) { out.emplace_back(n, &p); });
    return out;
  }

  long count_parameters() {
    long n = 0;
    visit([&](const std::string&, Param<S>& p) { n += p.numel(); });
    return n;
  }

  void begin_step() { step_in_progress_ = true; }
  void end_step() { step_in_progress_ = false; }

  Encoder<S> spatial, temporal;
  STIM<S> stim;
  Decoder<S> decoder;

 private:
  ModelConfig cfg_;
  bool step_in_progress_ = false;
};

}  // namespace stn
