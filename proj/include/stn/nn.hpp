#pragma once

// Parameter containers and the basic learnable layers. Modules bind their
// parameters into a Tape through Ctx::use, which memoizes so a parameter
// appears as a single leaf per forward pass regardless of how often it is
// used. Construction order fixes the parameter registration order, which in
// turn fixes initialization and checkpoint layout.

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stn/graph.hpp"
#include "stn/rng.hpp"
#include "stn/tensor.hpp"

namespace stn {

template <class S>
struct Param {
  Tensor<S> value;
  Tensor<S> grad;  // persistent accumulator, sized on first use by the trainer

  Param() = default;
  explicit Param(Tensor<S> v) : value(std::move(v)) {}
  bool empty() const { return value.empty(); }
  long numel() const { return value.empty() ? 0 : value.numel(); }
};

template <class S>
using ParamVisitor = std::function<void(const std::string&, Param<S>&)>;

// Per-forward context: the tape plus the parameter->leaf binding table.
template <class S>
struct Ctx {
  using Id = typename Tape<S>::Id;

  explicit Ctx(Tape<S>& tape, bool training = false)
      : g(tape), train(training) {}

  Tape<S>& g;
  bool train;
  std::vector<std::pair<Param<S>*, Id>> bound;

  Id use(Param<S>& p) {
    auto it = map_.find(&p);
    if (it != map_.end()) return it->second;
    Id id = g.leaf(p.value, /*needs_grad=*/true);
    map_.emplace(&p, id);
    bound.emplace_back(&p, id);
    return id;
  }

 private:
  std::unordered_map<const Param<S>*, Id> map_;
};

// After backward: move tape gradients into the persistent accumulators.
template <class S>
inline void collect_grads(Ctx<S>& ctx) {
  for (auto& [p, id] : ctx.bound) {
    if (!ctx.g.has_grad(id)) continue;
    if (p->grad.empty()) p->grad = Tensor<S>(p->value.shape());
    p->grad.add_(ctx.g.grad(id));
  }
}

// ---- layers ---------------------------------------------------------------

template <class S>
class Linear {
 public:
  using Id = typename Tape<S>::Id;

  Linear() = default;
  Linear(Rng& rng, long in, long out, bool bias = true)
      : w(Tensor<S>({in, out})), has_bias_(bias) {
    rng.fill_trunc_normal(w.value, 0.02);
    if (bias) b = Param<S>(Tensor<S>(Shape{out}));
  }

  Id forward(Ctx<S>& ctx, Id x) {
    Id y = ctx.g.matmul(x, ctx.use(w));
    if (has_bias_) y = ctx.g.add_bias(y, ctx.use(b));
    return y;
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".w", w);
    if (has_bias_) v(prefix + ".b", b);
  }

  Param<S> w;
  Param<S> b;

 private:
  bool has_bias_ = false;
};

template <class S>
class LayerNorm {
 public:
  using Id = typename Tape<S>::Id;

  LayerNorm() = default;
  explicit LayerNorm(long dim)
      : gamma(Tensor<S>::full({dim}, S(1))), beta(Tensor<S>(Shape{dim})) {}

  Id forward(Ctx<S>& ctx, Id x) {
    return ctx.g.layer_norm(x, ctx.use(gamma), ctx.use(beta));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".gamma", gamma);
    v(prefix + ".beta", beta);
  }

  Param<S> gamma, beta;
};

template <class S>
class DWConv2d {
 public:
  using Id = typename Tape<S>::Id;

  DWConv2d() = default;
  DWConv2d(Rng& rng, long k, long channels, bool bias)
      : w(Tensor<S>({k * k, channels})), has_bias_(bias) {
    rng.fill_trunc_normal(w.value, 0.02);
    if (bias) b = Param<S>(Tensor<S>(Shape{channels}));
  }

  Id forward(Ctx<S>& ctx, Id x, long H, long W) {
    return ctx.g.dwconv2d(x, ctx.use(w), has_bias_ ? ctx.use(b) : Tape<S>::kNone,
                          H, W);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& v) {
    v(prefix + ".w", w);
    if (has_bias_) v(prefix + ".b", b);
  }

  Param<S> w;
  Param<S> b;

 private:
  bool has_bias_ = false;
};

}  // namespace stn
