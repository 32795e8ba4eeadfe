#include "ghostv2/ghost.hpp"

#include "ghostv2/cost.hpp"

namespace ghostv2 {

namespace {

template <typename T>
const Var<T>* no_bias() {
  return nullptr;
}

}  // namespace

template <typename T>
GhostModuleParams<T> GhostModuleParams<T>::init(std::int64_t c_in, std::int64_t c_out, bool relu, Rng& rng,
                                                double bn_eps) {
  if (c_out < 2 || c_out % 2 != 0) {
    throw ConfigError("ghost module output channels must be even and >= 2, got " + std::to_string(c_out));
  }
  const std::int64_t c = c_out / 2;
  GhostModuleParams p;
  p.primary = he_uniform<T>(Shape(1, 1, c_in, c), rng);
  p.primary_bn = BatchNormParams<T>::identity(c, bn_eps);
  p.cheap = he_uniform<T>(Shape(3, 3, 1, c), rng);
  p.cheap_bn = BatchNormParams<T>::identity(c, bn_eps);
  p.relu = relu;
  return p;
}

template <typename T>
void GhostModuleParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".primary.weight", primary, true);
  if (primary_bn) primary_bn->visit(prefix + ".primary.bn", f);
  f(prefix + ".cheap.weight", cheap, true);
  if (cheap_bn) cheap_bn->visit(prefix + ".cheap.bn", f);
}

template <typename T>
Var<T> ghost_module(const Ctx<T>& ctx, const Var<T>& x, const GhostModuleParams<T>& p) {
  if (x.shape().c() != p.c_in()) {
    throw ShapeError("ghost_module: input " + x.shape().str() + " does not match primary kernel " +
                     p.primary.shape().str());
  }
  Var<T> y1 = ad::conv2d_pointwise(x, ctx.bind(p.primary), no_bias<T>());
  if (p.primary_bn) y1 = apply(ctx, *p.primary_bn, y1);
  if (p.relu) y1 = ad::relu(y1);
  Var<T> y2 = ad::conv2d_depthwise(y1, ctx.bind(p.cheap), Stride{}, Padding::same(3, 3));
  if (p.cheap_bn) y2 = apply(ctx, *p.cheap_bn, y2);
  if (p.relu) y2 = ad::relu(y2);
  return ad::concat_channels(y1, y2);
}

template <typename T>
Tensor<T> ghost_module(const Tensor<T>& x, const GhostModuleParams<T>& p, Mode mode) {
  return evaluate<T>(mode, [&](const Ctx<T>& ctx) { return ghost_module(ctx, ctx.tape().leaf(x), p); });
}

template <typename T>
Var<T> ghost_module_attn(const Ctx<T>& ctx, const Var<T>& x, const GhostModuleParams<T>& p,
                         const DfcParams<T>& dfc) {
  Var<T> gate = [&] {
    cost::NameScope scope("attn");
    return dfc_branch(ctx, x, dfc);
  }();
  Var<T> value = ghost_module(ctx, x, p);
  if (!(gate.shape() == value.shape())) {
    throw ShapeError("ghost_module_attn: attention map " + gate.shape().str() + " does not match ghost output " +
                     value.shape().str());
  }
  return ad::mul(value, gate);
}

template <typename T>
Tensor<T> ghost_module_attn(const Tensor<T>& x, const GhostModuleParams<T>& p, const DfcParams<T>& dfc, Mode mode) {
  return evaluate<T>(mode, [&](const Ctx<T>& ctx) { return ghost_module_attn(ctx, ctx.tape().leaf(x), p, dfc); });
}

template <typename T>
SqueezeExciteParams<T> SqueezeExciteParams<T>::init(std::int64_t channels, double ratio, Rng& rng) {
  const std::int64_t r = make_divisible(static_cast<double>(channels) * ratio);
  SqueezeExciteParams p;
  p.reduce = he_uniform<T>(Shape(1, 1, channels, r), rng);
  p.reduce_bias = Tensor<T>::zeros(Shape(1, 1, 1, r));
  p.expand = he_uniform<T>(Shape(1, 1, r, channels), rng);
  p.expand_bias = Tensor<T>::zeros(Shape(1, 1, 1, channels));
  return p;
}

template <typename T>
void SqueezeExciteParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".reduce.weight", reduce, true);
  f(prefix + ".reduce.bias", reduce_bias, true);
  f(prefix + ".expand.weight", expand, true);
  f(prefix + ".expand.bias", expand_bias, true);
}

template <typename T>
Var<T> squeeze_excite(const Ctx<T>& ctx, const Var<T>& x, const SqueezeExciteParams<T>& p) {
  Var<T> s = ad::global_avg_pool(x);
  Var<T> rb = ctx.bind(p.reduce_bias);
  Var<T> eb = ctx.bind(p.expand_bias);
  s = ad::relu(ad::conv2d_pointwise(s, ctx.bind(p.reduce), &rb));
  s = ad::hard_sigmoid(ad::conv2d_pointwise(s, ctx.bind(p.expand), &eb));
  return ad::mul_channels(x, s);
}

std::string to_string(Placement p) {
  switch (p) {
    case Placement::none: return "none";
    case Placement::expanded: return "expanded";
    case Placement::output: return "output";
    case Placement::both: return "both";
  }
  return "?";
}

Placement parse_placement(const std::string& s) {
  if (s == "none") return Placement::none;
  if (s == "expanded") return Placement::expanded;
  if (s == "output") return Placement::output;
  if (s == "both") return Placement::both;
  throw ConfigError("unknown attention placement '" + s + "' (expected none, expanded, output or both)");
}

void BottleneckConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("bottleneck: " + m); };
  if (stride != 1 && stride != 2) fail("stride must be 1 or 2, got " + std::to_string(stride));
  if (c_in < 1) fail("c_in must be positive");
  if (c_expand < c_in) {
    fail("c_expand (" + std::to_string(c_expand) + ") must be >= c_in (" + std::to_string(c_in) + ")");
  }
  if (c_expand % 2 != 0 || c_out % 2 != 0 || c_out < 2) {
    fail("c_expand and c_out must be even, got " + std::to_string(c_expand) + " and " + std::to_string(c_out));
  }
  if (dw_kernel < 1 || dw_kernel % 2 == 0) fail("dw_kernel must be odd, got " + std::to_string(dw_kernel));
  if (se_ratio < 0.0 || se_ratio > 1.0) fail("se_ratio must lie in [0, 1]");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
  if (placement != Placement::none) {
    try {
      dfc.validate();
    } catch (const ParameterError& e) {
      fail(e.what());
    }
  }
}

template <typename T>
BottleneckParams<T> BottleneckParams<T>::init(const BottleneckConfig& cfg, Rng& rng) {
  cfg.validate();
  BottleneckParams p;
  p.config = cfg;
  p.ghost1 = GhostModuleParams<T>::init(cfg.c_in, cfg.c_expand, true, rng, cfg.bn_eps);
  if (gates_expanded(cfg.placement)) p.attn1 = DfcParams<T>::init(cfg.c_in, cfg.c_expand, cfg.dfc, rng, cfg.bn_eps);
  if (cfg.stride == 2) {
    p.depthwise = he_uniform<T>(Shape(cfg.dw_kernel, cfg.dw_kernel, 1, cfg.c_expand), rng);
    p.depthwise_bn = BatchNormParams<T>::identity(cfg.c_expand, cfg.bn_eps);
  }
  if (cfg.se_ratio > 0.0) p.se = SqueezeExciteParams<T>::init(cfg.c_expand, cfg.se_ratio, rng);
  p.ghost2 = GhostModuleParams<T>::init(cfg.c_expand, cfg.c_out, false, rng, cfg.bn_eps);
  if (gates_output(cfg.placement)) p.attn2 = DfcParams<T>::init(cfg.c_expand, cfg.c_out, cfg.dfc, rng, cfg.bn_eps);
  if (!cfg.identity_shortcut()) {
    ShortcutParams<T> s;
    s.depthwise = he_uniform<T>(Shape(cfg.dw_kernel, cfg.dw_kernel, 1, cfg.c_in), rng);
    s.depthwise_bn = BatchNormParams<T>::identity(cfg.c_in, cfg.bn_eps);
    s.pointwise = he_uniform<T>(Shape(1, 1, cfg.c_in, cfg.c_out), rng);
    s.pointwise_bn = BatchNormParams<T>::identity(cfg.c_out, cfg.bn_eps);
    p.shortcut = std::move(s);
  }
  return p;
}

template <typename T>
void BottleneckParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  ghost1.visit(prefix + ".ghost1", f);
  if (attn1) attn1->visit(prefix + ".attn1", f);
  if (depthwise) {
    f(prefix + ".dw.weight", *depthwise, true);
    depthwise_bn->visit(prefix + ".dw.bn", f);
  }
  if (se) se->visit(prefix + ".se", f);
  ghost2.visit(prefix + ".ghost2", f);
  if (attn2) attn2->visit(prefix + ".attn2", f);
  if (shortcut) {
    f(prefix + ".shortcut.dw.weight", shortcut->depthwise, true);
    shortcut->depthwise_bn.visit(prefix + ".shortcut.dw.bn", f);
    f(prefix + ".shortcut.pw.weight", shortcut->pointwise, true);
    shortcut->pointwise_bn.visit(prefix + ".shortcut.pw.bn", f);
  }
}

template <typename T>
Var<T> ghostv2_bottleneck(const Ctx<T>& ctx, const Var<T>& x, const BottleneckParams<T>& p) {
  const BottleneckConfig& cfg = p.config;
  if (x.shape().c() != cfg.c_in) {
    throw ShapeError("bottleneck: input " + x.shape().str() + " does not have c_in=" + std::to_string(cfg.c_in) +
                     " channels");
  }
  const Stride s2{cfg.stride, cfg.stride};
  const Padding pad = Padding::same(cfg.dw_kernel, cfg.dw_kernel);

  Var<T> y = [&] {
    cost::NameScope scope("ghost1");
    return p.attn1 ? ghost_module_attn(ctx, x, p.ghost1, *p.attn1) : ghost_module(ctx, x, p.ghost1);
  }();
  if (p.depthwise) {
    cost::NameScope scope("dw");
    y = apply(ctx, *p.depthwise_bn, ad::conv2d_depthwise(y, ctx.bind(*p.depthwise), s2, pad));
  }
  if (p.se) {
    cost::NameScope scope("se");
    y = squeeze_excite(ctx, y, *p.se);
  }
  {
    cost::NameScope scope("ghost2");
    y = p.attn2 ? ghost_module_attn(ctx, y, p.ghost2, *p.attn2) : ghost_module(ctx, y, p.ghost2);
  }
  Var<T> residual = x;
  if (p.shortcut) {
    cost::NameScope scope("shortcut");
    const ShortcutParams<T>& sc = *p.shortcut;
    residual = apply(ctx, sc.depthwise_bn, ad::conv2d_depthwise(x, ctx.bind(sc.depthwise), s2, pad));
    residual = apply(ctx, sc.pointwise_bn, ad::conv2d_pointwise(residual, ctx.bind(sc.pointwise), no_bias<T>()));
  }
  return ad::add(y, residual);
}

template <typename T>
Tensor<T> ghostv2_bottleneck(const Tensor<T>& x, const BottleneckParams<T>& p, Mode mode) {
  return evaluate<T>(mode, [&](const Ctx<T>& ctx) { return ghostv2_bottleneck(ctx, ctx.tape().leaf(x), p); });
}

#define GHOSTV2_INSTANTIATE_GHOST(T)                                                                          \
  template struct GhostModuleParams<T>;                                                                       \
  template struct SqueezeExciteParams<T>;                                                                     \
  template struct BottleneckParams<T>;                                                                        \
  template Var<T> ghost_module(const Ctx<T>&, const Var<T>&, const GhostModuleParams<T>&);                    \
  template Tensor<T> ghost_module(const Tensor<T>&, const GhostModuleParams<T>&, Mode);                        \
  template Var<T> ghost_module_attn(const Ctx<T>&, const Var<T>&, const GhostModuleParams<T>&,                \
                                    const DfcParams<T>&);                                                     \
  template Tensor<T> ghost_module_attn(const Tensor<T>&, const GhostModuleParams<T>&, const DfcParams<T>&,    \
                                       Mode);                                                                 \
  template Var<T> squeeze_excite(const Ctx<T>&, const Var<T>&, const SqueezeExciteParams<T>&);                \
  template Var<T> ghostv2_bottleneck(const Ctx<T>&, const Var<T>&, const BottleneckParams<T>&);               \
  template Tensor<T> ghostv2_bottleneck(const Tensor<T>&, const BottleneckParams<T>&, Mode);

GHOSTV2_INSTANTIATE_GHOST(float)
GHOSTV2_INSTANTIATE_GHOST(double)

}  // namespace ghostv2
