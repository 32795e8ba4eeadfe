#include "ghostv2/attention.hpp"

namespace ghostv2 {

template <typename T>
FullAttentionWeights<T> FullAttentionWeights<T>::identity(std::int64_t H, std::int64_t W, std::int64_t C) {
  const std::int64_t HW = H * W;
  std::vector<T> f(HW * HW * C, T(0));
  for (std::int64_t p = 0; p < HW; ++p) {
    for (std::int64_t c = 0; c < C; ++c) f[(p * HW + p) * C + c] = T(1);
  }
  return {Tensor<T>(Shape(HW, H, W, C), std::move(f))};
}

template <typename T>
Tensor<T> full_fc_attention(const Tensor<T>& z, const FullAttentionWeights<T>& f) {
  return kernels::full_fc_attention(z, f.f);
}

template <typename T>
Tensor<T> dfc_attention_general(const Tensor<T>& z, const DecoupledWeights<T>& w) {
  return kernels::dfc_horizontal(kernels::dfc_vertical(z, w.vertical), w.horizontal);
}

namespace {

template <typename T>
void check_dfc_kernels(const Shape& z, const Shape& kv, const Shape& kh) {
  if (kv[1] != 1 || kv[2] != 1 || kv[3] != z.c() || kh[0] != 1 || kh[2] != 1 || kh[3] != z.c()) {
    throw ShapeError("dfc_attention_conv: kernels " + kv.str() + " and " + kh.str() +
                     " must be (K_H,1,1,C) and (1,K_W,1,C) for feature " + z.str());
  }
  if (kv[0] % 2 == 0 || kh[1] % 2 == 0) {
    throw ParameterError("dfc_attention_conv: kernel extents must be odd, got K_H=" + std::to_string(kv[0]) +
                         ", K_W=" + std::to_string(kh[1]));
  }
}

}  // namespace

template <typename T>
Tensor<T> dfc_attention_conv(const Tensor<T>& z, const Tensor<T>& k_v, const Tensor<T>& k_h) {
  check_dfc_kernels<T>(z.shape(), k_v.shape(), k_h.shape());
  const int KH = static_cast<int>(k_v.shape()[0]);
  const int KW = static_cast<int>(k_h.shape()[1]);
  Tensor<T> mid = kernels::conv2d_depthwise(z, ConvKernel<T>::depthwise(k_v), Stride{}, Padding::same(KH, 1));
  return kernels::conv2d_depthwise(mid, ConvKernel<T>::depthwise(k_h), Stride{}, Padding::same(1, KW));
}

template <typename T>
Var<T> dfc_attention_conv(const Var<T>& z, const Var<T>& k_v, const Var<T>& k_h) {
  check_dfc_kernels<T>(z.shape(), k_v.shape(), k_h.shape());
  const int KH = static_cast<int>(k_v.shape()[0]);
  const int KW = static_cast<int>(k_h.shape()[1]);
  Var<T> mid = ad::conv2d_depthwise(z, k_v, Stride{}, Padding::same(KH, 1));
  return ad::conv2d_depthwise(mid, k_h, Stride{}, Padding::same(1, KW));
}

template <typename T>
DecoupledWeights<T> lift_conv_to_general(const Tensor<T>& k_v, const Tensor<T>& k_h, std::int64_t H,
                                         std::int64_t W) {
  const Shape kv = k_v.shape();
  const Shape kh = k_h.shape();
  const std::int64_t C = kv[3];
  check_dfc_kernels<T>(Shape(1, H, W, C), kv, kh);
  const std::int64_t rv = kv[0] / 2, rh = kh[1] / 2;
  std::vector<T> fv(H * H * W * C, T(0)), fh(W * W * H * C, T(0));
  for (std::int64_t h = 0; h < H; ++h) {
    for (std::int64_t hp = 0; hp < H; ++hp) {
      const std::int64_t tap = hp - h + rv;
      if (tap < 0 || tap >= kv[0]) continue;
      for (std::int64_t w = 0; w < W; ++w) {
        for (std::int64_t c = 0; c < C; ++c) fv[((h * H + hp) * W + w) * C + c] = k_v[tap * C + c];
      }
    }
  }
  for (std::int64_t w = 0; w < W; ++w) {
    for (std::int64_t wp = 0; wp < W; ++wp) {
      const std::int64_t tap = wp - w + rh;
      if (tap < 0 || tap >= kh[1]) continue;
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t c = 0; c < C; ++c) fh[((w * W + wp) * H + h) * C + c] = k_h[tap * C + c];
      }
    }
  }
  return {Tensor<T>(Shape(H, H, W, C), std::move(fv)), Tensor<T>(Shape(W, W, H, C), std::move(fh))};
}

std::string to_string(PoolKind k) { return k == PoolKind::avg ? "avg" : "max"; }
std::string to_string(ResizeKind k) { return k == ResizeKind::bilinear ? "bilinear" : "bicubic"; }
std::string to_string(Scaling s) {
  switch (s) {
    case Scaling::sigmoid: return "sigmoid";
    case Scaling::hard_sigmoid: return "hard_sigmoid";
    case Scaling::clip: return "clip";
  }
  return "?";
}
std::string to_string(ScalingPosition p) {
  return p == ScalingPosition::before_upsample ? "before_upsample" : "after_upsample";
}

PoolKind parse_pool_kind(const std::string& s) {
  if (s == "avg") return PoolKind::avg;
  if (s == "max") return PoolKind::max;
  throw ConfigError("unknown pooling kind '" + s + "' (expected avg or max)");
}
ResizeKind parse_resize_kind(const std::string& s) {
  if (s == "bilinear") return ResizeKind::bilinear;
  if (s == "bicubic") return ResizeKind::bicubic;
  throw ConfigError("unknown resize kind '" + s + "' (expected bilinear or bicubic)");
}
Scaling parse_scaling(const std::string& s) {
  if (s == "sigmoid") return Scaling::sigmoid;
  if (s == "hard_sigmoid") return Scaling::hard_sigmoid;
  if (s == "clip") return Scaling::clip;
  throw ConfigError("unknown scaling '" + s + "' (expected sigmoid, hard_sigmoid or clip)");
}
ScalingPosition parse_scaling_position(const std::string& s) {
  if (s == "before_upsample") return ScalingPosition::before_upsample;
  if (s == "after_upsample") return ScalingPosition::after_upsample;
  throw ConfigError("unknown scaling position '" + s + "' (expected before_upsample or after_upsample)");
}

void DfcOptions::validate() const {
  if (k_h < 1 || k_w < 1 || k_h % 2 == 0 || k_w % 2 == 0) {
    throw ParameterError("DFC kernel extents must be odd and positive, got K_H=" + std::to_string(k_h) +
                         ", K_W=" + std::to_string(k_w));
  }
  if (factor < 1) throw ParameterError("DFC downsample factor must be >= 1, got " + std::to_string(factor));
}

template <typename T>
DfcParams<T> DfcParams<T>::init(std::int64_t c_in, std::int64_t c_out, const DfcOptions& options, Rng& rng,
                                double bn_eps) {
  options.validate();
  DfcParams p;
  p.options = options;
  p.query = he_uniform<T>(Shape(1, 1, c_in, c_out), rng);
  p.query_bn = BatchNormParams<T>::identity(c_out, bn_eps);
  p.vertical = he_uniform<T>(Shape(options.k_h, 1, 1, c_out), rng);
  p.vertical_bn = BatchNormParams<T>::identity(c_out, bn_eps);
  p.horizontal = he_uniform<T>(Shape(1, options.k_w, 1, c_out), rng);
  p.horizontal_bn = BatchNormParams<T>::identity(c_out, bn_eps);
  return p;
}

template <typename T>
void DfcParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(prefix + ".query.weight", query, true);
  query_bn.visit(prefix + ".query.bn", f);
  f(prefix + ".vertical.weight", vertical, true);
  vertical_bn.visit(prefix + ".vertical.bn", f);
  f(prefix + ".horizontal.weight", horizontal, true);
  horizontal_bn.visit(prefix + ".horizontal.bn", f);
}

template <typename T>
Var<T> apply_scaling(const Var<T>& x, Scaling s) {
  switch (s) {
    case Scaling::sigmoid: return ad::sigmoid(x);
    case Scaling::hard_sigmoid: return ad::hard_sigmoid(x);
    case Scaling::clip: return ad::clip01(x);
  }
  throw ParameterError("unknown scaling function");
}

template <typename T>
Var<T> dfc_branch(const Ctx<T>& ctx, const Var<T>& x, const DfcParams<T>& p) {
  const DfcOptions& o = p.options;
  o.validate();
  const Shape xs = x.shape();
  if (xs.c() != p.c_in()) {
    throw ShapeError("dfc_branch: input " + xs.str() + " does not match query kernel " + p.query.shape().str());
  }
  if (xs.h() < o.factor || xs.w() < o.factor) {
    throw ShapeError("dfc_branch: input " + xs.str() + " is smaller than the downsample factor " +
                     std::to_string(o.factor));
  }
  Var<T> z = x;
  if (o.factor > 1) z = ad::pool2d(z, o.pool, Window{o.factor, o.factor}, Stride{o.factor, o.factor});
  z = apply(ctx, p.query_bn, ad::conv2d_pointwise(z, ctx.bind(p.query), static_cast<const Var<T>*>(nullptr)));
  z = apply(ctx, p.vertical_bn, ad::conv2d_depthwise(z, ctx.bind(p.vertical), Stride{}, Padding::same(o.k_h, 1)));
  z = apply(ctx, p.horizontal_bn,
            ad::conv2d_depthwise(z, ctx.bind(p.horizontal), Stride{}, Padding::same(1, o.k_w)));
  const bool resample = z.shape().h() != xs.h() || z.shape().w() != xs.w();
  if (o.position == ScalingPosition::before_upsample) {
    z = apply_scaling(z, o.scaling);
    if (resample) {
      z = ad::resize(z, o.upsample, xs.h(), xs.w());
      // Bicubic taps can overshoot; keep the gate inside [0, 1].
      if (o.upsample == ResizeKind::bicubic) z = ad::clip01(z);
    }
  } else {
    if (resample) z = ad::resize(z, o.upsample, xs.h(), xs.w());
    z = apply_scaling(z, o.scaling);
  }
  return z;
}

template <typename T>
Tensor<T> dfc_branch(const Tensor<T>& x, const DfcParams<T>& p, Mode mode) {
  return evaluate<T>(mode, [&](const Ctx<T>& ctx) { return dfc_branch(ctx, ctx.tape().leaf(x), p); });
}

#define GHOSTV2_INSTANTIATE_ATTENTION(T)                                                                  \
  template struct FullAttentionWeights<T>;                                                                \
  template struct DfcParams<T>;                                                                           \
  template Tensor<T> full_fc_attention(const Tensor<T>&, const FullAttentionWeights<T>&);                 \
  template Tensor<T> dfc_attention_general(const Tensor<T>&, const DecoupledWeights<T>&);                 \
  template Tensor<T> dfc_attention_conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Var<T> dfc_attention_conv(const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template DecoupledWeights<T> lift_conv_to_general(const Tensor<T>&, const Tensor<T>&, std::int64_t,     \
                                                    std::int64_t);                                        \
  template Var<T> apply_scaling(const Var<T>&, Scaling);                                                  \
  template Var<T> dfc_branch(const Ctx<T>&, const Var<T>&, const DfcParams<T>&);                          \
  template Tensor<T> dfc_branch(const Tensor<T>&, const DfcParams<T>&, Mode);

GHOSTV2_INSTANTIATE_ATTENTION(float)
GHOSTV2_INSTANTIATE_ATTENTION(double)

}  // namespace ghostv2
