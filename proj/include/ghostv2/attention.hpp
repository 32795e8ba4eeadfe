#pragma once

#include <string>

#include "ghostv2/layers.hpp"

namespace ghostv2 {

// Dense token-mixing weights, stored (H*W, H, W, C): entry [h*W+w, h', w', c]
// weighs z[h', w', c] into a[h, w, c].
template <typename T>
struct FullAttentionWeights {
  Tensor<T> f;

  static FullAttentionWeights identity(std::int64_t H, std::int64_t W, std::int64_t C);
};

// Two-stage weights: vertical [h, h', w, c] then horizontal [w, w', h, c].
template <typename T>
struct DecoupledWeights {
  Tensor<T> vertical;
  Tensor<T> horizontal;
};

template <typename T>
Tensor<T> full_fc_attention(const Tensor<T>& z, const FullAttentionWeights<T>& f);
template <typename T>
Tensor<T> dfc_attention_general(const Tensor<T>& z, const DecoupledWeights<T>& w);
// k_v: (K_H, 1, 1, C) depthwise, k_h: (1, K_W, 1, C) depthwise, both odd.
template <typename T>
Tensor<T> dfc_attention_conv(const Tensor<T>& z, const Tensor<T>& k_v, const Tensor<T>& k_h);
template <typename T>
Var<T> dfc_attention_conv(const Var<T>& z, const Var<T>& k_v, const Var<T>& k_h);
// Banded decoupled weights equivalent to the two depthwise convolutions on an H x W map.
template <typename T>
DecoupledWeights<T> lift_conv_to_general(const Tensor<T>& k_v, const Tensor<T>& k_h, std::int64_t H, std::int64_t W);

enum class Scaling { sigmoid, hard_sigmoid, clip };
enum class ScalingPosition { before_upsample, after_upsample };

std::string to_string(PoolKind k);
std::string to_string(ResizeKind k);
std::string to_string(Scaling s);
std::string to_string(ScalingPosition p);
PoolKind parse_pool_kind(const std::string& s);
ResizeKind parse_resize_kind(const std::string& s);
Scaling parse_scaling(const std::string& s);
ScalingPosition parse_scaling_position(const std::string& s);

struct DfcOptions {
  int k_h = 5;
  int k_w = 5;
  int factor = 2;
  PoolKind pool = PoolKind::max;
  ResizeKind upsample = ResizeKind::bilinear;
  Scaling scaling = Scaling::sigmoid;
  ScalingPosition position = ScalingPosition::before_upsample;

  void validate() const;
};

template <typename T>
struct DfcParams {
  DfcOptions options;
  Tensor<T> query;  // (1, 1, C_in, C_out)
  BatchNormParams<T> query_bn;
  Tensor<T> vertical;  // (K_H, 1, 1, C_out)
  BatchNormParams<T> vertical_bn;
  Tensor<T> horizontal;  // (1, K_W, 1, C_out)
  BatchNormParams<T> horizontal_bn;

  static DfcParams init(std::int64_t c_in, std::int64_t c_out, const DfcOptions& options, Rng& rng,
                        double bn_eps = 1e-5);

  std::int64_t c_in() const { return query.shape()[2]; }
  std::int64_t c_out() const { return query.shape()[3]; }

  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

// Attention map with the spatial extent of x and c_out channels:
// pool -> 1x1 query -> BN -> K_Hx1 dw -> BN -> 1xK_W dw -> BN -> scaling/resize.
template <typename T>
Var<T> dfc_branch(const Ctx<T>& ctx, const Var<T>& x, const DfcParams<T>& p);
template <typename T>
Tensor<T> dfc_branch(const Tensor<T>& x, const DfcParams<T>& p, Mode mode = Mode::eval);

template <typename T>
Var<T> apply_scaling(const Var<T>& x, Scaling s);

}  // namespace ghostv2
