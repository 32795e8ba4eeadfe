#pragma once

#include <optional>
#include <string>

#include "ghostv2/attention.hpp"

namespace ghostv2 {

// y' = BN(1x1 conv(x)), y'' = BN(3x3 dw(y')), out = concat(y', y''), with an
// optional ReLU after each normalisation.
template <typename T>
struct GhostModuleParams {
  Tensor<T> primary;  // (1, 1, C_in, C')
  std::optional<BatchNormParams<T>> primary_bn;
  Tensor<T> cheap;  // (3, 3, 1, C')
  std::optional<BatchNormParams<T>> cheap_bn;
  bool relu = true;

  static GhostModuleParams init(std::int64_t c_in, std::int64_t c_out, bool relu, Rng& rng, double bn_eps = 1e-5);

  std::int64_t c_in() const { return primary.shape()[2]; }
  std::int64_t intrinsic() const { return primary.shape()[3]; }
  std::int64_t c_out() const { return 2 * intrinsic(); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
Var<T> ghost_module(const Ctx<T>& ctx, const Var<T>& x, const GhostModuleParams<T>& p);
template <typename T>
Tensor<T> ghost_module(const Tensor<T>& x, const GhostModuleParams<T>& p, Mode mode = Mode::eval);

// ghost_module(x) gated elementwise by dfc_branch(x).
template <typename T>
Var<T> ghost_module_attn(const Ctx<T>& ctx, const Var<T>& x, const GhostModuleParams<T>& p, const DfcParams<T>& dfc);
template <typename T>
Tensor<T> ghost_module_attn(const Tensor<T>& x, const GhostModuleParams<T>& p, const DfcParams<T>& dfc,
                            Mode mode = Mode::eval);

// Channel gate: global pool -> 1x1 (bias) -> ReLU -> 1x1 (bias) -> hard sigmoid.
template <typename T>
struct SqueezeExciteParams {
  Tensor<T> reduce;  // (1, 1, C, R)
  Tensor<T> reduce_bias;
  Tensor<T> expand;  // (1, 1, R, C)
  Tensor<T> expand_bias;

  static SqueezeExciteParams init(std::int64_t channels, double ratio, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
Var<T> squeeze_excite(const Ctx<T>& ctx, const Var<T>& x, const SqueezeExciteParams<T>& p);

enum class Placement { none, expanded, output, both };

std::string to_string(Placement p);
Placement parse_placement(const std::string& s);
inline bool gates_expanded(Placement p) { return p == Placement::expanded || p == Placement::both; }
inline bool gates_output(Placement p) { return p == Placement::output || p == Placement::both; }

struct BottleneckConfig {
  std::int64_t c_in = 16;
  std::int64_t c_expand = 16;
  std::int64_t c_out = 16;
  int stride = 1;
  int dw_kernel = 3;       // stride-2 depthwise and shortcut depthwise extent
  double se_ratio = 0.0;   // 0 disables squeeze-and-excite
  Placement placement = Placement::expanded;
  DfcOptions dfc;
  double bn_eps = 1e-5;

  bool identity_shortcut() const { return stride == 1 && c_in == c_out; }
  // Throws ConfigError describing the first violated constraint.
  void validate() const;
};

template <typename T>
struct ShortcutParams {
  Tensor<T> depthwise;  // (k, k, 1, C_in)
  BatchNormParams<T> depthwise_bn;
  Tensor<T> pointwise;  // (1, 1, C_in, C_out)
  BatchNormParams<T> pointwise_bn;
};

template <typename T>
struct BottleneckParams {
  BottleneckConfig config;
  GhostModuleParams<T> ghost1;
  std::optional<DfcParams<T>> attn1;
  std::optional<Tensor<T>> depthwise;  // stride-2 only, (k, k, 1, C_expand)
  std::optional<BatchNormParams<T>> depthwise_bn;
  std::optional<SqueezeExciteParams<T>> se;
  GhostModuleParams<T> ghost2;
  std::optional<DfcParams<T>> attn2;
  std::optional<ShortcutParams<T>> shortcut;

  static BottleneckParams init(const BottleneckConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
Var<T> ghostv2_bottleneck(const Ctx<T>& ctx, const Var<T>& x, const BottleneckParams<T>& p);
template <typename T>
Tensor<T> ghostv2_bottleneck(const Tensor<T>& x, const BottleneckParams<T>& p, Mode mode = Mode::eval);

}  // namespace ghostv2
