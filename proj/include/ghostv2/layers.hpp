#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "ghostv2/autograd.hpp"
#include "ghostv2/rng.hpp"

// Parameter containers shared by the attention, ghost and backbone layers.
namespace ghostv2 {

// Walks named parameter tensors in a fixed order. trainable is false for
// running statistics.
template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, bool trainable)>;

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;

  static BatchNormParams identity(std::int64_t channels, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ParameterError("batch_norm: eps must be positive, got " + std::to_string(eps));
    const Shape s(1, 1, 1, channels);
    return {Tensor<T>::full(s, T(1)), Tensor<T>::zeros(s), Tensor<T>::zeros(s), Tensor<T>::full(s, T(1)), eps};
  }

  std::int64_t channels() const { return gamma.numel(); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".gamma", gamma, true);
    f(prefix + ".beta", beta, true);
    f(prefix + ".running_mean", running_mean, false);
    f(prefix + ".running_var", running_var, false);
  }
};

template <typename T>
Var<T> apply(const Ctx<T>& ctx, const BatchNormParams<T>& p, const Var<T>& x) {
  return ad::batch_norm(ctx, x, ctx.bind(p.gamma), ctx.bind(p.beta), p.running_mean, p.running_var, p.eps);
}

// Uniform in +-sqrt(6 / fan_in); kernel shape (kh, kw, c_in_per_group, c_out).
template <typename T>
Tensor<T> he_uniform(const Shape& kernel_shape, Rng& rng) {
  const double fan_in = static_cast<double>(kernel_shape[0] * kernel_shape[1] * kernel_shape[2]);
  const double bound = std::sqrt(6.0 / fan_in);
  return Tensor<T>::uniform(kernel_shape, -bound, bound, rng);
}

// Runs a recorded computation without keeping gradients and returns its value.
template <typename T, typename F>
Tensor<T> evaluate(Mode mode, F&& build) {
  Tape<T> tape(false);
  Binder<T> bind(tape);
  Ctx<T> ctx{bind, mode, nullptr};
  return build(ctx).value();
}

// Nearest multiple of `divisor` (at least divisor), never more than 10% below v.
inline std::int64_t make_divisible(double v, std::int64_t divisor = 4) {
  auto d = static_cast<double>(divisor);
  std::int64_t nv = std::max(divisor, static_cast<std::int64_t>(v + d / 2.0) / divisor * divisor);
  if (static_cast<double>(nv) < 0.9 * v) nv += divisor;
  return nv;
}

}  // namespace ghostv2
