#include "ghostv2/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "ghostv2/cost.hpp"
#include "ghostv2/parallel.hpp"

namespace ghostv2 {

using std::int64_t;
using u64 = std::uint64_t;

Shape conv_output_shape(const Shape& x, int kh, int kw, int c_out, Stride stride, Padding pad) {
  if (kh < 1 || kw < 1) throw ParameterError("kernel extents must be positive");
  if (stride.h < 1 || stride.w < 1) throw ParameterError("stride must be positive");
  if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0) {
    throw ParameterError("padding must be non-negative");
  }
  const int64_t ph = x.h() + pad.top + pad.bottom;
  const int64_t pw = x.w() + pad.left + pad.right;
  if (ph < kh || pw < kw) {
    throw ShapeError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " is larger than padded input " + std::to_string(ph) + "x" + std::to_string(pw) +
                     " of " + x.str());
  }
  return Shape(x.n(), (ph - kh) / stride.h + 1, (pw - kw) / stride.w + 1, c_out);
}

Padding pool_padding(const Shape& x, Window window, Stride stride) {
  auto split = [](int64_t dim, int k, int s) {
    const int64_t out = (dim + s - 1) / s;
    const int64_t total = std::max<int64_t>(0, (out - 1) * s + k - dim);
    return std::pair<int, int>(static_cast<int>(total / 2), static_cast<int>(total - total / 2));
  };
  auto [top, bottom] = split(x.h(), window.h, stride.h);
  auto [left, right] = split(x.w(), window.w, stride.w);
  return Padding{top, bottom, left, right};
}

Shape pool_output_shape(const Shape& x, Window window, Stride stride) {
  if (window.h < 1 || window.w < 1) throw ParameterError("pooling window must be at least 1x1");
  if (stride.h < 1 || stride.w < 1) throw ParameterError("pooling stride must be positive");
  return Shape(x.n(), (x.h() + stride.h - 1) / stride.h, (x.w() + stride.w - 1) / stride.w, x.c());
}

namespace kernels {

namespace {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape " + a.shape().str() + " does not match " + b.shape().str());
  }
}

template <typename T>
void check_channel_vector(const char* op, const char* what, const Tensor<T>& v, int64_t c) {
  if (!(v.shape() == Shape(1, 1, 1, c))) {
    throw ShapeError(std::string(op) + ": " + what + " has shape " + v.shape().str() + ", expected " +
                     Shape(1, 1, 1, c).str());
  }
}

template <typename T>
void check_conv_input(const char* op, const Tensor<T>& x, const ConvKernel<T>& k, const Tensor<T>* bias) {
  if (k.c_in() != x.shape().c()) {
    throw ShapeError(std::string(op) + ": input " + x.shape().str() + " has " + std::to_string(x.shape().c()) +
                     " channels but kernel " + k.weights.shape().str() + " with " + std::to_string(k.groups) +
                     " group(s) expects " + std::to_string(k.c_in()));
  }
  if (bias != nullptr) check_channel_vector(op, "bias", *bias, k.c_out());
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  auto da = a.data();
  auto db = b.data();
  std::vector<T> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i], db[i]);
  return Tensor<T>(a.shape(), std::move(out));
}

u64 as_u64(int64_t v) { return static_cast<u64>(v); }

}  // namespace

// ---------------------------------------------------------------- convolution

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, const Tensor<T>* bias, Stride stride,
                 Padding pad) {
  check_conv_input("conv2d", x, k, bias);
  const Shape& xs = x.shape();
  const Shape ys = conv_output_shape(xs, k.kh(), k.kw(), k.c_out(), stride, pad);
  const int64_t H = xs.h(), W = xs.w(), C = xs.c();
  const int64_t Ho = ys.h(), Wo = ys.w(), Co = ys.c();
  const int kh = k.kh(), kw = k.kw(), cpg = k.in_per_group(), G = k.groups;
  const int64_t opg = Co / G;
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  const T* bd = bias != nullptr ? bias->data().data() : nullptr;
  std::vector<T> y(ys.numel(), T(0));

  parallel_for(0, ys.n() * Ho, [&](int64_t row) {
    const int64_t n = row / Ho, oh = row % Ho;
    for (int64_t ow = 0; ow < Wo; ++ow) {
      T* out = y.data() + ((n * Ho + oh) * Wo + ow) * Co;
      for (int i = 0; i < kh; ++i) {
        const int64_t ih = oh * stride.h - pad.top + i;
        if (ih < 0 || ih >= H) continue;
        for (int j = 0; j < kw; ++j) {
          const int64_t iw = ow * stride.w - pad.left + j;
          if (iw < 0 || iw >= W) continue;
          const T* xp = xd + ((n * H + ih) * W + iw) * C;
          const T* kp = kd + static_cast<int64_t>(i * kw + j) * cpg * Co;
          for (int g = 0; g < G; ++g) {
            T* o = out + g * opg;
            for (int ci = 0; ci < cpg; ++ci) {
              const T xv = xp[g * cpg + ci];
              const T* kr = kp + ci * Co + g * opg;
              for (int64_t co = 0; co < opg; ++co) o[co] += xv * kr[co];
            }
          }
        }
      }
      if (bd != nullptr) {
        for (int64_t co = 0; co < Co; ++co) out[co] += bd[co];
      }
    }
  });
  cost::record("conv2d", ys, as_u64(ys.numel()) * as_u64(kh * kw * cpg), 0,
               as_u64(k.weights.numel() + (bias ? bias->numel() : 0)));
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvKernel<T>& k, bool has_bias, Stride stride,
                             Padding pad, const Tensor<T>& grad_out) {
  const Shape& xs = x.shape();
  const Shape ys = conv_output_shape(xs, k.kh(), k.kw(), k.c_out(), stride, pad);
  if (!(grad_out.shape() == ys)) throw ShapeError("conv2d_backward: gradient shape " + grad_out.shape().str());
  const int64_t N = xs.n(), H = xs.h(), W = xs.w(), C = xs.c();
  const int64_t Ho = ys.h(), Wo = ys.w(), Co = ys.c();
  const int kh = k.kh(), kw = k.kw(), cpg = k.in_per_group(), G = k.groups;
  const int64_t opg = Co / G;
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  const T* dy = grad_out.data().data();

  std::vector<T> dx(xs.numel(), T(0));
  parallel_for(0, N * H, [&](int64_t row) {
    const int64_t n = row / H, ih = row % H;
    for (int64_t iw = 0; iw < W; ++iw) {
      T* gx = dx.data() + ((n * H + ih) * W + iw) * C;
      for (int i = 0; i < kh; ++i) {
        const int64_t th = ih + pad.top - i;
        if (th < 0 || th % stride.h != 0) continue;
        const int64_t oh = th / stride.h;
        if (oh >= Ho) continue;
        for (int j = 0; j < kw; ++j) {
          const int64_t tw = iw + pad.left - j;
          if (tw < 0 || tw % stride.w != 0) continue;
          const int64_t ow = tw / stride.w;
          if (ow >= Wo) continue;
          const T* g = dy + ((n * Ho + oh) * Wo + ow) * Co;
          const T* kp = kd + static_cast<int64_t>(i * kw + j) * cpg * Co;
          for (int grp = 0; grp < G; ++grp) {
            for (int ci = 0; ci < cpg; ++ci) {
              const T* kr = kp + ci * Co + grp * opg;
              const T* gr = g + grp * opg;
              T acc = 0;
              for (int64_t co = 0; co < opg; ++co) acc += gr[co] * kr[co];
              gx[grp * cpg + ci] += acc;
            }
          }
        }
      }
    }
  });

  std::vector<T> dk(k.weights.numel(), T(0));
  parallel_for(0, static_cast<int64_t>(kh) * kw * cpg, [&](int64_t item) {
    const int64_t tap = item / cpg, ci = item % cpg;
    const int i = static_cast<int>(tap / kw), j = static_cast<int>(tap % kw);
    T* acc = dk.data() + (tap * cpg + ci) * Co;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const int64_t ih = oh * stride.h - pad.top + i;
        if (ih < 0 || ih >= H) continue;
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const int64_t iw = ow * stride.w - pad.left + j;
          if (iw < 0 || iw >= W) continue;
          const T* xp = xd + ((n * H + ih) * W + iw) * C;
          const T* g = dy + ((n * Ho + oh) * Wo + ow) * Co;
          for (int grp = 0; grp < G; ++grp) {
            const T xv = xp[grp * cpg + ci];
            for (int64_t co = 0; co < opg; ++co) acc[grp * opg + co] += xv * g[grp * opg + co];
          }
        }
      }
    }
  });

  ConvGrads<T> out{Tensor<T>(xs, std::move(dx)), Tensor<T>(k.weights.shape(), std::move(dk)), std::nullopt};
  if (has_bias) {
    std::vector<T> db(Co, T(0));
    for (int64_t p = 0; p < ys.numel() / Co; ++p) {
      for (int64_t co = 0; co < Co; ++co) db[co] += dy[p * Co + co];
    }
    out.bias = Tensor<T>(Shape(1, 1, 1, Co), std::move(db));
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& x, const ConvKernel<T>& k, const Tensor<T>* bias) {
  if (k.kh() != 1 || k.kw() != 1 || k.groups != 1) {
    throw ShapeError("conv2d_pointwise: kernel " + k.weights.shape().str() + " with " +
                     std::to_string(k.groups) + " group(s) is not an ungrouped 1x1 kernel");
  }
  check_conv_input("conv2d_pointwise", x, k, bias);
  const Shape& xs = x.shape();
  const int64_t Ci = xs.c(), Co = k.c_out();
  const int64_t P = xs.n() * xs.h() * xs.w();
  const Shape ys(xs.n(), xs.h(), xs.w(), Co);
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  const T* bd = bias != nullptr ? bias->data().data() : nullptr;
  std::vector<T> y(ys.numel(), T(0));
  parallel_for(0, P, [&](int64_t p) {
    T* out = y.data() + p * Co;
    const T* xp = xd + p * Ci;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const T xv = xp[ci];
      const T* kr = kd + ci * Co;
      for (int64_t co = 0; co < Co; ++co) out[co] += xv * kr[co];
    }
    if (bd != nullptr) {
      for (int64_t co = 0; co < Co; ++co) out[co] += bd[co];
    }
  });
  cost::record("conv2d_pointwise", ys, as_u64(ys.numel()) * as_u64(Ci), 0,
               as_u64(k.weights.numel() + (bias ? bias->numel() : 0)));
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
ConvGrads<T> conv2d_pointwise_backward(const Tensor<T>& x, const ConvKernel<T>& k, bool has_bias,
                                       const Tensor<T>& grad_out) {
  const Shape& xs = x.shape();
  const int64_t Ci = xs.c(), Co = k.c_out();
  const int64_t P = xs.n() * xs.h() * xs.w();
  if (!(grad_out.shape() == Shape(xs.n(), xs.h(), xs.w(), Co))) {
    throw ShapeError("conv2d_pointwise_backward: gradient shape " + grad_out.shape().str());
  }
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  const T* dy = grad_out.data().data();

  std::vector<T> dx(xs.numel());
  parallel_for(0, P, [&](int64_t p) {
    const T* g = dy + p * Co;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const T* kr = kd + ci * Co;
      T acc = 0;
      for (int64_t co = 0; co < Co; ++co) acc += g[co] * kr[co];
      dx[p * Ci + ci] = acc;
    }
  });

  std::vector<T> dk(Ci * Co, T(0));
  parallel_for(0, Ci, [&](int64_t ci) {
    T* acc = dk.data() + ci * Co;
    for (int64_t p = 0; p < P; ++p) {
      const T xv = xd[p * Ci + ci];
      const T* g = dy + p * Co;
      for (int64_t co = 0; co < Co; ++co) acc[co] += xv * g[co];
    }
  });

  ConvGrads<T> out{Tensor<T>(xs, std::move(dx)), Tensor<T>(k.weights.shape(), std::move(dk)), std::nullopt};
  if (has_bias) {
    std::vector<T> db(Co, T(0));
    for (int64_t p = 0; p < P; ++p) {
      for (int64_t co = 0; co < Co; ++co) db[co] += dy[p * Co + co];
    }
    out.bias = Tensor<T>(Shape(1, 1, 1, Co), std::move(db));
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const ConvKernel<T>& k, Stride stride, Padding pad) {
  if (!k.is_depthwise() || k.groups != x.shape().c()) {
    throw ShapeError("conv2d_depthwise: kernel " + k.weights.shape().str() + " with " +
                     std::to_string(k.groups) + " group(s) is not depthwise for input " + x.shape().str());
  }
  const Shape& xs = x.shape();
  const Shape ys = conv_output_shape(xs, k.kh(), k.kw(), k.c_out(), stride, pad);
  const int64_t H = xs.h(), W = xs.w(), C = xs.c(), Ho = ys.h(), Wo = ys.w();
  const int kh = k.kh(), kw = k.kw();
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  std::vector<T> y(ys.numel(), T(0));
  parallel_for(0, ys.n() * Ho, [&](int64_t row) {
    const int64_t n = row / Ho, oh = row % Ho;
    for (int64_t ow = 0; ow < Wo; ++ow) {
      T* out = y.data() + ((n * Ho + oh) * Wo + ow) * C;
      for (int i = 0; i < kh; ++i) {
        const int64_t ih = oh * stride.h - pad.top + i;
        if (ih < 0 || ih >= H) continue;
        for (int j = 0; j < kw; ++j) {
          const int64_t iw = ow * stride.w - pad.left + j;
          if (iw < 0 || iw >= W) continue;
          const T* xp = xd + ((n * H + ih) * W + iw) * C;
          const T* kp = kd + static_cast<int64_t>(i * kw + j) * C;
          for (int64_t c = 0; c < C; ++c) out[c] += xp[c] * kp[c];
        }
      }
    }
  });
  cost::record("conv2d_depthwise", ys, as_u64(ys.numel()) * as_u64(kh * kw), 0, as_u64(k.weights.numel()));
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
ConvGrads<T> conv2d_depthwise_backward(const Tensor<T>& x, const ConvKernel<T>& k, Stride stride,
                                       Padding pad, const Tensor<T>& grad_out) {
  const Shape& xs = x.shape();
  const Shape ys = conv_output_shape(xs, k.kh(), k.kw(), k.c_out(), stride, pad);
  if (!(grad_out.shape() == ys)) {
    throw ShapeError("conv2d_depthwise_backward: gradient shape " + grad_out.shape().str());
  }
  const int64_t N = xs.n(), H = xs.h(), W = xs.w(), C = xs.c(), Ho = ys.h(), Wo = ys.w();
  const int kh = k.kh(), kw = k.kw();
  const T* xd = x.data().data();
  const T* kd = k.weights.data().data();
  const T* dy = grad_out.data().data();

  std::vector<T> dx(xs.numel(), T(0));
  parallel_for(0, N * H, [&](int64_t row) {
    const int64_t n = row / H, ih = row % H;
    for (int64_t iw = 0; iw < W; ++iw) {
      T* gx = dx.data() + ((n * H + ih) * W + iw) * C;
      for (int i = 0; i < kh; ++i) {
        const int64_t th = ih + pad.top - i;
        if (th < 0 || th % stride.h != 0) continue;
        const int64_t oh = th / stride.h;
        if (oh >= Ho) continue;
        for (int j = 0; j < kw; ++j) {
          const int64_t tw = iw + pad.left - j;
          if (tw < 0 || tw % stride.w != 0) continue;
          const int64_t ow = tw / stride.w;
          if (ow >= Wo) continue;
          const T* g = dy + ((n * Ho + oh) * Wo + ow) * C;
          const T* kp = kd + static_cast<int64_t>(i * kw + j) * C;
          for (int64_t c = 0; c < C; ++c) gx[c] += g[c] * kp[c];
        }
      }
    }
  });

  std::vector<T> dk(k.weights.numel(), T(0));
  parallel_for(0, static_cast<int64_t>(kh) * kw, [&](int64_t tap) {
    const int i = static_cast<int>(tap / kw), j = static_cast<int>(tap % kw);
    T* acc = dk.data() + tap * C;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const int64_t ih = oh * stride.h - pad.top + i;
        if (ih < 0 || ih >= H) continue;
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const int64_t iw = ow * stride.w - pad.left + j;
          if (iw < 0 || iw >= W) continue;
          const T* xp = xd + ((n * H + ih) * W + iw) * C;
          const T* g = dy + ((n * Ho + oh) * Wo + ow) * C;
          for (int64_t c = 0; c < C; ++c) acc[c] += xp[c] * g[c];
        }
      }
    }
  });
  return ConvGrads<T>{Tensor<T>(xs, std::move(dx)), Tensor<T>(k.weights.shape(), std::move(dk)), std::nullopt};
}

// ---------------------------------------------------------------- batch norm

template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& var, double eps) {
  if (!(eps > 0.0)) throw ParameterError("batch_norm: eps must be positive, got " + std::to_string(eps));
  const int64_t C = x.shape().c();
  check_channel_vector("batch_norm", "gamma", gamma, C);
  check_channel_vector("batch_norm", "beta", beta, C);
  check_channel_vector("batch_norm", "mean", mean, C);
  check_channel_vector("batch_norm", "var", var, C);
  std::vector<T> scale(C), shift(C);
  for (int64_t c = 0; c < C; ++c) {
    scale[c] = static_cast<T>(gamma[c] / std::sqrt(static_cast<double>(var[c]) + eps));
    shift[c] = mean[c];
  }
  auto in = x.data();
  std::vector<T> y(in.size());
  const int64_t P = x.numel() / C;
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t c = 0; c < C; ++c) y[p * C + c] = (in[p * C + c] - shift[c]) * scale[c] + beta[c];
  }
  cost::record("batch_norm", x.shape(), 0, as_u64(x.numel()), as_u64(2 * C));
  return Tensor<T>(x.shape(), std::move(y));
}

template <typename T>
BatchNormForward<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                     double eps) {
  if (!(eps > 0.0)) throw ParameterError("batch_norm: eps must be positive, got " + std::to_string(eps));
  const int64_t C = x.shape().c();
  const int64_t P = x.numel() / C;
  auto in = x.data();
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t c = 0; c < C; ++c) sum[c] += in[p * C + c];
  }
  std::vector<T> mean(C), var(C);
  for (int64_t c = 0; c < C; ++c) mean[c] = static_cast<T>(sum[c] / static_cast<double>(P));
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t c = 0; c < C; ++c) {
      const double d = static_cast<double>(in[p * C + c]) - mean[c];
      sq[c] += d * d;
    }
  }
  for (int64_t c = 0; c < C; ++c) var[c] = static_cast<T>(sq[c] / static_cast<double>(P));
  Tensor<T> m = Tensor<T>::vector(std::move(mean));
  Tensor<T> v = Tensor<T>::vector(std::move(var));
  Tensor<T> y = batch_norm_eval(x, gamma, beta, m, v, eps);
  return {std::move(y), std::move(m), std::move(v)};
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean,
                                      const Tensor<T>& var, double eps, bool batch_stats,
                                      const Tensor<T>& grad_out) {
  const int64_t C = x.shape().c();
  const int64_t P = x.numel() / C;
  auto in = x.data();
  auto dy = grad_out.data();
  std::vector<double> invstd(C), sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
  for (int64_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(static_cast<double>(var[c]) + eps);
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t c = 0; c < C; ++c) {
      const double xhat = (static_cast<double>(in[p * C + c]) - mean[c]) * invstd[c];
      sum_dy[c] += dy[p * C + c];
      sum_dy_xhat[c] += dy[p * C + c] * xhat;
    }
  }
  std::vector<T> dx(x.numel());
  const double m = static_cast<double>(P);
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t c = 0; c < C; ++c) {
      const double g = static_cast<double>(gamma[c]) * invstd[c];
      if (batch_stats) {
        const double xhat = (static_cast<double>(in[p * C + c]) - mean[c]) * invstd[c];
        dx[p * C + c] = static_cast<T>(g * (dy[p * C + c] - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m));
      } else {
        dx[p * C + c] = static_cast<T>(g * dy[p * C + c]);
      }
    }
  }
  std::vector<T> dgamma(C), dbeta(C);
  for (int64_t c = 0; c < C; ++c) {
    dgamma[c] = static_cast<T>(sum_dy_xhat[c]);
    dbeta[c] = static_cast<T>(sum_dy[c]);
  }
  return {Tensor<T>(x.shape(), std::move(dx)), Tensor<T>::vector(std::move(dgamma)),
          Tensor<T>::vector(std::move(dbeta))};
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  cost::record("relu", x.shape(), 0, as_u64(x.numel()));
  return map_unary(x, [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  cost::record("sigmoid", x.shape(), 0, as_u64(x.numel()));
  const T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  return map_unary(x, [lo, hi](T v) {
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    return std::clamp(s, lo, hi);
  });
}

template <typename T>
Tensor<T> hard_sigmoid(const Tensor<T>& x) {
  cost::record("hard_sigmoid", x.shape(), 0, as_u64(x.numel()));
  return map_unary(x, [](T v) { return std::clamp((v + T(3)) / T(6), T(0), T(1)); });
}

template <typename T>
Tensor<T> clip01(const Tensor<T>& x) {
  cost::record("clip", x.shape(), 0, as_u64(x.numel()));
  return map_unary(x, [](T v) { return std::clamp(v, T(0), T(1)); });
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  return map_binary(x, grad_out, [](T v, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  return map_binary(y, grad_out, [](T s, T g) { return g * s * (T(1) - s); });
}

template <typename T>
Tensor<T> hard_sigmoid_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  return map_binary(x, grad_out, [](T v, T g) { return (v > T(-3) && v < T(3)) ? g / T(6) : T(0); });
}

template <typename T>
Tensor<T> clip01_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  return map_binary(x, grad_out, [](T v, T g) { return (v > T(0) && v < T(1)) ? g : T(0); });
}

// ---------------------------------------------------------------- elementwise and layout

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  cost::record("add", a.shape(), 0, as_u64(a.numel()));
  return map_binary(a, b, [](T u, T v) { return u + v; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  cost::record("mul", a.shape(), 0, as_u64(a.numel()));
  return map_binary(a, b, [](T u, T v) { return u * v; });
}

template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const Shape& xs = x.shape();
  if (!(s.shape() == Shape(xs.n(), 1, 1, xs.c()))) {
    throw ShapeError("mul_channels: scale " + s.shape().str() + " does not match input " + xs.str());
  }
  const int64_t HW = xs.h() * xs.w(), C = xs.c();
  auto in = x.data();
  auto sd = s.data();
  std::vector<T> y(in.size());
  for (int64_t n = 0; n < xs.n(); ++n) {
    for (int64_t p = 0; p < HW; ++p) {
      for (int64_t c = 0; c < C; ++c) y[(n * HW + p) * C + c] = in[(n * HW + p) * C + c] * sd[n * C + c];
    }
  }
  cost::record("mul_channels", xs, 0, as_u64(x.numel()));
  return Tensor<T>(xs, std::move(y));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mul_channels_backward(const Tensor<T>& x, const Tensor<T>& s,
                                                      const Tensor<T>& grad_out) {
  const Shape& xs = x.shape();
  const int64_t HW = xs.h() * xs.w(), C = xs.c();
  auto in = x.data();
  auto sd = s.data();
  auto dy = grad_out.data();
  std::vector<T> dx(in.size()), ds(s.numel(), T(0));
  for (int64_t n = 0; n < xs.n(); ++n) {
    for (int64_t p = 0; p < HW; ++p) {
      for (int64_t c = 0; c < C; ++c) {
        const auto i = (n * HW + p) * C + c;
        dx[i] = dy[i] * sd[n * C + c];
        ds[n * C + c] += dy[i] * in[i];
      }
    }
  }
  return {Tensor<T>(xs, std::move(dx)), Tensor<T>(s.shape(), std::move(ds))};
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n() != bs.n() || as.h() != bs.h() || as.w() != bs.w()) {
    throw ShapeError("concat_channels: " + as.str() + " and " + bs.str() + " disagree on N, H or W");
  }
  const Shape ys(as.n(), as.h(), as.w(), as.c() + bs.c());
  const int64_t P = as.n() * as.h() * as.w();
  auto da = a.data();
  auto db = b.data();
  std::vector<T> y(ys.numel());
  for (int64_t p = 0; p < P; ++p) {
    std::copy_n(da.begin() + p * as.c(), as.c(), y.begin() + p * ys.c());
    std::copy_n(db.begin() + p * bs.c(), bs.c(), y.begin() + p * ys.c() + as.c());
  }
  cost::record("concat", ys, 0, 0);
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t begin, int64_t count) {
  const Shape& xs = x.shape();
  if (begin < 0 || count < 1 || begin + count > xs.c()) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + xs.str());
  }
  const Shape ys(xs.n(), xs.h(), xs.w(), count);
  const int64_t P = xs.n() * xs.h() * xs.w();
  auto in = x.data();
  std::vector<T> y(ys.numel());
  for (int64_t p = 0; p < P; ++p) std::copy_n(in.begin() + p * xs.c() + begin, count, y.begin() + p * count);
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
Tensor<T> embed_channels(const Tensor<T>& g, const Shape& full, int64_t begin) {
  const Shape& gs = g.shape();
  const int64_t P = gs.n() * gs.h() * gs.w();
  auto in = g.data();
  std::vector<T> y(full.numel(), T(0));
  for (int64_t p = 0; p < P; ++p) std::copy_n(in.begin() + p * gs.c(), gs.c(), y.begin() + p * full.c() + begin);
  return Tensor<T>(full, std::move(y));
}

// ---------------------------------------------------------------- pooling and resizing

template <typename T>
PoolForward<T> pool2d(const Tensor<T>& x, PoolKind kind, Window window, Stride stride) {
  const Shape ys = pool_output_shape(x.shape(), window, stride);
  const Padding pad = pool_padding(x.shape(), window, stride);
  const Shape& xs = x.shape();
  const int64_t H = xs.h(), W = xs.w(), C = xs.c(), Ho = ys.h(), Wo = ys.w();
  const T* xd = x.data().data();
  std::vector<T> y(ys.numel());
  std::vector<int64_t> argmax(kind == PoolKind::max ? ys.numel() : 0);
  parallel_for(0, ys.n() * Ho, [&](int64_t row) {
    const int64_t n = row / Ho, oh = row % Ho;
    std::vector<T> acc(C);
    for (int64_t ow = 0; ow < Wo; ++ow) {
      const int64_t obase = ((n * Ho + oh) * Wo + ow) * C;
      const int64_t h0 = std::max<int64_t>(0, oh * stride.h - pad.top);
      const int64_t h1 = std::min<int64_t>(H, oh * stride.h - pad.top + window.h);
      const int64_t w0 = std::max<int64_t>(0, ow * stride.w - pad.left);
      const int64_t w1 = std::min<int64_t>(W, ow * stride.w - pad.left + window.w);
      if (kind == PoolKind::avg) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (int64_t ih = h0; ih < h1; ++ih) {
          for (int64_t iw = w0; iw < w1; ++iw) {
            const T* xp = xd + ((n * H + ih) * W + iw) * C;
            for (int64_t c = 0; c < C; ++c) acc[c] += xp[c];
          }
        }
        const T count = static_cast<T>((h1 - h0) * (w1 - w0));
        for (int64_t c = 0; c < C; ++c) y[obase + c] = acc[c] / count;
      } else {
        for (int64_t c = 0; c < C; ++c) {
          y[obase + c] = -std::numeric_limits<T>::infinity();
          argmax[obase + c] = -1;
        }
        for (int64_t ih = h0; ih < h1; ++ih) {
          for (int64_t iw = w0; iw < w1; ++iw) {
            const int64_t ibase = ((n * H + ih) * W + iw) * C;
            for (int64_t c = 0; c < C; ++c) {
              if (argmax[obase + c] < 0 || xd[ibase + c] > y[obase + c]) {
                y[obase + c] = xd[ibase + c];
                argmax[obase + c] = ibase + c;
              }
            }
          }
        }
      }
    }
  });
  cost::record(kind == PoolKind::avg ? "pool_avg" : "pool_max", ys, 0,
               as_u64(ys.numel()) * as_u64(window.h * window.w));
  return {Tensor<T>(ys, std::move(y)), std::move(argmax)};
}

template <typename T>
Tensor<T> pool2d_backward(const Shape& input, PoolKind kind, Window window, Stride stride,
                          std::span<const int64_t> argmax, const Tensor<T>& grad_out) {
  const Shape ys = pool_output_shape(input, window, stride);
  if (!(grad_out.shape() == ys)) throw ShapeError("pool2d_backward: gradient shape " + grad_out.shape().str());
  const Padding pad = pool_padding(input, window, stride);
  const int64_t H = input.h(), W = input.w(), C = input.c(), Ho = ys.h(), Wo = ys.w();
  const T* dy = grad_out.data().data();
  std::vector<T> dx(input.numel(), T(0));
  parallel_for(0, input.n(), [&](int64_t n) {
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const int64_t obase = ((n * Ho + oh) * Wo + ow) * C;
        if (kind == PoolKind::max) {
          for (int64_t c = 0; c < C; ++c) dx[argmax[obase + c]] += dy[obase + c];
          continue;
        }
        const int64_t h0 = std::max<int64_t>(0, oh * stride.h - pad.top);
        const int64_t h1 = std::min<int64_t>(H, oh * stride.h - pad.top + window.h);
        const int64_t w0 = std::max<int64_t>(0, ow * stride.w - pad.left);
        const int64_t w1 = std::min<int64_t>(W, ow * stride.w - pad.left + window.w);
        const T count = static_cast<T>((h1 - h0) * (w1 - w0));
        for (int64_t ih = h0; ih < h1; ++ih) {
          for (int64_t iw = w0; iw < w1; ++iw) {
            T* gx = dx.data() + ((n * H + ih) * W + iw) * C;
            for (int64_t c = 0; c < C; ++c) gx[c] += dy[obase + c] / count;
          }
        }
      }
    }
  });
  return Tensor<T>(input, std::move(dx));
}

namespace {

// Source taps and weights for one output coordinate along one axis.
struct AxisTaps {
  std::array<int64_t, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
};

double cubic_near(double x, double a) { return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0; }
double cubic_far(double x, double a) { return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a; }

std::vector<AxisTaps> axis_taps(int64_t in, int64_t out, ResizeKind kind) {
  std::vector<AxisTaps> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    AxisTaps& t = taps[o];
    if (kind == ResizeKind::bilinear) {
      if (src < 0.0) src = 0.0;
      const int64_t i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(src)), in - 1);
      const int64_t i1 = std::min<int64_t>(i0 + 1, in - 1);
      const double l = src - static_cast<double>(i0);
      t.index = {i0, i1, 0, 0};
      t.weight = {1.0 - l, l, 0.0, 0.0};
      t.count = 2;
    } else {
      constexpr double a = -0.75;
      const double base = std::floor(src);
      const double f = src - base;
      for (int k = 0; k < 4; ++k) {
        t.index[k] = std::clamp<int64_t>(static_cast<int64_t>(base) - 1 + k, 0, in - 1);
      }
      t.weight = {cubic_far(f + 1.0, a), cubic_near(f, a), cubic_near(1.0 - f, a), cubic_far(2.0 - f, a)};
      t.count = 4;
    }
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize(const Tensor<T>& x, ResizeKind kind, int64_t out_h, int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize: output extent must be at least 1x1");
  const Shape& xs = x.shape();
  const Shape ys(xs.n(), out_h, out_w, xs.c());
  const auto th = axis_taps(xs.h(), out_h, kind);
  const auto tw = axis_taps(xs.w(), out_w, kind);
  const int64_t H = xs.h(), W = xs.w(), C = xs.c();
  const T* xd = x.data().data();
  std::vector<T> y(ys.numel(), T(0));
  parallel_for(0, xs.n() * out_h, [&](int64_t row) {
    const int64_t n = row / out_h, oh = row % out_h;
    const AxisTaps& a = th[oh];
    for (int64_t ow = 0; ow < out_w; ++ow) {
      const AxisTaps& b = tw[ow];
      T* out = y.data() + ((n * out_h + oh) * out_w + ow) * C;
      for (int i = 0; i < a.count; ++i) {
        for (int j = 0; j < b.count; ++j) {
          const T wgt = static_cast<T>(a.weight[i] * b.weight[j]);
          const T* xp = xd + ((n * H + a.index[i]) * W + b.index[j]) * C;
          for (int64_t c = 0; c < C; ++c) out[c] += wgt * xp[c];
        }
      }
    }
  });
  const u64 taps = kind == ResizeKind::bilinear ? 4 : 16;
  cost::record(kind == ResizeKind::bilinear ? "resize_bilinear" : "resize_bicubic", ys, 0,
               as_u64(ys.numel()) * taps);
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
Tensor<T> resize_backward(const Shape& input, ResizeKind kind, const Tensor<T>& grad_out) {
  const Shape& ys = grad_out.shape();
  const auto th = axis_taps(input.h(), ys.h(), kind);
  const auto tw = axis_taps(input.w(), ys.w(), kind);
  const int64_t H = input.h(), W = input.w(), C = input.c();
  const T* dy = grad_out.data().data();
  std::vector<T> dx(input.numel(), T(0));
  parallel_for(0, input.n(), [&](int64_t n) {
    for (int64_t oh = 0; oh < ys.h(); ++oh) {
      const AxisTaps& a = th[oh];
      for (int64_t ow = 0; ow < ys.w(); ++ow) {
        const AxisTaps& b = tw[ow];
        const T* g = dy + ((n * ys.h() + oh) * ys.w() + ow) * C;
        for (int i = 0; i < a.count; ++i) {
          for (int j = 0; j < b.count; ++j) {
            const T wgt = static_cast<T>(a.weight[i] * b.weight[j]);
            T* gx = dx.data() + ((n * H + a.index[i]) * W + b.index[j]) * C;
            for (int64_t c = 0; c < C; ++c) gx[c] += wgt * g[c];
          }
        }
      }
    }
  });
  return Tensor<T>(input, std::move(dx));
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  const int64_t HW = xs.h() * xs.w(), C = xs.c();
  auto in = x.data();
  std::vector<T> y(xs.n() * C);
  for (int64_t n = 0; n < xs.n(); ++n) {
    std::vector<double> acc(C, 0.0);
    for (int64_t p = 0; p < HW; ++p) {
      for (int64_t c = 0; c < C; ++c) acc[c] += in[(n * HW + p) * C + c];
    }
    for (int64_t c = 0; c < C; ++c) y[n * C + c] = static_cast<T>(acc[c] / static_cast<double>(HW));
  }
  const Shape ys(xs.n(), 1, 1, C);
  cost::record("global_avg_pool", ys, 0, as_u64(x.numel()));
  return Tensor<T>(ys, std::move(y));
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input, const Tensor<T>& grad_out) {
  const int64_t HW = input.h() * input.w(), C = input.c();
  auto g = grad_out.data();
  std::vector<T> dx(input.numel());
  for (int64_t n = 0; n < input.n(); ++n) {
    for (int64_t p = 0; p < HW; ++p) {
      for (int64_t c = 0; c < C; ++c) dx[(n * HW + p) * C + c] = g[n * C + c] / static_cast<T>(HW);
    }
  }
  return Tensor<T>(input, std::move(dx));
}

// ---------------------------------------------------------------- attention

template <typename T>
Tensor<T> full_fc_attention(const Tensor<T>& z, const Tensor<T>& f) {
  const Shape& zs = z.shape();
  const int64_t HW = zs.h() * zs.w(), C = zs.c();
  if (!(f.shape() == Shape(HW, zs.h(), zs.w(), C))) {
    throw ShapeError("full_fc_attention: weights " + f.shape().str() + " do not match feature " + zs.str() +
                     ", expected " + Shape(HW, zs.h(), zs.w(), C).str());
  }
  const T* zd = z.data().data();
  const T* fd = f.data().data();
  std::vector<T> y(zs.numel(), T(0));
  parallel_for(0, zs.n() * HW, [&](int64_t item) {
    const int64_t n = item / HW, p = item % HW;
    T* out = y.data() + item * C;
    for (int64_t q = 0; q < HW; ++q) {
      const T* fr = fd + (p * HW + q) * C;
      const T* zr = zd + (n * HW + q) * C;
      for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * zr[c];
    }
  });
  cost::record("full_fc_attention", zs, as_u64(zs.n() * HW * HW * C), 0, as_u64(f.numel()));
  return Tensor<T>(zs, std::move(y));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> full_fc_attention_backward(const Tensor<T>& z, const Tensor<T>& f,
                                                           const Tensor<T>& grad_out) {
  const Shape& zs = z.shape();
  const int64_t N = zs.n(), HW = zs.h() * zs.w(), C = zs.c();
  const T* zd = z.data().data();
  const T* fd = f.data().data();
  const T* dy = grad_out.data().data();
  std::vector<T> dz(zs.numel(), T(0));
  parallel_for(0, N * HW, [&](int64_t item) {
    const int64_t n = item / HW, q = item % HW;
    T* out = dz.data() + item * C;
    for (int64_t p = 0; p < HW; ++p) {
      const T* fr = fd + (p * HW + q) * C;
      const T* g = dy + (n * HW + p) * C;
      for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * g[c];
    }
  });
  std::vector<T> df(f.numel(), T(0));
  parallel_for(0, HW, [&](int64_t p) {
    for (int64_t n = 0; n < N; ++n) {
      const T* g = dy + (n * HW + p) * C;
      for (int64_t q = 0; q < HW; ++q) {
        T* out = df.data() + (p * HW + q) * C;
        const T* zr = zd + (n * HW + q) * C;
        for (int64_t c = 0; c < C; ++c) out[c] += g[c] * zr[c];
      }
    }
  });
  return {Tensor<T>(zs, std::move(dz)), Tensor<T>(f.shape(), std::move(df))};
}

template <typename T>
Tensor<T> dfc_vertical(const Tensor<T>& z, const Tensor<T>& fv) {
  const Shape& zs = z.shape();
  const int64_t H = zs.h(), W = zs.w(), C = zs.c();
  if (!(fv.shape() == Shape(H, H, W, C))) {
    throw ShapeError("dfc_vertical: weights " + fv.shape().str() + " do not match feature " + zs.str() +
                     ", expected " + Shape(H, H, W, C).str());
  }
  const T* zd = z.data().data();
  const T* fd = fv.data().data();
  std::vector<T> y(zs.numel(), T(0));
  parallel_for(0, zs.n() * H, [&](int64_t row) {
    const int64_t n = row / H, h = row % H;
    for (int64_t hp = 0; hp < H; ++hp) {
      for (int64_t w = 0; w < W; ++w) {
        T* out = y.data() + ((n * H + h) * W + w) * C;
        const T* fr = fd + ((h * H + hp) * W + w) * C;
        const T* zr = zd + ((n * H + hp) * W + w) * C;
        for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * zr[c];
      }
    }
  });
  cost::record("dfc_vertical", zs, as_u64(zs.n() * H * H * W * C), 0, as_u64(fv.numel()));
  return Tensor<T>(zs, std::move(y));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> dfc_vertical_backward(const Tensor<T>& z, const Tensor<T>& fv,
                                                      const Tensor<T>& grad_out) {
  const Shape& zs = z.shape();
  const int64_t N = zs.n(), H = zs.h(), W = zs.w(), C = zs.c();
  const T* zd = z.data().data();
  const T* fd = fv.data().data();
  const T* dy = grad_out.data().data();
  std::vector<T> dz(zs.numel(), T(0)), df(fv.numel(), T(0));
  parallel_for(0, N * H, [&](int64_t row) {
    const int64_t n = row / H, hp = row % H;
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t w = 0; w < W; ++w) {
        T* out = dz.data() + ((n * H + hp) * W + w) * C;
        const T* fr = fd + ((h * H + hp) * W + w) * C;
        const T* g = dy + ((n * H + h) * W + w) * C;
        for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * g[c];
      }
    }
  });
  parallel_for(0, H, [&](int64_t h) {
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t hp = 0; hp < H; ++hp) {
        for (int64_t w = 0; w < W; ++w) {
          T* out = df.data() + ((h * H + hp) * W + w) * C;
          const T* g = dy + ((n * H + h) * W + w) * C;
          const T* zr = zd + ((n * H + hp) * W + w) * C;
          for (int64_t c = 0; c < C; ++c) out[c] += g[c] * zr[c];
        }
      }
    }
  });
  return {Tensor<T>(zs, std::move(dz)), Tensor<T>(fv.shape(), std::move(df))};
}

template <typename T>
Tensor<T> dfc_horizontal(const Tensor<T>& z, const Tensor<T>& fh) {
  const Shape& zs = z.shape();
  const int64_t H = zs.h(), W = zs.w(), C = zs.c();
  if (!(fh.shape() == Shape(W, W, H, C))) {
    throw ShapeError("dfc_horizontal: weights " + fh.shape().str() + " do not match feature " + zs.str() +
                     ", expected " + Shape(W, W, H, C).str());
  }
  const T* zd = z.data().data();
  const T* fd = fh.data().data();
  std::vector<T> y(zs.numel(), T(0));
  parallel_for(0, zs.n() * H, [&](int64_t row) {
    const int64_t n = row / H, h = row % H;
    for (int64_t w = 0; w < W; ++w) {
      T* out = y.data() + ((n * H + h) * W + w) * C;
      for (int64_t wp = 0; wp < W; ++wp) {
        const T* fr = fd + ((w * W + wp) * H + h) * C;
        const T* zr = zd + ((n * H + h) * W + wp) * C;
        for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * zr[c];
      }
    }
  });
  cost::record("dfc_horizontal", zs, as_u64(zs.n() * H * W * W * C), 0, as_u64(fh.numel()));
  return Tensor<T>(zs, std::move(y));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> dfc_horizontal_backward(const Tensor<T>& z, const Tensor<T>& fh,
                                                        const Tensor<T>& grad_out) {
  const Shape& zs = z.shape();
  const int64_t N = zs.n(), H = zs.h(), W = zs.w(), C = zs.c();
  const T* zd = z.data().data();
  const T* fd = fh.data().data();
  const T* dy = grad_out.data().data();
  std::vector<T> dz(zs.numel(), T(0)), df(fh.numel(), T(0));
  parallel_for(0, N * H, [&](int64_t row) {
    const int64_t n = row / H, h = row % H;
    for (int64_t wp = 0; wp < W; ++wp) {
      T* out = dz.data() + ((n * H + h) * W + wp) * C;
      for (int64_t w = 0; w < W; ++w) {
        const T* fr = fd + ((w * W + wp) * H + h) * C;
        const T* g = dy + ((n * H + h) * W + w) * C;
        for (int64_t c = 0; c < C; ++c) out[c] += fr[c] * g[c];
      }
    }
  });
  parallel_for(0, W, [&](int64_t w) {
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t wp = 0; wp < W; ++wp) {
        for (int64_t h = 0; h < H; ++h) {
          T* out = df.data() + ((w * W + wp) * H + h) * C;
          const T* g = dy + ((n * H + h) * W + w) * C;
          const T* zr = zd + ((n * H + h) * W + wp) * C;
          for (int64_t c = 0; c < C; ++c) out[c] += g[c] * zr[c];
        }
      }
    }
  });
  return {Tensor<T>(zs, std::move(dz)), Tensor<T>(fh.shape(), std::move(df))};
}

// ---------------------------------------------------------------- loss

template <typename T>
CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const Shape& ls = logits.shape();
  if (ls.h() != 1 || ls.w() != 1) throw ShapeError("softmax_cross_entropy: logits must be (N,1,1,K), got " + ls.str());
  if (static_cast<int64_t>(labels.size()) != ls.n()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + ls.str());
  }
  const int64_t K = ls.c();
  auto in = logits.data();
  std::vector<T> probs(in.size());
  double total = 0.0;
  for (int64_t n = 0; n < ls.n(); ++n) {
    const int label = labels[n];
    if (label < 0 || label >= K) throw ParameterError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
    double mx = in[n * K];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(in[n * K + k]));
    double z = 0.0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(in[n * K + k]) - mx);
    const double lse = mx + std::log(z);
    for (int64_t k = 0; k < K; ++k) probs[n * K + k] = static_cast<T>(std::exp(in[n * K + k] - lse));
    total += lse - static_cast<double>(in[n * K + label]);
  }
  cost::record("softmax_cross_entropy", Shape{}, 0, as_u64(logits.numel()));
  return {static_cast<T>(total / static_cast<double>(ls.n())), Tensor<T>(ls, std::move(probs))};
}

#define GHOSTV2_INSTANTIATE_KERNELS(T)                                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvKernel<T>&, const Tensor<T>*, Stride, Padding);      \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const ConvKernel<T>&, bool, Stride, Padding,       \
                                        const Tensor<T>&);                                                   \
  template Tensor<T> conv2d_pointwise(const Tensor<T>&, const ConvKernel<T>&, const Tensor<T>*);             \
  template ConvGrads<T> conv2d_pointwise_backward(const Tensor<T>&, const ConvKernel<T>&, bool,              \
                                                  const Tensor<T>&);                                         \
  template Tensor<T> conv2d_depthwise(const Tensor<T>&, const ConvKernel<T>&, Stride, Padding);              \
  template ConvGrads<T> conv2d_depthwise_backward(const Tensor<T>&, const ConvKernel<T>&, Stride, Padding,   \
                                                  const Tensor<T>&);                                         \
  template Tensor<T> batch_norm_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                     const Tensor<T>&, double);                                              \
  template BatchNormForward<T> batch_norm_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                                double);                                                     \
  template BatchNormGrads<T> batch_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                                 const Tensor<T>&, double, bool, const Tensor<T>&);          \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                              \
  template Tensor<T> hard_sigmoid(const Tensor<T>&);                                                         \
  template Tensor<T> clip01(const Tensor<T>&);                                                               \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> hard_sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> clip01_backward(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul_channels(const Tensor<T>&, const Tensor<T>&);                                       \
  template std::pair<Tensor<T>, Tensor<T>> mul_channels_backward(const Tensor<T>&, const Tensor<T>&,         \
                                                                 const Tensor<T>&);                          \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> slice_channels(const Tensor<T>&, int64_t, int64_t);                                     \
  template Tensor<T> embed_channels(const Tensor<T>&, const Shape&, int64_t);                                \
  template PoolForward<T> pool2d(const Tensor<T>&, PoolKind, Window, Stride);                                \
  template Tensor<T> pool2d_backward(const Shape&, PoolKind, Window, Stride, std::span<const int64_t>,       \
                                     const Tensor<T>&);                                                      \
  template Tensor<T> resize(const Tensor<T>&, ResizeKind, int64_t, int64_t);                                 \
  template Tensor<T> resize_backward(const Shape&, ResizeKind, const Tensor<T>&);                            \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                      \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                               \
  template Tensor<T> full_fc_attention(const Tensor<T>&, const Tensor<T>&);                                  \
  template std::pair<Tensor<T>, Tensor<T>> full_fc_attention_backward(const Tensor<T>&, const Tensor<T>&,    \
                                                                      const Tensor<T>&);                     \
  template Tensor<T> dfc_vertical(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> dfc_horizontal(const Tensor<T>&, const Tensor<T>&);                                     \
  template std::pair<Tensor<T>, Tensor<T>> dfc_vertical_backward(const Tensor<T>&, const Tensor<T>&,         \
                                                                 const Tensor<T>&);                          \
  template std::pair<Tensor<T>, Tensor<T>> dfc_horizontal_backward(const Tensor<T>&, const Tensor<T>&,       \
                                                                   const Tensor<T>&);                        \
  template CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);

GHOSTV2_INSTANTIATE_KERNELS(float)
GHOSTV2_INSTANTIATE_KERNELS(double)

}  // namespace kernels
}  // namespace ghostv2
