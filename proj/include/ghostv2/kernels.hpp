#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ghostv2/tensor.hpp"

namespace ghostv2 {

struct Stride {
  int h = 1;
  int w = 1;
};

struct Padding {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  // Total padding k-1 per axis; odd kernels are symmetric, the extra cell of an
  // even kernel goes to the bottom/right.
  static Padding same(int kh, int kw) {
    return Padding{(kh - 1) / 2, kh - 1 - (kh - 1) / 2, (kw - 1) / 2, kw - 1 - (kw - 1) / 2};
  }
};

struct Window {
  int h = 1;
  int w = 1;
};

// Convolution weights laid out (kh, kw, c_in / groups, c_out) row-major; the
// tensor's N-H-W-C slots hold those four extents.
template <typename T>
struct ConvKernel {
  Tensor<T> weights;
  int groups = 1;

  ConvKernel() = default;
  ConvKernel(Tensor<T> w, int g = 1) : weights(std::move(w)), groups(g) {
    if (groups < 1 || c_out() % groups != 0) {
      throw ShapeError("kernel " + weights.shape().str() + " cannot be split into " +
                       std::to_string(groups) + " groups");
    }
  }

  static ConvKernel depthwise(Tensor<T> w) {
    const int c = static_cast<int>(w.shape().c());
    return ConvKernel(std::move(w), c);
  }

  int kh() const { return static_cast<int>(weights.shape()[0]); }
  int kw() const { return static_cast<int>(weights.shape()[1]); }
  int in_per_group() const { return static_cast<int>(weights.shape()[2]); }
  int c_out() const { return static_cast<int>(weights.shape()[3]); }
  int c_in() const { return in_per_group() * groups; }
  bool is_depthwise() const { return in_per_group() == 1 && groups == c_out(); }
};

enum class PoolKind { avg, max };
enum class ResizeKind { bilinear, bicubic };

Shape conv_output_shape(const Shape& x, int kh, int kw, int c_out, Stride stride, Padding pad);
// Output extent ceil(dim / stride); an odd padding total puts the extra cell bottom/right.
Padding pool_padding(const Shape& x, Window window, Stride stride);
Shape pool_output_shape(const Shape& x, Window window, Stride stride);

namespace kernels {

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  std::optional<Tensor<T>> bias;
};

// Grouped 2-D correlation with zero padding. bias may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, const Tensor<T>* bias, Stride stride,
                 Padding pad);
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvKernel<T>& k, bool has_bias, Stride stride,
                             Padding pad, const Tensor<T>& grad_out);

// 1x1, ungrouped, stride 1. Per-pixel matrix-vector product.
template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& x, const ConvKernel<T>& k, const Tensor<T>* bias);
template <typename T>
ConvGrads<T> conv2d_pointwise_backward(const Tensor<T>& x, const ConvKernel<T>& k, bool has_bias,
                                       const Tensor<T>& grad_out);

// groups == C_in == C_out.
template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const ConvKernel<T>& k, Stride stride, Padding pad);
template <typename T>
ConvGrads<T> conv2d_depthwise_backward(const Tensor<T>& x, const ConvKernel<T>& k, Stride stride,
                                       Padding pad, const Tensor<T>& grad_out);

template <typename T>
struct BatchNormForward {
  Tensor<T> output;
  Tensor<T> mean;  // statistics actually used for normalisation
  Tensor<T> var;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

// Normalises with the supplied statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& var, double eps);
// Normalises with biased per-channel statistics over N, H, W.
template <typename T>
BatchNormForward<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                     double eps);
// batch_stats selects whether mean/var depend on x (train) or are constants (eval).
template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean,
                                      const Tensor<T>& var, double eps, bool batch_stats,
                                      const Tensor<T>& grad_out);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> hard_sigmoid(const Tensor<T>& x);  // clamp((x+3)/6, 0, 1)
template <typename T> Tensor<T> clip01(const Tensor<T>& x);        // clamp(x, 0, 1)
template <typename T> Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);
template <typename T> Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out);
template <typename T> Tensor<T> hard_sigmoid_backward(const Tensor<T>& x, const Tensor<T>& grad_out);
template <typename T> Tensor<T> clip01_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// x (N,H,W,C) scaled by s (N,1,1,C).
template <typename T> Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> mul_channels_backward(const Tensor<T>& x, const Tensor<T>& s,
                                                      const Tensor<T>& grad_out);

template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count);
// Places g into channels [begin, begin + g.C) of a zero tensor of shape `full`.
template <typename T> Tensor<T> embed_channels(const Tensor<T>& g, const Shape& full, std::int64_t begin);

template <typename T>
struct PoolForward {
  Tensor<T> output;
  std::vector<std::int64_t> argmax;  // flat input index per output, max pooling only
};

// Same-padded pooling. Average divides by the number of real cells covered.
template <typename T>
PoolForward<T> pool2d(const Tensor<T>& x, PoolKind kind, Window window, Stride stride);
template <typename T>
Tensor<T> pool2d_backward(const Shape& input, PoolKind kind, Window window, Stride stride,
                          std::span<const std::int64_t> argmax, const Tensor<T>& grad_out);

// Half-pixel (align_corners = false) resampling to (out_h, out_w).
template <typename T>
Tensor<T> resize(const Tensor<T>& x, ResizeKind kind, std::int64_t out_h, std::int64_t out_w);
template <typename T>
Tensor<T> resize_backward(const Shape& input, ResizeKind kind, const Tensor<T>& grad_out);

template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T> Tensor<T> global_avg_pool_backward(const Shape& input, const Tensor<T>& grad_out);

// a[n,h,w,c] = sum_{h',w'} f[(h*W+w), h', w', c] * z[n,h',w',c]
template <typename T>
Tensor<T> full_fc_attention(const Tensor<T>& z, const Tensor<T>& f);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> full_fc_attention_backward(const Tensor<T>& z, const Tensor<T>& f,
                                                           const Tensor<T>& grad_out);

// Vertical stage then horizontal stage with dense per-channel weights:
//   mid[n,h,w,c] = sum_h' fv[h,h',w,c] * z[n,h',w,c]
//   a[n,h,w,c]   = sum_w' fh[w,w',h,c] * mid[n,h,w',c]
template <typename T>
Tensor<T> dfc_vertical(const Tensor<T>& z, const Tensor<T>& fv);
template <typename T>
Tensor<T> dfc_horizontal(const Tensor<T>& z, const Tensor<T>& fh);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dfc_vertical_backward(const Tensor<T>& z, const Tensor<T>& fv,
                                                      const Tensor<T>& grad_out);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dfc_horizontal_backward(const Tensor<T>& z, const Tensor<T>& fh,
                                                        const Tensor<T>& grad_out);

template <typename T>
struct CrossEntropyForward {
  T loss;                 // mean over the batch
  Tensor<T> probabilities;
};

// logits (N,1,1,K); labels in [0, K).
template <typename T>
CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace kernels
}  // namespace ghostv2
