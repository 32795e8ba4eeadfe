#include "ghostv2/autograd.hpp"

namespace ghostv2::ad {

namespace {

template <typename T>
using Grads = std::vector<std::optional<Tensor<T>>>;

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
  if (v.tape == nullptr) throw UsageError("operation on an unbound variable");
  return *v.tape;
}

// Elementwise product without cost accounting; used on gradients only.
template <typename T>
Tensor<T> product(const Tensor<T>& a, const Tensor<T>& b) {
  auto da = a.data();
  auto db = b.data();
  std::vector<T> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * db[i];
  return Tensor<T>(a.shape(), std::move(out));
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, int groups, const Var<T>* bias, Stride s, Padding p) {
  ConvKernel<T> kernel(k.value(), groups);
  Tensor<T> y = kernels::conv2d(x.value(), kernel, bias ? &bias->value() : nullptr, s, p);
  std::vector<Var<T>> inputs{x, k};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  Tensor<T> xv = x.value();
  return tape_of(x).record("conv2d", std::move(y), inputs, [xv, kernel, has_bias, s, p](const Tensor<T>& g) {
    auto r = kernels::conv2d_backward(xv, kernel, has_bias, s, p, g);
    Grads<T> out{std::move(r.input), std::move(r.kernel)};
    if (has_bias) out.push_back(std::move(r.bias));
    return out;
  });
}

template <typename T>
Var<T> conv2d_pointwise(const Var<T>& x, const Var<T>& k, const Var<T>* bias) {
  ConvKernel<T> kernel(k.value(), 1);
  Tensor<T> y = kernels::conv2d_pointwise(x.value(), kernel, bias ? &bias->value() : nullptr);
  std::vector<Var<T>> inputs{x, k};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  Tensor<T> xv = x.value();
  return tape_of(x).record("conv2d_pointwise", std::move(y), inputs, [xv, kernel, has_bias](const Tensor<T>& g) {
    auto r = kernels::conv2d_pointwise_backward(xv, kernel, has_bias, g);
    Grads<T> out{std::move(r.input), std::move(r.kernel)};
    if (has_bias) out.push_back(std::move(r.bias));
    return out;
  });
}

template <typename T>
Var<T> conv2d_depthwise(const Var<T>& x, const Var<T>& k, Stride s, Padding p) {
  auto kernel = ConvKernel<T>::depthwise(k.value());
  Tensor<T> y = kernels::conv2d_depthwise(x.value(), kernel, s, p);
  Tensor<T> xv = x.value();
  return tape_of(x).record("conv2d_depthwise", std::move(y), {x, k}, [xv, kernel, s, p](const Tensor<T>& g) {
    auto r = kernels::conv2d_depthwise_backward(xv, kernel, s, p, g);
    return Grads<T>{std::move(r.input), std::move(r.kernel)};
  });
}

template <typename T>
Var<T> batch_norm(const Ctx<T>& ctx, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps) {
  Tensor<T> xv = x.value();
  Tensor<T> gv = gamma.value();
  Tensor<T> y, mean, var;
  const bool train = ctx.mode == Mode::train;
  if (train) {
    auto f = kernels::batch_norm_train(xv, gv, beta.value(), eps);
    y = std::move(f.output);
    mean = std::move(f.mean);
    var = std::move(f.var);
    if (ctx.stats != nullptr) ctx.stats->push_back(BatchStats<T>{running_mean.storage_id(), mean, var});
  } else {
    y = kernels::batch_norm_eval(xv, gv, beta.value(), running_mean, running_var, eps);
    mean = running_mean;
    var = running_var;
  }
  return tape_of(x).record("batch_norm", std::move(y), {x, gamma, beta},
                           [xv, gv, mean, var, eps, train](const Tensor<T>& g) {
                             auto r = kernels::batch_norm_backward(xv, gv, mean, var, eps, train, g);
                             return Grads<T>{std::move(r.input), std::move(r.gamma), std::move(r.beta)};
                           });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> xv = x.value();
  return tape_of(x).record("relu", kernels::relu(xv), {x}, [xv](const Tensor<T>& g) {
    return Grads<T>{kernels::relu_backward(xv, g)};
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = kernels::sigmoid(x.value());
  return tape_of(x).record("sigmoid", y, {x}, [y](const Tensor<T>& g) {
    return Grads<T>{kernels::sigmoid_backward(y, g)};
  });
}

template <typename T>
Var<T> hard_sigmoid(const Var<T>& x) {
  Tensor<T> xv = x.value();
  return tape_of(x).record("hard_sigmoid", kernels::hard_sigmoid(xv), {x}, [xv](const Tensor<T>& g) {
    return Grads<T>{kernels::hard_sigmoid_backward(xv, g)};
  });
}

template <typename T>
Var<T> clip01(const Var<T>& x) {
  Tensor<T> xv = x.value();
  return tape_of(x).record("clip", kernels::clip01(xv), {x}, [xv](const Tensor<T>& g) {
    return Grads<T>{kernels::clip01_backward(xv, g)};
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return tape_of(a).record("add", kernels::add(a.value(), b.value()), {a, b},
                           [](const Tensor<T>& g) { return Grads<T>{g, g}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> av = a.value();
  Tensor<T> bv = b.value();
  return tape_of(a).record("mul", kernels::mul(av, bv), {a, b}, [av, bv](const Tensor<T>& g) {
    return Grads<T>{product(g, bv), product(g, av)};
  });
}

template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& s) {
  Tensor<T> xv = x.value();
  Tensor<T> sv = s.value();
  return tape_of(x).record("mul_channels", kernels::mul_channels(xv, sv), {x, s}, [xv, sv](const Tensor<T>& g) {
    auto [dx, ds] = kernels::mul_channels_backward(xv, sv, g);
    return Grads<T>{std::move(dx), std::move(ds)};
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const std::int64_t ca = a.shape().c();
  const std::int64_t cb = b.shape().c();
  return tape_of(a).record("concat", kernels::concat_channels(a.value(), b.value()), {a, b},
                           [ca, cb](const Tensor<T>& g) {
                             return Grads<T>{kernels::slice_channels(g, 0, ca), kernels::slice_channels(g, ca, cb)};
                           });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count) {
  const Shape full = x.shape();
  return tape_of(x).record("slice", kernels::slice_channels(x.value(), begin, count), {x},
                           [full, begin](const Tensor<T>& g) {
                             return Grads<T>{kernels::embed_channels(g, full, begin)};
                           });
}

template <typename T>
Var<T> pool2d(const Var<T>& x, PoolKind kind, Window w, Stride s) {
  auto f = kernels::pool2d(x.value(), kind, w, s);
  const Shape in = x.shape();
  auto argmax = std::make_shared<const std::vector<std::int64_t>>(std::move(f.argmax));
  return tape_of(x).record(kind == PoolKind::avg ? "pool_avg" : "pool_max", std::move(f.output), {x},
                           [in, kind, w, s, argmax](const Tensor<T>& g) {
                             return Grads<T>{kernels::pool2d_backward(in, kind, w, s, *argmax, g)};
                           });
}

template <typename T>
Var<T> resize(const Var<T>& x, ResizeKind kind, std::int64_t out_h, std::int64_t out_w) {
  const Shape in = x.shape();
  return tape_of(x).record("resize", kernels::resize(x.value(), kind, out_h, out_w), {x},
                           [in, kind](const Tensor<T>& g) { return Grads<T>{kernels::resize_backward(in, kind, g)}; });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape in = x.shape();
  return tape_of(x).record("global_avg_pool", kernels::global_avg_pool(x.value()), {x},
                           [in](const Tensor<T>& g) { return Grads<T>{kernels::global_avg_pool_backward(in, g)}; });
}

template <typename T>
Var<T> full_fc_attention(const Var<T>& z, const Var<T>& f) {
  Tensor<T> zv = z.value();
  Tensor<T> fv = f.value();
  return tape_of(z).record("full_fc_attention", kernels::full_fc_attention(zv, fv), {z, f},
                           [zv, fv](const Tensor<T>& g) {
                             auto [dz, df] = kernels::full_fc_attention_backward(zv, fv, g);
                             return Grads<T>{std::move(dz), std::move(df)};
                           });
}

template <typename T>
Var<T> dfc_vertical(const Var<T>& z, const Var<T>& fv) {
  Tensor<T> zv = z.value();
  Tensor<T> wv = fv.value();
  return tape_of(z).record("dfc_vertical", kernels::dfc_vertical(zv, wv), {z, fv}, [zv, wv](const Tensor<T>& g) {
    auto [dz, dw] = kernels::dfc_vertical_backward(zv, wv, g);
    return Grads<T>{std::move(dz), std::move(dw)};
  });
}

template <typename T>
Var<T> dfc_horizontal(const Var<T>& z, const Var<T>& fh) {
  Tensor<T> zv = z.value();
  Tensor<T> wv = fh.value();
  return tape_of(z).record("dfc_horizontal", kernels::dfc_horizontal(zv, wv), {z, fh}, [zv, wv](const Tensor<T>& g) {
    auto [dz, dw] = kernels::dfc_horizontal_backward(zv, wv, g);
    return Grads<T>{std::move(dz), std::move(dw)};
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  const Shape in = x.shape();
  return tape_of(x).record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {x}, [in](const Tensor<T>& g) {
    return Grads<T>{Tensor<T>::full(in, g.item())};
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  if (!(x.shape() == w.shape())) {
    throw ShapeError("weighted_sum: weights " + w.shape().str() + " do not match " + x.shape().str());
  }
  double acc = 0.0;
  auto xd = x.value().data();
  auto wd = w.data();
  for (std::size_t i = 0; i < xd.size(); ++i) acc += static_cast<double>(xd[i]) * wd[i];
  return tape_of(x).record("weighted_sum", Tensor<T>::scalar(static_cast<T>(acc)), {x}, [w](const Tensor<T>& g) {
    const T s = g.item();
    auto wd = w.data();
    std::vector<T> out(wd.size());
    for (std::size_t i = 0; i < wd.size(); ++i) out[i] = s * wd[i];
    return Grads<T>{Tensor<T>(w.shape(), std::move(out))};
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::int64_t index) {
  if (index < 0 || index >= x.value().numel()) {
    throw ParameterError("pick: index " + std::to_string(index) + " outside " + x.shape().str());
  }
  const Shape in = x.shape();
  return tape_of(x).record("pick", Tensor<T>::scalar(x.value()[index]), {x}, [in, index](const Tensor<T>& g) {
    std::vector<T> out(in.numel(), T(0));
    out[index] = g.item();
    return Grads<T>{Tensor<T>(in, std::move(out))};
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  auto f = kernels::softmax_cross_entropy(logits.value(), labels);
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor<T> probs = f.probabilities;
  return tape_of(logits).record("softmax_cross_entropy", Tensor<T>::scalar(f.loss), {logits},
                                [probs, lab](const Tensor<T>& g) {
                                  const std::int64_t N = probs.shape().n(), K = probs.shape().c();
                                  const T scale = g.item() / static_cast<T>(N);
                                  std::vector<T> out = probs.to_vector();
                                  for (std::int64_t n = 0; n < N; ++n) out[n * K + lab[n]] -= T(1);
                                  for (auto& v : out) v *= scale;
                                  return Grads<T>{Tensor<T>(probs.shape(), std::move(out))};
                                });
}

#define GHOSTV2_INSTANTIATE_AD(T)                                                                              \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, const Var<T>*, Stride, Padding);                   \
  template Var<T> conv2d_pointwise(const Var<T>&, const Var<T>&, const Var<T>*);                               \
  template Var<T> conv2d_depthwise(const Var<T>&, const Var<T>&, Stride, Padding);                             \
  template Var<T> batch_norm(const Ctx<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Tensor<T>&,     \
                             const Tensor<T>&, double);                                                        \
  template Var<T> relu(const Var<T>&);                                                                         \
  template Var<T> sigmoid(const Var<T>&);                                                                      \
  template Var<T> hard_sigmoid(const Var<T>&);                                                                 \
  template Var<T> clip01(const Var<T>&);                                                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> mul_channels(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                               \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                                   \
  template Var<T> pool2d(const Var<T>&, PoolKind, Window, Stride);                                             \
  template Var<T> resize(const Var<T>&, ResizeKind, std::int64_t, std::int64_t);                               \
  template Var<T> global_avg_pool(const Var<T>&);                                                              \
  template Var<T> full_fc_attention(const Var<T>&, const Var<T>&);                                             \
  template Var<T> dfc_vertical(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> dfc_horizontal(const Var<T>&, const Var<T>&);                                                \
  template Var<T> sum(const Var<T>&);                                                                          \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                               \
  template Var<T> pick(const Var<T>&, std::int64_t);                                                           \
  template Var<T> softmax_cross_entropy(const Var<T>&, std::span<const int>);

GHOSTV2_INSTANTIATE_AD(float)
GHOSTV2_INSTANTIATE_AD(double)

}  // namespace ghostv2::ad
