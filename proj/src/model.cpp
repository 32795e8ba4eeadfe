#include "ghostv2/model.hpp"

#include "ghostv2/cost.hpp"

namespace ghostv2 {

namespace {

std::int64_t scaled(std::int64_t c, double width) { return make_divisible(static_cast<double>(c) * width); }

std::int64_t halve(std::int64_t size, int stride) { return (size + stride - 1) / stride; }

}  // namespace

ModelLayout resolve_layout(const ModelSpec& spec) {
  spec.validate();
  ModelLayout layout;
  layout.stem_channels = scaled(spec.stem.channels, spec.width);
  layout.total_stride = spec.stem.stride;
  std::int64_t size = halve(spec.input_size, spec.stem.stride);
  std::int64_t c_in = layout.stem_channels;
  for (const StageSpec& stage : spec.stages) {
    for (std::size_t j = 0; j < stage.blocks.size(); ++j) {
      const BlockSpec& b = stage.blocks[j];
      BlockLayout bl;
      bl.stage = stage.name;
      bl.name = stage.name + ".b" + std::to_string(j);
      bl.input_size = size;
      BottleneckConfig& cfg = bl.config;
      cfg.c_in = c_in;
      cfg.c_expand = scaled(b.expand, spec.width);
      cfg.c_out = scaled(b.out, spec.width);
      cfg.stride = b.stride;
      cfg.dw_kernel = b.dw_kernel;
      cfg.se_ratio = b.se;
      cfg.placement = b.placement.value_or(stage.placement.value_or(spec.placement));
      cfg.dfc = spec.dfc;
      const int k = b.kernel.value_or(stage.kernel.value_or(spec.scheduled_kernel(size)));
      cfg.dfc.k_h = cfg.dfc.k_w = k;
      cfg.bn_eps = spec.bn_eps;
      try {
        cfg.validate();
      } catch (const ConfigError& e) {
        throw ConfigError("stage '" + stage.name + "' block " + std::to_string(j) + ": " + e.what());
      }
      layout.blocks.push_back(bl);
      c_in = cfg.c_out;
      size = halve(size, b.stride);
      layout.total_stride *= b.stride;
    }
  }
  layout.head_channels = scaled(spec.head.conv_channels, spec.width);
  return layout;
}

template <typename T>
void Model<T>::visit(const ParamVisitor<T>& f) {
  f("stem.weight", stem, true);
  stem_bn.visit("stem.bn", f);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(layout.blocks[i].name, f);
  f("head.weight", head, true);
  head_bn.visit("head.bn", f);
  f("feature.weight", feature, true);
  f("feature.bias", feature_bias, true);
  f("classifier.weight", classifier, true);
  f("classifier.bias", classifier_bias, true);
}

template <typename T>
void Model<T>::for_each_param(const std::function<void(const std::string&, const Tensor<T>&, bool)>& f) const {
  // The mutable walk never reassigns tensors itself, so reuse it read-only.
  const_cast<Model*>(this)->visit(ParamVisitor<T>([&](const std::string& n, Tensor<T>& t, bool tr) { f(n, t, tr); }));
}

template <typename T>
std::int64_t Model<T>::parameter_count() const {
  std::int64_t total = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t, bool trainable) {
    if (trainable) total += t.numel();
  });
  return total;
}

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  Model<T> m;
  m.spec = spec;
  m.layout = resolve_layout(spec);
  Rng root(seed);
  Rng rng = root.fork(0);
  const auto& L = m.layout;
  m.stem = he_uniform<T>(Shape(spec.stem.kernel, spec.stem.kernel, spec.in_channels, L.stem_channels), rng);
  m.stem_bn = BatchNormParams<T>::identity(L.stem_channels, spec.bn_eps);
  for (std::size_t i = 0; i < L.blocks.size(); ++i) {
    Rng block_rng = root.fork(i + 1);
    m.blocks.push_back(BottleneckParams<T>::init(L.blocks[i].config, block_rng));
  }
  const std::int64_t c_last = L.blocks.empty() ? L.stem_channels : L.blocks.back().config.c_out;
  Rng head_rng = root.fork(L.blocks.size() + 1);
  m.head = he_uniform<T>(Shape(1, 1, c_last, L.head_channels), head_rng);
  m.head_bn = BatchNormParams<T>::identity(L.head_channels, spec.bn_eps);
  m.feature = he_uniform<T>(Shape(1, 1, L.head_channels, spec.head.feature_size), head_rng);
  m.feature_bias = Tensor<T>::zeros(Shape(1, 1, 1, spec.head.feature_size));
  m.classifier = Tensor<T>::zeros(Shape(1, 1, spec.head.feature_size, spec.head.num_classes));
  m.classifier_bias = Tensor<T>::zeros(Shape(1, 1, 1, spec.head.num_classes));
  return m;
}

template <typename T>
Var<T> forward(const Ctx<T>& ctx, const Model<T>& model, const Var<T>& x) {
  const Shape xs = x.shape();
  const int stride = model.layout.total_stride;
  if (xs.h() % stride != 0 || xs.w() % stride != 0) {
    throw ShapeError("forward: input " + xs.str() + " must have H and W divisible by the total stride " +
                     std::to_string(stride));
  }
  if (xs.c() != model.spec.in_channels) {
    throw ShapeError("forward: input " + xs.str() + " must have " + std::to_string(model.spec.in_channels) +
                     " channels");
  }
  const int k = model.spec.stem.kernel;
  Var<T> y = [&] {
    cost::NameScope scope("stem");
    Var<T> s = ad::conv2d(x, ctx.bind(model.stem), 1, static_cast<const Var<T>*>(nullptr),
                          Stride{model.spec.stem.stride, model.spec.stem.stride}, Padding::same(k, k));
    return ad::relu(apply(ctx, model.stem_bn, s));
  }();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    cost::NameScope scope(model.layout.blocks[i].name);
    y = ghostv2_bottleneck(ctx, y, model.blocks[i]);
  }
  {
    cost::NameScope scope("head");
    y = ad::relu(apply(ctx, model.head_bn,
                       ad::conv2d_pointwise(y, ctx.bind(model.head), static_cast<const Var<T>*>(nullptr))));
    y = ad::global_avg_pool(y);
  }
  {
    cost::NameScope scope("feature");
    Var<T> b = ctx.bind(model.feature_bias);
    y = ad::relu(ad::conv2d_pointwise(y, ctx.bind(model.feature), &b));
  }
  cost::NameScope scope("classifier");
  Var<T> b = ctx.bind(model.classifier_bias);
  return ad::conv2d_pointwise(y, ctx.bind(model.classifier), &b);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& x, Mode mode) {
  return evaluate<T>(mode, [&](const Ctx<T>& ctx) { return forward(ctx, model, ctx.tape().leaf(x)); });
}

namespace {

// Emits summary rows in execution order, tracking the current shape.
class StaticWalker {
 public:
  explicit StaticWalker(ModelSummary& s) : summary_(s) {}

  void push(const std::string& name) { scopes_.push_back(name); }
  void pop() { scopes_.pop_back(); }

  Shape conv(const Shape& x, int kh, int kw, std::int64_t c_out, int stride, bool bias) {
    const Shape y = conv_output_shape(x, kh, kw, c_out, Stride{stride, stride}, Padding::same(kh, kw));
    const auto w = static_cast<std::uint64_t>(kh * kw * x.c() * c_out);
    emit("conv2d", y, static_cast<std::uint64_t>(y.numel()) * kh * kw * x.c(), w + (bias ? c_out : 0));
    return y;
  }
  Shape pointwise(const Shape& x, std::int64_t c_out, bool bias) {
    const Shape y(x.n(), x.h(), x.w(), c_out);
    emit("conv2d_pointwise", y, static_cast<std::uint64_t>(y.numel() * x.c()),
         static_cast<std::uint64_t>(x.c() * c_out + (bias ? c_out : 0)));
    return y;
  }
  Shape depthwise(const Shape& x, int kh, int kw, int stride) {
    const Shape y = conv_output_shape(x, kh, kw, x.c(), Stride{stride, stride}, Padding::same(kh, kw));
    emit("conv2d_depthwise", y, static_cast<std::uint64_t>(y.numel() * kh * kw),
         static_cast<std::uint64_t>(kh * kw * x.c()));
    return y;
  }
  void bn(const Shape& x) { emit("batch_norm", x, 0, static_cast<std::uint64_t>(2 * x.c())); }

  Shape ghost(const Shape& x, std::int64_t c_out) {
    Shape y = pointwise(x, c_out / 2, false);
    bn(y);
    Shape z = depthwise(y, 3, 3, 1);
    bn(z);
    return Shape(x.n(), x.h(), x.w(), c_out);
  }

  void dfc(const Shape& x, std::int64_t c_out, const DfcOptions& o) {
    push("attn");
    Shape z = x;
    if (o.factor > 1) z = pool_output_shape(x, Window{o.factor, o.factor}, Stride{o.factor, o.factor});
    z = pointwise(z, c_out, false);
    bn(z);
    z = depthwise(z, o.k_h, 1, 1);
    bn(z);
    z = depthwise(z, 1, o.k_w, 1);
    bn(z);
    pop();
  }

 private:
  void emit(const char* op, const Shape& out, std::uint64_t macs, std::uint64_t params) {
    std::string scope;
    for (const auto& s : scopes_) scope += (scope.empty() ? "" : ".") + s;
    summary_.rows.push_back(LayerRow{scope, op, out, macs, params});
    summary_.total_macs += macs;
    summary_.total_params += params;
  }

  ModelSummary& summary_;
  std::vector<std::string> scopes_;
};

}  // namespace

ModelSummary summarize(const ModelSpec& spec, std::int64_t batch) {
  const ModelLayout L = resolve_layout(spec);
  ModelSummary s;
  s.name = spec.name;
  s.width = spec.width;
  s.input = Shape(batch, spec.input_size, spec.input_size, spec.in_channels);
  StaticWalker w(s);

  w.push("stem");
  Shape x = w.conv(s.input, spec.stem.kernel, spec.stem.kernel, L.stem_channels, spec.stem.stride, false);
  w.bn(x);
  w.pop();

  for (const BlockLayout& b : L.blocks) {
    const BottleneckConfig& c = b.config;
    w.push(b.name);
    w.push("ghost1");
    if (gates_expanded(c.placement)) w.dfc(x, c.c_expand, c.dfc);
    Shape y = w.ghost(x, c.c_expand);
    w.pop();
    if (c.stride == 2) {
      w.push("dw");
      y = w.depthwise(y, c.dw_kernel, c.dw_kernel, c.stride);
      w.bn(y);
      w.pop();
    }
    if (c.se_ratio > 0.0) {
      w.push("se");
      const std::int64_t r = make_divisible(static_cast<double>(c.c_expand) * c.se_ratio);
      const Shape pooled(y.n(), 1, 1, y.c());
      w.pointwise(w.pointwise(pooled, r, true), c.c_expand, true);
      w.pop();
    }
    w.push("ghost2");
    if (gates_output(c.placement)) w.dfc(y, c.c_out, c.dfc);
    y = w.ghost(y, c.c_out);
    w.pop();
    if (!c.identity_shortcut()) {
      w.push("shortcut");
      Shape r = w.depthwise(x, c.dw_kernel, c.dw_kernel, c.stride);
      w.bn(r);
      r = w.pointwise(r, c.c_out, false);
      w.bn(r);
      w.pop();
    }
    w.pop();
    x = y;
  }

  w.push("head");
  x = w.pointwise(x, L.head_channels, false);
  w.bn(x);
  w.pop();
  const Shape pooled(x.n(), 1, 1, x.c());
  w.push("feature");
  x = w.pointwise(pooled, spec.head.feature_size, true);
  w.pop();
  w.push("classifier");
  w.pointwise(x, spec.head.num_classes, true);
  w.pop();
  return s;
}

template struct Model<float>;
template struct Model<double>;
template Model<float> build_model(const ModelSpec&, std::uint64_t);
template Model<double> build_model(const ModelSpec&, std::uint64_t);
template Var<float> forward(const Ctx<float>&, const Model<float>&, const Var<float>&);
template Var<double> forward(const Ctx<double>&, const Model<double>&, const Var<double>&);
template Tensor<float> forward(const Model<float>&, const Tensor<float>&, Mode);
template Tensor<double> forward(const Model<double>&, const Tensor<double>&, Mode);

}  // namespace ghostv2
