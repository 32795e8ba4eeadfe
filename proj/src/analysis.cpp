#include "ghostv2/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <sstream>

#include "ghostv2/parallel.hpp"

namespace ghostv2 {

// ---------------------------------------------------------------- FLOPs

namespace {

std::vector<std::string> split_scope(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '.')) parts.push_back(item);
  return parts;
}

void add_to(std::vector<GroupTotal>& groups, const std::string& name, const FlopsRow& r) {
  auto it = std::find_if(groups.begin(), groups.end(), [&](const GroupTotal& g) { return g.name == name; });
  if (it == groups.end()) {
    groups.push_back(GroupTotal{name, 0, 0, 0});
    it = groups.end() - 1;
  }
  it->macs += r.macs;
  it->elementwise += r.elementwise;
  it->params += r.params;
}

}  // namespace

FlopsReport make_flops_report(const std::string& subject, const std::vector<cost::OpRecord>& trace) {
  FlopsReport rep;
  rep.subject = subject;
  for (const auto& rec : trace) {
    FlopsRow r{rec.scope, rec.op, rec.output, rec.macs, rec.elementwise, rec.params};
    rep.total_macs += r.macs;
    rep.total_elementwise += r.elementwise;
    rep.total_params += r.params;
    const auto parts = split_scope(r.scope);
    const std::string stage = parts.empty() ? std::string("(root)") : parts[0];
    const std::string block = parts.size() >= 2 && parts[1].size() > 1 && parts[1][0] == 'b' ? parts[0] + "." + parts[1]
                                                                                               : stage;
    add_to(rep.by_stage, stage, r);
    add_to(rep.by_block, block, r);
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

FlopsReport count_flops(const std::string& subject, const std::function<void()>& run) {
  cost::CostScope scope(true);
  run();
  return make_flops_report(subject, scope.trace());
}

template <typename T>
FlopsReport count_flops(const Model<T>& model, std::int64_t batch) {
  const auto s = model.spec.input_size;
  const Tensor<T> x = Tensor<T>::zeros(Shape(batch, s, s, model.spec.in_channels));
  std::ostringstream name;
  name << model.spec.name << " x" << model.spec.width;
  return count_flops(name.str(), [&] { (void)forward(model, x, Mode::eval); });
}

template FlopsReport count_flops(const Model<float>&, std::int64_t);
template FlopsReport count_flops(const Model<double>&, std::int64_t);

std::vector<std::string> reconcile(const FlopsReport& report, const ModelSummary& summary) {
  auto key = [](const std::string& scope, const std::string& op, std::uint64_t macs, std::uint64_t params) {
    return scope + " " + op + " macs=" + std::to_string(macs) + " params=" + std::to_string(params);
  };
  std::map<std::string, long> balance;
  for (const auto& r : report.rows) {
    if (r.macs > 0 || r.params > 0) ++balance[key(r.scope, r.op, r.macs, r.params)];
  }
  for (const auto& r : summary.rows) {
    if (r.macs > 0 || r.params > 0) --balance[key(r.scope, r.op, r.macs, r.params)];
  }
  std::vector<std::string> diffs;
  for (const auto& [k, n] : balance) {
    if (n > 0) diffs.push_back("only traced (" + std::to_string(n) + "x): " + k);
    if (n < 0) diffs.push_back("only static (" + std::to_string(-n) + "x): " + k);
  }
  if (report.total_macs != summary.total_macs) {
    diffs.push_back("total MACs " + std::to_string(report.total_macs) + " vs " + std::to_string(summary.total_macs));
  }
  if (report.total_params != summary.total_params) {
    diffs.push_back("total params " + std::to_string(report.total_params) + " vs " +
                    std::to_string(summary.total_params));
  }
  return diffs;
}

// ---------------------------------------------------------------- attention costs

std::uint64_t AttentionCostTable::macs(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r.macs;
  }
  throw UsageError("attention cost table has no row '" + variant + "'");
}

namespace {

void check_dims(std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w, int factor) {
  if (H < 1 || W < 1 || C < 1 || k_h < 1 || k_w < 1 || factor < 1) {
    throw ParameterError("compare_attention_costs: dimensions, kernels and factor must be positive");
  }
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

AttentionCostTable compare_attention_costs(std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w,
                                           int factor) {
  check_dims(H, W, C, k_h, k_w, factor);
  const auto u = [](std::int64_t v) { return static_cast<std::uint64_t>(v); };
  const std::int64_t Hp = ceil_div(H, factor), Wp = ceil_div(W, factor);
  AttentionCostTable t{H, W, C, k_h, k_w, factor, {}};
  t.rows.push_back({"full", "H^2 W^2 C", u(H * H * W * W * C)});
  t.rows.push_back({"decoupled", "(H^2 W + H W^2) C", u((H * H * W + H * W * W) * C)});
  t.rows.push_back({"conv", "(K_H + K_W) H W C", u((k_h + k_w) * H * W * C)});
  t.rows.push_back({"conv_downsampled", "(K_H + K_W) ceil(H/f) ceil(W/f) C", u((k_h + k_w) * Hp * Wp * C)});
  return t;
}

AttentionCostTable measure_attention_costs(std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w,
                                           int factor, std::int64_t max_full_weights) {
  check_dims(H, W, C, k_h, k_w, factor);
  AttentionCostTable t = compare_attention_costs(H, W, C, k_h, k_w, factor);
  Rng rng(0x5EED);
  const Tensor<float> z = Tensor<float>::uniform(Shape(1, H, W, C), -1, 1, rng);
  const Tensor<float> kv = Tensor<float>::uniform(Shape(k_h, 1, 1, C), -1, 1, rng);
  const Tensor<float> kh = Tensor<float>::uniform(Shape(1, k_w, 1, C), -1, 1, rng);
  auto counted = [](const std::function<void()>& run) {
    cost::CostScope scope;
    run();
    return scope.macs();
  };
  for (auto& row : t.rows) {
    if (row.variant == "full") {
      if (H * W * H * W * C > max_full_weights) {
        row.variant += " (skipped)";
        row.macs = 0;
        continue;
      }
      Tensor<float> f = Tensor<float>::uniform(Shape(H * W, H, W, C), -1, 1, rng);
      row.macs = counted([&] { (void)kernels::full_fc_attention(z, f); });
    } else if (row.variant == "decoupled") {
      Tensor<float> fv = Tensor<float>::uniform(Shape(H, H, W, C), -1, 1, rng);
      Tensor<float> fh = Tensor<float>::uniform(Shape(W, W, H, C), -1, 1, rng);
      row.macs = counted([&] { (void)kernels::dfc_horizontal(kernels::dfc_vertical(z, fv), fh); });
    } else if (row.variant == "conv") {
      row.macs = counted([&] { (void)dfc_attention_conv(z, kv, kh); });
    } else {
      const auto pooled = kernels::pool2d(z, PoolKind::avg, Window{factor, factor}, Stride{factor, factor}).output;
      row.macs = counted([&] { (void)dfc_attention_conv(pooled, kv, kh); });
    }
  }
  return t;
}

// ---------------------------------------------------------------- receptive fields

std::int64_t RfMask::count() const { return std::count(cells.begin(), cells.end(), std::uint8_t{1}); }

namespace {

struct ProbeRun {
  Tensor<double> input;
  RfMask mask;
};

void check_probe(const Shape& out, std::int64_t oh, std::int64_t ow, std::int64_t oc) {
  if (oh < 0 || oh >= out.h() || ow < 0 || ow >= out.w() || oc < 0 || oc >= out.c()) {
    throw ParameterError("receptive_field_probe: position (" + std::to_string(oh) + "," + std::to_string(ow) + "," +
                         std::to_string(oc) + ") outside output " + out.str());
  }
}

RfMask empty_mask(const Shape& input, std::int64_t oh, std::int64_t ow, std::int64_t oc, int samples,
                  const char* method) {
  RfMask m;
  m.height = input.h();
  m.width = input.w();
  m.out_h = oh;
  m.out_w = ow;
  m.out_c = oc;
  m.samples = samples;
  m.method = method;
  m.cells.assign(static_cast<std::size_t>(input.h() * input.w()), 0);
  return m;
}

Tensor<double> probe_input(const Shape& input, const RfProbeOptions& o, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<double>::uniform(Shape(o.samples, input.h(), input.w(), input.c()), -1.0, 1.0, rng);
}

RfMask jacobian_mask(const ProbeLayer& layer, const Shape& input, std::int64_t oh, std::int64_t ow, std::int64_t oc,
                     const RfProbeOptions& o, std::uint64_t seed) {
  Tape<double> tape;
  Binder<double> bind(tape);
  const Ctx<double> ctx{bind, o.mode, nullptr};
  const Var<double> x = tape.leaf(probe_input(input, o, seed), "x");
  const Var<double> y = layer(ctx, x);
  const Shape& ys = y.shape();
  check_probe(ys, oh, ow, oc);
  if (ys.n() != o.samples) throw ShapeError("receptive_field_probe: layer changed the batch size");
  std::vector<double> w(static_cast<std::size_t>(ys.numel()), 0.0);
  for (std::int64_t n = 0; n < ys.n(); ++n) w[static_cast<std::size_t>(((n * ys.h() + oh) * ys.w() + ow) * ys.c() + oc)] = 1.0;
  const Var<double> loss = ad::weighted_sum(y, Tensor<double>(ys, std::move(w)));
  const Tensor<double> g = tape.backward(loss).of(x);
  RfMask m = empty_mask(input, oh, ow, oc, o.samples, "jacobian");
  const Shape& gs = g.shape();
  for (std::int64_t n = 0; n < gs.n(); ++n)
    for (std::int64_t h = 0; h < gs.h(); ++h)
      for (std::int64_t ww = 0; ww < gs.w(); ++ww)
        for (std::int64_t c = 0; c < gs.c(); ++c) {
          if (std::abs(g(n, h, ww, c)) > m.threshold) m.cells[static_cast<std::size_t>(h * gs.w() + ww)] = 1;
        }
  return m;
}

}  // namespace

RfMask receptive_field_probe(const ProbeLayer& layer, const Shape& input, std::int64_t out_h, std::int64_t out_w,
                             std::int64_t out_c, const RfProbeOptions& options) {
  if (options.samples < 1) throw ParameterError("receptive_field_probe: samples must be >= 1");
  RfMask m = jacobian_mask(layer, input, out_h, out_w, out_c, options, options.seed);
  // An all-zero row is most likely an accidental cancellation; draw new inputs once.
  if (m.count() == 0) m = jacobian_mask(layer, input, out_h, out_w, out_c, options, options.seed ^ 0x9E3779B9ULL);
  return m;
}

RfMask receptive_field_fd(const ProbeLayer& layer, const Shape& input, std::int64_t out_h, std::int64_t out_w,
                          std::int64_t out_c, const RfProbeOptions& options, double eps) {
  const Tensor<double> x = probe_input(input, options, options.seed);
  auto run = [&](const Tensor<double>& in) {
    return evaluate<double>(options.mode, [&](const Ctx<double>& ctx) { return layer(ctx, ctx.tape().leaf(in, "x")); });
  };
  const Tensor<double> base = run(x);
  check_probe(base.shape(), out_h, out_w, out_c);
  RfMask m = empty_mask(input, out_h, out_w, out_c, options.samples, "finite-difference");
  const Shape& xs = x.shape();
  const auto values = x.to_vector();
  for (std::int64_t h = 0; h < xs.h(); ++h)
    for (std::int64_t w = 0; w < xs.w(); ++w)
      for (std::int64_t c = 0; c < xs.c(); ++c) {
        // Samples do not interact in eval mode, so one element per sample is
        // perturbed at once.
        std::vector<double> plus = values, minus = values;
        for (std::int64_t n = 0; n < xs.n(); ++n) {
          plus[x.offset(n, h, w, c)] += eps;
          minus[x.offset(n, h, w, c)] -= eps;
        }
        const Tensor<double> yp = run(Tensor<double>(xs, std::move(plus)));
        const Tensor<double> ym = run(Tensor<double>(xs, std::move(minus)));
        for (std::int64_t n = 0; n < xs.n(); ++n) {
          if (yp(n, out_h, out_w, out_c) - ym(n, out_h, out_w, out_c) != 0.0) {
            m.cells[static_cast<std::size_t>(h * xs.w() + w)] = 1;
          }
        }
      }
  return m;
}

RfMask rectangle_mask(std::int64_t height, std::int64_t width, std::int64_t h0, std::int64_t h1, std::int64_t w0,
                      std::int64_t w1) {
  RfMask m;
  m.height = height;
  m.width = width;
  m.method = "predicted";
  m.cells.assign(static_cast<std::size_t>(height * width), 0);
  for (std::int64_t h = std::max<std::int64_t>(0, h0); h <= std::min(h1, height - 1); ++h)
    for (std::int64_t w = std::max<std::int64_t>(0, w0); w <= std::min(w1, width - 1); ++w)
      m.cells[static_cast<std::size_t>(h * width + w)] = 1;
  return m;
}

std::string to_pgm(const RfMask& mask, int scale) {
  if (scale < 1) throw ParameterError("to_pgm: scale must be >= 1");
  std::ostringstream out;
  out << "P5\n" << mask.width * scale << " " << mask.height * scale << "\n255\n";
  for (std::int64_t h = 0; h < mask.height * scale; ++h)
    for (std::int64_t w = 0; w < mask.width * scale; ++w) out.put(mask.at(h / scale, w / scale) ? '\xff' : '\0');
  return out.str();
}

std::string render_ascii(const RfMask& mask) {
  std::string s;
  for (std::int64_t h = 0; h < mask.height; ++h) {
    for (std::int64_t w = 0; w < mask.width; ++w) {
      const bool center = h == mask.out_h && w == mask.out_w;
      s += mask.at(h, w) ? (center ? '@' : '#') : (center ? 'o' : '.');
    }
    s += '\n';
  }
  return s;
}

// ---------------------------------------------------------------- benchmarks

BenchReport bench(const std::string& target, const Shape& input, const std::string& dtype,
                  const std::function<void()>& run, const BenchOptions& options) {
  if (options.iters < 1) throw ParameterError("bench: iters must be >= 1");
  if (options.warmup < 0) throw ParameterError("bench: warmup must be >= 0");
  const int previous = num_threads();
  if (options.threads > 0) set_num_threads(options.threads);
  BenchReport r;
  r.target = target;
  r.input = input;
  r.dtype = dtype;
  r.threads = num_threads();
  r.iters = options.iters;
  r.warmup = options.warmup;
  {
    cost::CostScope scope;
    run();
    r.macs = scope.macs();
  }
  for (int i = 0; i < options.warmup; ++i) run();
  std::vector<double> ms;
  for (int i = 0; i < options.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  if (options.threads > 0) set_num_threads(previous);
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  r.min_ms = ms.front();
  r.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  r.p95_ms = ms[static_cast<std::size_t>(std::max<double>(0.0, std::ceil(0.95 * static_cast<double>(n)) - 1))];
  double sum = 0;
  for (double v : ms) sum += v;
  r.mean_ms = sum / static_cast<double>(n);
  r.macs_per_second = r.median_ms > 0 ? static_cast<double>(r.macs) / (r.median_ms * 1e-3) : 0.0;
  return r;
}

// ---------------------------------------------------------------- gradient suite

bool GradSuiteResult::passed() const {
  return std::all_of(reports.begin(), reports.end(), [](const GradCheckReport& r) { return r.passed; });
}

std::vector<std::string> GradSuiteResult::primitives() const {
  std::vector<std::string> out;
  for (const auto& r : reports) {
    const std::string family = r.name.substr(0, r.name.find(' '));
    if (std::find(out.begin(), out.end(), family) == out.end()) out.push_back(family);
  }
  return out;
}

namespace {

using D = double;
using VarD = Var<D>;
using TensorD = Tensor<D>;

struct Case {
  std::string name;  // "<family> <shape>"
  std::vector<TensorD> inputs;
  std::vector<std::string> names;
  GradProgram fn;
};

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  TensorD rand(const Shape& s, double lo = -1.0, double hi = 1.0) { return TensorD::uniform(s, lo, hi, rng_); }
  Rng& rng() { return rng_; }

  void add(const std::string& family, const Shape& shape, std::vector<TensorD> inputs, std::vector<std::string> names,
           GradProgram fn, const std::string& suffix = "") {
    cases_.push_back(Case{family + " " + shape.str() + suffix, std::move(inputs), std::move(names), std::move(fn)});
  }
  std::vector<Case>& cases() { return cases_; }

 private:
  Rng rng_;
  std::vector<Case> cases_;
};

// Trainable tensors of a parameter struct, in visit order.
template <typename P>
void append_trainable(P& p, std::vector<TensorD>& inputs, std::vector<std::string>& names) {
  p.visit("p", [&](const std::string& name, TensorD& t, bool trainable) {
    if (!trainable) return;
    inputs.push_back(t);
    names.push_back(name);
  });
}

// Copy of p whose trainable tensors are the given leaves (starting at first).
template <typename P>
P rebind(const P& base, Binder<D>& bind, const std::vector<VarD>& leaves, std::size_t first) {
  P p = base;
  std::size_t i = first;
  p.visit("p", [&](const std::string&, TensorD& t, bool trainable) {
    if (!trainable) return;
    t = leaves.at(i).value();
    bind.adopt(leaves[i]);
    ++i;
  });
  return p;
}

// Non-trivial normalisation parameters and statistics.
template <typename P>
void randomize_norms(P& p, Rng& rng) {
  p.visit("p", [&](const std::string& name, TensorD& t, bool) {
    auto ends = [&](const std::string& suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends("gamma") || ends("running_var")) t = TensorD::uniform(t.shape(), 0.5, 1.5, rng);
    if (ends("beta") || ends("running_mean") || ends("bias")) t = TensorD::uniform(t.shape(), -0.5, 0.5, rng);
  });
}

template <typename P, typename F>
void add_block(Suite& s, const std::string& family, const Shape& xs, P params, Mode mode, F&& body,
               const std::string& suffix = "") {
  randomize_norms(params, s.rng());
  std::vector<TensorD> inputs{s.rand(xs)};
  std::vector<std::string> names{"x"};
  append_trainable(params, inputs, names);
  s.add(family, xs, std::move(inputs), std::move(names),
        [params, mode, body](Tape<D>& tape, const std::vector<VarD>& in) {
          Binder<D> bind(tape);
          const P p = rebind(params, bind, in, 1);
          const Ctx<D> ctx{bind, mode, nullptr};
          return body(ctx, in[0], p);
        },
        suffix);
}

void primitive_cases(Suite& s) {
  // Convolutions.
  {
    struct Cfg { Shape x; int kh, kw, groups, c_out; Stride st; bool bias; };
    for (const Cfg& c : {Cfg{Shape(1, 5, 5, 2), 3, 3, 1, 3, {1, 1}, true}, Cfg{Shape(2, 6, 6, 4), 3, 3, 2, 4, {2, 2}, false},
                         Cfg{Shape(1, 7, 5, 3), 2, 3, 1, 2, {2, 1}, true}}) {
      std::vector<TensorD> in{s.rand(c.x), s.rand(Shape(c.kh, c.kw, c.x.c() / c.groups, c.c_out))};
      std::vector<std::string> names{"x", "weight"};
      if (c.bias) {
        in.push_back(s.rand(Shape(1, 1, 1, c.c_out)));
        names.push_back("bias");
      }
      s.add("conv2d", c.x, in, names, [c](Tape<D>&, const std::vector<VarD>& v) {
        return ad::conv2d(v[0], v[1], c.groups, c.bias ? &v[2] : static_cast<const VarD*>(nullptr), c.st,
                          Padding::same(c.kh, c.kw));
      });
    }
  }
  {
    struct Cfg { Shape x; int c_out; bool bias; };
    for (const Cfg& c : {Cfg{Shape(1, 4, 4, 3), 5, true}, Cfg{Shape(2, 3, 5, 4), 2, false}, Cfg{Shape(3, 1, 1, 6), 3, true}}) {
      std::vector<TensorD> in{s.rand(c.x), s.rand(Shape(1, 1, c.x.c(), c.c_out))};
      std::vector<std::string> names{"x", "weight"};
      if (c.bias) {
        in.push_back(s.rand(Shape(1, 1, 1, c.c_out)));
        names.push_back("bias");
      }
      s.add("conv2d_pointwise", c.x, in, names, [c](Tape<D>&, const std::vector<VarD>& v) {
        return ad::conv2d_pointwise(v[0], v[1], c.bias ? &v[2] : static_cast<const VarD*>(nullptr));
      });
    }
  }
  {
    struct Cfg { Shape x; int kh, kw; Stride st; };
    for (const Cfg& c : {Cfg{Shape(1, 5, 5, 3), 3, 3, {1, 1}}, Cfg{Shape(2, 6, 6, 2), 3, 3, {2, 2}},
                         Cfg{Shape(1, 7, 6, 4), 5, 1, {1, 2}}}) {
      s.add("conv2d_depthwise", c.x, {s.rand(c.x), s.rand(Shape(c.kh, c.kw, 1, c.x.c()))}, {"x", "weight"},
            [c](Tape<D>&, const std::vector<VarD>& v) {
              return ad::conv2d_depthwise(v[0], v[1], c.st, Padding::same(c.kh, c.kw));
            });
    }
  }
  // Normalisation: train mode couples the batch; eval mode uses fixed statistics.
  for (const Mode mode : {Mode::train, Mode::eval}) {
    for (const Shape& xs : {Shape(2, 3, 3, 4), Shape(4, 2, 2, 3), Shape(1, 5, 4, 2)}) {
      const Shape cs(1, 1, 1, xs.c());
      const TensorD mean = s.rand(cs, -0.5, 0.5), var = s.rand(cs, 0.5, 1.5);
      s.add(mode == Mode::train ? "batch_norm_train" : "batch_norm_eval", xs,
            {s.rand(xs), s.rand(cs, 0.5, 1.5), s.rand(cs, -0.5, 0.5)}, {"x", "gamma", "beta"},
            [mode, mean, var](Tape<D>& tape, const std::vector<VarD>& v) {
              Binder<D> bind(tape);
              const Ctx<D> ctx{bind, mode, nullptr};
              return ad::batch_norm(ctx, v[0], v[1], v[2], mean, var, 1e-5);
            });
    }
  }
  // Pointwise nonlinearities, sampled away from nothing in particular: kinks
  // are hit with probability zero.
  const Shape ew[] = {Shape(1, 3, 3, 2), Shape(2, 4, 4, 3), Shape(1, 1, 5, 7)};
  for (const Shape& xs : ew) {
    s.add("relu", xs, {s.rand(xs)}, {"x"}, [](Tape<D>&, const std::vector<VarD>& v) { return ad::relu(v[0]); });
    s.add("sigmoid", xs, {s.rand(xs, -4, 4)}, {"x"}, [](Tape<D>&, const std::vector<VarD>& v) { return ad::sigmoid(v[0]); });
    s.add("hard_sigmoid", xs, {s.rand(xs, -4, 4)}, {"x"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::hard_sigmoid(v[0]); });
    s.add("clip01", xs, {s.rand(xs, -0.5, 1.5)}, {"x"}, [](Tape<D>&, const std::vector<VarD>& v) { return ad::clip01(v[0]); });
    s.add("add", xs, {s.rand(xs), s.rand(xs)}, {"a", "b"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::add(v[0], v[1]); });
    s.add("mul", xs, {s.rand(xs), s.rand(xs)}, {"a", "b"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::mul(v[0], v[1]); });
    s.add("mul_channels", xs, {s.rand(xs), s.rand(Shape(xs.n(), 1, 1, xs.c()))}, {"x", "scale"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::mul_channels(v[0], v[1]); });
    const Shape other(xs.n(), xs.h(), xs.w(), xs.c() + 1);
    s.add("concat_channels", xs, {s.rand(xs), s.rand(other)}, {"a", "b"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::concat_channels(v[0], v[1]); });
    s.add("slice_channels", other, {s.rand(other)}, {"x"}, [c = xs.c()](Tape<D>&, const std::vector<VarD>& v) {
      return ad::slice_channels(v[0], 1, c);
    });
    s.add("global_avg_pool", xs, {s.rand(xs)}, {"x"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::global_avg_pool(v[0]); });
    s.add("sum", xs, {s.rand(xs)}, {"x"}, [](Tape<D>&, const std::vector<VarD>& v) { return ad::sum(v[0]); });
    s.add("weighted_sum", xs, {s.rand(xs)}, {"x"}, [w = s.rand(xs)](Tape<D>&, const std::vector<VarD>& v) {
      return ad::weighted_sum(v[0], w);
    });
    s.add("pick", xs, {s.rand(xs)}, {"x"}, [i = static_cast<std::int64_t>(s.rng().below(xs.numel()))](
                                             Tape<D>&, const std::vector<VarD>& v) { return ad::pick(v[0], i); });
  }
  // Pooling and resampling.
  {
    struct Cfg { Shape x; Window w; Stride st; };
    for (const Cfg& c : {Cfg{Shape(1, 4, 4, 2), {2, 2}, {2, 2}}, Cfg{Shape(2, 5, 5, 3), {2, 2}, {2, 2}},
                         Cfg{Shape(1, 4, 5, 2), {3, 3}, {1, 1}}}) {
      for (const PoolKind kind : {PoolKind::avg, PoolKind::max}) {
        s.add(kind == PoolKind::avg ? "pool_avg" : "pool_max", c.x, {s.rand(c.x)}, {"x"},
              [c, kind](Tape<D>&, const std::vector<VarD>& v) { return ad::pool2d(v[0], kind, c.w, c.st); });
      }
    }
  }
  {
    struct Cfg { Shape x; std::int64_t oh, ow; };
    for (const Cfg& c : {Cfg{Shape(1, 3, 3, 2), 5, 6}, Cfg{Shape(2, 4, 4, 1), 8, 8}, Cfg{Shape(1, 5, 3, 2), 2, 7}}) {
      for (const ResizeKind kind : {ResizeKind::bilinear, ResizeKind::bicubic}) {
        s.add(kind == ResizeKind::bilinear ? "resize_bilinear" : "resize_bicubic", c.x, {s.rand(c.x)}, {"x"},
              [c, kind](Tape<D>&, const std::vector<VarD>& v) { return ad::resize(v[0], kind, c.oh, c.ow); });
      }
    }
  }
  // Attention forms.
  for (const Shape& zs : {Shape(1, 3, 3, 2), Shape(2, 2, 4, 1), Shape(1, 4, 2, 3)}) {
    const std::int64_t H = zs.h(), W = zs.w(), C = zs.c();
    s.add("full_fc_attention", zs, {s.rand(zs), s.rand(Shape(H * W, H, W, C))}, {"z", "f"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::full_fc_attention(v[0], v[1]); });
    s.add("dfc_vertical", zs, {s.rand(zs), s.rand(Shape(H, H, W, C))}, {"z", "fv"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::dfc_vertical(v[0], v[1]); });
    s.add("dfc_horizontal", zs, {s.rand(zs), s.rand(Shape(W, W, H, C))}, {"z", "fh"},
          [](Tape<D>&, const std::vector<VarD>& v) { return ad::dfc_horizontal(v[0], v[1]); });
  }
  {
    struct Cfg { Shape z; int kh, kw; };
    for (const Cfg& c : {Cfg{Shape(1, 5, 5, 2), 3, 3}, Cfg{Shape(1, 4, 6, 3), 5, 3}, Cfg{Shape(2, 3, 3, 1), 5, 5}}) {
      s.add("dfc_attention_conv", c.z,
            {s.rand(c.z), s.rand(Shape(c.kh, 1, 1, c.z.c())), s.rand(Shape(1, c.kw, 1, c.z.c()))}, {"z", "k_v", "k_h"},
            [](Tape<D>&, const std::vector<VarD>& v) { return dfc_attention_conv(v[0], v[1], v[2]); });
    }
  }
  for (const Shape& ls : {Shape(3, 1, 1, 4), Shape(2, 1, 1, 5), Shape(5, 1, 1, 2)}) {
    std::vector<int> labels;
    for (std::int64_t n = 0; n < ls.n(); ++n) labels.push_back(static_cast<int>(s.rng().below(ls.c())));
    s.add("softmax_cross_entropy", ls, {s.rand(ls, -2, 2)}, {"logits"},
          [labels](Tape<D>&, const std::vector<VarD>& v) { return ad::softmax_cross_entropy(v[0], labels); });
  }
}

void block_cases(Suite& s) {
  {
    struct Cfg { Shape x; std::int64_t c_out; bool relu; Mode mode; };
    for (const Cfg& c : {Cfg{Shape(1, 5, 5, 3), 4, true, Mode::eval}, Cfg{Shape(2, 4, 4, 4), 6, false, Mode::train},
                         Cfg{Shape(1, 6, 3, 2), 8, true, Mode::train}}) {
      add_block(s, "ghost_module", c.x, GhostModuleParams<D>::init(c.x.c(), c.c_out, c.relu, s.rng()), c.mode,
                [](const Ctx<D>& ctx, const VarD& x, const GhostModuleParams<D>& p) { return ghost_module(ctx, x, p); });
    }
  }
  {
    struct Cfg { Shape x; std::int64_t c_out; int k; PoolKind pool; ResizeKind up; Scaling sc; ScalingPosition pos; };
    const Cfg cfgs[] = {
        {Shape(1, 6, 6, 3), 4, 3, PoolKind::max, ResizeKind::bilinear, Scaling::sigmoid, ScalingPosition::before_upsample},
        {Shape(2, 4, 6, 2), 2, 3, PoolKind::avg, ResizeKind::bicubic, Scaling::hard_sigmoid, ScalingPosition::after_upsample},
        {Shape(1, 5, 7, 2), 4, 5, PoolKind::avg, ResizeKind::bilinear, Scaling::sigmoid, ScalingPosition::after_upsample}};
    for (const Cfg& c : cfgs) {
      DfcOptions o;
      o.k_h = o.k_w = c.k;
      o.pool = c.pool;
      o.upsample = c.up;
      o.scaling = c.sc;
      o.position = c.pos;
      add_block(s, "dfc_branch", c.x, DfcParams<D>::init(c.x.c(), c.c_out, o, s.rng()), Mode::train,
                [](const Ctx<D>& ctx, const VarD& x, const DfcParams<D>& p) { return dfc_branch(ctx, x, p); });
    }
  }
  {
    struct Both {
      GhostModuleParams<D> g;
      DfcParams<D> a;
      void visit(const std::string& prefix, const ParamVisitor<D>& f) {
        g.visit(prefix + ".ghost", f);
        a.visit(prefix + ".attn", f);
      }
    };
    for (const Shape& xs : {Shape(1, 6, 6, 4), Shape(2, 4, 4, 2), Shape(1, 5, 3, 3)}) {
      DfcOptions o;
      o.k_h = o.k_w = 3;
      Both b{GhostModuleParams<D>::init(xs.c(), 4, true, s.rng()), DfcParams<D>::init(xs.c(), 4, o, s.rng())};
      add_block(s, "ghost_module_attn", xs, b, Mode::train,
                [](const Ctx<D>& ctx, const VarD& x, const Both& p) { return ghost_module_attn(ctx, x, p.g, p.a); });
    }
  }
  for (const Shape& xs : {Shape(1, 3, 3, 8), Shape(2, 2, 2, 4), Shape(1, 4, 2, 12)}) {
    add_block(s, "squeeze_excite", xs, SqueezeExciteParams<D>::init(xs.c(), 0.25, s.rng()), Mode::train,
              [](const Ctx<D>& ctx, const VarD& x, const SqueezeExciteParams<D>& p) { return squeeze_excite(ctx, x, p); });
  }
  {
    struct Cfg { Shape x; std::int64_t c_expand, c_out; int stride; double se; int k; };
    const Cfg cfgs[] = {{Shape(1, 8, 8, 16), 32, 16, 1, 0.0, 5},
                        {Shape(2, 6, 6, 8), 16, 12, 2, 0.25, 3},
                        {Shape(1, 5, 7, 12), 24, 8, 1, 0.0, 3}};
    for (const Placement pl : {Placement::none, Placement::expanded, Placement::output, Placement::both}) {
      for (const Cfg& c : cfgs) {
        BottleneckConfig cfg;
        cfg.c_in = c.x.c();
        cfg.c_expand = c.c_expand;
        cfg.c_out = c.c_out;
        cfg.stride = c.stride;
        cfg.se_ratio = c.se;
        cfg.placement = pl;
        cfg.dfc.k_h = cfg.dfc.k_w = c.k;
        // Eval mode: with a projection shortcut, train-mode normalisation
        // cancels the first shortcut shift exactly, leaving a zero gradient
        // whose difference quotient is pure rounding noise.
        const auto params = BottleneckParams<D>::init(cfg, s.rng());
        const auto body = [](const Ctx<D>& ctx, const VarD& x, const BottleneckParams<D>& p) {
          return ghostv2_bottleneck(ctx, x, p);
        };
        add_block(s, "bottleneck_" + to_string(pl), c.x, params, Mode::eval, body);
        if (cfg.identity_shortcut()) {
          add_block(s, "bottleneck_" + to_string(pl), c.x, params, Mode::train, body, " train");
        }
      }
    }
  }
}

}  // namespace

GradSuiteResult gradient_suite(const GradSuiteOptions& options) {
  Suite suite(options.seed);
  primitive_cases(suite);
  if (options.include_blocks) block_cases(suite);
  GradSuiteResult result;
  GradCheckOptions go;
  go.eps = options.eps;
  go.tolerance = options.tolerance;
  std::uint64_t k = 0;
  for (auto& c : suite.cases()) {
    ++k;
    if (!options.filter.empty() && c.name.find(options.filter) == std::string::npos) continue;
    go.seed = options.seed * 1000 + k;
    GradCheckReport r = grad_check(c.fn, c.inputs, go, c.names);
    r.name = c.name;
    result.reports.push_back(std::move(r));
  }
  return result;
}

}  // namespace ghostv2
