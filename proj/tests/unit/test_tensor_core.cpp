#include <doctest.h>

#include <cmath>
#include <limits>

#include "generators.hpp"
#include "ghostv2/grad_check.hpp"
#include "ghostv2/layers.hpp"
#include "ghostv2/parallel.hpp"

using namespace ghostv2;
using TD = Tensor<double>;

namespace {

const TD* const kNoBias = nullptr;

TD t(const Shape& s, std::vector<double> v) { return TD(s, std::move(v)); }

// Straight-line grouped correlation with zero padding.
TD conv_oracle(const TD& x, const TD& k, int groups, Stride st, Padding p) {
  const Shape& xs = x.shape();
  const auto kh = k.shape()[0], kw = k.shape()[1], cpg = k.shape()[2], co = k.shape()[3];
  const auto oh = (xs.h() + p.top + p.bottom - kh) / st.h + 1;
  const auto ow = (xs.w() + p.left + p.right - kw) / st.w + 1;
  const auto opg = co / groups;
  std::vector<double> out;
  for (std::int64_t n = 0; n < xs.n(); ++n)
    for (std::int64_t h = 0; h < oh; ++h)
      for (std::int64_t w = 0; w < ow; ++w)
        for (std::int64_t o = 0; o < co; ++o) {
          double acc = 0;
          const auto g = o / opg;
          for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j)
              for (std::int64_t c = 0; c < cpg; ++c) {
                const auto y = h * st.h + i - p.top, xx = w * st.w + j - p.left;
                if (y < 0 || y >= xs.h() || xx < 0 || xx >= xs.w()) continue;
                acc += x(n, y, xx, g * cpg + c) * k(i, j, c, o);
              }
          out.push_back(acc);
        }
  return TD(Shape(xs.n(), oh, ow, co), out);
}

// Half-pixel bilinear sample of one channel, written independently of the kernel.
double bilinear_at(const TD& x, std::int64_t oh, std::int64_t ow, std::int64_t H2, std::int64_t W2, std::int64_t c) {
  const auto H = x.shape().h(), W = x.shape().w();
  auto src = [](std::int64_t o, std::int64_t in, std::int64_t out) {
    return std::max(0.0, (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5);
  };
  const double sy = src(oh, H, H2), sx = src(ow, W, W2);
  const auto y0 = static_cast<std::int64_t>(std::floor(sy)), x0 = static_cast<std::int64_t>(std::floor(sx));
  const auto y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * x(0, y0, x0, c) + fx * x(0, y0, x1, c)) +
         fy * ((1 - fx) * x(0, y1, x0, c) + fx * x(0, y1, x1, c));
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Shape(1, 0, 2, 2), ShapeError);
  CHECK_THROWS_AS(TD(Shape(1, 2, 2, 1), {1.0, 2.0}), ShapeError);
  const TD a = TD::full(Shape(2, 3, 4, 5), 1.5);
  CHECK(a.numel() == 120);
  CHECK(a.data().size() == 120);
  CHECK(a(1, 2, 3, 4) == 1.5);
  const auto b = a.cast<float>();
  CHECK(b.dtype() == DType::f32);
  CHECK(b.shape() == a.shape());
}

TEST_CASE("same padding puts the odd cell bottom/right") {
  const Padding p3 = Padding::same(3, 3);
  CHECK(p3.top == 1);
  CHECK(p3.bottom == 1);
  const Padding p2 = Padding::same(2, 4);
  CHECK(p2.top == 0);
  CHECK(p2.bottom == 1);
  CHECK(p2.left == 1);
  CHECK(p2.right == 2);
}

TEST_CASE("conv2d_pointwise examples") {
  Rng r(1);
  const TD x = gen::tensor(r, Shape(2, 3, 3, 1));
  const ConvKernel<double> id(TD::full(Shape(1, 1, 1, 1), 1.0));
  CHECK(bitwise_equal(kernels::conv2d_pointwise(x, id, kNoBias), x));

  const TD x2 = gen::tensor(r, Shape(1, 3, 2, 4));
  const ConvKernel<double> zero(TD::zeros(Shape(1, 1, 4, 3)));
  const TD y0 = kernels::conv2d_pointwise(x2, zero, kNoBias);
  CHECK(y0.shape() == Shape(1, 3, 2, 3));
  for (double v : y0.data()) CHECK(v == 0.0);

  // Per-pixel matrix-vector products.
  const TD x3 = gen::tensor(r, Shape(1, 2, 2, 2));
  const TD k3 = gen::tensor(r, Shape(1, 1, 2, 3));
  const TD b3 = gen::tensor(r, Shape(1, 1, 1, 3));
  const TD y3 = kernels::conv2d_pointwise(x3, ConvKernel<double>(k3), &b3);
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int o = 0; o < 3; ++o) {
        const double want = x3(0, h, w, 0) * k3(0, 0, 0, o) + x3(0, h, w, 1) * k3(0, 0, 1, o) + b3[o];
        CHECK(y3(0, h, w, o) == doctest::Approx(want).epsilon(1e-14));
      }

  try {
    (void)kernels::conv2d_pointwise(x3, ConvKernel<double>(gen::tensor(r, Shape(1, 1, 5, 2))), kNoBias);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(1,1,5,2)") != std::string::npos);
    CHECK(msg.find("(1,2,2,2)") != std::string::npos);
  }
}

TEST_CASE("pointwise equals general conv with a 1x1 kernel") {
  gen::for_all(30, 11, [](Rng& r) {
    const Shape xs = gen::shape(r, 3, 6, 6);
    const TD x = gen::tensor(r, xs);
    const ConvKernel<double> k(gen::tensor(r, Shape(1, 1, xs.c(), gen::between(r, 1, 6))));
    const TD bias = gen::tensor(r, Shape(1, 1, 1, k.c_out()));
    const TD a = kernels::conv2d_pointwise(x, k, &bias);
    const TD b = kernels::conv2d(x, k, &bias, Stride{}, Padding{});
    CHECK(bitwise_equal(a, b));
  });
}

TEST_CASE("general conv matches a brute-force oracle") {
  gen::for_all(40, 12, [](Rng& r) {
    const int groups = static_cast<int>(gen::between(r, 1, 3));
    const auto cpg = gen::between(r, 1, 3);
    const auto opg = gen::between(r, 1, 2);
    const Shape xs(gen::between(r, 1, 2), gen::between(r, 3, 7), gen::between(r, 3, 7), groups * cpg);
    const int kh = static_cast<int>(gen::between(r, 1, 3)), kw = static_cast<int>(gen::between(r, 1, 3));
    const Stride st{static_cast<int>(gen::between(r, 1, 2)), static_cast<int>(gen::between(r, 1, 2))};
    const TD x = gen::tensor(r, xs);
    const TD k = gen::tensor(r, Shape(kh, kw, cpg, groups * opg));
    const TD y = kernels::conv2d(x, ConvKernel<double>(k, groups), kNoBias, st, Padding::same(kh, kw));
    CHECK(gen::max_abs(y, conv_oracle(x, k, groups, st, Padding::same(kh, kw))) < 1e-12);
  });
}

TEST_CASE("conv2d_depthwise examples") {
  Rng r(2);
  const TD x = gen::tensor(r, Shape(2, 5, 4, 3));
  std::vector<double> delta(27, 0.0);
  for (int c = 0; c < 3; ++c) delta[(1 * 3 + 1) * 3 + c] = 1.0;
  const auto dk = ConvKernel<double>::depthwise(TD(Shape(3, 3, 1, 3), delta));
  CHECK(bitwise_equal(kernels::conv2d_depthwise(x, dk, Stride{}, Padding::same(3, 3)), x));

  const TD row = t(Shape(1, 1, 3, 1), {1, 2, 3});
  const auto ones = ConvKernel<double>::depthwise(TD::full(Shape(1, 3, 1, 1), 1.0));
  const TD y = kernels::conv2d_depthwise(row, ones, Stride{}, Padding::same(1, 3));
  CHECK(y.to_vector() == std::vector<double>{3, 6, 5});

  const auto k3 = ConvKernel<double>::depthwise(gen::tensor(r, Shape(3, 3, 1, 2)));
  CHECK(kernels::conv2d_depthwise(gen::tensor(r, Shape(1, 4, 4, 2)), k3, Stride{2, 2}, Padding::same(3, 3)).shape() ==
        Shape(1, 2, 2, 2));

  const auto k5 = ConvKernel<double>::depthwise(gen::tensor(r, Shape(5, 5, 1, 2)));
  CHECK_THROWS_AS(kernels::conv2d_depthwise(gen::tensor(r, Shape(1, 3, 3, 2)), k5, Stride{}, Padding{}), ShapeError);
}

TEST_CASE("depthwise matches grouped general conv") {
  gen::for_all(30, 13, [](Rng& r) {
    const Shape xs = gen::shape(r, 2, 7, 5);
    const int kh = gen::odd_between(r, 1, 5), kw = gen::odd_between(r, 1, 5);
    const Stride st{static_cast<int>(gen::between(r, 1, 2)), static_cast<int>(gen::between(r, 1, 2))};
    const TD x = gen::tensor(r, xs);
    const TD k = gen::tensor(r, Shape(kh, kw, 1, xs.c()));
    const TD a = kernels::conv2d_depthwise(x, ConvKernel<double>::depthwise(k), st, Padding::same(kh, kw));
    CHECK(gen::max_abs(a, conv_oracle(x, k, static_cast<int>(xs.c()), st, Padding::same(kh, kw))) < 1e-12);
  });
}

TEST_CASE("batch_norm examples") {
  Rng r(3);
  const Shape cs(1, 1, 1, 2);
  const TD x = gen::tensor(r, Shape(2, 3, 3, 2));
  const TD one = TD::full(cs, 1.0), zero = TD::zeros(cs);
  CHECK(gen::max_abs(kernels::batch_norm_eval(x, one, zero, zero, one, 1e-12), x) < 1e-11);

  const TD constant = TD::full(Shape(4, 2, 2, 2), 3.25);
  const TD beta = t(cs, {0.5, -1.5});
  const auto fwd = kernels::batch_norm_train(constant, one, beta, 1e-5);
  for (std::int64_t i = 0; i < fwd.output.numel(); ++i) CHECK(fwd.output[i] == beta[i % 2]);

  // (2 - 1) / sqrt(1 + eps) * 3 - 1 with eps -> 0.
  const TD y = kernels::batch_norm_eval(t(Shape(1, 1, 1, 1), {2}), t(Shape(1, 1, 1, 1), {3}),
                                        t(Shape(1, 1, 1, 1), {-1}), t(Shape(1, 1, 1, 1), {1}),
                                        t(Shape(1, 1, 1, 1), {1}), 1e-12);
  CHECK(y[0] == doctest::Approx(2.0).epsilon(1e-11));

  CHECK_THROWS_AS(kernels::batch_norm_eval(x, one, zero, zero, one, 0.0), ParameterError);
  CHECK_THROWS_AS(kernels::batch_norm_train(x, one, zero, -1.0), ParameterError);
  CHECK_THROWS_AS(BatchNormParams<double>::identity(4, 0.0), ParameterError);

  // Train mode: biased statistics over N, H, W.
  const auto tr = kernels::batch_norm_train(x, one, zero, 1e-5);
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::int64_t i = c; i < x.numel(); i += 2) m += x[i];
    m /= 18.0;
    for (std::int64_t i = c; i < x.numel(); i += 2) v += (x[i] - m) * (x[i] - m);
    v /= 18.0;
    CHECK(tr.mean[c] == doctest::Approx(m).epsilon(1e-13));
    CHECK(tr.var[c] == doctest::Approx(v).epsilon(1e-13));
  }
}

TEST_CASE("activations") {
  const TD x = t(Shape(1, 1, 1, 5), {-3, 0, 3, std::log(3.0), -100});
  const TD relu = kernels::relu(x);
  CHECK(relu[0] == 0.0);
  CHECK(relu[2] == 3.0);
  const TD s = kernels::sigmoid(x);
  CHECK(s[1] == 0.5);
  CHECK(s[3] == doctest::Approx(0.75).epsilon(1e-15));
  // Strictly inside (0, 1) even where the exact value rounds to an endpoint.
  for (const double v : {-800.0, -100.0, 40.0, 800.0}) {
    const double y = kernels::sigmoid(TD::full(Shape(), v))[0];
    CHECK(y > 0.0);
    CHECK(y < 1.0);
    const float yf = kernels::sigmoid(Tensor<float>::full(Shape(), static_cast<float>(v)))[0];
    CHECK(yf > 0.0f);
    CHECK(yf < 1.0f);
  }
  const TD hs = kernels::hard_sigmoid(t(Shape(1, 1, 1, 4), {-4, -3, 0, 3.5}));
  CHECK(hs.to_vector() == std::vector<double>{0, 0, 0.5, 1});
  const TD cl = kernels::clip01(t(Shape(1, 1, 1, 3), {-0.5, 0.25, 1.5}));
  CHECK(cl.to_vector() == std::vector<double>{0, 0.25, 1});
}

TEST_CASE("concat and slice") {
  Rng r(4);
  const TD a = gen::tensor(r, Shape(1, 2, 2, 3)), b = gen::tensor(r, Shape(1, 2, 2, 5));
  const TD c = kernels::concat_channels(a, b);
  CHECK(c.shape() == Shape(1, 2, 2, 8));
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int ch = 0; ch < 8; ++ch) CHECK(c(0, h, w, ch) == (ch < 3 ? a(0, h, w, ch) : b(0, h, w, ch - 3)));
  const TD round = kernels::slice_channels(kernels::concat_channels(a, TD::zeros(a.shape())), 0, 3);
  CHECK(bitwise_equal(round, a));
  CHECK_THROWS_AS(kernels::concat_channels(a, gen::tensor(r, Shape(1, 3, 2, 1))), ShapeError);
  CHECK_THROWS_AS(kernels::slice_channels(a, 2, 2), ShapeError);
}

TEST_CASE("pooling") {
  const TD x = t(Shape(1, 2, 2, 1), {1, 2, 3, 4});
  CHECK(kernels::pool2d(x, PoolKind::max, Window{2, 2}, Stride{2, 2}).output[0] == 4.0);
  CHECK(kernels::pool2d(x, PoolKind::avg, Window{2, 2}, Stride{2, 2}).output[0] == 2.5);
  const TD c = TD::full(Shape(2, 5, 3, 2), -0.75);
  for (const PoolKind k : {PoolKind::avg, PoolKind::max}) {
    const TD y = kernels::pool2d(c, k, Window{2, 2}, Stride{2, 2}).output;
    CHECK(y.shape() == Shape(2, 3, 2, 2));
    for (double v : y.data()) CHECK(v == -0.75);
  }
  // The bottom-right window of a 3x3 map covers one real cell.
  const TD g = t(Shape(1, 3, 3, 1), {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const TD avg = kernels::pool2d(g, PoolKind::avg, Window{2, 2}, Stride{2, 2}).output;
  CHECK(avg.shape() == Shape(1, 2, 2, 1));
  CHECK(avg.to_vector() == std::vector<double>{3, 4.5, 7.5, 9});
  CHECK_THROWS_AS(kernels::pool2d(x, PoolKind::avg, Window{0, 2}, Stride{1, 1}), ParameterError);
}

TEST_CASE("bilinear and bicubic resize") {
  Rng r(5);
  const TD c = TD::full(Shape(1, 3, 5, 2), 1.25);
  for (const ResizeKind k : {ResizeKind::bilinear, ResizeKind::bicubic}) {
    const TD up = kernels::resize(c, k, 7, 4);
    for (double v : up.data()) CHECK(v == doctest::Approx(1.25).epsilon(1e-14));
    const TD rep = kernels::resize(TD::full(Shape(1, 1, 1, 1), -2.0), k, 3, 5);
    for (double v : rep.data()) CHECK(v == doctest::Approx(-2.0).epsilon(1e-14));
  }
  const TD x = t(Shape(1, 2, 2, 1), {0, 1, 2, 3});
  const TD y = kernels::resize(x, ResizeKind::bilinear, 4, 4);
  CHECK(y(0, 0, 0, 0) == 0.0);
  CHECK(y(0, 0, 3, 0) == 1.0);
  CHECK(y(0, 3, 0, 0) == 2.0);
  CHECK(y(0, 3, 3, 0) == 3.0);
  gen::for_all(20, 14, [](Rng& rr) {
    const TD xi = gen::tensor(rr, Shape(1, gen::between(rr, 1, 5), gen::between(rr, 1, 5), 2));
    const auto H2 = gen::between(rr, 1, 9), W2 = gen::between(rr, 1, 9);
    const TD yi = kernels::resize(xi, ResizeKind::bilinear, H2, W2);
    for (std::int64_t h = 0; h < H2; ++h)
      for (std::int64_t w = 0; w < W2; ++w)
        for (int ch = 0; ch < 2; ++ch) CHECK(yi(0, h, w, ch) == doctest::Approx(bilinear_at(xi, h, w, H2, W2, ch)).epsilon(1e-13));
  });
}

TEST_CASE("no silent broadcasting") {
  Rng r(6);
  CHECK_THROWS_AS(kernels::add(gen::tensor(r, Shape(1, 2, 2, 3)), gen::tensor(r, Shape(1, 2, 2, 1))), ShapeError);
  CHECK_THROWS_AS(kernels::mul(gen::tensor(r, Shape(2, 2, 2, 3)), gen::tensor(r, Shape(1, 2, 2, 3))), ShapeError);
  CHECK_THROWS_AS(kernels::mul_channels(gen::tensor(r, Shape(2, 2, 2, 3)), gen::tensor(r, Shape(1, 1, 1, 3))),
                  ShapeError);
}

TEST_CASE("finite outputs on finite inputs") {
  gen::for_all(20, 15, [](Rng& r) {
    const TD x = gen::tensor(r, gen::shape(r, 3, 6, 4), -50, 50);
    CHECK(kernels::sigmoid(x).all_finite());
    CHECK(kernels::hard_sigmoid(x).all_finite());
    CHECK(kernels::batch_norm_train(x, TD::full(Shape(1, 1, 1, x.shape().c()), 1.0), TD::zeros(Shape(1, 1, 1, x.shape().c())), 1e-5)
              .output.all_finite());
    CHECK(kernels::resize(x, ResizeKind::bicubic, 7, 3).all_finite());
  });
}

TEST_CASE("backward basics") {
  Rng r(7);
  Tape<double> tape;
  const auto x = tape.leaf(gen::tensor(r, Shape(2, 3, 3, 2)));
  const auto g = tape.backward(ad::sum(x)).of(x);
  for (double v : g.data()) CHECK(v == 1.0);

  Tape<double> tape2;
  const auto neg = tape2.leaf(gen::tensor(r, Shape(1, 3, 3, 2), -2, -0.1));
  const auto g2 = tape2.backward(ad::sum(ad::relu(neg))).of(neg);
  for (double v : g2.data()) CHECK(v == 0.0);

  Tape<double> tape3;
  const auto y = tape3.leaf(gen::tensor(r, Shape(1, 2, 2, 1)));
  CHECK_THROWS_AS(tape3.backward(ad::relu(y)), UsageError);

  Tape<double> off(false);
  const auto z = off.leaf(gen::tensor(r, Shape()));
  CHECK_THROWS_AS(off.backward(ad::sum(z)), UsageError);
}

TEST_CASE("reused variables accumulate and nodes run once in reverse order") {
  Rng r(8);
  Tape<double> tape;
  const TD xv = gen::tensor(r, Shape(1, 2, 3, 2));
  const auto x = tape.leaf(xv);
  const auto a = ad::mul(x, x);
  const auto b = ad::add(a, ad::relu(x));
  const auto loss = ad::sum(ad::add(b, x));
  std::vector<std::size_t> log;
  const auto g = tape.backward(loss, &log).of(x);
  for (std::int64_t i = 0; i < xv.numel(); ++i) {
    CHECK(g[i] == doctest::Approx(2 * xv[i] + (xv[i] > 0 ? 1 : 0) + 1).epsilon(1e-14));
  }
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i] < log[i - 1]);
  CHECK(log.size() == 5);
}

TEST_CASE("grad_check") {
  Rng r(9);
  const GradProgram sq = [](Tape<double>&, const std::vector<Var<double>>& in) {
    return ad::sum(ad::mul(in[0], in[0]));
  };
  const auto rep = grad_check(sq, {gen::tensor(r, Shape(2, 3, 2, 2))});
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-8);
  CHECK(rep.checked == 24);

  // Negative control: an operation whose vector-Jacobian product is off by 2x.
  const GradProgram wrong = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
    const TD v = kernels::mul(in[0].value(), in[0].value());
    const TD x = in[0].value();
    const auto y = tape.record("bad_square", v, {in[0]}, [x](const TD& g) {
      return std::vector<std::optional<TD>>{kernels::mul(g, x)};
    });
    return ad::sum(y);
  };
  const auto bad = grad_check(wrong, {gen::tensor(r, Shape(1, 2, 2, 1), 0.5, 1.0)});
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.3);
  CHECK(bad.worst_index >= 0);

  CHECK(grad_relative_error(0.0, 0.0) == 0.0);
  CHECK(grad_relative_error(1e-12, 0.0) == doctest::Approx(1e-4));
}

TEST_CASE("results do not depend on the thread count") {
  Rng r(10);
  const TD x = gen::tensor(r, Shape(4, 17, 13, 24));
  const ConvKernel<double> pw(gen::tensor(r, Shape(1, 1, 24, 32)));
  const auto dw = ConvKernel<double>::depthwise(gen::tensor(r, Shape(5, 5, 1, 24)));
  const ConvKernel<double> gc(gen::tensor(r, Shape(3, 3, 12, 8)), 2);
  const TD gamma = gen::tensor(r, Shape(1, 1, 1, 24)), beta = gen::tensor(r, Shape(1, 1, 1, 24));
  auto run = [&] {
    std::vector<TD> out;
    out.push_back(kernels::conv2d_pointwise(x, pw, kNoBias));
    out.push_back(kernels::conv2d_depthwise(x, dw, Stride{2, 1}, Padding::same(5, 5)));
    out.push_back(kernels::conv2d(x, gc, kNoBias, Stride{2, 2}, Padding::same(3, 3)));
    const auto bn = kernels::batch_norm_train(x, gamma, beta, 1e-5);
    out.push_back(bn.output);
    out.push_back(kernels::resize(x, ResizeKind::bicubic, 9, 30));
    out.push_back(kernels::conv2d_depthwise_backward(x, dw, Stride{1, 1}, Padding::same(5, 5), x).kernel);
    out.push_back(kernels::batch_norm_backward(x, gamma, bn.mean, bn.var, 1e-5, true, x).gamma);
    return out;
  };
  const int saved = num_threads();
  set_num_threads(1);
  const auto one = run();
  set_num_threads(4);
  const auto four = run();
  set_num_threads(saved);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(bitwise_equal(one[i], four[i]));
}
