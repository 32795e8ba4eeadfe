#include <doctest.h>

#include "generators.hpp"
#include "ghostv2/analysis.hpp"
#include "ghostv2/attention.hpp"

using namespace ghostv2;
using TD = Tensor<double>;

namespace {

TD full_oracle(const TD& z, const TD& f) {
  const auto N = z.shape().n(), H = z.shape().h(), W = z.shape().w(), C = z.shape().c();
  std::vector<double> out;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::int64_t hp = 0; hp < H; ++hp)
            for (std::int64_t wp = 0; wp < W; ++wp) acc += f(h * W + w, hp, wp, c) * z(n, hp, wp, c);
          out.push_back(acc);
        }
  return TD(z.shape(), out);
}

TD general_oracle(const TD& z, const DecoupledWeights<double>& dw) {
  const auto N = z.shape().n(), H = z.shape().h(), W = z.shape().w(), C = z.shape().c();
  std::vector<double> mid(z.numel()), out(z.numel());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::int64_t hp = 0; hp < H; ++hp) acc += dw.vertical(h, hp, w, c) * z(n, hp, w, c);
          mid[z.offset(n, h, w, c)] = acc;
        }
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::int64_t wp = 0; wp < W; ++wp) acc += dw.horizontal(w, wp, h, c) * mid[z.offset(n, h, wp, c)];
          out[z.offset(n, h, w, c)] = acc;
        }
  return TD(z.shape(), out);
}

TD delta_kernel(const Shape& s, std::int64_t center) {
  std::vector<double> v(s.numel(), 0.0);
  for (std::int64_t c = 0; c < s.c(); ++c) v[center * s.c() + c] = 1.0;
  return TD(s, v);
}

std::uint64_t conv_macs(const std::vector<cost::OpRecord>& trace) {
  std::uint64_t m = 0;
  for (const auto& r : trace)
    if (r.op == "conv2d_depthwise") m += r.macs;
  return m;
}

}  // namespace

TEST_CASE("full attention examples") {
  Rng r(1);
  const TD z = gen::tensor(r, Shape(2, 3, 2, 2));
  CHECK(bitwise_equal(full_fc_attention(z, FullAttentionWeights<double>::identity(3, 2, 2)), z));

  // All-ones weights give every position the per-channel global sum.
  const TD ones = TD::full(Shape(6, 3, 2, 2), 1.0);
  const TD a = full_fc_attention(z, FullAttentionWeights<double>{ones});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 2; ++c) {
      double s = 0;
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 2; ++w) s += z(n, h, w, c);
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 2; ++w) CHECK(a(n, h, w, c) == doctest::Approx(s).epsilon(1e-14));
    }

  gen::for_all(20, 21, [](Rng& rr) {
    const Shape s = gen::shape(rr, 2, 4, 3);
    const TD zz = gen::tensor(rr, s);
    const TD f = gen::tensor(rr, Shape(s.h() * s.w(), s.h(), s.w(), s.c()));
    CHECK(gen::max_abs(full_fc_attention(zz, FullAttentionWeights<double>{f}), full_oracle(zz, f)) < 1e-12);
  });
  CHECK_THROWS_AS(full_fc_attention(z, FullAttentionWeights<double>::identity(2, 3, 2)), ShapeError);
}

TEST_CASE("decoupled general form matches its oracle") {
  gen::for_all(20, 22, [](Rng& r) {
    const Shape s = gen::shape(r, 2, 5, 3);
    const TD z = gen::tensor(r, s);
    const DecoupledWeights<double> w{gen::tensor(r, Shape(s.h(), s.h(), s.w(), s.c())),
                                     gen::tensor(r, Shape(s.w(), s.w(), s.h(), s.c()))};
    CHECK(gen::max_abs(dfc_attention_general(z, w), general_oracle(z, w)) < 1e-12);
  });
}

TEST_CASE("decoupled conv examples") {
  Rng r(2);
  const TD z = gen::tensor(r, Shape(1, 5, 4, 3));
  const TD kv = delta_kernel(Shape(5, 1, 1, 3), 2), kh = delta_kernel(Shape(1, 3, 1, 3), 1);
  CHECK(bitwise_equal(dfc_attention_conv(z, kv, kh), z));

  // Full-extent all-ones kernels sum the whole map at the centre.
  const TD z3 = gen::tensor(r, Shape(1, 3, 3, 2));
  const TD a = dfc_attention_conv(z3, TD::full(Shape(5, 1, 1, 2), 1.0), TD::full(Shape(1, 5, 1, 2), 1.0));
  for (int c = 0; c < 2; ++c) {
    double s = 0;
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) s += z3(0, h, w, c);
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) CHECK(a(0, h, w, c) == doctest::Approx(s).epsilon(1e-14));
  }

  CHECK_THROWS_AS(dfc_attention_conv(z, TD::full(Shape(4, 1, 1, 3), 1.0), kh), ParameterError);
  CHECK_THROWS_AS(dfc_attention_conv(z, kv, TD::full(Shape(1, 3, 1, 2), 1.0)), ShapeError);
  DfcOptions even;
  even.k_w = 4;
  CHECK_THROWS_AS(even.validate(), ParameterError);
}

TEST_CASE("lifting a conv to decoupled weights") {
  // The delta kernel lifts to identity matrices.
  const auto id = lift_conv_to_general(delta_kernel(Shape(3, 1, 1, 1), 1), delta_kernel(Shape(1, 5, 1, 1), 2), 4, 3);
  for (int h = 0; h < 4; ++h)
    for (int hp = 0; hp < 4; ++hp) CHECK(id.vertical(h, hp, 0, 0) == (h == hp ? 1.0 : 0.0));
  for (int w = 0; w < 3; ++w)
    for (int wp = 0; wp < 3; ++wp) CHECK(id.horizontal(w, wp, 0, 0) == (w == wp ? 1.0 : 0.0));

  // [a, b, c] at H = 2: row 0 sees (pad, z0, z1) -> (b, c); row 1 sees (z0, z1, pad) -> (a, b).
  const TD kv(Shape(3, 1, 1, 1), {2.0, 3.0, 5.0});
  const auto l = lift_conv_to_general(kv, TD::full(Shape(1, 1, 1, 1), 1.0), 2, 1);
  CHECK(l.vertical(0, 0, 0, 0) == 3.0);
  CHECK(l.vertical(0, 1, 0, 0) == 5.0);
  CHECK(l.vertical(1, 0, 0, 0) == 2.0);
  CHECK(l.vertical(1, 1, 0, 0) == 3.0);

  // Band structure: zero outside |h - h'| <= K/2, constant along diagonals.
  Rng r(3);
  const TD k7 = gen::tensor(r, Shape(7, 1, 1, 2));
  const auto b = lift_conv_to_general(k7, gen::tensor(r, Shape(1, 3, 1, 2)), 9, 2);
  for (int h = 0; h < 9; ++h)
    for (int hp = 0; hp < 9; ++hp)
      for (int c = 0; c < 2; ++c) {
        const int d = hp - h;
        const double want = (d >= -3 && d <= 3) ? k7[(d + 3) * 2 + c] : 0.0;
        CHECK(b.vertical(h, hp, 1, c) == want);
      }
}

TEST_CASE("conv form equals the lifted general form on random instances") {
  gen::for_all(200, 23, [](Rng& r) {
    const Shape s(gen::between(r, 1, 2), gen::between(r, 1, 8), gen::between(r, 1, 8), gen::between(r, 1, 4));
    const int KH = gen::odd_between(r, 1, static_cast<int>(2 * s.h() - 1));
    const int KW = gen::odd_between(r, 1, static_cast<int>(2 * s.w() - 1));
    CAPTURE(s.str());
    CAPTURE(KH);
    CAPTURE(KW);
    const TD z = gen::tensor(r, s);
    const TD kv = gen::tensor(r, Shape(KH, 1, 1, s.c())), kh = gen::tensor(r, Shape(1, KW, 1, s.c()));
    const TD conv = dfc_attention_conv(z, kv, kh);
    const TD general = dfc_attention_general(z, lift_conv_to_general(kv, kh, s.h(), s.w()));
    CHECK(gen::max_abs(conv, general) < 1e-10);
  });
}

TEST_CASE("attention cost counters") {
  Rng r(4);
  const std::int64_t H = 4, W = 2, C = 3;
  const TD z = gen::tensor(r, Shape(1, H, W, C));
  {
    cost::CostScope s;
    (void)full_fc_attention(z, FullAttentionWeights<double>{gen::tensor(r, Shape(H * W, H, W, C))});
    CHECK(s.macs() == static_cast<std::uint64_t>(H * H * W * W * C));
  }
  {
    cost::CostScope s;
    (void)dfc_attention_general(z, DecoupledWeights<double>{gen::tensor(r, Shape(H, H, W, C)),
                                                            gen::tensor(r, Shape(W, W, H, C))});
    CHECK(s.macs() == static_cast<std::uint64_t>((H * H * W + H * W * W) * C));
  }
  {
    cost::CostScope s;
    (void)dfc_attention_conv(z, gen::tensor(r, Shape(5, 1, 1, C)), gen::tensor(r, Shape(1, 3, 1, C)));
    CHECK(s.macs() == static_cast<std::uint64_t>((5 + 3) * H * W * C));
  }
  const auto table = compare_attention_costs(H, W, C, 5, 3, 2);
  CHECK(table.macs("full") == 192);
  CHECK(table.macs("decoupled") == 144);
  CHECK(table.macs("conv") == 192);
  CHECK(table.macs("conv_downsampled") == 48);
}

TEST_CASE("decoupled receptive field is the kernel rectangle") {
  for (const auto& [KH, KW, S] : std::vector<std::tuple<int, int, int>>{{5, 3, 9}, {3, 7, 9}, {1, 1, 5}, {9, 9, 7}}) {
    CAPTURE(KH);
    CAPTURE(KW);
    Rng r(static_cast<std::uint64_t>(KH * 100 + KW));
    const TD kv = gen::tensor(r, Shape(KH, 1, 1, 2), 0.5, 1.5), kh = gen::tensor(r, Shape(1, KW, 1, 2), 0.5, 1.5);
    const ProbeLayer layer = [&](const Ctx<double>& ctx, const Var<double>& x) {
      return dfc_attention_conv(x, ctx.bind(kv), ctx.bind(kh));
    };
    const std::int64_t c = S / 2;
    const RfMask m = receptive_field_probe(layer, Shape(1, S, S, 2), c, c, 1);
    CHECK(m == rectangle_mask(S, S, c - KH / 2, c + KH / 2, c - KW / 2, c + KW / 2));
    CHECK(m.count() == std::min<std::int64_t>(KH, S) * std::min<std::int64_t>(KW, S));
  }
  // Full attention with dense weights reaches the whole map.
  Rng r(5);
  const TD f = gen::tensor(r, Shape(35, 5, 7, 1), 0.5, 1.5);
  const ProbeLayer full = [&](const Ctx<double>& ctx, const Var<double>& x) {
    return ad::full_fc_attention(x, ctx.bind(f));
  };
  CHECK(receptive_field_probe(full, Shape(1, 5, 7, 1), 0, 0, 0).count() == 35);
}

TEST_CASE("channels stay separate") {
  Rng r(6);
  const TD z = gen::tensor(r, Shape(1, 5, 5, 3));
  const TD kv = gen::tensor(r, Shape(3, 1, 1, 3)), kh = gen::tensor(r, Shape(1, 3, 1, 3));
  std::vector<double> bumped = z.to_vector();
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 5; ++w) bumped[z.offset(0, h, w, 1)] += 10.0;
  const TD a = dfc_attention_conv(z, kv, kh), b = dfc_attention_conv(TD(z.shape(), bumped), kv, kh);
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 5; ++w) {
      CHECK(a(0, h, w, 0) == b(0, h, w, 0));
      CHECK(a(0, h, w, 2) == b(0, h, w, 2));
    }
}

TEST_CASE("dfc branch") {
  Rng r(7);
  DfcOptions o;
  o.k_h = 3;
  o.k_w = 5;
  const auto p = DfcParams<double>::init(4, 6, o, r);

  SUBCASE("zero input gives a flat 0.5 map") {
    const TD a = dfc_branch(TD::zeros(Shape(2, 8, 6, 4)), p);
    CHECK(a.shape() == Shape(2, 8, 6, 6));
    for (double v : a.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("downsampling by two quarters the conv cost on even grids") {
    for (const std::int64_t H : {4, 8, 14, 28}) {
      DfcOptions o1 = o;
      o1.factor = 1;
      DfcParams<double> p1 = p;
      p1.options = o1;
      const TD x = gen::tensor(r, Shape(1, H, H, 4));
      std::uint64_t m1, m2;
      {
        cost::CostScope s(true);
        (void)dfc_branch(x, p1);
        m1 = conv_macs(s.trace());
      }
      {
        cost::CostScope s(true);
        (void)dfc_branch(x, p);
        m2 = conv_macs(s.trace());
      }
      CHECK(m1 == static_cast<std::uint64_t>((3 + 5) * H * H * 6));
      CHECK(4 * m2 == m1);
    }
  }

  SUBCASE("scalar pipeline oracle") {
    DfcOptions o1;
    o1.k_h = 3;
    o1.k_w = 3;
    o1.factor = 2;
    o1.pool = PoolKind::avg;
    Rng rr(8);
    auto q = DfcParams<double>::init(2, 2, o1, rr);
    const TD x = gen::tensor(rr, Shape(1, 4, 4, 2));
    // avg pool 2x2 -> 1x1 conv -> 3x1 dw -> 1x3 dw -> sigmoid -> bilinear 2x2 -> 4x4; BN is identity.
    const double eps = q.query_bn.eps;
    const double bn = 1.0 / std::sqrt(1.0 + eps);
    double pooled[2][2][2], mixed[2][2][2], vert[2][2][2], hor[2][2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int c = 0; c < 2; ++c)
          pooled[i][j][c] = (x(0, 2 * i, 2 * j, c) + x(0, 2 * i + 1, 2 * j, c) + x(0, 2 * i, 2 * j + 1, c) +
                             x(0, 2 * i + 1, 2 * j + 1, c)) / 4.0;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int o2 = 0; o2 < 2; ++o2)
          mixed[i][j][o2] = bn * (pooled[i][j][0] * q.query(0, 0, 0, o2) + pooled[i][j][1] * q.query(0, 0, 1, o2));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int c = 0; c < 2; ++c) {
          double acc = 0;
          for (int t = 0; t < 3; ++t) {
            const int ii = i + t - 1;
            if (ii >= 0 && ii < 2) acc += q.vertical(t, 0, 0, c) * mixed[ii][j][c];
          }
          vert[i][j][c] = bn * acc;
        }
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int c = 0; c < 2; ++c) {
          double acc = 0;
          for (int t = 0; t < 3; ++t) {
            const int jj = j + t - 1;
            if (jj >= 0 && jj < 2) acc += q.horizontal(0, t, 0, c) * vert[i][jj][c];
          }
          hor[i][j][c] = 1.0 / (1.0 + std::exp(-bn * acc));
        }
    const TD small(Shape(1, 2, 2, 2), {hor[0][0][0], hor[0][0][1], hor[0][1][0], hor[0][1][1], hor[1][0][0],
                                       hor[1][0][1], hor[1][1][0], hor[1][1][1]});
    const TD want = kernels::resize(small, ResizeKind::bilinear, 4, 4);
    CHECK(gen::max_abs(dfc_branch(x, q), want) < 1e-12);
  }

  SUBCASE("outputs lie in [0, 1]") {
    for (const Scaling s : {Scaling::sigmoid, Scaling::hard_sigmoid, Scaling::clip})
      for (const ScalingPosition pos : {ScalingPosition::before_upsample, ScalingPosition::after_upsample})
        for (const ResizeKind up : {ResizeKind::bilinear, ResizeKind::bicubic}) {
          DfcParams<double> q = p;
          q.options.scaling = s;
          q.options.position = pos;
          q.options.upsample = up;
          const TD a = dfc_branch(gen::tensor(r, Shape(2, 7, 9, 4), -5, 5), q, Mode::train);
          for (double v : a.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            if (s == Scaling::sigmoid && pos == ScalingPosition::after_upsample) {
              CHECK(v > 0.0);
              CHECK(v < 1.0);
            }
          }
        }
  }

  SUBCASE("input errors") {
    CHECK_THROWS_AS(dfc_branch(TD::zeros(Shape(1, 4, 4, 3)), p), ShapeError);
    CHECK_THROWS_AS(dfc_branch(TD::zeros(Shape(1, 1, 4, 4)), p), ShapeError);
  }
}
