#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "generators.hpp"
#include "ghostv2/analysis.hpp"
#include "ghostv2/weights.hpp"

using namespace ghostv2;
using TD = Tensor<double>;
namespace fs = std::filesystem;

namespace {

const TD* const kNoBias = nullptr;

ModelSpec at_width(double w) {
  ModelSpec s = builtin_model_spec("default");
  s.width = w;
  return s;
}

const char* kTwoStage = R"(
name: two-stage
input_size: 16
in_channels: 3
stem: {channels: 8, stride: 2, kernel: 3}
placement: both
dfc: {factor: 2, pool: avg}
kernel_schedule:
  - {min_size: 8, kernel: 5}
  - {min_size: 1, kernel: 3}
stages:
  - name: a
    blocks:
      - {expand: 16, out: 8}
  - name: b
    placement: expanded
    blocks:
      - {expand: 24, out: 12, stride: 2, se: 0.25}
head: {conv_channels: 16, feature_size: 20, num_classes: 5}
)";

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / ("ghostv2_test_" + stem + "_" + std::to_string(::getpid()) + ".bin");
}

std::vector<std::uint8_t> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_all(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
bool same_params(const Model<T>& a, const Model<T>& b) {
  std::vector<Tensor<T>> ta, tb;
  a.for_each_param([&](const std::string&, const Tensor<T>& t, bool) { ta.push_back(t); });
  b.for_each_param([&](const std::string&, const Tensor<T>& t, bool) { tb.push_back(t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!bitwise_equal(ta[i], tb[i])) return false;
  return true;
}

WeightErrorKind load_error(Model<double>& m, const fs::path& p) {
  try {
    load_weights(m, p.string());
  } catch (const WeightFileError& e) {
    return e.kind();
  }
  FAIL("load succeeded unexpectedly");
  return WeightErrorKind::io;
}

}  // namespace

TEST_CASE("default budgets") {
  const std::vector<std::tuple<double, double, double>> targets{{1.0, 167e6, 6.1e6}, {1.3, 269e6, 8.9e6},
                                                                {1.6, 399e6, 12.3e6}};
  for (const auto& [w, macs, params] : targets) {
    CAPTURE(w);
    const ModelSummary s = summarize(at_width(w));
    CHECK(std::abs(static_cast<double>(s.total_macs) / macs - 1.0) <= 0.10);
    CHECK(std::abs(static_cast<double>(s.total_params) / params - 1.0) <= 0.10);
    CHECK(static_cast<std::int64_t>(s.total_params) == build_model<float>(at_width(w), 0).parameter_count());
  }
}

TEST_CASE("width scaling") {
  std::uint64_t prev_macs = 0, prev_params = 0;
  for (const double w : {0.5, 1.0, 1.3, 1.6}) {
    const ModelSummary s = summarize(at_width(w));
    CHECK(s.total_macs >= prev_macs);
    CHECK(s.total_params >= prev_params);
    prev_macs = s.total_macs;
    prev_params = s.total_params;
  }
  const ModelSpec base = builtin_model_spec("default");
  const ModelLayout half = resolve_layout(at_width(0.5));
  std::size_t i = 0;
  for (const auto& stage : base.stages)
    for (const auto& b : stage.blocks) {
      const auto& c = half.blocks[i++].config;
      CHECK(c.c_expand == make_divisible(0.5 * static_cast<double>(b.expand)));
      CHECK(c.c_out == make_divisible(0.5 * static_cast<double>(b.out)));
      CHECK(c.c_expand % 4 == 0);
      CHECK(c.c_out % 4 == 0);
    }
  CHECK(i == half.blocks.size());
}

TEST_CASE("kernel schedule is reflected in the built layers") {
  const ModelSpec spec = builtin_model_spec("default");
  const Model<float> m = build_model<float>(spec, 0);
  std::set<int> seen;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto size = m.layout.blocks[i].input_size;
    const int want = size >= 28 ? 9 : size >= 14 ? 7 : 5;
    CAPTURE(m.layout.blocks[i].name);
    for (const auto* attn : {&m.blocks[i].attn1, &m.blocks[i].attn2}) {
      if (!attn->has_value()) continue;
      CHECK((*attn)->vertical.shape()[0] == want);
      CHECK((*attn)->horizontal.shape()[1] == want);
      seen.insert(want);
    }
  }
  CHECK(seen == std::set<int>{5, 7, 9});

  ModelSpec pinned = spec;
  pinned.stages[1].kernel = 3;
  CHECK(resolve_layout(pinned).blocks[1].config.dfc.k_h == 3);
}

TEST_CASE("building is deterministic") {
  const ModelSpec spec = builtin_model_spec("mini");
  const auto a = build_model<double>(spec, 42), b = build_model<double>(spec, 42), c = build_model<double>(spec, 43);
  CHECK(same_params(a, b));
  CHECK_FALSE(same_params(a, c));
}

TEST_CASE("forward") {
  const ModelSpec spec = builtin_model_spec("default");
  const Model<float> m = build_model<float>(spec, 0);
  const Tensor<float> logits = forward(m, Tensor<float>::zeros(Shape(1, 64, 64, 3)));
  CHECK(logits.shape() == Shape(1, 1, 1, 1000));
  CHECK(logits.all_finite());
  CHECK_THROWS_AS(forward(m, Tensor<float>::zeros(Shape(1, 48, 40, 3))), ShapeError);
  try {
    (void)forward(m, Tensor<float>::zeros(Shape(1, 36, 32, 3)));
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by the total stride 32") != std::string::npos);
  }

  // Eval mode is pure: same output, parameters untouched.
  const Model<double> mini = build_model<double>(builtin_model_spec("mini"), 3);
  Model<double> trained = mini;
  Rng r(1);
  trained.classifier = gen::tensor(r, mini.classifier.shape());
  const TD x = gen::tensor(r, Shape(2, 32, 32, 1));
  const TD y1 = forward(trained, x), y2 = forward(trained, x);
  CHECK(bitwise_equal(y1, y2));
  Model<double> copy = trained;
  (void)forward(trained, x, Mode::train);
  CHECK(same_params(copy, trained));
}

TEST_CASE("logits match a manual composition of the blocks") {
  const ModelSpec spec = parse_model_spec(kTwoStage);
  Model<double> m = build_model<double>(spec, 9);
  Rng r(2);
  m.classifier = gen::tensor(r, m.classifier.shape());
  m.classifier_bias = gen::tensor(r, m.classifier_bias.shape());
  m.blocks[0].ghost1.primary_bn->running_mean = gen::tensor(r, Shape(1, 1, 1, 8));
  CHECK(m.blocks[0].attn1.has_value());
  CHECK(m.blocks[0].attn2.has_value());
  CHECK(m.blocks[1].attn1.has_value());
  CHECK_FALSE(m.blocks[1].attn2.has_value());
  CHECK(m.blocks[1].attn1->options.k_h == 5);

  const TD x = gen::tensor(r, Shape(1, 16, 16, 3));
  auto bn = [](const TD& v, const BatchNormParams<double>& p) {
    return kernels::batch_norm_eval(v, p.gamma, p.beta, p.running_mean, p.running_var, p.eps);
  };
  TD y = kernels::conv2d(x, ConvKernel<double>(m.stem), kNoBias, Stride{2, 2}, Padding::same(3, 3));
  y = kernels::relu(bn(y, m.stem_bn));
  y = ghostv2_bottleneck(y, m.blocks[0]);
  y = ghostv2_bottleneck(y, m.blocks[1]);
  CHECK(y.shape() == Shape(1, 4, 4, 12));
  y = kernels::global_avg_pool(kernels::relu(bn(kernels::conv2d_pointwise(y, ConvKernel<double>(m.head), kNoBias), m.head_bn)));
  y = kernels::relu(kernels::conv2d_pointwise(y, ConvKernel<double>(m.feature), &m.feature_bias));
  y = kernels::conv2d_pointwise(y, ConvKernel<double>(m.classifier), &m.classifier_bias);
  const TD logits = forward(m, x);
  CHECK(logits.shape() == Shape(1, 1, 1, 5));
  CHECK(gen::max_abs(logits, y) < 1e-12);
}

TEST_CASE("model spec parsing") {
  CHECK_NOTHROW(parse_model_spec(kTwoStage));
  try {
    parse_model_spec(std::string(kTwoStage) + "dropout: 0.2\n", "cfg.yaml");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("unknown key 'dropout'") != std::string::npos);
  }
  try {
    std::string text = kTwoStage;
    text.replace(text.find("stride: 2, se"), 9, "stride: 3");
    parse_model_spec(text);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage 'b' block 0") != std::string::npos);
  }
  try {
    std::string text = kTwoStage;
    text.replace(text.find("expand: 16"), 10, "expand: 4");
    (void)build_model<float>(parse_model_spec(text), 0);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage 'a' block 0") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_model_spec("stages: [{name: x}]"), ConfigError);
  CHECK_THROWS_AS(parse_model_spec("stages: [\n"), ConfigError);
  CHECK_THROWS_AS(load_model_spec("/nonexistent/spec.yaml"), ConfigError);
  CHECK_THROWS_AS(builtin_model_spec("huge"), ConfigError);
}

TEST_CASE("weight files") {
  const ModelSpec mini = builtin_model_spec("mini");
  Model<double> src = build_model<double>(mini, 5);
  Rng r(3);
  src.classifier = gen::tensor(r, src.classifier.shape());
  src.blocks[1].ghost2.cheap_bn->running_var = gen::tensor(r, Shape(1, 1, 1, 12), 0.5, 1.5);
  const fs::path path = temp_file("roundtrip");
  save_weights(src, path.string());

  SUBCASE("round trip is bitwise") {
    Model<double> dst = build_model<double>(mini, 6);
    load_weights(dst, path.string());
    CHECK(same_params(src, dst));
    const TD x = gen::tensor(r, Shape(2, 32, 32, 1));
    CHECK(bitwise_equal(forward(src, x), forward(dst, x)));
  }
  SUBCASE("truncation leaves the model untouched") {
    auto bytes = read_all(path);
    bytes.resize(bytes.size() / 2);
    const fs::path cut = temp_file("cut");
    write_all(cut, bytes);
    Model<double> dst = build_model<double>(mini, 6);
    const Model<double> before = dst;
    CHECK(load_error(dst, cut) == WeightErrorKind::truncated);
    CHECK(same_params(before, dst));
    fs::remove(cut);
  }
  SUBCASE("corruption kinds") {
    const auto bytes = read_all(path);
    Model<double> dst = build_model<double>(mini, 6);
    const fs::path bad = temp_file("bad");
    auto flipped = bytes;
    flipped[flipped.size() - 10] ^= 0xFF;
    write_all(bad, flipped);
    CHECK(load_error(dst, bad) == WeightErrorKind::checksum);
    auto magic = bytes;
    magic[0] = 'X';
    write_all(bad, magic);
    CHECK(load_error(dst, bad) == WeightErrorKind::magic);
    auto version = bytes;
    version[4] = 9;
    write_all(bad, version);
    CHECK(load_error(dst, bad) == WeightErrorKind::version);
    auto extra = bytes;
    extra.push_back(0);
    write_all(bad, extra);
    CHECK(load_error(dst, bad) == WeightErrorKind::format);
    CHECK(load_error(dst, temp_file("missing")) == WeightErrorKind::io);
    Model<float> as_float = build_model<float>(mini, 6);
    try {
      load_weights(as_float, path.string());
      FAIL("expected a dtype mismatch");
    } catch (const WeightFileError& e) {
      CHECK(e.kind() == WeightErrorKind::dtype_mismatch);
    }
    fs::remove(bad);
  }
  SUBCASE("cross-width load names the first mismatching tensor") {
    const fs::path wide = temp_file("wide");
    save_weights(build_model<float>(at_width(1.0), 0), wide.string());
    Model<float> m13 = build_model<float>(at_width(1.3), 0);
    try {
      load_weights(m13, wide.string());
      FAIL("expected a shape mismatch");
    } catch (const WeightFileError& e) {
      CHECK(e.kind() == WeightErrorKind::shape_mismatch);
      CHECK(std::string(e.what()).find("stem.weight") != std::string::npos);
    }
    fs::remove(wide);
  }
  SUBCASE("name mismatch") {
    auto entries = collect_weights(src);
    entries[3].name = "renamed";
    Model<double> dst = build_model<double>(mini, 6);
    try {
      assign_weights(dst, entries);
      FAIL("expected a name mismatch");
    } catch (const WeightFileError& e) {
      CHECK(e.kind() == WeightErrorKind::name_mismatch);
    }
    CHECK(decode_weights(encode_weights(entries)).size() == entries.size());
  }
  fs::remove(path);
}
