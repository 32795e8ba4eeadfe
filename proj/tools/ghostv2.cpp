#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "ghostv2/parallel.hpp"
#include "ghostv2/weights.hpp"
#include "reports.hpp"

using namespace ghostv2;
using ghostv2::cli::json;

namespace {

struct Globals {
  std::string config = "default";
  bool config_given = false;
  std::optional<double> width;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string format = "text";
  std::string out;
  ThreadChoice thread_choice;
};

// Output sink honouring --out and --format.
class Emitter {
 public:
  explicit Emitter(const Globals& g) : g_(g) {}
  bool machine() const { return g_.format == "machine"; }

  void emit(const std::string& command, json body, const std::string& text) const {
    std::string payload;
    if (machine()) {
      body["command"] = command;
      body["threads"] = g_.thread_choice.threads;
      body["threads_source"] = g_.thread_choice.source;
      body["seed"] = g_.seed;
      payload = body.dump(2) + "\n";
    } else {
      payload = text + "threads: " + std::to_string(g_.thread_choice.threads) + " (" + g_.thread_choice.source + ")\n";
    }
    if (g_.out.empty()) {
      std::cout << payload;
    } else {
      std::ofstream f(g_.out);
      if (!f) throw UsageError("cannot write '" + g_.out + "'");
      f << payload;
    }
  }

 private:
  const Globals& g_;
};

ModelSpec load_spec(const Globals& g, const std::string& fallback = "default") {
  ModelSpec spec = resolve_model_spec(g.config_given ? g.config : fallback);
  if (g.width) spec.width = *g.width;
  spec.validate();
  return spec;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const WeightFileError*>(&e)) return "weights";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const ParameterError*>(&e)) return "parameter";
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  return "internal";
}

// ---------------------------------------------------------------- rf-probe

struct ProbeSetup {
  ProbeLayer layer;
  Shape input;
  std::int64_t out_h = 0, out_w = 0, out_c = 0;
  std::optional<RfMask> predicted;
  std::string description;
};

ProbeSetup probe_setup(const std::string& kind, int kh, int kw, std::int64_t size, std::int64_t channels,
                       std::int64_t channel, const std::string& placement, std::uint64_t seed) {
  Rng rng(seed);
  ProbeSetup s;
  s.input = Shape(1, size, size, channels);
  s.out_h = size / 2;
  s.out_w = size / 2;
  s.out_c = channel;
  if (kind == "dfc") {
    if (kh % 2 == 0 || kw % 2 == 0) throw ParameterError("rf-probe: --kh and --kw must be odd");
    const auto kv = Tensor<double>::uniform(Shape(kh, 1, 1, channels), -1, 1, rng);
    const auto khz = Tensor<double>::uniform(Shape(1, kw, 1, channels), -1, 1, rng);
    s.layer = [kv, khz](const Ctx<double>& ctx, const Var<double>& x) {
      return dfc_attention_conv(x, ctx.bind(kv), ctx.bind(khz));
    };
    s.predicted = rectangle_mask(size, size, s.out_h - kh / 2, s.out_h + kh / 2, s.out_w - kw / 2, s.out_w + kw / 2);
    s.description = "dfc_attention_conv K_H=" + std::to_string(kh) + " K_W=" + std::to_string(kw);
  } else if (kind == "ghost" || kind == "ghost-attn") {
    const std::int64_t c_out = 2 * channels;
    auto g = GhostModuleParams<double>::init(channels, c_out, true, rng);
    if (kind == "ghost") {
      s.layer = [g](const Ctx<double>& ctx, const Var<double>& x) { return ghost_module(ctx, x, g); };
      const std::int64_t r = channel < g.intrinsic() ? 0 : 1;
      s.predicted = rectangle_mask(size, size, s.out_h - r, s.out_h + r, s.out_w - r, s.out_w + r);
      s.description = std::string("ghost_module, ") + (r == 0 ? "intrinsic" : "cheap") + " channel";
    } else {
      DfcOptions o;
      o.k_h = kh;
      o.k_w = kw;
      o.validate();
      auto a = DfcParams<double>::init(channels, c_out, o, rng);
      s.layer = [g, a](const Ctx<double>& ctx, const Var<double>& x) { return ghost_module_attn(ctx, x, g, a); };
      s.description = "ghost_module with DFC gating";
    }
  } else if (kind == "bottleneck") {
    BottleneckConfig cfg;
    cfg.c_in = channels;
    cfg.c_expand = 2 * channels;
    cfg.c_out = channels;
    cfg.placement = parse_placement(placement);
    cfg.dfc.k_h = kh;
    cfg.dfc.k_w = kw;
    auto p = BottleneckParams<double>::init(cfg, rng);
    s.layer = [p](const Ctx<double>& ctx, const Var<double>& x) { return ghostv2_bottleneck(ctx, x, p); };
    s.description = "bottleneck, placement " + placement;
  } else {
    throw UsageError("rf-probe: unknown --layer '" + kind + "' (dfc, ghost, ghost-attn, bottleneck)");
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GhostNetV2 / DFC attention toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Model spec: 'default', 'mini' or a YAML path")->each([&](const std::string&) {
    g.config_given = true;
  });
  app.add_option("--width", g.width, "Width multiplier")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads (0 = hardware default; GHOSTV2_NUM_THREADS overrides)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--format", g.format, "Report format")->check(CLI::IsMember({"text", "machine"}));
  app.add_option("--out", g.out, "Write the report to this file instead of stdout");

  // summary
  auto* summary = app.add_subcommand("summary", "Static per-layer MACs/params table");
  std::int64_t summary_batch = 1;
  summary->add_option("--batch", summary_batch, "Batch size")->check(CLI::PositiveNumber);

  // flops
  auto* flops = app.add_subcommand("flops", "Count MACs/params by running the instrumented forward");
  bool flops_rows = false;
  flops->add_flag("--rows", flops_rows, "Include every kernel invocation");

  // bench
  auto* benchc = app.add_subcommand("bench", "Wall-clock micro-benchmark (f32)");
  std::string bench_target = "bottleneck";
  std::string bench_placement = "expanded";
  std::int64_t bench_size = 28, bench_channels = 40, bench_batch = 1;
  BenchOptions bench_opts;
  benchc->add_option("--target", bench_target, "model, bottleneck, ghost or dfc")
      ->check(CLI::IsMember({"model", "bottleneck", "ghost", "dfc"}));
  benchc->add_option("--placement", bench_placement, "Bottleneck placement (none, expanded, output, both)");
  benchc->add_option("--size", bench_size, "Spatial size for layer targets")->check(CLI::PositiveNumber);
  benchc->add_option("--channels", bench_channels, "Channels for layer targets")->check(CLI::PositiveNumber);
  benchc->add_option("--batch", bench_batch, "Batch size")->check(CLI::PositiveNumber);
  benchc->add_option("--iters", bench_opts.iters, "Timed iterations")->check(CLI::PositiveNumber);
  benchc->add_option("--warmup", bench_opts.warmup, "Untimed iterations")->check(CLI::NonNegativeNumber);

  // rf-probe
  auto* rf = app.add_subcommand("rf-probe", "Receptive-field mask from the exact Jacobian");
  std::string rf_layer = "dfc", rf_placement = "expanded", rf_pgm;
  int rf_kh = 5, rf_kw = 5, rf_scale = 16;
  std::int64_t rf_size = 9, rf_channels = 2, rf_channel = 0;
  RfProbeOptions rf_opts;
  bool rf_no_fd = false;
  rf->add_option("--layer", rf_layer, "dfc, ghost, ghost-attn or bottleneck");
  rf->add_option("--kh", rf_kh, "Vertical kernel extent")->check(CLI::PositiveNumber);
  rf->add_option("--kw", rf_kw, "Horizontal kernel extent")->check(CLI::PositiveNumber);
  rf->add_option("--size", rf_size, "Input height and width")->check(CLI::PositiveNumber);
  rf->add_option("--channels", rf_channels, "Input channels")->check(CLI::PositiveNumber);
  rf->add_option("--channel", rf_channel, "Output channel probed")->check(CLI::NonNegativeNumber);
  rf->add_option("--placement", rf_placement, "Placement for --layer bottleneck");
  rf->add_option("--samples", rf_opts.samples, "Random inputs in the union")->check(CLI::PositiveNumber);
  rf->add_option("--pgm", rf_pgm, "Also write the mask as a binary PGM image");
  rf->add_option("--pgm-scale", rf_scale, "Pixels per cell in the PGM")->check(CLI::PositiveNumber);
  rf->add_flag("--no-fd", rf_no_fd, "Skip the finite-difference cross-check");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks (f64)");
  bool gc_all = false;
  GradSuiteOptions gc_opts;
  gc->add_flag("--all", gc_all, "Include ghost modules, DFC branch and bottlenecks");
  gc->add_option("--filter", gc_opts.filter, "Only cases whose name contains this text");
  gc->add_option("--eps", gc_opts.eps, "Central-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_opts.tolerance, "Maximum relative error")->check(CLI::PositiveNumber);

  // train-toy
  auto* tr = app.add_subcommand("train-toy", "Train the mini model on the synthetic pattern set");
  TrainConfig tcfg;
  std::string t_placement;
  int log_every = 50;
  tr->add_option("--steps", tcfg.steps, "SGD steps")->check(CLI::PositiveNumber);
  tr->add_option("--batch", tcfg.batch_size, "Batch size")->check(CLI::Range(2, 1 << 20));
  tr->add_option("--lr", tcfg.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber);
  tr->add_option("--momentum", tcfg.momentum, "SGD momentum")->check(CLI::Range(0.0, 0.999999));
  tr->add_option("--placement", t_placement, "DFC placement override (none, expanded, output, both)");
  tr->add_option("--samples-per-class", tcfg.data.samples_per_class, "Images per class")->check(CLI::PositiveNumber);
  tr->add_option("--noise", tcfg.data.noise, "Noise std-dev")->check(CLI::NonNegativeNumber);
  tr->add_option("--data-seed", tcfg.data.seed, "Dataset seed");
  tr->add_option("--weights", tcfg.weights_out, "Save trained weights here");
  tr->add_option("--log-every", log_every, "Print every n-th step (0 = none)")->check(CLI::NonNegativeNumber);

  // compare-attn
  auto* ca = app.add_subcommand("compare-attn", "MAC counts of full, decoupled and convolutional attention");
  std::int64_t ca_h = 56, ca_w = 56, ca_c = 1;
  int ca_kh = 9, ca_kw = 9, ca_factor = 2;
  bool ca_measure = false;
  std::string ca_grid = "56x56";
  ca->add_option("--grid", ca_grid, "Feature map extent HxW")->check([](const std::string& v) {
    std::int64_t h = 0, w = 0;
    char x = 0, extra = 0;
    return std::sscanf(v.c_str(), "%ld%c%ld%c", &h, &x, &w, &extra) == 3 && x == 'x' && h > 0 && w > 0
               ? std::string()
               : "expected HxW with positive extents, got '" + v + "'";
  });
  ca->add_option("--channels", ca_c, "Channels")->check(CLI::PositiveNumber);
  ca->add_option("--kh", ca_kh, "Vertical kernel")->check(CLI::PositiveNumber);
  ca->add_option("--kw", ca_kw, "Horizontal kernel")->check(CLI::PositiveNumber);
  ca->add_option("--factor", ca_factor, "Downsampling factor")->check(CLI::PositiveNumber);
  ca->add_flag("--measure", ca_measure, "Count by running the instrumented kernels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const Emitter out(g);
  try {
    g.thread_choice = configure_threads(g.threads);

    if (summary->parsed()) {
      const ModelSummary s = summarize(load_spec(g), summary_batch);
      out.emit("summary", cli::to_json(s), cli::text(s));
      return 0;
    }

    if (flops->parsed()) {
      const ModelSpec spec = load_spec(g);
      const Model<float> model = build_model<float>(spec, g.seed);
      const FlopsReport r = count_flops(model);
      const auto diffs = reconcile(r, summarize(spec));
      json j = cli::to_json(r, flops_rows);
      j["matches_static_summary"] = diffs.empty();
      j["mismatches"] = diffs;
      std::string t = cli::text(r, flops_rows);
      t += diffs.empty() ? "static summary: identical\n" : "static summary: MISMATCH\n";
      for (const auto& d : diffs) t += "  " + d + "\n";
      out.emit("flops", j, t);
      return diffs.empty() ? 0 : 1;
    }

    if (benchc->parsed()) {
      BenchReport r;
      bench_opts.threads = 0;  // pool already pinned above
      if (bench_target == "model") {
        const ModelSpec spec = load_spec(g);
        const Model<float> model = build_model<float>(spec, g.seed);
        Rng rng(g.seed);
        const Shape s(bench_batch, spec.input_size, spec.input_size, spec.in_channels);
        const auto x = Tensor<float>::uniform(s, -1, 1, rng);
        std::ostringstream name;
        name << spec.name << " x" << spec.width;
        r = bench(name.str(), s, "f32", [&] { (void)forward(model, x, Mode::eval); }, bench_opts);
      } else {
        Rng rng(g.seed);
        const Shape s(bench_batch, bench_size, bench_size, bench_channels);
        const auto x = Tensor<float>::uniform(s, -1, 1, rng);
        const int k = load_spec(g).scheduled_kernel(bench_size);
        DfcOptions o;
        o.k_h = o.k_w = k;
        if (bench_target == "bottleneck") {
          BottleneckConfig cfg;
          cfg.c_in = cfg.c_out = bench_channels;
          cfg.c_expand = 3 * bench_channels;
          cfg.placement = parse_placement(bench_placement);
          cfg.dfc = o;
          const auto p = BottleneckParams<float>::init(cfg, rng);
          r = bench("bottleneck (" + bench_placement + ", K=" + std::to_string(k) + ")", s, "f32",
                    [&] { (void)ghostv2_bottleneck(x, p); }, bench_opts);
        } else if (bench_target == "ghost") {
          const auto p = GhostModuleParams<float>::init(bench_channels, 2 * bench_channels, true, rng);
          r = bench("ghost_module", s, "f32", [&] { (void)ghost_module(x, p); }, bench_opts);
        } else {
          const auto p = DfcParams<float>::init(bench_channels, bench_channels, o, rng);
          r = bench("dfc_branch (K=" + std::to_string(k) + ")", s, "f32", [&] { (void)dfc_branch(x, p); }, bench_opts);
        }
      }
      out.emit("bench", cli::to_json(r), cli::text(r));
      return 0;
    }

    if (rf->parsed()) {
      const ProbeSetup s = probe_setup(rf_layer, rf_kh, rf_kw, rf_size, rf_channels, rf_channel, rf_placement, g.seed);
      rf_opts.seed = g.seed + 7;
      const RfMask m = receptive_field_probe(s.layer, s.input, s.out_h, s.out_w, s.out_c, rf_opts);
      json j = cli::to_json(m);
      j["layer"] = s.description;
      std::string t = s.description + "\noutput (" + std::to_string(s.out_h) + "," + std::to_string(s.out_w) +
                      ") channel " + std::to_string(s.out_c) + ", union over " + std::to_string(m.samples) +
                      " random inputs, threshold 0\n" + render_ascii(m) + "influencing positions: " +
                      std::to_string(m.count()) + "\n";
      bool ok = true;
      if (s.predicted) {
        const bool match = m == *s.predicted;
        ok = ok && match;
        j["matches_prediction"] = match;
        t += std::string("predicted region: ") + (match ? "match" : "MISMATCH") + "\n";
      }
      if (!rf_no_fd) {
        const RfMask fd = receptive_field_fd(s.layer, s.input, s.out_h, s.out_w, s.out_c, rf_opts);
        const bool match = m == fd;
        ok = ok && match;
        j["matches_finite_difference"] = match;
        t += std::string("finite-difference mask: ") + (match ? "match" : "MISMATCH") + "\n";
      }
      if (!rf_pgm.empty()) {
        std::ofstream f(rf_pgm, std::ios::binary);
        if (!f) throw UsageError("cannot write '" + rf_pgm + "'");
        f << to_pgm(m, rf_scale);
        j["pgm"] = rf_pgm;
        t += "mask image written to " + rf_pgm + "\n";
      }
      out.emit("rf-probe", j, t);
      return ok ? 0 : 1;
    }

    if (gc->parsed()) {
      gc_opts.include_blocks = gc_all;
      gc_opts.seed = g.seed + 1;
      const GradSuiteResult r = gradient_suite(gc_opts);
      if (r.reports.empty()) throw UsageError("gradcheck: no case matches --filter '" + gc_opts.filter + "'");
      json cases = json::array();
      std::string t;
      std::size_t failed = 0;
      for (const auto& c : r.reports) {
        cases.push_back(cli::to_json(c));
        t += cli::text(c);
        failed += c.passed ? 0 : 1;
      }
      t += std::to_string(r.reports.size() - failed) + "/" + std::to_string(r.reports.size()) + " cases passed over " +
           std::to_string(r.primitives().size()) + " operations (eps " + std::to_string(gc_opts.eps) + ", tolerance " +
           std::to_string(gc_opts.tolerance) + ")\n";
      out.emit("gradcheck", json{{"passed", r.passed()}, {"failed", failed}, {"cases", cases}}, t);
      return r.passed() ? 0 : 1;
    }

    if (tr->parsed()) {
      tcfg.seed = g.seed;
      tcfg.model = g.config_given ? g.config : "mini";
      tcfg.width = g.width;
      if (!t_placement.empty()) tcfg.placement = parse_placement(t_placement);
      const TrainLog log = train_toy(tcfg);
      out.emit("train-toy", cli::to_json(log, out.machine()), cli::text(log, log_every));
      return 0;
    }

    if (ca->parsed()) {
      std::sscanf(ca_grid.c_str(), "%ldx%ld", &ca_h, &ca_w);
      const AttentionCostTable t = ca_measure
                                       ? measure_attention_costs(ca_h, ca_w, ca_c, ca_kh, ca_kw, ca_factor)
                                       : compare_attention_costs(ca_h, ca_w, ca_c, ca_kh, ca_kw, ca_factor);
      json j = cli::to_json(t);
      j["measured"] = ca_measure;
      std::string text = cli::text(t);
      const std::uint64_t dec = t.macs("decoupled");
      const std::uint64_t conv = t.macs("conv");
      if (dec > 0 && conv > 0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "full/decoupled %.4f  conv_downsampled/conv %.4f\n",
                      static_cast<double>(t.rows[0].macs) / static_cast<double>(dec),
                      static_cast<double>(t.macs("conv_downsampled")) / static_cast<double>(conv));
        text += buf;
      }
      out.emit("compare-attn", j, text);
      return 0;
    }
    return 0;
  } catch (const std::exception& e) {
    const std::string kind = error_kind(e);
    if (out.machine()) {
      std::cout << json{{"error", {{"kind", kind}, {"message", e.what()}}}}.dump(2) << "\n";
    } else {
      std::cerr << "error (" << kind << "): " << e.what() << "\n";
    }
    return kind == "usage" || kind == "config" ? 2 : 1;
  }
}
