#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ghostv2/cost.hpp"
#include "ghostv2/grad_check.hpp"
#include "ghostv2/model.hpp"

namespace ghostv2 {

// ---------------------------------------------------------------- FLOPs

struct FlopsRow {
  std::string scope;
  std::string op;
  Shape output;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t params = 0;
};

struct GroupTotal {
  std::string name;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t params = 0;
};

struct FlopsReport {
  std::string subject;
  std::vector<FlopsRow> rows;
  // Headline MACs exclude elementwise and normalisation work, reported separately.
  std::uint64_t total_macs = 0;
  std::uint64_t total_elementwise = 0;
  std::uint64_t total_params = 0;
  std::vector<GroupTotal> by_block;  // first two scope components, e.g. "s28.b0"
  std::vector<GroupTotal> by_stage;  // first scope component
};

FlopsReport make_flops_report(const std::string& subject, const std::vector<cost::OpRecord>& trace);
// Executes run with instrumented kernels and reports every kernel invocation.
FlopsReport count_flops(const std::string& subject, const std::function<void()>& run);
// Traced eval forward of a zero input at the model's nominal resolution.
template <typename T>
FlopsReport count_flops(const Model<T>& model, std::int64_t batch = 1);

// Differences between a traced report and the static summary, compared as
// multisets of (scope, op, macs, params) over rows carrying MACs or params.
// Empty when the two accountings agree exactly.
std::vector<std::string> reconcile(const FlopsReport& report, const ModelSummary& summary);

// ---------------------------------------------------------------- attention costs

struct AttentionCostRow {
  std::string variant;  // full, decoupled, conv, conv_downsampled
  std::string formula;
  std::uint64_t macs = 0;
};

struct AttentionCostTable {
  std::int64_t H = 0, W = 0, C = 0;
  int k_h = 0, k_w = 0, factor = 1;
  std::vector<AttentionCostRow> rows;
  std::uint64_t macs(const std::string& variant) const;
};

// Closed-form counts: full H^2 W^2 C, decoupled (H^2 W + H W^2) C, conv
// (K_H + K_W) H W C and the same on the ceil(H/f) x ceil(W/f) pooled grid.
AttentionCostTable compare_attention_costs(std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w,
                                           int factor);
// Same rows obtained by running the instrumented kernels on random data.
// The full variant needs (HW)^2 C weights; it is skipped (macs = 0, variant
// suffixed "(skipped)") when that exceeds max_full_weights.
AttentionCostTable measure_attention_costs(std::int64_t H, std::int64_t W, std::int64_t C, int k_h, int k_w,
                                           int factor, std::int64_t max_full_weights = 50'000'000);

// ---------------------------------------------------------------- receptive fields

// Layer under probe: maps an (N, H, W, C) input to an (N, H', W', C') output.
using ProbeLayer = std::function<Var<double>(const Ctx<double>&, const Var<double>&)>;

struct RfMask {
  std::int64_t height = 0, width = 0;
  std::int64_t out_h = 0, out_w = 0, out_c = 0;
  double threshold = 0.0;
  int samples = 0;
  std::string method;  // "jacobian" or "finite-difference"
  std::vector<std::uint8_t> cells;  // row-major height x width, 1 = influences the output

  bool at(std::int64_t h, std::int64_t w) const { return cells[static_cast<std::size_t>(h * width + w)] != 0; }
  std::int64_t count() const;
  friend bool operator==(const RfMask& a, const RfMask& b) {
    return a.height == b.height && a.width == b.width && a.cells == b.cells;
  }
};

struct RfProbeOptions {
  // Random inputs probed together; the mask is their union. ReLU gating makes
  // any single input's Jacobian sparser than the structural footprint.
  int samples = 32;
  std::uint64_t seed = 7;
  Mode mode = Mode::eval;
};

// Exact Jacobian row d out[n, out_h, out_w, out_c] / d x[n, :, :, :] for a
// batch of random inputs, one backward pass; a position is marked when any
// channel of any sample has a nonzero entry.
RfMask receptive_field_probe(const ProbeLayer& layer, const Shape& input, std::int64_t out_h, std::int64_t out_w,
                             std::int64_t out_c, const RfProbeOptions& options = {});
// Central-difference estimate of the same mask on the same inputs.
RfMask receptive_field_fd(const ProbeLayer& layer, const Shape& input, std::int64_t out_h, std::int64_t out_w,
                          std::int64_t out_c, const RfProbeOptions& options = {}, double eps = 1e-3);
// Mask of rows h0..h1 and columns w0..w1 (inclusive), clipped to the grid.
RfMask rectangle_mask(std::int64_t height, std::int64_t width, std::int64_t h0, std::int64_t h1, std::int64_t w0,
                      std::int64_t w1);

std::string to_pgm(const RfMask& mask, int scale = 1);  // binary P5, white = influences
std::string render_ascii(const RfMask& mask);

// ---------------------------------------------------------------- benchmarks

struct BenchOptions {
  int iters = 10;
  int warmup = 2;
  int threads = 0;  // 0 keeps the current pool size
};

struct BenchReport {
  std::string target;
  Shape input;
  std::string dtype;
  int threads = 1;
  int iters = 0;
  int warmup = 0;
  std::uint64_t macs = 0;  // per iteration, from a counted run
  double min_ms = 0, median_ms = 0, p95_ms = 0, mean_ms = 0;
  double macs_per_second = 0;  // at the median
};

BenchReport bench(const std::string& target, const Shape& input, const std::string& dtype,
                  const std::function<void()>& run, const BenchOptions& options);

// ---------------------------------------------------------------- gradient suite

struct GradSuiteOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  bool include_blocks = true;  // ghost modules, DFC branch and bottlenecks
  std::string filter;          // substring filter on case names
};

struct GradSuiteResult {
  std::vector<GradCheckReport> reports;
  bool passed() const;
  std::vector<std::string> primitives() const;  // distinct case families
};

// Every differentiable primitive at three shapes, plus composite blocks and
// the bottleneck under all four placements.
GradSuiteResult gradient_suite(const GradSuiteOptions& options = {});

}  // namespace ghostv2
