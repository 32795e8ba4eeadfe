#include "reports.hpp"

#include <cstdio>
#include <sstream>

namespace ghostv2::cli {

namespace {

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string pad(const std::string& s, std::size_t n) { return s.size() >= n ? s + " " : s + std::string(n - s.size(), ' '); }

std::string rpad(const std::string& s, std::size_t n) { return s.size() >= n ? " " + s : std::string(n - s.size(), ' ') + s; }

std::string groups_text(const char* title, const std::vector<GroupTotal>& groups) {
  std::string out = std::string(title) + "\n";
  for (const auto& g : groups) {
    out += "  " + pad(g.name, 16) + rpad(millions(g.macs), 12) + " MMACs" + rpad(fmt("%.4f", g.params / 1e6), 10) +
           " M params\n";
  }
  return out;
}

json groups_json(const std::vector<GroupTotal>& groups) {
  json a = json::array();
  for (const auto& g : groups) a.push_back({{"name", g.name}, {"macs", g.macs}, {"elementwise", g.elementwise}, {"params", g.params}});
  return a;
}

}  // namespace

std::string millions(std::uint64_t v) { return fmt("%.3f", static_cast<double>(v) / 1e6); }

json to_json(const Shape& s) { return json::array({s.n(), s.h(), s.w(), s.c()}); }

json to_json(const ModelSummary& s) {
  json rows = json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"scope", r.scope}, {"op", r.op}, {"output", to_json(r.output)}, {"macs", r.macs}, {"params", r.params}});
  }
  return {{"name", s.name},          {"width", s.width},          {"input", to_json(s.input)},
          {"total_macs", s.total_macs}, {"total_params", s.total_params}, {"rows", rows}};
}

std::string text(const ModelSummary& s) {
  std::string out = fmt("%s  width %.2f  input %s\n", s.name.c_str(), s.width, s.input.str().c_str());
  out += pad("layer", 30) + pad("op", 18) + pad("output", 18) + rpad("MACs", 12) + rpad("params", 10) + "\n";
  for (const auto& r : s.rows) {
    out += pad(r.scope, 30) + pad(r.op, 18) + pad(r.output.str(), 18) + rpad(std::to_string(r.macs), 12) +
           rpad(std::to_string(r.params), 10) + "\n";
  }
  out += fmt("total: %s M MACs, %.4f M params\n", millions(s.total_macs).c_str(), s.total_params / 1e6);
  return out;
}

json to_json(const FlopsReport& r, bool rows) {
  json j{{"subject", r.subject},
         {"total_macs", r.total_macs},
         {"total_elementwise", r.total_elementwise},
         {"total_params", r.total_params},
         {"by_stage", groups_json(r.by_stage)},
         {"by_block", groups_json(r.by_block)}};
  if (rows) {
    json a = json::array();
    for (const auto& x : r.rows) {
      a.push_back({{"scope", x.scope}, {"op", x.op}, {"output", to_json(x.output)}, {"macs", x.macs},
                   {"elementwise", x.elementwise}, {"params", x.params}});
    }
    j["rows"] = a;
  }
  return j;
}

std::string text(const FlopsReport& r, bool rows) {
  std::string out = r.subject + "\n";
  if (rows) {
    out += pad("scope", 30) + pad("op", 22) + pad("output", 18) + rpad("MACs", 12) + rpad("elementwise", 12) +
           rpad("params", 10) + "\n";
    for (const auto& x : r.rows) {
      out += pad(x.scope, 30) + pad(x.op, 22) + pad(x.output.str(), 18) + rpad(std::to_string(x.macs), 12) +
             rpad(std::to_string(x.elementwise), 12) + rpad(std::to_string(x.params), 10) + "\n";
    }
  }
  out += groups_text("by stage:", r.by_stage);
  out += fmt("MACs (headline FLOPs): %s M\nelementwise ops (excluded): %s M\nparameters: %.4f M\n",
             millions(r.total_macs).c_str(), millions(r.total_elementwise).c_str(), r.total_params / 1e6);
  return out;
}

json to_json(const AttentionCostTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back({{"variant", r.variant}, {"formula", r.formula}, {"macs", r.macs}});
  return {{"H", t.H}, {"W", t.W}, {"C", t.C}, {"k_h", t.k_h}, {"k_w", t.k_w}, {"factor", t.factor}, {"rows", rows}};
}

std::string text(const AttentionCostTable& t) {
  std::string out = fmt("H=%lld W=%lld C=%lld K_H=%d K_W=%d factor=%d\n", static_cast<long long>(t.H),
                        static_cast<long long>(t.W), static_cast<long long>(t.C), t.k_h, t.k_w, t.factor);
  for (const auto& r : t.rows) out += "  " + pad(r.variant, 26) + pad(r.formula, 36) + rpad(std::to_string(r.macs), 14) + "\n";
  return out;
}

json to_json(const RfMask& m) {
  json rows = json::array();
  for (std::int64_t h = 0; h < m.height; ++h) {
    std::string row;
    for (std::int64_t w = 0; w < m.width; ++w) row += m.at(h, w) ? '1' : '0';
    rows.push_back(row);
  }
  return {{"height", m.height}, {"width", m.width}, {"out_h", m.out_h}, {"out_w", m.out_w}, {"out_c", m.out_c},
          {"threshold", m.threshold}, {"samples", m.samples}, {"method", m.method}, {"count", m.count()},
          {"mask", rows}};
}

json to_json(const BenchReport& r) {
  return {{"target", r.target},       {"input", to_json(r.input)},   {"dtype", r.dtype},
          {"threads", r.threads},     {"iters", r.iters},            {"warmup", r.warmup},
          {"macs", r.macs},           {"min_ms", r.min_ms},          {"median_ms", r.median_ms},
          {"p95_ms", r.p95_ms},       {"mean_ms", r.mean_ms},        {"macs_per_second", r.macs_per_second}};
}

std::string text(const BenchReport& r) {
  return fmt("%s  input %s  %s  threads %d\n  MACs/iter %s M\n  min %.3f ms  median %.3f ms  p95 %.3f ms  (%d iters, %d warmup)\n"
             "  throughput %.3f GMAC/s at the median\n",
             r.target.c_str(), r.input.str().c_str(), r.dtype.c_str(), r.threads, millions(r.macs).c_str(), r.min_ms,
             r.median_ms, r.p95_ms, r.iters, r.warmup, r.macs_per_second / 1e9);
}

json to_json(const GradCheckReport& r) {
  return {{"name", r.name},       {"passed", r.passed},   {"max_rel_error", r.max_rel_error},
          {"tolerance", r.tolerance}, {"checked", r.checked}, {"worst_input", r.worst_input},
          {"worst_index", r.worst_index}, {"analytic", r.analytic_at_worst}, {"numeric", r.numeric_at_worst}};
}

std::string text(const GradCheckReport& r) {
  std::string s = pad(r.passed ? "ok" : "FAIL", 5) + pad(r.name, 38) + fmt("max rel err %.3e  (%lld elements)", r.max_rel_error,
                                                                            static_cast<long long>(r.checked));
  if (!r.passed) {
    s += fmt("  worst %s[%lld] analytic %.9g numeric %.9g", r.worst_input.c_str(), static_cast<long long>(r.worst_index),
             r.analytic_at_worst, r.numeric_at_worst);
  }
  return s + "\n";
}

json to_json(const TrainLog& log, bool steps) {
  json j{{"placement", log.placement},
         {"initial_loss", log.initial_loss},
         {"final_loss", log.final_loss},
         {"train_accuracy", log.train.accuracy},
         {"train_loss", log.train.loss},
         {"test_accuracy", log.test.accuracy},
         {"test_loss", log.test.loss},
         {"weights", log.weights_path},
         {"seconds", log.seconds}};
  if (steps) {
    json a = json::array();
    for (const auto& s : log.steps) a.push_back({{"step", s.step}, {"loss", s.loss}, {"batch_accuracy", s.batch_accuracy}});
    j["steps"] = a;
  }
  return j;
}

std::string text(const TrainLog& log, int log_every) {
  std::string out = "placement " + log.placement + "\n";
  if (log_every > 0) {
    for (const auto& s : log.steps) {
      if (s.step == 1 || s.step % log_every == 0) out += fmt("  step %5d  loss %.5f  batch acc %.3f\n", s.step, s.loss, s.batch_accuracy);
    }
  }
  out += fmt("initial loss %.5f  final loss %.5f\ntrain accuracy %.4f (loss %.5f)\ntest accuracy %.4f (loss %.5f)\n",
             log.initial_loss, log.final_loss, log.train.accuracy, log.train.loss, log.test.accuracy, log.test.loss);
  if (!log.weights_path.empty()) out += "weights saved to " + log.weights_path + "\n";
  out += fmt("%.1f s\n", log.seconds);
  return out;
}

}  // namespace ghostv2::cli
