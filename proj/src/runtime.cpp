#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>

#include "ghostv2/cost.hpp"
#include "ghostv2/errors.hpp"
#include "ghostv2/parallel.hpp"

namespace ghostv2 {

namespace {
std::atomic<int> g_threads{0};
}

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }

int num_threads() {
  const int n = g_threads.load();
  if (n > 0) return n;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

ThreadChoice configure_threads(int requested) {
  if (const char* env = std::getenv("GHOSTV2_NUM_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("GHOSTV2_NUM_THREADS must be a positive integer, got '") + env + "'");
    set_num_threads(static_cast<int>(v));
    return {num_threads(), "env"};
  }
  if (requested > 0) {
    set_num_threads(requested);
    return {num_threads(), "flag"};
  }
  g_threads.store(0);
  return {num_threads(), "default"};
}

namespace cost {

namespace {
thread_local CostScope* t_scope = nullptr;
thread_local std::vector<std::string> t_names;
}  // namespace

CostScope::CostScope(bool keep_trace) : parent_(t_scope), keep_trace_(keep_trace) { t_scope = this; }

CostScope::~CostScope() { t_scope = parent_; }

bool active() { return t_scope != nullptr; }

void record(std::string_view op, const Shape& output, std::uint64_t macs, std::uint64_t elementwise,
            std::uint64_t params) {
  if (t_scope == nullptr) return;
  std::string scope_name;
  for (CostScope* s = t_scope; s != nullptr; s = s->parent_) {
    s->macs_ += macs;
    s->elementwise_ += elementwise;
    s->params_ += params;
    if (s->keep_trace_) {
      if (scope_name.empty()) scope_name = current_scope();
      s->trace_.push_back(OpRecord{scope_name, std::string(op), output, macs, elementwise, params});
    }
  }
}

NameScope::NameScope(std::string_view name) { t_names.emplace_back(name); }

NameScope::~NameScope() { t_names.pop_back(); }

std::string current_scope() {
  std::string out;
  for (const auto& n : t_names) {
    if (n.empty()) continue;
    if (!out.empty()) out += '.';
    out += n;
  }
  return out;
}

}  // namespace cost
}  // namespace ghostv2
