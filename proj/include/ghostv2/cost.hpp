#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ghostv2/tensor.hpp"

// Execution-time cost accounting. Kernels report the multiply-accumulates and
// elementwise operations of the iteration space they execute; a CostScope
// collects the reports of everything run on the current thread while it is
// alive.
namespace ghostv2::cost {

struct OpRecord {
  std::string scope;  // dotted name path active when the kernel ran
  std::string op;     // kernel kind, e.g. "conv2d_depthwise"
  Shape output;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t params = 0;  // parameter elements consumed by the kernel
};

bool active();

// Called by kernels. Forwards to every enclosing scope.
void record(std::string_view op, const Shape& output, std::uint64_t macs, std::uint64_t elementwise,
            std::uint64_t params = 0);

class CostScope {
 public:
  explicit CostScope(bool keep_trace = false);
  ~CostScope();
  CostScope(const CostScope&) = delete;
  CostScope& operator=(const CostScope&) = delete;

  std::uint64_t macs() const { return macs_; }
  std::uint64_t elementwise() const { return elementwise_; }
  std::uint64_t params() const { return params_; }
  const std::vector<OpRecord>& trace() const { return trace_; }

 private:
  friend void record(std::string_view, const Shape&, std::uint64_t, std::uint64_t, std::uint64_t);

  CostScope* parent_;
  bool keep_trace_;
  std::uint64_t macs_ = 0;
  std::uint64_t elementwise_ = 0;
  std::uint64_t params_ = 0;
  std::vector<OpRecord> trace_;
};

// Pushes a name component for trace records made while alive.
class NameScope {
 public:
  explicit NameScope(std::string_view name);
  ~NameScope();
  NameScope(const NameScope&) = delete;
  NameScope& operator=(const NameScope&) = delete;
};

std::string current_scope();

}  // namespace ghostv2::cost
