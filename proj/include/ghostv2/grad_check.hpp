#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ghostv2/autograd.hpp"

namespace ghostv2 {

// Program under test: builds its result from the supplied leaves. Non-scalar
// results are reduced with a fixed random projection before differentiation.
using GradProgram = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  // Upper bound on probed elements per input (0 = every element). Probed
  // elements are drawn without replacement from the seed.
  std::int64_t max_points_per_input = 0;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst_input;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::int64_t checked = 0;
  double tolerance = 0.0;
  bool passed = true;
};

// |a - n| / max(1e-8, |a| + |n|)
double grad_relative_error(double analytic, double numeric);

// Compares the tape gradient of fn with central differences, element by element.
GradCheckReport grad_check(const GradProgram& fn, const std::vector<Tensor<double>>& inputs,
                           const GradCheckOptions& options = {}, const std::vector<std::string>& names = {});

}  // namespace ghostv2
