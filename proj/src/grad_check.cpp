#include "ghostv2/grad_check.hpp"

#include <cmath>
#include <numeric>

namespace ghostv2 {

double grad_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace {

struct Evaluator {
  const GradProgram& fn;
  std::optional<Tensor<double>> projection;
  std::uint64_t seed;

  // Scalar objective on a fresh tape. The projection is fixed on first use.
  Var<double> objective(Tape<double>& tape, const std::vector<Var<double>>& leaves) {
    Var<double> out = fn(tape, leaves);
    if (out.value().numel() == 1) return out;
    if (!projection) {
      Rng rng(seed ^ 0xA5A5A5A5ULL);
      projection = Tensor<double>::uniform(out.shape(), -1.0, 1.0, rng);
    }
    return ad::weighted_sum(out, *projection);
  }

  double value(const std::vector<Tensor<double>>& inputs) {
    Tape<double> tape(false);
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    return objective(tape, leaves).value().item();
  }
};

std::vector<std::int64_t> probe_points(std::int64_t numel, std::int64_t limit, Rng& rng) {
  std::vector<std::int64_t> idx(numel);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit <= 0 || limit >= numel) return idx;
  for (std::int64_t i = 0; i < limit; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(numel - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport grad_check(const GradProgram& fn, const std::vector<Tensor<double>>& inputs,
                           const GradCheckOptions& options, const std::vector<std::string>& names) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  Evaluator eval{fn, std::nullopt, options.seed};

  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  Var<double> loss = eval.objective(tape, leaves);
  Gradients<double> grads = tape.backward(loss);

  Rng rng(options.seed);
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = grads.of(leaves[k]);
    const std::string name = k < names.size() ? names[k] : "input" + std::to_string(k);
    for (std::int64_t i : probe_points(inputs[k].numel(), options.max_points_per_input, rng)) {
      std::vector<double> v = inputs[k].to_vector();
      const double x0 = v[i];
      v[i] = x0 + options.eps;
      probe[k] = Tensor<double>(inputs[k].shape(), v);
      const double up = eval.value(probe);
      v[i] = x0 - options.eps;
      probe[k] = Tensor<double>(inputs[k].shape(), v);
      const double down = eval.value(probe);
      probe[k] = inputs[k];

      const double numeric = (up - down) / (2.0 * options.eps);
      const double err = grad_relative_error(analytic[i], numeric);
      ++report.checked;
      if (err > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = err;
        report.worst_input = name;
        report.worst_index = i;
        report.analytic_at_worst = analytic[i];
        report.numeric_at_worst = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace ghostv2
