#ifndef CAPSTRAIN_GRAD_CHECK_HPP
#define CAPSTRAIN_GRAD_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "capstrain/random.hpp"
#include "capstrain/tape.hpp"
#include "capstrain/tensor.hpp"

namespace capstrain {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a-n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  /// Elements checked per input; 0 checks every element.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// "input[i][j]: analytic a, numeric n" for the worst element.
  std::string worst;
};

/// Compares backward() gradients against central differences.
///
/// `loss` is called as loss(tape) and must register every tensor in `inputs`
/// through tape.parameter() before combining them into a scalar. The inputs are
/// perturbed in place and restored afterwards.
template <typename F>
GradCheckReport grad_check(F&& loss, const std::vector<Tensor<double>*>& inputs, const GradCheckOptions& opts = {}) {
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto evaluate = [&] {
    Tape<double> tape;
    return tape.value(loss(tape)).item();
  };

  GradCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double>& x = *inputs[t];
    const Eigen::VectorXd analytic = x.grad();
    std::vector<Index> elements(static_cast<std::size_t>(x.size()));
    std::iota(elements.begin(), elements.end(), Index{0});
    if (opts.max_elements != 0 && elements.size() > opts.max_elements) {
      rng.shuffle(elements);
      elements.resize(opts.max_elements);
    }
    for (Index e : elements) {
      const double saved = x[e];
      x[e] = saved + opts.step;
      const double up = evaluate();
      x[e] = saved - opts.step;
      const double down = evaluate();
      x[e] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[e];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
      ++report.checked;
      const bool nonfinite = !std::isfinite(err);
      if (report.worst.empty() || nonfinite || err > report.max_relative_error) {
        report.max_relative_error = nonfinite ? INFINITY : err;
        report.worst = "input[" + std::to_string(t) + "][" + std::to_string(e) + "]: analytic " +
                       std::to_string(a) + ", numeric " + std::to_string(numeric);
      }
      if (nonfinite) {
        report.passed = false;
        return report;
      }
    }
  }
  report.passed = report.max_relative_error < opts.tolerance;
  return report;
}

}  // namespace capstrain

#endif  // CAPSTRAIN_GRAD_CHECK_HPP
