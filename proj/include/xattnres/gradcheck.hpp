#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xattnres/tensor.hpp"

namespace xattnres {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative errors are taken against max(|analytic|, |numeric|, floor).
  double scale_floor = 1e-3;
  // A coordinate whose one-sided slopes disagree by more than this (relative)
  // sits on a kink or a max-pool tie and is skipped rather than compared.
  double kink_tolerance = 1e-3;
};

struct GradcheckInputResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
};

struct GradcheckReport {
  std::string label;
  std::vector<GradcheckInputResult> inputs;
  bool passed = false;
  /// Non-empty when the check failed for a reason other than a large error
  /// (non-finite output, non-scalar function, ...).
  std::string diagnostic;

  double max_relative_error() const;
  std::size_t skipped() const;
};

using ScalarFunction = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, one input element at a time. The inputs are leaves that are
/// perturbed in place and restored afterwards.
GradcheckReport finite_difference_gradcheck(const std::string& label, const ScalarFunction& fn,
                                            std::vector<Tensor<double>> inputs,
                                            std::vector<std::string> input_names = {},
                                            const GradcheckOptions& options = {});

}  // namespace xattnres
