#include "xattnres/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace xattnres {

double GradcheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& in : inputs) worst = std::max(worst, in.max_relative_error);
  return worst;
}

std::size_t GradcheckReport::skipped() const {
  std::size_t n = 0;
  for (const auto& in : inputs) n += in.skipped_nonsmooth;
  return n;
}

namespace {

double evaluate(const ScalarFunction& fn, const std::vector<Tensor<double>>& inputs) {
  NoGradGuard guard;
  const auto out = fn(inputs);
  if (out.numel() != 1) throw ContractError("gradcheck function must return a scalar");
  return out.item();
}

}  // namespace

GradcheckReport finite_difference_gradcheck(const std::string& label, const ScalarFunction& fn,
                                            std::vector<Tensor<double>> inputs,
                                            std::vector<std::string> input_names,
                                            const GradcheckOptions& options) {
  GradcheckReport report;
  report.label = label;
  for (std::size_t i = input_names.size(); i < inputs.size(); ++i) input_names.push_back("input" + std::to_string(i));

  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  try {
    const auto loss = fn(inputs);
    if (loss.numel() != 1) {
      report.diagnostic = "function output has shape " + shape_to_string(loss.shape()) + ", expected a scalar";
      return report;
    }
    if (!std::isfinite(loss.item())) {
      report.diagnostic = "function output is not finite";
      return report;
    }
    backward(loss);
  } catch (const Error& e) {
    report.diagnostic = e.what();
    return report;
  }

  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.numel(), 0.0);
    }
  }

  const double f0 = evaluate(fn, inputs);
  bool all_finite = true;
  for (std::size_t k = 0; k < inputs.size() && all_finite; ++k) {
    GradcheckInputResult result;
    result.name = input_names[k];
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double up = original + options.step;
      const double down = original - options.step;
      values[i] = up;
      const double f_up = evaluate(fn, inputs);
      values[i] = down;
      const double f_down = evaluate(fn, inputs);
      values[i] = original;
      if (!std::isfinite(f_up) || !std::isfinite(f_down)) {
        report.diagnostic = "non-finite output while perturbing " + result.name + "[" + std::to_string(i) + "]";
        all_finite = false;
        break;
      }
      // Divide by the step actually realized in floating point.
      const double forward = (f_up - f0) / (up - original);
      const double backward_slope = (f0 - f_down) / (original - down);
      const double numeric = (f_up - f_down) / (up - down);
      const double a = analytic[k][i];
      const double slope_scale = std::max({1.0, std::abs(forward), std::abs(backward_slope)});
      if (std::abs(forward - backward_slope) > options.kink_tolerance * slope_scale) {
        ++result.skipped_nonsmooth;
        continue;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
    report.inputs.push_back(result);
  }
  report.passed = all_finite && report.max_relative_error() < options.tolerance;
  return report;
}

}  // namespace xattnres
