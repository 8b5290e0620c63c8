#include <cmath>
#include <random>

#include "doctest.h"
#include "xattnres/experiment.hpp"
#include "xattnres/gradcheck.hpp"
#include "xattnres/ops.hpp"

using namespace xattnres;
using TD = Tensor<double>;

namespace {

TD random_leaf(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return TD::from_data(std::move(shape), std::move(v), true);
}

// Identity in the forward pass, but the backward pass scales the incoming
// gradient by `factor`.
TD wrong_backward(const TD& x, double factor) {
  std::vector<double> values(x.data().begin(), x.data().end());
  return detail::make_result<double>(x.shape(), std::move(values), "wrong_backward", {x},
                                     [factor](detail::Node<double>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                                     });
}

}  // namespace

TEST_CASE("a correct gradient passes") {
  auto r = finite_difference_gradcheck(
      "square", [](const std::vector<TD>& in) { return sum(mul(in[0], in[0])); }, {random_leaf({5}, 1)});
  CHECK(r.passed);
  CHECK(r.max_relative_error() < 1e-6);
  REQUIRE(r.inputs.size() == 1);
  CHECK(r.inputs[0].checked == 5);
}

TEST_CASE("a corrupted convolution backward is caught") {
  auto x = random_leaf({1, 2, 4, 4}, 2);
  auto w = random_leaf({3, 2, 3, 3}, 3);
  auto probe = random_leaf({1, 3, 4, 4}, 4).detach();
  auto fn = [probe](const std::vector<TD>& in) {
    return sum(mul(wrong_backward(conv2d(in[0], in[1], TD{}, Padding::Same), 1.05), probe));
  };
  auto r = finite_difference_gradcheck("corrupted_conv", fn, {x, w}, {"input", "weight"});
  CHECK_FALSE(r.passed);
  CHECK(r.max_relative_error() > 1e-2);

  auto ok = finite_difference_gradcheck(
      "conv", [probe](const std::vector<TD>& in) { return sum(mul(conv2d(in[0], in[1], TD{}), probe)); }, {x, w});
  CHECK(ok.passed);
}

TEST_CASE("inputs are restored after checking") {
  auto x = random_leaf({4}, 5);
  const std::vector<double> before(x.data().begin(), x.data().end());
  finite_difference_gradcheck("relu", [](const std::vector<TD>& in) { return sum(relu(in[0])); }, {x});
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(x.at(i) == before[i]);
}

TEST_CASE("relu kinks are skipped rather than failed") {
  auto x = TD::from_data({3}, {0.0, 0.5, -0.5}, true);
  auto r = finite_difference_gradcheck("relu_kink", [](const std::vector<TD>& in) { return sum(relu(in[0])); }, {x});
  CHECK(r.passed);
  CHECK(r.skipped() == 1);
}

TEST_CASE("a non-scalar function is reported, not thrown") {
  auto r = finite_difference_gradcheck("vector", [](const std::vector<TD>& in) { return scale(in[0], 2.0); },
                                       {random_leaf({3}, 6)});
  CHECK_FALSE(r.passed);
  CHECK_FALSE(r.diagnostic.empty());
}

TEST_CASE("the built-in suite covers every operation and passes") {
  const auto cases = gradcheck_cases();
  std::vector<std::string> names;
  for (const auto& c : cases) names.push_back(c.name);
  for (const char* required : {"add", "mul", "conv2d_3x3_same", "adaptive_max_pool", "bilinear_resize_up",
                               "rmsnorm_channels", "softmax_axis", "attend", "cross_entropy", "soft_dice_loss",
                               "backbone_end_to_end"}) {
    CHECK_MESSAGE(std::find(names.begin(), names.end(), required) != names.end(), required);
  }
  const auto result = run_gradcheck_suite(cases);
  for (const auto& rep : result.reports) CHECK_MESSAGE(rep.passed, rep.label << " " << rep.max_relative_error());
  CHECK(result.passed());
  CHECK(result.failures().empty());
}

TEST_CASE("the suite reports an injected failure by name") {
  auto cases = gradcheck_cases();
  cases.push_back({"corrupted_conv", [] {
                     auto probe = random_leaf({1, 2, 3, 3}, 9).detach();
                     return finite_difference_gradcheck(
                         "corrupted_conv",
                         [probe](const std::vector<TD>& in) {
                           return sum(mul(wrong_backward(conv2d(in[0], in[1], TD{}), 0.9), probe));
                         },
                         {random_leaf({1, 2, 3, 3}, 7), random_leaf({2, 2, 3, 3}, 8)});
                   }});
  const auto result = run_gradcheck_suite(cases);
  CHECK_FALSE(result.passed());
  REQUIRE(result.failures().size() == 1);
  CHECK(result.failures()[0] == "corrupted_conv");
  CHECK(gradcheck_report_text(result).find("FAIL corrupted_conv") != std::string::npos);
}
