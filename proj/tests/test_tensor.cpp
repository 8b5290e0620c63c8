#include "doctest.h"
#include "xattnres/ops.hpp"
#include "xattnres/tensor.hpp"

using namespace xattnres;
using TD = Tensor<double>;

TEST_CASE("construction checks element counts") {
  auto t = TD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(4) == 5.0);
  CHECK_THROWS_AS(TD::from_data({2, 2}, {1, 2, 3}), ShapeError);
  CHECK(TD::zeros({3}).data()[2] == 0.0);
  CHECK(TD::full({2}, 1.5).data()[1] == 1.5);
  CHECK(TD::scalar(4.0).item() == 4.0);
}

TEST_CASE("item requires a single element") {
  CHECK_THROWS(TD::zeros({2}).item());
}

TEST_CASE("grad of sum is all ones") {
  auto x = TD::from_data({3}, {0.3, -1.0, 7.0}, true);
  backward(sum(x));
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("grad of sum(x*x) at [1,2] is [2,4]") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  backward(sum(x));
  backward(sum(scale(x, 2.0)));
  CHECK(x.grad()[0] == 3.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("zero_grad allocates a buffer for a parameter that never received one") {
  auto x = TD::zeros({4}, true);
  CHECK_FALSE(x.has_grad());
  x.zero_grad();
  CHECK(x.has_grad());
  CHECK(x.grad().size() == 4);
}

TEST_CASE("detached tensors receive no gradient") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  auto d = x.detach();
  CHECK_FALSE(d.requires_grad());
  auto y = TD::from_data({2}, {3.0, 4.0}, true);
  backward(sum(mul(d, y)));
  CHECK_FALSE(d.has_grad());
  CHECK_FALSE(x.has_grad());
  CHECK(y.grad()[0] == 1.0);
}

TEST_CASE("backward rejects non-scalar losses and reused graphs") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
  auto loss = sum(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("a graph with no trainable leaf cannot be differentiated") {
  auto x = TD::from_data({2}, {1.0, 2.0});
  CHECK_THROWS_AS(backward(sum(x)), ContractError);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  TD y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_mode_enabled());
    y = sum(x);
  }
  CHECK(grad_mode_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("only leaves expose mutable storage") {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(y.mutable_data(), ContractError);
  x.mutable_data()[0] = 5.0;
  CHECK(x.at(0) == 5.0);
}

TEST_CASE("a shared input collects gradient from every use") {
  // d/dx of sum(x + 2x) = 3.
  auto x = TD::from_data({3}, {1, 2, 3}, true);
  backward(sum(add(x, scale(x, 2.0))));
  for (double g : x.grad()) CHECK(g == doctest::Approx(3.0));
}

TEST_CASE("float and double engines agree on a small graph") {
  auto xf = Tensor<float>::from_data({1, 2, 2, 2}, {1, -2, 3, 4, 0.5f, 6, -7, 8}, true);
  auto xd = TD::from_data({1, 2, 2, 2}, {1, -2, 3, 4, 0.5, 6, -7, 8}, true);
  backward(sum(relu(softmax_axis(xf, 1))));
  backward(sum(relu(softmax_axis(xd, 1))));
  for (std::size_t i = 0; i < 8; ++i) CHECK(xf.grad()[i] == doctest::Approx(xd.grad()[i]).epsilon(1e-5));
}
