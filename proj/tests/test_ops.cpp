#include <cmath>
#include <random>

#include "doctest.h"
#include "xattnres/ops.hpp"

using namespace xattnres;
using TD = Tensor<double>;

namespace {

TD random_map(Shape shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return TD::from_data(std::move(shape), std::move(v), grad);
}

// Direct six-loop convolution with zero padding.
std::vector<double> naive_conv(const TD& x, const TD& w, const TD& b, std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), K = w.dim(2);
  const auto OH = H + 2 * pad - K + 1, OW = W + 2 * pad - K + 1;
  std::vector<double> out(B * O * OH * OW, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx) {
          double acc = b.defined() ? b.at(o) : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long iy = static_cast<long>(y + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += w.at(((o * C + c) * K + ky) * K + kx) * x.at(((n * C + c) * H + iy) * W + ix);
              }
          out[((n * O + o) * OH + y) * OW + xx] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("conv2d") {
  TEST_CASE("1x1 identity kernel reproduces the input") {
    auto x = random_map({2, 3, 4, 5}, 1);
    std::vector<double> w(9, 0.0);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
    auto y = conv2d(x, TD::from_data({3, 3, 1, 1}, w), TD{}, Padding::None);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
  }

  TEST_CASE("all-ones 3x3 kernel on a constant grid counts neighbours") {
    auto x = TD::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, TD::full({1, 1, 3, 3}, 1.0), TD{}, Padding::Same);
    CHECK(y.at(4) == 9.0);
    CHECK(y.at(0) == 4.0);
    CHECK(y.at(2) == 4.0);
    CHECK(y.at(1) == 6.0);
  }

  TEST_CASE("zero input without bias gives zero output") {
    auto y = conv2d(TD::zeros({1, 2, 4, 4}), random_map({3, 2, 3, 3}, 2), TD{}, Padding::Same);
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("matches the direct loop convolution") {
    for (std::size_t k : {1u, 3u}) {
      for (auto pad : {Padding::Same, Padding::None}) {
        auto x = random_map({2, 3, 5, 6}, 3 + k);
        auto w = random_map({4, 3, k, k}, 5 + k);
        auto b = random_map({4}, 7);
        auto y = conv2d(x, w, b, pad);
        const auto ref = naive_conv(x, w, b, pad == Padding::Same ? k / 2 : 0);
        REQUIRE(y.numel() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("rejects unsupported kernels and mismatched channels") {
    auto x = random_map({1, 2, 4, 4}, 4);
    CHECK_THROWS_AS(conv2d(x, random_map({1, 2, 5, 5}, 1), TD{}, Padding::Same), ConfigError);
    CHECK_THROWS_AS(conv2d(x, random_map({1, 3, 3, 3}, 1), TD{}, Padding::Same), ShapeError);
    CHECK_THROWS_AS(conv2d(x, random_map({2, 2, 3, 3}, 1), random_map({3}, 1), Padding::Same), ShapeError);
  }
}

TEST_SUITE("adaptive_max_pool") {
  TEST_CASE("4x4 ramp to 2x2") {
    std::vector<double> v(16);
    for (int i = 0; i < 16; ++i) v[i] = i + 1;
    auto y = adaptive_max_pool(TD::from_data({1, 1, 4, 4}, v), 2, 2);
    CHECK(y.at(0) == 6.0);
    CHECK(y.at(1) == 8.0);
    CHECK(y.at(2) == 14.0);
    CHECK(y.at(3) == 16.0);
  }

  TEST_CASE("same size is identity and constants stay constant") {
    auto x = random_map({1, 2, 3, 5}, 9);
    auto y = adaptive_max_pool(x, 3, 5);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
    auto c = adaptive_max_pool(TD::full({1, 1, 7, 5}, 2.5), 3, 2);
    for (double v : c.data()) CHECK(v == 2.5);
  }

  TEST_CASE("uneven windows follow floor/ceil bounds") {
    // 5 -> 3: windows [0,2), [1,4), [3,5).
    auto x = TD::from_data({1, 1, 1, 5}, {5, 1, 2, 9, 0});
    auto y = adaptive_max_pool(x, 1, 3);
    CHECK(y.at(0) == 5.0);
    CHECK(y.at(1) == 9.0);
    CHECK(y.at(2) == 9.0);
  }

  TEST_CASE("gradient goes to the first maximum of each window") {
    auto x = TD::from_data({1, 1, 2, 2}, {3, 3, 1, 3}, true);
    backward(sum(adaptive_max_pool(x, 1, 1)));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[3] == 0.0);
  }
}

TEST_SUITE("bilinear_resize") {
  TEST_CASE("half-pixel centres with edge clamping") {
    auto y = bilinear_resize(TD::from_data({1, 1, 1, 2}, {0, 2}), 1, 4);
    CHECK(y.at(0) == doctest::Approx(0.0));
    CHECK(y.at(1) == doctest::Approx(0.5));
    CHECK(y.at(2) == doctest::Approx(1.5));
    CHECK(y.at(3) == doctest::Approx(2.0));
  }

  TEST_CASE("2x2 to 4x4 matches the half-pixel reference") {
    // Reference rows for [[1,2],[3,4]] under align-corners-off interpolation.
    const double expected[16] = {1.0, 1.25, 1.75, 2.0, 1.5, 1.75, 2.25, 2.5,
                                 2.5, 2.75, 3.25, 3.5, 3.0, 3.25, 3.75, 4.0};
    auto y = bilinear_resize(TD::from_data({1, 1, 2, 2}, {1, 2, 3, 4}), 4, 4);
    for (int i = 0; i < 16; ++i) CHECK(y.at(i) == doctest::Approx(expected[i]));
  }

  TEST_CASE("single pixel broadcasts and constants stay constant") {
    auto y = bilinear_resize(TD::full({1, 1, 1, 1}, 3.0), 2, 2);
    for (double v : y.data()) CHECK(v == 3.0);
    auto c = bilinear_resize(TD::full({2, 2, 3, 3}, -1.5), 7, 5);
    for (double v : c.data()) CHECK(v == doctest::Approx(-1.5));
  }

  TEST_CASE("gradient mass is conserved") {
    auto x = random_map({1, 2, 3, 4}, 11, true);
    backward(sum(bilinear_resize(x, 7, 9)));
    double total = 0.0;
    for (double g : x.grad()) total += g;
    CHECK(total == doctest::Approx(2.0 * 7 * 9));
  }
}

TEST_SUITE("rmsnorm_channels") {
  TEST_CASE("hand example [3,4]") {
    auto y = rmsnorm_channels(TD::from_data({1, 2, 1, 1}, {3, 4}), TD::full({2}, 1.0), 0.0);
    CHECK(y.at(0) == doctest::Approx(0.848528137423857));
    CHECK(y.at(1) == doctest::Approx(1.131370849898476));
  }

  TEST_CASE("zero vector stays zero") {
    auto y = rmsnorm_channels(TD::zeros({1, 3, 2, 2}), TD::full({3}, 1.0), 0.0);
    for (double v : y.data()) CHECK(v == 0.0);
    auto z = rmsnorm_channels(TD::zeros({1, 3, 2, 2}), TD::full({3}, 1.0), 1e-6);
    for (double v : z.data()) CHECK(v == 0.0);
  }

  TEST_CASE("positive rescaling does not change the output") {
    auto x = random_map({2, 4, 3, 3}, 12);
    auto scaled = scale(x, 17.5);
    auto g = random_map({4}, 13);
    auto a = rmsnorm_channels(x, g, 0.0);
    auto b = rmsnorm_channels(scaled, g, 0.0);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-12));
  }
}

TEST_SUITE("softmax_axis") {
  TEST_CASE("hand values") {
    auto a = softmax_axis(TD::from_data({1, 2, 1, 1}, {0, 0}), 1);
    CHECK(a.at(0) == 0.5);
    auto b = softmax_axis(TD::from_data({1, 2, 1, 1}, {0, std::log(3.0)}), 1);
    CHECK(b.at(0) == doctest::Approx(0.25));
    CHECK(b.at(1) == doctest::Approx(0.75));
  }

  TEST_CASE("shift invariance and large logits") {
    auto x = random_map({2, 5, 2, 3}, 14);
    auto shifted = add(x, TD::full(x.shape(), 250.0));
    auto a = softmax_axis(x, 1);
    auto b = softmax_axis(shifted, 1);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-9));
    auto big = softmax_axis(TD::from_data({1, 2, 1, 1}, {1000.0, 0.0}), 1);
    CHECK(std::isfinite(big.at(0)));
    CHECK(big.at(0) == doctest::Approx(1.0));
  }
}

TEST_SUITE("channel plumbing") {
  TEST_CASE("concat shapes and empty operand") {
    auto a = random_map({1, 2, 4, 4}, 15);
    auto b = random_map({1, 3, 4, 4}, 16);
    CHECK(concat_channels(a, b).shape() == Shape{1, 5, 4, 4});
    auto empty = TD::zeros({1, 0, 4, 4});
    auto same = concat_channels(a, empty);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(same.at(i) == a.at(i));
  }

  TEST_CASE("concat gradient partitions") {
    auto a = random_map({1, 2, 3, 3}, 17, true);
    auto b = random_map({1, 1, 3, 3}, 18, true);
    backward(sum(concat_channels(a, b)));
    for (double g : a.grad()) CHECK(g == 1.0);
    for (double g : b.grad()) CHECK(g == 1.0);
  }

  TEST_CASE("slice inverts concat") {
    auto a = random_map({2, 2, 3, 3}, 19);
    auto b = random_map({2, 3, 3, 3}, 20);
    auto s = slice_channels(concat_channels(a, b), 2, 3);
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(s.at(i) == b.at(i));
    CHECK_THROWS_AS(slice_channels(a, 1, 2), ShapeError);
  }

  TEST_CASE("channel_dot and scale_by_map by hand") {
    auto x = TD::from_data({1, 2, 1, 2}, {1, 2, 3, 4});
    auto d = channel_dot(x, TD::from_data({2}, {10, 100}));
    CHECK(d.shape() == Shape{1, 1, 1, 2});
    CHECK(d.at(0) == 310.0);
    CHECK(d.at(1) == 420.0);
    auto m = scale_by_map(TD::from_data({1, 1, 1, 2}, {2, -1}), x);
    CHECK(m.at(0) == 2.0);
    CHECK(m.at(1) == -2.0);
    CHECK(m.at(2) == 6.0);
    CHECK(m.at(3) == -4.0);
  }
}
