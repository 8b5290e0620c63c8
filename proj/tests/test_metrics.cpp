#include <cmath>
#include <random>

#include "doctest.h"
#include "xattnres/metrics.hpp"

using namespace xattnres;

namespace {

BinaryMask pixels(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> on) {
  BinaryMask m(h, w);
  for (auto [y, x] : on) m.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  return m;
}

BinaryMask random_blob(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  BinaryMask m(h, w);
  std::uniform_int_distribution<int> cy(0, static_cast<int>(h) - 1), cx(0, static_cast<int>(w) - 1), r(1, 6);
  for (int k = 0; k < 3; ++k) {
    const int y0 = cy(rng), x0 = cx(rng), rad = r(rng);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if ((static_cast<int>(y) - y0) * (static_cast<int>(y) - y0) + (static_cast<int>(x) - x0) * (static_cast<int>(x) - x0) <= rad * rad)
          m.set(y, x);
  }
  return m;
}

}  // namespace

TEST_CASE("Dice and IoU by hand") {
  auto p = pixels(2, 2, {{0, 0}, {0, 1}});
  auto g = pixels(2, 2, {{0, 1}, {1, 1}});
  CHECK(dice(p, g) == doctest::Approx(0.5));
  CHECK(iou(p, g) == doctest::Approx(1.0 / 3.0));
  CHECK(dice(p, p) == 1.0);
  CHECK(iou(p, BinaryMask(2, 2)) == 0.0);
}

TEST_CASE("empty masks") {
  BinaryMask e(64, 64);
  CHECK(dice(e, e) == 1.0);
  CHECK(iou(e, e) == 1.0);
  CHECK(hd95(e, e) == 0.0);
  // One empty side scores the image diagonal, 63 * sqrt(2).
  auto one = pixels(64, 64, {{10, 10}});
  CHECK(hd95(one, e) == doctest::Approx(89.0955).epsilon(1e-5));
  CHECK(hd95(e, one) == doctest::Approx(89.0955).epsilon(1e-5));
}

TEST_CASE("HD95 of two single pixels is their distance") {
  auto a = pixels(8, 8, {{0, 0}});
  auto b = pixels(8, 8, {{3, 4}});
  CHECK(hd95(a, b) == doctest::Approx(5.0));
  CHECK(hd95(a, a) == 0.0);
}

TEST_CASE("boundary pixels of a filled square") {
  BinaryMask m(5, 5);
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x) m.set(y, x);
  CHECK(boundary_pixels(m).size() == 8);
  BinaryMask full(3, 3);
  for (auto& p : full.pixels) p = 1;
  CHECK(boundary_pixels(full).size() == 8);  // image border counts as outside
}

TEST_CASE("HD95 uses the nearest-rank percentile") {
  // Boundary of a 1x20 bar against a shifted copy.
  BinaryMask a(3, 20), b(3, 20);
  for (int x = 0; x < 20; ++x) a.set(0, x);
  for (int x = 0; x < 20; ++x) b.set(2, x);
  CHECK(hd95(a, b) == doctest::Approx(2.0));
}

TEST_CASE("distance transform HD95 equals the brute-force pairs") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t h = 8 + rng() % 25, w = 8 + rng() % 25;
    const auto p = random_blob(h, w, rng);
    const auto g = random_blob(h, w, rng);
    CHECK(hd95(p, g) == doctest::Approx(hd95_bruteforce_oracle(p, g)).epsilon(1e-12));
  }
}

TEST_CASE("accumulator averages per class over samples") {
  LabelMap gt(2, 2, 2), pred(2, 2, 2);
  gt.labels = {0, 1, 1, 0, 0, 0, 0, 0};
  pred.labels = {0, 1, 0, 0, 0, 0, 0, 1};
  MetricsAccumulator acc(2);
  acc.add(pred, gt);
  const auto r = acc.finish();
  CHECK(r.samples == 2);
  // Class 1: sample 0 Dice 2/3, sample 1 predicted-only so 0.
  CHECK(r.per_class_dice[1] == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0));
  CHECK(r.mean_dice == r.per_class_dice[1]);
  CHECK(r.one_empty_cases == 1);
  CHECK(r.mean_dice_all_classes == doctest::Approx((r.per_class_dice[0] + r.per_class_dice[1]) / 2.0));
}

TEST_CASE("accumulator rejects mismatched shapes") {
  MetricsAccumulator acc(2);
  CHECK_THROWS(acc.add(LabelMap(1, 2, 2), LabelMap(1, 3, 2)));
}
