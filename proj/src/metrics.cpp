#include "xattnres/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xattnres/errors.hpp"

namespace xattnres {

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask shapes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

struct Overlap {
  std::size_t pred = 0, gt = 0, both = 0;
};

Overlap overlap(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt);
  Overlap o;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    o.pred += p;
    o.gt += g;
    o.both += p && g;
  }
  return o;
}

double diagonal(const BinaryMask& m) {
  const double h = static_cast<double>(m.height) - 1.0, w = static_cast<double>(m.width) - 1.0;
  return std::sqrt(h * h + w * w);
}

double nearest_rank_95(std::vector<double>& distances) {
  std::sort(distances.begin(), distances.end());
  const auto n = distances.size();
  auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return distances[rank - 1];
}

// One-dimensional squared distance transform (lower envelope of parabolas).
void edt_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d, std::size_t n) {
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    for (std::size_t q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  v[0] = first;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] >= kInf) continue;
    while (true) {
      const auto p = v[k];
      const double s = (static_cast<double>(f[q] + static_cast<std::int64_t>(q * q)) -
                        static_cast<double>(f[p] + static_cast<std::int64_t>(p * p))) /
                       (2.0 * (static_cast<double>(q) - static_cast<double>(p)));
      if (s <= z[k]) {
        if (k == 0) {
          v[0] = q;
          z[1] = std::numeric_limits<double>::infinity();
          break;
        }
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = std::numeric_limits<double>::infinity();
      break;
    }
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const auto p = static_cast<std::int64_t>(v[k]);
    const auto dq = static_cast<std::int64_t>(q) - p;
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance from every pixel to the nearest site.
std::vector<std::int64_t> squared_distance_transform(const std::vector<std::pair<int, int>>& sites, std::size_t h,
                                                     std::size_t w) {
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> grid(h * w, kInf);
  for (auto [y, x] : sites) grid[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 0;
  std::vector<std::int64_t> f(std::max(h, w)), d(std::max(h, w));
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f, d, h);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = grid[y * w + x];
    edt_1d(f, d, w);
    for (std::size_t x = 0; x < w; ++x) grid[y * w + x] = d[x];
  }
  return grid;
}

}  // namespace

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(pixels.begin(), pixels.end(), [](auto v) { return v != 0; }));
}

BinaryMask one_vs_rest(const LabelMap& labels, int cls, std::size_t batch_index) {
  BinaryMask m(labels.height, labels.width);
  const std::size_t plane = labels.height * labels.width;
  for (std::size_t i = 0; i < plane; ++i) m.pixels[i] = labels.labels[batch_index * plane + i] == cls ? 1 : 0;
  return m;
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const auto o = overlap(pred, gt);
  if (o.pred + o.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.pred + o.gt);
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const auto o = overlap(pred, gt);
  const std::size_t uni = o.pred + o.gt - o.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.both) / static_cast<double>(uni);
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask) {
  std::vector<std::pair<int, int>> out;
  const auto h = static_cast<int>(mask.height), w = static_cast<int>(mask.width);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !mask.at(y - 1, x) || !mask.at(y + 1, x) ||
                        !mask.at(y, x - 1) || !mask.at(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

double hd95(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt);
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return diagonal(pred);
  const auto to_gt = squared_distance_transform(bg, gt.height, gt.width);
  const auto to_pred = squared_distance_transform(bp, pred.height, pred.width);
  std::vector<double> distances;
  distances.reserve(bp.size() + bg.size());
  for (auto [y, x] : bp) distances.push_back(std::sqrt(static_cast<double>(to_gt[y * gt.width + x])));
  for (auto [y, x] : bg) distances.push_back(std::sqrt(static_cast<double>(to_pred[y * pred.width + x])));
  return nearest_rank_95(distances);
}

double hd95_bruteforce_oracle(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt);
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return diagonal(pred);
  auto directed = [](const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                     std::vector<double>& out) {
    for (auto [ay, ax] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [by, bx] : to) {
        const double dy = ay - by, dx = ax - bx;
        best = std::min(best, std::sqrt(dy * dy + dx * dx));
      }
      out.push_back(best);
    }
  };
  std::vector<double> distances;
  directed(bp, bg, distances);
  directed(bg, bp, distances);
  return nearest_rank_95(distances);
}

MetricsAccumulator::MetricsAccumulator(int num_classes)
    : num_classes_(num_classes),
      dice_sum_(static_cast<std::size_t>(num_classes), 0.0),
      iou_sum_(static_cast<std::size_t>(num_classes), 0.0),
      hd_sum_(static_cast<std::size_t>(num_classes), 0.0) {
  if (num_classes < 1) throw ConfigError("metrics need at least one class");
}

void MetricsAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("prediction and ground-truth label maps differ in shape");
  }
  for (std::size_t b = 0; b < pred.batch; ++b) {
    for (int c = 0; c < num_classes_; ++c) {
      const auto p = one_vs_rest(pred, c, b);
      const auto g = one_vs_rest(gt, c, b);
      const auto cp = p.count(), cg = g.count();
      if (cp == 0 && cg == 0) ++both_empty_;
      else if (cp == 0 || cg == 0) ++one_empty_;
      dice_sum_[static_cast<std::size_t>(c)] += dice(p, g);
      iou_sum_[static_cast<std::size_t>(c)] += iou(p, g);
      hd_sum_[static_cast<std::size_t>(c)] += hd95(p, g);
    }
    ++samples_;
  }
}

MetricsReport MetricsAccumulator::finish() const {
  MetricsReport r;
  r.num_classes = num_classes_;
  r.samples = samples_;
  r.both_empty_cases = both_empty_;
  r.one_empty_cases = one_empty_;
  const double n = samples_ ? static_cast<double>(samples_) : 1.0;
  for (int c = 0; c < num_classes_; ++c) {
    r.per_class_dice.push_back(dice_sum_[static_cast<std::size_t>(c)] / n);
    r.per_class_iou.push_back(iou_sum_[static_cast<std::size_t>(c)] / n);
    r.per_class_hd95.push_back(hd_sum_[static_cast<std::size_t>(c)] / n);
  }
  const int first = num_classes_ > 1 ? 1 : 0;
  const double fg = static_cast<double>(num_classes_ - first);
  for (int c = first; c < num_classes_; ++c) {
    r.mean_dice += r.per_class_dice[static_cast<std::size_t>(c)] / fg;
    r.mean_iou += r.per_class_iou[static_cast<std::size_t>(c)] / fg;
    r.mean_hd95 += r.per_class_hd95[static_cast<std::size_t>(c)] / fg;
  }
  for (int c = 0; c < num_classes_; ++c) r.mean_dice_all_classes += r.per_class_dice[static_cast<std::size_t>(c)];
  r.mean_dice_all_classes /= static_cast<double>(num_classes_);
  return r;
}

}  // namespace xattnres
