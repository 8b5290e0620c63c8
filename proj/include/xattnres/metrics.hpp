#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "xattnres/data.hpp"

namespace xattnres {

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}

  bool at(std::size_t y, std::size_t x) const { return pixels[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { pixels[y * width + x] = v ? 1 : 0; }
  std::size_t count() const;
};

/// Pixels of `labels` (sample `batch_index`) equal to `cls`.
BinaryMask one_vs_rest(const LabelMap& labels, int cls, std::size_t batch_index = 0);

/// 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);
/// |P∩G| / |P∪G|; 1 when both masks are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);

/// Foreground pixels with a 4-neighbour outside the foreground or on the
/// image border, as (row, col).
std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask);

/// 95th percentile (nearest rank) of the symmetric boundary-distance multiset,
/// in pixels. 0 when both masks are empty; the image diagonal when exactly
/// one is empty. Uses exact Euclidean distance transforms.
double hd95(const BinaryMask& pred, const BinaryMask& gt);

/// Same quantity computed from every boundary pixel pair.
double hd95_bruteforce_oracle(const BinaryMask& pred, const BinaryMask& gt);

struct MetricsReport {
  int num_classes = 0;
  std::size_t samples = 0;
  /// Per-class means over samples; index 0 is background.
  std::vector<double> per_class_dice;
  std::vector<double> per_class_iou;
  std::vector<double> per_class_hd95;
  /// Means over foreground classes (all classes if there is only one).
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double mean_hd95 = 0.0;
  /// Mean Dice over every class including background.
  double mean_dice_all_classes = 0.0;
  /// How often the empty-mask conventions were applied.
  std::size_t both_empty_cases = 0;
  std::size_t one_empty_cases = 0;
};

/// Accumulates one-vs-rest metrics over argmax predictions.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(int num_classes);
  /// Both maps may hold several samples; they must have equal shapes.
  void add(const LabelMap& pred, const LabelMap& gt);
  MetricsReport finish() const;

 private:
  int num_classes_;
  std::size_t samples_ = 0;
  std::vector<double> dice_sum_, iou_sum_, hd_sum_;
  std::size_t both_empty_ = 0, one_empty_ = 0;
};

}  // namespace xattnres
