#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xattnres {

/// Integer class labels, [batch, height, width].
struct LabelMap {
  std::size_t batch = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t b, std::size_t h, std::size_t w) : batch(b), height(h), width(w), labels(b * h * w, 0) {}

  std::uint8_t at(std::size_t b, std::size_t y, std::size_t x) const { return labels[(b * height + y) * width + x]; }
  std::uint8_t& at(std::size_t b, std::size_t y, std::size_t x) { return labels[(b * height + y) * width + x]; }
};

/// Single image, [channels, height, width].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
};

struct Sample {
  Image image;
  LabelMap mask;  // batch == 1
};

struct DatasetSplits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct Dataset {
  std::vector<Sample> samples;
  DatasetSplits splits;
  int num_classes = 0;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::string provenance;
};

/// Seeded 8:1:1 split of `count` indices (sizes rounded, train takes the rest).
DatasetSplits split_indices(std::size_t count, std::uint64_t seed);

/// Synthetic desk-scale segmentation data: disks, rectangles and rings on
/// a noisy background.
struct SyntheticSpec {
  std::size_t count = 200;
  std::size_t height = 64;
  std::size_t width = 64;
  int num_classes = 4;  // background, disk, rectangle, ring
  int min_shapes = 2;
  int max_shapes = 5;
  double noise_std = 0.15;
  std::uint64_t seed = 2024;

  void validate() const;
};

/// Base intensity drawn for each class before noise.
float synthetic_class_intensity(int cls);

Dataset generate_synthetic(const SyntheticSpec& spec);

/// 8-bit grayscale raster as stored in binary PGM files.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 255;
  std::vector<std::uint8_t> pixels;
};

GrayImage parse_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);
GrayImage load_pgm(const std::string& path);
void save_pgm(const GrayImage& image, const std::string& path);

/// Loads `<dir>/images/*.pgm` with masks of the same name under
/// `<dir>/masks/` (pixel value = class id). Images are scaled to [0, 1].
Dataset load_directory(const std::string& dir, int num_classes, std::uint64_t split_seed);

/// One row of the per-run metrics table.
struct MetricRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string routing;
  std::string position;
  std::string init;
  int epoch = 0;
  std::string split;
  std::string metric;
  std::string cls;
  double value = 0.0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);
void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path);

/// Writes `contents` to `path` through a temporary file and a rename.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> contents);
void write_text_file(const std::string& path, const std::string& contents);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace xattnres
