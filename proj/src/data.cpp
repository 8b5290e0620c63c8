#include "xattnres/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "xattnres/errors.hpp"

namespace xattnres {

namespace fs = std::filesystem;

DatasetSplits split_indices(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * 0.1));
  const auto n_test = n_val;
  DatasetSplits s;
  const std::size_t n_train = count - std::min(count, n_val + n_test);
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(std::min(count, n_train + n_val)));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(std::min(count, n_train + n_val)), order.end());
  return s;
}

void SyntheticSpec::validate() const {
  if (count == 0) throw ConfigError("synthetic count must be positive");
  if (height < 16 || width < 16) throw ConfigError("synthetic images must be at least 16x16");
  if (num_classes < 2 || num_classes > 4) throw ConfigError("synthetic data supports 2..4 classes");
  if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("invalid shapes-per-image range");
  if (noise_std < 0.0) throw ConfigError("noise std must be non-negative");
}

float synthetic_class_intensity(int cls) {
  static constexpr float kBase[] = {0.1f, 0.9f, 0.6f, 0.75f};
  return kBase[std::clamp(cls, 0, 3)];
}

namespace {

enum class ShapeKind { Disk = 1, Rectangle = 2, Ring = 3 };

// Rasterizes one shape into `mask`; returns the number of pixels it covers.
std::size_t draw_shape(ShapeKind kind, LabelMap& mask, std::mt19937_64& rng) {
  const auto h = static_cast<int>(mask.height), w = static_cast<int>(mask.width);
  const int scale = std::min(h, w);
  auto uniform = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::size_t covered = 0;
  auto paint = [&](int y, int x) {
    mask.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<std::uint8_t>(kind);
    ++covered;
  };
  switch (kind) {
    case ShapeKind::Disk: {
      const int r = uniform(std::max(2, scale / 32), std::max(3, scale / 8));
      const int cy = uniform(r, h - 1 - r), cx = uniform(r, w - 1 - r);
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) paint(y, x);
      break;
    }
    case ShapeKind::Rectangle: {
      const int rh = uniform(std::max(2, scale / 32), std::max(4, scale / 4));
      const int rw = uniform(std::max(2, scale / 32), std::max(4, scale / 4));
      const int y0 = uniform(0, h - rh), x0 = uniform(0, w - rw);
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) paint(y, x);
      break;
    }
    case ShapeKind::Ring: {
      const int outer = uniform(std::max(4, scale / 16), std::max(5, scale / 6));
      const int thickness = uniform(1, 2);
      const int inner = outer - thickness;
      const int cy = uniform(outer, h - 1 - outer), cx = uniform(outer, w - 1 - outer);
      for (int y = cy - outer; y <= cy + outer; ++y) {
        for (int x = cx - outer; x <= cx + outer; ++x) {
          const int d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          if (d2 <= outer * outer && d2 > inner * inner) paint(y, x);
        }
      }
      break;
    }
  }
  return covered;
}

Dataset generate_once(const SyntheticSpec& spec, std::uint64_t seed) {
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.channels = 1;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.provenance = "synthetic";
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Sample s;
    s.mask = LabelMap(1, spec.height, spec.width);
    const int shapes = std::uniform_int_distribution<int>(spec.min_shapes, spec.max_shapes)(rng);
    for (int k = 0; k < shapes; ++k) {
      const int cls = std::uniform_int_distribution<int>(1, spec.num_classes - 1)(rng);
      draw_shape(static_cast<ShapeKind>(cls), s.mask, rng);
    }
    s.image.channels = 1;
    s.image.height = spec.height;
    s.image.width = spec.width;
    s.image.pixels.resize(spec.height * spec.width);
    for (std::size_t p = 0; p < s.image.pixels.size(); ++p) {
      const double base = synthetic_class_intensity(s.mask.labels[p]);
      const double n = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
      s.image.pixels[p] = static_cast<float>(base + n);
    }
    ds.samples.push_back(std::move(s));
  }
  ds.splits = split_indices(spec.count, seed);
  return ds;
}

bool coverage_ok(const Dataset& ds) {
  std::vector<std::size_t> present(static_cast<std::size_t>(ds.num_classes), 0);
  for (const auto& s : ds.samples) {
    std::vector<bool> seen(present.size(), false);
    for (auto v : s.mask.labels) seen[v] = true;
    if (!seen[0]) return false;  // every mask keeps some background
    for (std::size_t c = 0; c < seen.size(); ++c) present[c] += seen[c];
  }
  const double need = 0.05 * static_cast<double>(ds.samples.size());
  return std::all_of(present.begin(), present.end(), [need](std::size_t n) { return static_cast<double>(n) >= need; });
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  constexpr int kAttempts = 16;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    auto ds = generate_once(spec, spec.seed + static_cast<std::uint64_t>(attempt) * 0x632BE59BD9B4E019ULL);
    if (coverage_ok(ds)) return ds;
  }
  throw DataError("could not generate a synthetic dataset covering every class after " + std::to_string(kAttempts) +
                  " attempts");
}

GrayImage parse_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw DataError("PGM parse error at byte " + std::to_string(pos) + ": " + what);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* name) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail(std::string("expected ") + name);
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 24) fail(std::string(name) + " is too large");
      ++pos;
    }
    return static_cast<std::size_t>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("bad magic, expected \"P5\"");
  pos = 2;
  GrayImage img;
  img.width = read_uint("width");
  img.height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (img.width == 0 || img.height == 0) fail("zero image dimension");
  if (maxval == 0 || maxval > 255) fail("maxval " + std::to_string(maxval) + " not in 1..255");
  img.maxval = static_cast<int>(maxval);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("expected a single whitespace after maxval");
  ++pos;
  const std::size_t expected = img.width * img.height;
  const std::size_t available = bytes.size() - pos;
  if (available < expected) {
    fail("truncated payload: expected " + std::to_string(expected) + " bytes, found " + std::to_string(available));
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + expected));
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ShapeError("PGM pixel count does not match size");
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n" + std::to_string(image.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(contents.data()), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("failed writing " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

void write_text_file(const std::string& path, const std::string& contents) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(contents.data()), contents.size()));
}

GrayImage load_pgm(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return parse_pgm(bytes);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void save_pgm(const GrayImage& image, const std::string& path) { write_file_atomic(path, encode_pgm(image)); }

Dataset load_directory(const std::string& dir, int num_classes, std::uint64_t split_seed) {
  const fs::path images = fs::path(dir) / "images";
  const fs::path masks = fs::path(dir) / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw ConfigError("data directory " + dir + " must contain images/ and masks/");
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .pgm images under " + images.string());
  Dataset ds;
  ds.num_classes = num_classes;
  ds.provenance = dir;
  for (const auto& f : files) {
    const auto img = load_pgm(f.string());
    const auto msk = load_pgm((masks / f.filename()).string());
    if (img.width != msk.width || img.height != msk.height) throw DataError("mask size differs for " + f.string());
    if (ds.samples.empty()) {
      ds.height = img.height;
      ds.width = img.width;
    } else if (img.height != ds.height || img.width != ds.width) {
      throw DataError("image " + f.string() + " differs in size from the first image");
    }
    Sample s;
    s.image.channels = 1;
    s.image.height = img.height;
    s.image.width = img.width;
    s.image.pixels.resize(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      s.image.pixels[i] = static_cast<float>(img.pixels[i]) / static_cast<float>(img.maxval);
    }
    s.mask = LabelMap(1, msk.height, msk.width);
    for (std::size_t i = 0; i < msk.pixels.size(); ++i) {
      if (msk.pixels[i] >= num_classes) {
        throw DataError("mask " + f.filename().string() + " has label " + std::to_string(msk.pixels[i]) + " >= " +
                        std::to_string(num_classes));
      }
      s.mask.labels[i] = msk.pixels[i];
    }
    ds.samples.push_back(std::move(s));
  }
  ds.splits = split_indices(ds.samples.size(), split_seed);
  return ds;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "run_id,seed,routing,position,init,epoch,split,metric,class,value\n";
  char value[64];
  for (const auto& r : rows) {
    std::snprintf(value, sizeof value, "%.6f", r.value);
    os << r.run_id << ',' << r.seed << ',' << r.routing << ',' << r.position << ',' << r.init << ',' << r.epoch << ','
       << r.split << ',' << r.metric << ',' << r.cls << ',' << value << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path) {
  write_text_file(path, metrics_csv(rows));
}

}  // namespace xattnres
