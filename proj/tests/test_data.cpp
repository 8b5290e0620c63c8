#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "xattnres/data.hpp"
#include "xattnres/errors.hpp"

using namespace xattnres;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("xattnres_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("pgm") {
  TEST_CASE("parses a 4x4 P5 image") {
    auto b = bytes("P5 4 4 255\n");
    for (int i = 0; i < 16; ++i) b.push_back(static_cast<std::uint8_t>(i * 10));
    const auto img = parse_pgm(b);
    CHECK(img.width == 4);
    CHECK(img.height == 4);
    CHECK(img.maxval == 255);
    CHECK(img.pixels[15] == 150);
  }

  TEST_CASE("comments are allowed in the header") {
    auto b = bytes("P5\n# made by hand\n2 1\n# depth\n7\n");
    b.push_back(3);
    b.push_back(7);
    const auto img = parse_pgm(b);
    CHECK(img.maxval == 7);
    CHECK(img.pixels == std::vector<std::uint8_t>{3, 7});
  }

  TEST_CASE("encode then parse is lossless") {
    GrayImage g{3, 2, 255, {0, 1, 2, 253, 254, 255}};
    const auto back = parse_pgm(encode_pgm(g));
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.pixels == g.pixels);
  }

  TEST_CASE("malformed files are data errors") {
    CHECK_THROWS_AS(parse_pgm(bytes("P2 1 1 255\n\x01")), DataError);
    CHECK_THROWS_AS(parse_pgm(bytes("P5 2 2 255\n\x01\x02")), DataError);
    CHECK_THROWS_AS(parse_pgm(bytes("P5 2 2 65535\n")), DataError);
    CHECK_THROWS_AS(parse_pgm(bytes("P5 0 2 255\n")), DataError);
    CHECK_THROWS_AS(parse_pgm(bytes("P5 x")), DataError);
  }
}

TEST_CASE("8:1:1 split is a seeded partition") {
  const auto s = split_indices(200, 3);
  CHECK(s.train.size() == 160);
  CHECK(s.val.size() == 20);
  CHECK(s.test.size() == 20);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 200);
  CHECK(split_indices(200, 3).test == s.test);
  CHECK(split_indices(200, 4).test != s.test);
  const auto small = split_indices(7, 1);
  CHECK(small.train.size() + small.val.size() + small.test.size() == 7);
}

TEST_CASE("synthetic data is deterministic and labelled consistently") {
  SyntheticSpec spec;
  spec.count = 30;
  spec.height = 32;
  spec.width = 32;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  REQUIRE(a.samples.size() == 30);
  CHECK(a.num_classes == 4);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image.pixels == b.samples[i].image.pixels);
    CHECK(a.samples[i].mask.labels == b.samples[i].mask.labels);
    for (auto v : a.samples[i].mask.labels) CHECK(v < 4);
  }
  spec.noise_std = 0.0;
  const auto clean = generate_synthetic(spec);
  const auto& s = clean.samples[0];
  for (std::size_t p = 0; p < s.image.pixels.size(); ++p) {
    CHECK(s.image.pixels[p] == synthetic_class_intensity(s.mask.labels[p]));
  }
  spec.seed = 99;
  CHECK(generate_synthetic(spec).samples[0].mask.labels != clean.samples[0].mask.labels);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.num_classes = 5;
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.min_shapes = 4;
  spec.max_shapes = 2;
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("metric rows print with six decimals") {
  MetricRow r{"r1", 2, "replace", "full", "zero", 3, "val", "dice", "1", 0.5};
  const auto csv = metrics_csv({r});
  CHECK(csv == "run_id,seed,routing,position,init,epoch,split,metric,class,value\n"
               "r1,2,replace,full,zero,3,val,dice,1,0.500000\n");
}

TEST_CASE("a PGM directory loads as a dataset") {
  TempDir dir("pgm_dir");
  fs::create_directories(dir.path / "images");
  fs::create_directories(dir.path / "masks");
  for (int i = 0; i < 10; ++i) {
    const std::string name = "s" + std::to_string(i) + ".pgm";
    save_pgm(GrayImage{4, 4, 255, std::vector<std::uint8_t>(16, static_cast<std::uint8_t>(i * 20))},
             (dir.path / "images" / name).string());
    std::vector<std::uint8_t> m(16, 0);
    m[i % 16] = 1;
    save_pgm(GrayImage{4, 4, 255, m}, (dir.path / "masks" / name).string());
  }
  const auto ds = load_directory(dir.path.string(), 2, 0);
  CHECK(ds.samples.size() == 10);
  CHECK(ds.height == 4);
  CHECK(ds.samples[1].image.pixels[0] == doctest::Approx(20.0f / 255.0f));
  CHECK(ds.splits.train.size() == 8);

  save_pgm(GrayImage{4, 4, 255, std::vector<std::uint8_t>(16, 3)}, (dir.path / "masks" / "s0.pgm").string());
  CHECK_THROWS_AS(load_directory(dir.path.string(), 2, 0), DataError);
  CHECK_THROWS_AS(load_directory((dir.path / "missing").string(), 2, 0), ConfigError);
}

TEST_CASE("atomic writes leave no temporary file behind") {
  TempDir dir("atomic");
  const auto p = (dir.path / "x.txt").string();
  write_text_file(p, "hello");
  write_text_file(p, "again");
  const auto back = read_file(p);
  CHECK(std::string(back.begin(), back.end()) == "again");
  CHECK_FALSE(fs::exists(p + ".tmp"));
}

TEST_CASE("an empty row list writes only the header") {
  CHECK(metrics_csv({}) == "run_id,seed,routing,position,init,epoch,split,metric,class,value\n");
}

TEST_CASE("random 8-bit images survive encode and parse") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    GrayImage g;
    g.width = 1 + rng() % 256;
    g.height = 1 + rng() % 256;
    g.pixels.resize(g.width * g.height);
    for (auto& p : g.pixels) p = static_cast<std::uint8_t>(rng());
    const auto back = parse_pgm(encode_pgm(g));
    CHECK(back.width == g.width);
    CHECK(back.height == g.height);
    CHECK(back.pixels == g.pixels);
  }
}
