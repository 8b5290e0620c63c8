// Acceptance runner: one PASS/FAIL line per criterion.
//
// Usage: acceptance [--report FILE] [--only 1,2,...]
// The trend criteria (6, 7, 10) train 30 models and take most of the time.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xattnres/attention.hpp"
#include "xattnres/backbone.hpp"
#include "xattnres/checkpoint.hpp"
#include "xattnres/config.hpp"
#include "xattnres/experiment.hpp"
#include "xattnres/metrics.hpp"
#include "xattnres/ops.hpp"

namespace fs = std::filesystem;
using namespace xattnres;

namespace {

using Clock = std::chrono::steady_clock;
using TD = Tensor<double>;

struct Outcome {
  int id;
  bool passed;
  std::string detail;
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

TD random_map(Shape shape, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> d(0.0, spread);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return TD::from_data(std::move(shape), std::move(v));
}

// A unit with random query, gain and projections plus a matching pool.
struct RandomSite {
  HistoryPool<double> pool;
  std::optional<XAttnResUnit<double>> unit;
  TD x;
};

RandomSite random_site(std::mt19937_64& rng, std::size_t B, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t K, std::size_t max_src_side) {
  std::uniform_int_distribution<std::size_t> ch(1, 4), side(1, max_src_side);
  RandomSite s;
  std::vector<SourceSpec> sources;
  std::vector<TD> feats;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t cs = ch(rng);
    const StageTag tag{k % 2 == 0 ? StageSide::Encoder : StageSide::Decoder, static_cast<int>(k + 1)};
    sources.push_back({tag, cs});
    feats.push_back(random_map({B, cs, side(rng), side(rng)}, rng));
  }
  s.unit.emplace("site", C, sources);
  std::normal_distribution<double> d(0.0, 1.0);
  for (auto& [name, t] : s.unit->named_parameters()) {
    auto h = t;
    for (auto& v : h.mutable_data()) v = name.ends_with("rms_gain") ? 1.0 + 0.3 * d(rng) : 1.5 * d(rng);
  }
  for (std::size_t k = 0; k < K; ++k) s.pool.append(feats[k], sources[k].tag);
  s.x = random_map({B, C, H, W}, rng);
  return s;
}

// ---------------------------------------------------------------------------

Outcome criterion_gradcheck() {
  const auto result = run_gradcheck_suite(gradcheck_cases());
  double worst = 0.0;
  std::set<std::string> ops;
  for (const auto& r : result.reports) {
    worst = std::max(worst, r.max_relative_error());
    if (r.label != "backbone_end_to_end") ops.insert(r.label);
  }
  const bool has_backbone = std::any_of(result.reports.begin(), result.reports.end(),
                                        [](const GradcheckReport& r) { return r.label == "backbone_end_to_end"; });
  const bool ok = result.passed() && worst < 1e-4 && ops.size() >= 10 && has_backbone && result.seconds < 120.0;
  return {1, ok,
          std::to_string(result.reports.size()) + " cases (" + std::to_string(ops.size()) +
              " operations + end-to-end backbone), " + std::to_string(result.failures().size()) +
              " failed, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f", result.seconds) + " s"};
}

Outcome criterion_zero_init() {
  std::mt19937_64 rng(2);
  std::size_t models = 0, weights = 0;
  double worst = 0.0;
  for (int stages : {2, 3, 4}) {
    for (auto routing : {Routing::Replace, Routing::Both}) {
      for (auto position : {Position::EncoderOnly, Position::DecoderOnly, Position::Full}) {
        for (auto order : {BothOrder::AttendThenConcat, BothOrder::ConcatThenAttend}) {
          if (routing == Routing::Replace && order == BothOrder::ConcatThenAttend) continue;
          BackboneConfig c;
          c.stages = stages;
          c.base_channels = 4;
          c.in_channels = 2;
          c.num_classes = 3;
          c.routing = routing;
          c.position = position;
          c.both_order = order;
          c.init_scheme = InitScheme::ZeroInit;
          c.seed = rng();
          Backbone<double> net(c);
          const std::size_t side = std::size_t{1} << stages;
          const auto art = net.forward(random_map({2, 2, side, side}, rng, 3.0), {.per_sample_trace = true});
          for (const auto& t : art.traces) {
            const double expected = 1.0 / static_cast<double>(t.entries);
            for (double w : t.per_sample) worst = std::max(worst, std::abs(w - expected));
            weights += t.per_sample.size();
          }
          ++models;
        }
      }
    }
  }
  return {2, worst <= 1e-12 && weights > 0,
          std::to_string(models) + " models, " + std::to_string(weights) + " weights, max |w - 1/(K+1)| " +
              fmt("%.1e", worst)};
}

Outcome criterion_convex_bound() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> b(1, 2), c(1, 4), hw(1, 6), k(0, 4);
  double worst = 0.0;
  std::size_t elements = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = b(rng), C = c(rng), H = hw(rng), W = hw(rng), K = k(rng);
    auto s = random_site(rng, B, C, H, W, K, 8);
    const auto out = attend(s.pool, s.x, *s.unit).output;
    std::vector<TD> values;
    for (std::size_t n = 0; n < K; ++n) {
      values.push_back(align_feature(s.pool.entries()[n], s.pool.tags()[n], *s.unit, H, W));
    }
    values.push_back(s.x);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      double lo = values[0].at(i), hi = lo;
      for (const auto& v : values) {
        lo = std::min(lo, v.at(i));
        hi = std::max(hi, v.at(i));
      }
      const double o = out.at(i);
      worst = std::max({worst, lo - o, o - hi});
      ++elements;
    }
  }
  return {3, worst <= 1e-9,
          "1000 configurations, " + std::to_string(elements) + " elements, worst excursion " + fmt("%.1e", worst)};
}

Outcome criterion_oracle() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  std::size_t configs = 0;
  for (std::size_t B = 1; B <= 2; ++B)
    for (std::size_t C = 1; C <= 4; ++C)
      for (std::size_t H = 1; H <= 4; ++H)
        for (std::size_t W = 1; W <= 4; ++W)
          for (std::size_t K = 0; K <= 4; ++K) {
            auto s = random_site(rng, B, C, H, W, K, 8);
            const auto fast = attend(s.pool, s.x, *s.unit).output;
            const auto slow = naive_attend_oracle(s.pool, s.x, *s.unit);
            for (std::size_t i = 0; i < fast.numel(); ++i) worst = std::max(worst, std::abs(fast.at(i) - slow.at(i)));
            ++configs;
          }
  return {4, worst <= 1e-6, std::to_string(configs) + " shape configurations, max |attend - oracle| " + fmt("%.1e", worst)};
}

Outcome criterion_parameters() {
  std::size_t configs = 0, mismatches = 0, nonzero_plain = 0;
  for (int stages : {2, 3, 4}) {
    for (int base : {4, 8, 16}) {
      for (int in_c : {1, 3}) {
        BackboneConfig base_cfg;
        base_cfg.stages = stages;
        base_cfg.base_channels = base;
        base_cfg.in_channels = in_c;
        for (auto suite : {AblationSuite::Skip, AblationSuite::Position, AblationSuite::Init}) {
          for (auto order : {BothOrder::AttendThenConcat, BothOrder::ConcatThenAttend}) {
            base_cfg.both_order = order;
            for (const auto& v : ablation_variants(suite, base_cfg)) {
              const auto measured = Backbone<float>(v.model).parameter_count().xattnres_overhead;
              if (measured != closed_form_overhead(v.model)) ++mismatches;
              if ((v.model.routing == Routing::SkipOnly || v.model.routing == Routing::NoSkip) && measured != 0) {
                ++nonzero_plain;
              }
              ++configs;
            }
          }
        }
      }
    }
  }
  BackboneConfig def;
  def.routing = Routing::Replace;
  const auto def_overhead = Backbone<float>(def).parameter_count().xattnres_overhead;
  return {5, mismatches == 0 && nonzero_plain == 0,
          std::to_string(configs) + " configurations, " + std::to_string(mismatches) +
              " mismatches, SkipOnly/NoSkip overhead nonzero in " + std::to_string(nonzero_plain) +
              "; default replace/full overhead " + std::to_string(def_overhead)};
}

Outcome criterion_metrics() {
  std::mt19937_64 rng(8);
  std::size_t hd_mismatch = 0, identity_fail = 0;
  double identity_worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 2 + rng() % 31, w = 2 + rng() % 31;
    BinaryMask p(h, w), g(h, w);
    const double fill_p = 0.05 + 0.5 * (rng() % 100) / 100.0, fill_g = 0.05 + 0.5 * (rng() % 100) / 100.0;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < h * w; ++i) {
      p.pixels[i] = u(rng) < fill_p;
      g.pixels[i] = u(rng) < fill_g;
    }
    if (hd95(p, g) != hd95_bruteforce_oracle(p, g)) ++hd_mismatch;
    const double d = dice(p, g);
    const double err = std::abs(iou(p, g) - d / (2.0 - d));
    identity_worst = std::max(identity_worst, err);
    if (err > 1e-12) ++identity_fail;
  }
  BinaryMask a(2, 2), b(2, 2);
  a.set(0, 0);
  a.set(0, 1);
  b.set(0, 1);
  b.set(1, 1);
  BinaryMask s(8, 8), t(8, 8);
  s.set(0, 0);
  t.set(3, 4);
  const bool hand = dice(a, b) == 0.5 && std::abs(iou(a, b) - 1.0 / 3.0) < 1e-15 && hd95(s, t) == 5.0;
  return {8, hd_mismatch == 0 && identity_fail == 0 && hand,
          "100 random pairs: " + std::to_string(hd_mismatch) + " HD95 mismatches, iou identity max err " +
              fmt("%.1e", identity_worst) + "; hand cases " + (hand ? "exact" : "WRONG")};
}

Outcome criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "xattnres_acceptance_determinism";
  fs::remove_all(root);
  ExperimentConfig c;
  c.model.routing = Routing::Both;
  c.training.epochs = 2;
  c.synthetic.count = 40;
  c.seed = 11;
  std::vector<std::string> csvs;
  for (const char* name : {"a", "b"}) {
    c.out_dir = (root / name).string();
    run_experiment(c);
    const auto bytes = read_file((root / name / "metrics.csv").string());
    csvs.emplace_back(bytes.begin(), bytes.end());
  }
  const bool csv_equal = csvs[0] == csvs[1] && !csvs[0].empty();

  const auto ck = (root / "a" / "checkpoint.xars").string();
  const auto model = load_checkpoint<float>(ck);
  const auto resaved = (root / "resaved.xars").string();
  save_checkpoint<float>(model, nullptr, resaved);
  const auto reloaded = load_checkpoint<float>(resaved);
  const bool file_equal = read_file(ck) == read_file(resaved);
  const auto dataset = build_dataset(c);
  std::vector<std::size_t> idx(dataset.splits.test.begin(), dataset.splits.test.end());
  auto [images, labels] = make_batch<float>(dataset, idx);
  NoGradGuard no_grad;
  const auto l1 = model.forward(images).logits;
  const auto l2 = reloaded.forward(images).logits;
  bool logits_equal = l1.shape() == l2.shape();
  for (std::size_t i = 0; logits_equal && i < l1.numel(); ++i) logits_equal = l1.at(i) == l2.at(i);
  fs::remove_all(root);
  return {9, csv_equal && file_equal && logits_equal,
          std::string("metrics.csv ") + (csv_equal ? "byte-identical" : "DIFFERS") + " across two runs; checkpoint " +
              (file_equal ? "re-save identical" : "re-save DIFFERS") + ", reloaded logits " +
              (logits_equal ? "bit-identical" : "DIFFER")};
}

// Shared by criteria 6, 7 and 10.
struct TrendRuns {
  AblationResult skip;
  AblationResult position;
  double skip_seconds = 0.0;
  double position_seconds = 0.0;
};

TrendRuns run_trends() {
  ExperimentConfig c;  // defaults: 200 samples, 64x64, 4 classes, S=3, 30 epochs, seeds 0-4
  const auto dataset = build_dataset(c);
  RunCache cache;
  auto progress = [](const std::string& line) {
    if (line.find(" epoch ") == std::string::npos) std::cerr << "  " << line << '\n';
  };
  TrendRuns t;
  auto t0 = Clock::now();
  t.skip = run_ablation(c, AblationSuite::Skip, dataset, &cache, progress);
  t.skip_seconds = seconds_since(t0);
  std::cerr << ablation_table(t.skip);
  t0 = Clock::now();
  t.position = run_ablation(c, AblationSuite::Position, dataset, &cache, progress);
  t.position_seconds = seconds_since(t0);
  std::cerr << ablation_table(t.position);
  return t;
}

std::string pts(double dice) { return fmt("%.2f", 100.0 * dice); }

Outcome criterion_skip_trend(const TrendRuns& t) {
  const double base = t.skip.find("baseline").mean_dice;
  const double none = t.skip.find("no-skip").mean_dice;
  const double repl = t.skip.find("replace").mean_dice;
  const double both = t.skip.find("both").mean_dice;
  const bool a = none <= base - 0.02;
  const bool b = repl >= none + 0.02 && std::abs(repl - base) <= 0.015;
  const bool c = both >= base - 0.005;
  const bool time_ok = t.skip_seconds <= 1800.0;
  std::string detail = "Dice baseline " + pts(base) + ", no-skip " + pts(none) + ", replace " + pts(repl) + ", both " +
                       pts(both) + " | (a) " + (a ? "ok" : "FAIL") + " (b) " + (b ? "ok" : "FAIL") + " (c) " +
                       (c ? "ok" : "FAIL") + ", " + fmt("%.0f", t.skip_seconds) + " s";
  return {6, a && b && c && time_ok, detail};
}

Outcome criterion_position_trend(const TrendRuns& t) {
  const double none = t.position.find("none").mean_dice;
  const double enc = t.position.find("encoder-only").mean_dice;
  const double dec = t.position.find("decoder-only").mean_dice;
  const double full = t.position.find("full").mean_dice;
  constexpr double tol = 0.005;
  const bool ok = full >= dec - tol && dec >= enc - tol && enc >= none - tol;
  return {7, ok,
          "Dice full " + pts(full) + " >= decoder " + pts(dec) + " >= encoder " + pts(enc) + " >= none " + pts(none) +
              " (0.5-point tolerance), " + fmt("%.0f", t.position_seconds) + " s"};
}

Outcome criterion_specialization(const TrendRuns& t) {
  const auto& replace = t.skip.find("replace");
  double lowest = 1.0, highest = 0.0;
  std::size_t specialised = 0;
  for (const auto& run : replace.runs) {
    const double u = run.max_uniformity();
    lowest = std::min(lowest, u);
    highest = std::max(highest, u);
    specialised += u > 0.05;
  }
  const bool ok = !replace.runs.empty() && specialised == replace.runs.size();
  return {10, ok,
          std::to_string(specialised) + "/" + std::to_string(replace.runs.size()) +
              " replace models have a site with uniformity > 0.05 (per-model max ranges " + fmt("%.3f", lowest) +
              " to " + fmt("%.3f", highest) + ")"};
}

const char* kTitles[] = {"",
                         "gradient-check suite",
                         "zero-init uniform routing",
                         "convex-combination bound",
                         "attend matches the scalar oracle",
                         "parameter overhead equals the closed form",
                         "skip-routing trend (baseline / no-skip / replace / both)",
                         "position trend (full >= decoder >= encoder >= none)",
                         "metric oracles",
                         "determinism and checkpoint persistence",
                         "routing specialization after training"};

}  // namespace

int main(int argc, char** argv) {
  std::string report_path = "acceptance_report.txt";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--report" && i + 1 < argc) {
      report_path = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: acceptance [--report FILE] [--only 1,2,...]\n";
      return 2;
    }
  }
  auto wanted = [&only](int id) { return only.empty() || only.count(id) > 0; };

  std::vector<Outcome> outcomes;
  auto record = [&outcomes](Outcome o) {
    std::printf("%s criterion %d: %s -- %s\n", o.passed ? "PASS" : "FAIL", o.id, kTitles[o.id], o.detail.c_str());
    std::fflush(stdout);
    outcomes.push_back(std::move(o));
  };
  auto guarded = [&record](int id, auto&& fn) {
    try {
      record(fn());
    } catch (const std::exception& e) {
      record({id, false, std::string("threw: ") + e.what()});
    }
  };

  const auto start = Clock::now();
  if (wanted(1)) guarded(1, criterion_gradcheck);
  if (wanted(2)) guarded(2, criterion_zero_init);
  if (wanted(3)) guarded(3, criterion_convex_bound);
  if (wanted(4)) guarded(4, criterion_oracle);
  if (wanted(5)) guarded(5, criterion_parameters);
  if (wanted(8)) guarded(8, criterion_metrics);
  if (wanted(9)) guarded(9, criterion_determinism);
  if (wanted(6) || wanted(7) || wanted(10)) {
    try {
      const auto trends = run_trends();
      if (wanted(6)) guarded(6, [&] { return criterion_skip_trend(trends); });
      if (wanted(7)) guarded(7, [&] { return criterion_position_trend(trends); });
      if (wanted(10)) guarded(10, [&] { return criterion_specialization(trends); });
    } catch (const std::exception& e) {
      for (int id : {6, 7, 10}) {
        if (wanted(id)) record({id, false, std::string("training threw: ") + e.what()});
      }
    }
  }

  std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  std::ostringstream summary;
  std::size_t passed = 0;
  for (const auto& o : outcomes) {
    summary << (o.passed ? "PASS" : "FAIL") << " criterion " << o.id << ": " << kTitles[o.id] << " -- " << o.detail
            << '\n';
    passed += o.passed;
  }
  summary << passed << "/" << outcomes.size() << " criteria passed in " << fmt("%.0f", seconds_since(start)) << " s\n";
  std::cout << "\n" << summary.str();
  std::ofstream(report_path) << summary.str();
  return passed == outcomes.size() ? 0 : 1;
}
