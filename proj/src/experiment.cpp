#include "xattnres/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "xattnres/checkpoint.hpp"
#include "xattnres/errors.hpp"
#include "xattnres/ops.hpp"

namespace xattnres {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

void report(const ProgressFn& progress, const std::string& line) {
  if (progress) progress(line);
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size() - 1))};
}

std::string class_name(int c) { return std::to_string(c); }

MetricRow base_row(const RunRecord& r) {
  MetricRow row;
  row.run_id = r.run_id;
  row.seed = r.seed;
  row.routing = to_string(r.model.routing);
  row.position = to_string(r.model.position);
  row.init = to_string(r.model.init_scheme);
  return row;
}

}  // namespace

Dataset build_dataset(const ExperimentConfig& config) {
  if (!config.data_dir.empty()) return load_directory(config.data_dir, config.model.num_classes, config.split_seed);
  return generate_synthetic(config.synthetic);
}

double RunRecord::max_uniformity() const {
  double best = 0.0;
  for (const auto& t : traces) best = std::max(best, t.uniformity_score());
  return best;
}

TrainedRun train_run(const ExperimentConfig& config, const Dataset& dataset, const std::string& run_id,
                     const std::string& label, const ProgressFn& progress) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::string name = label.empty() ? run_id : label;
  auto result = train<float>(config.model, config.training, dataset, [&](const EpochRecord& e) {
    report(progress, name + " seed " + std::to_string(config.training.seed) + " epoch " + std::to_string(e.epoch) +
                         " loss " + fmt("%.4f", e.train_loss) + " val_dice " + fmt("%.4f", e.val_dice));
  });
  RunRecord rec;
  rec.run_id = run_id;
  rec.label = label;
  rec.seed = config.training.seed;
  rec.model = config.model;
  rec.history = result.history;
  rec.best_epoch = result.best_epoch;
  rec.test = evaluate(result.model, dataset, dataset.splits.test);
  rec.traces = routing_traces(result.model, dataset, dataset.splits.test);
  rec.parameters = result.model.parameter_count();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(rec), std::move(result.model)};
}

std::vector<AttentionTrace> routing_traces(const Backbone<float>& model, const Dataset& dataset,
                                           std::span<const std::size_t> indices) {
  if (model.unit_count() == 0 || indices.empty()) return {};
  NoGradGuard no_grad;
  auto [images, labels] = make_batch<float>(dataset, indices);
  return model.forward(images).traces;
}

std::vector<MetricRow> run_metric_rows(const RunRecord& r) {
  std::vector<MetricRow> rows;
  auto push = [&](int epoch, const std::string& split, const std::string& metric, const std::string& cls, double v) {
    auto row = base_row(r);
    row.epoch = epoch;
    row.split = split;
    row.metric = metric;
    row.cls = cls;
    row.value = v;
    rows.push_back(std::move(row));
  };
  for (const auto& e : r.history) {
    push(e.epoch, "train", "loss", "all", e.train_loss);
    push(e.epoch, "val", "dice", "foreground", e.val_dice);
    push(e.epoch, "val", "dice", "all", e.val_dice_all_classes);
  }
  const auto& t = r.test;
  for (int c = 0; c < t.num_classes; ++c) {
    const auto k = static_cast<std::size_t>(c);
    push(r.best_epoch, "test", "dice", class_name(c), t.per_class_dice[k]);
    push(r.best_epoch, "test", "iou", class_name(c), t.per_class_iou[k]);
    push(r.best_epoch, "test", "hd95", class_name(c), t.per_class_hd95[k]);
  }
  push(r.best_epoch, "test", "dice", "foreground", t.mean_dice);
  push(r.best_epoch, "test", "miou", "foreground", t.mean_iou);
  push(r.best_epoch, "test", "hd95", "foreground", t.mean_hd95);
  push(r.best_epoch, "test", "dice", "all", t.mean_dice_all_classes);
  return rows;
}

std::string run_summary(const RunRecord& r) {
  std::ostringstream os;
  os << "run_id: " << r.run_id << '\n'
     << "seed: " << r.seed << '\n'
     << "routing: " << to_string(r.model.routing) << '\n'
     << "position: " << to_string(r.model.position) << '\n'
     << "init: " << to_string(r.model.init_scheme) << '\n'
     << "parameters: " << r.parameters.total << '\n'
     << "xattnres_overhead: " << r.parameters.xattnres_overhead << '\n'
     << "epochs: " << r.history.size() << '\n'
     << "best_epoch: " << r.best_epoch << '\n'
     << "test_dice_foreground: " << fmt("%.6f", r.test.mean_dice) << '\n'
     << "test_miou_foreground: " << fmt("%.6f", r.test.mean_iou) << '\n'
     << "test_hd95_foreground: " << fmt("%.6f", r.test.mean_hd95) << '\n'
     << "test_dice_all_classes: " << fmt("%.6f", r.test.mean_dice_all_classes) << '\n'
     << "routing_sites: " << r.traces.size() << '\n'
     << "max_uniformity: " << fmt("%.6f", r.max_uniformity()) << '\n';
  return os.str();
}

RunRecord run_experiment(const ExperimentConfig& config_in, const ProgressFn& progress) {
  const auto config = config_in.with_seed(config_in.seed);
  config.validate();
  const auto dataset = build_dataset(config);
  auto run = train_run(config, dataset, config.run_id, {}, progress);
  fs::create_directories(config.out_dir);
  const fs::path out(config.out_dir);
  write_metrics_csv(run_metric_rows(run.record), (out / "metrics.csv").string());
  write_traces_csv(run.record.traces, (out / "traces.csv").string());
  save_checkpoint<float>(run.model, nullptr, (out / "checkpoint.xars").string());
  write_text_file((out / "config.txt").string(), to_config_text(config));
  write_text_file((out / "summary.txt").string(), run_summary(run.record));
  return run.record;
}

std::string to_string(AblationSuite suite) {
  switch (suite) {
    case AblationSuite::Skip: return "skip";
    case AblationSuite::Position: return "position";
    case AblationSuite::Init: return "init";
  }
  return "?";
}

AblationSuite parse_ablation_suite(std::string_view text) {
  if (text == "skip") return AblationSuite::Skip;
  if (text == "position") return AblationSuite::Position;
  if (text == "init") return AblationSuite::Init;
  throw ConfigError("unknown ablation suite '" + std::string(text) + "' (expected skip, position or init)");
}

std::vector<AblationVariant> ablation_variants(AblationSuite suite, const BackboneConfig& base) {
  auto with = [&base](Routing r, Position p, InitScheme s) {
    BackboneConfig c = base;
    c.routing = r;
    c.position = p;
    c.init_scheme = s;
    return c;
  };
  const auto init = base.init_scheme;
  switch (suite) {
    case AblationSuite::Skip:
      return {{"baseline", "U-Net (baseline)", with(Routing::SkipOnly, Position::Full, init)},
              {"no-skip", "U-Net (no skip)", with(Routing::NoSkip, Position::Full, init)},
              {"replace", "U-Net + XAttnRes (replace)", with(Routing::Replace, Position::Full, init)},
              {"both", "U-Net + XAttnRes (both)", with(Routing::Both, Position::Full, init)}};
    case AblationSuite::Position:
      return {{"none", "None", with(Routing::Replace, Position::None, init)},
              {"encoder-only", "Encoder only", with(Routing::Replace, Position::EncoderOnly, init)},
              {"decoder-only", "Decoder only", with(Routing::Replace, Position::DecoderOnly, init)},
              {"full", "Full (Enc. + Dec.)", with(Routing::Replace, Position::Full, init)}};
    case AblationSuite::Init: {
      // The default model keeps its skips; an explicit replace base is honoured.
      const auto r = base.routing == Routing::Replace ? Routing::Replace : Routing::Both;
      return {{"zero", "Zero-init", with(r, Position::Full, InitScheme::ZeroInit)},
              {"random-normal", "Random", with(r, Position::Full, InitScheme::RandomNormal)},
              {"kaiming-uniform", "Kaiming uniform", with(r, Position::Full, InitScheme::KaimingUniform)},
              {"xavier-uniform", "Xavier uniform", with(r, Position::Full, InitScheme::XavierUniform)}};
    }
  }
  return {};
}

BackboneConfig effective_config(const BackboneConfig& config) {
  BackboneConfig c = config;
  if (c.position == Position::None) {
    if (c.routing == Routing::Replace) c.routing = Routing::NoSkip;
    if (c.routing == Routing::Both) c.routing = Routing::SkipOnly;
  }
  if (c.routing == Routing::SkipOnly || c.routing == Routing::NoSkip) {
    c.position = Position::Full;
    c.init_scheme = InitScheme::ZeroInit;
  }
  if (c.routing != Routing::Both) c.both_order = BothOrder::AttendThenConcat;
  return c;
}

const VariantSummary& AblationResult::find(std::string_view key) const {
  for (const auto& v : variants) {
    if (v.variant.key == key) return v;
  }
  throw ContractError("ablation has no variant '" + std::string(key) + "'");
}

std::string RunCache::key(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.model = effective_config(config.model);
  c.out_dir.clear();
  c.run_id.clear();
  c.seeds = {0};
  return to_config_text(c);
}

const RunRecord* RunCache::find(const ExperimentConfig& config) const {
  const auto it = runs_.find(key(config));
  return it == runs_.end() ? nullptr : &it->second;
}

void RunCache::store(const ExperimentConfig& config, const RunRecord& record) { runs_[key(config)] = record; }

AblationResult run_ablation(const ExperimentConfig& config, AblationSuite suite, const Dataset& dataset,
                            RunCache* cache, const ProgressFn& progress) {
  config.validate();
  AblationResult result;
  result.suite = suite;
  for (const auto& variant : ablation_variants(suite, config.model)) {
    VariantSummary summary;
    summary.variant = variant;
    std::vector<double> dice, iou, hd;
    for (auto seed : config.seeds) {
      ExperimentConfig run_cfg = config;
      run_cfg.model = variant.model;
      run_cfg = run_cfg.with_seed(seed);
      RunRecord rec;
      if (const RunRecord* hit = cache ? cache->find(run_cfg) : nullptr) {
        rec = *hit;
        report(progress, variant.label + " seed " + std::to_string(seed) + " reused from an identical network");
      } else {
        rec = train_run(run_cfg, dataset, variant.key, variant.label, progress).record;
        if (cache) cache->store(run_cfg, rec);
      }
      rec.run_id = variant.key;
      rec.label = variant.label;
      rec.model = variant.model;
      rec.model.seed = seed;
      report(progress, variant.label + " seed " + std::to_string(seed) + " test dice " +
                           fmt("%.4f", rec.test.mean_dice) + " (" + fmt("%.1f", rec.seconds) + " s)");
      dice.push_back(rec.test.mean_dice);
      iou.push_back(rec.test.mean_iou);
      hd.push_back(rec.test.mean_hd95);
      summary.runs.push_back(std::move(rec));
    }
    std::tie(summary.mean_dice, summary.std_dice) = mean_std(dice);
    std::tie(summary.mean_iou, summary.std_iou) = mean_std(iou);
    std::tie(summary.mean_hd95, summary.std_hd95) = mean_std(hd);
    result.variants.push_back(std::move(summary));
  }
  return result;
}

std::vector<MetricRow> ablation_metric_rows(const AblationResult& result) {
  std::vector<MetricRow> rows;
  for (const auto& v : result.variants) {
    for (const auto& r : v.runs) {
      auto row = base_row(r);
      row.epoch = r.best_epoch;
      row.split = "test";
      row.cls = "foreground";
      for (auto [metric, value] : {std::pair<const char*, double>{"dice", r.test.mean_dice},
                                   {"miou", r.test.mean_iou},
                                   {"hd95", r.test.mean_hd95}}) {
        row.metric = metric;
        row.value = value;
        rows.push_back(row);
      }
    }
    MetricRow agg;
    agg.run_id = v.variant.key;
    agg.routing = to_string(v.variant.model.routing);
    agg.position = to_string(v.variant.model.position);
    agg.init = to_string(v.variant.model.init_scheme);
    agg.split = "test";
    agg.cls = "foreground";
    for (auto [metric, value] : {std::pair<const char*, double>{"dice_mean", v.mean_dice},
                                 {"dice_std", v.std_dice},
                                 {"miou_mean", v.mean_iou},
                                 {"miou_std", v.std_iou},
                                 {"hd95_mean", v.mean_hd95},
                                 {"hd95_std", v.std_hd95}}) {
      agg.metric = metric;
      agg.value = value;
      rows.push_back(agg);
    }
  }
  return rows;
}

std::string ablation_table(const AblationResult& result) {
  std::size_t width = 8;
  for (const auto& v : result.variants) width = std::max(width, v.variant.label.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %-15s  %-15s  %-15s  %s\n", static_cast<int>(width), "Variant",
                "Dice (%)", "mIoU (%)", "HD95 (px)", "Params");
  os << line;
  for (const auto& v : result.variants) {
    const auto params = v.runs.empty() ? 0 : v.runs.front().parameters.total;
    std::snprintf(line, sizeof(line), "%-*s  %6.2f +- %5.2f  %6.2f +- %5.2f  %6.2f +- %5.2f  %zu\n",
                  static_cast<int>(width), v.variant.label.c_str(), 100.0 * v.mean_dice, 100.0 * v.std_dice,
                  100.0 * v.mean_iou, 100.0 * v.std_iou, v.mean_hd95, v.std_hd95, params);
    os << line;
  }
  return os.str();
}

AblationResult run_ablation_experiment(const ExperimentConfig& config, AblationSuite suite,
                                       const ProgressFn& progress) {
  config.validate();
  const auto dataset = build_dataset(config);
  RunCache cache;
  auto result = run_ablation(config, suite, dataset, &cache, progress);
  fs::create_directories(config.out_dir);
  const fs::path out(config.out_dir);
  write_metrics_csv(ablation_metric_rows(result), (out / "ablation.csv").string());
  write_text_file((out / "ablation.txt").string(), ablation_table(result));
  write_text_file((out / "config.txt").string(), to_config_text(config));
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

using D = double;
using TD = Tensor<D>;

TD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<D> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return TD::from_data(std::move(shape), std::move(v), true);
}

// Contracts an arbitrary output with fixed random weights so every output
// element contributes a distinct slope.
TD probe(const TD& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<D> w(out.numel());
  for (auto& x : w) x = dist(rng);
  return sum(mul(out, TD::from_data(out.shape(), std::move(w))));
}

GradcheckCase unary(std::string name, Shape shape, std::uint64_t seed, std::function<TD(const TD&)> op) {
  return {name, [=] {
            std::mt19937_64 rng(seed);
            auto x = random_tensor(shape, rng);
            return finite_difference_gradcheck(
                name, [=](const std::vector<TD>& in) { return probe(op(in[0]), seed + 1); }, {x}, {"input"});
          }};
}

GradcheckCase binary(std::string name, Shape a_shape, Shape b_shape, std::uint64_t seed,
                     std::function<TD(const TD&, const TD&)> op) {
  return {name, [=] {
            std::mt19937_64 rng(seed);
            auto a = random_tensor(a_shape, rng);
            auto b = random_tensor(b_shape, rng);
            return finite_difference_gradcheck(
                name, [=](const std::vector<TD>& in) { return probe(op(in[0], in[1]), seed + 1); }, {a, b},
                {"lhs", "rhs"});
          }};
}

LabelMap random_labels(std::size_t b, std::size_t h, std::size_t w, int classes, std::mt19937_64& rng) {
  LabelMap m(b, h, w);
  std::uniform_int_distribution<int> dist(0, classes - 1);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(dist(rng));
  return m;
}

}  // namespace

std::vector<GradcheckCase> gradcheck_cases(std::uint64_t seed) {
  std::vector<GradcheckCase> cases;
  const Shape fm{2, 3, 4, 5};
  cases.push_back(binary("add", fm, fm, seed + 1, [](const TD& a, const TD& b) { return add(a, b); }));
  cases.push_back(binary("sub", fm, fm, seed + 2, [](const TD& a, const TD& b) { return sub(a, b); }));
  cases.push_back(binary("mul", fm, fm, seed + 3, [](const TD& a, const TD& b) { return mul(a, b); }));
  cases.push_back(unary("scale", fm, seed + 4, [](const TD& a) { return scale(a, 0.37); }));
  cases.push_back(unary("relu", fm, seed + 5, [](const TD& a) { return relu(a); }));
  cases.push_back(unary("sum", fm, seed + 6, [](const TD& a) { return sum(a); }));
  cases.push_back(unary("mean", fm, seed + 7, [](const TD& a) { return mean(a); }));
  cases.push_back({"conv2d_3x3_same", [seed] {
                     std::mt19937_64 rng(seed + 8);
                     auto x = random_tensor({2, 3, 5, 4}, rng);
                     auto w = random_tensor({4, 3, 3, 3}, rng);
                     auto b = random_tensor({4}, rng);
                     return finite_difference_gradcheck(
                         "conv2d_3x3_same",
                         [seed](const std::vector<TD>& in) {
                           return probe(conv2d(in[0], in[1], in[2], Padding::Same), seed + 9);
                         },
                         {x, w, b}, {"input", "weight", "bias"});
                   }});
  cases.push_back({"conv2d_1x1_valid", [seed] {
                     std::mt19937_64 rng(seed + 10);
                     auto x = random_tensor({2, 3, 4, 4}, rng);
                     auto w = random_tensor({2, 3, 1, 1}, rng);
                     return finite_difference_gradcheck(
                         "conv2d_1x1_valid",
                         [seed](const std::vector<TD>& in) {
                           return probe(conv2d(in[0], in[1], TD{}, Padding::None), seed + 11);
                         },
                         {x, w}, {"input", "weight"});
                   }});
  cases.push_back(unary("adaptive_max_pool", {2, 2, 7, 6}, seed + 12,
                        [](const TD& a) { return adaptive_max_pool(a, 3, 4); }));
  cases.push_back(unary("bilinear_resize_up", {1, 2, 3, 4}, seed + 13,
                        [](const TD& a) { return bilinear_resize(a, 7, 5); }));
  cases.push_back(unary("bilinear_resize_down", {1, 2, 6, 6}, seed + 14,
                        [](const TD& a) { return bilinear_resize(a, 4, 3); }));
  cases.push_back(binary("rmsnorm_channels", {2, 4, 3, 3}, {4}, seed + 15,
                         [](const TD& x, const TD& g) { return rmsnorm_channels(x, g, 1e-6); }));
  cases.push_back(unary("softmax_axis", {2, 4, 3, 3}, seed + 16, [](const TD& a) { return softmax_axis(a, 1); }));
  cases.push_back(binary("concat_channels", {2, 2, 3, 3}, {2, 3, 3, 3}, seed + 17,
                         [](const TD& a, const TD& b) { return concat_channels(a, b); }));
  cases.push_back(unary("slice_channels", {2, 5, 3, 3}, seed + 18,
                        [](const TD& a) { return slice_channels(a, 1, 3); }));
  cases.push_back(binary("channel_dot", {2, 4, 3, 3}, {4}, seed + 19,
                         [](const TD& x, const TD& v) { return channel_dot(x, v); }));
  cases.push_back(binary("scale_by_map", {2, 1, 3, 3}, {2, 4, 3, 3}, seed + 20,
                         [](const TD& m, const TD& x) { return scale_by_map(m, x); }));

  cases.push_back({"cross_entropy", [seed] {
                     std::mt19937_64 rng(seed + 21);
                     auto z = random_tensor({2, 4, 3, 3}, rng, -2.0, 2.0);
                     auto labels = random_labels(2, 3, 3, 4, rng);
                     return finite_difference_gradcheck(
                         "cross_entropy", [labels](const std::vector<TD>& in) { return cross_entropy(in[0], labels); },
                         {z}, {"logits"});
                   }});
  cases.push_back({"soft_dice_loss", [seed] {
                     std::mt19937_64 rng(seed + 22);
                     auto z = random_tensor({2, 4, 3, 3}, rng, -2.0, 2.0);
                     auto labels = random_labels(2, 3, 3, 4, rng);
                     return finite_difference_gradcheck(
                         "soft_dice_loss",
                         [labels](const std::vector<TD>& in) { return soft_dice_loss(in[0], labels, 1.0); }, {z},
                         {"logits"});
                   }});
  cases.push_back({"combined_loss", [seed] {
                     std::mt19937_64 rng(seed + 23);
                     auto z = random_tensor({1, 3, 4, 4}, rng, -2.0, 2.0);
                     auto labels = random_labels(1, 4, 4, 3, rng);
                     return finite_difference_gradcheck(
                         "combined_loss",
                         [labels](const std::vector<TD>& in) { return combined_loss(in[0], labels, LossWeights{}); },
                         {z}, {"logits"});
                   }});

  cases.push_back({"attend", [seed] {
                     std::mt19937_64 rng(seed + 24);
                     // Sources: a finer map with fewer channels, a coarser one with
                     // matching channels; the current feature is 3 channels at 4x4.
                     const StageTag fine{StageSide::Encoder, 1}, coarse{StageSide::Encoder, 2};
                     XAttnResUnit<D> unit("site", 3, {{fine, 2}, {coarse, 3}});
                     auto h1 = random_tensor({2, 2, 8, 8}, rng);
                     auto h2 = random_tensor({2, 3, 2, 2}, rng);
                     auto x = random_tensor({2, 3, 4, 4}, rng);
                     auto q = random_tensor({3}, rng);
                     auto g = random_tensor({3}, rng, 0.5, 1.5);
                     auto p = random_tensor({3, 2, 1, 1}, rng);
                     return finite_difference_gradcheck(
                         "attend",
                         [unit, fine, coarse, seed](const std::vector<TD>& in) mutable {
                           unit.pseudo_query() = in[3];
                           unit.rms_gain() = in[4];
                           *unit.projection(fine) = in[5];
                           HistoryPool<D> pool;
                           pool.append(in[0], fine);
                           pool.append(in[1], coarse);
                           return probe(attend(pool, in[2], unit).output, seed + 25);
                         },
                         {h1, h2, x, q, g, p}, {"history_fine", "history_coarse", "current", "pseudo_query", "rms_gain",
                                                "projection"});
                   }});

  cases.push_back({"backbone_end_to_end", [seed] {
                     BackboneConfig cfg;
                     cfg.stages = 2;
                     cfg.base_channels = 2;
                     cfg.in_channels = 1;
                     cfg.num_classes = 3;
                     cfg.routing = Routing::Both;
                     cfg.position = Position::Full;
                     cfg.init_scheme = InitScheme::RandomNormal;
                     cfg.seed = seed + 26;
                     Backbone<D> model(cfg);
                     // Non-trivial gains, queries and biases so every path carries signal.
                     std::mt19937_64 rng(seed + 27);
                     std::uniform_real_distribution<double> dist(-0.5, 0.5);
                     for (auto& [name, t] : model.named_parameters()) {
                       if (name.find("bias") != std::string::npos || name.find("pseudo_query") != std::string::npos ||
                           name.find("rms_gain") != std::string::npos) {
                         for (auto& v : t.mutable_data()) v += dist(rng);
                       }
                     }
                     std::vector<TD> inputs;
                     std::vector<std::string> names;
                     auto image = random_tensor({1, 1, 8, 8}, rng);
                     inputs.push_back(image);
                     names.push_back("image");
                     for (auto& [name, t] : model.named_parameters()) {
                       t.set_requires_grad(true);
                       inputs.push_back(t);
                       names.push_back(name);
                     }
                     auto labels = random_labels(1, 8, 8, 3, rng);
                     return finite_difference_gradcheck(
                         "backbone_end_to_end",
                         [model, labels](const std::vector<TD>& in) {
                           return combined_loss(model.forward(in[0]).logits, labels, LossWeights{});
                         },
                         inputs, names);
                   }});
  return cases;
}

bool GradcheckSuiteResult::passed() const {
  return !reports.empty() && std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
}

std::vector<std::string> GradcheckSuiteResult::failures() const {
  std::vector<std::string> out;
  for (const auto& r : reports) {
    if (!r.passed) out.push_back(r.label);
  }
  return out;
}

GradcheckSuiteResult run_gradcheck_suite(const std::vector<GradcheckCase>& cases, const ProgressFn& progress) {
  GradcheckSuiteResult result;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& c : cases) {
    GradcheckReport r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r.label = c.name;
      r.passed = false;
      r.diagnostic = std::string("threw: ") + e.what();
    }
    if (r.label.empty()) r.label = c.name;
    report(progress, std::string(r.passed ? "PASS " : "FAIL ") + r.label + " max_rel_err " +
                         fmt("%.3e", r.max_relative_error()) + (r.diagnostic.empty() ? "" : " (" + r.diagnostic + ")"));
    result.reports.push_back(std::move(r));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string gradcheck_report_text(const GradcheckSuiteResult& result) {
  std::ostringstream os;
  char line[256];
  for (const auto& r : result.reports) {
    std::size_t checked = 0;
    for (const auto& in : r.inputs) checked += in.checked;
    std::snprintf(line, sizeof(line), "%-4s %-24s max_rel_err %.3e  checked %zu  skipped %zu", r.passed ? "PASS" : "FAIL",
                  r.label.c_str(), r.max_relative_error(), checked, r.skipped());
    os << line;
    if (!r.diagnostic.empty()) os << "  " << r.diagnostic;
    os << '\n';
    if (!r.passed) {
      for (const auto& in : r.inputs) {
        std::snprintf(line, sizeof(line), "       %-22s max_rel_err %.3e\n", in.name.c_str(), in.max_relative_error);
        os << line;
      }
    }
  }
  std::snprintf(line, sizeof(line), "%zu cases, %zu failed, %.2f s\n", result.reports.size(), result.failures().size(),
                result.seconds);
  os << line;
  return os.str();
}

std::string gradcheck_csv(const GradcheckSuiteResult& result) {
  std::ostringstream os;
  os << "case,input,max_relative_error,checked,skipped_nonsmooth,passed\n";
  for (const auto& r : result.reports) {
    for (const auto& in : r.inputs) {
      os << r.label << ',' << in.name << ',' << fmt("%.6e", in.max_relative_error) << ',' << in.checked << ','
         << in.skipped_nonsmooth << ',' << (r.passed ? 1 : 0) << '\n';
    }
    if (r.inputs.empty()) os << r.label << ",,,0,0," << (r.passed ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string routing_report(const std::vector<AttentionTrace>& traces) {
  if (traces.empty()) return "model has no routing sites\n";
  std::ostringstream os;
  char line[256];
  for (const auto& t : traces) {
    std::snprintf(line, sizeof(line), "%s  (%zu entries, %zux%zu)  uniformity %.4f\n", t.site.c_str(), t.entries,
                  t.height, t.width, t.uniformity_score());
    os << line;
    for (std::size_t e = 0; e < t.entries; ++e) {
      std::snprintf(line, sizeof(line), "  %-6s mean %.4f  min %.4f  max %.4f\n", to_string(t.source_tags[e]).c_str(),
                    t.mean_weight(e), t.min_weight(e), t.max_weight(e));
      os << line;
    }
  }
  return os.str();
}

}  // namespace xattnres
