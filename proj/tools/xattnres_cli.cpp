// Command-line entry point: run, ablate, gradcheck, inspect-routing.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "xattnres/checkpoint.hpp"
#include "xattnres/config.hpp"
#include "xattnres/errors.hpp"
#include "xattnres/experiment.hpp"

namespace fs = std::filesystem;
using namespace xattnres;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

std::string kebab(std::string key) {
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

// Config file plus per-key overrides shared by `run` and `ablate`.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment config file (key = value lines)")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) {
      cmd->add_option("--" + kebab(key), overrides[key], "Override '" + key + "'");
    }
  }

  ExperimentConfig resolve(CLI::App* cmd) const {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    for (const auto& key : config_keys()) {
      if (cmd->count("--" + kebab(key)) > 0) apply_setting(cfg, key, overrides.at(key));
    }
    cfg.validate();
    return cfg;
  }
};

ProgressFn progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-stage attention residual routing for U-Net segmentation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  auto* run_cmd = app.add_subcommand("run", "Train and evaluate one configuration");
  ConfigFlags run_flags;
  run_flags.attach(run_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation suite over several seeds");
  ConfigFlags ablate_flags;
  ablate_flags.attach(ablate_cmd);
  std::string suite_name;
  ablate_cmd->add_option("--suite", suite_name, "skip, position or init")
      ->required()
      ->check(CLI::IsMember({"skip", "position", "init"}));

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  std::string grad_out;
  std::uint64_t grad_seed = 7;
  grad_cmd->add_option("--out-dir", grad_out, "Write gradcheck.txt and gradcheck.csv here");
  grad_cmd->add_option("--seed", grad_seed, "Seed for the random test inputs");

  auto* inspect_cmd = app.add_subcommand("inspect-routing", "Export routing weights of a trained checkpoint");
  std::string checkpoint_path;
  std::string inspect_config;
  std::string inspect_out = "out";
  std::string split = "test";
  std::size_t max_samples = 0;
  inspect_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint written by `run`")
      ->required()
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--config", inspect_config, "Config describing the dataset")->check(CLI::ExistingFile);
  inspect_cmd->add_option("--out-dir", inspect_out, "Output directory");
  inspect_cmd->add_option("--split", split, "Which split to forward")->check(CLI::IsMember({"train", "val", "test"}));
  inspect_cmd->add_option("--samples", max_samples, "Use at most this many samples (0 = whole split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  const auto progress = progress_printer(quiet);
  try {
    if (*run_cmd) {
      const auto cfg = run_flags.resolve(run_cmd);
      const auto rec = run_experiment(cfg, progress);
      std::cout << run_summary(rec);
      std::cout << "outputs written to " << cfg.out_dir << '\n';
      return 0;
    }
    if (*ablate_cmd) {
      const auto cfg = ablate_flags.resolve(ablate_cmd);
      const auto result = run_ablation_experiment(cfg, parse_ablation_suite(suite_name), progress);
      std::cout << ablation_table(result);
      std::cout << "outputs written to " << cfg.out_dir << '\n';
      return 0;
    }
    if (*grad_cmd) {
      const auto result = run_gradcheck_suite(gradcheck_cases(grad_seed));
      const auto text = gradcheck_report_text(result);
      std::cout << text;
      if (!grad_out.empty()) {
        fs::create_directories(grad_out);
        write_text_file((fs::path(grad_out) / "gradcheck.txt").string(), text);
        write_text_file((fs::path(grad_out) / "gradcheck.csv").string(), gradcheck_csv(result));
      }
      if (!result.passed()) {
        std::cerr << "gradient check failed for:";
        for (const auto& name : result.failures()) std::cerr << ' ' << name;
        std::cerr << '\n';
        return kRuntimeFailure;
      }
      return 0;
    }
    if (*inspect_cmd) {
      ExperimentConfig cfg = inspect_config.empty() ? ExperimentConfig{} : load_config(inspect_config);
      const auto model = load_checkpoint<float>(checkpoint_path);
      if (model.config().num_classes != cfg.model.num_classes || model.config().in_channels != cfg.model.in_channels) {
        throw ConfigError("checkpoint model (" + std::to_string(model.config().in_channels) + " in, " +
                          std::to_string(model.config().num_classes) + " classes) does not match the dataset config");
      }
      const auto dataset = build_dataset(cfg);
      const auto& all = split == "train" ? dataset.splits.train : split == "val" ? dataset.splits.val
                                                                                  : dataset.splits.test;
      std::vector<std::size_t> indices = all;
      if (max_samples > 0 && indices.size() > max_samples) indices.resize(max_samples);
      const auto traces = routing_traces(model, dataset, indices);
      fs::create_directories(inspect_out);
      write_traces_csv(traces, (fs::path(inspect_out) / "traces.csv").string());
      const auto text = routing_report(traces);
      write_text_file((fs::path(inspect_out) / "routing.txt").string(), text);
      std::cout << text;
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}
