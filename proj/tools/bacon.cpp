// bacon: dataset generation, training, evaluation, estimation diagnostics and
// ablation grids from a JSON experiment config.
//
// Exit codes: 0 success, 1 numerical abort, 2 I/O or config error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bacon/commands.hpp"

namespace {

constexpr int kExitNumerical = 1;
constexpr int kExitConfig = 2;

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON experiment config (defaults apply when omitted)");
  cmd->add_option("--set", f.overrides, "Override a config key, e.g. --set train.lr=0.05");
  cmd->add_option("--out", f.out_dir, "Output directory (defaults to eval.out_dir)");
}

bacon::ExperimentConfig load_config(const CommonFlags& f, std::optional<std::uint64_t> train_seed) {
  nlohmann::json doc = nlohmann::json::object();
  if (!f.config_path.empty()) {
    if (!std::filesystem::exists(f.config_path)) throw bacon::IoError("missing config file: " + f.config_path);
    doc = bacon::read_json(f.config_path);
  }
  for (const auto& o : f.overrides) bacon::apply_override(doc, o);
  if (train_seed) doc["train"]["seed"] = *train_seed;
  auto cfg = bacon::parse_config(doc);
  if (!f.out_dir.empty()) cfg.eval.out_dir = f.out_dir;
  bacon::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-branch generalized category discovery on embedding data"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, eval_flags, est_flags, ablate_flags;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic long-tailed dataset");
  add_common(gen, gen_flags);

  std::uint64_t train_seed = 0;
  std::string resume;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoint + telemetry");
  add_common(train, train_flags);
  train->add_option("--seed", train_seed, "Training seed")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from");

  std::vector<std::uint64_t> eval_seeds;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with one or more k-means seeds");
  add_common(eval, eval_flags);
  eval->add_option("--seed", eval_seeds, "Evaluation seed(s)")->required()->delimiter(',');
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint (defaults to <out>/checkpoint.json)");

  std::uint64_t est_seed = 0;
  std::string est_ckpt;
  auto* est = app.add_subcommand("estimate", "One class-distribution estimation round");
  add_common(est, est_flags);
  est->add_option("--seed", est_seed, "k-means seed");
  est->add_option("--checkpoint", est_ckpt, "Estimate on this model's backbone features");

  std::string axis;
  std::vector<std::uint64_t> ablate_seeds;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write a table CSV");
  add_common(ablate, ablate_flags);
  ablate->add_option("--axis", axis, "similarity | r | k | alpha_beta | loss_mode")->required();
  ablate->add_option("--seed", ablate_seeds, "Seed set (defaults to eval.seeds)")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = load_config(gen_flags, std::nullopt);
      bacon::cmd_gen_data(cfg, cfg.eval.out_dir, std::cout);
    } else if (train->parsed()) {
      const auto cfg = load_config(train_flags, train_seed);
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) {
        if (!std::filesystem::exists(resume)) throw bacon::IoError("missing checkpoint: " + resume);
        from = resume;
      }
      bacon::cmd_train(cfg, cfg.eval.out_dir, from, std::cout);
    } else if (eval->parsed()) {
      const auto cfg = load_config(eval_flags, std::nullopt);
      const std::filesystem::path ckpt =
          eval_ckpt.empty() ? std::filesystem::path(cfg.eval.out_dir) / "checkpoint.json" : std::filesystem::path(eval_ckpt);
      bacon::cmd_eval(cfg, ckpt, eval_seeds, cfg.eval.out_dir, std::cout);
    } else if (est->parsed()) {
      const auto cfg = load_config(est_flags, std::nullopt);
      std::optional<std::filesystem::path> ckpt;
      if (!est_ckpt.empty()) ckpt = est_ckpt;
      bacon::cmd_estimate(cfg, est_seed, ckpt, cfg.eval.out_dir, std::cout);
    } else if (ablate->parsed()) {
      const auto cfg = load_config(ablate_flags, std::nullopt);
      bacon::cmd_ablate(cfg, axis, ablate_seeds.empty() ? cfg.eval.seeds : ablate_seeds, cfg.eval.out_dir,
                        std::cout);
    }
  } catch (const bacon::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const bacon::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
