#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "magnet/runio.hpp"

namespace {

struct CommonArgs {
  std::string config_file;
  std::string preset;
  std::string data_root;
  std::string out_dir;
  uint64_t seed = 0;
  std::string modalities;
  std::string fusion_mode;
  int rounds = -1;
  int local_epochs = -1;
  int epochs = -1;
  int batch = -1;
  double sample_ratio = -1.0;
  int synth_clients = -1;
  int windows_per_class = -1;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "JSON config file with overrides");
  cmd->add_option("--preset", args.preset, "named defaults: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--data", args.data_root, "dataset root directory");
  cmd->add_option("--out", args.out_dir, "run/output directory");
  cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--modalities", args.modalities,
                  "comma-separated subset of act,acw,dc,pm");
  cmd->add_option("--fusion", args.fusion_mode, "fusion core: magnet, concat or attention")
      ->check(CLI::IsMember({"magnet", "concat", "attention"}));
  cmd->add_option("--rounds", args.rounds, "federated global rounds");
  cmd->add_option("--local-epochs", args.local_epochs, "federated local epochs per round");
  cmd->add_option("--epochs", args.epochs, "centralized training epochs");
  cmd->add_option("--batch", args.batch, "minibatch size");
  cmd->add_option("--sample-ratio", args.sample_ratio, "fraction of clients per round");
  cmd->add_option("--clients", args.synth_clients, "synthetic participant count");
  cmd->add_option("--windows-per-class", args.windows_per_class,
                  "synthetic windows per class per participant");
}

magnet::RunConfig resolve_config(const CLI::App* cmd, const CommonArgs& args) {
  std::optional<std::string> file, preset;
  if (cmd->count("--config")) file = args.config_file;
  if (cmd->count("--preset")) preset = args.preset;
  magnet::RunConfig cfg = magnet::load_config(file, preset);

  if (cmd->count("--data")) cfg.data_root = args.data_root;
  if (cmd->count("--out")) cfg.out_dir = args.out_dir;
  if (cmd->count("--seed")) cfg.seed = args.seed;
  if (cmd->count("--fusion")) cfg.fusion_mode = args.fusion_mode;
  if (cmd->count("--modalities")) {
    cfg.modalities.clear();
    std::string rest = args.modalities;
    while (!rest.empty()) {
      const size_t comma = rest.find(',');
      cfg.modalities.push_back(rest.substr(0, comma));
      if (comma == std::string::npos) break;
      rest = rest.substr(comma + 1);
    }
  }
  if (cmd->count("--rounds")) cfg.fed.rounds = args.rounds;
  if (cmd->count("--local-epochs")) cfg.fed.local_epochs = args.local_epochs;
  if (cmd->count("--epochs")) cfg.central.epochs = args.epochs;
  if (cmd->count("--batch")) cfg.optim.batch = args.batch;
  if (cmd->count("--sample-ratio")) cfg.fed.sample_ratio = args.sample_ratio;
  if (cmd->count("--clients")) cfg.synth.clients = args.synth_clients;
  if (cmd->count("--windows-per-class")) cfg.synth.windows_per_class = args.windows_per_class;
  magnet::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-MAGNET multimodal HAR: training, federated simulation and evaluation"};
  app.require_subcommand(1);

  CommonArgs synth_args, central_args, fed_args, eval_args, ablate_args, grad_args;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset in MEx CSV layout");
  add_common_options(synth, synth_args);

  CLI::App* central = app.add_subcommand("train-centralized", "centralized training run");
  add_common_options(central, central_args);

  CLI::App* fed = app.add_subcommand("train-federated", "federated training simulation");
  add_common_options(fed, fed_args);

  CLI::App* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
  add_common_options(eval, eval_args);
  std::string checkpoint_path, split = "test";
  bool with_embeddings = false;
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file (.tmgn)")->required();
  eval->add_option("--split", split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_flag("--embeddings", with_embeddings, "export fused embeddings for external t-SNE");

  CLI::App* ablate = app.add_subcommand("ablate", "modality-subset sweep (all 3-of-4 plus full)");
  add_common_options(ablate, ablate_args);
  bool ablate_federated = false;
  ablate->add_flag("--federated", ablate_federated, "run the sweep with federated training");

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference verification suite");
  add_common_options(grad, grad_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return magnet::cmd_synth(resolve_config(synth, synth_args), std::cout);
    if (central->parsed())
      return magnet::cmd_train(resolve_config(central, central_args), false, std::cout);
    if (fed->parsed()) return magnet::cmd_train(resolve_config(fed, fed_args), true, std::cout);
    if (eval->parsed()) {
      return magnet::cmd_evaluate(resolve_config(eval, eval_args), checkpoint_path, split,
                                  with_embeddings, std::cout);
    }
    if (ablate->parsed()) {
      return magnet::cmd_ablate(resolve_config(ablate, ablate_args), ablate_federated,
                                std::cout);
    }
    if (grad->parsed()) {
      const CommonArgs& a = grad_args;
      const uint64_t seed = grad->count("--seed") ? a.seed : 42;
      return magnet::cmd_gradcheck(seed, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
