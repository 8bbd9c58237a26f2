#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "magnet/fed.hpp"
#include "magnet/fusion.hpp"

namespace magnet {

// Fully resolved run configuration. The JSON form round-trips exactly: the
// echo written to the run directory re-creates the identical run.
struct RunConfig {
  std::string preset = "desk";
  uint64_t seed = 42;
  std::string data_root;
  std::string out_dir = "runs/run";
  std::vector<std::string> modalities = {"act", "acw", "dc", "pm"};
  std::string fusion_mode = "magnet";

  struct TsSection {
    int64_t model_dim = 32;
    int layers = 2;
    int heads = 2;
    int64_t head_dim = 16;
    int64_t ff_dim = 64;
    double dropout = 0.1;
    int64_t max_seq_len = 50;
    int lora_rank = 4;
    double lora_alpha = 8.0;
    bool use_sinusoidal = true;
    bool use_relative_bias = true;
    int num_buckets = 32;
    int max_distance = 128;
    bool share_act_acw = false;
  } ts;

  struct DartSection {
    std::vector<int64_t> channels = {8, 16};
    int64_t reduction = 4;
    int64_t embed_dim = 32;
    int64_t hidden = 16;
    int lstm_layers = 1;
    int rnn_layers = 1;
    int gru_layers = 1;
    double dropout = 0.1;
  } dart;

  struct FusionSection {
    int64_t dim = 32;
    int blocks = 3;
    int gat_heads = 2;
    int experts = 4;
    int top_k = 2;
    double lambda_moe = 0.01;
    double classifier_dropout = 0.1;
  } fusion;

  struct OptimSection {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    int grad_accum = 1;
    int batch = 8;
  } optim;

  SchedulerConfig scheduler;
  CentralConfig central;
  FedConfig fed;
  DataConfig data;
  SynthConfig synth;
};

// Named defaults: "desk" is the CPU-minutes configuration, "paper" the
// full-scale one.
RunConfig preset_config(const std::string& name);

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& doc);

// Recursive merge of an override document into the full default document.
// Unknown keys fail with a nearest-key suggestion; type mismatches name the
// offending key path.
void merge_config_json(nlohmann::json& base, const nlohmann::json& overrides,
                       const std::string& path = "");

// preset defaults -> optional override file -> validation.
RunConfig load_config(const std::optional<std::string>& file,
                      const std::optional<std::string>& preset);

void validate_config(const RunConfig& cfg);

ModelConfig build_model_config(const RunConfig& cfg);
TrainHyper build_hyper(const RunConfig& cfg);

// FNV-1a over the architecture-determining sections, as a hex string.
std::string config_hash(const RunConfig& cfg);

}  // namespace magnet
