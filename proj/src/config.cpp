#include "magnet/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace magnet {

using nlohmann::json;

RunConfig preset_config(const std::string& name) {
  if (name == "desk") {
    return RunConfig{};
  }
  if (name == "paper") {
    RunConfig cfg;
    cfg.preset = "paper";
    cfg.ts = {.model_dim = 512, .layers = 8, .heads = 8, .head_dim = 64, .ff_dim = 2048,
              .dropout = 0.1, .max_seq_len = 500, .lora_rank = 16, .lora_alpha = 32.0,
              .use_sinusoidal = true, .use_relative_bias = true, .num_buckets = 32,
              .max_distance = 128, .share_act_acw = false};
    cfg.dart = {.channels = {64, 128, 256, 512}, .reduction = 16, .embed_dim = 512,
                .hidden = 256, .lstm_layers = 3, .rnn_layers = 2, .gru_layers = 1,
                .dropout = 0.1};
    cfg.fusion = {.dim = 512, .blocks = 3, .gat_heads = 8, .experts = 4, .top_k = 2,
                  .lambda_moe = 0.01, .classifier_dropout = 0.1};
    cfg.optim = {.lr = 1e-4, .weight_decay = 1e-4, .beta1 = 0.9, .beta2 = 0.999,
                 .eps = 1e-8, .clip_norm = 1.0, .grad_accum = 6, .batch = 8};
    cfg.data = {.window_sec = 5.0, .stride_sec = 1.0, .accel_hz = 100.0, .frame_hz = 15.0,
                .augment_sigma = 0.01};
    return cfg;
  }
  throw Error("unknown preset '" + name + "' (expected desk or paper)");
}

json config_to_json(const RunConfig& c) {
  json fed_client_lr = json::object();
  for (const auto& [id, mult] : c.fed.client_lr) fed_client_lr[id] = mult;
  return json{
      {"preset", c.preset},
      {"seed", c.seed},
      {"data_root", c.data_root},
      {"out_dir", c.out_dir},
      {"modalities", c.modalities},
      {"fusion_mode", c.fusion_mode},
      {"ts",
       {{"model_dim", c.ts.model_dim},
        {"layers", c.ts.layers},
        {"heads", c.ts.heads},
        {"head_dim", c.ts.head_dim},
        {"ff_dim", c.ts.ff_dim},
        {"dropout", c.ts.dropout},
        {"max_seq_len", c.ts.max_seq_len},
        {"lora_rank", c.ts.lora_rank},
        {"lora_alpha", c.ts.lora_alpha},
        {"use_sinusoidal", c.ts.use_sinusoidal},
        {"use_relative_bias", c.ts.use_relative_bias},
        {"num_buckets", c.ts.num_buckets},
        {"max_distance", c.ts.max_distance},
        {"share_act_acw", c.ts.share_act_acw}}},
      {"dart",
       {{"channels", c.dart.channels},
        {"reduction", c.dart.reduction},
        {"embed_dim", c.dart.embed_dim},
        {"hidden", c.dart.hidden},
        {"lstm_layers", c.dart.lstm_layers},
        {"rnn_layers", c.dart.rnn_layers},
        {"gru_layers", c.dart.gru_layers},
        {"dropout", c.dart.dropout}}},
      {"fusion",
       {{"dim", c.fusion.dim},
        {"blocks", c.fusion.blocks},
        {"gat_heads", c.fusion.gat_heads},
        {"experts", c.fusion.experts},
        {"top_k", c.fusion.top_k},
        {"lambda_moe", c.fusion.lambda_moe},
        {"classifier_dropout", c.fusion.classifier_dropout}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"weight_decay", c.optim.weight_decay},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"clip_norm", c.optim.clip_norm},
        {"grad_accum", c.optim.grad_accum},
        {"batch", c.optim.batch}}},
      {"scheduler",
       {{"enabled", c.scheduler.enabled},
        {"factor", c.scheduler.factor},
        {"patience", c.scheduler.patience},
        {"min_lr", c.scheduler.min_lr}}},
      {"train",
       {{"epochs", c.central.epochs},
        {"patience", c.central.patience},
        {"monitor", c.central.monitor},
        {"optimizer_reset_period", c.central.optimizer_reset_period}}},
      {"fed",
       {{"rounds", c.fed.rounds},
        {"local_epochs", c.fed.local_epochs},
        {"sample_ratio", c.fed.sample_ratio},
        {"patience", c.fed.patience},
        {"monitor", c.fed.monitor},
        {"size_weighted", c.fed.size_weighted},
        {"client_lr", fed_client_lr}}},
      {"data",
       {{"window_sec", c.data.window_sec},
        {"stride_sec", c.data.stride_sec},
        {"accel_hz", c.data.accel_hz},
        {"frame_hz", c.data.frame_hz},
        {"augment_sigma", c.data.augment_sigma}}},
      {"synth",
       {{"clients", c.synth.clients},
        {"windows_per_class", c.synth.windows_per_class},
        {"noise_sigma", c.synth.noise_sigma},
        {"amp_lo", c.synth.amp_lo},
        {"amp_hi", c.synth.amp_hi}}}};
}

namespace {

size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j) {
      const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_key(const std::string& key, const json& obj) {
  std::string best;
  size_t best_d = std::string::npos;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    // a near-miss on the head of a longer key should still win
    const std::string head = it.key().substr(0, key.size() + 1);
    const size_t d = std::min(edit_distance(key, it.key()), edit_distance(key, head));
    if (d < best_d) {
      best_d = d;
      best = it.key();
    }
  }
  return best;
}

[[noreturn]] void type_error(const std::string& path, const json& want, const json& got) {
  throw Error("config key '" + path + "': expected " + std::string(want.type_name()) +
              ", got " + std::string(got.type_name()));
}

}  // namespace

void merge_config_json(json& base, const json& overrides, const std::string& path) {
  if (!overrides.is_object()) {
    throw Error("config overrides at '" + (path.empty() ? "<root>" : path) +
                "' must be an object");
  }
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    const std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      const std::string hint = nearest_key(it.key(), base);
      throw Error("unknown config key '" + key_path + "'" +
                  (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
    }
    json& slot = base[it.key()];
    const json& value = it.value();
    if (slot.is_object() && it.key() != "client_lr") {
      merge_config_json(slot, value, key_path);
      continue;
    }
    const bool number_ok = slot.is_number() && value.is_number();
    if (slot.type() != value.type() && !number_ok) {
      type_error(key_path, slot, value);
    }
    if (slot.is_number_integer() && !value.is_number_integer()) {
      throw Error("config key '" + key_path + "': expected an integer");
    }
    slot = value;
  }
}

RunConfig config_from_json(const json& d) {
  RunConfig c;
  c.preset = d.at("preset").get<std::string>();
  c.seed = d.at("seed").get<uint64_t>();
  c.data_root = d.at("data_root").get<std::string>();
  c.out_dir = d.at("out_dir").get<std::string>();
  c.modalities = d.at("modalities").get<std::vector<std::string>>();
  c.fusion_mode = d.at("fusion_mode").get<std::string>();

  const json& ts = d.at("ts");
  c.ts.model_dim = ts.at("model_dim").get<int64_t>();
  c.ts.layers = ts.at("layers").get<int>();
  c.ts.heads = ts.at("heads").get<int>();
  c.ts.head_dim = ts.at("head_dim").get<int64_t>();
  c.ts.ff_dim = ts.at("ff_dim").get<int64_t>();
  c.ts.dropout = ts.at("dropout").get<double>();
  c.ts.max_seq_len = ts.at("max_seq_len").get<int64_t>();
  c.ts.lora_rank = ts.at("lora_rank").get<int>();
  c.ts.lora_alpha = ts.at("lora_alpha").get<double>();
  c.ts.use_sinusoidal = ts.at("use_sinusoidal").get<bool>();
  c.ts.use_relative_bias = ts.at("use_relative_bias").get<bool>();
  c.ts.num_buckets = ts.at("num_buckets").get<int>();
  c.ts.max_distance = ts.at("max_distance").get<int>();
  c.ts.share_act_acw = ts.at("share_act_acw").get<bool>();

  const json& dart = d.at("dart");
  c.dart.channels = dart.at("channels").get<std::vector<int64_t>>();
  c.dart.reduction = dart.at("reduction").get<int64_t>();
  c.dart.embed_dim = dart.at("embed_dim").get<int64_t>();
  c.dart.hidden = dart.at("hidden").get<int64_t>();
  c.dart.lstm_layers = dart.at("lstm_layers").get<int>();
  c.dart.rnn_layers = dart.at("rnn_layers").get<int>();
  c.dart.gru_layers = dart.at("gru_layers").get<int>();
  c.dart.dropout = dart.at("dropout").get<double>();

  const json& fusion = d.at("fusion");
  c.fusion.dim = fusion.at("dim").get<int64_t>();
  c.fusion.blocks = fusion.at("blocks").get<int>();
  c.fusion.gat_heads = fusion.at("gat_heads").get<int>();
  c.fusion.experts = fusion.at("experts").get<int>();
  c.fusion.top_k = fusion.at("top_k").get<int>();
  c.fusion.lambda_moe = fusion.at("lambda_moe").get<double>();
  c.fusion.classifier_dropout = fusion.at("classifier_dropout").get<double>();

  const json& optim = d.at("optim");
  c.optim.lr = optim.at("lr").get<double>();
  c.optim.weight_decay = optim.at("weight_decay").get<double>();
  c.optim.beta1 = optim.at("beta1").get<double>();
  c.optim.beta2 = optim.at("beta2").get<double>();
  c.optim.eps = optim.at("eps").get<double>();
  c.optim.clip_norm = optim.at("clip_norm").get<double>();
  c.optim.grad_accum = optim.at("grad_accum").get<int>();
  c.optim.batch = optim.at("batch").get<int>();

  const json& sched = d.at("scheduler");
  c.scheduler.enabled = sched.at("enabled").get<bool>();
  c.scheduler.factor = sched.at("factor").get<double>();
  c.scheduler.patience = sched.at("patience").get<int>();
  c.scheduler.min_lr = sched.at("min_lr").get<double>();

  const json& train = d.at("train");
  c.central.epochs = train.at("epochs").get<int>();
  c.central.patience = train.at("patience").get<int>();
  c.central.monitor = train.at("monitor").get<std::string>();
  c.central.optimizer_reset_period = train.at("optimizer_reset_period").get<int>();

  const json& fed = d.at("fed");
  c.fed.rounds = fed.at("rounds").get<int>();
  c.fed.local_epochs = fed.at("local_epochs").get<int>();
  c.fed.sample_ratio = fed.at("sample_ratio").get<double>();
  c.fed.patience = fed.at("patience").get<int>();
  c.fed.monitor = fed.at("monitor").get<std::string>();
  c.fed.size_weighted = fed.at("size_weighted").get<bool>();
  c.fed.client_lr.clear();
  for (auto it = fed.at("client_lr").begin(); it != fed.at("client_lr").end(); ++it) {
    c.fed.client_lr[it.key()] = it.value().get<double>();
  }

  const json& data = d.at("data");
  c.data.window_sec = data.at("window_sec").get<double>();
  c.data.stride_sec = data.at("stride_sec").get<double>();
  c.data.accel_hz = data.at("accel_hz").get<double>();
  c.data.frame_hz = data.at("frame_hz").get<double>();
  c.data.augment_sigma = data.at("augment_sigma").get<double>();

  const json& synth = d.at("synth");
  c.synth.clients = synth.at("clients").get<int>();
  c.synth.windows_per_class = synth.at("windows_per_class").get<int>();
  c.synth.noise_sigma = synth.at("noise_sigma").get<double>();
  c.synth.amp_lo = synth.at("amp_lo").get<double>();
  c.synth.amp_hi = synth.at("amp_hi").get<double>();
  return c;
}

RunConfig load_config(const std::optional<std::string>& file,
                      const std::optional<std::string>& preset) {
  json overrides = json::object();
  if (file.has_value()) {
    std::ifstream in(*file);
    if (!in) throw Error("cannot open config file '" + *file + "'");
    try {
      in >> overrides;
    } catch (const json::exception& e) {
      throw Error("config file '" + *file + "' is not valid JSON: " + e.what());
    }
  }
  std::string base_name = preset.value_or("desk");
  if (!preset.has_value() && overrides.contains("preset") && overrides["preset"].is_string()) {
    base_name = overrides["preset"].get<std::string>();
  }
  json base = config_to_json(preset_config(base_name));
  merge_config_json(base, overrides);
  RunConfig cfg = config_from_json(base);
  validate_config(cfg);
  return cfg;
}

void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw Error("config key '" + key + "': " + why);
  };
  if (c.modalities.empty()) fail("modalities", "must select at least one modality");
  for (const auto& m : c.modalities) modality_from_name(m);
  fusion_mode_from_name(c.fusion_mode);
  if (c.ts.model_dim != static_cast<int64_t>(c.ts.heads) * c.ts.head_dim) {
    fail("ts.model_dim", "must equal heads * head_dim");
  }
  if (c.ts.layers < 1) fail("ts.layers", "must be positive");
  if (c.ts.lora_rank < 0) fail("ts.lora_rank", "must be non-negative");
  if (c.dart.channels.empty()) fail("dart.channels", "must be non-empty");
  if (c.dart.embed_dim != 2 * c.dart.hidden) fail("dart.embed_dim", "must equal 2 * hidden");
  if (c.fusion.lambda_moe < 0) fail("fusion.lambda_moe", "must be non-negative");
  if (c.fusion.top_k < 1 || c.fusion.top_k > c.fusion.experts) {
    fail("fusion.top_k", "must be in [1, experts]");
  }
  if (c.fusion.dim < 4) fail("fusion.dim", "must be at least 4");
  if (c.fusion.dim % c.fusion.gat_heads != 0) fail("fusion.gat_heads", "must divide fusion.dim");
  if (c.optim.batch < 1) fail("optim.batch", "must be positive");
  if (c.optim.grad_accum < 1) fail("optim.grad_accum", "must be positive");
  if (c.optim.clip_norm <= 0) fail("optim.clip_norm", "must be positive");
  if (c.fed.sample_ratio <= 0.0 || c.fed.sample_ratio > 1.0) {
    fail("fed.sample_ratio", "must be in (0, 1]");
  }
  if (c.fed.rounds < 0) fail("fed.rounds", "must be non-negative");
  if (c.fed.monitor != "loss" && c.fed.monitor != "accuracy") {
    fail("fed.monitor", "must be 'loss' or 'accuracy'");
  }
  if (c.central.monitor != "loss" && c.central.monitor != "accuracy") {
    fail("train.monitor", "must be 'loss' or 'accuracy'");
  }
  if (c.central.epochs < 0) fail("train.epochs", "must be non-negative");
  if (c.data.window_sec <= 0 || c.data.stride_sec <= 0) {
    fail("data.window_sec", "window and stride must be positive");
  }
  if (c.synth.clients < 1) fail("synth.clients", "must be positive");
  if (c.synth.amp_lo > c.synth.amp_hi) fail("synth.amp_lo", "must not exceed amp_hi");
}

ModelConfig build_model_config(const RunConfig& c) {
  ModelConfig m;
  m.modalities.clear();
  for (const auto& name : c.modalities) m.modalities.push_back(modality_from_name(name));
  m.mode = fusion_mode_from_name(c.fusion_mode);
  m.ts_share_weights = c.ts.share_act_acw;

  m.ts.input_dim = 3;
  m.ts.model_dim = c.ts.model_dim;
  m.ts.layers = c.ts.layers;
  m.ts.heads = c.ts.heads;
  m.ts.head_dim = c.ts.head_dim;
  m.ts.ff_dim = c.ts.ff_dim;
  m.ts.dropout = c.ts.dropout;
  m.ts.max_seq_len = c.ts.max_seq_len;
  m.ts.lora_rank = c.ts.lora_rank;
  m.ts.lora_alpha = c.ts.lora_alpha;
  m.ts.use_sinusoidal = c.ts.use_sinusoidal;
  m.ts.use_rel_bias = c.ts.use_relative_bias;
  m.ts.num_buckets = c.ts.num_buckets;
  m.ts.max_distance = c.ts.max_distance;

  RecurrentStackConfig rec{.hidden = c.dart.hidden, .lstm_layers = c.dart.lstm_layers,
                           .rnn_layers = c.dart.rnn_layers, .gru_layers = c.dart.gru_layers,
                           .dropout = c.dart.dropout};
  m.dart_dc = DartConfig{.channels = c.dart.channels, .reduction = c.dart.reduction,
                         .embed_dim = c.dart.embed_dim, .rec = rec, .in_h = 12, .in_w = 16};
  m.dart_pm = m.dart_dc;
  m.dart_pm.in_h = 32;
  m.dart_pm.in_w = 16;

  m.fusion.dim = c.fusion.dim;
  m.fusion.blocks = c.fusion.blocks;
  m.fusion.gat_heads = c.fusion.gat_heads;
  m.fusion.moe = MoEConfig{.experts = c.fusion.experts, .top_k = c.fusion.top_k,
                           .lambda_balance = c.fusion.lambda_moe};
  m.fusion.classifier_dropout = c.fusion.classifier_dropout;
  m.fusion.num_classes = 7;
  return m;
}

TrainHyper build_hyper(const RunConfig& c) {
  TrainHyper hp;
  hp.adamw = AdamWConfig{.lr = c.optim.lr, .beta1 = c.optim.beta1, .beta2 = c.optim.beta2,
                         .eps = c.optim.eps, .weight_decay = c.optim.weight_decay};
  hp.clip_norm = c.optim.clip_norm;
  hp.grad_accum = c.optim.grad_accum;
  hp.batch = c.optim.batch;
  hp.lambda_moe = c.fusion.lambda_moe;
  hp.augment_sigma = c.data.augment_sigma;
  return hp;
}

std::string config_hash(const RunConfig& cfg) {
  json j = config_to_json(cfg);
  json relevant = {{"modalities", j["modalities"]}, {"fusion_mode", j["fusion_mode"]},
                   {"ts", j["ts"]}, {"dart", j["dart"]}, {"fusion", j["fusion"]}};
  const std::string s = relevant.dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace magnet
