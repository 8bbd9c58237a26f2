#include "magnet/runio.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace magnet {

SplitSpec default_split(const std::vector<std::string>& participants) {
  const int64_t k = static_cast<int64_t>(participants.size());
  if (k < 3) {
    throw Error("need at least 3 participants for a train/val/test split, got " +
                std::to_string(k));
  }
  const int64_t n_val = std::max<int64_t>(1, k / 10);
  const int64_t n_test = std::max<int64_t>(1, k / 5);
  const int64_t n_train = k - n_val - n_test;
  SplitSpec spec;
  for (int64_t i = 0; i < n_train; ++i) spec.train.push_back(participants[static_cast<size_t>(i)]);
  for (int64_t i = n_train; i < n_train + n_val; ++i)
    spec.val.push_back(participants[static_cast<size_t>(i)]);
  for (int64_t i = n_train + n_val; i < k; ++i)
    spec.test.push_back(participants[static_cast<size_t>(i)]);
  return spec;
}

PreparedData prepare_dataset(const RunConfig& cfg) {
  if (cfg.data_root.empty()) throw Error("--data <root> is required for this command");
  PreparedData prep;
  auto clients = load_mex_dataset(cfg.data_root, cfg.data);
  for (const auto& c : clients) prep.participants.push_back(c.participant);
  prep.spec = default_split(prep.participants);
  prep.splits = split_by_participant(std::move(clients), prep.spec);

  std::vector<const WindowSample*> train_ptrs;
  for (auto& c : prep.splits.train_clients)
    for (auto& w : c.windows) train_ptrs.push_back(&w);
  if (train_ptrs.empty()) throw Error("training split is empty");
  prep.stats = compute_norm_stats(train_ptrs);
  for (auto& c : prep.splits.train_clients)
    for (auto& w : c.windows) apply_norm_stats(w, prep.stats);
  for (auto& w : prep.splits.val) apply_norm_stats(w, prep.stats);
  for (auto& w : prep.splits.test) apply_norm_stats(w, prep.stats);
  return prep;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << content;
}

void write_logs_jsonl(const std::vector<RoundLog>& logs, const std::string& path) {
  std::string body;
  for (const auto& log : logs) {
    nlohmann::json j{{"round", log.round},
                     {"clients", log.clients},
                     {"client_losses", log.client_losses},
                     {"train_loss", log.train_loss},
                     {"val_loss", log.val_loss},
                     {"val_accuracy", log.val_accuracy},
                     {"val_macro_f1", log.val_macro_f1},
                     {"lr", log.lr},
                     {"patience", log.patience}};
    body += j.dump();
    body += '\n';
  }
  write_text_file(path, body);
}

nlohmann::json metrics_to_json(const MetricsReport& report) {
  return nlohmann::json{{"accuracy", report.accuracy},
                        {"macro_f1", report.macro_f1},
                        {"loss", report.loss},
                        {"confusion", report.confusion}};
}

void export_metrics(const MetricsReport& report, const std::string& dir) {
  fs::create_directories(dir);
  write_text_file((fs::path(dir) / "metrics.json").string(), metrics_to_json(report).dump(2) + "\n");

  std::string csv = "class,threshold,precision,recall\n";
  char buf[128];
  for (size_t c = 0; c < report.pr_curves.size(); ++c) {
    for (const auto& p : report.pr_curves[c]) {
      std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g,%.12g\n", c, p.threshold, p.precision,
                    p.recall);
      csv += buf;
    }
  }
  write_text_file((fs::path(dir) / "pr_curves.csv").string(), csv);

  if (!report.embeddings.empty()) {
    std::string emb = "label";
    for (size_t d = 0; d < report.embeddings[0].size(); ++d) {
      emb += ",e" + std::to_string(d);
    }
    emb += '\n';
    for (size_t i = 0; i < report.embeddings.size(); ++i) {
      emb += std::to_string(report.embedding_labels[i]);
      for (double v : report.embeddings[i]) {
        std::snprintf(buf, sizeof(buf), ",%.12g", v);
        emb += buf;
      }
      emb += '\n';
    }
    write_text_file((fs::path(dir) / "embeddings.csv").string(), emb);
  }
}

int env_thread_cap() {
  const char* env = std::getenv("MAGNET_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v >= 1 ? v : 1;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out_dir.empty()) throw Error("synth: --out <dataset dir> is required");
  auto clients = synth_generate(cfg.synth, cfg.data, cfg.seed);
  export_mex_csv(clients, cfg.out_dir);
  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "synth_config.json").string(),
                  config_to_json(cfg).dump(2) + "\n");
  out << "wrote " << clients.size() << " clients x " << clients[0].recordings.size()
      << " exercises to " << cfg.out_dir << "\n";
  return 0;
}

namespace {

void write_run_outputs(const RunConfig& cfg, const RunResult& result,
                       const MetricsReport& test_metrics) {
  fs::create_directories(cfg.out_dir);
  fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
  write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                  config_to_json(cfg).dump(2) + "\n");
  write_logs_jsonl(result.logs, (fs::path(cfg.out_dir) / "logs.jsonl").string());
  save_checkpoint(result.best_model, config_hash(cfg),
                  (fs::path(cfg.out_dir) / "checkpoints" / "best.tmgn").string());
  export_metrics(test_metrics, cfg.out_dir);
}

}  // namespace

MetricsReport train_and_export(const RunConfig& cfg, bool federated, std::ostream& out) {
  PreparedData prep = prepare_dataset(cfg);
  const ModelConfig mcfg = build_model_config(cfg);
  const TrainHyper hp = build_hyper(cfg);

  RunResult result;
  if (federated) {
    result = run_federated(mcfg, prep.splits, hp, cfg.fed, cfg.scheduler, cfg.seed,
                           env_thread_cap(), &out);
  } else {
    result = run_centralized(mcfg, prep.splits, hp, cfg.central, cfg.scheduler, cfg.seed, &out);
  }

  Rng init = Rng(cfg.seed).fork(kStreamInit);
  TimeMagnetModel best(mcfg, init);
  result.best_model.load_into(best);
  std::vector<const WindowSample*> test_ptrs;
  for (const auto& w : prep.splits.test) test_ptrs.push_back(&w);
  MetricsReport test = evaluate(best, test_ptrs, result.class_weights);

  write_run_outputs(cfg, result, test);
  out << (federated ? "federated" : "centralized") << " training done: test accuracy "
      << test.accuracy << ", macro-F1 " << test.macro_f1 << "; outputs in " << cfg.out_dir
      << "\n";
  return test;
}

int cmd_train(const RunConfig& cfg, bool federated, std::ostream& out) {
  train_and_export(cfg, federated, out);
  return 0;
}

MetricsReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                                  const std::string& split, bool with_embeddings,
                                  std::ostream& out) {
  PreparedData prep = prepare_dataset(cfg);
  const ModelConfig mcfg = build_model_config(cfg);
  Rng init = Rng(cfg.seed).fork(kStreamInit);
  TimeMagnetModel model(mcfg, init);
  auto [loaded, skipped] = load_checkpoint_into(model, checkpoint_path, config_hash(cfg), &out);
  out << "loaded " << loaded << " checkpoint entries (" << skipped << " skipped)\n";

  std::vector<const WindowSample*> ptrs;
  std::vector<WindowSample> train_merged;
  if (split == "test") {
    for (const auto& w : prep.splits.test) ptrs.push_back(&w);
  } else if (split == "val") {
    for (const auto& w : prep.splits.val) ptrs.push_back(&w);
  } else if (split == "train") {
    for (const auto& c : prep.splits.train_clients)
      for (const auto& w : c.windows) ptrs.push_back(&w);
  } else {
    throw Error("evaluate: --split must be train, val or test, got '" + split + "'");
  }

  std::vector<int64_t> train_labels;
  for (const auto& c : prep.splits.train_clients)
    for (const auto& w : c.windows) train_labels.push_back(w.label);
  const auto weights = class_weights(train_labels, mcfg.fusion.num_classes);

  MetricsReport rep = evaluate(model, ptrs, weights, with_embeddings);
  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                  config_to_json(cfg).dump(2) + "\n");
  export_metrics(rep, cfg.out_dir);
  out << "evaluate[" << split << "]: accuracy " << rep.accuracy << ", macro-F1 "
      << rep.macro_f1 << ", loss " << rep.loss << "; outputs in " << cfg.out_dir << "\n";
  return rep;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_path,
                 const std::string& split, bool with_embeddings, std::ostream& out) {
  evaluate_checkpoint(cfg, checkpoint_path, split, with_embeddings, out);
  return 0;
}

int cmd_ablate(const RunConfig& cfg, bool federated, std::ostream& out) {
  const std::vector<std::vector<std::string>> subsets = {
      {"act", "acw", "dc"},  {"act", "acw", "pm"}, {"act", "dc", "pm"},
      {"acw", "dc", "pm"},   {"act", "acw", "dc", "pm"}};

  PreparedData prep = prepare_dataset(cfg);
  std::string csv = "modalities,accuracy,macro_f1,loss\n";
  char buf[160];
  for (const auto& subset : subsets) {
    RunConfig sub = cfg;
    sub.modalities = subset;
    const ModelConfig mcfg = build_model_config(sub);
    const TrainHyper hp = build_hyper(sub);
    RunResult result;
    if (federated) {
      result = run_federated(mcfg, prep.splits, hp, sub.fed, sub.scheduler, sub.seed,
                             env_thread_cap(), nullptr);
    } else {
      result = run_centralized(mcfg, prep.splits, hp, sub.central, sub.scheduler, sub.seed,
                               nullptr);
    }
    Rng init = Rng(sub.seed).fork(kStreamInit);
    TimeMagnetModel best(mcfg, init);
    result.best_model.load_into(best);
    std::vector<const WindowSample*> test_ptrs;
    for (const auto& w : prep.splits.test) test_ptrs.push_back(&w);
    MetricsReport rep = evaluate(best, test_ptrs, result.class_weights);

    std::string name;
    for (const auto& m : subset) name += (name.empty() ? "" : "+") + m;
    std::snprintf(buf, sizeof(buf), "%s,%.12g,%.12g,%.12g\n", name.c_str(), rep.accuracy,
                  rep.macro_f1, rep.loss);
    csv += buf;
    out << "[ablate] " << name << ": accuracy " << rep.accuracy << ", macro-F1 "
        << rep.macro_f1 << "\n";
  }
  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                  config_to_json(cfg).dump(2) + "\n");
  write_text_file((fs::path(cfg.out_dir) / "ablation.csv").string(), csv);
  out << "ablation table written to " << (fs::path(cfg.out_dir) / "ablation.csv").string()
      << "\n";
  return 0;
}

namespace {

Tensor randn_t(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.ts.input_dim = 3;
  cfg.ts.model_dim = 8;
  cfg.ts.layers = 1;
  cfg.ts.heads = 2;
  cfg.ts.head_dim = 4;
  cfg.ts.ff_dim = 16;
  cfg.ts.dropout = 0.0;
  cfg.ts.max_seq_len = 16;
  cfg.ts.lora_rank = 2;
  cfg.ts.lora_alpha = 4.0;
  cfg.dart_dc = {.channels = {2, 4}, .reduction = 2, .embed_dim = 8,
                 .rec = {.hidden = 4, .lstm_layers = 1, .rnn_layers = 1, .gru_layers = 1, .dropout = 0.0},
                 .in_h = 8, .in_w = 8};
  cfg.dart_pm = cfg.dart_dc;
  cfg.fusion.dim = 8;
  cfg.fusion.blocks = 1;
  cfg.fusion.gat_heads = 2;
  cfg.fusion.moe = {.experts = 2, .top_k = 1, .lambda_balance = 0.01};
  cfg.fusion.classifier_dropout = 0.0;
  return cfg;
}

}  // namespace

std::vector<std::pair<std::string, GradCheckReport>> gradcheck_suite(uint64_t seed) {
  std::vector<std::pair<std::string, GradCheckReport>> results;
  Rng root(seed);

  auto check_params = [&](const std::string& name, const std::function<Tensor()>& f,
                          std::vector<Tensor> params, int64_t max_coords = -1) {
    Rng coords = root.fork(0xC0);
    results.emplace_back(name, grad_check_params(f, std::move(params), 1e-5, max_coords, &coords));
  };

  {
    Rng r = root.fork(1);
    LinearLayer layer(3, 4, r);
    Tensor x = randn_t({5, 3}, r);
    Tensor probe = randn_t({5, 4}, r);
    ParamMap pm;
    layer.collect("l", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("linear", [&] { return ops::sum_all(ops::mul(layer.forward(x), probe)); },
                 params);
  }
  {
    Rng r = root.fork(2);
    Conv2dLayer conv(2, 3, 3, 1, r);
    Tensor x = randn_t({2, 2, 4, 4}, r);
    Tensor probe = randn_t({2, 3, 4, 4}, r);
    ParamMap pm;
    conv.collect("c", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("conv2d", [&] { return ops::sum_all(ops::mul(conv.forward(x), probe)); },
                 params);
  }
  {
    Rng r = root.fork(3);
    BatchNorm2d bn(2);
    Tensor x = randn_t({3, 2, 2, 2}, r);
    Tensor probe = randn_t({3, 2, 2, 2}, r);
    ForwardCtx ctx{.train = true, .update_stats = false};
    ParamMap pm;
    bn.collect("bn", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("batchnorm_train",
                 [&] { return ops::sum_all(ops::mul(bn.forward(x, ctx), probe)); }, params);
  }
  {
    Rng r = root.fork(4);
    RMSNorm norm(6);
    Tensor x = randn_t({3, 6}, r);
    Tensor probe = randn_t({3, 6}, r);
    std::vector<Tensor> params = {norm.gain};
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("rmsnorm", [&] { return ops::sum_all(ops::mul(norm.forward(x), probe)); },
                 params);
  }
  {
    Rng r = root.fork(5);
    AttentionConfig acfg{.model_dim = 8, .heads = 2, .head_dim = 4, .use_rel_bias = true};
    AttentionLayer attn(acfg, r);
    for (auto& v : attn.bias_table.values()) v = r.normal() * 0.3;
    Tensor x = randn_t({1, 3, 8}, r);
    Tensor probe = randn_t({1, 3, 8}, r);
    ForwardCtx ctx{};
    ParamMap pm;
    attn.collect("a", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("attention_rel_bias",
                 [&] { return ops::sum_all(ops::mul(attn.forward(x, ctx), probe)); }, params);
  }
  {
    Rng r = root.fork(6);
    LoraLinear lora(4, 4, 2, 4.0, r);
    for (auto& v : lora.lora_b.values()) v = r.normal() * 0.3;
    Tensor x = randn_t({3, 4}, r);
    Tensor probe = randn_t({3, 4}, r);
    std::vector<Tensor> params = {lora.lora_a, lora.lora_b};
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("lora", [&] { return ops::sum_all(ops::mul(lora.forward(x), probe)); },
                 params);
  }
  for (auto [kind, name] : {std::pair{CellKind::Lstm, "lstm"}, {CellKind::Rnn, "rnn"},
                            {CellKind::Gru, "gru"}}) {
    Rng r = root.fork(7 + static_cast<uint64_t>(kind));
    BiRecurrentLayer layer(kind, 3, 2, r);
    Tensor x = randn_t({2, 2, 3}, r);
    Tensor probe = randn_t({2, 2, 4}, r);
    ParamMap pm;
    layer.collect("cell", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params(name, [&] { return ops::sum_all(ops::mul(layer.forward(x), probe)); }, params);
  }
  {
    Rng r = root.fork(10);
    SwiGlu glu(4, 8, r);
    Tensor x = randn_t({3, 4}, r);
    Tensor probe = randn_t({3, 4}, r);
    ParamMap pm;
    glu.collect("g", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("swiglu", [&] { return ops::sum_all(ops::mul(glu.forward(x), probe)); },
                 params);
  }
  {
    Rng r = root.fork(11);
    GatLayer gat(8, 2, 3, r);
    Tensor x = randn_t({2, 3, 8}, r);
    Tensor a = Tensor::zeros({3, 3});
    for (auto& v : a.values()) v = r.uniform(0.2, 1.0);
    Tensor probe = randn_t({2, 3, 8}, r);
    ParamMap pm;
    gat.collect("gat", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("gat", [&] { return ops::sum_all(ops::mul(gat.forward(x, a), probe)); },
                 params);
  }
  {
    Rng r = root.fork(12);
    MoELayer moe(6, {.experts = 2, .top_k = 1}, r);
    Tensor x = randn_t({2, 2, 6}, r);
    Tensor probe = randn_t({2, 2, 6}, r);
    ParamMap pm;
    moe.collect("moe", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("moe", [&] {
      auto [y, balance, routing] = moe.forward(x);
      return ops::add(ops::sum_all(ops::mul(y, probe)), balance);
    }, params);
  }
  {
    Rng r = root.fork(13);
    FusionPool pool(6, r);
    Tensor x = randn_t({2, 3, 6}, r);
    Tensor probe = randn_t({2, 6}, r);
    ParamMap pm;
    pool.collect("pool", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("fusion_pool",
                 [&] { return ops::sum_all(ops::mul(pool.forward(x), probe)); }, params);
  }
  {
    Rng r = root.fork(14);
    Classifier clf(8, 7, 0.0, r);
    Tensor x = randn_t({3, 8}, r);
    Tensor probe = randn_t({3, 7}, r);
    ForwardCtx ctx{};
    ParamMap pm;
    clf.collect("clf", pm);
    auto params = pm.trainable();
    Tensor xt = x;
    xt.set_requires_grad(true);
    params.push_back(xt);
    check_params("classifier",
                 [&] { return ops::sum_all(ops::mul(clf.forward(x, ctx), probe)); }, params);
  }
  {
    Rng r = root.fork(15);
    ModelConfig mcfg = gradcheck_model_config();
    TimeMagnetModel model(mcfg, r);
    Rng dr = root.fork(16);
    ModalityBatch batch;
    batch.act = randn_t({2, 4, 3}, dr);
    batch.acw = randn_t({2, 4, 3}, dr);
    batch.dc = randn_t({2, 2, 8, 8}, dr);
    batch.pm = randn_t({2, 2, 8, 8}, dr);
    batch.labels = {1, 4};
    ForwardCtx ctx{.train = true, .update_stats = false};
    std::vector<double> cw(7, 1.0);
    ParamMap pm;
    model.collect(pm);
    check_params("full_model", [&] {
      auto out = model.forward(batch, ctx);
      Tensor loss = ops::weighted_cross_entropy(out.logits, batch.labels, cw);
      return ops::add(loss, ops::mul_scalar(out.moe_loss, 0.01));
    }, pm.trainable(), /*max_coords=*/4);
  }
  return results;
}

int cmd_gradcheck(uint64_t seed, std::ostream& out) {
  auto results = gradcheck_suite(seed);
  bool all_ok = true;
  for (const auto& [name, rep] : results) {
    const bool ok = rep.ok(1e-4);
    all_ok = all_ok && ok;
    out << (ok ? "[pass] " : "[FAIL] ") << name << ": " << rep.describe() << "\n";
  }
  out << (all_ok ? "gradcheck: all blocks passed\n" : "gradcheck: FAILURES\n");
  return all_ok ? 0 : 1;
}

}  // namespace magnet
