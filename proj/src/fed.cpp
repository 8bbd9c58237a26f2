#include "magnet/fed.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

namespace magnet {

double macro_f1_from_confusion(const std::vector<std::vector<int64_t>>& confusion) {
  const size_t C = confusion.size();
  double sum = 0.0;
  for (size_t c = 0; c < C; ++c) {
    const double tp = static_cast<double>(confusion[c][c]);
    double fp = 0, fn = 0;
    for (size_t r = 0; r < C; ++r) {
      if (r != c) {
        fp += static_cast<double>(confusion[r][c]);
        fn += static_cast<double>(confusion[c][r]);
      }
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return sum / static_cast<double>(C);
}

GlobalModel GlobalModel::snapshot(const TimeMagnetModel& model) {
  GlobalModel g;
  ParamMap pm;
  model.collect(pm);
  g.entries.reserve(pm.entries().size());
  for (const auto& e : pm.entries())
    g.entries.push_back({e.name, e.tensor.shape(), e.tensor.values()});
  return g;
}

void GlobalModel::load_into(TimeMagnetModel& model) const {
  ParamMap pm;
  model.collect(pm);
  if (pm.entries().size() != entries.size()) {
    throw Error("global model has " + std::to_string(entries.size()) +
                " entries, replica expects " + std::to_string(pm.entries().size()));
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = pm.entries()[i];
    if (e.name != entries[i].name || e.tensor.values().size() != entries[i].values.size()) {
      throw Error("parameter mismatch at '" + entries[i].name + "' vs '" + e.name + "'");
    }
    Tensor t = e.tensor;
    t.values() = entries[i].values;
  }
}

std::vector<std::string> sample_clients(const std::vector<std::string>& ids, double ratio,
                                        Rng& rng) {
  if (ids.empty()) throw Error("sample_clients: no clients");
  if (ratio <= 0.0 || ratio > 1.0) throw Error("sample_clients: ratio must be in (0,1]");
  const int64_t k = static_cast<int64_t>(std::floor(static_cast<double>(ids.size()) * ratio));
  if (k == 0) {
    throw Error("sample_clients: floor(K*ratio) is 0; raise the sampling ratio");
  }
  std::vector<std::string> pool = ids;
  for (int64_t i = 0; i < k; ++i) {  // partial Fisher-Yates
    const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(pool.size() - i)));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

GlobalModel fedavg_aggregate(const std::vector<GlobalModel>& clients,
                             const std::vector<double>& weights) {
  if (clients.empty()) throw Error("fedavg: no client models");
  if (!weights.empty() && weights.size() != clients.size()) {
    throw Error("fedavg: weight count mismatch");
  }
  GlobalModel out = clients[0];
  const double w0 = weights.empty() ? 1.0 : weights[0];
  for (auto& e : out.entries)
    for (double& v : e.values) v *= w0;
  double wsum = w0;
  for (size_t c = 1; c < clients.size(); ++c) {
    const double wc = weights.empty() ? 1.0 : weights[c];
    wsum += wc;
    if (clients[c].entries.size() != out.entries.size()) {
      throw Error("fedavg: client " + std::to_string(c) + " has a different entry count");
    }
    for (size_t i = 0; i < out.entries.size(); ++i) {
      const auto& src = clients[c].entries[i];
      auto& dst = out.entries[i];
      if (src.name != dst.name || src.values.size() != dst.values.size()) {
        throw Error("fedavg: parameter mismatch at '" + dst.name + "'");
      }
      for (size_t v = 0; v < dst.values.size(); ++v) dst.values[v] += wc * src.values[v];
    }
  }
  for (auto& e : out.entries)
    for (double& v : e.values) v /= wsum;
  return out;
}

double PlateauScheduler::update(double metric, double lr) {
  if (!cfg_.enabled) return lr;
  if (!best_.has_value() || metric < *best_) {
    best_ = metric;
    bad_ = 0;
    return lr;
  }
  if (++bad_ >= cfg_.patience) {
    bad_ = 0;
    return std::max(lr * cfg_.factor, cfg_.min_lr);
  }
  return lr;
}

bool EarlyStop::update(double metric) {
  const bool better = !best_.has_value() ||
                      (minimize_ ? metric < *best_ : metric > *best_);
  improved_ = better;
  if (better) {
    best_ = metric;
    count_ = 0;
    return false;
  }
  ++count_;
  return count_ >= patience_;
}

namespace {

// stream purposes inside one epoch stream
enum EpochSubStream : uint64_t { kSubShuffle = 0, kSubAugment = 1, kSubDropout = 2 };

std::vector<double> collect_mean_usage(const std::vector<RoutingResult>& routing) {
  std::vector<double> usage;
  for (const auto& r : routing) {
    std::vector<double> pbar(static_cast<size_t>(r.experts), 0.0);
    for (const auto& p : r.full_probs)
      for (size_t e = 0; e < p.size(); ++e) pbar[e] += p[e];
    for (double& v : pbar) v /= static_cast<double>(r.full_probs.size());
    usage.insert(usage.end(), pbar.begin(), pbar.end());
  }
  return usage;
}

}  // namespace

EpochStats run_epochs(TimeMagnetModel& model, AdamW& opt,
                      const std::vector<const WindowSample*>& windows,
                      const std::vector<double>& cls_weights, const TrainHyper& hp,
                      const std::function<Rng(int)>& rng_for, int epochs) {
  if (windows.empty()) throw Error("train: empty dataset");
  EpochStats stats;
  double loss_sum = 0.0;
  int64_t loss_count = 0;

  std::vector<Tensor> params;
  {
    ParamMap pm;
    model.collect(pm);
    params = pm.trainable();
  }
  const int64_t n = static_cast<int64_t>(windows.size());
  std::vector<int64_t> order(static_cast<size_t>(n));

  Tape tape;
  for (int e = 0; e < epochs; ++e) {
    Rng er = rng_for(e);
    Rng shuffle_rng = er.fork(kSubShuffle);
    Rng aug_rng = er.fork(kSubAugment);
    Rng drop_rng = er.fork(kSubDropout);

    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    const int64_t micro_count = (n + hp.batch - 1) / hp.batch;
    int64_t micro = 0;
    while (micro < micro_count) {
      const int64_t group = std::min<int64_t>(hp.grad_accum, micro_count - micro);
      opt.zero_grad();
      for (int64_t g = 0; g < group; ++g, ++micro) {
        const int64_t lo = micro * hp.batch;
        const int64_t hi = std::min<int64_t>(lo + hp.batch, n);
        std::vector<const WindowSample*> sel;
        sel.reserve(static_cast<size_t>(hi - lo));
        for (int64_t i = lo; i < hi; ++i)
          sel.push_back(windows[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        ModalityBatch batch = make_batch(sel);
        if (hp.augment_sigma > 0.0) {
          for (Modality m : model.cfg.modalities) {
            batch.of(m) = augment_gaussian(batch.of(m), hp.augment_sigma, aug_rng);
          }
        }
        ForwardCtx ctx{.train = true, .update_stats = true, .rng = &drop_rng};
        tape.clear();
        Tape::Scope scope(tape);
        auto out = model.forward(batch, ctx);
        Tensor loss = ops::weighted_cross_entropy(out.logits, batch.labels, cls_weights);
        if (hp.lambda_moe != 0.0) {
          loss = ops::add(loss, ops::mul_scalar(out.moe_loss, hp.lambda_moe));
        }
        tape.backward(loss, 1.0 / static_cast<double>(group));
        loss_sum += loss.item();
        ++loss_count;
        if (!out.routing.empty()) stats.expert_usage.push_back(collect_mean_usage(out.routing));
      }
      clip_global_norm(params, hp.clip_norm);
      opt.step();
      ++stats.optimizer_steps;
    }
  }
  stats.mean_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
  return stats;
}

MetricsReport evaluate(TimeMagnetModel& model, const std::vector<const WindowSample*>& windows,
                       const std::vector<double>& cls_weights, bool with_embeddings) {
  if (windows.empty()) throw Error("evaluate: empty dataset");
  const int64_t C = model.cfg.fusion.num_classes;
  MetricsReport rep;
  rep.confusion.assign(static_cast<size_t>(C), std::vector<int64_t>(static_cast<size_t>(C), 0));

  std::vector<std::vector<double>> scores;  // [N][C] logits
  std::vector<int64_t> labels;
  double loss_num = 0.0, loss_den = 0.0;
  int64_t correct = 0;

  const int64_t batch_size = 64;
  ForwardCtx ctx{};  // eval mode
  for (size_t lo = 0; lo < windows.size(); lo += static_cast<size_t>(batch_size)) {
    const size_t hi = std::min(windows.size(), lo + static_cast<size_t>(batch_size));
    std::vector<const WindowSample*> sel(windows.begin() + static_cast<int64_t>(lo),
                                         windows.begin() + static_cast<int64_t>(hi));
    ModalityBatch batch = make_batch(sel);
    auto out = model.forward(batch, ctx);
    const int64_t B = static_cast<int64_t>(sel.size());
    for (int64_t b = 0; b < B; ++b) {
      const double* row = out.logits.values().data() + b * C;
      std::vector<double> logit_row(row, row + C);

      double mx = row[0];
      int64_t pred = 0;
      for (int64_t c = 1; c < C; ++c) {
        if (row[c] > mx) {
          mx = row[c];
          pred = c;
        }
      }
      const int64_t y = batch.labels[static_cast<size_t>(b)];
      ++rep.confusion[static_cast<size_t>(y)][static_cast<size_t>(pred)];
      correct += pred == y ? 1 : 0;

      double denom = 0.0;
      for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
      const double nll = std::log(denom) + mx - row[y];
      const double w = cls_weights[static_cast<size_t>(y)];
      loss_num += w * nll;
      loss_den += w;

      scores.push_back(std::move(logit_row));
      labels.push_back(y);
      if (with_embeddings) {
        const int64_t D = out.fused.dim(1);
        const double* f = out.fused.values().data() + b * D;
        rep.embeddings.emplace_back(f, f + D);
        rep.embedding_labels.push_back(y);
      }
    }
  }

  const double n = static_cast<double>(windows.size());
  rep.accuracy = static_cast<double>(correct) / n;
  rep.macro_f1 = macro_f1_from_confusion(rep.confusion);
  rep.loss = loss_num / loss_den;

  // per-class PR sweep over logit thresholds
  rep.pr_curves.resize(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    int64_t pos = 0;
    for (int64_t y : labels) pos += y == c ? 1 : 0;
    if (pos == 0) continue;
    std::vector<std::pair<double, int>> ranked;  // (score, is_positive)
    ranked.reserve(labels.size());
    for (size_t i = 0; i < labels.size(); ++i)
      ranked.emplace_back(scores[i][static_cast<size_t>(c)], labels[i] == c ? 1 : 0);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second > b.second;
    });
    int64_t tp = 0, fp = 0;
    for (size_t i = 0; i < ranked.size(); ++i) {
      tp += ranked[i].second;
      fp += 1 - ranked[i].second;
      if (i + 1 < ranked.size() && ranked[i + 1].first == ranked[i].first) continue;
      rep.pr_curves[static_cast<size_t>(c)].push_back(
          {ranked[i].first, static_cast<double>(tp) / static_cast<double>(tp + fp),
           static_cast<double>(tp) / static_cast<double>(pos)});
    }
  }
  return rep;
}

namespace {

std::vector<double> train_labels_weights(const SplitDatasets& data, int64_t classes) {
  std::vector<int64_t> labels;
  for (const auto& c : data.train_clients)
    for (const auto& w : c.windows) labels.push_back(w.label);
  return class_weights(labels, classes);
}

std::vector<const WindowSample*> pointers(const std::vector<WindowSample>& ws) {
  std::vector<const WindowSample*> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(&w);
  return out;
}

}  // namespace

RunResult run_federated(const ModelConfig& mcfg, const SplitDatasets& data,
                        const TrainHyper& hp, const FedConfig& fed,
                        const SchedulerConfig& sched, uint64_t seed, int max_threads,
                        std::ostream* progress) {
  if (data.train_clients.empty()) throw Error("federated: no training clients");
  if (data.val.empty()) throw Error("federated: validation set required");
  const bool monitor_loss = fed.monitor == "loss";
  if (!monitor_loss && fed.monitor != "accuracy") {
    throw Error("federated: monitor must be 'loss' or 'accuracy'");
  }

  Rng root(seed);
  RunResult result;
  result.class_weights = train_labels_weights(data, mcfg.fusion.num_classes);

  Rng init_rng = root.fork(kStreamInit);
  TimeMagnetModel server_model(mcfg, init_rng);
  GlobalModel theta = GlobalModel::snapshot(server_model);
  result.best_model = theta;
  result.final_model = theta;

  std::vector<std::string> ids;
  for (const auto& c : data.train_clients) ids.push_back(c.participant);
  std::map<std::string, int64_t> client_index;
  std::map<std::string, const ClientDataset*> client_data;
  for (size_t i = 0; i < data.train_clients.size(); ++i) {
    client_index[ids[i]] = static_cast<int64_t>(i);
    client_data[ids[i]] = &data.train_clients[i];
  }

  auto val_ptrs = pointers(data.val);
  PlateauScheduler scheduler(sched);
  EarlyStop stopper(fed.patience, monitor_loss);
  double lr = hp.adamw.lr;

  for (int t = 1; t <= fed.rounds; ++t) {
    const auto round_start = std::chrono::steady_clock::now();
    Rng sample_rng = root.fork(kStreamSampling).fork(static_cast<uint64_t>(t));
    std::vector<std::string> sampled = sample_clients(ids, fed.sample_ratio, sample_rng);

    std::vector<GlobalModel> locals(sampled.size());
    std::vector<double> local_losses(sampled.size(), 0.0);
    std::vector<double> sizes(sampled.size(), 0.0);
    std::atomic<size_t> next{0};
    std::exception_ptr failure = nullptr;
    std::mutex failure_mu;

    auto worker = [&]() {
      while (true) {
        const size_t s = next.fetch_add(1);
        if (s >= sampled.size()) break;
        try {
          const std::string& id = sampled[s];
          const ClientDataset* ds = client_data.at(id);
          if (ds->windows.empty()) throw Error("federated: client " + id + " has no windows");
          const int64_t ci = client_index.at(id);

          Rng replica_init = Rng(seed).fork(kStreamInit);
          TimeMagnetModel replica(mcfg, replica_init);
          theta.load_into(replica);

          TrainHyper local_hp = hp;
          double mult = 1.0;
          if (auto it = fed.client_lr.find(id); it != fed.client_lr.end()) mult = it->second;
          local_hp.adamw.lr = lr * mult;

          ParamMap pm;
          replica.collect(pm);
          AdamW opt(pm.trainable(), local_hp.adamw);  // fresh state each round

          auto rng_for = [&, ci](int e) {
            return Rng(seed).fork(kStreamShuffle).fork(static_cast<uint64_t>(t))
                .fork(static_cast<uint64_t>(ci)).fork(static_cast<uint64_t>(e));
          };
          EpochStats st = run_epochs(replica, opt, pointers(ds->windows),
                                     result.class_weights, local_hp, rng_for,
                                     fed.local_epochs);
          local_losses[s] = st.mean_loss;
          sizes[s] = static_cast<double>(ds->windows.size());
          locals[s] = GlobalModel::snapshot(replica);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
          break;
        }
      }
    };

    const int threads = std::max(1, std::min<int>(max_threads, static_cast<int>(sampled.size())));
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < threads; ++w) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    theta = fedavg_aggregate(locals, fed.size_weighted ? sizes : std::vector<double>{});
    theta.load_into(server_model);
    MetricsReport val = evaluate(server_model, val_ptrs, result.class_weights);

    lr = scheduler.update(val.loss, lr);
    const double monitored = monitor_loss ? val.loss : val.accuracy;
    const bool stop = stopper.update(monitored);
    if (stopper.improved_last()) result.best_model = theta;
    result.final_model = theta;
    if (fed.capture_rounds) result.captures.push_back(theta);

    RoundLog log;
    log.round = t;
    log.clients = sampled;
    log.client_losses.assign(local_losses.begin(), local_losses.end());
    log.train_loss =
        std::accumulate(local_losses.begin(), local_losses.end(), 0.0) /
        static_cast<double>(local_losses.size());
    log.val_loss = val.loss;
    log.val_accuracy = val.accuracy;
    log.val_macro_f1 = val.macro_f1;
    log.lr = lr;
    log.patience = stopper.count();
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - round_start).count();
    result.logs.push_back(log);
    if (progress) {
      (*progress) << "[round " << t << "/" << fed.rounds << "] clients=" << sampled.size()
                  << " train_loss=" << log.train_loss << " val_loss=" << val.loss
                  << " val_acc=" << val.accuracy << " val_f1=" << val.macro_f1
                  << " lr=" << lr << " (" << log.wall_seconds << "s)\n";
    }
    if (stop) {
      if (progress) (*progress) << "[early stop] patience exhausted at round " << t << "\n";
      break;
    }
  }
  return result;
}

RunResult run_centralized(const ModelConfig& mcfg, const SplitDatasets& data,
                          const TrainHyper& hp, const CentralConfig& central,
                          const SchedulerConfig& sched, uint64_t seed,
                          std::ostream* progress) {
  if (data.train_clients.empty()) throw Error("centralized: no training data");
  if (data.val.empty()) throw Error("centralized: validation set required");
  const bool monitor_loss = central.monitor == "loss";
  if (!monitor_loss && central.monitor != "accuracy") {
    throw Error("centralized: monitor must be 'loss' or 'accuracy'");
  }

  Rng root(seed);
  RunResult result;
  result.class_weights = train_labels_weights(data, mcfg.fusion.num_classes);

  Rng init_rng = root.fork(kStreamInit);
  TimeMagnetModel model(mcfg, init_rng);
  result.best_model = GlobalModel::snapshot(model);
  result.final_model = result.best_model;

  std::vector<const WindowSample*> train;
  for (const auto& c : data.train_clients)
    for (const auto& w : c.windows) train.push_back(&w);
  auto val_ptrs = pointers(data.val);

  ParamMap pm;
  model.collect(pm);
  PlateauScheduler scheduler(sched);
  EarlyStop stopper(central.patience, monitor_loss);
  double lr = hp.adamw.lr;

  std::optional<AdamW> opt;
  const int reset = central.optimizer_reset_period;
  for (int g = 0; g < central.epochs; ++g) {
    const auto epoch_start = std::chrono::steady_clock::now();
    if (!opt.has_value() || (reset > 0 && g % reset == 0)) {
      TrainHyper cur = hp;
      cur.adamw.lr = lr;
      opt.emplace(pm.trainable(), cur.adamw);
    } else {
      opt->set_lr(lr);
    }

    // the same stream family a single federated client would use
    const uint64_t round = reset > 0 ? static_cast<uint64_t>(g / reset) : 0;
    const uint64_t local = reset > 0 ? static_cast<uint64_t>(g % reset) : static_cast<uint64_t>(g);
    auto rng_for = [&](int) {
      return Rng(seed).fork(kStreamShuffle).fork(reset > 0 ? round + 1 : 0).fork(0).fork(local);
    };
    TrainHyper cur = hp;
    cur.adamw.lr = lr;
    EpochStats st = run_epochs(model, *opt, train, result.class_weights, cur, rng_for, 1);

    MetricsReport val = evaluate(model, val_ptrs, result.class_weights);
    lr = scheduler.update(val.loss, lr);
    const double monitored = monitor_loss ? val.loss : val.accuracy;
    const bool stop = stopper.update(monitored);
    GlobalModel snap = GlobalModel::snapshot(model);
    if (stopper.improved_last()) result.best_model = snap;
    result.final_model = snap;
    if (central.capture_epochs) result.captures.push_back(snap);

    RoundLog log;
    log.round = g + 1;
    log.train_loss = st.mean_loss;
    log.val_loss = val.loss;
    log.val_accuracy = val.accuracy;
    log.val_macro_f1 = val.macro_f1;
    log.lr = lr;
    log.patience = stopper.count();
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.logs.push_back(log);
    if (progress) {
      (*progress) << "[epoch " << g + 1 << "/" << central.epochs
                  << "] train_loss=" << st.mean_loss << " val_loss=" << val.loss
                  << " val_acc=" << val.accuracy << " val_f1=" << val.macro_f1 << " lr=" << lr
                  << " (" << log.wall_seconds << "s)\n";
    }
    if (stop) {
      if (progress) (*progress) << "[early stop] patience exhausted at epoch " << g + 1 << "\n";
      break;
    }
  }
  return result;
}

}  // namespace magnet
