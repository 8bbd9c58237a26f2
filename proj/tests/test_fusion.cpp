#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "magnet/fusion.hpp"
#include "magnet/gradcheck.hpp"
#include "magnet/optim.hpp"

using namespace magnet;

namespace {

Tensor randn(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

ModelConfig desk_micro() {
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
  cfg.fusion.blocks = 2;
  cfg.fusion.gat_heads = 2;
  cfg.fusion.moe = {.experts = 2, .top_k = 1, .lambda_balance = 0.01};
  cfg.fusion.classifier_dropout = 0.0;
  return cfg;
}

ModalityBatch micro_batch(Rng& rng, int64_t B) {
  ModalityBatch b;
  b.act = randn({B, 4, 3}, rng);
  b.acw = randn({B, 4, 3}, rng);
  b.dc = randn({B, 2, 8, 8}, rng);
  b.pm = randn({B, 2, 8, 8}, rng);
  for (int64_t i = 0; i < B; ++i) b.labels.push_back(i % 7);
  return b;
}

}  // namespace

TEST_CASE("dynamic adjacency hits the cosine anchor points") {
  Tensor stacked = Tensor::zeros({1, 3, 2});
  // node 0 = (1,0), node 1 = (0,1) orthogonal, node 2 = (-1,0) opposite
  stacked.values() = {1, 0, 0, 1, -1, 0};
  Tensor a = dynamic_adjacency(stacked);
  CHECK(a.at({0, 0}) == doctest::Approx(1.0));
  CHECK(a.at({0, 1}) == doctest::Approx(0.5));
  CHECK(a.at({0, 2}) == doctest::Approx(0.0));
  CHECK(a.at({1, 2}) == doctest::Approx(0.5));

  // identical rows give cosine 1
  Tensor same = Tensor::zeros({2, 2, 3});
  same.values() = {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3};
  Tensor as = dynamic_adjacency(same);
  CHECK(as.at({0, 1}) == doctest::Approx(1.0));
}

TEST_CASE("dynamic adjacency invariants: symmetry, range, diagonal, scale") {
  Rng rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor h = randn({5, 4, 6}, rng);
    Tensor a = dynamic_adjacency(h);
    for (int64_t i = 0; i < 4; ++i) {
      CHECK(a.at({i, i}) == 1.0);
      for (int64_t j = 0; j < 4; ++j) {
        CHECK(std::abs(a.at({i, j}) - a.at({j, i})) < 1e-12);
        CHECK(a.at({i, j}) >= 0.0);
        CHECK(a.at({i, j}) <= 1.0);
      }
    }
    // common positive scaling leaves the cosine graph unchanged
    const double c = rng.uniform(0.1, 10.0);
    Tensor hc = Tensor::zeros(h.shape());
    for (size_t i = 0; i < h.values().size(); ++i) hc.values()[i] = c * h.values()[i];
    Tensor ac = dynamic_adjacency(hc);
    for (size_t i = 0; i < a.values().size(); ++i)
      CHECK(a.values()[i] == doctest::Approx(ac.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("cosine adjacency gradient matches finite differences") {
  Rng rng(2);
  Tensor h = randn({4, 3, 5}, rng);
  Tensor probe = randn({3, 3}, rng);
  auto f = [&](const Tensor& t) {
    return ops::sum_all(ops::mul(dynamic_adjacency(t), probe));
  };
  CHECK(grad_check(f, h).max_rel_err < 1e-5);
}

TEST_CASE("final adjacency composition and oracle recomputation") {
  Tensor ones = Tensor::full({3, 3}, 1.0);
  Tensor wadj = Tensor::zeros({3, 3});
  AdjacencySet s = final_adjacency(ones, wadj);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(s.final_.at({i, j}) == doctest::Approx(i == j ? 1.0 : 0.5));
      CHECK(s.learned.at({i, j}) == doctest::Approx(0.5));
    }

  AdjacencySet z = final_adjacency(Tensor::zeros({3, 3}), wadj);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(z.final_.at({i, j}) == doctest::Approx(i == j ? 0.5 : 0.0));

  Rng rng(3);
  Tensor ad = randn({4, 4}, rng);
  for (auto& v : ad.values()) v = std::abs(v);
  Tensor wl = randn({4, 4}, rng);
  AdjacencySet r = final_adjacency(ad, wl);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      const double sig = 1.0 / (1.0 + std::exp(-wl.at({i, j})));
      const double want = ad.at({i, j}) * sig + (i == j ? 0.5 : 0.0);
      CHECK(std::abs(r.final_.at({i, j}) - want) < 1e-12);
      CHECK(r.final_.at({i, i}) >= 0.5);
    }
}

TEST_CASE("moe_route picks top-k with index tie-break and renormalized gates") {
  Tensor logits = Tensor::from_values({1, 4}, {2.0, 1.0, 0.5, -1.0});
  RoutingResult r = moe_route(logits, 2);
  CHECK(r.expert_indices[0] == std::vector<int>{0, 1});
  CHECK(r.gate_weights[0][0] == doctest::Approx(0.73106).epsilon(1e-4));
  CHECK(r.gate_weights[0][1] == doctest::Approx(0.26894).epsilon(1e-4));

  Tensor equal = Tensor::zeros({1, 4});
  RoutingResult re = moe_route(equal, 2);
  CHECK(re.expert_indices[0] == std::vector<int>{0, 1});
  CHECK(re.gate_weights[0][0] == doctest::Approx(0.5));

  Rng rng(4);
  Tensor rl = randn({6, 4}, rng);
  RoutingResult rful = moe_route(rl, 4);
  for (size_t i = 0; i < 6; ++i) {
    // k == E: gate weights over selected == full softmax (reordered)
    for (int j = 0; j < 4; ++j) {
      const int e = rful.expert_indices[i][static_cast<size_t>(j)];
      CHECK(rful.gate_weights[i][static_cast<size_t>(j)] ==
            doctest::Approx(rful.full_probs[i][static_cast<size_t>(e)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("routing invariants: k distinct experts, gates sum to one") {
  Rng rng(5);
  Tensor logits = randn({40, 4}, rng);
  RoutingResult r = moe_route(logits, 2);
  for (size_t i = 0; i < 40; ++i) {
    CHECK(r.expert_indices[i].size() == 2);
    CHECK(r.expert_indices[i][0] != r.expert_indices[i][1]);
    CHECK(std::abs(r.gate_weights[i][0] + r.gate_weights[i][1] - 1.0) < 1e-6);
    double full = 0;
    for (double p : r.full_probs[i]) full += p;
    CHECK(std::abs(full - 1.0) < 1e-6);
  }
}

TEST_CASE("load balance loss anchors and independent recomputation") {
  RoutingResult uniform;
  uniform.experts = 4;
  uniform.full_probs = {{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}};
  CHECK(load_balance_loss(uniform) == doctest::Approx(0.0).epsilon(1e-12));

  RoutingResult onehot;
  onehot.experts = 4;
  onehot.full_probs = {{1.0, 0.0, 0.0, 0.0}};
  CHECK(load_balance_loss(onehot) == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  Rng rng(6);
  for (int rep = 0; rep < 10; ++rep) {
    RoutingResult r;
    r.experts = 4;
    for (int i = 0; i < 5; ++i) {
      std::vector<double> p(4);
      double s = 0;
      for (auto& v : p) {
        v = rng.uniform() + 1e-3;
        s += v;
      }
      for (auto& v : p) v /= s;
      r.full_probs.push_back(p);
    }
    std::vector<double> pbar(4, 0.0);
    for (auto& p : r.full_probs)
      for (int e = 0; e < 4; ++e) pbar[static_cast<size_t>(e)] += p[static_cast<size_t>(e)] / 5.0;
    double ent = 0;
    for (double v : pbar) ent -= v * std::log(v);
    CHECK(std::abs(load_balance_loss(r) - (std::log(4.0) - ent)) < 1e-12);
    CHECK(load_balance_loss(r) >= 0.0);
    CHECK(load_balance_loss(r) <= std::log(4.0));
  }
}

TEST_CASE("load balance loss strictly decreases toward uniform") {
  RoutingResult r;
  r.experts = 4;
  const std::vector<double> skew = {0.7, 0.2, 0.06, 0.04};
  double prev = -1;
  for (double t : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    std::vector<double> p(4);
    for (int e = 0; e < 4; ++e)
      p[static_cast<size_t>(e)] = (1 - t) * skew[static_cast<size_t>(e)] + t * 0.25;
    r.full_probs = {p};
    const double loss = load_balance_loss(r);
    if (prev >= 0) CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("moe forward: single expert identity and sparse-dense equality") {
  Rng rng(7);
  MoELayer single(6, {.experts = 1, .top_k = 1}, rng);
  Tensor x = randn({2, 3, 6}, rng);
  auto [y, loss, routing] = single.forward(x);
  Tensor direct = single.experts[0].forward(ops::reshape(x, {6, 6}));
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == direct.values()[i]);  // gate weight is exactly 1
  CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-12));

  MoELayer moe(6, {.experts = 4, .top_k = 2}, rng);
  auto [ys, ls, rs] = moe.forward(x);
  // dense enumeration oracle: run every expert on the full input
  Tensor x2 = ops::reshape(x, {6, 6});
  std::vector<Tensor> dense;
  for (auto& ex : moe.experts) dense.push_back(ex.forward(x2));
  for (int64_t i = 0; i < 6; ++i) {
    for (int64_t d = 0; d < 6; ++d) {
      double want = 0.0;
      for (int j = 0; j < 2; ++j) {
        const int e = rs.expert_indices[static_cast<size_t>(i)][static_cast<size_t>(j)];
        want += rs.gate_weights[static_cast<size_t>(i)][static_cast<size_t>(j)] *
                dense[static_cast<size_t>(e)].at({i, d});
      }
      CHECK(std::abs(ys.values()[static_cast<size_t>(i * 6 + d)] - want) < 1e-12);
    }
  }
}

TEST_CASE("identical experts make the moe output routing-independent") {
  Rng rng(8);
  MoELayer moe(4, {.experts = 3, .top_k = 2}, rng);
  for (size_t e = 1; e < moe.experts.size(); ++e) {
    auto clone = [&](Tensor& dst, const Tensor& src) { dst.values() = src.values(); };
    clone(moe.experts[e].h1.weight, moe.experts[0].h1.weight);
    clone(moe.experts[e].h1.bias, moe.experts[0].h1.bias);
    clone(moe.experts[e].h2.weight, moe.experts[0].h2.weight);
    clone(moe.experts[e].h2.bias, moe.experts[0].h2.bias);
    clone(moe.experts[e].norm.gain, moe.experts[0].norm.gain);
    clone(moe.experts[e].out.weight, moe.experts[0].out.weight);
    clone(moe.experts[e].out.bias, moe.experts[0].out.bias);
  }
  Tensor x = randn({2, 2, 4}, rng);
  auto [y, loss, routing] = moe.forward(x);
  Tensor want = moe.experts[0].forward(ops::reshape(x, {4, 4}));
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(want.values()[i]).epsilon(1e-12));
}

TEST_CASE("gat self-attention for a single node and symmetric pair") {
  Rng rng(9);
  GatLayer gat(4, 2, 1, rng);
  Tensor h1 = randn({2, 1, 4}, rng);
  Tensor a1 = Tensor::full({1, 1}, 1.0);
  std::vector<Tensor> alphas;
  gat.forward(h1, a1, &alphas);
  for (const Tensor& al : alphas)
    for (double v : al.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));

  // two identical nodes, uniform adjacency -> 0.5/0.5 everywhere
  GatLayer gat2(4, 1, 2, rng);
  Tensor tok = randn({1, 1, 4}, rng);
  Tensor h2 = ops::concat({tok, tok}, 1);
  Tensor a2 = Tensor::full({2, 2}, 1.0);
  std::vector<Tensor> alphas2;
  gat2.forward(h2, a2, &alphas2);
  for (double v : alphas2[0].values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-8));
}

TEST_CASE("masking the adjacency forces one-hot self coefficients") {
  Rng rng(10);
  GatLayer gat(6, 2, 3, rng);
  Tensor h = randn({2, 3, 6}, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int64_t i = 0; i < 3; ++i) eye.values()[static_cast<size_t>(i * 3 + i)] = 1.0;
  std::vector<Tensor> alphas;
  gat.forward(h, eye, &alphas);
  for (const Tensor& al : alphas) {
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) {
          const double v = al.at({b, i, j});
          if (i == j) {
            CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
          } else {
            CHECK(v == doctest::Approx(0.0).epsilon(1e-6));
          }
        }
  }
}

TEST_CASE("renormalized rows sum to one when the masked row survives") {
  Rng rng(11);
  GatLayer gat(4, 2, 4, rng);
  Tensor h = randn({3, 4, 4}, rng);
  Tensor a = Tensor::zeros({4, 4});
  for (auto& v : a.values()) v = rng.uniform(0.1, 1.0);
  std::vector<Tensor> alphas;
  gat.forward(h, a, &alphas);
  for (const Tensor& al : alphas)
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 4; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 4; ++j) s += al.at({b, i, j});
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
}

TEST_CASE("fusion block with zero output projections is the identity") {
  Rng rng(12);
  FusionBlock block(6, 2, 3, {.experts = 2, .top_k = 1}, rng);
  std::fill(block.gat.out_proj.weight.values().begin(),
            block.gat.out_proj.weight.values().end(), 0.0);
  for (auto& ex : block.moe.experts) {
    std::fill(ex.out.weight.values().begin(), ex.out.weight.values().end(), 0.0);
    std::fill(ex.out.bias.values().begin(), ex.out.bias.values().end(), 0.0);
  }
  std::fill(block.ff.out.weight.values().begin(), block.ff.out.weight.values().end(), 0.0);

  ForwardCtx ctx{};
  Tensor x = randn({2, 3, 6}, rng);
  Tensor a = Tensor::full({3, 3}, 0.8);
  auto [y, loss, routing] = block.forward(x, a, ctx);
  CHECK(y.shape() == x.shape());
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
}

TEST_CASE("fusion block gradient check") {
  Rng rng(13);
  FusionBlock block(8, 2, 3, {.experts = 2, .top_k = 1}, rng);
  ForwardCtx ctx{};
  Tensor x = randn({1, 3, 8}, rng);
  Tensor a = Tensor::zeros({3, 3});
  for (auto& v : a.values()) v = rng.uniform(0.2, 1.0);
  Tensor probe = randn({1, 3, 8}, rng);
  auto f = [&]() {
    auto [y, loss, routing] = block.forward(x, a, ctx);
    return ops::add(ops::sum_all(ops::mul(y, probe)), loss);
  };
  ParamMap pm;
  block.collect("block", pm);
  auto params = pm.trainable();
  Tensor xt = x;
  xt.set_requires_grad(true);
  params.push_back(xt);
  Rng coords(14);
  CHECK(grad_check_params(f, params, 1e-5, /*max_coords=*/5, &coords).max_rel_err < 1e-4);
}

TEST_CASE("fusion pool: single modality, symmetric pair, weights sum to one") {
  Rng rng(15);
  Tensor h1 = randn({2, 1, 6}, rng);
  Tensor pooled1 = FusionPool::attention_pool(h1);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t d = 0; d < 6; ++d)
      CHECK(pooled1.at({b, d}) == doctest::Approx(h1.at({b, 0, d})).epsilon(1e-12));

  // two modalities with equal feature means share the weight equally
  Tensor a = randn({1, 1, 4}, rng);
  Tensor b = Tensor::zeros({1, 1, 4});
  double mean_a = 0;
  for (double v : a.values()) mean_a += v / 4.0;
  for (int64_t d = 0; d < 4; ++d)
    b.values()[static_cast<size_t>(d)] = mean_a + ((d % 2) ? 0.3 : -0.3);
  Tensor h2 = ops::concat({a, b}, 1);
  Tensor pooled2 = FusionPool::attention_pool(h2);
  for (int64_t d = 0; d < 4; ++d)
    CHECK(pooled2.at({0, d}) ==
          doctest::Approx(0.5 * a.at({0, 0, d}) + 0.5 * b.at({0, 0, d})).epsilon(1e-9));

  // softmax weights over modalities sum to 1 on random draws
  for (int rep = 0; rep < 100; ++rep) {
    Tensor h = randn({1, 5, 3}, rng);
    Tensor weights = ops::softmax(ops::mean(h, -1), -1);
    double s = 0;
    for (double v : weights.values()) s += v;
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("classifier shape, zero logits at zero input, gradient") {
  Rng rng(16);
  Classifier clf(32, 7, 0.0, rng);
  ForwardCtx ctx{};
  Tensor x = randn({3, 32}, rng);
  Tensor logits = clf.forward(x, ctx);
  CHECK(logits.shape() == Shape{3, 7});

  Tensor zero_logits = clf.forward(Tensor::zeros({2, 32}), ctx);
  for (double v : zero_logits.values()) CHECK(v == 0.0);  // zero biases

  Tensor probe = randn({3, 7}, rng);
  auto f = [&]() { return ops::sum_all(ops::mul(clf.forward(x, ctx), probe)); };
  ParamMap pm;
  clf.collect("clf", pm);
  Rng coords(17);
  CHECK(grad_check_params(f, pm.trainable(), 1e-5, 8, &coords).max_rel_err < 1e-4);

  CHECK_THROWS_AS(Classifier(3, 7, 0.0, rng), Error);
}

TEST_CASE("modality weights scale embeddings and carry the inner-product grad") {
  Rng rng(18);
  ModelConfig cfg = desk_micro();
  TimeMagnetModel model(cfg, rng);
  ForwardCtx ctx{};
  Rng data_rng(19);
  ModalityBatch batch = micro_batch(data_rng, 2);

  // w_act = 0 zeroes the act contribution at the projection input
  Tensor emb = model.enc_act->forward(batch.act, ctx);
  Tensor scaled = ops::mul(emb, Tensor::zeros({1}));
  for (double v : scaled.values()) CHECK(v == 0.0);

  // d loss / d w_m equals <d loss/d weighted, emb_m>: finite differences
  auto f = [&]() {
    auto out = model.forward(batch, ctx);
    return ops::weighted_cross_entropy(out.logits, batch.labels, std::vector<double>(7, 1.0));
  };
  CHECK(grad_check_params(f, model.modality_weight, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("full model forward: shapes, finiteness, subsets") {
  Rng rng(20);
  ModelConfig cfg = desk_micro();
  TimeMagnetModel model(cfg, rng);
  ForwardCtx ctx{};
  Rng data_rng(21);
  ModalityBatch batch = micro_batch(data_rng, 2);
  auto out = model.forward(batch, ctx);
  CHECK(out.logits.shape() == Shape{2, 7});
  for (double v : out.logits.values()) CHECK(std::isfinite(v));
  CHECK(out.routing.size() == 2);
  for (int64_t i = 0; i < 4; ++i) CHECK(out.adjacency.final_.at({i, i}) >= 0.5);

  // every 3-modality subset plus a single-modality graph degenerates cleanly
  const std::vector<std::vector<Modality>> subsets = {
      {Modality::Act, Modality::Acw, Modality::Dc},
      {Modality::Act, Modality::Acw, Modality::Pm},
      {Modality::Act, Modality::Dc, Modality::Pm},
      {Modality::Acw, Modality::Dc, Modality::Pm},
      {Modality::Act}};
  for (const auto& subset : subsets) {
    ModelConfig sub = desk_micro();
    sub.modalities = subset;
    Rng r(23);
    TimeMagnetModel m(sub, r);
    auto o = m.forward(batch, ctx);
    CHECK(o.logits.shape() == Shape{2, 7});
    for (double v : o.logits.values()) CHECK(std::isfinite(v));
  }

  ModelConfig empty = desk_micro();
  empty.modalities = {};
  Rng r2(24);
  CHECK_THROWS_WITH_AS(TimeMagnetModel(empty, r2), doctest::Contains("non-empty"), Error);
}

TEST_CASE("all parameter gradients are finite after one full backward") {
  Rng rng(25);
  ModelConfig cfg = desk_micro();
  TimeMagnetModel model(cfg, rng);
  ForwardCtx ctx{.train = true, .update_stats = false};
  Rng data_rng(26);
  ModalityBatch batch = micro_batch(data_rng, 2);

  ParamMap pm;
  model.collect(pm);
  auto params = pm.trainable();
  zero_grads(params);
  Tape tape;
  {
    Tape::Scope scope(tape);
    auto out = model.forward(batch, ctx);
    Tensor loss = ops::add(
        ops::weighted_cross_entropy(out.logits, batch.labels, std::vector<double>(7, 1.0)),
        ops::mul_scalar(out.moe_loss, 0.01));
    tape.backward(loss);
  }
  for (auto& p : params)
    for (double g : p.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("baseline fusion modes produce the right shapes") {
  Rng data_rng(27);
  ModalityBatch batch = micro_batch(data_rng, 2);
  ForwardCtx ctx{};

  ModelConfig concat_cfg = desk_micro();
  concat_cfg.mode = FusionMode::Concat;
  Rng r1(28);
  TimeMagnetModel concat_model(concat_cfg, r1);
  auto oc = concat_model.forward(batch, ctx);
  CHECK(oc.logits.shape() == Shape{2, 7});
  CHECK(oc.fused.shape() == Shape{2, 32});  // 4 modalities * 8
  CHECK(oc.moe_loss.item() == 0.0);

  ModelConfig attn_cfg = desk_micro();
  attn_cfg.mode = FusionMode::Attention;
  Rng r2(29);
  TimeMagnetModel attn_model(attn_cfg, r2);
  auto oa = attn_model.forward(batch, ctx);
  CHECK(oa.logits.shape() == Shape{2, 7});
  CHECK(oa.fused.shape() == Shape{2, 8});
}

TEST_CASE("shared act/acw encoders collapse to one parameter set") {
  ModelConfig cfg = desk_micro();
  cfg.ts_share_weights = true;
  Rng r(30);
  TimeMagnetModel model(cfg, r);
  CHECK(model.enc_act.has_value());
  CHECK_FALSE(model.enc_acw.has_value());
  ParamMap pm;
  model.collect(pm);
  bool found_shared = false;
  for (const auto& e : pm.entries()) {
    CHECK(e.name.find("encoder.acw") == std::string::npos);
    if (e.name.find("encoder.ts_shared") != std::string::npos) found_shared = true;
  }
  CHECK(found_shared);
}
