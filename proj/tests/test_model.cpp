#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "gradcheck.hpp"
#include "reference.hpp"
#include "widenet/model.hpp"
#include "widenet/rng.hpp"

using namespace widenet;
using testutil::check_fd;
using testutil::random_tensor;

namespace {

// Small sequence-of-vectors setup: channels = feature dim, height = length.
WideNetConfig tiny_config() {
  WideNetConfig cfg;
  cfg.depth = 4;
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.heads = 2;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.groups = 2;
  cfg.classes = 3;
  cfg.embed.kind = EmbedKind::Patch;
  cfg.embed.patch_size = 1;
  cfg.embed.channels = 3;
  cfg.embed.image_h = 4;
  cfg.embed.image_w = 1;
  cfg.head = HeadType::GlobalAveragePool;
  return cfg;
}

Batch random_batch(const WideNetConfig& cfg, std::size_t n, RngStream& rng) {
  Batch b;
  b.input = random_tensor(
      {n, cfg.embed.channels, cfg.embed.image_h, cfg.embed.image_w}, rng,
      false);
  b.labels.assign(n, 0);
  return b;
}

std::vector<double> to_vec(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

TEST_CASE("config validation pinpoints the broken field") {
  WideNetConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  auto expect_mention = [](WideNetConfig bad, const std::string& needle) {
    try {
      bad.validate();
      FAIL("expected ConfigError mentioning ", needle);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  WideNetConfig c1 = cfg;
  c1.heads = 3;
  expect_mention(c1, "heads");
  WideNetConfig c2 = cfg;
  c2.groups = 3;
  expect_mention(c2, "groups");
  WideNetConfig c3 = cfg;
  c3.top_k = 5;
  expect_mention(c3, "top_k");
  WideNetConfig c4 = cfg;
  c4.dropout = 1.0;
  expect_mention(c4, "dropout");
  WideNetConfig c5 = cfg;
  c5.classes = 1;
  expect_mention(c5, "classes");
  WideNetConfig c6 = cfg;
  c6.embed.image_h = 5;
  c6.embed.patch_size = 2;
  expect_mention(c6, "patch");
}

TEST_CASE("closed-form parameter count matches enumeration") {
  RngStream rng(42);
  for (int trial = 0; trial < 8; ++trial) {
    WideNetConfig cfg;
    cfg.heads = 1 + static_cast<std::size_t>(rng.uniform() * 3);
    cfg.d_model = cfg.heads * (2 + static_cast<std::size_t>(rng.uniform() * 5));
    cfg.d_ff = 4 + static_cast<std::size_t>(rng.uniform() * 12);
    cfg.depth = 2 * (1 + static_cast<std::size_t>(rng.uniform() * 3));
    cfg.groups = cfg.depth % 2 == 0 ? 2 : 1;
    cfg.experts = 2 + static_cast<std::size_t>(rng.uniform() * 5);
    cfg.top_k = 1 + static_cast<std::size_t>(rng.uniform() *
                                             static_cast<double>(cfg.experts - 1));
    cfg.classes = 2 + static_cast<std::size_t>(rng.uniform() * 6);
    cfg.share_attn = rng.uniform() > 0.5;
    cfg.share_moe = rng.uniform() > 0.5;
    cfg.share_ln = rng.uniform() > 0.5;
    cfg.use_moe = rng.uniform() > 0.25;
    cfg.head = rng.uniform() > 0.5 ? HeadType::TokenCls
                                   : HeadType::GlobalAveragePool;
    if (rng.uniform() > 0.5) {
      cfg.embed.kind = EmbedKind::Patch;
      cfg.embed.patch_size = 1 + static_cast<std::size_t>(rng.uniform() * 2);
      cfg.embed.channels = 1 + static_cast<std::size_t>(rng.uniform() * 3);
      cfg.embed.image_h = cfg.embed.patch_size * (1 + static_cast<std::size_t>(rng.uniform() * 3));
      cfg.embed.image_w = cfg.embed.patch_size * (1 + static_cast<std::size_t>(rng.uniform() * 3));
    } else {
      cfg.embed.kind = EmbedKind::Token;
      cfg.embed.vocab = 5 + static_cast<std::size_t>(rng.uniform() * 20);
      cfg.embed.e_embed = 2 + static_cast<std::size_t>(rng.uniform() * 6);
      cfg.embed.seq_len = 2 + static_cast<std::size_t>(rng.uniform() * 6);
    }
    INFO("trial ", trial, ": d_model ", cfg.d_model, " depth ", cfg.depth);
    ModelParams params = build_params(cfg);
    CHECK(count_parameters(cfg) == params.total_parameters());
  }
}

TEST_CASE("depth extension with sharing costs exactly the extra norms") {
  WideNetConfig cfg = tiny_config();
  cfg.share_attn = cfg.share_moe = true;
  cfg.share_ln = false;
  cfg.groups = 1;
  const std::size_t base = count_parameters(cfg);
  WideNetConfig deeper = cfg;
  deeper.depth += 1;
  CHECK(count_parameters(deeper) - base == 4 * cfg.d_model);

  // Switching sharing off adds (depth-1) copies of attention + moe weights.
  WideNetConfig solo = cfg;
  solo.share_attn = false;
  solo.share_moe = false;
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t moe = d * cfg.experts +
                          cfg.experts * (d * f + f + f * d + d);
  CHECK(count_parameters(solo) - base == (cfg.depth - 1) * (attn + moe));
}

TEST_CASE("initialization fills scales, zeros shifts, clips weights") {
  WideNetConfig cfg = tiny_config();
  ModelParams params = build_params(cfg);
  RngStream rng(7);
  init_params(params, cfg, rng);

  const double bound = 2.0 * 0.02;
  const double router_bound = bound / std::sqrt(static_cast<double>(cfg.d_model));
  bool saw_nonzero_weight = false;
  for (const NamedParam& p : params.named_parameters()) {
    const bool gamma = p.name.ends_with(".gamma");
    for (double v : p.tensor.data()) {
      if (gamma) {
        CHECK(v == 1.0);
      } else if (p.tensor.rank() == 1) {
        CHECK(v == 0.0);
      } else if (p.name.find(".router") != std::string::npos) {
        CHECK(std::abs(v) <= router_bound + 1e-12);
      } else {
        CHECK(std::abs(v) <= bound + 1e-12);
        if (v != 0.0) saw_nonzero_weight = true;
      }
    }
  }
  CHECK(saw_nonzero_weight);

  // Same seed, same draws.
  ModelParams again = build_params(cfg);
  RngStream rng2(7);
  init_params(again, cfg, rng2);
  auto a = params.named_parameters();
  auto b = again.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    for (std::size_t j = 0; j < a[i].tensor.size(); ++j)
      CHECK(a[i].tensor.data()[j] == b[i].tensor.data()[j]);
  }
}

TEST_CASE("patch extraction visits the grid row-major, channel-major inside") {
  WideNetConfig cfg;
  cfg.embed.kind = EmbedKind::Patch;
  cfg.embed.patch_size = 1;
  cfg.embed.channels = 1;
  cfg.embed.image_h = 2;
  cfg.embed.image_w = 2;
  cfg.d_model = 1;
  cfg.heads = 1;
  cfg.classes = 2;
  ModelParams params = build_params(cfg);
  params.embed.patch_weight.mutable_data()[0] = 1.0;  // identity on 1 feature

  Tensor img = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor tokens = patch_embed(img, params, cfg);
  REQUIRE(tokens.shape() == Shape{4, 1});
  CHECK(tokens.data()[0] == 1.0);  // (y0,x0)
  CHECK(tokens.data()[1] == 2.0);  // (y0,x1)
  CHECK(tokens.data()[2] == 3.0);  // (y1,x0)
  CHECK(tokens.data()[3] == 4.0);  // (y1,x1)

  // 2x2 patch over a 2-channel image: features run c, then y, then x.
  WideNetConfig cfg2 = cfg;
  cfg2.embed.patch_size = 2;
  cfg2.embed.channels = 2;
  cfg2.d_model = 8;
  ModelParams p2 = build_params(cfg2);
  for (std::size_t i = 0; i < 8; ++i)
    p2.embed.patch_weight.mutable_data()[i * 8 + i] = 1.0;
  Tensor img2 = Tensor::from_values({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor tok2 = patch_embed(img2, p2, cfg2);
  REQUIRE(tok2.shape() == Shape{1, 8});
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(tok2.data()[i] == static_cast<double>(i + 1));

  CHECK_THROWS_AS(patch_embed(Tensor::zeros({1, 1, 3, 2}), params, cfg),
                  ShapeError);
  CHECK_THROWS_AS(patch_embed(Tensor::zeros({4}), params, cfg), ShapeError);
}

TEST_CASE("factorized token embedding looks up then projects") {
  WideNetConfig cfg;
  cfg.embed.kind = EmbedKind::Token;
  cfg.embed.vocab = 4;
  cfg.embed.e_embed = 2;
  cfg.embed.seq_len = 3;
  cfg.d_model = 2;
  cfg.heads = 1;
  cfg.classes = 2;
  ModelParams params = build_params(cfg);
  // lookup rows 0..3 distinct; projection = identity.
  params.embed.lookup =
      Tensor::from_values({4, 2}, {1, 0, 0, 1, 2, 0, 0, 2}, true);
  params.embed.proj = Tensor::from_values({2, 2}, {1, 0, 0, 1}, true);

  Tensor ids = Tensor::from_values({2, 3}, {0, 1, 2, 3, 3, 0});
  Tensor emb = token_embed_factorized(ids, params, cfg);
  REQUIRE(emb.shape() == Shape{6, 2});
  CHECK(emb.at(0, 0) == 1.0);
  CHECK(emb.at(1, 1) == 1.0);
  CHECK(emb.at(2, 0) == 2.0);
  CHECK(emb.at(3, 1) == 2.0);
  CHECK(emb.at(4, 1) == 2.0);
  CHECK(emb.at(5, 0) == 1.0);

  CHECK_THROWS_AS(
      token_embed_factorized(Tensor::from_values({1, 3}, {0, 1, 4}), params, cfg),
      ConfigError);
  CHECK_THROWS_AS(
      token_embed_factorized(Tensor::from_values({1, 3}, {0, 1.5, 2}), params, cfg),
      ConfigError);
  CHECK_THROWS_AS(
      token_embed_factorized(Tensor::from_values({1, 2}, {0, 1}), params, cfg),
      ShapeError);
}

TEST_CASE("attention matches the scalar-loop oracle") {
  RngStream rng(33);
  const std::size_t seq = 5, d = 6, heads = 3;
  AttentionParams attn;
  attn.wq = random_tensor({d, d}, rng, false);
  attn.bq = random_tensor({d}, rng, false);
  attn.wk = random_tensor({d, d}, rng, false);
  attn.bk = random_tensor({d}, rng, false);
  attn.wv = random_tensor({d, d}, rng, false);
  attn.bv = random_tensor({d}, rng, false);
  attn.wo = random_tensor({d, d}, rng, false);
  attn.bo = random_tensor({d}, rng, false);
  Tensor x = random_tensor({seq, d}, rng, false);

  Tensor out = mha_forward(x, attn, heads, 1, seq);
  std::vector<double> expect = ref::mha_single(
      to_vec(x), seq, d, heads, to_vec(attn.wq), to_vec(attn.bq),
      to_vec(attn.wk), to_vec(attn.bk), to_vec(attn.wv), to_vec(attn.bv),
      to_vec(attn.wo), to_vec(attn.bo));
  REQUIRE(out.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("attention is permutation equivariant and sample independent") {
  RngStream rng(34);
  const std::size_t seq = 4, d = 4, heads = 2;
  AttentionParams attn;
  for (Tensor* w : {&attn.wq, &attn.wk, &attn.wv, &attn.wo})
    *w = random_tensor({d, d}, rng, false);
  for (Tensor* b : {&attn.bq, &attn.bk, &attn.bv, &attn.bo})
    *b = random_tensor({d}, rng, false);

  Tensor x = random_tensor({seq, d}, rng, false);
  Tensor out = mha_forward(x, attn, heads, 1, seq);

  // Reverse the token order; outputs must reverse with it.
  std::vector<double> rev(seq * d);
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < d; ++j)
      rev[t * d + j] = x.data()[(seq - 1 - t) * d + j];
  Tensor out_rev = mha_forward(Tensor::from_values({seq, d}, std::move(rev)),
                               attn, heads, 1, seq);
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(out_rev.at(t, j) ==
            doctest::Approx(out.at(seq - 1 - t, j)).epsilon(1e-12));

  // Two packed samples do not attend across the boundary.
  Tensor x2 = random_tensor({2 * seq, d}, rng, false);
  Tensor base = mha_forward(x2, attn, heads, 2, seq);
  std::vector<double> tampered = to_vec(x2);
  for (std::size_t i = seq * d; i < 2 * seq * d; ++i) tampered[i] += 1.0;
  Tensor out2 = mha_forward(Tensor::from_values({2 * seq, d}, std::move(tampered)),
                            attn, heads, 2, seq);
  for (std::size_t i = 0; i < seq * d; ++i)
    CHECK(out2.data()[i] == base.data()[i]);

  CHECK_THROWS_AS(mha_forward(x, attn, 3, 1, seq), ConfigError);
  CHECK_THROWS_AS(mha_forward(x, attn, 2, 2, seq), ShapeError);
}

TEST_CASE("forward pass routes once per group and reuses the decision") {
  WideNetConfig cfg = tiny_config();
  cfg.groups = 2;  // depth 4 -> two blocks per group
  ModelParams params = build_params(cfg);
  RngStream init(3);
  init_params(params, cfg, init);

  RngStream rng(17);
  Batch batch = random_batch(cfg, 2, rng);
  RngStream fwd(5);
  ForwardTrace trace;
  ForwardResult res = model_forward(batch, params, cfg, fwd, true, &trace);

  CHECK(res.logits.rows() == 2);
  CHECK(res.logits.cols() == cfg.classes);
  CHECK(res.logits.all_finite());
  REQUIRE(res.outcomes.size() == 2);  // one per group
  REQUIRE(trace.blocks.size() == 4);

  CHECK(trace.blocks[0].routed);
  CHECK_FALSE(trace.blocks[1].routed);
  CHECK(trace.blocks[2].routed);
  CHECK_FALSE(trace.blocks[3].routed);
  CHECK(trace.blocks[0].group == 0);
  CHECK(trace.blocks[1].group == 0);
  CHECK(trace.blocks[2].group == 1);
  CHECK(trace.blocks[3].group == 1);

  // Within a group every block applies the identical routing decision.
  CHECK(trace.blocks[0].indices == trace.blocks[1].indices);
  CHECK(trace.blocks[0].kept == trace.blocks[1].kept);
  CHECK(trace.blocks[2].indices == trace.blocks[3].indices);
  CHECK(trace.blocks[2].kept == trace.blocks[3].kept);
  // Across groups the decisions are made on different activations.
  CHECK(trace.blocks[0].indices != trace.blocks[2].indices);

  const std::vector<std::string> routed_ops = {"ln_att", "mha", "residual",
                                               "ln_moe", "moe_route", "residual"};
  const std::vector<std::string> reuse_ops = {"ln_att", "mha", "residual",
                                              "ln_moe", "moe_reuse", "residual"};
  CHECK(trace.blocks[0].op_sequence == routed_ops);
  CHECK(trace.blocks[1].op_sequence == reuse_ops);

  // Weight sharing: one attention and one expert bank across depth, but a
  // fresh pair of norms per block.
  std::set<const void*> attn_ids, expert_ids, norm_ids;
  for (const BlockTrace& b : trace.blocks) {
    attn_ids.insert(b.attn_id);
    expert_ids.insert(b.expert_id);
    norm_ids.insert(b.norm_id);
  }
  CHECK(attn_ids.size() == 1);
  CHECK(expert_ids.size() == 1);
  CHECK(norm_ids.size() == 4);
}

TEST_CASE("sharing switches produce distinct parameter banks") {
  WideNetConfig cfg = tiny_config();
  cfg.share_attn = false;
  cfg.share_moe = false;
  cfg.share_ln = true;
  ModelParams params = build_params(cfg);
  RngStream init(3);
  init_params(params, cfg, init);

  RngStream rng(18);
  Batch batch = random_batch(cfg, 1, rng);
  RngStream fwd(6);
  ForwardTrace trace;
  model_forward(batch, params, cfg, fwd, false, &trace);

  std::set<const void*> attn_ids, expert_ids, norm_ids;
  for (const BlockTrace& b : trace.blocks) {
    attn_ids.insert(b.attn_id);
    expert_ids.insert(b.expert_id);
    norm_ids.insert(b.norm_id);
  }
  CHECK(attn_ids.size() == cfg.depth);
  CHECK(expert_ids.size() == cfg.depth);
  CHECK(norm_ids.size() == 1);
}

TEST_CASE("dense blocks replace experts when moe is off") {
  WideNetConfig cfg = tiny_config();
  cfg.use_moe = false;
  ModelParams params = build_params(cfg);
  RngStream init(4);
  init_params(params, cfg, init);

  RngStream rng(19);
  Batch batch = random_batch(cfg, 2, rng);
  RngStream fwd(7);
  ForwardTrace trace;
  ForwardResult res = model_forward(batch, params, cfg, fwd, true, &trace);
  CHECK(res.outcomes.empty());
  for (const BlockTrace& b : trace.blocks) {
    CHECK(b.op_sequence[4] == "ffn");
    CHECK_FALSE(b.routed);
  }
  CHECK(res.logits.all_finite());
}

TEST_CASE("cls head pools the first row per sample") {
  WideNetConfig cfg = tiny_config();
  cfg.head = HeadType::TokenCls;
  CHECK(cfg.tokens_per_sample() == 5);  // 4 patches + cls
  ModelParams params = build_params(cfg);
  CHECK(params.embed.cls.defined());
  RngStream init(8);
  init_params(params, cfg, init);

  RngStream rng(20);
  Batch batch = random_batch(cfg, 3, rng);
  RngStream fwd(9);
  ForwardResult res = model_forward(batch, params, cfg, fwd, false);
  CHECK(res.logits.rows() == 3);
  CHECK(res.logits.all_finite());

  // A pooling config never allocates cls and refuses to run TokenCls.
  WideNetConfig gap = tiny_config();
  ModelParams gp = build_params(gap);
  CHECK_FALSE(gp.embed.cls.defined());
  WideNetConfig forced = gap;
  forced.head = HeadType::TokenCls;
  Tensor states = Tensor::zeros({forced.tokens_per_sample(), gap.d_model});
  CHECK_THROWS_AS(head_forward(states, gp, forced, 1), ConfigError);
}

TEST_CASE("forward is deterministic given seed and counter") {
  WideNetConfig cfg = tiny_config();
  cfg.dropout = 0.2;
  ModelParams params = build_params(cfg);
  RngStream init(5);
  init_params(params, cfg, init);

  RngStream rng(23);
  Batch batch = random_batch(cfg, 2, rng);

  RngStream f1(77), f2(77);
  Tensor l1 = model_forward(batch, params, cfg, f1, true).logits;
  Tensor l2 = model_forward(batch, params, cfg, f2, true).logits;
  CHECK(f1.counter() == f2.counter());
  CHECK(f1.counter() > 0);  // noise and dropout actually drew
  for (std::size_t i = 0; i < l1.size(); ++i)
    CHECK(l1.data()[i] == l2.data()[i]);

  // Evaluation consumes no randomness and ignores dropout.
  RngStream f3(77);
  Tensor l3 = model_forward(batch, params, cfg, f3, false).logits;
  CHECK(f3.counter() == 0);
  WideNetConfig nodrop = cfg;
  nodrop.dropout = 0.0;
  RngStream f4(77);
  Tensor l4 = model_forward(batch, params, nodrop, f4, false).logits;
  for (std::size_t i = 0; i < l3.size(); ++i)
    CHECK(l3.data()[i] == l4.data()[i]);
}

TEST_CASE("model gradients agree with finite differences") {
  WideNetConfig cfg = tiny_config();
  cfg.depth = 2;
  cfg.groups = 1;
  cfg.d_model = 6;
  cfg.heads = 2;
  cfg.d_ff = 8;
  cfg.experts = 4;
  cfg.top_k = 2;
  ModelParams params = build_params(cfg);
  RngStream init(11);
  init_params(params, cfg, init);

  RngStream rng(29);
  Batch batch = random_batch(cfg, 2, rng);
  Tensor probe = random_tensor({2, cfg.classes}, rng, false);

  auto loss_for = [&](const ModelParams& p) {
    RngStream frozen(41);
    ForwardResult res = model_forward(batch, p, cfg, frozen, true);
    Tensor loss = reduce_sum(mul(res.logits, probe));
    for (const RoutingOutcome& o : res.outcomes)
      loss = add(loss, mul(balance_loss(o), cfg.balance_weight));
    return loss;
  };

  // Router weights: the discrete selection stays put under the probe step
  // because initialization keeps probabilities in a narrow band; verify the
  // analytic/numeric agreement anyway, which would expose a flip.
  check_fd([&](const Tensor& t) {
    ModelParams shadow = params;
    shadow.moe[0].router.w_f = t;
    return loss_for(shadow);
  }, params.moe[0].router.w_f, 1e-5, 1e-7);

  check_fd([&](const Tensor& t) {
    ModelParams shadow = params;
    shadow.head_weight = t;
    return loss_for(shadow);
  }, params.head_weight, 1e-5, 1e-7);

  check_fd([&](const Tensor& t) {
    ModelParams shadow = params;
    shadow.norms[1].att.gamma = t;
    return loss_for(shadow);
  }, params.norms[1].att.gamma, 1e-5, 1e-7);

  check_fd([&](const Tensor& t) {
    ModelParams shadow = params;
    shadow.embed.patch_weight = t;
    return loss_for(shadow);
  }, params.embed.patch_weight, 1e-5, 1e-7);
}
