#include "widenet/model.hpp"

#include <cmath>

#include "widenet/rng.hpp"

namespace widenet {

void WideNetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("config: " + what); };
  if (depth < 1) fail("depth must be at least 1");
  if (d_model < 1) fail("d_model must be at least 1");
  if (heads < 1) fail("heads must be at least 1");
  if (d_model % heads != 0)
    fail("d_model " + std::to_string(d_model) + " not divisible by heads " +
         std::to_string(heads));
  if (d_ff < 1) fail("d_ff must be at least 1");
  if (use_moe) {
    if (experts < 1) fail("experts must be at least 1");
    if (top_k < 1 || top_k > experts)
      fail("top_k " + std::to_string(top_k) + " outside [1, " +
           std::to_string(experts) + "]");
    if (!(capacity_ratio > 0.0)) fail("capacity_ratio must be positive");
  }
  if (groups < 1 || groups > depth || depth % groups != 0)
    fail("groups " + std::to_string(groups) + " must evenly divide depth " +
         std::to_string(depth));
  if (balance_weight < 0.0) fail("balance_weight must be non-negative");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (classes < 2) fail("classes must be at least 2");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (embed.kind == EmbedKind::Patch) {
    if (embed.patch_size < 1) fail("patch_size must be at least 1");
    if (embed.channels < 1) fail("channels must be at least 1");
    if (embed.image_h % embed.patch_size != 0 ||
        embed.image_w % embed.patch_size != 0)
      fail("image " + std::to_string(embed.image_h) + "x" +
           std::to_string(embed.image_w) + " not divisible into " +
           std::to_string(embed.patch_size) + "-sized patches");
  } else {
    if (embed.vocab < 1) fail("vocab must be at least 1 for token embedding");
    if (embed.e_embed < 1) fail("e_embed must be at least 1");
    if (embed.seq_len < 1) fail("seq_len must be at least 1");
  }
}

std::size_t WideNetConfig::patch_count() const {
  return (embed.image_h / embed.patch_size) * (embed.image_w / embed.patch_size);
}

std::size_t WideNetConfig::tokens_per_sample() const {
  const std::size_t base =
      embed.kind == EmbedKind::Patch ? patch_count() : embed.seq_len;
  return base + (head == HeadType::TokenCls ? 1 : 0);
}

// ---- Parameter traversal --------------------------------------------------

std::vector<NamedParam> ModelParams::named_parameters() const {
  std::vector<NamedParam> out;
  auto push = [&out](const std::string& name, const Tensor& t) {
    if (t.defined()) out.push_back({name, t});
  };

  push("embed.patch_weight", embed.patch_weight);
  push("embed.patch_bias", embed.patch_bias);
  push("embed.lookup", embed.lookup);
  push("embed.proj", embed.proj);
  push("embed.pos", embed.pos);
  push("embed.cls", embed.cls);

  for (std::size_t i = 0; i < attention.size(); ++i) {
    const std::string p =
        attention.size() == 1 ? "shared.attn" : "block" + std::to_string(i) + ".attn";
    const AttentionParams& a = attention[i];
    push(p + ".wq", a.wq);
    push(p + ".bq", a.bq);
    push(p + ".wk", a.wk);
    push(p + ".bk", a.bk);
    push(p + ".wv", a.wv);
    push(p + ".bv", a.bv);
    push(p + ".wo", a.wo);
    push(p + ".bo", a.bo);
  }
  for (std::size_t i = 0; i < moe.size(); ++i) {
    const std::string p =
        moe.size() == 1 ? "shared.moe" : "block" + std::to_string(i) + ".moe";
    push(p + ".router", moe[i].router.w_f);
    for (std::size_t j = 0; j < moe[i].experts.size(); ++j) {
      const std::string q = p + ".expert" + std::to_string(j);
      push(q + ".w1", moe[i].experts[j].w1);
      push(q + ".b1", moe[i].experts[j].b1);
      push(q + ".w2", moe[i].experts[j].w2);
      push(q + ".b2", moe[i].experts[j].b2);
    }
  }
  for (std::size_t i = 0; i < ffn.size(); ++i) {
    const std::string p =
        ffn.size() == 1 ? "shared.ffn" : "block" + std::to_string(i) + ".ffn";
    push(p + ".w1", ffn[i].w1);
    push(p + ".b1", ffn[i].b1);
    push(p + ".w2", ffn[i].w2);
    push(p + ".b2", ffn[i].b2);
  }
  for (std::size_t i = 0; i < norms.size(); ++i) {
    const std::string p =
        norms.size() == 1 ? "shared.norms" : "block" + std::to_string(i) + ".norms";
    push(p + ".att.gamma", norms[i].att.gamma);
    push(p + ".att.beta", norms[i].att.beta);
    push(p + ".moe.gamma", norms[i].moe.gamma);
    push(p + ".moe.beta", norms[i].moe.beta);
  }
  push("final.gamma", final_norm.gamma);
  push("final.beta", final_norm.beta);
  push("head.weight", head_weight);
  push("head.bias", head_bias);
  return out;
}

std::size_t ModelParams::total_parameters() const {
  std::size_t n = 0;
  for (const NamedParam& p : named_parameters()) n += p.tensor.size();
  return n;
}

ModelParams build_params(const WideNetConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  ModelParams params;

  if (cfg.embed.kind == EmbedKind::Patch) {
    const std::size_t feat =
        cfg.embed.patch_size * cfg.embed.patch_size * cfg.embed.channels;
    params.embed.patch_weight = Tensor::zeros({feat, d}, true);
    params.embed.patch_bias = Tensor::zeros({d}, true);
  } else {
    params.embed.lookup = Tensor::zeros({cfg.embed.vocab, cfg.embed.e_embed}, true);
    params.embed.proj = Tensor::zeros({cfg.embed.e_embed, d}, true);
  }
  params.embed.pos = Tensor::zeros({cfg.tokens_per_sample(), d}, true);
  if (cfg.head == HeadType::TokenCls)
    params.embed.cls = Tensor::zeros({1, d}, true);

  const std::size_t attn_copies = cfg.share_attn ? 1 : cfg.depth;
  for (std::size_t i = 0; i < attn_copies; ++i) {
    AttentionParams a;
    a.wq = Tensor::zeros({d, d}, true);
    a.bq = Tensor::zeros({d}, true);
    a.wk = Tensor::zeros({d, d}, true);
    a.bk = Tensor::zeros({d}, true);
    a.wv = Tensor::zeros({d, d}, true);
    a.bv = Tensor::zeros({d}, true);
    a.wo = Tensor::zeros({d, d}, true);
    a.bo = Tensor::zeros({d}, true);
    params.attention.push_back(std::move(a));
  }

  const std::size_t expert_copies = cfg.share_moe ? 1 : cfg.depth;
  if (cfg.use_moe) {
    for (std::size_t i = 0; i < expert_copies; ++i) {
      MoeParams m;
      m.activation = cfg.activation;
      m.router.w_f = Tensor::zeros({d, cfg.experts}, true);
      for (std::size_t j = 0; j < cfg.experts; ++j) {
        Expert e;
        e.w1 = Tensor::zeros({d, f}, true);
        e.b1 = Tensor::zeros({f}, true);
        e.w2 = Tensor::zeros({f, d}, true);
        e.b2 = Tensor::zeros({d}, true);
        m.experts.push_back(std::move(e));
      }
      params.moe.push_back(std::move(m));
    }
  } else {
    for (std::size_t i = 0; i < expert_copies; ++i) {
      FfnParams ff;
      ff.w1 = Tensor::zeros({d, f}, true);
      ff.b1 = Tensor::zeros({f}, true);
      ff.w2 = Tensor::zeros({f, d}, true);
      ff.b2 = Tensor::zeros({d}, true);
      params.ffn.push_back(std::move(ff));
    }
  }

  const std::size_t norm_copies = cfg.share_ln ? 1 : cfg.depth;
  for (std::size_t i = 0; i < norm_copies; ++i) {
    BlockNorms nb;
    nb.att.gamma = Tensor::zeros({d}, true);
    nb.att.beta = Tensor::zeros({d}, true);
    nb.moe.gamma = Tensor::zeros({d}, true);
    nb.moe.beta = Tensor::zeros({d}, true);
    params.norms.push_back(std::move(nb));
  }
  params.final_norm.gamma = Tensor::zeros({d}, true);
  params.final_norm.beta = Tensor::zeros({d}, true);
  params.head_weight = Tensor::zeros({d, cfg.classes}, true);
  params.head_bias = Tensor::zeros({cfg.classes}, true);
  return params;
}

void init_params(ModelParams& params, const WideNetConfig& cfg,
                 RngStream& rng) {
  const double base_std = 0.02;
  const double router_std = 0.02 / std::sqrt(static_cast<double>(cfg.d_model));
  for (NamedParam& p : params.named_parameters()) {
    Tensor t = p.tensor;
    auto values = t.mutable_data();
    const bool is_gamma = p.name.size() >= 6 &&
                          p.name.compare(p.name.size() - 6, 6, ".gamma") == 0;
    if (is_gamma) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (t.rank() == 1) {
      std::fill(values.begin(), values.end(), 0.0);  // biases and betas
    } else {
      const double stddev =
          p.name.find(".router") != std::string::npos ? router_std : base_std;
      for (double& v : values) v = rng.truncated_gaussian(0.0, stddev);
    }
  }
}

std::size_t count_parameters(const WideNetConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t expert = d * f + f + f * d + d;
  const std::size_t norms = 4 * d;

  std::size_t total = 0;
  if (cfg.embed.kind == EmbedKind::Patch) {
    const std::size_t feat =
        cfg.embed.patch_size * cfg.embed.patch_size * cfg.embed.channels;
    total += feat * d + d;
  } else {
    total += cfg.embed.vocab * cfg.embed.e_embed + cfg.embed.e_embed * d;
  }
  total += cfg.tokens_per_sample() * d;                      // positions
  if (cfg.head == HeadType::TokenCls) total += d;            // cls token
  total += (cfg.share_attn ? 1 : cfg.depth) * attn;
  if (cfg.use_moe)
    total += (cfg.share_moe ? 1 : cfg.depth) *
             (d * cfg.experts + cfg.experts * expert);
  else
    total += (cfg.share_moe ? 1 : cfg.depth) * expert;
  total += (cfg.share_ln ? 1 : cfg.depth) * norms;
  total += 2 * d;                                            // final norm
  total += d * cfg.classes + cfg.classes;                    // head
  return total;
}

// ---- Embeddings -----------------------------------------------------------

Tensor patch_embed(const Tensor& input, const ModelParams& params,
                   const WideNetConfig& cfg) {
  const EmbedConfig& e = cfg.embed;
  if (e.kind != EmbedKind::Patch)
    throw ConfigError("patch_embed: config selects token embedding");
  if (input.rank() != 4)
    throw ShapeError(
        "patch_embed: input must be rank 4 (batch, channels, height, width), "
        "got " + shape_str(input.shape()));
  if (input.dim(1) != e.channels || input.dim(2) != e.image_h ||
      input.dim(3) != e.image_w)
    throw ShapeError("patch_embed: input " + shape_str(input.shape()) +
                     " does not match configured " +
                     std::to_string(e.channels) + "x" +
                     std::to_string(e.image_h) + "x" +
                     std::to_string(e.image_w));
  const std::size_t n = input.dim(0), c = e.channels, h = e.image_h,
                    w = e.image_w, p = e.patch_size;
  const std::size_t gw = w / p, feat = p * p * c;
  const std::size_t np = cfg.patch_count();

  // Row-major patch grid; within a patch features run channel, y, x.
  std::vector<std::size_t> idx;
  idx.reserve(n * np * feat);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t patch = 0; patch < np; ++patch) {
      const std::size_t gy = patch / gw, gx = patch % gw;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            idx.push_back(((s * c + ch) * h + gy * p + py) * w + gx * p + px);
    }
  Tensor flat = reshape(input, {n * c * h * w, 1});
  Tensor patches = reshape(gather_rows(flat, idx), {n * np, feat});
  return add(matmul(patches, params.embed.patch_weight),
             params.embed.patch_bias);
}

Tensor token_embed_factorized(const Tensor& ids, const ModelParams& params,
                              const WideNetConfig& cfg) {
  const EmbedConfig& e = cfg.embed;
  if (e.kind != EmbedKind::Token)
    throw ConfigError("token_embed_factorized: config selects patch embedding");
  if (ids.rank() != 2)
    throw ShapeError("token_embed_factorized: ids must be rank 2, got " +
                     shape_str(ids.shape()));
  if (ids.cols() != e.seq_len)
    throw ShapeError("token_embed_factorized: sequence length " +
                     std::to_string(ids.cols()) + " != configured " +
                     std::to_string(e.seq_len));
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double v = ids.data()[i];
    if (v != std::floor(v) || v < 0.0 ||
        v >= static_cast<double>(e.vocab))
      throw ConfigError("token_embed_factorized: id " + std::to_string(v) +
                        " outside vocabulary of " + std::to_string(e.vocab));
    idx[i] = static_cast<std::size_t>(v);
  }
  return matmul(gather_rows(params.embed.lookup, idx), params.embed.proj);
}

// ---- Attention --------------------------------------------------------------

Tensor mha_forward(const Tensor& x, const AttentionParams& attn,
                   std::size_t heads, std::size_t samples,
                   std::size_t seq_len) {
  if (x.rank() != 2 || x.rows() != samples * seq_len)
    throw ShapeError("mha_forward: tokens " + shape_str(x.shape()) +
                     " do not pack " + std::to_string(samples) + " x " +
                     std::to_string(seq_len) + " rows");
  const std::size_t d = x.cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("mha_forward: width " + std::to_string(d) +
                      " not divisible into " + std::to_string(heads) +
                      " heads");
  if (attn.wq.rank() != 2 || attn.wq.rows() != d || attn.wq.cols() != d)
    throw ShapeError("mha_forward: query weights " +
                     shape_str(attn.wq.shape()) + " do not match width " +
                     std::to_string(d));
  const std::size_t dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor q = add(matmul(x, attn.wq), attn.bq);
  Tensor k = add(matmul(x, attn.wk), attn.bk);
  Tensor v = add(matmul(x, attn.wv), attn.bv);

  std::vector<Tensor> per_sample;
  per_sample.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor qs = slice_rows(q, s * seq_len, (s + 1) * seq_len);
    Tensor ks = slice_rows(k, s * seq_len, (s + 1) * seq_len);
    Tensor vs = slice_rows(v, s * seq_len, (s + 1) * seq_len);
    std::vector<Tensor> head_ctx;
    head_ctx.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = slice_cols(qs, hd * dk, (hd + 1) * dk);
      Tensor kh = slice_cols(ks, hd * dk, (hd + 1) * dk);
      Tensor vh = slice_cols(vs, hd * dk, (hd + 1) * dk);
      Tensor weights = stable_softmax(mul(matmul(qh, transpose(kh)), scale), 1);
      head_ctx.push_back(matmul(weights, vh));
    }
    per_sample.push_back(heads == 1 ? head_ctx[0] : concat_cols(head_ctx));
  }
  Tensor ctx = samples == 1 ? per_sample[0] : concat_rows(per_sample);
  return add(matmul(ctx, attn.wo), attn.bo);
}

// ---- Head -------------------------------------------------------------------

Tensor head_forward(const Tensor& x, const ModelParams& params,
                    const WideNetConfig& cfg, std::size_t samples) {
  const std::size_t seq = cfg.tokens_per_sample();
  if (x.rank() != 2 || x.rows() != samples * seq)
    throw ShapeError("head_forward: tokens " + shape_str(x.shape()) +
                     " do not pack " + std::to_string(samples) + " x " +
                     std::to_string(seq) + " rows");
  Tensor pooled;
  if (cfg.head == HeadType::TokenCls) {
    if (!params.embed.cls.defined())
      throw ConfigError("head_forward: TokenCls head without a cls token");
    std::vector<std::size_t> idx(samples);
    for (std::size_t s = 0; s < samples; ++s) idx[s] = s * seq;
    pooled = gather_rows(x, idx);
  } else {
    std::vector<Tensor> rows;
    rows.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) {
      Tensor mean = reduce_mean(slice_rows(x, s * seq, (s + 1) * seq), 0);
      rows.push_back(reshape(mean, {1, cfg.d_model}));
    }
    pooled = samples == 1 ? rows[0] : concat_rows(rows);
  }
  return add(matmul(pooled, params.head_weight), params.head_bias);
}

// ---- Full forward -----------------------------------------------------------

ForwardResult model_forward(const Batch& batch, const ModelParams& params,
                            const WideNetConfig& cfg, RngStream& rng,
                            bool training, ForwardTrace* trace) {
  cfg.validate();
  if (!batch.input.defined())
    throw ShapeError("model_forward: batch has no input tensor");
  const std::size_t n = batch.input.dim(0);
  if (n == 0) throw ShapeError("model_forward: empty batch");

  Tensor tokens = cfg.embed.kind == EmbedKind::Patch
                      ? patch_embed(batch.input, params, cfg)
                      : token_embed_factorized(batch.input, params, cfg);
  const std::size_t seq = cfg.tokens_per_sample();
  if (cfg.head == HeadType::TokenCls) {
    const std::size_t body = seq - 1;
    std::vector<Tensor> parts;
    parts.reserve(2 * n);
    for (std::size_t s = 0; s < n; ++s) {
      parts.push_back(params.embed.cls);
      parts.push_back(slice_rows(tokens, s * body, (s + 1) * body));
    }
    tokens = concat_rows(parts);
  }
  Tensor x = add(tokens, tile_rows(params.embed.pos, n));
  const std::size_t total_tokens = n * seq;

  ForwardResult result;
  const std::size_t bpg = cfg.blocks_per_group();
  for (std::size_t j = 0; j < cfg.depth; ++j) {
    const BlockNorms& nb = params.norms_for_block(j);
    BlockTrace bt;
    bt.group = j / bpg;
    bt.norm_id = nb.att.gamma.id();

    Tensor x1 = layer_norm(x, nb.att.gamma, nb.att.beta, cfg.ln_eps);
    const AttentionParams& ap = params.attention_for_block(j);
    bt.attn_id = ap.wq.id();
    Tensor a = mha_forward(x1, ap, cfg.heads, n, seq);
    a = dropout(a, cfg.dropout, rng, training);
    x = add(x, a);
    bt.op_sequence = {"ln_att", "mha", "residual", "ln_moe"};

    Tensor x2 = layer_norm(x, nb.moe.gamma, nb.moe.beta, cfg.ln_eps);
    Tensor y;
    if (cfg.use_moe) {
      const MoeParams& mp = params.moe_for_block(j);
      bt.expert_id = mp.router.w_f.id();
      if (j % bpg == 0) {
        RoutingOutcome o = route(x2, mp.router, cfg.top_k, rng, training);
        dispatch_with_capacity(
            o, buffer_capacity(cfg.capacity_ratio, cfg.top_k, 1, total_tokens,
                               cfg.experts));
        result.outcomes.push_back(std::move(o));
        bt.routed = true;
        bt.op_sequence.push_back("moe_route");
      } else {
        bt.op_sequence.push_back("moe_reuse");
      }
      const RoutingOutcome& o = result.outcomes.back();
      y = moe_combine(x2, mp, o);
      bt.indices = o.indices;
      bt.kept = o.kept;
    } else {
      const FfnParams& fp = params.ffn_for_block(j);
      bt.expert_id = fp.w1.id();
      Tensor hdn = add(matmul(x2, fp.w1), fp.b1);
      hdn = cfg.activation == Activation::Relu ? relu(hdn) : gelu(hdn);
      y = add(matmul(hdn, fp.w2), fp.b2);
      bt.op_sequence.push_back("ffn");
    }
    y = dropout(y, cfg.dropout, rng, training);
    x = add(x, y);
    bt.op_sequence.push_back("residual");
    if (trace) trace->blocks.push_back(std::move(bt));
  }

  x = layer_norm(x, params.final_norm.gamma, params.final_norm.beta,
                 cfg.ln_eps);
  result.logits = head_forward(x, params, cfg, n);
  return result;
}

}  // namespace widenet
