#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "widenet/moe.hpp"
#include "widenet/tensor.hpp"

namespace widenet {

class RngStream;

enum class HeadType { TokenCls, GlobalAveragePool };
enum class EmbedKind { Patch, Token };

struct EmbedConfig {
  EmbedKind kind = EmbedKind::Patch;
  // Patch path: non-overlapping patch_size x patch_size tiles over an
  // image of channels x image_h x image_w.
  std::size_t patch_size = 1;
  std::size_t channels = 1;
  std::size_t image_h = 8;
  std::size_t image_w = 1;
  // Token path: factorized lookup, vocab -> e_embed -> d_model.
  std::size_t vocab = 0;
  std::size_t e_embed = 128;
  std::size_t seq_len = 0;
};

// One transformer stack description. Attention and expert weights are shared
// across depth by default; each block keeps its own pair of layer norms
// unless share_ln flips that too.
struct WideNetConfig {
  std::size_t depth = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t heads = 4;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  double capacity_ratio = 1.2;
  double balance_weight = 0.01;
  // Consecutive blocks are tiled into `groups` groups; only the first block
  // of a group makes a routing decision, the rest reuse it.
  std::size_t groups = 4;
  bool share_attn = true;
  bool share_moe = true;
  bool share_ln = false;
  bool use_moe = true;  // off = dense two-layer ffn in every block
  HeadType head = HeadType::GlobalAveragePool;
  EmbedConfig embed;
  double dropout = 0.0;
  std::size_t classes = 4;
  double ln_eps = 1e-6;
  Activation activation = Activation::Gelu;

  void validate() const;  // throws ConfigError naming the offending field
  std::size_t patch_count() const;
  std::size_t tokens_per_sample() const;  // sequence length incl. cls slot
  std::size_t blocks_per_group() const { return depth / groups; }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

// The two normalization sites of one block (before attention, before the
// expert/ffn sublayer).
struct BlockNorms {
  LayerNormParams att, moe;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct EmbedParams {
  Tensor patch_weight;  // (patch_size^2 * channels) x d_model
  Tensor patch_bias;    // d_model
  Tensor lookup;        // vocab x e_embed
  Tensor proj;          // e_embed x d_model
  Tensor pos;           // tokens_per_sample x d_model
  Tensor cls;           // 1 x d_model, TokenCls head only
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  EmbedParams embed;
  std::vector<AttentionParams> attention;  // size 1 when shared, else depth
  std::vector<MoeParams> moe;              // used when use_moe
  std::vector<FfnParams> ffn;              // used when !use_moe
  std::vector<BlockNorms> norms;           // size 1 when share_ln, else depth
  LayerNormParams final_norm;
  Tensor head_weight;  // d_model x classes
  Tensor head_bias;    // classes

  const AttentionParams& attention_for_block(std::size_t j) const {
    return attention[attention.size() == 1 ? 0 : j];
  }
  const MoeParams& moe_for_block(std::size_t j) const {
    return moe[moe.size() == 1 ? 0 : j];
  }
  const FfnParams& ffn_for_block(std::size_t j) const {
    return ffn[ffn.size() == 1 ? 0 : j];
  }
  const BlockNorms& norms_for_block(std::size_t j) const {
    return norms[norms.size() == 1 ? 0 : j];
  }

  // Fixed traversal order; optimizer slots and checkpoints index into this.
  std::vector<NamedParam> named_parameters() const;
  std::size_t total_parameters() const;
};

// Allocates all parameter tensors as zeros with requires_grad on.
ModelParams build_params(const WideNetConfig& cfg);

// Truncated-normal initialization (std 0.02, clipped at two sigma) for
// weight matrices, zeros for biases and shifts, ones for scales. Router
// matrices use std 0.02 / sqrt(d_model). Draw order follows
// named_parameters(), so a (seed, counter) pair pins every value.
void init_params(ModelParams& params, const WideNetConfig& cfg, RngStream& rng);

// Closed-form size of the model described by cfg; must equal the
// enumeration over named_parameters() of built params.
std::size_t count_parameters(const WideNetConfig& cfg);

// One sample batch. input is rank 4 (batch, channels, height, width) for
// patch embedding or rank 2 (batch, seq_len) of integral ids for token
// embedding. labels.size() == batch.
struct Batch {
  Tensor input;
  std::vector<std::size_t> labels;
};

// (batch * patch_count) x d_model token matrix from a rank-4 input. Patches
// are visited row-major over the grid; features within a patch are ordered
// channel, then y, then x.
Tensor patch_embed(const Tensor& input, const ModelParams& params,
                   const WideNetConfig& cfg);

// Factorized id embedding. ids must hold integral values in [0, vocab).
Tensor token_embed_factorized(const Tensor& ids, const ModelParams& params,
                              const WideNetConfig& cfg);

// Standard multi-head self-attention over `samples` packed sequences of
// seq_len rows each. No masking; scores scale by 1/sqrt(head_dim).
Tensor mha_forward(const Tensor& x, const AttentionParams& attn,
                   std::size_t heads, std::size_t samples,
                   std::size_t seq_len);

// Class logits from final token states: the cls row per sample, or a mean
// over the sample's rows for the pooling head.
Tensor head_forward(const Tensor& x, const ModelParams& params,
                    const WideNetConfig& cfg, std::size_t samples);

// Per-block record of what the forward pass did; tests use it to pin down
// sharing and routing-reuse behavior.
struct BlockTrace {
  std::size_t group = 0;
  bool routed = false;  // fresh routing decision in this block
  std::vector<std::string> op_sequence;
  const void* attn_id = nullptr;
  const void* expert_id = nullptr;  // moe or ffn storage identity
  const void* norm_id = nullptr;
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> kept;
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
};

struct ForwardResult {
  Tensor logits;  // batch x classes
  // One outcome per routing decision (groups of blocks share one), empty
  // when use_moe is off.
  std::vector<RoutingOutcome> outcomes;
};

ForwardResult model_forward(const Batch& batch, const ModelParams& params,
                            const WideNetConfig& cfg, RngStream& rng,
                            bool training, ForwardTrace* trace = nullptr);

}  // namespace widenet
