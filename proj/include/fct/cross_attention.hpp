#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "fct/vision_embed.hpp"

namespace fct {

enum class SrMode { kAveragePool, kStridedProjection };
enum class NormPlacement { kPreNorm, kPostNorm };
/// kCross aggregates K/V across branches; kSelf lets each branch attend to
/// its own (spatially reduced) tokens only.
enum class AttentionMode { kCross, kSelf };

struct LayerConfig {
  int64_t channels = 16;
  int64_t heads = 2;
  int64_t sr_ratio = 1;
  SrMode sr_mode = SrMode::kAveragePool;
  int64_t mlp_ratio = 4;
  double eps = 1e-6;
  bool sr_norm = false;  // LayerNorm after the spatial reduction
  NormPlacement placement = NormPlacement::kPreNorm;

  int64_t head_dim() const { return channels / heads; }
  void validate() const;
};

struct AttentionWeights {
  LinearWeights q, k, v, o;
  LinearWeights sr;  // strided projection, [r*r*C, C]; unused for pooling
  Tensor sr_norm_gamma, sr_norm_beta;
};

struct FeedForwardWeights {
  Tensor ln_gamma, ln_beta;
  LinearWeights fc1, fc2;
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  AttentionWeights attn;
  FeedForwardWeights ffn;
};

/// Registers all tensors of one cross-transformer layer under `prefix`.
void init_layer_params(ParamStore& store, const std::string& prefix, const LayerConfig& cfg, std::mt19937_64& rng);
LayerWeights layer_weights(const ParamStore& store, const std::string& prefix, const LayerConfig& cfg);

/// Attention probabilities retained from one attention call.
struct AttentionCapture {
  Tensor query_probs;    // [B_q, h, N_q, M_q]
  Tensor support_probs;  // [B_s, h, N_s, M_s]
  int64_t query_kv_tokens = 0;    // leading query-branch block inside M
  int64_t support_kv_tokens = 0;  // trailing support-branch block inside M
};

struct QkvSet {
  Tensor q_q, k_q, v_q;
  Tensor q_s, k_s, v_s;
};

/// Sub-samples the token grid by `sr_ratio`: window mean (pooling) or a
/// learned projection of each r x r window (strided).
TokenSequence spatial_reduce(const TokenSequence& x, const LayerConfig& cfg, const AttentionWeights& w);

/// Shared-weight projections: Q from full-resolution tokens, K and V from the
/// spatially reduced tokens of the same branch.
QkvSet project_qkv(const TokenSequence& x_q, const TokenSequence& x_s, const AttentionWeights& w,
                   const LayerConfig& cfg);

/// Support K/V averaged over the support batch, appended to the query K/V
/// along the token axis. Result has batch 1.
std::pair<Tensor, Tensor> aggregate_kv_for_query(const Tensor& k_q, const Tensor& v_q, const Tensor& k_s,
                                                 const Tensor& v_s);
/// Query K/V repeated over the support batch, followed by the support K/V.
std::pair<Tensor, Tensor> aggregate_kv_for_support(const Tensor& k_q, const Tensor& v_q, const Tensor& k_s,
                                                   const Tensor& v_s);

/// Scaled dot-product attention split into `heads`; q [B, N, C], k/v [B, M, C].
/// Returns the head outputs concatenated back to [B, N, C] (before W_O).
Tensor multihead_attend(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads, Tensor* probs = nullptr);

/// Multi-head asymmetric-batched cross-attention.
///
/// Exactly one branch may carry a batch larger than one. The batched side's
/// K/V are mean-pooled (order-independent summation) before being appended to
/// the single side; the single side's K/V are repeated over the batch before
/// being prepended to the batched side. The query-branch block always comes
/// first in the concatenation. In the backbone the query has batch 1; in the
/// RoI stage the roles are reversed (proposals batched, support batch 1).
std::pair<TokenSequence, TokenSequence> multihead_cross_attention(const TokenSequence& x_q, const TokenSequence& x_s,
                                                                  const AttentionWeights& w, const LayerConfig& cfg,
                                                                  AttentionMode mode = AttentionMode::kCross,
                                                                  AttentionCapture* capture = nullptr);

/// Self-attention of one branch with spatially reduced K/V.
TokenSequence self_attention(const TokenSequence& x, const AttentionWeights& w, const LayerConfig& cfg,
                             Tensor* probs = nullptr);

/// x + fc2(gelu(fc1(LN(x)))), token-wise.
TokenSequence feed_forward(const TokenSequence& x, const FeedForwardWeights& w, const LayerConfig& cfg);

std::pair<TokenSequence, TokenSequence> cross_transformer_layer(const TokenSequence& x_q, const TokenSequence& x_s,
                                                                const LayerWeights& w, const LayerConfig& cfg,
                                                                AttentionMode mode = AttentionMode::kCross,
                                                                AttentionCapture* capture = nullptr);

TokenSequence self_transformer_layer(const TokenSequence& x, const LayerWeights& w, const LayerConfig& cfg,
                                     Tensor* probs = nullptr);

}  // namespace fct
