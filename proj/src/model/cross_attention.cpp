#include "fct/cross_attention.hpp"

#include <cmath>

namespace fct {

void LayerConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ShapeError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  }
  if (sr_ratio < 1) throw ShapeError("sr_ratio must be >= 1");
  if (mlp_ratio < 1) throw ShapeError("mlp_ratio must be >= 1");
}

void init_layer_params(ParamStore& store, const std::string& prefix, const LayerConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int64_t c = cfg.channels;
  init_layer_norm(store, prefix + ".ln1", c);
  init_linear(store, prefix + ".attn.q", c, c, rng);
  init_linear(store, prefix + ".attn.k", c, c, rng);
  init_linear(store, prefix + ".attn.v", c, c, rng);
  init_linear(store, prefix + ".attn.o", c, c, rng);
  if (cfg.sr_ratio > 1 && cfg.sr_mode == SrMode::kStridedProjection) {
    init_linear(store, prefix + ".attn.sr", cfg.sr_ratio * cfg.sr_ratio * c, c, rng);
  }
  if (cfg.sr_ratio > 1 && cfg.sr_norm) init_layer_norm(store, prefix + ".attn.sr_norm", c);
  init_layer_norm(store, prefix + ".ffn.ln", c);
  init_linear(store, prefix + ".ffn.fc1", c, c * cfg.mlp_ratio, rng);
  init_linear(store, prefix + ".ffn.fc2", c * cfg.mlp_ratio, c, rng);
}

LayerWeights layer_weights(const ParamStore& store, const std::string& prefix, const LayerConfig& cfg) {
  LayerWeights w;
  w.ln1_gamma = store.get(prefix + ".ln1.g");
  w.ln1_beta = store.get(prefix + ".ln1.b");
  w.attn.q = linear_weights(store, prefix + ".attn.q");
  w.attn.k = linear_weights(store, prefix + ".attn.k");
  w.attn.v = linear_weights(store, prefix + ".attn.v");
  w.attn.o = linear_weights(store, prefix + ".attn.o");
  if (cfg.sr_ratio > 1 && cfg.sr_mode == SrMode::kStridedProjection) {
    w.attn.sr = linear_weights(store, prefix + ".attn.sr");
  }
  if (cfg.sr_ratio > 1 && cfg.sr_norm) {
    w.attn.sr_norm_gamma = store.get(prefix + ".attn.sr_norm.g");
    w.attn.sr_norm_beta = store.get(prefix + ".attn.sr_norm.b");
  }
  w.ffn.ln_gamma = store.get(prefix + ".ffn.ln.g");
  w.ffn.ln_beta = store.get(prefix + ".ffn.ln.b");
  w.ffn.fc1 = linear_weights(store, prefix + ".ffn.fc1");
  w.ffn.fc2 = linear_weights(store, prefix + ".ffn.fc2");
  return w;
}

TokenSequence spatial_reduce(const TokenSequence& x, const LayerConfig& cfg, const AttentionWeights& w) {
  x.validate();
  const int64_t r = cfg.sr_ratio;
  if (r == 1) return x;
  if (x.grid_h % r != 0 || x.grid_w % r != 0) {
    throw ShapeError("token grid " + std::to_string(x.grid_h) + "x" + std::to_string(x.grid_w) +
                     " not divisible by sr_ratio " + std::to_string(r));
  }
  TokenSequence out;
  if (cfg.sr_mode == SrMode::kAveragePool) {
    out = from_grid(avg_pool2d(to_grid(x), r, r), x.branch);
  } else {
    out = patch_merge(x, r, w.sr);
  }
  if (cfg.sr_norm) out.tokens = layer_norm(out.tokens, w.sr_norm_gamma, w.sr_norm_beta, cfg.eps);
  return out;
}

QkvSet project_qkv(const TokenSequence& x_q, const TokenSequence& x_s, const AttentionWeights& w,
                   const LayerConfig& cfg) {
  if (x_q.channels() != cfg.channels || x_s.channels() != cfg.channels) {
    throw ShapeError("channel mismatch: query " + shape_str(x_q.tokens.shape()) + ", support " +
                     shape_str(x_s.tokens.shape()) + ", layer " + std::to_string(cfg.channels));
  }
  const Tensor rq = spatial_reduce(x_q, cfg, w).tokens;
  const Tensor rs = spatial_reduce(x_s, cfg, w).tokens;
  return {linear(x_q.tokens, w.q), linear(rq, w.k), linear(rq, w.v),
          linear(x_s.tokens, w.q), linear(rs, w.k), linear(rs, w.v)};
}

namespace {

void check_kv_pair(const Tensor& k_q, const Tensor& k_s) {
  if (k_q.dim() != 3 || k_s.dim() != 3 || k_q.size(2) != k_s.size(2)) {
    throw ShapeError("K/V channel mismatch between branches: " + shape_str(k_q.shape()) + " vs " +
                     shape_str(k_s.shape()));
  }
}

Tensor pool_batch(const Tensor& x) { return mean(x, 0, true, Summation::kSorted); }

}  // namespace

std::pair<Tensor, Tensor> aggregate_kv_for_query(const Tensor& k_q, const Tensor& v_q, const Tensor& k_s,
                                                 const Tensor& v_s) {
  check_kv_pair(k_q, k_s);
  check_kv_pair(v_q, v_s);
  if (k_q.size(0) != 1) throw ShapeError("query K/V must have batch 1, got " + shape_str(k_q.shape()));
  return {concat({k_q, pool_batch(k_s)}, 1), concat({v_q, pool_batch(v_s)}, 1)};
}

std::pair<Tensor, Tensor> aggregate_kv_for_support(const Tensor& k_q, const Tensor& v_q, const Tensor& k_s,
                                                   const Tensor& v_s) {
  check_kv_pair(k_q, k_s);
  check_kv_pair(v_q, v_s);
  if (k_q.size(0) != 1) throw ShapeError("query K/V must have batch 1, got " + shape_str(k_q.shape()));
  const int64_t b = k_s.size(0);
  return {concat({repeat(k_q, b, 0), k_s}, 1), concat({repeat(v_q, b, 0), v_s}, 1)};
}

Tensor multihead_attend(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads, Tensor* probs) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3 || k.shape() != v.shape() || q.size(0) != k.size(0) ||
      q.size(2) != k.size(2)) {
    throw ShapeError("attention shape mismatch: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  const int64_t b = q.size(0), n = q.size(1), m = k.size(1), c = q.size(2);
  if (heads < 1 || c % heads != 0) throw ShapeError("channels not divisible by heads");
  const int64_t d = c / heads;
  const Tensor qh = permute(reshape(q, {b, n, heads, d}), {0, 2, 1, 3});   // [B, h, N, d]
  const Tensor kt = permute(reshape(k, {b, m, heads, d}), {0, 2, 3, 1});   // [B, h, d, M]
  const Tensor vh = permute(reshape(v, {b, m, heads, d}), {0, 2, 1, 3});   // [B, h, M, d]
  const Tensor scores = scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor p = softmax(scores, -1);
  if (probs) *probs = p;
  const Tensor out = matmul(p, vh);  // [B, h, N, d]
  return reshape(permute(out, {0, 2, 1, 3}), {b, n, c});
}

std::pair<TokenSequence, TokenSequence> multihead_cross_attention(const TokenSequence& x_q, const TokenSequence& x_s,
                                                                  const AttentionWeights& w, const LayerConfig& cfg,
                                                                  AttentionMode mode, AttentionCapture* capture) {
  cfg.validate();
  x_q.validate();
  x_s.validate();
  const QkvSet qkv = project_qkv(x_q, x_s, w, cfg);
  const int64_t bq = x_q.batch(), bs = x_s.batch();

  Tensor kq_cat, vq_cat, ks_cat, vs_cat;
  if (mode == AttentionMode::kSelf) {
    kq_cat = qkv.k_q;
    vq_cat = qkv.v_q;
    ks_cat = qkv.k_s;
    vs_cat = qkv.v_s;
  } else if (bq == 1) {
    std::tie(kq_cat, vq_cat) = aggregate_kv_for_query(qkv.k_q, qkv.v_q, qkv.k_s, qkv.v_s);
    std::tie(ks_cat, vs_cat) = aggregate_kv_for_support(qkv.k_q, qkv.v_q, qkv.k_s, qkv.v_s);
  } else if (bs == 1) {
    // Mirrored roles: the query side is batched, the support side is single.
    kq_cat = concat({qkv.k_q, repeat(qkv.k_s, bq, 0)}, 1);
    vq_cat = concat({qkv.v_q, repeat(qkv.v_s, bq, 0)}, 1);
    ks_cat = concat({pool_batch(qkv.k_q), qkv.k_s}, 1);
    vs_cat = concat({pool_batch(qkv.v_q), qkv.v_s}, 1);
  } else {
    throw ShapeError("asymmetric batching needs one branch with batch 1, got " + std::to_string(bq) + " and " +
                     std::to_string(bs));
  }

  Tensor pq, ps;
  const Tensor hq = multihead_attend(qkv.q_q, kq_cat, vq_cat, cfg.heads, capture ? &pq : nullptr);
  const Tensor hs = multihead_attend(qkv.q_s, ks_cat, vs_cat, cfg.heads, capture ? &ps : nullptr);
  if (capture) {
    capture->query_probs = pq;
    capture->support_probs = ps;
    capture->query_kv_tokens = qkv.k_q.size(1);
    capture->support_kv_tokens = qkv.k_s.size(1);
  }
  return {TokenSequence{linear(hq, w.o), x_q.grid_h, x_q.grid_w, x_q.branch},
          TokenSequence{linear(hs, w.o), x_s.grid_h, x_s.grid_w, x_s.branch}};
}

TokenSequence self_attention(const TokenSequence& x, const AttentionWeights& w, const LayerConfig& cfg, Tensor* probs) {
  cfg.validate();
  x.validate();
  if (x.channels() != cfg.channels) throw ShapeError("channel mismatch in self_attention");
  const Tensor r = spatial_reduce(x, cfg, w).tokens;
  const Tensor h = multihead_attend(linear(x.tokens, w.q), linear(r, w.k), linear(r, w.v), cfg.heads, probs);
  return {linear(h, w.o), x.grid_h, x.grid_w, x.branch};
}

namespace {

Tensor mlp(const Tensor& x, const FeedForwardWeights& w) { return linear(gelu(linear(x, w.fc1)), w.fc2); }

TokenSequence with_tokens(const TokenSequence& like, Tensor tokens) {
  return {std::move(tokens), like.grid_h, like.grid_w, like.branch};
}

TokenSequence ffn_block(const TokenSequence& x, const FeedForwardWeights& w, const LayerConfig& cfg) {
  if (cfg.placement == NormPlacement::kPostNorm) {
    return with_tokens(x, layer_norm(add(x.tokens, mlp(x.tokens, w)), w.ln_gamma, w.ln_beta, cfg.eps));
  }
  return feed_forward(x, w, cfg);
}

}  // namespace

TokenSequence feed_forward(const TokenSequence& x, const FeedForwardWeights& w, const LayerConfig& cfg) {
  x.validate();
  const Tensor normed = layer_norm(x.tokens, w.ln_gamma, w.ln_beta, cfg.eps);
  return with_tokens(x, add(x.tokens, mlp(normed, w)));
}

std::pair<TokenSequence, TokenSequence> cross_transformer_layer(const TokenSequence& x_q, const TokenSequence& x_s,
                                                                const LayerWeights& w, const LayerConfig& cfg,
                                                                AttentionMode mode, AttentionCapture* capture) {
  TokenSequence q1, s1;
  if (cfg.placement == NormPlacement::kPreNorm) {
    const TokenSequence nq = with_tokens(x_q, layer_norm(x_q.tokens, w.ln1_gamma, w.ln1_beta, cfg.eps));
    const TokenSequence ns = with_tokens(x_s, layer_norm(x_s.tokens, w.ln1_gamma, w.ln1_beta, cfg.eps));
    auto [aq, as] = multihead_cross_attention(nq, ns, w.attn, cfg, mode, capture);
    q1 = with_tokens(x_q, add(x_q.tokens, aq.tokens));
    s1 = with_tokens(x_s, add(x_s.tokens, as.tokens));
  } else {
    auto [aq, as] = multihead_cross_attention(x_q, x_s, w.attn, cfg, mode, capture);
    q1 = with_tokens(x_q, layer_norm(add(x_q.tokens, aq.tokens), w.ln1_gamma, w.ln1_beta, cfg.eps));
    s1 = with_tokens(x_s, layer_norm(add(x_s.tokens, as.tokens), w.ln1_gamma, w.ln1_beta, cfg.eps));
  }
  return {ffn_block(q1, w.ffn, cfg), ffn_block(s1, w.ffn, cfg)};
}

TokenSequence self_transformer_layer(const TokenSequence& x, const LayerWeights& w, const LayerConfig& cfg,
                                     Tensor* probs) {
  TokenSequence x1;
  if (cfg.placement == NormPlacement::kPreNorm) {
    const TokenSequence n = with_tokens(x, layer_norm(x.tokens, w.ln1_gamma, w.ln1_beta, cfg.eps));
    x1 = with_tokens(x, add(x.tokens, self_attention(n, w.attn, cfg, probs).tokens));
  } else {
    x1 = with_tokens(x, layer_norm(add(x.tokens, self_attention(x, w.attn, cfg, probs).tokens), w.ln1_gamma,
                                   w.ln1_beta, cfg.eps));
  }
  return ffn_block(x1, w.ffn, cfg);
}

}  // namespace fct
