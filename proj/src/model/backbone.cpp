#include "fct/backbone.hpp"

namespace fct {

std::string stage_prefix(size_t stage) { return "backbone.s" + std::to_string(stage + 1); }

void BackbonePlan::validate() const {
  if (stages.empty()) throw ShapeError("backbone plan has no stages");
  int64_t prev_c = 0;
  for (size_t i = 0; i < stages.size(); ++i) {
    const StagePlan& s = stages[i];
    if (s.channels < 1 || s.heads < 1 || s.channels % s.heads != 0) {
      throw ShapeError("stage " + std::to_string(i + 1) + ": channels must be divisible by heads");
    }
    if (s.channels < prev_c) throw ShapeError("stage channels must be non-decreasing");
    if (s.layers < 0 || s.merge_stride < 1 || s.sr_ratio < 1) {
      throw ShapeError("stage " + std::to_string(i + 1) + ": invalid layer count, stride or sr ratio");
    }
    prev_c = s.channels;
    const int64_t cs = cumulative_stride(i);
    for (int64_t size : {query_size, support_size}) {
      if (size % cs != 0) {
        throw ShapeError("input size " + std::to_string(size) + " not divisible by cumulative stride " +
                         std::to_string(cs) + " at stage " + std::to_string(i + 1));
      }
      if ((size / cs) % s.sr_ratio != 0) {
        throw ShapeError("stage " + std::to_string(i + 1) + " grid " + std::to_string(size / cs) +
                         " not divisible by sr ratio " + std::to_string(s.sr_ratio));
      }
    }
  }
}

int64_t BackbonePlan::cumulative_stride(size_t stage) const {
  int64_t s = 1;
  for (size_t i = 0; i <= stage && i < stages.size(); ++i) s *= stages[i].merge_stride;
  return s;
}

LayerConfig BackbonePlan::layer_config(size_t stage) const {
  const StagePlan& s = stages.at(stage);
  LayerConfig cfg;
  cfg.channels = s.channels;
  cfg.heads = s.heads;
  cfg.sr_ratio = s.sr_ratio;
  cfg.sr_mode = sr_mode;
  cfg.mlp_ratio = s.mlp_ratio;
  cfg.eps = eps;
  cfg.sr_norm = sr_norm;
  cfg.placement = placement;
  return cfg;
}

void init_backbone_params(ParamStore& store, const BackbonePlan& plan, std::mt19937_64& rng) {
  plan.validate();
  int64_t in_c = 3;
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    const StagePlan& s = plan.stages[i];
    const std::string p = stage_prefix(i);
    init_linear(store, p + ".embed", patch_input_dim(s.merge_stride, in_c, plan.overlap_patches), s.channels, rng);
    const int64_t nq = plan.query_grid(i) * plan.query_grid(i);
    const int64_t ns = plan.support_grid(i) * plan.support_grid(i);
    store.add(p + ".pos_q", Tensor::randn({nq, s.channels}, rng, 0.02));
    store.add(p + ".pos_s", Tensor::randn({ns, s.channels}, rng, 0.02));
    const LayerConfig cfg = plan.layer_config(i);
    for (int64_t l = 0; l < s.layers; ++l) init_layer_params(store, p + ".l" + std::to_string(l), cfg, rng);
    init_layer_norm(store, p + ".norm", s.channels);
    in_c = s.channels;
  }
}

void init_branch_embeddings(ParamStore& store, const BackbonePlan& plan) {
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    store.add(stage_prefix(i) + ".branch", Tensor::zeros({2, plan.stages[i].channels}));
  }
}

namespace {

TokenSequence embed_stage(const Tensor& images, const TokenSequence* prev, size_t stage, const ParamStore& params,
                          const BackbonePlan& plan, Branch branch) {
  const LinearWeights w = linear_weights(params, stage_prefix(stage) + ".embed");
  const int64_t stride = plan.stages[stage].merge_stride;
  if (stage == 0) return patch_embed(images, stride, w, branch, plan.overlap_patches);
  return patch_merge(*prev, stride, w, plan.overlap_patches);
}

TokenSequence stage_norm(const TokenSequence& x, size_t stage, const ParamStore& params, double eps) {
  const std::string p = stage_prefix(stage) + ".norm";
  return {layer_norm(x.tokens, params.get(p + ".g"), params.get(p + ".b"), eps), x.grid_h, x.grid_w, x.branch};
}

void check_images(const Tensor& images, int64_t size, const char* what) {
  if (images.dim() != 4 || images.size(1) != size || images.size(2) != size || images.size(3) != 3) {
    throw ShapeError(std::string(what) + " images must be [B, " + std::to_string(size) + ", " + std::to_string(size) +
                     ", 3], got " + shape_str(images.shape()));
  }
}

}  // namespace

BackboneOutput backbone_forward(const Tensor& query_images, const Tensor& support_images, const ParamStore& params,
                                const BackbonePlan& plan, const BackboneOptions& options) {
  plan.validate();
  check_images(query_images, plan.query_size, "query");
  check_images(support_images, plan.support_size, "support");
  if (query_images.size(0) != 1) throw ShapeError("backbone expects exactly one query image");
  if (options.captures) options.captures->assign(plan.stages.size(), AttentionCapture{});

  TokenSequence xq, xs;
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    const std::string p = stage_prefix(i);
    xq = embed_stage(query_images, &xq, i, params, plan, Branch::kQuery);
    xs = embed_stage(support_images, &xs, i, params, plan, Branch::kSupport);
    EmbeddingTable table{params.get(p + ".pos_q"), params.get(p + ".pos_s"), Tensor()};
    const bool use_branch = plan.use_branch_embedding && params.contains(p + ".branch");
    if (use_branch) table.branch = params.get(p + ".branch");
    xq = add_embeddings(xq, table, use_branch);
    xs = add_embeddings(xs, table, use_branch);
    const LayerConfig cfg = plan.layer_config(i);
    for (int64_t l = 0; l < plan.stages[i].layers; ++l) {
      const LayerWeights w = layer_weights(params, p + ".l" + std::to_string(l), cfg);
      AttentionCapture* cap =
          (options.captures && l + 1 == plan.stages[i].layers) ? &(*options.captures)[i] : nullptr;
      std::tie(xq, xs) = cross_transformer_layer(xq, xs, w, cfg, options.mode, cap);
    }
    xq = stage_norm(xq, i, params, plan.eps);
    xs = stage_norm(xs, i, params, plan.eps);
  }
  return {xq, xs};
}

TokenSequence single_branch_forward(const Tensor& images, const ParamStore& params, const BackbonePlan& plan,
                                    std::vector<Tensor>* stage_probs) {
  plan.validate();
  check_images(images, plan.query_size, "input");
  if (stage_probs) stage_probs->assign(plan.stages.size(), Tensor());
  TokenSequence x;
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    const std::string p = stage_prefix(i);
    x = embed_stage(images, &x, i, params, plan, Branch::kQuery);
    x = add_embeddings(x, EmbeddingTable{params.get(p + ".pos_q"), params.get(p + ".pos_s"), Tensor()}, false);
    const LayerConfig cfg = plan.layer_config(i);
    for (int64_t l = 0; l < plan.stages[i].layers; ++l) {
      const LayerWeights w = layer_weights(params, p + ".l" + std::to_string(l), cfg);
      Tensor* probs = (stage_probs && l + 1 == plan.stages[i].layers) ? &(*stage_probs)[i] : nullptr;
      x = self_transformer_layer(x, w, cfg, probs);
    }
    x = stage_norm(x, i, params, plan.eps);
  }
  return x;
}

}  // namespace fct
