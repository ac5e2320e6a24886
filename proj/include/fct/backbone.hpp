#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fct/cross_attention.hpp"

namespace fct {

/// Hyperparameters of one cross-transformer stage.
struct StagePlan {
  int64_t channels = 16;
  int64_t layers = 1;
  int64_t heads = 2;
  int64_t sr_ratio = 1;
  int64_t merge_stride = 4;  // patch size for the first stage
  int64_t mlp_ratio = 4;
};

struct BackbonePlan {
  std::vector<StagePlan> stages{{16, 1, 2, 4, 4, 4}, {32, 1, 2, 2, 2, 4}, {64, 2, 4, 1, 2, 4}};
  int64_t query_size = 64;    // square query resolution
  int64_t support_size = 32;  // square support resolution
  SrMode sr_mode = SrMode::kAveragePool;
  NormPlacement placement = NormPlacement::kPreNorm;
  bool sr_norm = false;
  bool overlap_patches = false;
  bool use_branch_embedding = true;
  double eps = 1e-6;

  /// Throws ShapeError on inconsistent stage chains or input sizes.
  void validate() const;
  int64_t cumulative_stride(size_t stage) const;
  int64_t query_grid(size_t stage) const { return query_size / cumulative_stride(stage); }
  int64_t support_grid(size_t stage) const { return support_size / cumulative_stride(stage); }
  LayerConfig layer_config(size_t stage) const;
  int64_t out_channels() const { return stages.back().channels; }
  int64_t out_stride() const { return cumulative_stride(stages.size() - 1); }
};

/// Backbone parameters under "backbone.*". Position tables for both branches
/// are created here; branch embeddings are added separately because only
/// the two-branch model owns them.
void init_backbone_params(ParamStore& store, const BackbonePlan& plan, std::mt19937_64& rng);
/// Zero-initialized branch embeddings ("backbone.s{i}.branch").
void init_branch_embeddings(ParamStore& store, const BackbonePlan& plan);

struct BackboneOutput {
  TokenSequence query_feat;
  TokenSequence support_feat;
};

struct BackboneOptions {
  AttentionMode mode = AttentionMode::kCross;
  /// When set, receives the attention of the last layer of every stage.
  std::vector<AttentionCapture>* captures = nullptr;
};

/// Two-branch forward through all stages: per stage, patch embed (or merge),
/// add position/branch embeddings once, then the stage's cross-transformer
/// layers over both branches jointly, then a stage LayerNorm.
BackboneOutput backbone_forward(const Tensor& query_images, const Tensor& support_images, const ParamStore& params,
                                const BackbonePlan& plan, const BackboneOptions& options = {});

/// Single-branch forward with self-attention only, sharing every backbone
/// tensor with the two-branch model. Images must be at query resolution.
TokenSequence single_branch_forward(const Tensor& images, const ParamStore& params, const BackbonePlan& plan,
                                    std::vector<Tensor>* stage_probs = nullptr);

std::string stage_prefix(size_t stage);

}  // namespace fct
