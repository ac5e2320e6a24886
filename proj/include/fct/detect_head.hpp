#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fct/boxes.hpp"
#include "fct/cross_attention.hpp"

namespace fct {

struct HeadConfig {
  AnchorConfig anchors;
  int64_t rpn_hidden = 64;
  int64_t roi_size = 7;
  int64_t sampling_ratio = 2;
  int64_t proposals = 16;  // B_p
  double rpn_nms_iou = 0.7;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  double head_pos_iou = 0.5;
  int64_t stage4_layers = 1;
  int64_t stage4_heads = 4;
  int64_t stage4_mlp_ratio = 4;
  int64_t match_hidden = 128;
  double smooth_l1_beta = 1.0 / 9.0;
  int64_t gt_jitter = 4;  // training-only extra proposals per ground-truth box

  LayerConfig stage4_config(int64_t channels, double eps = 1e-6) const;
};

struct Proposal {
  Box box;
  double objectness = 0.0;
};

struct DetectionResult {
  Box box;
  double score = 0.0;
  int class_id = -1;
};

// ---- parameters --------------------------------------------------------
void init_rpn_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng);
void init_stage4_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng);
/// Zero-initialized stage-4 branch embedding ("head.s4.branch").
void init_stage4_branch_embedding(ParamStore& store, int64_t channels);
void init_matcher_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng);
void init_rcnn_params(ParamStore& store, int64_t channels, int64_t num_classes, const HeadConfig& cfg,
                      std::mt19937_64& rng);

// ---- proposals ---------------------------------------------------------
struct RpnOutput {
  Tensor logits;  // [A_total]
  Tensor deltas;  // [A_total, 4]
  std::vector<Box> anchors;
};

/// Support prototype: mean over support images and tokens, [1, C].
Tensor support_prototype(const TokenSequence& support_feat);

/// Objectness and anchor deltas per location and anchor. With a prototype
/// the query tokens are modulated elementwise (query token * prototype)
/// before the hidden projection, which makes proposals class-specific.
RpnOutput rpn_forward(const TokenSequence& query_feat, const Tensor* prototype, const ParamStore& params,
                      const HeadConfig& cfg, int64_t feature_stride);

/// Decodes, clips, drops boxes under 1 px, applies NMS and keeps `top_k`.
std::vector<Proposal> proposals_from_rpn(const RpnOutput& rpn, double image_w, double image_h, int64_t top_k,
                                         double nms_iou);

std::vector<Proposal> generate_proposals(const TokenSequence& query_feat, const TokenSequence& support_feat,
                                         const ParamStore& params, const HeadConfig& cfg, int64_t feature_stride,
                                         double image_size, int64_t top_k);

// ---- RoI features ------------------------------------------------------
/// Bilinear RoIAlign (half-pixel aligned). `boxes` are in image pixels;
/// `batch_index[k]` selects the feature map of box k. Returns
/// [K, roi_size, roi_size, C]. Boxes below 1 px^2 are rejected.
Tensor roi_align(const TokenSequence& feat, std::span<const Box> boxes, std::span<const int64_t> batch_index,
                 int64_t roi_size, int64_t sampling_ratio, double feature_stride);
Tensor roi_align(const TokenSequence& feat, std::span<const Box> boxes, int64_t roi_size, int64_t sampling_ratio,
                 double feature_stride);

/// RoI features of whole support images averaged over the support batch,
/// [1, roi_size, roi_size, C].
Tensor support_roi_features(const TokenSequence& support_feat, double support_size, const HeadConfig& cfg,
                            double feature_stride);

struct Stage4Output {
  TokenSequence proposals;  // g_p [B_p, R*R, C]
  TokenSequence support;    // g_s [1, R*R, C]
};

/// Cross-transformer RoI stage with the asymmetric roles reversed: the
/// proposal branch is batched and the support branch has batch 1.
Stage4Output stage4_roi_extract(const Tensor& f_p, const Tensor& f_s_avg, const ParamStore& params,
                                const HeadConfig& cfg, double eps = 1e-6, AttentionMode mode = AttentionMode::kCross,
                                AttentionCapture* capture = nullptr);
/// Single-branch variant: proposals attend to themselves only.
TokenSequence stage4_single(const Tensor& f_p, const ParamStore& params, const HeadConfig& cfg, double eps = 1e-6);

// ---- matching / classification ------------------------------------------
struct MatchOutput {
  Tensor logits;  // [B_p]
  Tensor deltas;  // [B_p, 4]
};

/// Pools each RoI sequence over tokens, concatenates [proposal, support]
/// and maps through a two-layer MLP to one logit and four box deltas.
MatchOutput match_pairs(const TokenSequence& g_p, const TokenSequence& g_s, const ParamStore& params);

struct RcnnOutput {
  Tensor cls_logits;  // [B_p, num_classes + 1]; column 0 is background
  Tensor deltas;      // [B_p, 4]
};
RcnnOutput rcnn_forward(const TokenSequence& g_p, const ParamStore& params);

// ---- losses ------------------------------------------------------------
struct AnchorTargets {
  std::vector<int> labels;  // 1 positive, 0 negative, -1 ignored
  std::vector<BoxDelta> deltas;
};
AnchorTargets rpn_targets(std::span<const Box> anchors, std::span<const Box> gt, double pos_iou, double neg_iou);

/// Binary objectness cross-entropy over non-ignored anchors plus smooth-L1
/// on positive anchor deltas (averaged over positives; zero without any).
Tensor rpn_loss(const RpnOutput& rpn, std::span<const Box> gt, const HeadConfig& cfg);

/// Proposal-level assignment: index of the best ground-truth box with
/// IoU >= threshold, or -1.
std::vector<int64_t> assign_proposals(std::span<const Box> proposals, std::span<const Box> gt, double pos_iou);

Tensor matching_loss(const MatchOutput& match, std::span<const Box> proposals, std::span<const Box> gt,
                     const HeadConfig& cfg);

struct TwoBranchLosses {
  Tensor matching;
  Tensor att_rpn;
  Tensor total;  // att_rpn + matching
};
TwoBranchLosses head_losses(const MatchOutput& match, const RpnOutput& rpn, std::span<const Box> proposals,
                            std::span<const Box> gt, const HeadConfig& cfg);

struct SingleBranchLosses {
  Tensor rcnn;
  Tensor rpn;
  Tensor total;  // rpn + rcnn
};
/// `gt_labels` are head class indices in [1, num_classes]; 0 is background.
SingleBranchLosses single_branch_losses(const RcnnOutput& rcnn, const RpnOutput& rpn, std::span<const Box> proposals,
                                        std::span<const Box> gt, std::span<const int> gt_labels,
                                        const HeadConfig& cfg);

// ---- inference -----------------------------------------------------------
struct PostprocessConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int64_t max_detections = 20;
};

/// Sigmoid match scores, refined and clipped boxes, NMS, descending scores.
std::vector<DetectionResult> postprocess(const MatchOutput& match, std::span<const Box> proposals, int class_id,
                                         double image_w, double image_h, const PostprocessConfig& cfg = {});

/// Softmax class scores with per-class NMS. `class_ids[k]` is the dataset
/// class of head column k+1.
std::vector<DetectionResult> postprocess_multiclass(const RcnnOutput& rcnn, std::span<const Box> proposals,
                                                    std::span<const int> class_ids, double image_w, double image_h,
                                                    const PostprocessConfig& cfg = {});

}  // namespace fct
