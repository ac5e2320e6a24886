#include <sstream>

#include "fct/ops.hpp"
#include "fct/train.hpp"

namespace fct {

uint64_t model_hash(const ModelConfig& config) {
  std::ostringstream s;
  const BackbonePlan& p = config.plan;
  s << p.query_size << ',' << p.support_size << ',' << static_cast<int>(p.sr_mode) << ','
    << static_cast<int>(p.placement) << ',' << p.sr_norm << ',' << p.overlap_patches << ';';
  for (const StagePlan& st : p.stages) {
    s << st.channels << ',' << st.layers << ',' << st.heads << ',' << st.sr_ratio << ',' << st.merge_stride << ','
      << st.mlp_ratio << ';';
  }
  const HeadConfig& h = config.head;
  s << h.anchors.size << ',';
  for (double r : h.anchors.ratios) s << r << ',';
  s << h.rpn_hidden << ',' << h.roi_size << ',' << h.stage4_layers << ',' << h.stage4_heads << ','
    << h.stage4_mlp_ratio << ',' << h.match_hidden;
  // FNV-1a, 64 bit.
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : s.str()) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

ParamStore init_single_branch_model(const ModelConfig& config, int64_t num_classes, uint64_t seed) {
  config.plan.validate();
  std::mt19937_64 rng(seed);
  ParamStore store;
  const int64_t c = config.plan.out_channels();
  init_backbone_params(store, config.plan, rng);
  init_rpn_params(store, c, config.head, rng);
  init_stage4_params(store, c, config.head, rng);
  init_rcnn_params(store, c, num_classes, config.head, rng);
  return store;
}

void add_two_branch_params(ParamStore& params, const ModelConfig& config, uint64_t seed) {
  // Separate stream so the shared tensors do not depend on this call.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const int64_t c = config.plan.out_channels();
  if (config.plan.use_branch_embedding) {
    init_branch_embeddings(params, config.plan);
    init_stage4_branch_embedding(params, c);
  }
  init_matcher_params(params, c, config.head, rng);
}

ParamStore init_two_branch_model(const ModelConfig& config, uint64_t seed) {
  ParamStore store = init_single_branch_model(config, 1, seed);
  for (const std::string& name : store.names()) {
    if (name.rfind("head.rcnn.", 0) == 0) store.erase(name);
  }
  add_two_branch_params(store, config, seed);
  return store;
}

ParamStore two_branch_from_single(const Checkpoint& step1, const ModelConfig& config, uint64_t seed) {
  if (step1.config_hash != model_hash(config)) {
    throw ShapeError("step-1 checkpoint was trained with a different model configuration");
  }
  // Shapes of the fresh model define what the checkpoint must provide.
  ParamStore reference = init_two_branch_model(config, seed);
  ParamStore store;
  for (const auto& [name, value] : step1.params.items()) {
    if (name.rfind("head.rcnn.", 0) == 0) continue;
    if (!reference.contains(name)) throw ShapeError("unexpected tensor in step-1 checkpoint: " + name);
    if (reference.get(name).shape() != value.shape()) {
      throw ShapeError("shape mismatch for " + name + ": " + shape_str(value.shape()) + " vs " +
                       shape_str(reference.get(name).shape()));
    }
    store.add(name, value.detach().clone());
  }
  for (const std::string& name : reference.names()) {
    if (store.contains(name)) continue;
    const bool fresh = name.find(".branch") != std::string::npos || name.rfind("head.match.", 0) == 0;
    if (!fresh) throw ShapeError("step-1 checkpoint lacks " + name);
  }
  add_two_branch_params(store, config, seed);
  return store;
}

namespace {

std::vector<Box> with_extras(std::vector<Proposal> proposals, std::span<const Box> extra) {
  std::vector<Box> out;
  out.reserve(proposals.size() + extra.size());
  for (const Proposal& p : proposals) out.push_back(p.box);
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

}  // namespace

TwoBranchPass two_branch_pass(const ParamStore& params, const ModelConfig& config, const Tensor& query,
                              const Tensor& support, std::span<const Box> extra_proposals,
                              std::vector<AttentionCapture>* captures, AttentionCapture* stage4_capture) {
  const BackbonePlan& plan = config.plan;
  const HeadConfig& head = config.head;
  TwoBranchPass out;
  BackboneOptions options;
  options.captures = captures;
  out.features = backbone_forward(query, support, params, plan, options);
  const Tensor prototype = support_prototype(out.features.support_feat);
  const double stride = static_cast<double>(plan.out_stride());
  out.rpn = rpn_forward(out.features.query_feat, &prototype, params, head, plan.out_stride());
  const auto size = static_cast<double>(plan.query_size);
  out.proposals = with_extras(proposals_from_rpn(out.rpn, size, size, head.proposals, head.rpn_nms_iou),
                              extra_proposals);
  if (out.proposals.empty()) return out;
  const Tensor f_p = roi_align(out.features.query_feat, out.proposals, head.roi_size, head.sampling_ratio, stride);
  const Tensor f_s = support_roi_features(out.features.support_feat, static_cast<double>(plan.support_size), head,
                                          stride);
  const Stage4Output s4 = stage4_roi_extract(f_p, f_s, params, head, plan.eps, AttentionMode::kCross, stage4_capture);
  out.match = match_pairs(s4.proposals, s4.support, params);
  return out;
}

SingleBranchPass single_branch_pass(const ParamStore& params, const ModelConfig& config, const Tensor& image,
                                    std::span<const Box> extra_proposals) {
  const BackbonePlan& plan = config.plan;
  const HeadConfig& head = config.head;
  SingleBranchPass out;
  out.features = single_branch_forward(image, params, plan);
  out.rpn = rpn_forward(out.features, nullptr, params, head, plan.out_stride());
  const auto size = static_cast<double>(plan.query_size);
  out.proposals = with_extras(proposals_from_rpn(out.rpn, size, size, head.proposals, head.rpn_nms_iou),
                              extra_proposals);
  if (out.proposals.empty()) return out;
  const Tensor f_p = roi_align(out.features, out.proposals, head.roi_size, head.sampling_ratio,
                               static_cast<double>(plan.out_stride()));
  out.rcnn = rcnn_forward(stage4_single(f_p, params, head, plan.eps), params);
  return out;
}

TwoBranchLosses two_branch_episode_loss(const ParamStore& params, const ModelConfig& config,
                                        const EpisodeBatch& episode) {
  const auto size = static_cast<double>(config.plan.query_size);
  std::vector<Box> extra(episode.gt.begin(), episode.gt.end());
  const auto jitter = jitter_boxes(episode.gt, config.head.gt_jitter, size, size);
  extra.insert(extra.end(), jitter.begin(), jitter.end());
  const TwoBranchPass pass = two_branch_pass(params, config, episode.query, episode.support, extra);
  if (pass.proposals.empty()) {
    TwoBranchLosses out;
    out.att_rpn = rpn_loss(pass.rpn, episode.gt, config.head);
    out.matching = Tensor::scalar(0.0);
    out.total = out.att_rpn;
    return out;
  }
  return head_losses(pass.match, pass.rpn, pass.proposals, episode.gt, config.head);
}

SingleBranchLosses single_branch_image_loss(const ParamStore& params, const ModelConfig& config, const Tensor& image,
                                            std::span<const Box> gt, std::span<const int> labels) {
  const auto size = static_cast<double>(config.plan.query_size);
  std::vector<Box> extra(gt.begin(), gt.end());
  const auto jitter = jitter_boxes(gt, config.head.gt_jitter, size, size);
  extra.insert(extra.end(), jitter.begin(), jitter.end());
  const SingleBranchPass pass = single_branch_pass(params, config, image, extra);
  if (pass.proposals.empty()) {
    SingleBranchLosses out;
    out.rpn = rpn_loss(pass.rpn, gt, config.head);
    out.rcnn = Tensor::scalar(0.0);
    out.total = out.rpn;
    return out;
  }
  return single_branch_losses(pass.rcnn, pass.rpn, pass.proposals, gt, labels, config.head);
}

}  // namespace fct
