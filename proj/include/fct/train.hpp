#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fct/backbone.hpp"
#include "fct/dataset.hpp"
#include "fct/detect_head.hpp"

namespace fct {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  BackbonePlan plan;
  HeadConfig head;
};

/// Hash of every field that changes parameter shapes or the forward pass.
uint64_t model_hash(const ModelConfig& config);

// ---- checkpoints -------------------------------------------------------------
struct Checkpoint {
  ParamStore params;
  int64_t step = 0;
  uint64_t config_hash = 0;
  /// Dataset class of each multi-class head column (column k+1 <-> class_ids[k]).
  std::vector<int> class_ids;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- optimizer ---------------------------------------------------------------
struct Schedule {
  int64_t steps = 100;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  double milestone = 0.6;  // fraction of `steps` after which lr is divided by 10
  double clip_norm = 1.0;  // <= 0 disables clipping
  int64_t b_support = 1;
  /// Fraction of episodes whose support class is absent from the query.
  double negative_episodes = 0.0;

  double lr_at(int64_t step) const;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates every parameter that has a gradient. Parameters without one are
  /// left untouched (including weight decay).
  void step(ParamStore& params, double lr, double weight_decay);
  int64_t steps() const { return t_; }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(ParamStore& params, double max_norm);

// ---- model assembly ----------------------------------------------------------
/// Step-1 parameters: backbone (without branch embeddings), RPN, stage 4 and a
/// multi-class head over `num_classes` classes.
ParamStore init_single_branch_model(const ModelConfig& config, int64_t num_classes, uint64_t seed);
/// Adds the two-branch-only tensors (branch embeddings, matcher).
void add_two_branch_params(ParamStore& params, const ModelConfig& config, uint64_t seed);
/// Full two-branch model from scratch.
ParamStore init_two_branch_model(const ModelConfig& config, uint64_t seed);
/// Step-2 initialization from a step-1 checkpoint: every backbone, RPN and
/// stage-4 tensor is copied, the multi-class head is dropped, and the branch
/// embeddings (zero) and matcher are created fresh.
ParamStore two_branch_from_single(const Checkpoint& step1, const ModelConfig& config, uint64_t seed);

struct TwoBranchPass {
  BackboneOutput features;
  RpnOutput rpn;
  std::vector<Box> proposals;
  MatchOutput match;
};

/// Query [1,H,W,3] and supports [B_s,S,S,3] through backbone, proposals,
/// stage 4 and matcher. `extra_proposals` (ground truth during training) are
/// appended after the RPN proposals.
TwoBranchPass two_branch_pass(const ParamStore& params, const ModelConfig& config, const Tensor& query,
                              const Tensor& support, std::span<const Box> extra_proposals = {},
                              std::vector<AttentionCapture>* captures = nullptr,
                              AttentionCapture* stage4_capture = nullptr);

struct SingleBranchPass {
  TokenSequence features;
  RpnOutput rpn;
  std::vector<Box> proposals;
  RcnnOutput rcnn;
};
SingleBranchPass single_branch_pass(const ParamStore& params, const ModelConfig& config, const Tensor& image,
                                    std::span<const Box> extra_proposals = {});

TwoBranchLosses two_branch_episode_loss(const ParamStore& params, const ModelConfig& config,
                                        const EpisodeBatch& episode);
SingleBranchLosses single_branch_image_loss(const ParamStore& params, const ModelConfig& config, const Tensor& image,
                                            std::span<const Box> gt, std::span<const int> labels);

// ---- training steps ----------------------------------------------------------
struct LossRecord {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Step 1: single-branch detector with a multi-class head over the base
/// classes, loss L_rpn + L_rcnn, one image per step.
TrainResult pretrain_single_branch(const DatasetIndex& base_data, const ModelConfig& config, const Schedule& schedule,
                                   uint64_t seed, const StepCallback& on_step = {});

/// Step 2: episodic two-branch training on base classes. `init` is the step-1
/// checkpoint; nullptr trains from scratch (ablation without pretraining).
TrainResult train_two_branch(const DatasetIndex& base_data, const Checkpoint* init, const ModelConfig& config,
                             const Schedule& schedule, uint64_t seed, const StepCallback& on_step = {});

/// Step 3: episodic fine-tuning on a set with exactly K boxes per base and
/// novel class. Throws DataError if any class has a different count.
TrainResult finetune_k_shot(const DatasetIndex& k_shot_data, int k, const Checkpoint& init, const ModelConfig& config,
                            const Schedule& schedule, uint64_t seed, const StepCallback& on_step = {});

/// Baseline: fine-tunes the step-1 single-branch model on the K-shot set with
/// a classifier widened to every base and novel class.
TrainResult finetune_single_branch(const DatasetIndex& k_shot_data, int k, const Checkpoint& init,
                                   const ModelConfig& config, const Schedule& schedule, uint64_t seed,
                                   const StepCallback& on_step = {});

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path);

// ---- inference ---------------------------------------------------------------
/// Runs every test image against each class in `classes`, with up to
/// `b_support` support crops of that class taken from `support_set`.
std::vector<Detection> detect_two_branch(const ParamStore& params, const ModelConfig& config,
                                         const DatasetIndex& test, const DatasetIndex& support_set,
                                         std::span<const int> classes, int64_t b_support,
                                         const PostprocessConfig& post = {});

/// Multi-class detections of a single-branch checkpoint on every test image.
std::vector<Detection> detect_single_branch(const Checkpoint& checkpoint, const ModelConfig& config,
                                            const DatasetIndex& test, const PostprocessConfig& post = {});

/// `image_id class_id score x1 y1 x2 y2` per line.
void write_detections(std::span<const Detection> detections, const std::filesystem::path& path);

}  // namespace fct
