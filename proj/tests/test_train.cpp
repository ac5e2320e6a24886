#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <unistd.h>

#include "fct/config.hpp"
#include "fct/train.hpp"
#include "grad_check.hpp"

namespace fct {
namespace {

using testing::jitter_params;
using testing::random_tensor;

ModelConfig tiny_model() {
  ModelConfig m;
  m.plan.stages = {{8, 1, 2, 2, 4, 2}, {16, 1, 2, 1, 2, 2}};
  m.plan.query_size = 32;
  m.plan.support_size = 16;
  m.head.anchors.size = 12;
  m.head.rpn_hidden = 8;
  m.head.roi_size = 3;
  m.head.proposals = 4;
  m.head.stage4_heads = 2;
  m.head.match_hidden = 16;
  m.head.gt_jitter = 1;
  return m;
}

DatasetIndex tiny_corpus(uint64_t seed, int64_t n, std::span<const int> classes) {
  CorpusOptions co;
  co.image_size = 32;
  co.min_object = 10;
  co.max_object = 15;
  co.max_instances = 2;
  return generate_synthetic_corpus(seed, n, classes, co);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fct_test_" + std::to_string(::getpid()) + "_" + name);
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.names() != b.names()) return false;
  for (const auto& [name, t] : a.items()) {
    const Tensor& u = b.get(name);
    if (t.shape() != u.shape() || !std::equal(t.data().begin(), t.data().end(), u.data().begin())) return false;
  }
  return true;
}

// ---- optimizer ----------------------------------------------------------------

TEST(AdamW, ZeroGradientOnlyDecays) {
  ParamStore p;
  p.add("w", Tensor::from({3}, {1.0, -2.0, 0.5}));
  p.add("untouched", Tensor::from({2}, {4.0, 5.0}));
  p.get("w").zero_grad();
  sum(scale(p.get("w"), 0.0)).backward();
  AdamW opt;
  opt.step(p, 0.1, 0.01);
  EXPECT_DOUBLE_EQ(p.get("w").at({0}), 1.0 * (1 - 0.1 * 0.01));
  EXPECT_DOUBLE_EQ(p.get("w").at({1}), -2.0 * (1 - 0.1 * 0.01));
  EXPECT_EQ(p.get("untouched").at({0}), 4.0);
  EXPECT_EQ(opt.steps(), 1);
  EXPECT_THROW(opt.step(p, 0.0, 0.0), TrainingError);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamStore p;
  p.add("w", Tensor::from({2}, {1.0, 1.0}));
  sum(mul(p.get("w"), Tensor::from({2}, {3.0, -0.02}))).backward();
  AdamW opt;
  opt.step(p, 0.01, 0.0);
  // Bias-corrected m/sqrt(v) is sign(g) on the first step.
  EXPECT_NEAR(p.get("w").at({0}), 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p.get("w").at({1}), 1.0 + 0.01, 1e-6);
  EXPECT_NEAR(opt.first_moment("w")[0], 0.3, 1e-15);
  EXPECT_NEAR(opt.second_moment("w")[0], 0.009, 1e-15);
}

TEST(AdamW, MinimizesScalarQuadratic) {
  ParamStore p;
  p.add("w", Tensor::from({1}, {2.0}));
  const Tensor target = Tensor::from({1}, {0.3});
  AdamW opt;
  for (int i = 0; i < 500; ++i) {
    p.zero_grad();
    sum(square(sub(p.get("w"), target))).backward();
    opt.step(p, 0.02, 0.0);
  }
  EXPECT_NEAR(p.get("w").at({0}), 0.3, 1e-3);
}

TEST(Schedule, StepDecayAtMilestone) {
  Schedule s;
  s.steps = 10;
  s.lr = 1e-3;
  s.milestone = 0.6;
  EXPECT_DOUBLE_EQ(s.lr_at(0), 1e-3);
  EXPECT_DOUBLE_EQ(s.lr_at(5), 1e-3);
  EXPECT_DOUBLE_EQ(s.lr_at(6), 1e-4);
  EXPECT_DOUBLE_EQ(s.lr_at(9), 1e-4);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  ParamStore p;
  p.add("a", Tensor::from({2}, {1.0, 1.0}));
  p.add("b", Tensor::from({1}, {1.0}));
  add(sum(scale(p.get("a"), 3.0)), sum(scale(p.get("b"), 4.0 * std::sqrt(2.0)))).backward();
  const double norm = clip_grad_norm(p, 1.0);
  EXPECT_NEAR(norm, std::sqrt(9 + 9 + 32.0), 1e-12);
  double sq = 0.0;
  for (const auto& [_, t] : p.items()) {
    for (double g : t.grad()) sq += g * g;
  }
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  EXPECT_NEAR(clip_grad_norm(p, 5.0), 1.0, 1e-12);  // below the cap: unchanged
}

// ---- checkpoints and configuration ----------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ck;
  ck.params = init_single_branch_model(tiny_model(), 3, 7);
  jitter_params(ck.params, 8);
  ck.params.get("head.rpn.cls.b").mutable_data()[0] = 1e-310;  // subnormal survives
  ck.step = 123;
  ck.config_hash = model_hash(tiny_model());
  ck.class_ids = {0, 4, 9};
  const auto path = temp_path("ck.bin");
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_TRUE(same_params(ck.params, back.params));
  EXPECT_EQ(back.step, 123);
  EXPECT_EQ(back.config_hash, ck.config_hash);
  EXPECT_EQ(back.class_ids, ck.class_ids);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::ofstream(path) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(ModelHash, TracksShapeFieldsOnly) {
  const ModelConfig a = tiny_model();
  ModelConfig b = a;
  EXPECT_EQ(model_hash(a), model_hash(b));
  b.head.gt_jitter = 7;
  b.head.proposals = 9;
  EXPECT_EQ(model_hash(a), model_hash(b));
  b.head.roi_size = 5;
  EXPECT_NE(model_hash(a), model_hash(b));
  ModelConfig c = a;
  c.plan.stages[1].sr_ratio = 2;
  EXPECT_NE(model_hash(a), model_hash(c));
}

TEST(Config, TextRoundTrip) {
  PipelineConfig c;
  c.model.plan.sr_mode = SrMode::kStridedProjection;
  c.model.head.roi_size = 5;
  c.model.head.anchors.ratios = {1.0, 3.0};
  c.data.min_object = 11;
  c.finetune.steps = 17;
  c.finetune.lr = 3.25e-4;
  c.post.score_thresh = 0.125;
  const PipelineConfig back = parse_config(config_to_text(c));
  EXPECT_EQ(config_to_text(back), config_to_text(c));
  EXPECT_EQ(back.model.plan.sr_mode, SrMode::kStridedProjection);
  EXPECT_EQ(back.model.head.anchors.ratios, c.model.head.anchors.ratios);
  EXPECT_EQ(back.finetune.lr, 3.25e-4);
  EXPECT_EQ(model_hash(back.model), model_hash(c.model));
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config("[nowhere]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[finetune]\nspeed = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[finetune]\nsteps = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("steps = 10\n"), ConfigError);
  EXPECT_THROW(parse_config("[finetune\n"), ConfigError);
  EXPECT_THROW(parse_config("[finetune]\nsteps\n"), ConfigError);
  EXPECT_THROW(load_config(temp_path("missing.cfg")), IoError);
  const PipelineConfig ok = parse_config("# comment\n[finetune]\nsteps = 12  # inline\n\n");
  EXPECT_EQ(ok.finetune.steps, 12);
}

// ---- model assembly ---------------------------------------------------------------

TEST(WeightTransfer, StepOneTensorsCarryOver) {
  const ModelConfig m = tiny_model();
  Checkpoint step1;
  step1.params = init_single_branch_model(m, 4, 11);
  jitter_params(step1.params, 12);
  step1.config_hash = model_hash(m);
  const ParamStore two = two_branch_from_single(step1, m, 13);
  for (const auto& [name, t] : step1.params.items()) {
    if (name.rfind("head.rcnn.", 0) == 0) {
      EXPECT_FALSE(two.contains(name)) << name;
      continue;
    }
    ASSERT_TRUE(two.contains(name)) << name;
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), two.get(name).data().begin())) << name;
  }
  for (const auto& [name, t] : two.items()) {
    if (name.find(".branch") == std::string::npos) continue;
    for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
  }
  EXPECT_TRUE(two.contains("head.match.fc1.w"));
  EXPECT_EQ(two.names(), init_two_branch_model(m, 1).names());

  Checkpoint wrong = step1;
  wrong.config_hash ^= 1;
  EXPECT_THROW(two_branch_from_single(wrong, m, 13), ShapeError);
}

TEST(WeightTransfer, ZeroBranchRowsReproduceStepOneFeatures) {
  const ModelConfig m = tiny_model();
  Checkpoint step1;
  step1.params = init_single_branch_model(m, 4, 21);
  jitter_params(step1.params, 22);
  step1.config_hash = model_hash(m);
  const ParamStore two = two_branch_from_single(step1, m, 23);
  const Tensor q = random_tensor({1, 32, 32, 3}, 24), s = random_tensor({3, 16, 16, 3}, 25);
  const TokenSequence ref = single_branch_forward(q, step1.params, m.plan);
  BackboneOptions self;
  self.mode = AttentionMode::kSelf;
  const BackboneOutput out = backbone_forward(q, s, two, m.plan, self);
  double worst = 0.0;
  for (int64_t i = 0; i < ref.tokens.numel(); ++i) {
    worst = std::max(worst, std::abs(ref.tokens.data()[static_cast<size_t>(i)] -
                                     out.query_feat.tokens.data()[static_cast<size_t>(i)]));
  }
  EXPECT_LE(worst, 1e-12);
}

// ---- training ---------------------------------------------------------------------

class TinyTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto base = default_base_classes();
    std::vector<int> all(kNumClasses);
    std::iota(all.begin(), all.end(), 0);
    base_ = new DatasetIndex(tiny_corpus(1, 24, base));
    pool_ = new DatasetIndex(tiny_corpus(2, 60, all));
  }
  static void TearDownTestSuite() {
    delete base_;
    delete pool_;
  }
  static Schedule schedule(int64_t steps, int64_t b_support = 1) {
    Schedule s;
    s.steps = steps;
    s.lr = 1e-3;
    s.b_support = b_support;
    return s;
  }
  static DatasetIndex* base_;
  static DatasetIndex* pool_;
};

DatasetIndex* TinyTraining::base_ = nullptr;
DatasetIndex* TinyTraining::pool_ = nullptr;

TEST_F(TinyTraining, PretrainIsDeterministicAndLogs) {
  const ModelConfig m = tiny_model();
  std::vector<LossRecord> seen;
  const TrainResult a = pretrain_single_branch(*base_, m, schedule(6), 5, [&](const LossRecord& r) { seen.push_back(r); });
  const TrainResult b = pretrain_single_branch(*base_, m, schedule(6), 5);
  EXPECT_TRUE(same_params(a.checkpoint.params, b.checkpoint.params));
  ASSERT_EQ(a.log.size(), 6u);
  ASSERT_EQ(seen.size(), 6u);
  for (size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_EQ(seen[i].step, static_cast<int64_t>(i));
    EXPECT_TRUE(std::isfinite(a.log[i].loss));
  }
  EXPECT_EQ(a.checkpoint.step, 6);
  EXPECT_EQ(a.checkpoint.config_hash, model_hash(m));
  EXPECT_EQ(a.checkpoint.class_ids, default_base_classes());
  const TrainResult c = pretrain_single_branch(*base_, m, schedule(6), 6);
  EXPECT_FALSE(same_params(a.checkpoint.params, c.checkpoint.params));

  const auto path = temp_path("loss.tsv");
  write_loss_log(a.log, path);
  std::ifstream in(path);
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_GE(lines, 6);
  std::filesystem::remove(path);
}

TEST_F(TinyTraining, PretrainLossFallsOnRepeatedImage) {
  ModelConfig m = tiny_model();
  DatasetIndex one = *base_;
  one.images.resize(1);
  one.pixels.resize(1);
  std::erase_if(one.annotations, [](const Annotation& a) { return a.image_id != 0; });
  Schedule s = schedule(150);
  s.lr = 3e-3;
  s.milestone = 1.0;
  const TrainResult r = pretrain_single_branch(one, m, s, 3);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += r.log[static_cast<size_t>(i)].loss;
    last += r.log[r.log.size() - 1 - static_cast<size_t>(i)].loss;
  }
  EXPECT_LT(last, 0.7 * first);
}

TEST_F(TinyTraining, TwoBranchTrainingTouchesEveryTensor) {
  const ModelConfig m = tiny_model();
  const TrainResult step1 = pretrain_single_branch(*base_, m, schedule(2), 5);
  const ParamStore before = two_branch_from_single(step1.checkpoint, m, 9);
  const TrainResult step2 = train_two_branch(*base_, &step1.checkpoint, m, schedule(8, 2), 9);
  EXPECT_EQ(step2.checkpoint.params.names(), before.names());
  for (const auto& [name, t] : before.items()) {
    const Tensor& after = step2.checkpoint.params.get(name);
    EXPECT_FALSE(std::equal(t.data().begin(), t.data().end(), after.data().begin())) << name << " never updated";
  }
  // Without a checkpoint the same schedule starts from a fresh model.
  const TrainResult scratch = train_two_branch(*base_, nullptr, m, schedule(2, 2), 9);
  EXPECT_EQ(scratch.checkpoint.params.names(), before.names());
}

TEST_F(TinyTraining, FinetuneRequiresExactKShotSet) {
  const ModelConfig m = tiny_model();
  const TrainResult step1 = pretrain_single_branch(*base_, m, schedule(2), 5);
  const TrainResult step2 = train_two_branch(*base_, &step1.checkpoint, m, schedule(2), 5);
  const DatasetIndex shots = make_k_shot_subset(*pool_, 1, 4);
  const TrainResult ft = finetune_k_shot(shots, 1, step2.checkpoint, m, schedule(3), 5);
  EXPECT_EQ(ft.log.size(), 3u);
  EXPECT_THROW(finetune_k_shot(*pool_, 1, step2.checkpoint, m, schedule(3), 5), DataError);

  const TrainResult baseline = finetune_single_branch(shots, 1, step1.checkpoint, m, schedule(3), 5);
  std::vector<int> all(kNumClasses);
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> ids = baseline.checkpoint.class_ids;
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(ids, all);
  // Columns of classes seen in step 1 keep their trained weights.
  const Tensor& w1 = step1.checkpoint.params.get("head.rcnn.cls.w");
  EXPECT_EQ(baseline.checkpoint.params.get("head.rcnn.cls.w").size(1), kNumClasses + 1);
  EXPECT_EQ(w1.size(1), static_cast<int64_t>(default_base_classes().size()) + 1);
}

TEST_F(TinyTraining, DetectorsEmitValidDetections) {
  const ModelConfig m = tiny_model();
  const TrainResult step1 = pretrain_single_branch(*base_, m, schedule(2), 5);
  const ParamStore two = two_branch_from_single(step1.checkpoint, m, 5);
  DatasetIndex test = *pool_;
  test.images.resize(3);
  test.pixels.resize(3);
  std::erase_if(test.annotations, [](const Annotation& a) { return a.image_id >= 3; });
  const std::vector<int> classes{0, 5};
  PostprocessConfig post;
  post.score_thresh = 0.0;
  const auto dets = detect_two_branch(two, m, test, *pool_, classes, 2, post);
  ASSERT_FALSE(dets.empty());
  for (const Detection& d : dets) {
    EXPECT_TRUE(d.class_id == 0 || d.class_id == 5);
    EXPECT_GE(d.image_id, 0);
    EXPECT_LT(d.image_id, 3);
    EXPECT_TRUE(d.box.valid());
    EXPECT_GE(d.score, 0.0);
    EXPECT_LE(d.score, 1.0);
  }
  const auto single = detect_single_branch(step1.checkpoint, m, test, post);
  ASSERT_FALSE(single.empty());
  for (const Detection& d : single) {
    EXPECT_NE(std::find(step1.checkpoint.class_ids.begin(), step1.checkpoint.class_ids.end(), d.class_id),
              step1.checkpoint.class_ids.end());
  }
}

}  // namespace
}  // namespace fct
