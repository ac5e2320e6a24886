#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

#include "fct/ops.hpp"
#include "fct/train.hpp"

namespace fct {

namespace {

using LossFn = std::function<Tensor(int64_t step, std::mt19937_64& rng)>;

std::vector<LossRecord> run_loop(ParamStore& params, const Schedule& schedule, uint64_t seed, const LossFn& loss_fn,
                                 const StepCallback& on_step, const char* what) {
  if (schedule.steps < 0) throw TrainingError("negative step count");
  std::mt19937_64 rng(seed);
  AdamW opt;
  std::vector<LossRecord> log;
  log.reserve(static_cast<size_t>(schedule.steps));
  for (int64_t step = 0; step < schedule.steps; ++step) {
    params.zero_grad();
    const double lr = schedule.lr_at(step);
    double value = 0.0;
    try {
      const Tensor loss = loss_fn(step, rng);
      value = loss.item();
      if (!std::isfinite(value)) throw NumericError("loss is not finite");
      loss.backward();
      clip_grad_norm(params, schedule.clip_norm);
    } catch (const NumericError& e) {
      throw TrainingError(std::string(what) + " diverged at step " + std::to_string(step) + " (lr " +
                          std::to_string(lr) + "): " + e.what());
    }
    opt.step(params, lr, schedule.weight_decay);
    log.push_back({step, value, lr});
    if (on_step) on_step(log.back());
  }
  return log;
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::vector<int64_t> annotated_images(const DatasetIndex& data) {
  std::set<int64_t> ids;
  for (const Annotation& a : data.annotations) ids.insert(a.image_id);
  return {ids.begin(), ids.end()};
}

// Multi-class detector training on whole images; labels are 1 + the position
// of the class in `class_ids`.
std::vector<LossRecord> train_single_branch_images(ParamStore& params, const DatasetIndex& data,
                                                   const std::vector<int>& class_ids, const ModelConfig& config,
                                                   const Schedule& schedule, uint64_t seed,
                                                   const StepCallback& on_step, const char* what) {
  const auto images = annotated_images(data);
  if (images.empty()) throw DataError(std::string(what) + ": dataset has no annotated images");
  std::map<int, int> label_of;
  for (size_t i = 0; i < class_ids.size(); ++i) label_of[class_ids[i]] = static_cast<int>(i) + 1;
  std::uniform_int_distribution<size_t> pick(0, images.size() - 1);
  return run_loop(
      params, schedule, seed,
      [&](int64_t, std::mt19937_64& rng) {
        const int64_t id = images[pick(rng)];
        std::vector<Box> gt;
        std::vector<int> labels;
        for (const Annotation& a : data.annotations_in_image(id)) {
          gt.push_back(a.box);
          labels.push_back(label_of.at(a.class_id));
        }
        return single_branch_image_loss(params, config, image_to_tensor(data.image(id)), gt, labels).total;
      },
      on_step, what);
}

// Episode whose support class does not occur in the query; every proposal is
// a negative.
bool make_negative_episode(const DatasetIndex& data, const std::vector<int>& classes, EpisodeBatch& ep,
                           int64_t b_support, std::mt19937_64& rng, const EpisodeOptions& options) {
  std::set<int> present;
  for (const Annotation& a : data.annotations_in_image(ep.query_image)) present.insert(a.class_id);
  std::vector<int> absent;
  for (int c : classes) {
    if (!present.count(c)) absent.push_back(c);
  }
  if (absent.empty()) return false;
  const int other = absent[std::uniform_int_distribution<size_t>(0, absent.size() - 1)(rng)];
  auto anns = data.annotations_of_class(other);
  std::shuffle(anns.begin(), anns.end(), rng);
  std::vector<int64_t> chosen;
  for (int64_t i = 0; i < b_support; ++i) chosen.push_back(anns[static_cast<size_t>(i) % anns.size()]);
  EpisodeBatch neg = make_episode(data, ep.query_image, other, chosen, data, options);
  neg.gt.clear();
  ep = std::move(neg);
  return true;
}

std::vector<LossRecord> train_episodes(ParamStore& params, const DatasetIndex& data, const std::vector<int>& classes,
                                       const ModelConfig& config, const Schedule& schedule, int64_t b_support,
                                       EpisodeOptions options, uint64_t seed, const StepCallback& on_step,
                                       const char* what) {
  options.support_size = config.plan.support_size;
  if (classes.empty()) throw DataError(std::string(what) + ": no class has enough instances");
  std::uniform_int_distribution<size_t> pick(0, classes.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  return run_loop(
      params, schedule, seed,
      [&](int64_t, std::mt19937_64& rng) {
        const int c = classes[pick(rng)];
        EpisodeBatch ep = sample_episode(data, c, b_support, rng, options);
        if (coin(rng) < schedule.negative_episodes) make_negative_episode(data, classes, ep, b_support, rng, options);
        return two_branch_episode_loss(params, config, ep).total;
      },
      on_step, what);
}

}  // namespace

TrainResult pretrain_single_branch(const DatasetIndex& base_data, const ModelConfig& config, const Schedule& schedule,
                                   uint64_t seed, const StepCallback& on_step) {
  base_data.validate();
  if (base_data.annotations.empty()) throw DataError("pretraining needs a non-empty base dataset");
  for (const Annotation& a : base_data.annotations) {
    if (std::find(base_data.base_classes.begin(), base_data.base_classes.end(), a.class_id) ==
        base_data.base_classes.end()) {
      throw DataError("pretraining data contains non-base class " + std::to_string(a.class_id));
    }
  }
  const std::vector<int> classes = sorted_unique(base_data.base_classes);
  TrainResult out;
  out.checkpoint.params = init_single_branch_model(config, static_cast<int64_t>(classes.size()), seed);
  out.log = train_single_branch_images(out.checkpoint.params, base_data, classes, config, schedule, seed + 1, on_step,
                                       "pretraining");
  out.checkpoint.step = schedule.steps;
  out.checkpoint.config_hash = model_hash(config);
  out.checkpoint.class_ids = classes;
  return out;
}

TrainResult train_two_branch(const DatasetIndex& base_data, const Checkpoint* init, const ModelConfig& config,
                             const Schedule& schedule, uint64_t seed, const StepCallback& on_step) {
  base_data.validate();
  if (base_data.annotations.empty()) throw DataError("base training needs a non-empty dataset");
  TrainResult out;
  out.checkpoint.params = init ? two_branch_from_single(*init, config, seed) : init_two_branch_model(config, seed);
  std::vector<int> classes;
  for (int c : sorted_unique(base_data.base_classes)) {
    if (static_cast<int64_t>(base_data.annotations_of_class(c).size()) >= schedule.b_support + 1) classes.push_back(c);
  }
  out.log = train_episodes(out.checkpoint.params, base_data, classes, config, schedule, schedule.b_support, {},
                           seed + 2, on_step, "base training");
  out.checkpoint.step = schedule.steps;
  out.checkpoint.config_hash = model_hash(config);
  return out;
}

namespace {

std::vector<int> check_k_shot(const DatasetIndex& data, int k) {
  data.validate();
  std::vector<int> classes = data.base_classes;
  classes.insert(classes.end(), data.novel_classes.begin(), data.novel_classes.end());
  classes = sorted_unique(classes);
  for (int c : classes) {
    const auto n = data.annotations_of_class(c).size();
    if (n != static_cast<size_t>(k)) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(n) + " boxes in the fine-tune set; " +
                      "expected exactly " + std::to_string(k));
    }
  }
  return classes;
}

}  // namespace

TrainResult finetune_k_shot(const DatasetIndex& k_shot_data, int k, const Checkpoint& init, const ModelConfig& config,
                            const Schedule& schedule, uint64_t seed, const StepCallback& on_step) {
  const auto classes = check_k_shot(k_shot_data, k);
  if (init.config_hash != model_hash(config)) throw ShapeError("checkpoint was trained with a different model");
  TrainResult out;
  out.checkpoint.params = init.params.clone();
  EpisodeOptions options;
  options.allow_query_support = true;
  const int64_t b_support = std::min<int64_t>(k, schedule.b_support);
  out.log = train_episodes(out.checkpoint.params, k_shot_data, classes, config, schedule, b_support, options, seed + 3,
                           on_step, "fine-tuning");
  out.checkpoint.step = init.step + schedule.steps;
  out.checkpoint.config_hash = init.config_hash;
  return out;
}

TrainResult finetune_single_branch(const DatasetIndex& k_shot_data, int k, const Checkpoint& init,
                                   const ModelConfig& config, const Schedule& schedule, uint64_t seed,
                                   const StepCallback& on_step) {
  const auto classes = check_k_shot(k_shot_data, k);
  if (init.config_hash != model_hash(config)) throw ShapeError("checkpoint was trained with a different model");
  TrainResult out;
  ParamStore& params = out.checkpoint.params;
  params = init.params.clone();

  // Widen the classifier: background and known classes keep their columns,
  // new classes start from a fresh small init.
  std::mt19937_64 rng(seed + 4);
  ParamStore fresh;
  init_rcnn_params(fresh, config.plan.out_channels(), static_cast<int64_t>(classes.size()), config.head, rng);
  const Tensor& old_w = init.params.get("head.rcnn.cls.w");
  const Tensor& old_b = init.params.get("head.rcnn.cls.b");
  Tensor new_w = fresh.get("head.rcnn.cls.w").detach();
  Tensor new_b = fresh.get("head.rcnn.cls.b").detach();
  const int64_t hidden = new_w.size(0);
  const int64_t old_cols = old_w.size(1), new_cols = new_w.size(1);
  auto copy_column = [&](int64_t from, int64_t to) {
    for (int64_t r = 0; r < hidden; ++r) new_w.mutable_data()[r * new_cols + to] = old_w.data()[r * old_cols + from];
    new_b.mutable_data()[to] = old_b.data()[from];
  };
  copy_column(0, 0);
  for (size_t i = 0; i < init.class_ids.size(); ++i) {
    const auto pos = std::find(classes.begin(), classes.end(), init.class_ids[i]);
    if (pos != classes.end()) copy_column(static_cast<int64_t>(i) + 1, (pos - classes.begin()) + 1);
  }
  params.add("head.rcnn.cls.w", new_w);
  params.add("head.rcnn.cls.b", new_b);

  out.log = train_single_branch_images(params, k_shot_data, classes, config, schedule, seed + 5, on_step,
                                       "single-branch fine-tuning");
  out.checkpoint.step = init.step + schedule.steps;
  out.checkpoint.config_hash = init.config_hash;
  out.checkpoint.class_ids = classes;
  return out;
}

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "step,loss,lr\n" << std::setprecision(10);
  for (const LossRecord& r : log) out << r.step << ',' << r.loss << ',' << r.lr << '\n';
}

std::vector<Detection> detect_two_branch(const ParamStore& params, const ModelConfig& config,
                                         const DatasetIndex& test, const DatasetIndex& support_set,
                                         std::span<const int> classes, int64_t b_support,
                                         const PostprocessConfig& post) {
  NoGradGuard guard;
  std::vector<Detection> out;
  EpisodeOptions options;
  options.support_size = config.plan.support_size;
  for (int c : classes) {
    auto anns = support_set.annotations_of_class(c);
    if (anns.empty()) throw DataError("no support example for class " + std::to_string(c));
    if (static_cast<int64_t>(anns.size()) > b_support) anns.resize(static_cast<size_t>(b_support));
    std::vector<Image> crops;
    for (int64_t a : anns) crops.push_back(support_crop(support_set, a, options));
    const Tensor support = images_to_tensor(crops);
    for (int64_t i = 0; i < static_cast<int64_t>(test.images.size()); ++i) {
      const Image& img = test.image(i);
      const TwoBranchPass pass = two_branch_pass(params, config, image_to_tensor(img), support);
      if (pass.proposals.empty()) continue;
      for (const DetectionResult& d : postprocess(pass.match, pass.proposals, c, static_cast<double>(img.width),
                                                  static_cast<double>(img.height), post)) {
        out.push_back({i, c, d.score, d.box});
      }
    }
  }
  return out;
}

std::vector<Detection> detect_single_branch(const Checkpoint& checkpoint, const ModelConfig& config,
                                            const DatasetIndex& test, const PostprocessConfig& post) {
  NoGradGuard guard;
  std::vector<Detection> out;
  for (int64_t i = 0; i < static_cast<int64_t>(test.images.size()); ++i) {
    const Image& img = test.image(i);
    const SingleBranchPass pass = single_branch_pass(checkpoint.params, config, image_to_tensor(img));
    if (pass.proposals.empty()) continue;
    for (const DetectionResult& d :
         postprocess_multiclass(pass.rcnn, pass.proposals, checkpoint.class_ids, static_cast<double>(img.width),
                                static_cast<double>(img.height), post)) {
      out.push_back({i, d.class_id, d.score, d.box});
    }
  }
  return out;
}

void write_detections(std::span<const Detection> detections, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(10);
  for (const Detection& d : detections) {
    out << d.image_id << ' ' << d.class_id << ' ' << d.score << ' ' << d.box.x1 << ' ' << d.box.y1 << ' ' << d.box.x2
        << ' ' << d.box.y2 << '\n';
  }
}

}  // namespace fct
