// Command-line driver: corpus generation, the three training steps, evaluation
// and attention-mask export.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "fct/config.hpp"
#include "fct/heatmap.hpp"
#include "fct/train.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kMissingFile = 2, kBadConfig = 3, kPointOutside = 4 };

struct Options {
  std::string config;
  uint64_t seed = 0;
  std::string out = "run";
  std::string data = "data";
  std::string checkpoint;
  int k_shot = 1;
  int64_t b_support = 0;  // 0: use K
  int stage = 3;
  std::string query_point;
  int head = -1;
  int64_t image_id = 0;
  int class_id = -1;
  bool no_pretrain = false;
};

fct::PipelineConfig config_of(const Options& o) {
  return o.config.empty() ? fct::PipelineConfig{} : fct::load_config(o.config);
}

std::filesystem::path out_dir(const Options& o) {
  std::filesystem::create_directories(o.out);
  return o.out;
}

fct::Checkpoint need_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw fct::IoError("--checkpoint is required");
  return fct::load_checkpoint(o.checkpoint);
}

void progress(const char* what, int64_t total, const fct::LossRecord& r) {
  if ((r.step + 1) % 50 == 0 || r.step + 1 == total) {
    std::cerr << what << " step " << r.step + 1 << "/" << total << " loss " << r.loss << " lr " << r.lr << "\n";
  }
}

fct::DatasetIndex k_shot_set(const Options& o) {
  return fct::make_k_shot_subset(fct::read_dataset(std::filesystem::path(o.data) / "pool"), o.k_shot, o.seed);
}

void cmd_gen_data(const Options& o) {
  const auto cfg = config_of(o);
  const fct::Corpora corpora = fct::generate_corpora(cfg, o.seed);
  const std::filesystem::path root = o.data;
  fct::write_dataset(corpora.base, root / "base");
  fct::write_dataset(corpora.pool, root / "pool");
  fct::write_dataset(corpora.test, root / "test");
  std::cout << "wrote base, pool and test corpora to " << root.string() << "\n";
}

void cmd_pretrain(const Options& o) {
  const auto cfg = config_of(o);
  const auto data = fct::read_dataset(std::filesystem::path(o.data) / "base");
  const auto result = fct::pretrain_single_branch(data, cfg.model, cfg.pretrain, o.seed, [&](const auto& r) {
    progress("pretrain", cfg.pretrain.steps, r);
  });
  const auto dir = out_dir(o);
  fct::save_checkpoint(result.checkpoint, dir / "pretrain.fctk");
  fct::write_loss_log(result.log, dir / "pretrain_loss.csv");
  std::cout << "saved " << (dir / "pretrain.fctk").string() << "\n";
}

void cmd_train_base(const Options& o) {
  const auto cfg = config_of(o);
  const auto data = fct::read_dataset(std::filesystem::path(o.data) / "base");
  fct::Checkpoint init;
  if (!o.no_pretrain) init = need_checkpoint(o);
  const auto result = fct::train_two_branch(data, o.no_pretrain ? nullptr : &init, cfg.model, cfg.train_base, o.seed,
                                            [&](const auto& r) { progress("train-base", cfg.train_base.steps, r); });
  const auto dir = out_dir(o);
  fct::save_checkpoint(result.checkpoint, dir / "train_base.fctk");
  fct::write_loss_log(result.log, dir / "train_base_loss.csv");
  std::cout << "saved " << (dir / "train_base.fctk").string() << "\n";
}

void cmd_finetune(const Options& o) {
  const auto cfg = config_of(o);
  const auto init = need_checkpoint(o);
  const auto subset = k_shot_set(o);
  const auto dir = out_dir(o);
  const std::string tag = std::to_string(o.k_shot) + "shot";
  fct::write_annotations(subset, dir / ("finetune_" + tag + "_annotations.txt"));
  fct::TrainResult result;
  if (init.class_ids.empty()) {
    result = fct::finetune_k_shot(subset, o.k_shot, init, cfg.model, cfg.finetune, o.seed,
                                  [&](const auto& r) { progress("finetune", cfg.finetune.steps, r); });
  } else {
    result = fct::finetune_single_branch(subset, o.k_shot, init, cfg.model, cfg.baseline_finetune, o.seed,
                                         [&](const auto& r) { progress("finetune", cfg.baseline_finetune.steps, r); });
  }
  fct::save_checkpoint(result.checkpoint, dir / ("finetune_" + tag + ".fctk"));
  fct::write_loss_log(result.log, dir / ("finetune_" + tag + "_loss.csv"));
  std::cout << "saved " << (dir / ("finetune_" + tag + ".fctk")).string() << "\n";
}

void cmd_eval(const Options& o) {
  const auto cfg = config_of(o);
  const auto ck = need_checkpoint(o);
  const auto test = fct::read_dataset(std::filesystem::path(o.data) / "test");
  std::vector<fct::Detection> dets;
  std::vector<int> classes = test.novel_classes;
  if (ck.class_ids.empty()) {
    const auto support = k_shot_set(o);
    dets = fct::detect_two_branch(ck.params, cfg.model, test, support, classes, o.b_support > 0 ? o.b_support : o.k_shot,
                                  cfg.post);
  } else {
    dets = fct::detect_single_branch(ck, cfg.model, test, cfg.post);
  }
  const auto report = fct::evaluate_ap50(dets, test, classes);
  const auto dir = out_dir(o);
  fct::write_detections(dets, dir / "detections.txt");
  std::ofstream table(dir / "ap50.txt");
  table << "class AP50\n" << std::fixed << std::setprecision(4);
  for (const auto& [c, ap] : report.per_class) table << c << ' ' << ap << '\n';
  for (int c : report.absent) table << c << " absent\n";
  table << "mean " << report.mean << '\n';
  std::cout << "novel AP50 " << std::fixed << std::setprecision(4) << report.mean << " (" << dets.size()
            << " detections)\n";
}

std::pair<double, double> parse_point(const std::string& s) {
  double x = 0, y = 0;
  char comma = 0;
  std::istringstream in(s);
  if (!(in >> x >> comma >> y) || comma != ',') throw std::invalid_argument("--query-point expects X,Y");
  return {x, y};
}

void cmd_visualize(const Options& o) {
  const auto cfg = config_of(o);
  const auto& plan = cfg.model.plan;
  const auto ck = need_checkpoint(o);
  if (!ck.class_ids.empty()) throw std::invalid_argument("visualize-attn needs a two-branch checkpoint");
  const auto test = fct::read_dataset(std::filesystem::path(o.data) / "test");
  const auto pool = fct::read_dataset(std::filesystem::path(o.data) / "pool");
  const auto [px, py] = parse_point(o.query_point);
  const fct::Image& img = test.image(o.image_id);
  const auto size = static_cast<double>(plan.query_size);
  fct::token_at_point(px, py, static_cast<double>(img.width), static_cast<double>(img.height), 1, 1);

  int class_id = o.class_id;
  if (class_id < 0) {
    class_id = test.novel_classes.front();
    for (const auto& a : test.annotations_in_image(o.image_id)) {
      if (px >= a.box.x1 && px < a.box.x2 && py >= a.box.y1 && py < a.box.y2) class_id = a.class_id;
    }
  }
  const auto anns = pool.annotations_of_class(class_id);
  if (anns.empty()) throw fct::DataError("no support example for class " + std::to_string(class_id));
  const fct::Image crop = fct::support_crop(pool, anns.front());

  std::vector<fct::AttentionCapture> captures;
  fct::AttentionCapture s4;
  fct::TwoBranchPass pass;
  {
    fct::NoGradGuard guard;
    pass = fct::two_branch_pass(ck.params, cfg.model, fct::image_to_tensor(img), fct::image_to_tensor(crop), {},
                                &captures, &s4);
  }
  const auto n_stages = static_cast<int>(plan.stages.size());
  if (o.stage < 1 || o.stage > n_stages + 1) throw std::invalid_argument("--stage must be in [1, 4]");

  fct::AttentionMasks masks;
  if (o.stage <= n_stages) {
    const auto i = static_cast<size_t>(o.stage - 1);
    const int64_t qg = plan.query_grid(i), sg = plan.support_grid(i), r = plan.stages[i].sr_ratio;
    const int64_t token = fct::token_at_point(px, py, size, size, qg, qg);
    const auto row = fct::attention_row(captures[i].query_probs, 0, token, o.head);
    masks = fct::attention_masks(row, qg / r, qg / r, sg / r, sg / r);
  } else {
    // Stage 4: the highest-ranked proposal containing the point.
    int64_t chosen = -1;
    for (size_t p = 0; p < pass.proposals.size(); ++p) {
      const auto& b = pass.proposals[p];
      if (px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2) {
        chosen = static_cast<int64_t>(p);
        break;
      }
    }
    if (chosen < 0) throw fct::PointOutsideError("no proposal contains the query point");
    const auto& b = pass.proposals[static_cast<size_t>(chosen)];
    const int64_t rs = cfg.model.head.roi_size;
    const int64_t token = fct::token_at_point(px - b.x1, py - b.y1, b.width(), b.height(), rs, rs);
    masks = fct::attention_masks(fct::attention_row(s4.query_probs, chosen, token, o.head), rs, rs, rs, rs);
  }
  const auto dir = out_dir(o);
  fct::write_ppm(dir / "query_mask.ppm", fct::render_heatmap(masks.query, img.width, img.height));
  fct::write_ppm(dir / "support_mask.ppm", fct::render_heatmap(masks.support, crop.width, crop.height));
  fct::write_ppm(dir / "query.ppm", img);
  fct::write_ppm(dir / "support.ppm", crop);
  std::cout << "stage " << o.stage << ": query mask " << masks.query.grid_h << "x" << masks.query.grid_w
            << ", support mask " << masks.support.grid_h << "x" << masks.support.grid_w << " (class " << class_id
            << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-transformer few-shot detector"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Config file ([section] key = value)");
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--data", o.data, "Corpus directory (base/, pool/, test/)");
  };
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic base, pool and test corpora");
  common(gen);
  auto* pre = app.add_subcommand("pretrain", "Step 1: single-branch pretraining on base classes");
  common(pre);
  auto* base = app.add_subcommand("train-base", "Step 2: two-branch training on base classes");
  common(base);
  base->add_option("--checkpoint", o.checkpoint, "Step-1 checkpoint");
  base->add_flag("--no-pretrain", o.no_pretrain, "Start from scratch instead of the step-1 checkpoint");
  auto* fine = app.add_subcommand("finetune", "Step 3: K-shot fine-tuning on base and novel classes");
  common(fine);
  fine->add_option("--checkpoint", o.checkpoint, "Step-2 (or step-1 for the single-branch baseline) checkpoint");
  fine->add_option("--k-shot", o.k_shot, "Boxes per class")->check(CLI::PositiveNumber);
  auto* ev = app.add_subcommand("eval", "Novel-class AP50 on the test corpus");
  common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  ev->add_option("--k-shot", o.k_shot, "Support pool size per class")->check(CLI::PositiveNumber);
  ev->add_option("--b-support", o.b_support, "Support images per episode (default K)");
  auto* vis = app.add_subcommand("visualize-attn", "Write query/support attention masks as PPM heatmaps");
  common(vis);
  vis->add_option("--checkpoint", o.checkpoint, "Two-branch checkpoint");
  vis->add_option("--stage", o.stage, "Stage 1-3 (backbone) or 4 (RoI)");
  vis->add_option("--query-point", o.query_point, "Pixel X,Y in the query image")->required();
  vis->add_option("--head", o.head, "Single head instead of the head average");
  vis->add_option("--image-id", o.image_id, "Test image index");
  vis->add_option("--class", o.class_id, "Support class (default: object under the point)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) cmd_gen_data(o);
    if (pre->parsed()) cmd_pretrain(o);
    if (base->parsed()) cmd_train_base(o);
    if (fine->parsed()) cmd_finetune(o);
    if (ev->parsed()) cmd_eval(o);
    if (vis->parsed()) cmd_visualize(o);
  } catch (const fct::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingFile;
  } catch (const fct::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const fct::PointOutsideError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPointOutside;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
