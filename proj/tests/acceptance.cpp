// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--only 1,5,...] [--seeds N]
//
// Criteria 4-7 share one pipeline run per seed.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "ap_cases.hpp"
#include "fct/config.hpp"
#include "fct/heatmap.hpp"
#include "grad_check.hpp"
#include "oracles.hpp"

namespace {

using namespace fct;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double max_abs(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)]));
  }
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// ---- 1: batched attention vs per-image oracle --------------------------------------

Verdict batched_oracle() {
  // Stage-1 geometry of the default backbone.
  const BackbonePlan plan;
  const LayerConfig cfg = plan.layer_config(0);
  const int64_t qg = plan.query_grid(0), sg = plan.support_grid(0), c = cfg.channels;
  ParamStore store;
  std::mt19937_64 rng(1);
  init_layer_params(store, "l", cfg, rng);
  testing::jitter_params(store, 2);
  const AttentionWeights w = layer_weights(store, "l", cfg).attn;
  bool ok = true;
  std::ostringstream detail;
  for (int64_t bs : {1, 5, 2}) {
    const TokenSequence xq{testing::random_tensor({1, qg * qg, c}, 10 + static_cast<uint64_t>(bs)), qg, qg,
                           Branch::kQuery};
    const TokenSequence xs{testing::random_tensor({bs, sg * sg, c}, 20 + static_cast<uint64_t>(bs)), sg, sg,
                           Branch::kSupport};
    const auto t0 = Clock::now();
    const auto [oq, os] = multihead_cross_attention(xq, xs, w, cfg);
    const double secs = seconds_since(t0);
    const oracle::Branches ref = oracle::cross_attention(oracle::split(xq.tokens, xs.tokens), qg, qg, sg, sg, w, cfg);
    const double err = std::max(oracle::max_abs_diff(oq.tokens, ref.query), oracle::max_abs_diff(os.tokens, ref.support));
    ok = ok && err <= 1e-10 && secs < 1.0;
    detail << "B_s=" << bs << " err " << fmt("%.2e", err) << " " << fmt("%.3fs", secs) << "; ";
  }
  return {ok, detail.str()};
}

// ---- 2: gradient suite --------------------------------------------------------------

Verdict gradient_suite() {
  ModelConfig m;
  m.plan.stages = {{8, 1, 2, 2, 4, 2}, {16, 1, 2, 1, 2, 2}};  // two cross-transformer layers
  m.plan.query_size = 32;
  m.plan.support_size = 16;
  m.plan.sr_mode = SrMode::kStridedProjection;
  m.plan.sr_norm = true;
  m.head.anchors.size = 12;
  m.head.rpn_hidden = 8;
  m.head.roi_size = 2;
  m.head.proposals = 0;  // only the fixed boxes below, so RoIs do not move with the weights
  m.head.stage4_heads = 2;
  m.head.stage4_mlp_ratio = 2;
  m.head.match_hidden = 8;
  m.head.gt_jitter = 2;
  ParamStore params = init_two_branch_model(m, 3);
  testing::jitter_params(params, 4);
  EpisodeBatch ep;
  ep.query = testing::random_tensor({1, 32, 32, 3}, 5);
  ep.support = testing::random_tensor({2, 16, 16, 3}, 6);
  ep.gt = {{4, 6, 19, 20}, {18, 15, 31, 30}};
  std::vector<std::pair<std::string, Tensor*>> inputs;
  for (auto& [name, t] : params.items()) inputs.emplace_back(name, &t);
  const auto t0 = Clock::now();
  const auto r = testing::grad_check([&] { return two_branch_episode_loss(params, m, ep).total; }, inputs, 1e-5, 0, 7);
  const double secs = seconds_since(t0);
  return {r.max_rel_error < 1e-4 && secs < 60.0,
          std::to_string(inputs.size()) + " tensors, " + std::to_string(r.checked) + " entries, max rel err " +
              fmt("%.2e", r.max_rel_error) + " at " + r.worst + ", " + fmt("%.1fs", secs)};
}

// ---- 3: support permutation ----------------------------------------------------------

Verdict permutation_invariance() {
  ModelConfig m;
  ParamStore params = init_two_branch_model(m, 8);
  testing::jitter_params(params, 9);
  const Tensor q = testing::random_tensor({1, 64, 64, 3}, 10);
  const Tensor s = testing::random_tensor({5, 32, 32, 3}, 11);
  const std::vector<int64_t> perm{3, 0, 4, 2, 1};
  const BackboneOutput a = backbone_forward(q, s, params, m.plan);
  const BackboneOutput b = backbone_forward(q, index_select(s, 0, perm), params, m.plan);
  const bool query_same = bit_equal(a.query_feat.tokens, b.query_feat.tokens);
  const bool support_permuted = bit_equal(index_select(a.support_feat.tokens, 0, perm), b.support_feat.tokens);
  return {query_same && support_permuted, std::string("query bit-identical: ") + (query_same ? "yes" : "no") +
                                              ", support permuted bit-identical: " + (support_permuted ? "yes" : "no")};
}

// ---- 4-7: pipeline runs -------------------------------------------------------------------

struct SeedRun {
  double fct_1 = 0, single_1 = 0, scratch_1 = 0, fct_5 = 0;
  double t_shared = 0, t_k1 = 0, t_single = 0, t_k5 = 0;
  double transfer_err = 0;
};

double novel_ap(const std::vector<Detection>& dets, const DatasetIndex& test) {
  return evaluate_ap50(dets, test, test.novel_classes).mean;
}

SeedRun run_seed(const PipelineConfig& cfg, uint64_t seed, bool check_transfer) {
  SeedRun r;
  auto t0 = Clock::now();
  const Corpora data = generate_corpora(cfg, seed);
  const TrainResult step1 = pretrain_single_branch(data.base, cfg.model, cfg.pretrain, seed);
  const TrainResult step2 = train_two_branch(data.base, &step1.checkpoint, cfg.model, cfg.train_base, seed);
  r.t_shared = seconds_since(t0);
  const auto& novel = data.test.novel_classes;

  const DatasetIndex shots1 = make_k_shot_subset(data.pool, 1, seed);
  t0 = Clock::now();
  const TrainResult ft1 = finetune_k_shot(shots1, 1, step2.checkpoint, cfg.model, cfg.finetune, seed);
  r.fct_1 = novel_ap(detect_two_branch(ft1.checkpoint.params, cfg.model, data.test, shots1, novel, 1, cfg.post),
                     data.test);
  r.t_k1 = seconds_since(t0);

  t0 = Clock::now();
  const TrainResult base1 = finetune_single_branch(shots1, 1, step1.checkpoint, cfg.model, cfg.baseline_finetune, seed);
  r.single_1 = novel_ap(detect_single_branch(base1.checkpoint, cfg.model, data.test, cfg.post), data.test);
  r.t_single = seconds_since(t0);

  const DatasetIndex shots5 = make_k_shot_subset(data.pool, 5, seed);
  t0 = Clock::now();
  const TrainResult ft5 = finetune_k_shot(shots5, 5, step2.checkpoint, cfg.model, cfg.finetune, seed);
  r.fct_5 = novel_ap(detect_two_branch(ft5.checkpoint.params, cfg.model, data.test, shots5, novel,
                                       std::min<int64_t>(5, cfg.finetune.b_support), cfg.post),
                     data.test);
  r.t_k5 = seconds_since(t0);

  const TrainResult scratch = train_two_branch(data.base, nullptr, cfg.model, cfg.train_base, seed);
  const TrainResult scratch1 = finetune_k_shot(shots1, 1, scratch.checkpoint, cfg.model, cfg.finetune, seed);
  r.scratch_1 = novel_ap(
      detect_two_branch(scratch1.checkpoint.params, cfg.model, data.test, shots1, novel, 1, cfg.post), data.test);

  if (check_transfer) {
    // Round trip through the checkpoint file, then compare query features
    // with support aggregation disabled.
    const auto path = std::filesystem::temp_directory_path() / ("fct_accept_" + std::to_string(::getpid()) + ".fctk");
    save_checkpoint(step1.checkpoint, path);
    const Checkpoint loaded = load_checkpoint(path);
    std::filesystem::remove(path);
    const ParamStore two = two_branch_from_single(loaded, cfg.model, seed);
    BackboneOptions self;
    self.mode = AttentionMode::kSelf;
    NoGradGuard guard;
    for (int64_t i = 0; i < 8; ++i) {
      const Tensor q = image_to_tensor(data.test.image(i));
      const Tensor s = image_to_tensor(support_crop(data.pool, i));
      const TokenSequence ref = single_branch_forward(q, step1.checkpoint.params, cfg.model.plan);
      const BackboneOutput out = backbone_forward(q, s, two, cfg.model.plan, self);
      r.transfer_err = std::max(r.transfer_err, max_abs(ref.tokens, out.query_feat.tokens));
    }
  }
  std::cerr << "seed " << seed << ": FCT K=1 " << r.fct_1 << ", single-branch K=1 " << r.single_1
            << ", no-pretrain K=1 " << r.scratch_1 << ", FCT K=5 " << r.fct_5 << " (" << r.t_shared << "s shared)\n";
  return r;
}

// ---- 8: RoIAlign and AP ----------------------------------------------------------------------

Verdict roi_and_ap() {
  const int64_t h = 4, w = 4, c = 64;
  const TokenSequence feat{testing::random_tensor({2, h * w, c}, 12), h, w, Branch::kQuery};
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-8.0, 72.0);
  std::vector<Box> boxes;
  std::vector<int64_t> idx;
  while (boxes.size() < 16) {
    Box b{u(rng), u(rng), u(rng), u(rng)};
    if (b.x1 > b.x2) std::swap(b.x1, b.x2);
    if (b.y1 > b.y2) std::swap(b.y1, b.y2);
    if (b.area() < 4.0) continue;
    boxes.push_back(b);
    idx.push_back(static_cast<int64_t>(boxes.size() % 2));
  }
  const int64_t roi = 7, ratio = 2;
  const Tensor out = roi_align(feat, boxes, idx, roi, ratio, 16.0);
  double err = 0.0;
  for (size_t k = 0; k < boxes.size(); ++k) {
    const oracle::Mat ref = oracle::roi_align(oracle::batch_slice(feat.tokens, idx[k]), h, w, boxes[k], roi, ratio, 16.0);
    for (int64_t i = 0; i < roi * roi; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        err = std::max(err, std::abs(out.at({static_cast<int64_t>(k), i / roi, i % roi, ch}) - ref.at(i, ch)));
      }
    }
  }
  int exact = 0;
  const auto cases = testing::hand_ap_cases();
  for (const auto& k : cases) exact += average_precision(k.detections, k.gt) == k.expected;
  return {err <= 1e-10 && exact == static_cast<int>(cases.size()),
          "RoIAlign err " + fmt("%.2e", err) + ", AP instances exact " + std::to_string(exact) + "/" +
              std::to_string(cases.size())};
}

// ---- 9: spatial-reduction memory --------------------------------------------------------------

int64_t score_bytes(int64_t r) {
  const BackbonePlan plan;
  LayerConfig cfg = plan.layer_config(0);
  cfg.sr_ratio = r;
  const int64_t qg = plan.query_grid(0), sg = plan.support_grid(0);
  ParamStore store;
  std::mt19937_64 rng(14);
  init_layer_params(store, "l", cfg, rng);
  AttentionCapture cap;
  NoGradGuard guard;
  multihead_cross_attention({testing::random_tensor({1, qg * qg, cfg.channels}, 15), qg, qg, Branch::kQuery},
                            {testing::random_tensor({1, sg * sg, cfg.channels}, 16), sg, sg, Branch::kSupport},
                            layer_weights(store, "l", cfg).attn, cfg, AttentionMode::kCross, &cap);
  return static_cast<int64_t>(sizeof(double)) * (cap.query_probs.numel() + cap.support_probs.numel());
}

Verdict sr_scaling() {
  bool ok = true;
  std::ostringstream detail;
  for (int64_t r : {1, 2, 4}) {
    const int64_t a = score_bytes(r), b = score_bytes(2 * r);
    const double factor = static_cast<double>(a) / static_cast<double>(b);
    ok = ok && factor >= 3.4 && factor <= 4.0;
    detail << "r=" << r << "->" << 2 * r << ": " << a << "B/" << b << "B = " << fmt("%.3f", factor) << "; ";
  }
  return {ok, detail.str()};
}

// ---- 10: attention masks and CLI ------------------------------------------------------------------

Verdict masks_and_cli() {
  bool ok = true;
  const std::vector<double> uniform(16 + 4, 0.05);
  const AttentionMasks mu = attention_masks(uniform, 4, 4, 2, 2);
  ok = ok && render_heatmap(mu.query, 64, 64) == Image(64, 64, 128) &&
       render_heatmap(mu.support, 32, 32) == Image(32, 32, 128);
  for (int64_t t = 0; t < 20; ++t) {
    std::vector<double> row(20, 0.0);
    row[static_cast<size_t>(t)] = 1.0;
    const AttentionMasks m = attention_masks(row, 4, 4, 2, 2);
    Image q(64, 64, 0), s(32, 32, 0);
    Image& lit = t < 16 ? q : s;
    const int64_t cell = t < 16 ? t : t - 16, grid = t < 16 ? 4 : 2;
    for (int64_t y = 0; y < 16; ++y) {
      for (int64_t x = 0; x < 16; ++x) {
        uint8_t* p = lit.px((cell % grid) * 16 + x, (cell / grid) * 16 + y);
        p[0] = p[1] = p[2] = 255;
      }
    }
    ok = ok && render_heatmap(m.query, 64, 64) == q && render_heatmap(m.support, 32, 32) == s;
  }
  const std::string masks = ok ? "heatmaps bit-exact" : "heatmap mismatch";
  const auto work = std::filesystem::temp_directory_path() / ("fct_accept_cli_" + std::to_string(::getpid()));
  const std::string cmd = std::string("\"") + FCT_CMAKE + "\" -DCLI=\"" + FCT_CLI + "\" -DWORK=\"" + work.string() +
                          "\" -P \"" + FCT_SMOKE_SCRIPT + "\" > \"" + work.string() + ".log\" 2>&1";
  const int status = std::system(cmd.c_str());
  std::filesystem::remove_all(work);
  std::filesystem::remove(work.string() + ".log");
  return {ok && status == 0, masks + ", CLI smoke " + (status == 0 ? "passed" : "failed")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  int n_seeds = 5;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string item; std::getline(list, item, ',');) only.insert(std::stoi(item));
    } else if (arg == "--seeds" && i + 1 < argc) {
      n_seeds = std::stoi(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--only 1,5,...] [--seeds N]\n";
      return 2;
    }
  }
  auto wanted = [&](int id) { return only.empty() || only.count(id) != 0; };
  int failures = 0;
  auto report = [&](int id, const char* what, const Verdict& v) {
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << what << ": " << v.detail
              << std::endl;
    failures += v.pass ? 0 : 1;
  };
  auto guarded = [&](int id, const char* what, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    try {
      report(id, what, fn());
    } catch (const std::exception& e) {
      report(id, what, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "batched cross-attention vs per-image oracle", batched_oracle);
  guarded(2, "gradient suite", gradient_suite);
  guarded(3, "support permutation invariance", permutation_invariance);

  if (wanted(4) || wanted(5) || wanted(6) || wanted(7)) {
    const PipelineConfig cfg;
    std::vector<SeedRun> runs;
    try {
      for (int s = 1; s <= n_seeds; ++s) runs.push_back(run_seed(cfg, static_cast<uint64_t>(s), s == 1 && wanted(4)));
    } catch (const std::exception& e) {
      for (int id = 4; id <= 7; ++id) {
        if (wanted(id)) report(id, "pipeline", {false, std::string("exception: ") + e.what()});
      }
      runs.clear();
    }
    if (!runs.empty()) {
      auto mean_of = [&](double SeedRun::*field) {
        double s = 0.0;
        for (const SeedRun& r : runs) s += r.*field;
        return s / static_cast<double>(runs.size());
      };
      auto total_of = [&](std::initializer_list<double SeedRun::*> fields) {
        double s = 0.0;
        for (const SeedRun& r : runs) {
          for (auto f : fields) s += r.*f;
        }
        return s;
      };
      const int n = static_cast<int>(runs.size());
      if (wanted(4)) {
        const double err = runs.front().transfer_err;
        report(4, "weight transfer", {err <= 1e-12, "max |step-1 - transferred| query feature " + fmt("%.2e", err)});
      }
      if (wanted(5)) {
        const double fct = mean_of(&SeedRun::fct_1), single = mean_of(&SeedRun::single_1);
        const double secs = total_of({&SeedRun::t_shared, &SeedRun::t_k1, &SeedRun::t_single});
        report(5, "1-shot two-branch vs single-branch",
               {fct - single >= 0.05 && secs < 900.0,
                fmt("FCT %.4f vs single-branch %.4f (+%.1f pts), ", fct, single, 100.0 * (fct - single)) +
                    std::to_string(n) + " seeds, " + fmt("%.0fs", secs)});
      }
      if (wanted(6)) {
        const double with = mean_of(&SeedRun::fct_1), without = mean_of(&SeedRun::scratch_1);
        report(6, "no step-1 pretraining ablation",
               {with - without > 0.02, fmt("with %.4f vs without %.4f (%.1f pts), ", with, without,
                                           100.0 * (with - without)) +
                                           std::to_string(n) + " seeds"});
      }
      if (wanted(7)) {
        const double ap = mean_of(&SeedRun::fct_5);
        const double secs = total_of({&SeedRun::t_shared, &SeedRun::t_k5});
        report(7, "5-shot novel AP50",
               {ap >= 0.60 && secs < 900.0,
                fmt("%.4f (target 0.60), ", ap) + std::to_string(n) + " seeds, " + fmt("%.0fs", secs)});
      }
    }
  }

  guarded(8, "RoIAlign oracle and AP50 hand instances", roi_and_ap);
  guarded(9, "spatial-reduction score memory", sr_scaling);
  guarded(10, "attention masks and CLI smoke", masks_and_cli);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
