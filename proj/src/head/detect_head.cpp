#include "fct/detect_head.hpp"

#include <algorithm>
#include <cmath>

namespace fct {

LayerConfig HeadConfig::stage4_config(int64_t channels, double eps) const {
  LayerConfig cfg;
  cfg.channels = channels;
  cfg.heads = stage4_heads;
  cfg.sr_ratio = 1;
  cfg.mlp_ratio = stage4_mlp_ratio;
  cfg.eps = eps;
  return cfg;
}

void init_rpn_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng) {
  const int64_t a = cfg.anchors.per_location();
  init_linear(store, "head.rpn.hidden", channels, cfg.rpn_hidden, rng);
  init_linear(store, "head.rpn.cls", cfg.rpn_hidden, a, rng, 0.1);
  init_linear(store, "head.rpn.reg", cfg.rpn_hidden, 4 * a, rng, 0.1);
}

void init_stage4_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng) {
  const int64_t n = cfg.roi_size * cfg.roi_size;
  store.add("head.s4.pos_q", Tensor::randn({n, channels}, rng, 0.02));
  store.add("head.s4.pos_s", Tensor::randn({n, channels}, rng, 0.02));
  const LayerConfig lc = cfg.stage4_config(channels);
  for (int64_t l = 0; l < cfg.stage4_layers; ++l) init_layer_params(store, "head.s4.l" + std::to_string(l), lc, rng);
  init_layer_norm(store, "head.s4.norm", channels);
}

void init_stage4_branch_embedding(ParamStore& store, int64_t channels) {
  store.add("head.s4.branch", Tensor::zeros({2, channels}));
}

void init_matcher_params(ParamStore& store, int64_t channels, const HeadConfig& cfg, std::mt19937_64& rng) {
  init_linear(store, "head.match.fc1", 2 * channels, cfg.match_hidden, rng);
  init_linear(store, "head.match.fc2", cfg.match_hidden, 5, rng, 0.1);
}

void init_rcnn_params(ParamStore& store, int64_t channels, int64_t num_classes, const HeadConfig& cfg,
                      std::mt19937_64& rng) {
  init_linear(store, "head.rcnn.fc1", channels, cfg.match_hidden, rng);
  init_linear(store, "head.rcnn.cls", cfg.match_hidden, num_classes + 1, rng, 0.1);
  init_linear(store, "head.rcnn.reg", cfg.match_hidden, 4, rng, 0.1);
}

Tensor support_prototype(const TokenSequence& support_feat) {
  support_feat.validate();
  return mean(mean(support_feat.tokens, 0, false, Summation::kSorted), 0, true);
}

RpnOutput rpn_forward(const TokenSequence& query_feat, const Tensor* prototype, const ParamStore& params,
                      const HeadConfig& cfg, int64_t feature_stride) {
  query_feat.validate();
  if (query_feat.batch() != 1) throw ShapeError("RPN expects a single query feature map");
  Tensor x = query_feat.tokens;
  if (prototype) x = mul(x, *prototype);
  const Tensor hidden = gelu(linear(x, linear_weights(params, "head.rpn.hidden")));
  const int64_t n = query_feat.count();
  const int64_t a = cfg.anchors.per_location();
  RpnOutput out;
  out.logits = reshape(linear(hidden, linear_weights(params, "head.rpn.cls")), {n * a});
  out.deltas = reshape(linear(hidden, linear_weights(params, "head.rpn.reg")), {n * a, 4});
  out.anchors = make_anchors(query_feat.grid_h, query_feat.grid_w, feature_stride, cfg.anchors);
  return out;
}

namespace {

double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

BoxDelta delta_row(const Tensor& deltas, int64_t i) {
  const auto d = deltas.data();
  return {d[static_cast<size_t>(4 * i)], d[static_cast<size_t>(4 * i + 1)], d[static_cast<size_t>(4 * i + 2)],
          d[static_cast<size_t>(4 * i + 3)]};
}

}  // namespace

std::vector<Proposal> proposals_from_rpn(const RpnOutput& rpn, double image_w, double image_h, int64_t top_k,
                                         double nms_iou) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  const auto logits = rpn.logits.data();
  for (size_t i = 0; i < rpn.anchors.size(); ++i) {
    const Box b = clip_box(decode_delta(rpn.anchors[i], delta_row(rpn.deltas, static_cast<int64_t>(i))), image_w,
                           image_h);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    boxes.push_back(b);
    scores.push_back(sigmoid_value(logits[i]));
  }
  std::vector<Proposal> out;
  for (int64_t k : nms(boxes, scores, nms_iou)) {
    if (static_cast<int64_t>(out.size()) >= top_k) break;
    out.push_back({boxes[static_cast<size_t>(k)], scores[static_cast<size_t>(k)]});
  }
  return out;
}

std::vector<Proposal> generate_proposals(const TokenSequence& query_feat, const TokenSequence& support_feat,
                                         const ParamStore& params, const HeadConfig& cfg, int64_t feature_stride,
                                         double image_size, int64_t top_k) {
  const Tensor proto = support_prototype(support_feat);
  const RpnOutput rpn = rpn_forward(query_feat, &proto, params, cfg, feature_stride);
  return proposals_from_rpn(rpn, image_size, image_size, top_k, cfg.rpn_nms_iou);
}

Tensor roi_align(const TokenSequence& feat, std::span<const Box> boxes, std::span<const int64_t> batch_index,
                 int64_t roi_size, int64_t sampling_ratio, double feature_stride) {
  feat.validate();
  if (boxes.size() != batch_index.size()) throw ShapeError("roi_align needs one batch index per box");
  if (roi_size < 1 || sampling_ratio < 1) throw ShapeError("roi_align size and sampling ratio must be positive");
  const int64_t h = feat.grid_h, w = feat.grid_w, n = h * w, c = feat.channels(), b = feat.batch();
  const auto k = static_cast<int64_t>(boxes.size());
  if (k == 0) throw ShapeError("roi_align with no boxes");
  const int64_t bins = roi_size * roi_size;
  // Dense interpolation matrix [K * R * R, B * N] applied to the stacked map.
  std::vector<double> interp(static_cast<size_t>(k * bins * b * n), 0.0);
  const double inv_count = 1.0 / static_cast<double>(sampling_ratio * sampling_ratio);
  for (int64_t r = 0; r < k; ++r) {
    const Box& box = boxes[static_cast<size_t>(r)];
    if (!box.valid() || box.area() < 1.0) {
      throw ShapeError("degenerate RoI box (area < 1 px^2)");
    }
    const int64_t bi = batch_index[static_cast<size_t>(r)];
    if (bi < 0 || bi >= b) throw ShapeError("roi_align batch index out of range");
    const double x1 = box.x1 / feature_stride - 0.5, y1 = box.y1 / feature_stride - 0.5;
    const double bin_w = (box.x2 / feature_stride - 0.5 - x1) / static_cast<double>(roi_size);
    const double bin_h = (box.y2 / feature_stride - 0.5 - y1) / static_cast<double>(roi_size);
    for (int64_t py = 0; py < roi_size; ++py) {
      for (int64_t px = 0; px < roi_size; ++px) {
        double* row = interp.data() + ((r * roi_size + py) * roi_size + px) * b * n + bi * n;
        for (int64_t iy = 0; iy < sampling_ratio; ++iy) {
          double y = y1 + static_cast<double>(py) * bin_h +
                     (static_cast<double>(iy) + 0.5) * bin_h / static_cast<double>(sampling_ratio);
          for (int64_t ix = 0; ix < sampling_ratio; ++ix) {
            double x = x1 + static_cast<double>(px) * bin_w +
                       (static_cast<double>(ix) + 0.5) * bin_w / static_cast<double>(sampling_ratio);
            double yy = y, xx = x;
            if (yy < -1.0 || yy > static_cast<double>(h) || xx < -1.0 || xx > static_cast<double>(w)) continue;
            yy = std::max(yy, 0.0);
            xx = std::max(xx, 0.0);
            auto y_lo = static_cast<int64_t>(yy), x_lo = static_cast<int64_t>(xx);
            int64_t y_hi, x_hi;
            if (y_lo >= h - 1) {
              y_lo = y_hi = h - 1;
              yy = static_cast<double>(y_lo);
            } else {
              y_hi = y_lo + 1;
            }
            if (x_lo >= w - 1) {
              x_lo = x_hi = w - 1;
              xx = static_cast<double>(x_lo);
            } else {
              x_hi = x_lo + 1;
            }
            const double ly = yy - static_cast<double>(y_lo), lx = xx - static_cast<double>(x_lo);
            const double hy = 1.0 - ly, hx = 1.0 - lx;
            row[y_lo * w + x_lo] += hy * hx * inv_count;
            row[y_lo * w + x_hi] += hy * lx * inv_count;
            row[y_hi * w + x_lo] += ly * hx * inv_count;
            row[y_hi * w + x_hi] += ly * lx * inv_count;
          }
        }
      }
    }
  }
  const Tensor weights = Tensor::from({k * bins, b * n}, std::move(interp));
  const Tensor stacked = reshape(feat.tokens, {b * n, c});
  return reshape(matmul(weights, stacked), {k, roi_size, roi_size, c});
}

Tensor roi_align(const TokenSequence& feat, std::span<const Box> boxes, int64_t roi_size, int64_t sampling_ratio,
                 double feature_stride) {
  const std::vector<int64_t> zeros(boxes.size(), 0);
  return roi_align(feat, boxes, zeros, roi_size, sampling_ratio, feature_stride);
}

Tensor support_roi_features(const TokenSequence& support_feat, double support_size, const HeadConfig& cfg,
                            double feature_stride) {
  const int64_t b = support_feat.batch();
  std::vector<Box> boxes(static_cast<size_t>(b), Box{0, 0, support_size, support_size});
  std::vector<int64_t> index(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) index[static_cast<size_t>(i)] = i;
  const Tensor f_s = roi_align(support_feat, boxes, index, cfg.roi_size, cfg.sampling_ratio, feature_stride);
  return mean(f_s, 0, true, Summation::kSorted);
}

namespace {

TokenSequence roi_tokens(const Tensor& f, Branch branch) {
  if (f.dim() != 4) throw ShapeError("RoI features must be [B, R, R, C], got " + shape_str(f.shape()));
  return from_grid(f, branch);
}

TokenSequence s4_norm(const TokenSequence& x, const ParamStore& params, double eps) {
  return {layer_norm(x.tokens, params.get("head.s4.norm.g"), params.get("head.s4.norm.b"), eps), x.grid_h, x.grid_w,
          x.branch};
}

}  // namespace

Stage4Output stage4_roi_extract(const Tensor& f_p, const Tensor& f_s_avg, const ParamStore& params,
                                const HeadConfig& cfg, double eps, AttentionMode mode, AttentionCapture* capture) {
  if (f_p.dim() != 4 || f_s_avg.dim() != 4 || f_p.size(1) != f_s_avg.size(1) || f_p.size(2) != f_s_avg.size(2) ||
      f_p.size(3) != f_s_avg.size(3)) {
    throw ShapeError("stage-4 inputs must share roi size and channels: " + shape_str(f_p.shape()) + " vs " +
                     shape_str(f_s_avg.shape()));
  }
  if (f_s_avg.size(0) != 1) throw ShapeError("stage-4 support input must have batch 1");
  const int64_t c = f_p.size(3);
  TokenSequence p = roi_tokens(f_p, Branch::kQuery);
  TokenSequence s = roi_tokens(f_s_avg, Branch::kSupport);
  EmbeddingTable table{params.get("head.s4.pos_q"), params.get("head.s4.pos_s"), Tensor()};
  const bool use_branch = params.contains("head.s4.branch");
  if (use_branch) table.branch = params.get("head.s4.branch");
  p = add_embeddings(p, table, use_branch);
  s = add_embeddings(s, table, use_branch);
  const LayerConfig lc = cfg.stage4_config(c, eps);
  for (int64_t l = 0; l < cfg.stage4_layers; ++l) {
    const LayerWeights w = layer_weights(params, "head.s4.l" + std::to_string(l), lc);
    std::tie(p, s) = cross_transformer_layer(p, s, w, lc, mode, l + 1 == cfg.stage4_layers ? capture : nullptr);
  }
  return {s4_norm(p, params, eps), s4_norm(s, params, eps)};
}

TokenSequence stage4_single(const Tensor& f_p, const ParamStore& params, const HeadConfig& cfg, double eps) {
  TokenSequence p = roi_tokens(f_p, Branch::kQuery);
  p = add_embeddings(p, EmbeddingTable{params.get("head.s4.pos_q"), params.get("head.s4.pos_s"), Tensor()}, false);
  const LayerConfig lc = cfg.stage4_config(p.channels(), eps);
  for (int64_t l = 0; l < cfg.stage4_layers; ++l) {
    p = self_transformer_layer(p, layer_weights(params, "head.s4.l" + std::to_string(l), lc), lc);
  }
  return s4_norm(p, params, eps);
}

MatchOutput match_pairs(const TokenSequence& g_p, const TokenSequence& g_s, const ParamStore& params) {
  g_p.validate();
  g_s.validate();
  if (g_s.batch() != 1) throw ShapeError("matcher expects a single support sequence");
  const int64_t bp = g_p.batch();
  const Tensor vp = mean(g_p.tokens, 1);                  // [B_p, C]
  const Tensor vs = repeat(mean(g_s.tokens, 1), bp, 0);   // [B_p, C]
  const Tensor hidden = gelu(linear(concat({vp, vs}, 1), linear_weights(params, "head.match.fc1")));
  const Tensor out = linear(hidden, linear_weights(params, "head.match.fc2"));  // [B_p, 5]
  return {reshape(slice(out, 1, 0, 1), {bp}), slice(out, 1, 1, 4)};
}

RcnnOutput rcnn_forward(const TokenSequence& g_p, const ParamStore& params) {
  g_p.validate();
  const Tensor hidden = gelu(linear(mean(g_p.tokens, 1), linear_weights(params, "head.rcnn.fc1")));
  return {linear(hidden, linear_weights(params, "head.rcnn.cls")),
          linear(hidden, linear_weights(params, "head.rcnn.reg"))};
}

AnchorTargets rpn_targets(std::span<const Box> anchors, std::span<const Box> gt, double pos_iou, double neg_iou) {
  AnchorTargets t;
  t.labels.assign(anchors.size(), 0);
  t.deltas.assign(anchors.size(), BoxDelta{0, 0, 0, 0});
  if (gt.empty()) return t;
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int64_t> best_gt(anchors.size(), 0);
  std::vector<double> gt_best(gt.size(), 0.0);
  for (size_t a = 0; a < anchors.size(); ++a) {
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[a], gt[g]);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int64_t>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (best_iou[a] >= pos_iou) {
      t.labels[a] = 1;
    } else if (best_iou[a] >= neg_iou) {
      t.labels[a] = -1;
    }
  }
  // Every ground-truth box keeps its best-matching anchors as positives.
  for (size_t g = 0; g < gt.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (size_t a = 0; a < anchors.size(); ++a) {
      if (iou(anchors[a], gt[g]) == gt_best[g]) {
        t.labels[a] = 1;
        best_gt[a] = static_cast<int64_t>(g);
      }
    }
  }
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (t.labels[a] == 1) t.deltas[a] = encode_delta(anchors[a], gt[static_cast<size_t>(best_gt[a])]);
  }
  return t;
}

namespace {

// Smooth-L1 over the rows in `rows`, summed over coordinates and averaged
// over rows; a constant zero when `rows` is empty.
Tensor regression_loss(const Tensor& deltas, const std::vector<int64_t>& rows, const std::vector<BoxDelta>& targets,
                       double beta) {
  if (rows.empty()) return Tensor::scalar(0.0);
  std::vector<double> flat;
  flat.reserve(rows.size() * 4);
  for (const BoxDelta& d : targets) flat.insert(flat.end(), d.begin(), d.end());
  const Tensor pred = index_select(deltas, 0, rows);
  const Tensor target = Tensor::from({static_cast<int64_t>(rows.size()), 4}, std::move(flat));
  return scale(sum(smooth_l1(pred, target, beta)), 1.0 / static_cast<double>(rows.size()));
}

}  // namespace

Tensor rpn_loss(const RpnOutput& rpn, std::span<const Box> gt, const HeadConfig& cfg) {
  const AnchorTargets t = rpn_targets(rpn.anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
  std::vector<int64_t> sampled, positives;
  std::vector<double> labels;
  std::vector<BoxDelta> targets;
  for (size_t a = 0; a < t.labels.size(); ++a) {
    if (t.labels[a] < 0) continue;
    sampled.push_back(static_cast<int64_t>(a));
    labels.push_back(static_cast<double>(t.labels[a]));
    if (t.labels[a] == 1) {
      positives.push_back(static_cast<int64_t>(a));
      targets.push_back(t.deltas[a]);
    }
  }
  const Tensor cls =
      sampled.empty() ? Tensor::scalar(0.0) : binary_cross_entropy(index_select(rpn.logits, 0, sampled), labels);
  return add(cls, regression_loss(rpn.deltas, positives, targets, cfg.smooth_l1_beta));
}

std::vector<int64_t> assign_proposals(std::span<const Box> proposals, std::span<const Box> gt, double pos_iou) {
  std::vector<int64_t> out(proposals.size(), -1);
  for (size_t p = 0; p < proposals.size(); ++p) {
    double best = 0.0;
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(proposals[p], gt[g]);
      if (v >= pos_iou && v > best) {
        best = v;
        out[p] = static_cast<int64_t>(g);
      }
    }
  }
  return out;
}

Tensor matching_loss(const MatchOutput& match, std::span<const Box> proposals, std::span<const Box> gt,
                     const HeadConfig& cfg) {
  if (match.logits.numel() != static_cast<int64_t>(proposals.size())) {
    throw ShapeError("matching loss: one logit per proposal expected");
  }
  const auto assigned = assign_proposals(proposals, gt, cfg.head_pos_iou);
  std::vector<double> labels(proposals.size(), 0.0);
  std::vector<int64_t> positives;
  std::vector<BoxDelta> targets;
  for (size_t p = 0; p < proposals.size(); ++p) {
    if (assigned[p] < 0) continue;
    labels[p] = 1.0;
    positives.push_back(static_cast<int64_t>(p));
    targets.push_back(encode_delta(proposals[p], gt[static_cast<size_t>(assigned[p])]));
  }
  return add(binary_cross_entropy(match.logits, labels),
             regression_loss(match.deltas, positives, targets, cfg.smooth_l1_beta));
}

TwoBranchLosses head_losses(const MatchOutput& match, const RpnOutput& rpn, std::span<const Box> proposals,
                            std::span<const Box> gt, const HeadConfig& cfg) {
  TwoBranchLosses out;
  out.matching = matching_loss(match, proposals, gt, cfg);
  out.att_rpn = rpn_loss(rpn, gt, cfg);
  out.total = add(out.att_rpn, out.matching);
  return out;
}

SingleBranchLosses single_branch_losses(const RcnnOutput& rcnn, const RpnOutput& rpn, std::span<const Box> proposals,
                                        std::span<const Box> gt, std::span<const int> gt_labels,
                                        const HeadConfig& cfg) {
  if (gt.size() != gt_labels.size()) throw ShapeError("one label per ground-truth box expected");
  const auto assigned = assign_proposals(proposals, gt, cfg.head_pos_iou);
  std::vector<int> labels(proposals.size(), 0);
  std::vector<int64_t> positives;
  std::vector<BoxDelta> targets;
  for (size_t p = 0; p < proposals.size(); ++p) {
    if (assigned[p] < 0) continue;
    labels[p] = gt_labels[static_cast<size_t>(assigned[p])];
    positives.push_back(static_cast<int64_t>(p));
    targets.push_back(encode_delta(proposals[p], gt[static_cast<size_t>(assigned[p])]));
  }
  SingleBranchLosses out;
  out.rcnn = add(cross_entropy(rcnn.cls_logits, labels),
                 regression_loss(rcnn.deltas, positives, targets, cfg.smooth_l1_beta));
  out.rpn = rpn_loss(rpn, gt, cfg);
  out.total = add(out.rpn, out.rcnn);
  return out;
}

namespace {

std::vector<DetectionResult> nms_detections(std::vector<DetectionResult> dets, const PostprocessConfig& cfg) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    scores.push_back(d.score);
  }
  std::vector<DetectionResult> out;
  for (int64_t k : nms(boxes, scores, cfg.nms_iou)) {
    if (static_cast<int64_t>(out.size()) >= cfg.max_detections) break;
    out.push_back(dets[static_cast<size_t>(k)]);
  }
  return out;
}

}  // namespace

std::vector<DetectionResult> postprocess(const MatchOutput& match, std::span<const Box> proposals, int class_id,
                                         double image_w, double image_h, const PostprocessConfig& cfg) {
  const auto logits = match.logits.data();
  std::vector<DetectionResult> dets;
  for (size_t p = 0; p < proposals.size(); ++p) {
    const double score = sigmoid_value(logits[p]);
    if (score < cfg.score_thresh) continue;
    const Box b = clip_box(decode_delta(proposals[p], delta_row(match.deltas, static_cast<int64_t>(p))), image_w,
                           image_h);
    if (!b.valid()) continue;
    dets.push_back({b, score, class_id});
  }
  return nms_detections(std::move(dets), cfg);
}

std::vector<DetectionResult> postprocess_multiclass(const RcnnOutput& rcnn, std::span<const Box> proposals,
                                                    std::span<const int> class_ids, double image_w, double image_h,
                                                    const PostprocessConfig& cfg) {
  const int64_t n = rcnn.cls_logits.size(0), k = rcnn.cls_logits.size(1);
  if (k != static_cast<int64_t>(class_ids.size()) + 1) throw ShapeError("class id table does not match head width");
  const auto logits = rcnn.cls_logits.data();
  std::vector<DetectionResult> all;
  for (int64_t cls = 1; cls < k; ++cls) {
    std::vector<DetectionResult> dets;
    for (int64_t p = 0; p < n; ++p) {
      const double* row = logits.data() + p * k;
      const double mx = *std::max_element(row, row + k);
      double z = 0.0;
      for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
      const double score = std::exp(row[cls] - mx) / z;
      if (score < cfg.score_thresh) continue;
      const Box b = clip_box(decode_delta(proposals[static_cast<size_t>(p)], delta_row(rcnn.deltas, p)), image_w,
                             image_h);
      if (!b.valid()) continue;
      dets.push_back({b, score, class_ids[static_cast<size_t>(cls - 1)]});
    }
    auto kept = nms_detections(std::move(dets), cfg);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return all;
}

}  // namespace fct
