#include "fct/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fct {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

Box expand_box(const Box& b, double fraction) {
  const double dx = 0.5 * fraction * b.width();
  const double dy = 0.5 * fraction * b.height();
  return {b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy};
}

std::vector<Box> jitter_boxes(std::span<const Box> boxes, int64_t per_box, double width, double height) {
  // (dx, dy, scale) with shifts as fractions of the box size.
  static constexpr double kPattern[8][3] = {{0.08, 0.08, 1.0},  {-0.08, -0.08, 1.0}, {0.08, -0.08, 1.0},
                                            {-0.08, 0.08, 1.0}, {0.0, 0.0, 1.15},    {0.0, 0.0, 0.87},
                                            {0.12, 0.0, 1.0},   {0.0, -0.12, 1.0}};
  const int64_t n = std::clamp<int64_t>(per_box, 0, 8);
  std::vector<Box> out;
  for (const Box& b : boxes) {
    const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
    for (int64_t i = 0; i < n; ++i) {
      const auto& [fx, fy, s] = kPattern[i];
      const double hw = 0.5 * s * b.width(), hh = 0.5 * s * b.height();
      const double x = cx + fx * b.width(), y = cy + fy * b.height();
      const Box j = clip_box({x - hw, y - hh, x + hw, y + hh}, width, height);
      if (j.area() >= 1.0) out.push_back(j);
    }
  }
  return out;
}

BoxDelta encode_delta(const Box& anchor, const Box& target) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double tw = target.width(), th = target.height();
  const double tcx = target.x1 + 0.5 * tw, tcy = target.y1 + 0.5 * th;
  return {(tcx - acx) / aw, (tcy - acy) / ah, std::log(tw / aw), std::log(th / ah)};
}

Box decode_delta(const Box& anchor, const BoxDelta& delta) {
  static const double kMaxLog = std::log(1000.0 / 16.0);
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double cx = acx + delta[0] * aw;
  const double cy = acy + delta[1] * ah;
  const double w = aw * std::exp(std::min(delta[2], kMaxLog));
  const double h = ah * std::exp(std::min(delta[3], kMaxLog));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int64_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  std::vector<int64_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  std::vector<int64_t> keep;
  for (int64_t i : order) {
    bool suppressed = false;
    for (int64_t k : keep) {
      if (iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(k)]) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(i);
  }
  return keep;
}

std::vector<Box> make_anchors(int64_t grid_h, int64_t grid_w, int64_t stride, const AnchorConfig& cfg) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<size_t>(grid_h * grid_w * cfg.per_location()));
  for (int64_t y = 0; y < grid_h; ++y) {
    for (int64_t x = 0; x < grid_w; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(stride);
      const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(stride);
      for (double ratio : cfg.ratios) {
        const double w = cfg.size / std::sqrt(ratio);
        const double h = cfg.size * std::sqrt(ratio);
        anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
      }
    }
  }
  return anchors;
}

}  // namespace fct
