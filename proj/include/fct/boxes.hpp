#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace fct {

/// Axis-aligned box in continuous image-pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);
Box clip_box(const Box& b, double width, double height);
/// Box grown by `fraction` of its size (split evenly on both sides).
Box expand_box(const Box& b, double fraction);

/// Deterministic perturbations of each box (shifts and rescales, all with
/// IoU >= 0.6 against their source), clipped to the image. `per_box` of them
/// per input box, at most 8.
std::vector<Box> jitter_boxes(std::span<const Box> boxes, int64_t per_box, double width, double height);

using BoxDelta = std::array<double, 4>;  // dx, dy, log dw, log dh

BoxDelta encode_delta(const Box& anchor, const Box& target);
/// Inverse of encode_delta; log-size deltas are clamped to log(1000/16).
Box decode_delta(const Box& anchor, const BoxDelta& delta);

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (ties keep input order); a box is dropped when its IoU with a kept
/// box exceeds `iou_threshold`.
std::vector<int64_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

struct AnchorConfig {
  double size = 24.0;
  std::vector<double> ratios{1.0, 0.5, 2.0};  // height / width

  int64_t per_location() const { return static_cast<int64_t>(ratios.size()); }
};

/// Anchors centred on every cell of a grid_h x grid_w feature map with the
/// given stride, ordered (row, column, ratio).
std::vector<Box> make_anchors(int64_t grid_h, int64_t grid_w, int64_t stride, const AnchorConfig& cfg);

}  // namespace fct
