#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fct/cross_attention.hpp"
#include "fct/image.hpp"

namespace fct {

class PointOutsideError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Normalized attention values on a token grid, row-major, in [0, 1].
struct Heatmap {
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  std::vector<double> values;
};

struct AttentionMasks {
  Heatmap query;
  Heatmap support;
};

/// Splits one attention row into its query-token block (qh x qw) and
/// support-token block (sh x sw) and min-max normalizes both jointly over the
/// whole row. A constant row maps to 0.5 everywhere.
AttentionMasks attention_masks(std::span<const double> row, int64_t qh, int64_t qw, int64_t sh, int64_t sw);

/// Gray image, each cell upscaled by nearest neighbour to out_w x out_h.
/// Pixel value = round(255 * v).
Image render_heatmap(const Heatmap& map, int64_t out_w, int64_t out_h);

/// Index of the token whose cell on a grid_h x grid_w grid over an
/// image_w x image_h image contains pixel (x, y). Throws PointOutsideError
/// if the point lies outside the image.
int64_t token_at_point(double x, double y, double image_w, double image_h, int64_t grid_h, int64_t grid_w);

/// Row `token` of a captured probability tensor [B, h, N, M] for batch entry
/// `batch`, averaged over heads, or a single head when `head >= 0`.
std::vector<double> attention_row(const Tensor& probs, int64_t batch, int64_t token, int64_t head = -1);

}  // namespace fct
