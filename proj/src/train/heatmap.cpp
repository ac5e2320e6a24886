#include "fct/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fct {

AttentionMasks attention_masks(std::span<const double> row, int64_t qh, int64_t qw, int64_t sh, int64_t sw) {
  const auto nq = static_cast<size_t>(qh * qw), ns = static_cast<size_t>(sh * sw);
  if (row.size() != nq + ns) {
    throw ShapeError("attention row of length " + std::to_string(row.size()) + " does not cover " +
                     std::to_string(nq) + " + " + std::to_string(ns) + " tokens");
  }
  const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  auto norm = [&](double v) { return span > 0.0 ? (v - lo) / span : 0.5; };
  AttentionMasks out{{qh, qw, {}}, {sh, sw, {}}};
  for (size_t i = 0; i < nq; ++i) out.query.values.push_back(norm(row[i]));
  for (size_t i = 0; i < ns; ++i) out.support.values.push_back(norm(row[nq + i]));
  return out;
}

Image render_heatmap(const Heatmap& map, int64_t out_w, int64_t out_h) {
  if (map.grid_h <= 0 || map.grid_w <= 0 || static_cast<int64_t>(map.values.size()) != map.grid_h * map.grid_w) {
    throw ShapeError("heatmap grid does not match its values");
  }
  Image img(out_w, out_h);
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t gy = y * map.grid_h / out_h;
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t gx = x * map.grid_w / out_w;
      const double v = std::clamp(map.values[static_cast<size_t>(gy * map.grid_w + gx)], 0.0, 1.0);
      const auto g = static_cast<uint8_t>(std::lround(255.0 * v));
      uint8_t* p = img.px(x, y);
      p[0] = p[1] = p[2] = g;
    }
  }
  return img;
}

int64_t token_at_point(double x, double y, double image_w, double image_h, int64_t grid_h, int64_t grid_w) {
  if (!(x >= 0.0 && y >= 0.0 && x < image_w && y < image_h)) {
    throw PointOutsideError("point (" + std::to_string(x) + ", " + std::to_string(y) + ") is outside the " +
                            std::to_string(static_cast<int64_t>(image_w)) + "x" +
                            std::to_string(static_cast<int64_t>(image_h)) + " image");
  }
  const auto gx = std::min(grid_w - 1, static_cast<int64_t>(x * static_cast<double>(grid_w) / image_w));
  const auto gy = std::min(grid_h - 1, static_cast<int64_t>(y * static_cast<double>(grid_h) / image_h));
  return gy * grid_w + gx;
}

std::vector<double> attention_row(const Tensor& probs, int64_t batch, int64_t token, int64_t head) {
  if (probs.dim() != 4) throw ShapeError("attention probabilities must be [B, h, N, M]");
  const int64_t b = probs.size(0), h = probs.size(1), n = probs.size(2), m = probs.size(3);
  if (batch < 0 || batch >= b || token < 0 || token >= n) throw ShapeError("attention row index out of range");
  if (head >= h) throw ShapeError("head " + std::to_string(head) + " does not exist (" + std::to_string(h) + " heads)");
  std::vector<double> row(static_cast<size_t>(m), 0.0);
  const auto data = probs.data();
  const int64_t first = head >= 0 ? head : 0, last = head >= 0 ? head + 1 : h;
  for (int64_t k = first; k < last; ++k) {
    const int64_t base = ((batch * h + k) * n + token) * m;
    for (int64_t j = 0; j < m; ++j) row[static_cast<size_t>(j)] += data[static_cast<size_t>(base + j)];
  }
  for (double& v : row) v /= static_cast<double>(last - first);
  return row;
}

}  // namespace fct
