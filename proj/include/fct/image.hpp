#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "fct/boxes.hpp"
#include "fct/tensor.hpp"

namespace fct {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB raster.
struct Image {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int64_t w, int64_t h, uint8_t fill = 0)
      : width(w), height(h), rgb(static_cast<size_t>(w * h * 3), fill) {}
  uint8_t* px(int64_t x, int64_t y) { return rgb.data() + (y * width + x) * 3; }
  const uint8_t* px(int64_t x, int64_t y) const { return rgb.data() + (y * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Crop of `region` (may extend past the border; samples are clamped)
/// bilinearly resampled to out_w x out_h.
Image crop_resize(const Image& image, const Box& region, int64_t out_w, int64_t out_h);

/// Stacks equally sized images into [B, H, W, 3], standardized per channel
/// to roughly zero mean and unit scale.
Tensor images_to_tensor(std::span<const Image> images);
Tensor image_to_tensor(const Image& image);

}  // namespace fct
