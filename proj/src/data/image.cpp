#include "fct/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace fct {

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

int64_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  // Skips whitespace and '#' comments between header fields.
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int64_t v = -1;
  if (!(in >> v) || v < 0) throw IoError("malformed PPM header in " + path.string());
  return v;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw IoError(path.string() + " is not a binary PPM (P6)");
  const int64_t w = read_header_int(in, path);
  const int64_t h = read_header_int(in, path);
  const int64_t maxval = read_header_int(in, path);
  if (maxval != 255) throw IoError("unsupported PPM maxval in " + path.string());
  in.get();  // single whitespace before the raster
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw IoError("truncated PPM " + path.string());
  return img;
}

Image crop_resize(const Image& image, const Box& region, int64_t out_w, int64_t out_h) {
  Image out(out_w, out_h);
  const double sx = region.width() / static_cast<double>(out_w);
  const double sy = region.height() / static_cast<double>(out_h);
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp(region.y1 + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const auto y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, image.height - 1);
    const double ly = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp(region.x1 + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const auto x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, image.width - 1);
      const double lx = fx - static_cast<double>(x0);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ly) * ((1 - lx) * image.px(x0, y0)[c] + lx * image.px(x1, y0)[c]) +
                         ly * ((1 - lx) * image.px(x0, y1)[c] + lx * image.px(x1, y1)[c]);
        out.px(x, y)[c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Tensor images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("no images to stack");
  const int64_t w = images.front().width, h = images.front().height;
  std::vector<double> data;
  data.reserve(images.size() * static_cast<size_t>(w * h * 3));
  for (const Image& img : images) {
    if (img.width != w || img.height != h) throw ShapeError("images to stack differ in size");
    for (uint8_t v : img.rgb) data.push_back((static_cast<double>(v) / 255.0 - 0.5) / 0.25);
  }
  return Tensor::from({static_cast<int64_t>(images.size()), h, w, 3}, std::move(data));
}

Tensor image_to_tensor(const Image& image) { return images_to_tensor(std::span<const Image>(&image, 1)); }

}  // namespace fct
