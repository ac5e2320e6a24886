#include "fct/vision_embed.hpp"

namespace fct {

void TokenSequence::validate() const {
  if (!tokens.defined() || tokens.dim() != 3) {
    throw ShapeError("token sequence must be [B, N, C]");
  }
  if (tokens.size(1) != grid_h * grid_w) {
    throw ShapeError("token count " + std::to_string(tokens.size(1)) + " does not match grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
}

Tensor to_grid(const TokenSequence& x) {
  x.validate();
  return reshape(x.tokens, {x.batch(), x.grid_h, x.grid_w, x.channels()});
}

TokenSequence from_grid(const Tensor& grid, Branch branch) {
  if (grid.dim() != 4) throw ShapeError("token grid must be [B, H, W, C], got " + shape_str(grid.shape()));
  const int64_t h = grid.size(1), w = grid.size(2);
  return {reshape(grid, {grid.size(0), h * w, grid.size(3)}), h, w, branch};
}

LinearWeights linear_weights(const ParamStore& store, const std::string& prefix) {
  return {store.get(prefix + ".w"), store.get(prefix + ".b")};
}

Tensor linear(const Tensor& x, const LinearWeights& w) { return add(matmul(x, w.weight), w.bias); }

int64_t patch_input_dim(int64_t patch, int64_t in_channels, bool overlap) {
  const int64_t k = overlap ? 2 * patch - 1 : patch;
  return k * k * in_channels;
}

namespace {

// im2col with zero padding for the overlapping variant.
Tensor overlapping_patches(const Tensor& image, int64_t patch) {
  const int64_t b = image.size(0), h = image.size(1), w = image.size(2), c = image.size(3);
  const int64_t k = 2 * patch - 1, pad = patch - 1;
  const int64_t gh = h / patch, gw = w / patch;
  SparseMap map;
  map.out_shape = {b, gh * gw, k * k * c};
  map.row_offsets.push_back(0);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ty = 0; ty < gh; ++ty) {
      for (int64_t tx = 0; tx < gw; ++tx) {
        for (int64_t ky = 0; ky < k; ++ky) {
          for (int64_t kx = 0; kx < k; ++kx) {
            for (int64_t ch = 0; ch < c; ++ch) {
              const int64_t y = ty * patch - pad + ky;
              const int64_t x = tx * patch - pad + kx;
              if (y >= 0 && y < h && x >= 0 && x < w) {
                map.indices.push_back(((bi * h + y) * w + x) * c + ch);
                map.weights.push_back(1.0);
              }
              map.row_offsets.push_back(static_cast<int64_t>(map.indices.size()));
            }
          }
        }
      }
    }
  }
  return sparse_apply(image, std::move(map));
}

}  // namespace

TokenSequence patch_embed(const Tensor& image, int64_t patch, const LinearWeights& w, Branch branch, bool overlap) {
  if (image.dim() != 4) throw ShapeError("patch_embed expects [B, H, W, C] images, got " + shape_str(image.shape()));
  if (patch < 1) throw ShapeError("patch size must be positive");
  const int64_t b = image.size(0), h = image.size(1), wd = image.size(2), c = image.size(3);
  if (h % patch != 0 || wd % patch != 0) {
    throw ShapeError("image extents " + std::to_string(h) + "x" + std::to_string(wd) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const int64_t gh = h / patch, gw = wd / patch;
  const int64_t in_dim = patch_input_dim(patch, c, overlap);
  if (w.weight.dim() != 2 || w.weight.size(0) != in_dim) {
    throw ShapeError("patch projection weight " + shape_str(w.weight.shape()) + " expects " + std::to_string(in_dim) +
                     " input rows");
  }
  Tensor patches;
  if (overlap) {
    patches = overlapping_patches(image, patch);
  } else if (patch == 1) {
    patches = reshape(image, {b, gh * gw, c});
  } else {
    Tensor tiles = reshape(image, {b, gh, patch, gw, patch, c});
    tiles = permute(tiles, {0, 1, 3, 2, 4, 5});
    patches = reshape(tiles, {b, gh * gw, in_dim});
  }
  return {linear(patches, w), gh, gw, branch};
}

TokenSequence patch_merge(const TokenSequence& x, int64_t stride, const LinearWeights& w, bool overlap) {
  x.validate();
  if (stride < 1 || x.grid_h % stride != 0 || x.grid_w % stride != 0) {
    throw ShapeError("token grid " + std::to_string(x.grid_h) + "x" + std::to_string(x.grid_w) +
                     " not divisible by merge stride " + std::to_string(stride));
  }
  return patch_embed(to_grid(x), stride, w, x.branch, overlap);
}

TokenSequence add_embeddings(const TokenSequence& x, const EmbeddingTable& table, bool use_branch) {
  x.validate();
  const Tensor& pos = x.branch == Branch::kQuery ? table.pos_query : table.pos_support;
  if (pos.shape() != Shape{x.count(), x.channels()}) {
    throw ShapeError("position table " + shape_str(pos.shape()) + " does not match token sequence " +
                     shape_str(x.tokens.shape()) + " (no resolution interpolation)");
  }
  Tensor out = add(x.tokens, pos);
  if (use_branch) {
    out = add(out, slice(table.branch, 0, static_cast<int64_t>(x.branch), 1));
  }
  return {out, x.grid_h, x.grid_w, x.branch};
}

}  // namespace fct
