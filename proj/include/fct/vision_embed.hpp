#pragma once

#include <cstdint>

#include "fct/ops.hpp"
#include "fct/params.hpp"

namespace fct {

enum class Branch : int { kQuery = 0, kSupport = 1 };

/// Batch of patch tokens laid out on a grid_h x grid_w token grid.
struct TokenSequence {
  Tensor tokens;  // [B, N, C]
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  Branch branch = Branch::kQuery;

  int64_t batch() const { return tokens.size(0); }
  int64_t count() const { return tokens.size(1); }
  int64_t channels() const { return tokens.size(2); }
  /// Throws ShapeError unless tokens is [B, grid_h * grid_w, C].
  void validate() const;
};

/// Token map as a channels-last image [B, grid_h, grid_w, C].
Tensor to_grid(const TokenSequence& x);
TokenSequence from_grid(const Tensor& grid, Branch branch);

struct LinearWeights {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};
LinearWeights linear_weights(const ParamStore& store, const std::string& prefix);
Tensor linear(const Tensor& x, const LinearWeights& w);

struct EmbeddingTable {
  Tensor pos_query;    // [N_q, C]
  Tensor pos_support;  // [N_s, C]
  Tensor branch;       // [2, C]; row 0 query, row 1 support
};

/// Splits [B, H, W, 3] images into patch x patch tiles and projects each
/// flattened tile (row, column, channel order) with `w`. With `overlap`,
/// the kernel widens to 2*patch-1 with zero padding patch-1 at the same
/// stride; `w` then has (2p-1)^2*3 input rows.
TokenSequence patch_embed(const Tensor& image, int64_t patch, const LinearWeights& w, Branch branch,
                          bool overlap = false);

/// Strided patch embedding over the token grid: N shrinks by stride^2.
TokenSequence patch_merge(const TokenSequence& x, int64_t stride, const LinearWeights& w, bool overlap = false);

/// x + pos[branch] + branch_row[branch]; the branch row is skipped when
/// `use_branch` is false so both branches get identical treatment.
TokenSequence add_embeddings(const TokenSequence& x, const EmbeddingTable& table, bool use_branch = true);

int64_t patch_input_dim(int64_t patch, int64_t in_channels, bool overlap);

}  // namespace fct
