#pragma once

#include <span>
#include <vector>

#include "fct/tensor.hpp"

namespace fct {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

/// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

enum class Summation { kSequential, kSorted };

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
/// kSorted sums each reduced fiber in ascending value order, so the result is
/// bit-identical under any permutation of the reduced axis.
Tensor mean(const Tensor& x, int64_t axis, bool keepdim = false, Summation order = Summation::kSequential);

Tensor softmax(const Tensor& x, int64_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);
Tensor transpose_last(const Tensor& x);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length);
Tensor index_select(const Tensor& x, int64_t axis, std::span<const int64_t> indices);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
/// Tiles `x` `times` times along `axis`: out[.., t*n + j, ..] = x[.., j, ..].
Tensor repeat(const Tensor& x, int64_t times, int64_t axis);

/// Average pooling of a channels-last map [B, H, W, C], no padding.
Tensor avg_pool2d(const Tensor& x, int64_t kernel, int64_t stride);

/// Elementwise smooth-L1 with transition point `beta`; target is constant.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta);
/// Mean multi-class cross-entropy of logits [N, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean binary cross-entropy on logits (any shape) against {0,1} labels.
Tensor binary_cross_entropy(const Tensor& logits, std::span<const double> labels);

/// Sparse linear map: out[o] = sum_{k in row o} weights[k] * x[indices[k]].
/// Rows are given in CSR form (row_offsets has numel(out_shape)+1 entries).
struct SparseMap {
  Shape out_shape;
  std::vector<int64_t> row_offsets;
  std::vector<int64_t> indices;
  std::vector<double> weights;
};
Tensor sparse_apply(const Tensor& x, SparseMap map);

}  // namespace fct
