#include "fct/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace fct {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int64_t norm_axis(int64_t axis, int64_t rank, const Shape& shape) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  return axis;
}

// [outer, n, inner] view of a shape around one axis.
struct AxisView {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int64_t axis) {
  AxisView v;
  for (int64_t i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  v.n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
};

std::vector<int64_t> contiguous_strides(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<size_t>(i)] = s[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  }
  return s;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (size_t i = 0; i < r; ++i) {
    const int64_t ia = static_cast<int64_t>(i) - static_cast<int64_t>(r - a.size());
    const int64_t ib = static_cast<int64_t>(i) - static_cast<int64_t>(r - b.size());
    const int64_t ea = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
    const int64_t eb = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(ea, eb);
    if (ea == 0 || eb == 0) bc.out[i] = 0;
    if (ia >= 0 && ea != 1) bc.stride_a[i] = sa[static_cast<size_t>(ia)];
    if (ib >= 0 && eb != 1) bc.stride_b[i] = sb[static_cast<size_t>(ib)];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const Shape& out = bc.out;
  const int64_t n = numel(out);
  if (n == 0) return;
  const size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  const int64_t inner = out[r - 1];
  const int64_t sa_in = bc.stride_a[r - 1], sb_in = bc.stride_b[r - 1];
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; i += inner) {
    for (int64_t j = 0; j < inner; ++j) f(i + j, oa + j * sa_in, ob + j * sb_in);
    for (int64_t d = static_cast<int64_t>(r) - 2; d >= 0; --d) {
      const auto ud = static_cast<size_t>(d);
      ++idx[ud];
      oa += bc.stride_a[ud];
      ob += bc.stride_b[ud];
      if (idx[ud] < out[ud]) break;
      oa -= bc.stride_a[ud] * out[ud];
      ob -= bc.stride_b[ud] * out[ud];
      idx[ud] = 0;
    }
  }
}

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Broadcast bc = broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<size_t>(numel(bc.out)));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  Shape shape = bc.out;
  return make_result(name, std::move(shape), std::move(out), {a, b},
                     [a, b, bc, bwd](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a);
                       auto gb = grad_sink(b);
                       const double* va = a.data().data();
                       const double* vb = b.data().data();
                       for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) {
                         double da = 0.0, db = 0.0;
                         bwd(va[ia], vb[ib], g[i], da, db);
                         if (!ga.empty()) ga[ia] += da;
                         if (!gb.empty()) gb[ib] += db;
                       });
                     });
}

template <class Fwd, class Deriv>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(name, x.shape(), std::move(out), {x},
                     [x, deriv](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       const auto xv = x.data();
                       for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], y[i]);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t m = a.size(-2), k = a.size(-1), k2 = b.size(-2), n = b.size(-1);
  if (k != k2) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Broadcast bc = broadcast_shapes(batch_a, batch_b, "matmul");
  std::vector<std::pair<int64_t, int64_t>> slices;
  slices.reserve(static_cast<size_t>(std::max<int64_t>(1, numel(bc.out))));
  for_each_broadcast(bc, [&](int64_t, int64_t ia, int64_t ib) { slices.emplace_back(ia * m * k, ib * k * n); });

  Shape out_shape = bc.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<size_t>(numel(out_shape)));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (size_t s = 0; s < slices.size(); ++s) {
    Eigen::Map<const RowMat> A(pa + slices[s].first, m, k);
    Eigen::Map<const RowMat> B(pb + slices[s].second, k, n);
    Eigen::Map<RowMat> C(out.data() + static_cast<int64_t>(s) * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [a, b, slices, m, k, n](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a);
                       auto gb = grad_sink(b);
                       for (size_t s = 0; s < slices.size(); ++s) {
                         Eigen::Map<const RowMat> G(g.data() + static_cast<int64_t>(s) * m * n, m, n);
                         if (!ga.empty()) {
                           Eigen::Map<const RowMat> B(b.data().data() + slices[s].second, k, n);
                           Eigen::Map<RowMat> GA(ga.data() + slices[s].first, m, k);
                           GA.noalias() += G * B.transpose();
                         }
                         if (!gb.empty()) {
                           Eigen::Map<const RowMat> A(a.data().data() + slices[s].first, m, k);
                           Eigen::Map<RowMat> GB(gb.data() + slices[s].second, k, n);
                           GB.noalias() += A.transpose() * G;
                         }
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
  const auto xs = x.data();
  const double total = std::accumulate(xs.begin(), xs.end(), 0.0);
  return make_result("sum", {}, {total}, {x}, [x](std::span<const double>, std::span<const double> g) {
    auto gx = grad_sink(x);
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

Tensor reduce_axis(const char* name, const Tensor& x, int64_t axis, bool keepdim, double factor, Summation order) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[static_cast<size_t>(axis)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + axis);
  }
  std::vector<double> out(static_cast<size_t>(v.outer * v.inner), 0.0);
  const double* px = x.data().data();
  if (order == Summation::kSorted) {
    std::vector<double> fiber(static_cast<size_t>(v.n));
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t i = 0; i < v.inner; ++i) {
        for (int64_t j = 0; j < v.n; ++j) fiber[static_cast<size_t>(j)] = px[(o * v.n + j) * v.inner + i];
        std::sort(fiber.begin(), fiber.end());
        double acc = 0.0;
        for (double f : fiber) acc += f;
        out[static_cast<size_t>(o * v.inner + i)] = acc * factor;
      }
    }
  } else {
    for (int64_t o = 0; o < v.outer; ++o) {
      double* dst = out.data() + o * v.inner;
      for (int64_t j = 0; j < v.n; ++j) {
        const double* src = px + (o * v.n + j) * v.inner;
        for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
      }
      for (int64_t i = 0; i < v.inner; ++i) dst[i] *= factor;
    }
  }
  return make_result(name, std::move(out_shape), std::move(out), {x},
                     [x, v, factor](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (int64_t o = 0; o < v.outer; ++o) {
                         for (int64_t j = 0; j < v.n; ++j) {
                           double* dst = gx.data() + (o * v.n + j) * v.inner;
                           const double* src = g.data() + o * v.inner;
                           for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i] * factor;
                         }
                       }
                     });
}

}  // namespace

Tensor sum(const Tensor& x, int64_t axis, bool keepdim) {
  return reduce_axis("sum_axis", x, axis, keepdim, 1.0, Summation::kSequential);
}

Tensor mean(const Tensor& x, int64_t axis, bool keepdim, Summation order) {
  const int64_t ax = norm_axis(axis, x.dim(), x.shape());
  const int64_t n = x.size(ax);
  if (n == 0) throw ShapeError("mean over an empty axis of " + shape_str(x.shape()));
  return reduce_axis("mean_axis", x, ax, keepdim, 1.0 / static_cast<double>(n), order);
}

Tensor softmax(const Tensor& x, int64_t axis) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* px = x.data().data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const int64_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < v.n; ++j) mx = std::max(mx, px[base + j * v.inner]);
      double z = 0.0;
      for (int64_t j = 0; j < v.n; ++j) {
        const double e = std::exp(px[base + j * v.inner] - mx);
        out[static_cast<size_t>(base + j * v.inner)] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int64_t j = 0; j < v.n; ++j) out[static_cast<size_t>(base + j * v.inner)] *= inv;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [x, v](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (int64_t o = 0; o < v.outer; ++o) {
                         for (int64_t i = 0; i < v.inner; ++i) {
                           const int64_t base = o * v.n * v.inner + i;
                           double dot = 0.0;
                           for (int64_t j = 0; j < v.n; ++j) dot += g[base + j * v.inner] * y[base + j * v.inner];
                           for (int64_t j = 0; j < v.n; ++j) {
                             const int64_t p = base + j * v.inner;
                             gx[p] += y[p] * (g[p] - dot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() < 1) throw ShapeError("layer_norm on a scalar");
  const int64_t c = x.size(-1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match last extent of " + shape_str(x.shape()));
  }
  const int64_t rows = c == 0 ? 0 : x.numel() / c;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> xhat(out.size());
  std::vector<double> rstd(static_cast<size_t>(rows));
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * rs;
      xhat[static_cast<size_t>(r * c + j)] = h;
      out[static_cast<size_t>(r * c + j)] = h * pg[j] + pb[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, c](std::span<const double>,
                                                                               std::span<const double> g) {
        auto gx = grad_sink(x);
        auto gg = grad_sink(gamma);
        auto gb = grad_sink(beta);
        const double* pg = gamma.data().data();
        std::vector<double> dxhat(static_cast<size_t>(c));
        for (int64_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          if (!gg.empty()) {
            for (int64_t j = 0; j < c; ++j) gg[j] += gr[j] * hr[j];
          }
          if (!gb.empty()) {
            for (int64_t j = 0; j < c; ++j) gb[j] += gr[j];
          }
          if (gx.empty()) continue;
          double s1 = 0.0, s2 = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            dxhat[static_cast<size_t>(j)] = gr[j] * pg[j];
            s1 += dxhat[static_cast<size_t>(j)];
            s2 += dxhat[static_cast<size_t>(j)] * hr[j];
          }
          const double k = rstd[static_cast<size_t>(r)] / static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j) {
            gx[r * c + j] += k * (static_cast<double>(c) * dxhat[static_cast<size_t>(j)] - s1 - hr[j] * s2);
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  int64_t infer = -1;
  int64_t known = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape with more than one inferred extent");
      infer = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    shape[static_cast<size_t>(infer)] = x.numel() / known;
  }
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
  const int64_t r = x.dim();
  if (static_cast<int64_t>(perm.size()) != r) throw ShapeError("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) throw ShapeError("invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  const auto in_strides = contiguous_strides(x.shape());
  Broadcast bc;  // reuse the strided iterator: stride_a walks the source
  bc.out.resize(static_cast<size_t>(r));
  bc.stride_a.resize(static_cast<size_t>(r));
  bc.stride_b.assign(static_cast<size_t>(r), 0);
  for (int64_t i = 0; i < r; ++i) {
    bc.out[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    bc.stride_a[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* px = x.data().data();
  for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t) { out[static_cast<size_t>(i)] = px[ia]; });
  Shape shape = bc.out;
  return make_result("permute", std::move(shape), std::move(out), {x},
                     [x, bc](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t) { gx[ia] += g[i]; });
                     });
}

Tensor transpose_last(const Tensor& x) {
  if (x.dim() < 2) throw ShapeError("transpose_last needs rank >= 2");
  std::vector<int64_t> perm(static_cast<size_t>(x.dim()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

Tensor index_select(const Tensor& x, int64_t axis, std::span<const int64_t> indices) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= v.n) {
      throw ShapeError("index " + std::to_string(idx) + " out of range along axis of " + shape_str(x.shape()));
    }
  }
  Shape shape = x.shape();
  const auto count = static_cast<int64_t>(indices.size());
  shape[static_cast<size_t>(axis)] = count;
  std::vector<double> out(static_cast<size_t>(v.outer * count * v.inner));
  const double* px = x.data().data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t j = 0; j < count; ++j) {
      std::copy_n(px + (o * v.n + indices[static_cast<size_t>(j)]) * v.inner, v.inner,
                  out.data() + (o * count + j) * v.inner);
    }
  }
  std::vector<int64_t> idx(indices.begin(), indices.end());
  return make_result("index_select", std::move(shape), std::move(out), {x},
                     [x, v, idx = std::move(idx)](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       const auto count = static_cast<int64_t>(idx.size());
                       for (int64_t o = 0; o < v.outer; ++o) {
                         for (int64_t j = 0; j < count; ++j) {
                           double* dst = gx.data() + (o * v.n + idx[static_cast<size_t>(j)]) * v.inner;
                           const double* src = g.data() + (o * count + j) * v.inner;
                           for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  axis = norm_axis(axis, x.dim(), x.shape());
  if (start < 0 || length < 0 || start + length > x.size(axis)) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     shape_str(x.shape()));
  }
  std::vector<int64_t> idx(static_cast<size_t>(length));
  std::iota(idx.begin(), idx.end(), start);
  return index_select(x, axis, idx);
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat of an empty list");
  const Shape& ref = xs.front().shape();
  axis = norm_axis(axis, static_cast<int64_t>(ref.size()), ref);
  int64_t total = 0;
  for (const Tensor& t : xs) {
    if (t.dim() != static_cast<int64_t>(ref.size())) {
      throw ShapeError("concat rank mismatch: " + shape_str(ref) + " vs " + shape_str(t.shape()));
    }
    for (size_t d = 0; d < ref.size(); ++d) {
      if (static_cast<int64_t>(d) != axis && t.shape()[d] != ref[d]) {
        throw ShapeError("concat extent mismatch: " + shape_str(ref) + " vs " + shape_str(t.shape()));
      }
    }
    total += t.shape()[static_cast<size_t>(axis)];
  }
  Shape shape = ref;
  shape[static_cast<size_t>(axis)] = total;
  const AxisView v = axis_view(shape, axis);
  std::vector<double> out(static_cast<size_t>(numel(shape)));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor& t : xs) {
    offsets.push_back(off);
    const int64_t n = t.shape()[static_cast<size_t>(axis)];
    const double* src = t.data().data();
    for (int64_t o = 0; o < v.outer; ++o) {
      std::copy_n(src + o * n * v.inner, n * v.inner, out.data() + (o * total + off) * v.inner);
    }
    off += n;
  }
  return make_result("concat", std::move(shape), std::move(out), xs,
                     [xs, v, offsets, total, axis](std::span<const double>, std::span<const double> g) {
                       for (size_t k = 0; k < xs.size(); ++k) {
                         auto gx = grad_sink(xs[k]);
                         if (gx.empty()) continue;
                         const int64_t n = xs[k].shape()[static_cast<size_t>(axis)];
                         for (int64_t o = 0; o < v.outer; ++o) {
                           const double* src = g.data() + (o * total + offsets[k]) * v.inner;
                           double* dst = gx.data() + o * n * v.inner;
                           for (int64_t i = 0; i < n * v.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor repeat(const Tensor& x, int64_t times, int64_t axis) {
  if (times < 1) throw ShapeError("repeat count must be >= 1");
  axis = norm_axis(axis, x.dim(), x.shape());
  const int64_t n = x.size(axis);
  std::vector<int64_t> idx(static_cast<size_t>(n * times));
  for (int64_t t = 0; t < times; ++t) {
    for (int64_t j = 0; j < n; ++j) idx[static_cast<size_t>(t * n + j)] = j;
  }
  return index_select(x, axis, idx);
}

Tensor avg_pool2d(const Tensor& x, int64_t kernel, int64_t stride) {
  if (x.dim() != 4) throw ShapeError("avg_pool2d expects [B, H, W, C], got " + shape_str(x.shape()));
  if (kernel < 1 || stride < 1) throw ShapeError("avg_pool2d kernel and stride must be positive");
  const int64_t b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  if (h < kernel || w < kernel) throw ShapeError("avg_pool2d kernel larger than input " + shape_str(x.shape()));
  const int64_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  SparseMap map;
  map.out_shape = {b, ho, wo, c};
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  map.row_offsets.reserve(static_cast<size_t>(b * ho * wo * c + 1));
  map.row_offsets.push_back(0);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t y = 0; y < ho; ++y) {
      for (int64_t xw = 0; xw < wo; ++xw) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t ky = 0; ky < kernel; ++ky) {
            for (int64_t kx = 0; kx < kernel; ++kx) {
              map.indices.push_back(((bi * h + y * stride + ky) * w + xw * stride + kx) * c + ch);
              map.weights.push_back(inv);
            }
          }
          map.row_offsets.push_back(static_cast<int64_t>(map.indices.size()));
        }
      }
    }
  }
  return sparse_apply(x, std::move(map));
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1 shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  if (beta < 0.0) throw std::invalid_argument("smooth_l1 beta must be non-negative");
  const auto p = pred.data();
  const auto t = target.data();
  std::vector<double> out(p.size());
  for (size_t i = 0; i < p.size(); ++i) {
    const double d = std::abs(p[i] - t[i]);
    out[i] = d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  return make_result("smooth_l1", pred.shape(), std::move(out), {pred},
                     [pred, target, beta](std::span<const double>, std::span<const double> g) {
                       auto gp = grad_sink(pred);
                       const auto p = pred.data();
                       const auto t = target.data();
                       for (size_t i = 0; i < g.size(); ++i) {
                         const double d = p[i] - t[i];
                         const double slope = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
                         gp[i] += g[i] * slope;
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy expects [N, C] logits, got " + shape_str(logits.shape()));
  const int64_t n = logits.size(0), c = logits.size(1);
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("cross_entropy label count mismatch");
  if (n == 0) throw ShapeError("cross_entropy on an empty batch");
  std::vector<double> probs(static_cast<size_t>(n * c));
  double total = 0.0;
  const double* pl = logits.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const int label = labels[static_cast<size_t>(i)];
    if (label < 0 || label >= c) throw ShapeError("cross_entropy label out of range");
    const double* row = pl + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[label];
    for (int64_t j = 0; j < c; ++j) probs[static_cast<size_t>(i * c + j)] = std::exp(row[j] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result("cross_entropy", {}, {total / static_cast<double>(n)}, {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab), n, c](std::span<const double>,
                                                                                    std::span<const double> g) {
                       auto gl = grad_sink(logits);
                       const double k = g[0] / static_cast<double>(n);
                       for (int64_t i = 0; i < n; ++i) {
                         for (int64_t j = 0; j < c; ++j) {
                           const double onehot = j == lab[static_cast<size_t>(i)] ? 1.0 : 0.0;
                           gl[i * c + j] += k * (probs[static_cast<size_t>(i * c + j)] - onehot);
                         }
                       }
                     });
}

Tensor binary_cross_entropy(const Tensor& logits, std::span<const double> labels) {
  if (static_cast<int64_t>(labels.size()) != logits.numel()) {
    throw ShapeError("binary_cross_entropy label count mismatch for " + shape_str(logits.shape()));
  }
  if (logits.numel() == 0) throw ShapeError("binary_cross_entropy on an empty batch");
  const auto x = logits.data();
  double total = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    total += std::max(x[i], 0.0) - x[i] * labels[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const auto n = static_cast<double>(x.size());
  std::vector<double> lab(labels.begin(), labels.end());
  return make_result("binary_cross_entropy", {}, {total / n}, {logits},
                     [logits, lab = std::move(lab), n](std::span<const double>, std::span<const double> g) {
                       auto gl = grad_sink(logits);
                       const auto x = logits.data();
                       for (size_t i = 0; i < x.size(); ++i) {
                         const double s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                                    : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                         gl[i] += g[0] * (s - lab[i]) / n;
                       }
                     });
}

Tensor sparse_apply(const Tensor& x, SparseMap map) {
  const int64_t rows = numel(map.out_shape);
  if (static_cast<int64_t>(map.row_offsets.size()) != rows + 1 || map.indices.size() != map.weights.size()) {
    throw ShapeError("malformed sparse map for output " + shape_str(map.out_shape));
  }
  const double* px = x.data().data();
  const int64_t n_in = x.numel();
  std::vector<double> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t k = map.row_offsets[static_cast<size_t>(r)]; k < map.row_offsets[static_cast<size_t>(r) + 1]; ++k) {
      const int64_t idx = map.indices[static_cast<size_t>(k)];
      if (idx < 0 || idx >= n_in) throw ShapeError("sparse map index out of range");
      acc += map.weights[static_cast<size_t>(k)] * px[idx];
    }
    out[static_cast<size_t>(r)] = acc;
  }
  Shape shape = map.out_shape;
  return make_result("sparse_apply", std::move(shape), std::move(out), {x},
                     [x, map = std::move(map), rows](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (int64_t r = 0; r < rows; ++r) {
                         const double gr = g[static_cast<size_t>(r)];
                         for (int64_t k = map.row_offsets[static_cast<size_t>(r)];
                              k < map.row_offsets[static_cast<size_t>(r) + 1]; ++k) {
                           gx[map.indices[static_cast<size_t>(k)]] += map.weights[static_cast<size_t>(k)] * gr;
                         }
                       }
                     });
}

}  // namespace fct
