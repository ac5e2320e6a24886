#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fct {

using Shape = std::vector<int64_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Backward rule of a recorded op: receives the op's output values and the
// gradient flowing into it, and accumulates into its parents' gradients.
using BackwardFn = std::function<void(std::span<const double> out, std::span<const double> grad_out)>;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";
};
}  // namespace detail

/// Dense row-major float64 tensor with define-by-run reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// treated as immutable once an op has consumed them. Parameters are the only
/// tensors mutated in place, through mutable_data(), between forward passes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size(int64_t axis) const;
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span when backward has not reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  /// Runs reverse-mode accumulation from this scalar. The recorded graph is
  /// released afterwards; calling backward on it again throws GraphError.
  void backward() const;

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Records a new op result. `parents` are the inputs; `backward` is attached
/// only when recording is enabled and at least one parent tracks gradients.
/// Throws NumericError if any value is non-finite.
Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   BackwardFn backward);

/// Gradient buffer of a parent for accumulation inside a backward rule;
/// empty when the parent does not track gradients.
std::span<double> grad_sink(const Tensor& parent);

void check_finite(const char* op, std::span<const double> values);

}  // namespace fct
