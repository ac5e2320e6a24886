#include "fct/tensor.hpp"

#include <malloc.h>

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fct {

namespace {
thread_local bool g_grad_enabled = true;

// Every training step allocates and frees the same few hundred buffers of
// 100 KB to a few MB. With glibc's defaults those round-trip through mmap and
// heap trimming, which costs more than the arithmetic.
#ifdef __GLIBC__
[[maybe_unused]] const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
}

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (fct::numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  check_finite("Tensor::from", data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = fct::numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(static_cast<size_t>(fct::numel(shape)));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(static_cast<size_t>(fct::numel(shape)));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

int64_t Tensor::size(int64_t axis) const {
  const int64_t r = dim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int64_t>(index.size()) != dim()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
  int64_t offset = 0;
  size_t axis = 0;
  for (int64_t i : index) {
    const int64_t extent = node_->shape[axis++];
    if (i < 0 || i >= extent) throw ShapeError("index out of range for " + shape_str(shape()));
    offset = offset * extent + i;
  }
  return node_->data[static_cast<size_t>(offset)];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone() const { return from(shape(), node_->data, requires_grad()); }

void Tensor::backward() const {
  if (!node_) throw GraphError("backward on an undefined tensor");
  if (numel() != 1) throw GraphError("backward requires a scalar loss, got shape " + shape_str(shape()));
  if (node_->consumed) throw GraphError("backward already ran on this graph; rebuild the forward pass first");
  if (!node_->requires_grad || (!node_->backward && node_->parents.empty())) {
    throw GraphError("loss is not connected to any gradient-tracking tensor");
  }

  // Iterative post-order DFS gives a topological order of recorded ops.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !parent->parents.empty() && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->data, node->grad);
  }
  for (detail::Node* node : order) {
    node->backward = nullptr;
    node->parents.clear();
    node->consumed = true;
    if (node != node_.get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   BackwardFn backward) {
  check_finite(op, data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool tracks = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) tracks = tracks || p.requires_grad();
  }
  if (tracks) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::span<double> grad_sink(const Tensor& parent) {
  auto* node = const_cast<detail::Node*>(parent.id());
  if (!node->requires_grad) return {};
  if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  return node->grad;
}

}  // namespace fct
