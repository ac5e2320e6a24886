#include "fct/params.hpp"

#include <cmath>

namespace fct {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  value.set_requires_grad(true);
  auto [it, inserted] = tensors_.insert_or_assign(name, std::move(value));
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : tensors_) out.add(name, Tensor::from(t.shape(), {t.data().begin(), t.data().end()}));
  return out;
}

void init_linear(ParamStore& store, const std::string& prefix, int64_t in, int64_t out, std::mt19937_64& rng,
                 double gain) {
  const double stddev = gain / std::sqrt(static_cast<double>(in));
  store.add(prefix + ".w", Tensor::randn({in, out}, rng, stddev));
  store.add(prefix + ".b", Tensor::zeros({out}));
}

void init_layer_norm(ParamStore& store, const std::string& prefix, int64_t channels) {
  store.add(prefix + ".g", Tensor::full({channels}, 1.0));
  store.add(prefix + ".b", Tensor::zeros({channels}));
}

}  // namespace fct
