#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fct/tensor.hpp"

namespace fct {

/// Named, ordered collection of trainable tensors.
class ParamStore {
 public:
  /// Registers `value` as a gradient-tracking parameter. Replaces an
  /// existing entry of the same name.
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void erase(const std::string& name) { tensors_.erase(name); }

  std::vector<std::string> names() const;
  std::map<std::string, Tensor>& items() { return tensors_; }
  const std::map<std::string, Tensor>& items() const { return tensors_; }
  size_t size() const { return tensors_.size(); }
  int64_t total_elements() const;

  void zero_grad();
  /// Independent copy: new tensors, same values.
  ParamStore clone() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Fan-in scaled normal init for a [in, out] weight plus zero bias.
void init_linear(ParamStore& store, const std::string& prefix, int64_t in, int64_t out, std::mt19937_64& rng,
                 double gain = 1.0);
void init_layer_norm(ParamStore& store, const std::string& prefix, int64_t channels);

}  // namespace fct
