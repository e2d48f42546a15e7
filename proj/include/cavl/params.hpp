#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cavl/tensor.hpp"

namespace cavl {

struct ParamEntry {
  std::string name;
  Tensor tensor;
};

/// Named, ordered collection of parameter tensors. Order is creation order
/// and defines the checkpoint layout. The trainable/frozen flag lives on
/// each tensor's requires_grad bit.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor tensor, bool trainable = true);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_elements() const;
  void clear_grads();

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cavl
