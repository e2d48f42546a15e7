#include "cavl/params.hpp"

#include "cavl/errors.hpp"

namespace cavl {

Tensor& ParamStore::add(std::string name, Tensor tensor, bool trainable) {
  if (contains(name)) throw Error("duplicate parameter name " + name);
  tensor.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back(ParamEntry{std::move(name), std::move(tensor)});
  return entries_.back().tensor;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UnknownParameter("no parameter named " + name);
  return entries_[it->second].tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UnknownParameter("no parameter named " + name);
  return entries_[it->second].tensor;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::clear_grads() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

}  // namespace cavl
