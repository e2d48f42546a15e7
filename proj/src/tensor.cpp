#include "cavl/tensor.hpp"

#include <sstream>

namespace cavl {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeMismatch("tensor shape must have rank >= 1");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeMismatch("tensor extent must be positive, got " + shape_str(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeMismatch("tensor data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
  }
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw IndexOutOfRange("axis out of range");
  return shape_[axis];
}

std::size_t Tensor::lead_count() const { return numel() / last_extent(); }

std::size_t Tensor::last_extent() const {
  if (shape_.empty()) throw ShapeMismatch("empty tensor has no axes");
  return shape_.back();
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data_[r * shape_[1] + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data_[r * shape_[1] + c];
}

std::span<double> Tensor::grad() {
  ensure_grad();
  return grad_;
}

std::span<const double> Tensor::grad() const { return grad_; }

void Tensor::ensure_grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad_.empty()) grad_.assign(data_.size(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != data_.size()) throw ShapeMismatch("gradient size mismatch");
  ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
}

}  // namespace cavl
