#include "opc/tensor.hpp"

#include <cmath>
#include <sstream>

namespace opc {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), values_(shape_product(shape_), 0.0) {
  for (std::size_t e : shape_) {
    if (e == 0) throw ShapeError("tensor extent must be positive, got shape " + shape_to_string(shape_));
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_product(shape_) != values_.size()) {
    throw ShapeError("shape " + shape_to_string(shape_) + " does not match value count " +
                     std::to_string(values_.size()));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape_); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void Tensor::fill(double v) {
  for (double& x : values_) x = v;
}

void Tensor::add_scaled(const Tensor& other, double scale) {
  if (!same_shape(other)) {
    throw ShapeError("add_scaled shape mismatch " + shape_str() + " vs " + other.shape_str());
  }
  const double* o = other.data();
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * o[i];
}

void Tensor::reshape(std::vector<std::size_t> shape) {
  if (shape_product(shape) != values_.size()) {
    throw ShapeError("reshape " + shape_str() + " -> " + shape_to_string(shape) + " changes element count");
  }
  shape_ = std::move(shape);
}

}  // namespace opc
