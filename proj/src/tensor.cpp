// SPDX-License-Identifier: Apache-2.0

#include "dropin/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "dropin/error.hpp"

namespace dropin {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorKind::kShape, "tensor shape must have rank >= 1");
  for (std::size_t d : shape) {
    if (d == 0) throw Error(ErrorKind::kShape, "tensor dimension must be positive: " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (values_.size() != shape_size(shape_)) {
    throw Error(ErrorKind::kShape, "tensor of shape " + shape_str(shape_) + " given " +
                                       std::to_string(values_.size()) + " values");
  }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw Error(ErrorKind::kShape, "index rank does not match tensor " + shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw Error(ErrorKind::kShape, "index out of range for " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw Error(ErrorKind::kShape, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), values_);
}

std::span<const double> Tensor::grad() const {
  if (!grad_) return {};
  return *grad_;
}

void Tensor::set_grad(std::vector<double> grad) {
  if (grad.size() != values_.size()) {
    throw Error(ErrorKind::kShape, "gradient length does not match tensor " + shape_str(shape_));
  }
  grad_ = std::move(grad);
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::operator==(const Tensor& other) const {
  return shape_ == other.shape_ && values_.size() == other.values_.size() &&
         (values_.empty() ||
          std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::kShape, "max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dropin
