#include "ffx/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "ffx/error.hpp"

namespace ffx {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
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
  if (shape.empty()) return;  // scalar
  for (std::size_t extent : shape)
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), real{0}, requires_grad); }

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<Storage>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  auto impl = std::make_shared<Storage>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor::Storage& Tensor::storage() const {
  if (!impl_) throw ArgumentError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return storage().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return storage().data.size(); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.empty() ? 1 : s.front();
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.empty() ? 1 : numel() / s.front();
}

std::span<const real> Tensor::data() const { return storage().data; }
std::span<real> Tensor::mutable_data() { return storage().data; }

real Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return storage().data[0];
}

bool Tensor::requires_grad() const { return storage().requires_grad; }
void Tensor::set_requires_grad(bool value) { storage().requires_grad = value; }

bool Tensor::has_grad() const { return !storage().grad.empty(); }
std::span<const real> Tensor::grad() const { return storage().grad; }

std::span<real> Tensor::mutable_grad() const {
  Storage& s = storage();
  if (s.grad.empty()) s.grad.assign(s.data.size(), real{0});
  return s.grad;
}

void Tensor::zero_grad() {
  Storage& s = storage();
  std::fill(s.grad.begin(), s.grad.end(), real{0});
}

void Tensor::clear_grad() {
  Storage& s = storage();
  s.grad.clear();
  s.grad.shrink_to_fit();
}

Tensor Tensor::clone() const { return from(shape(), storage().data, false); }

std::vector<real> Tensor::to_vector() const { return storage().data; }

}  // namespace ffx
