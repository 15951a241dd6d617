#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ffx {

#ifdef FFX_USE_FLOAT
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array with an optional gradient accumulator.
//
// Tensor is a cheap shared handle: copies alias the same storage. The value
// buffer is treated as immutable once an op has consumed it; only the
// optimizer and initializers write through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Leading extent and product of the remaining extents; used by every op
  // that treats its input as a matrix of rows.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const real> data() const;
  std::span<real> mutable_data();
  real item() const;
  real at(std::size_t i) const { return data()[i]; }
  real at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const real> grad() const;
  // Allocates a zero-filled accumulator on first use.
  std::span<real> mutable_grad() const;
  void zero_grad();
  void clear_grad();

  // Returns a tensor sharing nothing with this one; the copy does not
  // require gradients.
  Tensor clone() const;
  std::vector<real> to_vector() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Storage> impl) : impl_(std::move(impl)) {}
  Storage& storage() const;

  std::shared_ptr<Storage> impl_;
};

}  // namespace ffx
