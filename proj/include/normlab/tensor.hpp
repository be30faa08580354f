#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace normlab {

/// Raised for every contract violation inside the library. The message always
/// names the offending operation.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major array of doubles.
///
/// A Tensor is a handle: copies share the same storage, which is what lets a
/// Graph find parameters it has already seen and accumulate their gradients.
/// Use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Allocates a zero gradient buffer on first use.
  std::span<double> grad_mut();
  void zero_grad();

  Tensor clone() const;
  /// Same values, new shape. Shares nothing with *this.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

 private:
  friend class Graph;
  explicit Tensor(std::shared_ptr<detail::TensorStorage> s) : s_(std::move(s)) {}

  std::shared_ptr<detail::TensorStorage> s_;
};

}  // namespace normlab
