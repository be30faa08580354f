#include "normlab/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace normlab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) return;  // scalar
  for (auto d : shape)
    if (d == 0) throw Error("tensor: zero-sized dimension in shape " + to_string(shape));
}
}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad)
    : s_(std::make_shared<detail::TensorStorage>()) {
  check_shape(shape);
  s_->data.assign(normlab::numel(shape), 0.0);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<detail::TensorStorage>()) {
  check_shape(shape);
  if (values.size() != normlab::numel(shape))
    throw Error("tensor: " + std::to_string(values.size()) + " values for shape " +
                to_string(shape));
  s_->shape = std::move(shape);
  s_->data = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  if (!s_) throw Error("tensor: use of undefined tensor");
  return s_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw Error("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return normlab::numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!s_) throw Error("tensor: use of undefined tensor");
  return s_->data;
}

std::span<double> Tensor::data() {
  if (!s_) throw Error("tensor: use of undefined tensor");
  return s_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw Error("tensor: item() on tensor of shape " + to_string(shape()));
  return s_->data[0];
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }
void Tensor::set_requires_grad(bool value) {
  if (!s_) throw Error("tensor: use of undefined tensor");
  s_->requires_grad = value;
}

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor: no gradient populated for shape " + to_string(shape()));
  return s_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!s_) throw Error("tensor: use of undefined tensor");
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() {
  if (s_ && !s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  if (!s_) return {};
  return Tensor(s_->shape, s_->data, s_->requires_grad);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (normlab::numel(shape) != numel())
    throw Error("tensor: cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
  return Tensor(std::move(shape), s_->data, false);
}

}  // namespace normlab
