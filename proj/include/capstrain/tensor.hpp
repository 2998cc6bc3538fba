#ifndef CAPSTRAIN_TENSOR_HPP
#define CAPSTRAIN_TENSOR_HPP

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capstrain/errors.hpp"

namespace capstrain {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major strides of a shape.
inline Shape strides_of(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Dense n-dimensional array in row-major order with an optional gradient buffer.
///
/// The data buffer always holds exactly shape_size(shape()) elements. A rank-0
/// tensor (empty shape) is a scalar of size one.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() : data_(Vector::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector(Eigen::Map<const Vector>(values.begin(),
                                                                static_cast<Index>(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }

  /// Extent of axis i; negative i counts from the back.
  Index dim(Index i) const {
    const Index r = rank();
    const Index a = i < 0 ? i + r : i;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(i) + " out of range for " + to_string(shape_));
    return shape_[static_cast<std::size_t>(a)];
  }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... Ix>
  Scalar& at(Ix... ix) { return data_[offset({static_cast<Index>(ix)...})]; }
  template <typename... Ix>
  Scalar at(Ix... ix) const { return data_[offset({static_cast<Index>(ix)...})]; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  /// Same data under a new shape of equal size.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) throw TapeError("tensor has no gradient");
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw TapeError("tensor has no gradient");
    return *grad_;
  }
  void set_grad(Vector g) {
    if (g.size() != size()) throw DimensionError("gradient length does not match tensor");
    grad_ = std::move(g);
  }
  void zero_grad() { grad_ = Vector::Zero(size()); }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const {
    return data_.allFinite() && (!grad_ || grad_->allFinite());
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw DimensionError("negative extent in shape " + to_string(shape_));
    }
  }

  Index offset(std::initializer_list<Index> ix) const {
    if (static_cast<Index>(ix.size()) != rank()) throw DimensionError("index rank mismatch");
    Index off = 0;
    std::size_t a = 0;
    for (Index i : ix) {
      if (i < 0 || i >= shape_[a]) throw DimensionError("index out of range");
      off = off * shape_[a] + i;
      ++a;
    }
    return off;
  }

  Shape shape_;
  Vector data_;
  std::optional<Vector> grad_;
};

}  // namespace capstrain

#endif  // CAPSTRAIN_TENSOR_HPP
