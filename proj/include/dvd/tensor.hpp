#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvd {

/// Raised for malformed inputs: shape mismatches, violated preconditions,
/// unreadable files. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/Inf. Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major n-dimensional array. Storage is an Eigen column array so
/// whole-tensor arithmetic can be written as Eigen expressions, and
/// channel-major 3-D tensors can be viewed as [C, H*W] matrices for GEMMs.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Storage::Constant(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size()) {
      throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape), Storage(Eigen::Map<const Storage>(
                                          values.begin(), static_cast<Index>(values.size())))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), Scalar(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), Scalar(1)); }
  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // rank-3 [C,H,W] accessors
  Scalar& operator()(Index c, Index y, Index x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  Scalar operator()(Index c, Index y, Index x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  // rank-2 [H,W] accessors
  Scalar& operator()(Index y, Index x) { return data_[y * shape_[1] + x]; }
  Scalar operator()(Index y, Index x) const { return data_[y * shape_[1] + x]; }

  /// View as a row-major [rows, size/rows] matrix (for [C,H,W] → [C, H*W]).
  MatrixMap matrix(Index rows) { return MatrixMap(raw(), rows, size() / rows); }
  ConstMatrixMap matrix(Index rows) const { return ConstMatrixMap(raw(), rows, size() / rows); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  bool same_shape(const BasicTensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  void validate_shape() const {
    for (Index e : shape_) {
      if (e <= 0) throw ValidationError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

/// Throws ValidationError naming `what` unless `t` has rank 3.
template <typename Scalar>
void require_rank3(const BasicTensor<Scalar>& t, const char* what) {
  if (t.rank() != 3) {
    throw ValidationError(std::string(what) + ": expected rank-3 [C,H,W] tensor, got " +
                          shape_string(t.shape()));
  }
}

// Binary tensor file: "DVDT", u32 rank, u32 extents, f64 row-major payload,
// all little-endian.
void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);
std::string encode_tensor(const Tensor& tensor);
Tensor decode_tensor(const std::string& bytes);

}  // namespace dvd
