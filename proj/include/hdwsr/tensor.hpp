#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/errors.hpp"
#include "hdwsr/rng.hpp"

namespace hdwsr {

using Index = Eigen::Index;

template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Row-major so that image rows and token feature vectors are contiguous.
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 0/1 support indicators.
using BinMat = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string dims_str(const std::vector<Index>& d) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << ")";
  return os.str();
}

// Dense tensor of rank 1..3 over a flat Eigen array. Images and feature maps
// are rank 3 laid out (channels, height, width), row-major within a channel,
// so per-channel matrix views are free.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<Index> dims)
      : dims_(std::move(dims)), v_(ArrayX<S>::Zero(count(dims_))) {
    check_dims();
  }

  Tensor(std::vector<Index> dims, ArrayX<S> values)
      : dims_(std::move(dims)), v_(std::move(values)) {
    check_dims();
    if (v_.size() != count(dims_))
      throw DimensionError("Tensor: value count does not match dims " + dims_str(dims_));
  }

  static Tensor zeros(std::vector<Index> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<Index> dims, S value) {
    Tensor t(std::move(dims));
    t.v_.setConstant(value);
    return t;
  }

  static Tensor from_matrix(const MatX<S>& m) {
    Tensor t({m.rows(), m.cols()});
    t.mat() = m;
    return t;
  }

  const std::vector<Index>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  Index dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  Index size() const { return v_.size(); }

  Index channels() const { require_rank(3); return dims_[0]; }
  Index height() const { require_rank(3); return dims_[1]; }
  Index width() const { require_rank(3); return dims_[2]; }
  Index rows() const { require_rank(2); return dims_[0]; }
  Index cols() const { require_rank(2); return dims_[1]; }

  ArrayX<S>& array() { return v_; }
  const ArrayX<S>& array() const { return v_; }
  S* data() { return v_.data(); }
  const S* data() const { return v_.data(); }

  S& operator()(Index c, Index i, Index j) {
    return v_[(c * dims_[1] + i) * dims_[2] + j];
  }
  S operator()(Index c, Index i, Index j) const {
    return v_[(c * dims_[1] + i) * dims_[2] + j];
  }
  S& operator()(Index i, Index j) { return v_[i * dims_[1] + j]; }
  S operator()(Index i, Index j) const { return v_[i * dims_[1] + j]; }
  S& operator[](Index i) { return v_[i]; }
  S operator[](Index i) const { return v_[i]; }

  // Mutable matrix view of one channel of a rank-3 tensor.
  Eigen::Map<MatX<S>> channel(Index c) {
    require_rank(3);
    return Eigen::Map<MatX<S>>(data() + c * dims_[1] * dims_[2], dims_[1], dims_[2]);
  }
  Eigen::Map<const MatX<S>> channel(Index c) const {
    require_rank(3);
    return Eigen::Map<const MatX<S>>(data() + c * dims_[1] * dims_[2], dims_[1], dims_[2]);
  }

  Eigen::Map<MatX<S>> mat() {
    require_rank(2);
    return Eigen::Map<MatX<S>>(data(), dims_[0], dims_[1]);
  }
  Eigen::Map<const MatX<S>> mat() const {
    require_rank(2);
    return Eigen::Map<const MatX<S>>(data(), dims_[0], dims_[1]);
  }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }
  bool all_finite() const { return v_.allFinite(); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(dims_);
    out.array() = v_.template cast<T>();
    return out;
  }

  static Index count(const std::vector<Index>& dims) {
    Index n = 1;
    for (Index d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }

 private:
  void check_dims() const {
    if (dims_.empty() || dims_.size() > 3)
      throw DimensionError("Tensor: rank must be 1..3, got " + dims_str(dims_));
    for (Index d : dims_)
      if (d <= 0) throw DimensionError("Tensor: nonpositive dim in " + dims_str(dims_));
  }
  void require_rank(int r) const {
    if (rank() != r)
      throw DimensionError("Tensor: expected rank " + std::to_string(r) + ", have " +
                           dims_str(dims_));
  }

  std::vector<Index> dims_;
  ArrayX<S> v_;
};

template <class S>
void require_same_dims(const Tensor<S>& a, const Tensor<S>& b, const char* where) {
  if (!a.same_dims(b))
    throw DimensionError(std::string(where) + ": dims " + dims_str(a.dims()) +
                         " vs " + dims_str(b.dims()));
}

template <class S>
void require_finite(const Tensor<S>& a, const char* where) {
  if (!a.all_finite()) throw ContractError(std::string(where) + ": non-finite values");
}

template <class S>
Tensor<S> randn_tensor(Rng& rng, std::vector<Index> dims) {
  Tensor<S> t(std::move(dims));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.normal());
  return t;
}

template <class S>
Tensor<S> rand_tensor(Rng& rng, std::vector<Index> dims) {
  Tensor<S> t(std::move(dims));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.uniform());
  return t;
}

}  // namespace hdwsr
