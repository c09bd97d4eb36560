#pragma once

// Dense D-dimensional tensors with column-major ("mode 1 fastest") flat
// storage, CP/PARAFAC factors, slice inner products and voxel-centered
// patch extraction.  These are the value types everything else builds on;
// all operations here are pure and safe for concurrent readers.

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tvc {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using VectorX = Eigen::Vector<Scalar, Eigen::Dynamic>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

inline Index shape_size(std::span<const Index> shape) {
  Index v = 1;
  for (Index p : shape) v *= p;
  return v;
}

// Strides for the column-major vectorization: element (i_1,...,i_D), 0-based,
// lives at flat offset sum_d stride[d]*i_d with stride[0]=1.
inline Shape shape_strides(std::span<const Index> shape) {
  Shape s(shape.size());
  Index acc = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    s[d] = acc;
    acc *= shape[d];
  }
  return s;
}

// Flat offset of a 0-based multi-index; bijective over the index space.
inline Index vec_offset(std::span<const Index> index, std::span<const Index> shape) {
  if (index.size() != shape.size())
    throw std::invalid_argument("vec_offset: index order does not match shape order");
  Index off = 0, stride = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (index[d] < 0 || index[d] >= shape[d])
      throw std::out_of_range("vec_offset: index out of bounds in mode " + std::to_string(d));
    off += stride * index[d];
    stride *= shape[d];
  }
  return off;
}

inline Shape unravel_offset(Index flat, std::span<const Index> shape) {
  Shape idx(shape.size());
  for (std::size_t d = 0; d < shape.size(); ++d) {
    idx[d] = flat % shape[d];
    flat /= shape[d];
  }
  return idx;
}

// Coordinate along mode d of the flat offset `flat`.
inline Index mode_coordinate(Index flat, std::span<const Index> shape, Index d) {
  for (Index k = 0; k < d; ++k) flat /= shape[k];
  return flat % shape[d];
}

template <typename Scalar>
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {
    for (Index p : shape_)
      if (p <= 0) throw std::invalid_argument("DenseTensor: nonpositive extent");
  }

  DenseTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != shape_size(shape_))
      throw std::invalid_argument("DenseTensor: data length does not equal the shape product");
  }

  Index order() const { return static_cast<Index>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  Index extent(Index d) const { return shape_[static_cast<std::size_t>(d)]; }
  Index size() const { return static_cast<Index>(data_.size()); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
  Scalar operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

  Scalar& at(std::span<const Index> idx) { return data_[static_cast<std::size_t>(vec_offset(idx, shape_))]; }
  Scalar at(std::span<const Index> idx) const { return data_[static_cast<std::size_t>(vec_offset(idx, shape_))]; }
  Scalar& at(std::initializer_list<Index> idx) { return at(std::span<const Index>(idx.begin(), idx.size())); }
  Scalar at(std::initializer_list<Index> idx) const {
    return const_cast<DenseTensor*>(this)->at(std::span<const Index>(idx.begin(), idx.size()));
  }

  // Eigen view of the flat storage, in vectorization order.
  Eigen::Map<VectorX<Scalar>> vec() { return {data_.data(), size()}; }
  Eigen::Map<const VectorX<Scalar>> vec() const { return {data_.data(), size()}; }

  void setZero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

  bool same_shape(const DenseTensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
Scalar frobenius_norm(const DenseTensor<Scalar>& a) {
  return a.vec().norm();
}

template <typename Scalar>
Scalar inner_product(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("inner_product: shape mismatch");
  return a.vec().dot(b.vec());
}

// <A_{.,dj}, B_{.,dj}>: inner product over the slice holding mode d fixed at
// 0-based index j.
template <typename Scalar>
Scalar slice_inner_product(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b,
                           Index d, Index j) {
  if (!a.same_shape(b)) throw std::invalid_argument("slice_inner_product: shape mismatch");
  const auto& shape = a.shape();
  if (d < 0 || d >= a.order()) throw std::out_of_range("slice_inner_product: bad mode");
  if (j < 0 || j >= shape[static_cast<std::size_t>(d)])
    throw std::out_of_range("slice_inner_product: slice index out of bounds");

  // The slice is a strided set: inner block of `inner` consecutive elements,
  // repeated `outer` times with period inner*p_d.
  Index inner = 1;
  for (Index k = 0; k < d; ++k) inner *= shape[static_cast<std::size_t>(k)];
  const Index pd = shape[static_cast<std::size_t>(d)];
  const Index outer = a.size() / (inner * pd);

  Scalar acc(0);
  const Scalar* pa = a.data();
  const Scalar* pb = b.data();
  for (Index o = 0; o < outer; ++o) {
    const Index base = (o * pd + j) * inner;
    for (Index i = 0; i < inner; ++i) acc += pa[base + i] * pb[base + i];
  }
  return acc;
}

// Rank-R set of per-mode margin vectors; mode d holds a p_d x R matrix whose
// r-th column is the margin of the r-th rank-one term.
template <typename Scalar>
class CPFactor {
 public:
  CPFactor() = default;

  CPFactor(Shape shape, Index rank) : shape_(std::move(shape)), rank_(rank) {
    if (rank_ <= 0) throw std::invalid_argument("CPFactor: rank must be positive");
    modes_.reserve(shape_.size());
    for (Index p : shape_) {
      if (p <= 0) throw std::invalid_argument("CPFactor: nonpositive extent");
      modes_.emplace_back(MatrixX<Scalar>::Zero(p, rank_));
    }
  }

  Index rank() const { return rank_; }
  Index order() const { return static_cast<Index>(shape_.size()); }
  const Shape& shape() const { return shape_; }

  MatrixX<Scalar>& mode(Index d) { return modes_[static_cast<std::size_t>(d)]; }
  const MatrixX<Scalar>& mode(Index d) const { return modes_[static_cast<std::size_t>(d)]; }

  // margin along mode d of rank term r
  auto margin(Index d, Index r) { return modes_[static_cast<std::size_t>(d)].col(r); }
  auto margin(Index d, Index r) const { return modes_[static_cast<std::size_t>(d)].col(r); }

 private:
  Shape shape_;
  Index rank_ = 0;
  std::vector<MatrixX<Scalar>> modes_;
};

// Accumulate the rank-r outer-product term of f into out (flat storage).
template <typename Scalar>
void cp_accumulate_rank(const CPFactor<Scalar>& f, Index r, Scalar weight,
                        std::span<Scalar> out) {
  const auto& shape = f.shape();
  const Index v = shape_size(shape);
  if (static_cast<Index>(out.size()) != v)
    throw std::invalid_argument("cp_accumulate_rank: output size mismatch");
  const Index d0 = shape[0];
  const auto& m0 = f.mode(0);
  Shape idx(shape.size(), 0);
  for (Index base = 0; base < v; base += d0) {
    Scalar tail = weight;
    for (Index d = 1; d < f.order(); ++d) tail *= f.mode(d)(idx[static_cast<std::size_t>(d)], r);
    for (Index i = 0; i < d0; ++i) out[static_cast<std::size_t>(base + i)] += tail * m0(i, r);
    // advance the multi-index over modes 2..D
    for (std::size_t d = 1; d < shape.size(); ++d) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
}

// Full tensor sum_r outer(margins[1][r], ..., margins[D][r]).
template <typename Scalar>
DenseTensor<Scalar> cp_compose(const CPFactor<Scalar>& f) {
  DenseTensor<Scalar> out(f.shape());
  std::span<Scalar> flat(out.data(), static_cast<std::size_t>(out.size()));
  for (Index r = 0; r < f.rank(); ++r) cp_accumulate_rank(f, r, Scalar(1), flat);
  return out;
}

template <typename Scalar>
struct Patch {
  Index center = 0;  // flat voxel offset in the source tensor
  Index size = 0;    // odd edge length h
  VectorX<Scalar> values;  // h^D entries, offset order: mode 1 fastest
};

// Gather the h^D cube centered at `center` into `out` (length h^D).
// Out-of-bounds entries are exactly zero. Ordering is lexicographic over
// offsets -(h-1)/2..+(h-1)/2 with mode 1 fastest.
template <typename Scalar>
void extract_patch_into(const DenseTensor<Scalar>& x, Index center, Index h,
                        std::span<Scalar> out) {
  if (h <= 0 || h % 2 == 0) throw std::invalid_argument("extract_patch: patch size must be odd and positive");
  if (center < 0 || center >= x.size()) throw std::out_of_range("extract_patch: center outside tensor");
  const auto& shape = x.shape();
  const Index dims = x.order();
  const Index half = (h - 1) / 2;
  Index patch_len = 1;
  for (Index d = 0; d < dims; ++d) patch_len *= h;
  if (static_cast<Index>(out.size()) != patch_len)
    throw std::invalid_argument("extract_patch: output size mismatch");

  const Shape cidx = unravel_offset(center, shape);
  const Shape strides = shape_strides(shape);

  Shape off(static_cast<std::size_t>(dims), -half);
  for (Index k = 0; k < patch_len; ++k) {
    bool inside = true;
    Index flat = 0;
    for (Index d = 0; d < dims; ++d) {
      const Index c = cidx[static_cast<std::size_t>(d)] + off[static_cast<std::size_t>(d)];
      if (c < 0 || c >= shape[static_cast<std::size_t>(d)]) {
        inside = false;
        break;
      }
      flat += strides[static_cast<std::size_t>(d)] * c;
    }
    out[static_cast<std::size_t>(k)] = inside ? x[flat] : Scalar(0);
    for (Index d = 0; d < dims; ++d) {
      if (++off[static_cast<std::size_t>(d)] <= half) break;
      off[static_cast<std::size_t>(d)] = -half;
    }
  }
}

template <typename Scalar>
Patch<Scalar> extract_patch(const DenseTensor<Scalar>& x, Index center, Index h) {
  Patch<Scalar> p;
  p.center = center;
  p.size = h;
  Index len = 1;
  for (Index d = 0; d < x.order(); ++d) len *= h;
  p.values.resize(len);
  extract_patch_into(x, center, h, std::span<Scalar>(p.values.data(), static_cast<std::size_t>(len)));
  return p;
}

using DenseTensorD = DenseTensor<double>;
using CPFactorD = CPFactor<double>;

}  // namespace tvc
