#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulike/error.hpp"

namespace ulike {

using Index = std::int64_t;
using Extents = std::vector<Index>;

std::string to_string(const Extents& shape);
Index element_count(const Extents& shape);

/// Dense row-major N-dimensional array. Every tensor owns a contiguous buffer
/// whose length equals the product of its extents; there are no views, so
/// reshapes and permutations always materialize.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Extents shape);
  Tensor(Extents shape, std::vector<T> data);

  static Tensor filled(Extents shape, T value);

  const Extents& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }
  Extents strides() const;

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const T* raw() const noexcept { return data_.data(); }
  T* raw() noexcept { return data_.data(); }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Multi-index access with bounds checks.
  T& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// Copy with new extents of equal element count.
  Tensor reshaped(Extents shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<Index> idx) const;

  Extents shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Elementwise helpers. Operands must have identical extents; there is no
// broadcasting.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
/// a += b in place.
template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b);
template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op);

/// max_i |a_i - b_i| / max(max_i |b_i|, tiny). Norm-relative difference
/// against the reference `b`.
template <typename T>
double max_relative_diff(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
bool all_finite(const Tensor<T>& a);

// ---------------------------------------------------------------------------
// Matrix products (rank-2 operands). Each reduction runs in ascending index
// order, so results are deterministic.

/// c = a · b, a: M×K, b: K×N.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// c = aᵀ · b, a: K×M, b: K×N.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);
/// c = a · bᵀ, a: M×K, b: N×K.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

/// Adjoint of matmul: da = dc · bᵀ, db = aᵀ · dc.
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

// ---------------------------------------------------------------------------
// Axis permutation and sequence gathers.

using Permutation = std::vector<Index>;

bool is_permutation(std::span<const Index> p, Index n);
Permutation inverse_permutation(std::span<const Index> p);

/// out.extent(i) = x.extent(perm[i]); materialized.
template <typename T>
Tensor<T> permute_axes(const Tensor<T>& x, std::span<const Index> perm);
/// Adjoint of permute_axes: permutation by the inverse.
template <typename T>
Tensor<T> permute_axes_backward(const Tensor<T>& dy, std::span<const Index> perm);

/// out[i, :] = x[idx[i], :] for x: L×C.
template <typename T>
Tensor<T> gather_seq(const Tensor<T>& x, std::span<const Index> idx);
/// out[idx[i], :] = x[i, :]; adjoint of gather_seq.
template <typename T>
Tensor<T> scatter_seq(const Tensor<T>& x, std::span<const Index> idx);

}  // namespace ulike
