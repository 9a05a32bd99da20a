#include "ulike/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ulike/instrument.hpp"
#include "ulike/rng.hpp"

namespace ulike {

namespace detail {
thread_local std::uint64_t* active_mac_counter = nullptr;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return r % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

std::string to_string(const Extents& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index element_count(const Extents& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

void validate_extents(const Extents& shape) {
  for (Index e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Extents shape) : shape_(std::move(shape)) {
  validate_extents(shape_);
  data_.assign(static_cast<std::size_t>(element_count(shape_)), T(0));
}

template <typename T>
Tensor<T>::Tensor(Extents shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_extents(shape_);
  if (static_cast<Index>(data_.size()) != element_count(shape_)) {
    throw ShapeError("buffer of " + std::to_string(data_.size()) +
                     " elements does not match extents " + to_string(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::filled(Extents shape, T value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

template <typename T>
Extents Tensor<T>::strides() const {
  Extents s(shape_.size(), 1);
  for (Index i = rank() - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] =
        s[static_cast<std::size_t>(i + 1)] * shape_[static_cast<std::size_t>(i + 1)];
  }
  return s;
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<Index> idx) const {
  if (static_cast<Index>(idx.size()) != rank()) {
    throw ShapeError("index rank " + std::to_string(idx.size()) + " for tensor " +
                     to_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (Index i : idx) {
    if (i < 0 || i >= shape_[axis]) {
      throw std::out_of_range("index " + std::to_string(i) + " out of range on axis " +
                              std::to_string(axis) + " of " + to_string(shape_));
    }
    off = off * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return off;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Extents shape) const {
  validate_extents(shape);
  if (element_count(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": extents differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  accumulate(out, b);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a;
  T* o = out.raw();
  const T* q = b.raw();
  for (Index i = 0; i < out.size(); ++i) o[i] -= q[i];
  return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "hadamard");
  Tensor<T> out = a;
  T* o = out.raw();
  const T* q = b.raw();
  for (Index i = 0; i < out.size(); ++i) o[i] *= q[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (T& v : out.data()) v *= s;
  return out;
}

template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "accumulate");
  T* o = a.raw();
  const T* q = b.raw();
  for (Index i = 0; i < a.size(); ++i) o[i] += q[i];
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "dot");
  T s = 0;
  for (Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
double max_relative_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double ref = 0.0;
  for (T v : b.data()) ref = std::max(ref, std::abs(static_cast<double>(v)));
  return max_abs_diff(a, b) / std::max(ref, std::numeric_limits<double>::min());
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(),
                     [](T v) { return std::isfinite(v); });
}

namespace {

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op, const char* name) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": operand " + name + " must be rank 2, got " +
                     to_string(a.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul", "a");
  require_matrix(b, "matmul", "b");
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner extents differ, a " + to_string(a.shape()) + " b " +
                     to_string(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* pc = c.raw();
  for (Index i = 0; i < m; ++i) {
    T* row = pc + i * n;
    for (Index p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (Index j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  count_macs(static_cast<std::uint64_t>(m * n * k));
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn", "a");
  require_matrix(b, "matmul_tn", "b");
  const Index k = a.extent(0), m = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul_tn: reduction extents differ, a " + to_string(a.shape()) + " b " +
                     to_string(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* pc = c.raw();
  for (Index i = 0; i < m; ++i) {
    T* row = pc + i * n;
    for (Index p = 0; p < k; ++p) {
      const T api = pa[p * m + i];
      const T* brow = pb + p * n;
      for (Index j = 0; j < n; ++j) row[j] += api * brow[j];
    }
  }
  count_macs(static_cast<std::uint64_t>(m * n * k));
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt", "a");
  require_matrix(b, "matmul_nt", "b");
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(0);
  if (b.extent(1) != k) {
    throw ShapeError("matmul_nt: reduction extents differ, a " + to_string(a.shape()) + " b " +
                     to_string(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* pc = c.raw();
  for (Index i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (Index j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T s = 0;
      for (Index p = 0; p < k; ++p) s += arow[p] * brow[p];
      pc[i * n + j] = s;
    }
  }
  count_macs(static_cast<std::uint64_t>(m * n * k));
  return c;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  if (dc.rank() != 2 || dc.extent(0) != a.extent(0) || dc.extent(1) != b.extent(1)) {
    throw ShapeError("matmul_backward: upstream gradient " + to_string(dc.shape()) +
                     " does not match product of " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require_matrix(a, "transpose2d", "a");
  const Index m = a.extent(0), n = a.extent(1);
  Tensor<T> t({n, m});
  const T* pa = a.raw();
  T* pt = t.raw();
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) pt[j * m + i] = pa[i * n + j];
  return t;
}

bool is_permutation(std::span<const Index> p, Index n) {
  if (static_cast<Index>(p.size()) != n) return false;
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (Index v : p) {
    if (v < 0 || v >= n || seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = true;
  }
  return true;
}

Permutation inverse_permutation(std::span<const Index> p) {
  if (!is_permutation(p, static_cast<Index>(p.size()))) {
    throw std::invalid_argument("inverse_permutation: input is not a permutation");
  }
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<Index>(i);
  return inv;
}

template <typename T>
Tensor<T> permute_axes(const Tensor<T>& x, std::span<const Index> perm) {
  const Index r = x.rank();
  if (!is_permutation(perm, r)) {
    throw ShapeError("permute_axes: invalid axis permutation for tensor " + to_string(x.shape()));
  }
  Extents out_shape(static_cast<std::size_t>(r));
  const Extents in_strides = x.strides();
  Extents src_stride(static_cast<std::size_t>(r));
  for (Index i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.extent(perm[static_cast<std::size_t>(i)]);
    src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  Tensor<T> out(out_shape);
  Extents counter(static_cast<std::size_t>(r), 0);
  Index src = 0;
  const T* px = x.raw();
  T* po = out.raw();
  for (Index o = 0; o < out.size(); ++o) {
    po[o] = px[src];
    for (Index ax = r - 1; ax >= 0; --ax) {
      const auto a = static_cast<std::size_t>(ax);
      if (++counter[a] < out_shape[a]) {
        src += src_stride[a];
        break;
      }
      src -= src_stride[a] * (out_shape[a] - 1);
      counter[a] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor<T> permute_axes_backward(const Tensor<T>& dy, std::span<const Index> perm) {
  const Permutation inv = inverse_permutation(perm);
  return permute_axes(dy, inv);
}

namespace {

template <typename T>
void check_seq_index(const Tensor<T>& x, std::span<const Index> idx, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected L×C, got " + to_string(x.shape()));
  if (!is_permutation(idx, x.extent(0))) {
    throw std::invalid_argument(std::string(op) + ": index is not a bijection on 0.." +
                                std::to_string(x.extent(0) - 1));
  }
}

}  // namespace

template <typename T>
Tensor<T> gather_seq(const Tensor<T>& x, std::span<const Index> idx) {
  check_seq_index(x, idx, "gather_seq");
  const Index l = x.extent(0), c = x.extent(1);
  Tensor<T> out(x.shape());
  for (Index i = 0; i < l; ++i) {
    std::copy_n(x.raw() + idx[static_cast<std::size_t>(i)] * c, c, out.raw() + i * c);
  }
  return out;
}

template <typename T>
Tensor<T> scatter_seq(const Tensor<T>& x, std::span<const Index> idx) {
  check_seq_index(x, idx, "scatter_seq");
  const Index l = x.extent(0), c = x.extent(1);
  Tensor<T> out(x.shape());
  for (Index i = 0; i < l; ++i) {
    std::copy_n(x.raw() + i * c, c, out.raw() + idx[static_cast<std::size_t>(i)] * c);
  }
  return out;
}

#define ULIKE_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                             \
  template void require_same_shape(const Tensor<T>&, const Tensor<T>&, const char*);    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                        \
  template void accumulate(Tensor<T>&, const Tensor<T>&);                               \
  template T dot(const Tensor<T>&, const Tensor<T>&);                                   \
  template double max_abs_diff(const Tensor<T>&, const Tensor<T>&);                     \
  template double max_relative_diff(const Tensor<T>&, const Tensor<T>&);                \
  template bool all_finite(const Tensor<T>&);                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                     \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&,           \
                                          const Tensor<T>&);                            \
  template Tensor<T> transpose2d(const Tensor<T>&);                                     \
  template Tensor<T> permute_axes(const Tensor<T>&, std::span<const Index>);            \
  template Tensor<T> permute_axes_backward(const Tensor<T>&, std::span<const Index>);   \
  template Tensor<T> gather_seq(const Tensor<T>&, std::span<const Index>);              \
  template Tensor<T> scatter_seq(const Tensor<T>&, std::span<const Index>);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

#undef ULIKE_INSTANTIATE

}  // namespace ulike
