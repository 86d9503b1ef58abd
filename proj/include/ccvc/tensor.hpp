#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccvc {

// 64-byte aligned storage. SIMD kernels (Eigen's GEMM in particular) choose
// peeling paths by pointer alignment; pinning the alignment makes every run
// of the same binary bitwise reproducible regardless of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = std::aligned_alloc(kAlign, ((n * sizeof(T) + kAlign - 1) / kAlign) * kAlign);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense NCHW tensor. The scalar type is a template parameter: training runs
// in float, numerical tests instantiate double.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(int n, int c, int h, int w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w), v_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }

  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }

  AlignedVector<T>& vec() { return v_; }
  const AlignedVector<T>& vec() const { return v_; }

  T& operator[](std::size_t i) { return v_[i]; }
  const T& operator[](std::size_t i) const { return v_[i]; }

  T& at(int in, int ic, int iy, int ix) { return v_[index(in, ic, iy, ix)]; }
  const T& at(int in, int ic, int iy, int ix) const { return v_[index(in, ic, iy, ix)]; }

  std::size_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::size_t>(in) * c_ + ic) * h_ + iy) * w_ + ix;
  }

  // Pointer to the start of image `in` (c*h*w contiguous scalars).
  T* image(int in) { return v_.data() + static_cast<std::size_t>(in) * c_ * h_ * w_; }
  const T* image(int in) const {
    return v_.data() + static_cast<std::size_t>(in) * c_ * h_ * w_;
  }

  std::size_t image_size() const { return static_cast<std::size_t>(c_) * h_ * w_; }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n_) + "," + std::to_string(c_) + "," +
           std::to_string(h_) + "," + std::to_string(w_) + ")";
  }

  void fill(T value) { v_.assign(v_.size(), value); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_);
    for (std::size_t i = 0; i < v_.size(); ++i) out[i] = static_cast<U>(v_[i]);
    return out;
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<T> v_;
};

// Per-pixel integer class map. 255 is reserved for "ignore": such pixels are
// excluded from every loss and metric.
inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> ids;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), ids(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return ids[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return ids[static_cast<std::size_t>(y) * width + x]; }

  bool empty() const { return ids.empty(); }

  bool operator==(const LabelMap& o) const {
    return height == o.height && width == o.width && ids == o.ids;
  }
};

}  // namespace ccvc
