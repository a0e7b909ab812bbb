#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cats/errors.hpp"

namespace cats {

// Every tensor buffer starts on a 64-byte boundary. Vectorised reductions
// split their work at the first aligned element, so a fixed alignment makes
// their rounding a function of shape alone and runs reproduce bit for bit.
inline constexpr std::size_t kTensorAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kTensorAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kTensorAlignment}); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major tensor. Spatial data is always stored channel-last,
// (D, H, W, C), with D the slowest axis ("raster order" everywhere in this
// library means d-major, then h, then w).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), values_(static_cast<std::size_t>(element_count(shape_)), fill) {}
  Tensor(Shape shape, AlignedVector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_fill();
  }
  Tensor(Shape shape, const std::vector<T>& values) : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    check_fill();
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(values_.size()); }
  bool empty() const noexcept { return values_.empty(); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  AlignedVector<T>& storage() noexcept { return values_; }
  const AlignedVector<T>& storage() const noexcept { return values_; }

  T& operator[](std::int64_t i) noexcept { return values_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const noexcept { return values_[static_cast<std::size_t>(i)]; }

  // Reinterprets the same storage under a new shape with equal element count.
  void reshape(Shape shape) {
    if (element_count(shape) != size()) {
      throw PreconditionError("tensor: cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    AlignedVector<U> out(values_.begin(), values_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_fill() const {
    if (static_cast<std::int64_t>(values_.size()) != element_count(shape_)) {
      throw PreconditionError("tensor: " + std::to_string(values_.size()) +
                              " values do not fill shape " + to_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> values_;
};

}  // namespace cats
