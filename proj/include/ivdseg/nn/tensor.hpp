#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"

namespace ivdseg::nn {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized products peel differently depending on
/// pointer alignment; a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + ")";
}

/// Values plus an optional gradient of the same shape. Gradients accumulate:
/// backward passes add into them and only zero_grad() clears them.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape dims, bool with_grad = false) : dims_(std::move(dims)), values_(shape_size(dims_), S(0)) {
    check_dims();
    if (with_grad) grad_.assign(values_.size(), S(0));
  }
  Tensor(Shape dims, const std::vector<S>& values) : dims_(std::move(dims)), values_(values.begin(), values.end()) {
    check_dims();
    if (values_.size() != shape_size(dims_))
      throw ShapeError("tensor value count " + std::to_string(values_.size()) + " != " + shape_string(dims_));
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t i) const noexcept { return dims_[i]; }

  std::span<S> values() noexcept { return values_; }
  std::span<const S> values() const noexcept { return values_; }
  S* data() noexcept { return values_.data(); }
  const S* data() const noexcept { return values_.data(); }
  S& operator[](std::size_t i) noexcept { return values_[i]; }
  const S& operator[](std::size_t i) const noexcept { return values_[i]; }

  bool has_grad() const noexcept { return !grad_.empty() || values_.empty(); }
  std::span<S> grad() noexcept { return grad_; }
  std::span<const S> grad() const noexcept { return grad_; }
  void enable_grad() {
    if (grad_.size() != values_.size()) grad_.assign(values_.size(), S(0));
  }
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), S(0)); }

  /// Reshape in place keeping capacity; contents are unspecified afterwards.
  void resize(const Shape& dims, bool with_grad) {
    if (dims_ != dims) {
      dims_ = dims;
      check_dims();
      values_.resize(shape_size(dims_));
    }
    if (with_grad) grad_.resize(values_.size());
    else grad_.clear();
  }

  // (N, C, spatial...) conventions used by the network layers.
  std::size_t batch() const noexcept { return dims_.empty() ? 0 : dims_[0]; }
  std::size_t channels() const noexcept { return dims_.size() < 2 ? 1 : dims_[1]; }
  std::size_t spatial_size() const noexcept {
    std::size_t n = 1;
    for (std::size_t i = 2; i < dims_.size(); ++i) n *= dims_[i];
    return n;
  }

 private:
  void check_dims() const {
    if (dims_.empty() || dims_.size() > 5) throw ShapeError("tensor rank must be 1..5, got " + shape_string(dims_));
    for (auto d : dims_)
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_string(dims_));
  }

  Shape dims_;
  AlignedVector<S> values_;
  AlignedVector<S> grad_;
};

}  // namespace ivdseg::nn
