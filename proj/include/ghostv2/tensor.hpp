#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "ghostv2/errors.hpp"
#include "ghostv2/rng.hpp"

namespace ghostv2 {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

constexpr std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

// N-H-W-C extents. Every dimension is at least one.
class Shape {
 public:
  Shape() = default;
  Shape(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) : dims_{n, h, w, c} {
    for (auto d : dims_) {
      if (d < 1) throw ShapeError("shape " + str() + " has a non-positive dimension");
    }
  }

  std::int64_t n() const { return dims_[0]; }
  std::int64_t h() const { return dims_[1]; }
  std::int64_t w() const { return dims_[2]; }
  std::int64_t c() const { return dims_[3]; }
  std::int64_t operator[](std::size_t i) const { return dims_[i]; }
  const std::array<std::int64_t, 4>& dims() const { return dims_; }

  std::int64_t numel() const { return dims_[0] * dims_[1] * dims_[2] * dims_[3]; }

  std::string str() const {
    return "(" + std::to_string(dims_[0]) + "," + std::to_string(dims_[1]) + "," +
           std::to_string(dims_[2]) + "," + std::to_string(dims_[3]) + ")";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::array<std::int64_t, 4> dims_{1, 1, 1, 1};
};

// Dense immutable N-H-W-C array. Copies share storage.
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}, std::vector<T>(1, T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(shape), values_(std::make_shared<const std::vector<T>>(std::move(values))) {
    if (static_cast<std::int64_t>(values_->size()) != shape_.numel()) {
      throw ShapeError("tensor of shape " + shape_.str() + " needs " + std::to_string(shape_.numel()) +
                       " values, got " + std::to_string(values_->size()));
    }
  }

  static Tensor zeros(const Shape& s) { return Tensor(s, std::vector<T>(s.numel(), T(0))); }
  static Tensor full(const Shape& s, T v) { return Tensor(s, std::vector<T>(s.numel(), v)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::vector<T> v) {
    const auto c = static_cast<std::int64_t>(v.size());
    return Tensor(Shape(1, 1, 1, c), std::move(v));
  }
  static Tensor uniform(const Shape& s, double lo, double hi, Rng& rng) {
    std::vector<T> v(s.numel());
    for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(s, std::move(v));
  }
  static Tensor normal(const Shape& s, double stddev, Rng& rng) {
    std::vector<T> v(s.numel());
    for (auto& e : v) e = static_cast<T>(stddev * rng.normal());
    return Tensor(s, std::move(v));
  }

  static constexpr DType dtype() { return dtype_of<T>(); }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  std::span<const T> data() const { return {values_->data(), values_->size()}; }
  std::vector<T> to_vector() const { return *values_; }

  std::size_t offset(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) const {
    return static_cast<std::size_t>(((n * shape_.h() + h) * shape_.w() + w) * shape_.c() + c);
  }
  T operator()(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) const {
    return (*values_)[offset(n, h, w, c)];
  }
  T operator[](std::size_t i) const { return (*values_)[i]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_.str());
    return (*values_)[0];
  }

  // Identity of the underlying buffer; stable across copies of this tensor.
  const void* storage_id() const { return values_.get(); }

  Tensor reshaped(const Shape& s) const {
    if (s.numel() != numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    Tensor t = *this;
    t.shape_ = s;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(values_->begin(), values_->end());
    return Tensor<U>(shape_, std::move(v));
  }

  bool all_finite() const {
    return std::all_of(values_->begin(), values_->end(), [](T v) { return std::isfinite(v); });
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<T>> values_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  auto da = a.data();
  auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace ghostv2
