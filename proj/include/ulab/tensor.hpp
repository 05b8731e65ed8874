#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by tensor primitives on incompatible operand shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor. The element type is picked when a graph is built:
/// float for experiments, double for gradient checks and oracles.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " elements, got " +
                       std::to_string(data.size()));
    }
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }
  static Tensor filled(Shape s, T v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  template <typename Rng>
  static Tensor randn(Shape s, T stddev, Rng& rng) {
    Tensor t(std::move(s));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : t.data) x = static_cast<T>(dist(rng) * static_cast<double>(stddev));
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  /// Size of the last dimension (1 for scalars).
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const { return shape.empty() ? 1 : numel() / shape.back(); }

  T item() const {
    if (data.size() != 1) {
      throw ShapeError("item: expected a single element, shape " + shape_str(shape));
    }
    return data[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool operator==(const Tensor& other) const = default;
};

/// Index-ascending sum.
template <typename T>
T ordered_sum(const std::vector<T>& v) {
  T acc = T(0);
  for (const T& x : v) acc += x;
  return acc;
}

}  // namespace ulab
