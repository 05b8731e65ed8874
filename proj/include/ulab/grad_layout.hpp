#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ulab/autodiff.hpp"

namespace ulab::ad {

/// Fixed ordering of named tensors inside a flat vector.
struct LayoutEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
};

struct GradLayout {
  std::vector<LayoutEntry> entries;
  std::size_t total = 0;

  static GradLayout from_shapes(const std::vector<std::pair<std::string, Shape>>& shapes);
  bool operator==(const GradLayout& other) const;
};

/// Flattened gradient in layout order. Missing entries raise an Error.
template <typename T>
std::vector<T> flatten(const GradMap<T>& grads, const GradLayout& layout);

template <typename T>
GradMap<T> unflatten(const std::vector<T>& flat, const GradLayout& layout);

/// Index-ascending, accumulated in double.
template <typename T>
double dot(const std::vector<T>& a, const std::vector<T>& b);

template <typename T>
double norm(const std::vector<T>& a);

/// Cosine similarity; 0 when either vector is zero.
template <typename T>
double cosine(const std::vector<T>& a, const std::vector<T>& b);

/// a += s * b
template <typename T>
void axpy(std::vector<T>& a, T s, const std::vector<T>& b);

}  // namespace ulab::ad
