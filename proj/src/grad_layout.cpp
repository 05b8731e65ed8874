#include "ulab/grad_layout.hpp"

#include <cmath>

namespace ulab::ad {

GradLayout GradLayout::from_shapes(const std::vector<std::pair<std::string, Shape>>& shapes) {
  GradLayout layout;
  for (const auto& [name, shape] : shapes) {
    layout.entries.push_back({name, shape, layout.total});
    layout.total += shape_numel(shape);
  }
  return layout;
}

bool GradLayout::operator==(const GradLayout& other) const {
  if (total != other.total || entries.size() != other.entries.size()) return false;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& a = entries[i];
    const auto& b = other.entries[i];
    if (a.name != b.name || a.shape != b.shape || a.offset != b.offset) return false;
  }
  return true;
}

template <typename T>
std::vector<T> flatten(const GradMap<T>& grads, const GradLayout& layout) {
  if (grads.size() != layout.entries.size()) {
    throw Error("flatten: gradient map has " + std::to_string(grads.size()) +
                " tensors, layout expects " + std::to_string(layout.entries.size()));
  }
  std::vector<T> flat(layout.total);
  for (const auto& e : layout.entries) {
    auto it = grads.find(e.name);
    if (it == grads.end()) throw Error("flatten: missing gradient for '" + e.name + "'");
    if (it->second.shape != e.shape) {
      throw ShapeError("flatten: '" + e.name + "' has shape " + shape_str(it->second.shape) +
                       ", layout expects " + shape_str(e.shape));
    }
    std::copy(it->second.data.begin(), it->second.data.end(),
              flat.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  return flat;
}

template <typename T>
GradMap<T> unflatten(const std::vector<T>& flat, const GradLayout& layout) {
  if (flat.size() != layout.total) {
    throw ShapeError("unflatten: vector of length " + std::to_string(flat.size()) +
                     " does not match layout total " + std::to_string(layout.total));
  }
  GradMap<T> out;
  for (const auto& e : layout.entries) {
    const auto first = flat.begin() + static_cast<std::ptrdiff_t>(e.offset);
    out.emplace(e.name, Tensor<T>(e.shape, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(
                                                                          shape_numel(e.shape)))));
  }
  return out;
}

template <typename T>
double dot(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename T>
double norm(const std::vector<T>& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
double cosine(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    aa += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    bb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

template <typename T>
void axpy(std::vector<T>& a, T s, const std::vector<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("axpy: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

#define ULAB_INSTANTIATE(T)                                                     \
  template std::vector<T> flatten(const GradMap<T>&, const GradLayout&);        \
  template GradMap<T> unflatten(const std::vector<T>&, const GradLayout&);      \
  template double dot(const std::vector<T>&, const std::vector<T>&);            \
  template double norm(const std::vector<T>&);                                  \
  template double cosine(const std::vector<T>&, const std::vector<T>&);         \
  template void axpy(std::vector<T>&, T, const std::vector<T>&);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::ad
