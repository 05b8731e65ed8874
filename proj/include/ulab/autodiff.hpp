#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ulab/tensor.hpp"

namespace ulab::ad {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Records primitive ops in construction order. Because every op is appended
/// after its inputs, the node list is already a topological order and the
/// backward sweep is a single reverse pass.
///
/// Not thread-safe; use one tape per thread.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Named leaves with requires_grad=true appear in backward()'s result.
  Var<T> leaf(Tensor<T> value, bool requires_grad, std::string name = {});
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Reverse sweep from a scalar loss. Returns gradients of named leaves.
  GradMap<T> backward(Var<T> loss);

  /// Gradient of any node after backward(); zeros if none flowed into it.
  Tensor<T> grad(Var<T> v) const;

  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    std::function<void()> backward_fn;
  };
  Var<T> record(Tensor<T> value, bool requires_grad, std::function<void()> backward_fn);
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::vector<T>& grad_buffer(std::size_t id);

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------
// Shape rules: elementwise ops require equal shapes, except that the second
// operand may match the trailing dimensions of the first (leading-batch
// expansion). Everything else raises ShapeError.

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> exp(Var<T> a);
/// [m,k] x [k,n] -> [m,n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Rows of table[V,d] selected by ids -> [n,d].
template <typename T> Var<T> embedding(Var<T> table, const std::vector<int>& ids);
/// Along the last dimension.
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> log_softmax(Var<T> a);
template <typename T> Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
/// tanh approximation.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
/// 2-D transpose.
template <typename T> Var<T> transpose(Var<T> a);
/// Square [n,n] score matrix: entries above the diagonal are replaced by a
/// large finite negative value so softmax assigns them zero mass.
template <typename T> Var<T> causal_mask(Var<T> scores);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// 2-D slice [begin, begin+len) along `axis`.
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t len);
/// out[i] = a[rows[i], cols[i]] for a 2-D tensor -> [n].
template <typename T>
Var<T> pick(Var<T> a, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace ulab::ad
