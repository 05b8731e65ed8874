#include "ulab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ulab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace ulab

namespace ulab::ad {

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

// True when b equals a or the trailing dimensions of a.
bool trailing_match(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T>
void require_same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw Error(std::string(op) + ": operands recorded on different tapes");
  }
}

template <typename T>
void require_2d(const char* op, Var<T> a) {
  if (a.shape().size() != 2) shape_fail(op, a.shape(), "is not 2-D");
}

}  // namespace

// ---- Var / Tape -----------------------------------------------------------

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad, std::string name) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, bool requires_grad, std::function<void()> backward_fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
  return n.grad;
}

template <typename T>
GradMap<T> Tape<T>::backward(Var<T> loss) {
  if (loss.tape() != this) throw Error("backward: loss was recorded on another tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) throw Error("backward: tape already consumed");
  backward_done_ = true;
  if (nodes_[loss.id()].requires_grad) {
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward_fn) continue;
      n.backward_fn();
    }
  }
  GradMap<T> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!n.is_leaf || !n.requires_grad || n.name.empty()) continue;
    Tensor<T> g(n.value.shape);
    if (!n.grad.empty()) g.data = n.grad;
    out.insert_or_assign(n.name, std::move(g));
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const auto& n = nodes_.at(v.id());
  Tensor<T> g(n.value.shape);
  if (!n.grad.empty()) g.data = n.grad;
  return g;
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape("add", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!trailing_match(av.shape, bv.shape)) shape_fail("add", av.shape, bv.shape);
  const std::size_t n = av.numel(), nb = std::max<std::size_t>(bv.numel(), 1);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] + bv.data[i % nb];
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad() || b.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    if (tape->node(ia).requires_grad) {
      auto& ga = tape->grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (tape->node(ib).requires_grad) {
      auto& gb = tape->grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape("sub", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!trailing_match(av.shape, bv.shape)) shape_fail("sub", av.shape, bv.shape);
  const std::size_t n = av.numel(), nb = std::max<std::size_t>(bv.numel(), 1);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] - bv.data[i % nb];
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad() || b.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    if (tape->node(ia).requires_grad) {
      auto& ga = tape->grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (tape->node(ib).requires_grad) {
      auto& gb = tape->grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!trailing_match(av.shape, bv.shape)) shape_fail("mul", av.shape, bv.shape);
  const std::size_t n = av.numel(), nb = std::max<std::size_t>(bv.numel(), 1);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] * bv.data[i % nb];
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad() || b.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    const auto& x = tape->node(ia).value.data;
    const auto& y = tape->node(ib).value.data;
    if (tape->node(ia).requires_grad) {
      auto& ga = tape->grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i % nb];
    }
    if (tape->node(ib).requires_grad) {
      auto& gb = tape->grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * x[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const auto& av = a.value();
  Tensor<T> out(av.shape);
  const std::size_t n = av.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] * s;
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape);
  const std::size_t n = av.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = std::exp(av.data[i]);
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& node = tape->node(self);
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += node.grad[i] * node.value.data[i];
  });
}

// ---- matmul -----------------------------------------------------------------
// All three products are written as row axpys so that every output element is
// accumulated in ascending order of the contracted index.

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape("matmul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) {
    shape_fail("matmul", av.shape, bv.shape);
  }
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> out({m, n});
  {
    const T* A = av.data.data();
    const T* B = bv.data.data();
    T* C = out.data.data();
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        const T* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad() || b.requires_grad(), [=] {
    const T* G = tape->node(self).grad.data();
    const T* A = tape->node(ia).value.data.data();
    const T* B = tape->node(ib).value.data.data();
    if (tape->node(ia).requires_grad) {
      // dA[i,p] = sum_j G[i,j] B[p,j]
      std::vector<T> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
      T* GA = tape->grad_buffer(ia).data();
      for (std::size_t i = 0; i < m; ++i) {
        T* garow = GA + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T gij = G[i * n + j];
          const T* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gij * btrow[p];
        }
      }
    }
    if (tape->node(ib).requires_grad) {
      // dB[p,j] = sum_i A[i,p] G[i,j]
      T* GB = tape->grad_buffer(ib).data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          T* gbrow = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

// ---- embedding --------------------------------------------------------------

template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
  const auto& tv = table.value();
  if (tv.rank() != 2) shape_fail("embedding", tv.shape, "is not a 2-D table");
  const std::size_t vocab = tv.shape[0], d = tv.shape[1];
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " outside table " +
                       shape_str(tv.shape));
    }
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Tape<T>* tape = table.tape();
  const std::size_t it = table.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), table.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& gt = tape->grad_buffer(it);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::size_t base = static_cast<std::size_t>(ids[r]) * d;
      for (std::size_t j = 0; j < d; ++j) gt[base + j] += g[r * d + j];
    }
  });
}

// ---- softmax family ---------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor<T> out(av.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    T mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= z;
  }
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& node = tape->node(self);
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.value.data.data() + r * cols;
      const T* g = node.grad.data() + r * cols;
      T s = T(0);
      for (std::size_t j = 0; j < cols; ++j) s += g[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += y[j] * (g[j] - s);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor<T> out(av.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    T mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] - lz;
  }
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& node = tape->node(self);
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.value.data.data() + r * cols;
      const T* g = node.grad.data() + r * cols;
      T s = T(0);
      for (std::size_t j = 0; j < cols; ++j) s += g[j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[j] - std::exp(y[j]) * s;
    }
  });
}

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  require_same_tape("layernorm", x, gain);
  require_same_tape("layernorm", x, bias);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  if (gain.value().shape != Shape{d}) shape_fail("layernorm", xv.shape, gain.value().shape);
  if (bias.value().shape != Shape{d}) shape_fail("layernorm", xv.shape, bias.value().shape);
  Tensor<T> out(xv.shape);
  std::vector<T> xhat(xv.numel()), rstd(rows);
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out.data[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  Tape<T>* tape = x.tape();
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  std::size_t self = tape->size();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return tape->record(std::move(out), rg, [=, xhat = std::move(xhat), rstd = std::move(rstd)] {
    const auto& g = tape->node(self).grad;
    const auto& gainv = tape->node(ig).value.data;
    if (tape->node(ig).requires_grad) {
      auto& gg = tape->grad_buffer(ig);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
    }
    if (tape->node(ib).requires_grad) {
      auto& gb = tape->grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (tape->node(ix).requires_grad) {
      auto& gx = tape->grad_buffer(ix);
      std::vector<T> gh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        T m1 = T(0), m2 = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          gh[j] = g[r * d + j] * gainv[j];
          m1 += gh[j];
          m2 += gh[j] * xhat[r * d + j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
          gx[r * d + j] += rstd[r] * (gh[j] - m1 - xhat[r * d + j] * m2);
        }
      }
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T k = static_cast<T>(0.044715);
  const auto& av = a.value();
  const std::size_t n = av.numel();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av.data[i];
    out.data[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    const auto& xs = tape->node(ia).value.data;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      const T x = xs[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      ga[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
    }
  });
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  const auto& av = a.value();
  if (shape_numel(shape) != av.numel()) shape_fail("reshape", av.shape, shape);
  Tensor<T> out(std::move(shape), av.data);
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  const std::size_t n = av.numel();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_2d("transpose", a);
  const auto& av = a.value();
  const std::size_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = av.data[i * n + j];
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

template <typename T>
Var<T> causal_mask(Var<T> scores) {
  require_2d("causal_mask", scores);
  const auto& sv = scores.value();
  const std::size_t n = sv.shape[0];
  if (sv.shape[1] != n) shape_fail("causal_mask", sv.shape, "is not square");
  const T masked = static_cast<T>(-1e9);
  Tensor<T> out = sv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.data[i * n + j] = masked;
  Tape<T>* tape = scores.tape();
  const std::size_t ia = scores.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), scores.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) ga[i * n + j] += g[i * n + j];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  const std::size_t n = av.numel();
  Tensor<T> out = Tensor<T>::scalar(ordered_sum(av.data));
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const T g = tape->node(self).grad[0];
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape<T>* tape = parts[0].tape();
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 2) shape_fail("concat", s0, "is not 2-D");
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_same_tape("concat", parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != 2 || s[1 - axis] != s0[1 - axis]) shape_fail("concat", s0, s);
    total += s[axis];
    rg = rg || p.requires_grad();
  }
  const std::size_t rows = axis == 0 ? total : s0[0];
  const std::size_t cols = axis == 0 ? s0[1] : total;
  Tensor<T> out({rows, cols});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t pr = v.shape[0], pc = v.shape[1];
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t oi = axis == 0 ? off + i : i;
        const std::size_t oj = axis == 0 ? j : off + j;
        out.data[oi * cols + oj] = v.data[i * pc + j];
      }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.shape[axis];
  }
  std::size_t self = tape->size();
  return tape->record(std::move(out), rg, [=] {
    const auto& g = tape->node(self).grad;
    for (std::size_t q = 0; q < ids.size(); ++q) {
      auto& node = tape->node(ids[q]);
      if (!node.requires_grad) continue;
      const std::size_t pr = node.value.shape[0], pc = node.value.shape[1];
      auto& gp = tape->grad_buffer(ids[q]);
      for (std::size_t i = 0; i < pr; ++i)
        for (std::size_t j = 0; j < pc; ++j) {
          const std::size_t oi = axis == 0 ? offsets[q] + i : i;
          const std::size_t oj = axis == 0 ? j : offsets[q] + j;
          gp[i * pc + j] += g[oi * cols + oj];
        }
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t len) {
  require_2d("slice", a);
  if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
  const auto& av = a.value();
  const std::size_t m = av.shape[0], n = av.shape[1];
  if (begin + len > av.shape[axis]) {
    shape_fail("slice", av.shape,
               "cannot take [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                   ") on axis " + std::to_string(axis));
  }
  const std::size_t rows = axis == 0 ? len : m;
  const std::size_t cols = axis == 0 ? n : len;
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 0 ? 0 : begin;
  Tensor<T> out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = av.data[(r0 + i) * n + c0 + j];
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) ga[(r0 + i) * n + c0 + j] += g[i * cols + j];
  });
}

template <typename T>
Var<T> pick(Var<T> a, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  require_2d("pick", a);
  if (rows.size() != cols.size()) throw ShapeError("pick: row and column index counts differ");
  const auto& av = a.value();
  const std::size_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m || cols[i] >= n) {
      shape_fail("pick", av.shape,
                 "has no element (" + std::to_string(rows[i]) + "," + std::to_string(cols[i]) + ")");
    }
    out.data[i] = av.data[rows[i] * n + cols[i]];
  }
  Tape<T>* tape = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = tape->size();
  return tape->record(std::move(out), a.requires_grad(), [=] {
    const auto& g = tape->node(self).grad;
    auto& ga = tape->grad_buffer(ia);
    for (std::size_t i = 0; i < rows.size(); ++i) ga[rows[i] * n + cols[i]] += g[i];
  });
}

// ---- instantiations ---------------------------------------------------------

#define ULAB_INSTANTIATE(T)                                                               \
  template class Var<T>;                                                                  \
  template class Tape<T>;                                                                 \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> sub(Var<T>, Var<T>);                                                    \
  template Var<T> mul(Var<T>, Var<T>);                                                    \
  template Var<T> scale(Var<T>, T);                                                       \
  template Var<T> exp(Var<T>);                                                            \
  template Var<T> matmul(Var<T>, Var<T>);                                                 \
  template Var<T> embedding(Var<T>, const std::vector<int>&);                             \
  template Var<T> softmax(Var<T>);                                                        \
  template Var<T> log_softmax(Var<T>);                                                    \
  template Var<T> layernorm(Var<T>, Var<T>, Var<T>, T);                                   \
  template Var<T> gelu(Var<T>);                                                           \
  template Var<T> reshape(Var<T>, Shape);                                                 \
  template Var<T> transpose(Var<T>);                                                      \
  template Var<T> causal_mask(Var<T>);                                                    \
  template Var<T> sum(Var<T>);                                                            \
  template Var<T> mean(Var<T>);                                                           \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                        \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                   \
  template Var<T> pick(Var<T>, const std::vector<std::size_t>&, const std::vector<std::size_t>&);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::ad
