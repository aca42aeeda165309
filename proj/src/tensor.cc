//
// Copyright 2026 The dplora Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include "dplora/tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "dplora/errors.h"

namespace dplora {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

template <typename T>
std::shared_ptr<TensorImpl<T>> new_impl(Shape shape, std::vector<T> data) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->id = next_tensor_id();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// Wraps a freshly computed value as the output of `op`. The backward rule is
// only materialised when some input participates in the tape.
template <typename T, typename Fn>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                           std::vector<std::shared_ptr<TensorImpl<T>>> inputs, Fn&& fn) {
  auto impl = new_impl<T>(std::move(shape), std::move(data));
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const auto& in) { return in->requires_grad; });
  if (tracked) {
    impl->requires_grad = true;
    auto node = std::make_shared<TapeNode<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Fn>(fn);
    impl->node = std::move(node);
  }
  return BasicTensor<T>(std::move(impl));
}

void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(s));
  }
}

// Index maps from each output element back to its source elements under
// numpy-style right-aligned broadcasting.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [rank](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto sa = strides(pa);
  const auto sb = strides(pb);
  const std::size_t n = shape_numel(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    bc.a_index[flat] = ia;
    bc.b_index[flat] = ib;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (counter[axis] < bc.out[axis]) break;
      ia -= sa[axis] * counter[axis];
      ib -= sb[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return bc;
}

template <typename T, typename Fwd, typename DA, typename DB>
BasicTensor<T> binary_op(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op, Fwd fwd,
                         DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  const std::size_t n = shape_numel(bc->out);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (bc->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[bc->a_index[i]], bv[bc->b_index[i]]);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>(
      bc->out, std::move(out), op, {ai, bi},
      [bc, ai, bi, da, db](const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
        const auto& av = ai->data;
        const auto& bv = bi->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = bc->same ? i : bc->a_index[i];
          const std::size_t ib = bc->same ? i : bc->b_index[i];
          if (gin[0]) (*gin[0])[ia] += g[i] * da(av[ia], bv[ib]);
          if (gin[1]) (*gin[1])[ib] += g[i] * db(av[ia], bv[ib]);
        }
      });
}

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary_op(const BasicTensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), op, {xi},
                        [xi, deriv](const TensorImpl<T>& self, std::span<const T> g,
                                    std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            gx[i] += g[i] * deriv(xi->data[i], self.data[i]);
                          }
                        });
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor() : impl_(new_impl<T>(Shape{1}, std::vector<T>(1, T(0)))) {}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  const std::size_t n = shape_numel(shape);
  auto impl = new_impl<T>(std::move(shape), std::vector<T>(n, value));
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = new_impl<T>(std::move(shape), std::move(values));
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::size_t row, std::size_t col) const {
  require_2d(shape(), "at(row, col)");
  if (row >= dim(0) || col >= dim(1)) throw DimensionError("index out of range");
  return impl_->data[row * dim(1) + col];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(new_impl<T>(impl_->shape, impl_->data));
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
BasicGradientMap<T> compute_gradients(const BasicTensor<T>& loss) {
  using Impl = TensorImpl<T>;
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss does not depend on any tensor with requires_grad");
  }

  // Post-order DFS gives a topological order with inputs before consumers.
  std::vector<const Impl*> order;
  std::unordered_set<const Impl*> visited;
  std::vector<std::pair<const Impl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      const Impl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<const Impl*, std::vector<T>> grads;
  grads[loss.impl().get()] = std::vector<T>(1, T(1));
  BasicGradientMap<T> result;
  std::vector<std::vector<T>*> gin;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Impl* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    if (!impl->node) {
      result.emplace(impl->id, std::move(found->second));
      grads.erase(found);
      continue;
    }
    const auto& inputs = impl->node->inputs;
    gin.assign(inputs.size(), nullptr);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i]->requires_grad) continue;
      auto& buf = grads[inputs[i].get()];
      if (buf.empty()) buf.assign(inputs[i]->data.size(), T(0));
      gin[i] = &buf;
    }
    // grads is node-based, so the reference survives the inserts above.
    const std::vector<T>& gout = grads.find(impl)->second;
    impl->node->backward(*impl, gout, gin);
    grads.erase(impl);
  }
  return result;
}

template <typename T>
BasicGradientMap<T> backward(const BasicTensor<T>& loss) {
  auto grads = compute_gradients(loss);
  // Walk the graph once more to find the leaves and accumulate in place.
  std::vector<std::shared_ptr<TensorImpl<T>>> stack{loss.impl()};
  std::unordered_set<const TensorImpl<T>*> seen{loss.impl().get()};
  while (!stack.empty()) {
    auto impl = std::move(stack.back());
    stack.pop_back();
    if (!impl->node) {
      auto g = grads.find(impl->id);
      if (g != grads.end() && impl->requires_grad) {
        if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
        for (std::size_t i = 0; i < g->second.size(); ++i) impl->grad[i] += g->second[i];
      }
      continue;
    }
    for (const auto& in : impl->node->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  return unary_op<T>(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary_op<T>(
      x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return unary_op<T>(
      x, "gelu",
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(kC * (v + kA * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary_op<T>(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary_op<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0)) {
      throw DomainError("log of non-positive value at flat index " + std::to_string(i));
    }
  }
  return unary_op<T>(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d(a.shape(), "matmul");
  require_2d(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>(
      Shape{m, n}, std::move(out), "matmul", {ai, bi},
      [ai, bi, m, k, n](const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
        const T* av = ai->data.data();
        const T* bv = bi->data.data();
        if (gin[0]) {
          T* ga = gin[0]->data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (gin[1]) {
          T* gb = gin[1]->data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_2d(a.shape(), "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto ai = a.impl();
  return make_result<T>(Shape{n, m}, std::move(out), "transpose", {ai},
                        [m, n](const TensorImpl<T>&, std::span<const T> g,
                               std::span<std::vector<T>*> gin) {
                          auto& ga = *gin[0];
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                        });
}

// Dot products in four interleaved partial sums, combined pairwise. The
// order depends only on k, so every caller sees identical rounding.
template <typename T>
struct Lanes4Of;
template <>
struct Lanes4Of<double> {
  using type = double __attribute__((vector_size(32)));
};
template <>
struct Lanes4Of<float> {
  using type = float __attribute__((vector_size(16)));
};
template <typename T>
using Lanes4 = typename Lanes4Of<T>::type;

template <typename T>
Lanes4<T> load4(const T* p) {
  Lanes4<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
T reduce4(Lanes4<T> s) {
  return (s[0] + s[1]) + (s[2] + s[3]);
}

template <typename T>
T dot_lanes(const T* x, const T* w, std::size_t k) {
  Lanes4<T> s{};
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) s += load4(x + p) * load4(w + p);
  for (; p < k; ++p) s[p % 4] += x[p] * w[p];
  return reduce4<T>(s);
}

// Same lane order as dot_lanes for C rows of w at once.
template <typename T, std::size_t C>
void dot_rows_lanes(const T* x, const T* w, std::size_t k, T* out) {
  Lanes4<T> s[C] = {};
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    const Lanes4<T> xv = load4(x + p);
    for (std::size_t c = 0; c < C; ++c) s[c] += xv * load4(w + c * k + p);
  }
  for (; p < k; ++p)
    for (std::size_t c = 0; c < C; ++c) s[c][p % 4] += x[p] * w[c * k + p];
  for (std::size_t c = 0; c < C; ++c) out[c] = reduce4<T>(s[c]);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias) {
  require_2d(x.shape(), "linear");
  require_2d(weight.shape(), "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(0);
  if (weight.dim(1) != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (bias && bias->numel() != n) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  std::vector<T> out(m * n);
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias ? bias->values().data() : nullptr;
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = xv + i * k;
    T* orow = out.data() + i * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      T r[8];
      dot_rows_lanes<T, 8>(xr, wv + j * k, k, r);
      for (std::size_t c = 0; c < 8; ++c) orow[j + c] = bv ? bv[j + c] + r[c] : r[c];
    }
    for (; j + 4 <= n; j += 4) {
      T r[4];
      dot_rows_lanes<T, 4>(xr, wv + j * k, k, r);
      for (std::size_t c = 0; c < 4; ++c) orow[j + c] = bv ? bv[j + c] + r[c] : r[c];
    }
    for (; j < n; ++j) {
      const T d = dot_lanes(xr, wv + j * k, k);
      orow[j] = bv ? bv[j] + d : d;
    }
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs{x.impl(), weight.impl()};
  if (bias) inputs.push_back(bias->impl());
  auto xi = x.impl();
  auto wi = weight.impl();
  return make_result<T>(
      Shape{m, n}, std::move(out), "linear", std::move(inputs),
      [xi, wi, m, k, n](const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
        const T* xv = xi->data.data();
        const T* wv = wi->data.data();
        if (gin[0]) {
          T* gx = gin[0]->data();
          for (std::size_t i = 0; i < m; ++i) {
            T* gxr = gx + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const T gij = g[i * n + j];
              if (gij == T(0)) continue;
              const T* wr = wv + j * k;
              for (std::size_t p = 0; p < k; ++p) gxr[p] += gij * wr[p];
            }
          }
        }
        if (gin[1]) {
          T* gw = gin[1]->data();
          for (std::size_t i = 0; i < m; ++i) {
            const T* xr = xv + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const T gij = g[i * n + j];
              if (gij == T(0)) continue;
              T* gwr = gw + j * k;
              for (std::size_t p = 0; p < k; ++p) gwr[p] += gij * xr[p];
            }
          }
        }
        if (gin.size() > 2 && gin[2]) {
          T* gb = gin[2]->data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), "softmax", {xi},
                        [rows, cols](const TensorImpl<T>& self, std::span<const T> g,
                                     std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.data.data() + r * cols;
                            const T* gr = g.data() + r * cols;
                            T dot = 0;
                            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
                            for (std::size_t c = 0; c < cols; ++c) {
                              gx[r * cols + c] += y[c] * (gr[c] - dot);
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, T eps) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (in[c] - mu) * is;
  }
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {xi},
                        [rows, cols, inv_std](const TensorImpl<T>& self, std::span<const T> g,
                                              std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.data.data() + r * cols;
                            const T* gr = g.data() + r * cols;
                            T mean_g = 0, mean_gy = 0;
                            for (std::size_t c = 0; c < cols; ++c) {
                              mean_g += gr[c];
                              mean_gy += gr[c] * y[c];
                            }
                            mean_g /= T(cols);
                            mean_gy /= T(cols);
                            const T is = (*inv_std)[r];
                            for (std::size_t c = 0; c < cols; ++c) {
                              gx[r * cols + c] += is * (gr[c] - mean_g - y[c] * mean_gy);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const auto& xv = x.values();
  T total = 0;
  for (T v : xv) total += v;
  return make_result<T>(Shape{1}, {total}, "sum", {x.impl()},
                        [](const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
                          for (auto& v : *gin[0]) v += g[0];
                        });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const auto& xv = x.values();
  T total = 0;
  for (T v : xv) total += v;
  const T n = T(xv.size());
  return make_result<T>(Shape{1}, {total / n}, "mean", {x.impl()},
                        [n](const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
                          for (auto& v : *gin[0]) v += g[0] / n;
                        });
}

template <typename T>
BasicTensor<T> mean_rows(const BasicTensor<T>& x) {
  require_2d(x.shape(), "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto& xv = x.values();
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  for (auto& v : out) v /= T(m);
  return make_result<T>(Shape{1, n}, std::move(out), "mean_rows", {x.impl()},
                        [m, n](const TensorImpl<T>&, std::span<const T> g,
                               std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] / T(m);
                        });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids) {
  require_2d(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  std::vector<T> out(ids.size() * d);
  const auto& tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result<T>(Shape{ids.size(), d}, std::move(out), "embedding", {table.impl()},
                        [saved = std::move(saved), d](const TensorImpl<T>&, std::span<const T> g,
                                                      std::span<std::vector<T>*> gin) {
                          auto& gt = *gin[0];
                          for (std::size_t i = 0; i < saved.size(); ++i) {
                            const std::size_t base = static_cast<std::size_t>(saved[i]) * d;
                            for (std::size_t c = 0; c < d; ++c) gt[base + c] += g[i * d + c];
                          }
                        });
}

template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  require_2d(x.shape(), "select_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (rows.empty()) throw DimensionError("select_rows: no rows requested");
  std::vector<T> out(rows.size() * n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("select_rows: row index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return make_result<T>(Shape{rows.size(), n}, std::move(out), "select_rows", {x.impl()},
                        [saved = std::move(saved), n](const TensorImpl<T>&, std::span<const T> g,
                                                      std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < saved.size(); ++i)
                            for (std::size_t c = 0; c < n; ++c) gx[saved[i] * n + c] += g[i * n + c];
                        });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t width) {
  require_2d(x.shape(), "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (width == 0 || start + width > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") outside " + shape_str(x.shape()));
  }
  std::vector<T> out(m * width);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = xv[i * n + start + j];
  return make_result<T>(Shape{m, width}, std::move(out), "slice_cols", {x.impl()},
                        [m, n, start, width](const TensorImpl<T>&, std::span<const T> g,
                                             std::span<std::vector<T>*> gin) {
                          auto& gx = *gin[0];
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < width; ++j)
                              gx[i * n + start + j] += g[i * width + j];
                        });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  for (const auto& p : parts) {
    require_2d(p.shape(), "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    n += p.dim(1);
    inputs.push_back(p.impl());
  }
  std::vector<T> out(m * n);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * n + offset + j] = pv[i * widths[k] + j];
    offset += widths[k];
  }
  return make_result<T>(Shape{m, n}, std::move(out), "concat_cols", std::move(inputs),
                        [m, n, widths](const TensorImpl<T>&, std::span<const T> g,
                                       std::span<std::vector<T>*> gin) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            if (gin[k]) {
                              auto& gp = *gin[k];
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                  gp[i * widths[k] + j] += g[i * n + offset + j];
                            }
                            offset += widths[k];
                          }
                        });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].dim(1);
  std::vector<std::size_t> sizes;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_2d(p.shape(), "concat_rows");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column counts differ, " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    sizes.push_back(p.numel());
    m += p.dim(0);
    inputs.push_back(p.impl());
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result<T>(Shape{m, n}, std::move(out), "concat_rows", std::move(inputs),
                        [sizes](const TensorImpl<T>&, std::span<const T> g,
                                std::span<std::vector<T>*> gin) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < sizes.size(); ++k) {
                            if (gin[k]) {
                              auto& gp = *gin[k];
                              for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[offset + i];
                            }
                            offset += sizes[k];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ContractError("bce_with_logits: logits " + shape_str(logits.shape()) +
                        " vs targets " + shape_str(targets.shape()));
  }
  if (targets.requires_grad()) throw ContractError("bce_with_logits: targets must be constants");
  const auto& z = logits.values();
  const auto& y = targets.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != T(0) && y[i] != T(1)) {
      throw ContractError("bce_with_logits: target at flat index " + std::to_string(i) +
                          " is not 0 or 1");
    }
  }
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  const T n = T(z.size());
  auto ti = targets.impl();
  auto zi = logits.impl();
  return make_result<T>(Shape{1}, {total / n}, "bce_with_logits", {zi, ti},
                        [zi, ti, n](const TensorImpl<T>&, std::span<const T> g,
                                    std::span<std::vector<T>*> gin) {
                          auto& gz = *gin[0];
                          for (std::size_t i = 0; i < gz.size(); ++i) {
                            gz[i] += g[0] * (stable_sigmoid(zi->data[i]) - ti->data[i]) / n;
                          }
                        });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> targets) {
  require_2d(logits.shape(), "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(rows) + " rows");
  }
  const auto& zv = logits.values();
  auto probs = std::make_shared<std::vector<T>>(zv.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw ContractError("softmax_cross_entropy: target out of range in row " + std::to_string(r));
    }
    const T* z = zv.data() + r * cols;
    T* p = probs->data() + r * cols;
    const T mx = *std::max_element(z, z + cols);
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(z[c] - mx);
      s += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= s;
    total += std::log(s) + mx - z[targets[r]];
  }
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return make_result<T>(Shape{1}, {total / T(rows)}, "softmax_cross_entropy", {logits.impl()},
                        [probs, saved = std::move(saved), rows, cols](
                            const TensorImpl<T>&, std::span<const T> g, std::span<std::vector<T>*> gin) {
                          auto& gz = *gin[0];
                          const T w = g[0] / T(rows);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) {
                              T d = (*probs)[r * cols + c];
                              if (static_cast<std::int32_t>(c) == saved[r]) d -= T(1);
                              gz[r * cols + c] += w * d;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Per-sample gradients

template <typename T>
std::vector<BasicGradientMap<T>> per_sample_gradients(const SampleLossFn<T>& loss_fn,
                                                      std::span<const std::size_t> samples,
                                                      unsigned threads) {
  if (samples.empty()) throw ContractError("per_sample_gradients: empty batch");
  std::vector<BasicGradientMap<T>> out(samples.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, samples.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = compute_gradients(loss_fn(samples[i]));
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < samples.size(); i += workers) {
            out[i] = compute_gradients(loss_fn(samples[i]));
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Instantiations

#define DPLORA_INSTANTIATE(T)                                                                    \
  template class BasicTensor<T>;                                                                 \
  template BasicGradientMap<T> compute_gradients(const BasicTensor<T>&);                         \
  template BasicGradientMap<T> backward(const BasicTensor<T>&);                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                       \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                      \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                 const BasicTensor<T>*);                                         \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                        \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                            \
  template BasicTensor<T> log(const BasicTensor<T>&);                                            \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                        \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                            \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                           \
  template BasicTensor<T> mean_rows(const BasicTensor<T>&);                                      \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const std::int32_t>);       \
  template BasicTensor<T> select_rows(const BasicTensor<T>&, std::span<const std::size_t>);      \
  template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>&);                       \
  template BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>&);                       \
  template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&,                           \
                                                std::span<const std::int32_t>);                  \
  template std::vector<BasicGradientMap<T>> per_sample_gradients(                                \
      const SampleLossFn<T>&, std::span<const std::size_t>, unsigned);

DPLORA_INSTANTIATE(float)
DPLORA_INSTANTIATE(double)

#undef DPLORA_INSTANTIATE

}  // namespace dplora
