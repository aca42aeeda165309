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

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Every op that has at least one input with requires_grad=true records a
// TapeNode on its output. Nodes hold shared ownership of their inputs, so a
// loss tensor keeps its whole graph alive; the graph is released when the
// loss goes out of scope. Tensors built only from frozen inputs record
// nothing.
//
// The tape is not thread-safe per graph, but independent graphs built against
// the same read-only leaves may be differentiated concurrently through
// compute_gradients(), which never writes to the leaves.

#ifndef DPLORA_TENSOR_H_
#define DPLORA_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dplora {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

template <typename T>
struct TapeNode {
  using Impl = TensorImpl<T>;
  // grad_in[i] is null when inputs[i] takes no gradient; otherwise it is a
  // zero-initialised (or partially accumulated) buffer the rule adds into.
  using BackwardFn = std::function<void(const Impl& out, std::span<const T> grad_out,
                                        std::span<std::vector<T>*> grad_in)>;

  std::string op;
  std::vector<std::shared_ptr<Impl>> inputs;
  BackwardFn backward;
};

template <typename T>
struct TensorImpl {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;  // null for leaves
};

std::uint64_t next_tensor_id();

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  BasicTensor();
  explicit BasicTensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  std::uint64_t id() const { return impl_->id; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Direct mutation is meant for leaves (optimizer updates, initialisation).
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const;
  T at(std::size_t i) const { return impl_->data.at(i); }
  T at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  // Only leaves can change trainability.
  void set_requires_grad(bool value);
  bool is_leaf() const { return impl_->node == nullptr; }
  const TapeNode<T>* node() const { return impl_->node.get(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  // New leaf holding a copy of the values; not attached to any tape.
  BasicTensor detach() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

// Leaf id -> gradient, for every requires_grad leaf reachable from the loss.
template <typename T>
using BasicGradientMap = std::map<std::uint64_t, std::vector<T>>;
using GradientMap = BasicGradientMap<double>;

// Gradients of a scalar loss with respect to every reachable requires_grad
// leaf. Leaves are left untouched, so independent graphs may run in parallel.
template <typename T>
BasicGradientMap<T> compute_gradients(const BasicTensor<T>& loss);

// compute_gradients plus additive accumulation into each leaf's grad buffer.
template <typename T>
BasicGradientMap<T> backward(const BasicTensor<T>& loss);

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast numpy-style.

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

// [m,k] x [k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);
// x[m,k] * w[n,k]^T (+ bias[n]) -> [m,n]. The weight layout matches a
// d_out x d_in matrix W, so this computes x W^T.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias = nullptr);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
// tanh approximation
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x);
// Throws DomainError on any non-positive entry.
template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x);

// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x);
// Normalises each row (last axis) to zero mean and unit variance, using
// variance + eps under the square root. No affine part.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, T eps = T(1e-5));

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);
// [m,n] -> [1,n]
template <typename T>
BasicTensor<T> mean_rows(const BasicTensor<T>& x);

// Gathers rows of table[V,d] -> [ids.size(), d].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids);
template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t width);
template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts);
template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);

// Mean binary cross-entropy over all entries, in the stable form
// max(z,0) - z*y + log(1 + exp(-|z|)). targets must hold 0/1 and never
// receive gradient.
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets);
// Mean over rows of -log softmax(logits[r])[targets[r]].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> targets);

// ---------------------------------------------------------------------------
// Per-sample gradients.

// Builds the scalar loss for one sample index. Must only read shared state.
template <typename T>
using SampleLossFn = std::function<BasicTensor<T>(std::size_t sample)>;

// Entry i holds the gradients of loss_fn(samples[i]) alone, computed on its
// own tape. When threads > 1 the samples are spread across worker threads;
// the output order is always the sample order.
template <typename T>
std::vector<BasicGradientMap<T>> per_sample_gradients(const SampleLossFn<T>& loss_fn,
                                                      std::span<const std::size_t> samples,
                                                      unsigned threads = 1);

}  // namespace dplora

#endif  // DPLORA_TENSOR_H_
