#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcat/error.hpp"

namespace lcat {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor handle. Copies share the underlying buffer, so a
// tensor captured by a tape node sees later gradient accumulation. Image
// batches use [N,C,H,W] layout.
template <typename S>
class BasicTensor {
 public:
  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return BasicTensor(std::move(shape), {}, requires_grad, /*fill=*/true, S(0));
  }

  static BasicTensor full(Shape shape, S value, bool requires_grad = false) {
    return BasicTensor(std::move(shape), {}, requires_grad, /*fill=*/true, value);
  }

  static BasicTensor from_data(Shape shape, std::vector<S> data,
                               bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      fail(Err::Shape, "tensor: shape " + shape_str(shape) + " expects " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    return BasicTensor(std::move(shape), std::move(data), requires_grad,
                       /*fill=*/false, S(0));
  }

  static BasicTensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static BasicTensor identity(int64_t n) {
    BasicTensor out = zeros({n, n});
    for (int64_t i = 0; i < n; ++i) out.data()[static_cast<size_t>(i * n + i)] = S(1);
    return out;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t ndim() const { return impl_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<S>& data() { return impl_->data; }
  const std::vector<S>& data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }

  // Gradient buffer; allocated as zeros on first access.
  std::vector<S>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
    return impl_->grad;
  }
  const std::vector<S>& grad() const {
    const_cast<BasicTensor*>(this)->grad();
    return impl_->grad;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
  }

  S item() const {
    if (numel() != 1)
      fail(Err::Shape, "item: tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
  }

  // Deep copy with fresh grad storage; keeps requires_grad.
  BasicTensor clone() const {
    BasicTensor out = from_data(impl_->shape, impl_->data, impl_->requires_grad);
    return out;
  }

  // Deep copy with no gradient tracking.
  BasicTensor detached() const {
    return from_data(impl_->shape, impl_->data, false);
  }

  // Stable identity of the underlying buffer (adjoint map key).
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
  };

  BasicTensor(Shape shape, std::vector<S> data, bool requires_grad, bool fill,
              S fill_value)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    for (int64_t d : impl_->shape)
      if (d <= 0)
        fail(Err::Shape, "tensor: nonpositive dimension in " + shape_str(impl_->shape));
    if (fill)
      impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill_value);
    else
      impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<Impl> impl_;
};

// Per-backward-call adjoint buffers. Keeping adjoints out of the tensors
// makes repeated backward() calls accumulate cleanly into .grad: each call
// computes a pure gradient of its seed and adds it on.
template <typename S>
class AdjointStore {
 public:
  // Returns nullptr when the tensor has no adjoint yet (nothing flowed here).
  const std::vector<S>* peek(const BasicTensor<S>& t) const {
    auto it = entries_.find(t.id());
    return it == entries_.end() ? nullptr : &it->second.buffer;
  }

  std::vector<S>& get(const BasicTensor<S>& t) {
    auto it = entries_.find(t.id());
    if (it == entries_.end()) {
      Entry entry;
      entry.holder = t;
      entry.buffer.assign(static_cast<size_t>(t.numel()), S(0));
      it = entries_.emplace(t.id(), std::move(entry)).first;
    }
    return it->second.buffer;
  }

  // Flush adjoints of requires_grad tensors into their .grad buffers.
  void flush() {
    for (auto& [key, entry] : entries_) {
      (void)key;
      if (!entry.holder.requires_grad()) continue;
      auto& g = entry.holder.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += entry.buffer[i];
    }
  }

 private:
  struct Entry {
    BasicTensor<S> holder;
    std::vector<S> buffer;
  };
  std::unordered_map<const void*, Entry> entries_;
};

// Reverse-mode tape. Nodes are recorded in execution order (hence already
// topologically sorted); backward() walks them once in reverse.
template <typename S>
class BasicTape {
 public:
  using BackwardFn = std::function<void(AdjointStore<S>&)>;

  bool recording() const { return recording_; }
  void set_recording(bool value) { recording_ = value; }

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }

  size_t node_count() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss)=1 and accumulates gradients of every
  // requires_grad tensor reached by the recorded graph.
  void backward(const BasicTensor<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      fail(Err::Shape, "backward: loss must be a defined scalar tensor");
    AdjointStore<S> store;
    store.get(loss)[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(store);
    store.flush();
  }

 private:
  std::vector<BackwardFn> nodes_;
  bool recording_ = true;
};

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

}  // namespace lcat
