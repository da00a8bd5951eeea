// Copyright 2026 The ModalFuse Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace modalfuse {

// Dense row-major tensor participating in a reverse-mode tape. The scalar
// type is a template parameter: training instantiates float, the
// finite-difference oracles instantiate double.

template <class S>
struct TensorStorage {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // same length as value iff requires_grad
  bool requires_grad = false;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    TensorT t;
    t.s_ = std::make_shared<TensorStorage<S>>();
    const std::size_t n = shape_numel(shape);
    t.s_->shape = std::move(shape);
    t.s_->value.assign(n, S(0));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    TensorT t;
    t.s_ = std::make_shared<TensorStorage<S>>();
    t.s_->shape = std::move(shape);
    t.s_->value = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT scalar(S v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int>& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->value.size(); }
  int dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(s_->shape.size()); }

  std::vector<S>& value() { return s_->value; }
  const std::vector<S>& value() const { return s_->value; }
  std::vector<S>& grad() {
    if (!s_->requires_grad) throw std::logic_error("tensor does not require grad");
    return s_->grad;
  }
  const std::vector<S>& grad() const {
    if (!s_->requires_grad) throw std::logic_error("tensor does not require grad");
    return s_->grad;
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    if (rg)
      s_->grad.assign(s_->value.size(), S(0));
    else
      s_->grad.clear();
  }
  void zero_grad() {
    if (s_->requires_grad) s_->grad.assign(s_->value.size(), S(0));
  }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return s_->value[0];
  }

  bool same_storage(const TensorT& o) const { return s_ == o.s_; }
  const std::shared_ptr<TensorStorage<S>>& storage() const { return s_; }

  bool all_finite() const {
    for (S v : s_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::shared_ptr<TensorStorage<S>> s_;
};

// Ordered record of executed operations. Execution order is a topological
// order by construction, so a backward pass is a single reverse sweep and
// visits each node exactly once.
template <class S>
class TapeT {
 public:
  struct Node {
    std::shared_ptr<TensorStorage<S>> out;  // zeroed at the start of each pass
    std::function<void()> backward;
  };

  static TapeT*& active() {
    thread_local TapeT* t = nullptr;
    return t;
  }

  void record(const TensorT<S>& out, std::function<void()> fn) {
    nodes_.push_back(Node{out.storage(), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Populates grads of every requires_grad leaf reachable from `loss`.
  // Repeated calls accumulate into leaf grads; intermediate (node output)
  // grads are reset at the start of each pass.
  void backward(TensorT<S>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape()));
    for (auto& n : nodes_)
      if (n.out->requires_grad) n.out->grad.assign(n.out->value.size(), S(0));
    if (!loss.requires_grad()) return;  // loss not connected to any leaf
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Node> nodes_;
};

// RAII activation of a tape on the current thread.
template <class S>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<S>& t) : prev_(TapeT<S>::active()) { TapeT<S>::active() = &t; }
  ~TapeScopeT() { TapeT<S>::active() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

}  // namespace modalfuse
