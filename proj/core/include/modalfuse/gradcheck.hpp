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

#include <functional>
#include <vector>

#include "modalfuse/tensor.hpp"

namespace modalfuse {

// Deactivates any ambient tape so re-evaluations do not record.
template <class S>
class NoTapeScopeT {
 public:
  NoTapeScopeT() : prev_(TapeT<S>::active()) { TapeT<S>::active() = nullptr; }
  ~NoTapeScopeT() { TapeT<S>::active() = prev_; }
  NoTapeScopeT(const NoTapeScopeT&) = delete;
  NoTapeScopeT& operator=(const NoTapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

// Checks analytic gradients of the scalar-valued closure `f` against central
// finite differences for every coordinate of every tensor in `params`.
// Returns the max relative error |a - c| / (|a| + |c| + 1e-12).
//
// `f` must read the current values of `params` on every call; it is invoked
// once under a tape for the analytic pass and twice per coordinate without
// one for the differences.
template <class S>
double gradcheck_params(const std::function<TensorT<S>()>& f, std::vector<TensorT<S>> params,
                        double h = 1e-5) {
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<S>> analytic;
  {
    TapeT<S> tape;
    TapeScopeT<S> scope(tape);
    TensorT<S> loss = f();
    tape.backward(loss);
    for (auto& p : params) analytic.push_back(p.grad());
  }
  double worst = 0.0;
  NoTapeScopeT<S> no_tape;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& val = params[pi].value();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const S saved = val[i];
      val[i] = static_cast<S>(static_cast<double>(saved) + h);
      const double lp = static_cast<double>(f().item());
      val[i] = static_cast<S>(static_cast<double>(saved) - h);
      const double lm = static_cast<double>(f().item());
      val[i] = saved;
      const double central = (lp - lm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Single-tensor form: max relative error of d f(x) / d x at x.
template <class S>
double gradcheck(const std::function<TensorT<S>(const TensorT<S>&)>& f, TensorT<S> x, double h = 1e-5) {
  return gradcheck_params<S>([&]() { return f(x); }, {x}, h);
}

}  // namespace modalfuse
