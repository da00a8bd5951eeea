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

#include "modalfuse/optimizer.hpp"

#include <cmath>
#include <set>

namespace modalfuse {

ParamGroups partition_params(const FusedModel& model) {
  ParamGroups g;
  std::set<const void*> seen;
  std::size_t expected = 0;
  for (const auto& p : model.params()) {
    ++expected;
    if (!p.tensor.defined())
      throw std::logic_error("partition_params: undefined parameter '" + p.name + "'");
    if (!seen.insert(p.tensor.storage().get()).second)
      throw std::logic_error("partition_params: parameter '" + p.name + "' appears in two groups");
    auto& list = (p.group == ParamGroup::text) ? g.text : g.image;
    auto& states = (p.group == ParamGroup::text) ? g.text_state : g.image_state;
    list.push_back(p);
    states.push_back(ParamState{Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape()), 0});
    if (!list.back().tensor.requires_grad()) list.back().tensor.set_requires_grad(true);
  }
  if (g.total_params() != expected)
    throw std::logic_error("partition_params: groups do not cover the model");
  return g;
}

double lr_at_step(long step, const TrainConfig& cfg, ParamGroup group) {
  const double base = (group == ParamGroup::image) ? cfg.eta_image : cfg.lr_ratio * cfg.eta_image;
  if (base == 0.0) return 0.0;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  if (progress > 1.0) progress = 1.0;
  const double floor = cfg.lr_final * (base / cfg.eta_image);
  constexpr double kPi = 3.141592653589793238462643383279502884;
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(kPi * progress));
}

void zero_grads(ParamGroups& groups) {
  for (auto& p : groups.text) p.tensor.zero_grad();
  for (auto& p : groups.image) p.tensor.zero_grad();
}

double grad_norm(const ParamGroups& groups) {
  double acc = 0.0;
  auto add_group = [&](const std::vector<ParamRefT<float>>& list) {
    for (const auto& p : list)
      for (float gv : p.tensor.grad()) acc += static_cast<double>(gv) * static_cast<double>(gv);
  };
  add_group(groups.text);
  add_group(groups.image);
  return std::sqrt(acc);
}

double clip_gradients(ParamGroups& groups, double max_norm) {
  const double norm = grad_norm(groups);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const float s = static_cast<float>(max_norm / norm);
  auto scale_group = [&](std::vector<ParamRefT<float>>& list) {
    for (auto& p : list)
      for (float& gv : p.tensor.grad()) gv *= s;
  };
  scale_group(groups.text);
  scale_group(groups.image);
  return norm;
}

namespace {

void step_group(std::vector<ParamRefT<float>>& list, std::vector<ParamState>& states, double lr,
                const TrainConfig& cfg) {
  for (std::size_t i = 0; i < list.size(); ++i) {
    Tensor& w = list[i].tensor;
    ParamState& st = states[i];
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    const std::size_t n = w.numel();
    float* wv = w.value().data();
    const float* gv = w.grad().data();
    float* mv = st.m.value().data();
    float* vv = st.v.value().data();
    for (std::size_t j = 0; j < n; ++j) {
      const double gd = static_cast<double>(gv[j]);
      const double m = cfg.beta1 * static_cast<double>(mv[j]) + (1.0 - cfg.beta1) * gd;
      const double v = cfg.beta2 * static_cast<double>(vv[j]) + (1.0 - cfg.beta2) * gd * gd;
      mv[j] = static_cast<float>(m);
      vv[j] = static_cast<float>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps) +
                            cfg.weight_decay * static_cast<double>(wv[j]);
      wv[j] = static_cast<float>(static_cast<double>(wv[j]) - lr * update);
    }
  }
}

}  // namespace

void adamw_step(ParamGroups& groups, long step, const TrainConfig& cfg) {
  const double lr_text = lr_at_step(step, cfg, ParamGroup::text);
  const double lr_image = lr_at_step(step, cfg, ParamGroup::image);
  if (lr_text != 0.0) step_group(groups.text, groups.text_state, lr_text, cfg);
  if (lr_image != 0.0) step_group(groups.image, groups.image_state, lr_image, cfg);
}

}  // namespace modalfuse
