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

#include <cstdint>
#include <vector>

#include "modalfuse/model.hpp"
#include "modalfuse/tensor.hpp"

namespace modalfuse {

struct TrainConfig {
  double lambda_coeff = 5.0;  // weight of the diffusion loss in the combined objective
  double eta_image = 1e-4;
  double lr_ratio = 0.0;      // r = eta_text / eta_image; 0 freezes the text group
  double lr_final = 1.5e-5;   // image-group floor of the cosine decay
  int warmup_steps = 200;
  int total_steps = 3000;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables
  double uncond_p = 0.1;   // caption-dropout probability; trains the CFG null pathway
  std::uint64_t seed = 1;

  void validate() const {
    if (lr_ratio < 0.0 || lr_ratio > 1.0)
      throw std::invalid_argument("train config: lr_ratio must be in [0, 1]");
    if (eta_image <= 0.0) throw std::invalid_argument("train config: eta_image must be > 0");
    if (warmup_steps < 0 || total_steps < 1 || warmup_steps >= total_steps)
      throw std::invalid_argument("train config: require 0 <= warmup_steps < total_steps");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (uncond_p < 0.0 || uncond_p > 1.0)
      throw std::invalid_argument("train config: uncond_p must be in [0, 1]");
  }
};

struct ParamState {
  Tensor m, v;  // AdamW moment buffers
  long t = 0;   // per-parameter step counter
};

// Disjoint cover of all trainable parameters, split into the text and image
// groups, with per-parameter optimizer state.
struct ParamGroups {
  std::vector<ParamRefT<float>> text, image;
  std::vector<ParamState> text_state, image_state;

  std::size_t total_params() const { return text.size() + image.size(); }
};

ParamGroups partition_params(const FusedModel& model);

// Linear warmup from 0 to the group's base rate, then cosine decay to
// lr_final scaled by base/eta_image. Steps are 1-indexed during training;
// lr_at_step(0) is the warmup start and returns 0.
double lr_at_step(long step, const TrainConfig& cfg, ParamGroup group);

void zero_grads(ParamGroups& groups);

// Global gradient norm across both groups.
double grad_norm(const ParamGroups& groups);

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
double clip_gradients(ParamGroups& groups, double max_norm);

// Bias-corrected AdamW with decoupled weight decay and per-group learning
// rates. A group whose rate is 0 is not touched at all: no moment update, no
// weight decay, no counter advance. This realizes freezing.
void adamw_step(ParamGroups& groups, long step, const TrainConfig& cfg);

}  // namespace modalfuse
