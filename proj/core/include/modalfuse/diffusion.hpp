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

#include <vector>

#include "modalfuse/rng.hpp"
#include "modalfuse/tensor.hpp"

namespace modalfuse {

// Precomputed cosine noise schedule. alpha_bar is indexed 0..T with
// alpha_bar[0] == 1 exactly; per-step alpha/beta are indexed 1..T.
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> alpha_bar;  // cumulative signal retention
  std::vector<double> alpha;      // alpha[t] = alpha_bar[t] / alpha_bar[t-1]
  std::vector<double> beta;       // 1 - alpha[t], clipped to <= 0.999

  // Posterior standard deviation sigma_t of the ancestral sampler.
  double sigma(int t) const;
};

// Builds the schedule from f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) with
// s = 0.008, normalized so alpha_bar[0] = 1. The 0.999 beta clip keeps
// alpha_bar strictly positive at t = T.
DiffusionSchedule cosine_alpha_bar(int T, double s = 0.008);

// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps with eps ~ N(0, I); the drawn
// eps is written out so the training loss can target it.
void add_noise_span(const float* x, std::size_t n, int t, const DiffusionSchedule& sched, Rng& rng,
                    float* x_t, float* eps);

struct NoisedLatent {
  Tensor x_t;
  int t = 0;
  Tensor eps;
};

NoisedLatent add_noise(const Tensor& x, int t, const DiffusionSchedule& sched, Rng& rng);

// One ancestral DDPM step from t to t-1; adds sigma_t * z for t > 1.
void ddpm_step_span(const float* x_t, const float* eps_pred, std::size_t n, int t,
                    const DiffusionSchedule& sched, Rng& rng, float* x_prev);

Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_pred, int t, const DiffusionSchedule& sched,
                 Rng& rng);

// eps_uncond + w * (eps_cond - eps_uncond)
std::vector<float> cfg_combine(const std::vector<float>& eps_cond, const std::vector<float>& eps_uncond,
                               double w);

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

}  // namespace modalfuse
