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

#include "modalfuse/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace modalfuse {

namespace {
constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kBetaClip = 0.999;

double cosine_f(double t, double T, double s) {
  const double u = (t / T + s) / (1.0 + s) * kPi / 2.0;
  const double c = std::cos(u);
  return c * c;
}
}  // namespace

double DiffusionSchedule::sigma(int t) const {
  if (t < 1 || t > T) throw std::invalid_argument("sigma: step out of range");
  const double var = beta[static_cast<std::size_t>(t)] * (1.0 - alpha_bar[static_cast<std::size_t>(t - 1)]) /
                     (1.0 - alpha_bar[static_cast<std::size_t>(t)]);
  return std::sqrt(var);
}

DiffusionSchedule cosine_alpha_bar(int T, double s) {
  if (T < 1) throw std::invalid_argument("cosine_alpha_bar: T must be >= 1");
  DiffusionSchedule sched;
  sched.T = T;
  sched.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 0.0);
  sched.alpha.assign(static_cast<std::size_t>(T) + 1, 0.0);
  sched.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  sched.alpha_bar[0] = 1.0;
  const double f0 = cosine_f(0.0, T, s);
  double prev_f = f0;
  for (int t = 1; t <= T; ++t) {
    const double ft = cosine_f(static_cast<double>(t), T, s);
    // unclipped ratio reproduces f(t)/f(0); the clip keeps alpha_bar > 0 at T
    double beta_t = 1.0 - ft / prev_f;
    if (beta_t > kBetaClip) beta_t = kBetaClip;
    const double alpha_t = 1.0 - beta_t;
    sched.beta[static_cast<std::size_t>(t)] = beta_t;
    sched.alpha[static_cast<std::size_t>(t)] = alpha_t;
    sched.alpha_bar[static_cast<std::size_t>(t)] = sched.alpha_bar[static_cast<std::size_t>(t - 1)] * alpha_t;
    prev_f = ft;
  }
  return sched;
}

void add_noise_span(const float* x, std::size_t n, int t, const DiffusionSchedule& sched, Rng& rng,
                    float* x_t, float* eps) {
  if (t < 0 || t > sched.T) throw std::invalid_argument("add_noise: step out of range [0, T]");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double c_signal = std::sqrt(ab);
  const double c_noise = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = rng.normal();
    eps[i] = static_cast<float>(e);
    x_t[i] = static_cast<float>(c_signal * static_cast<double>(x[i]) + c_noise * e);
  }
}

NoisedLatent add_noise(const Tensor& x, int t, const DiffusionSchedule& sched, Rng& rng) {
  NoisedLatent out;
  out.t = t;
  out.x_t = Tensor::zeros(x.shape());
  out.eps = Tensor::zeros(x.shape());
  add_noise_span(x.value().data(), x.numel(), t, sched, rng, out.x_t.value().data(),
                 out.eps.value().data());
  return out;
}

void ddpm_step_span(const float* x_t, const float* eps_pred, std::size_t n, int t,
                    const DiffusionSchedule& sched, Rng& rng, float* x_prev) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("ddpm_step: step out of range [1, T]");
  const double alpha_t = sched.alpha[static_cast<std::size_t>(t)];
  const double beta_t = sched.beta[static_cast<std::size_t>(t)];
  const double abar_t = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_t);
  const double eps_coef = beta_t / std::sqrt(1.0 - abar_t);
  const double sig = (t > 1) ? sched.sigma(t) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double v = inv_sqrt_alpha * (static_cast<double>(x_t[i]) - eps_coef * static_cast<double>(eps_pred[i]));
    if (t > 1) v += sig * rng.normal();
    x_prev[i] = static_cast<float>(v);
  }
}

Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_pred, int t, const DiffusionSchedule& sched,
                 Rng& rng) {
  if (x_t.shape() != eps_pred.shape())
    throw std::invalid_argument("ddpm_step: shape mismatch " + shape_str(x_t.shape()) + " vs " +
                                shape_str(eps_pred.shape()));
  Tensor out = Tensor::zeros(x_t.shape());
  ddpm_step_span(x_t.value().data(), eps_pred.value().data(), x_t.numel(), t, sched, rng,
                 out.value().data());
  return out;
}

std::vector<float> cfg_combine(const std::vector<float>& eps_cond, const std::vector<float>& eps_uncond,
                               double w) {
  if (eps_cond.size() != eps_uncond.size())
    throw std::invalid_argument("cfg_combine: size mismatch");
  if (w == 1.0) return eps_cond;
  if (w == 0.0) return eps_uncond;
  std::vector<float> out(eps_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(eps_uncond[i]) +
                                w * (static_cast<double>(eps_cond[i]) - static_cast<double>(eps_uncond[i])));
  }
  return out;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  if (eps_cond.shape() != eps_uncond.shape())
    throw std::invalid_argument("cfg_combine: shape mismatch " + shape_str(eps_cond.shape()) + " vs " +
                                shape_str(eps_uncond.shape()));
  Tensor out = Tensor::from(eps_cond.shape(), cfg_combine(eps_cond.value(), eps_uncond.value(), w));
  return out;
}

}  // namespace modalfuse
