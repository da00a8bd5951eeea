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

#include "modalfuse/diffusion.hpp"
#include "modalfuse/gradcheck.hpp"
#include "modalfuse/model.hpp"
#include "modalfuse/stream.hpp"

namespace modalfuse {

// Appends a fresh image segment (plus the closing EOI) to a text prompt that
// ends at a BOI boundary.
inline TokenStream open_image_segment(const TokenStream& prompt, int patches_per_image, int patch_dim) {
  if (prompt.size() == 0 || prompt.modality.back() != Modality::text ||
      prompt.text_id.back() != tok::BOI)
    throw std::invalid_argument("sample prompt must end at a BOI boundary");
  TokenStream s = prompt;
  s.patch_dim = patch_dim;
  s.push_segment(std::vector<float>(static_cast<std::size_t>(patches_per_image) * patch_dim, 0.0f),
                 patches_per_image);
  s.push_text(tok::EOI);
  return s;
}

// Ancestral DDPM sampling of one image segment conditioned on the prompt.
// When w != 1 a second forward on the null-caption variant provides the
// unconditional prediction for classifier-free guidance. Returns the clean
// latent patches [patches_per_image * patch_dim]. Pure function of
// (weights, prompt, w, seed).
inline std::vector<float> sample_loop(const FusedModel& model, const DiffusionSchedule& sched,
                                      const TokenStream& prompt, double w, std::uint64_t seed) {
  if (w < 0.0) throw std::invalid_argument("sample_loop: negative guidance coefficient rejected");
  NoTapeScopeT<float> no_tape;
  TokenStream cond = open_image_segment(prompt, model.cfg.patches_per_image, model.cfg.patch_dim);
  ImageSegment& seg = cond.segments.back();
  const std::size_t coords = seg.patches.size();

  Rng rng = Rng::derive(seed, "sample");
  for (auto& v : seg.patches) v = static_cast<float>(rng.normal());

  TokenStream uncond;
  const bool use_cfg = (w != 1.0);
  if (use_cfg) uncond = null_caption_variant(cond);

  std::vector<float> x(seg.patches);
  for (int t = sched.T; t >= 1; --t) {
    seg.t_noise = t;
    seg.patches = x;
    ForwardOut out = model_forward(model, cond);
    std::vector<float> eps = out.eps_pred.back().value();
    if (use_cfg) {
      ImageSegment& useg = uncond.segments.back();
      useg.t_noise = t;
      useg.patches = x;
      ForwardOut uout = model_forward(model, uncond);
      eps = cfg_combine(eps, uout.eps_pred.back().value(), w);
    }
    std::vector<float> x_prev(coords);
    ddpm_step_span(x.data(), eps.data(), coords, t, sched, rng, x_prev.data());
    x = std::move(x_prev);
  }
  return x;
}

}  // namespace modalfuse
