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

#include "modalfuse/model.hpp"
#include "modalfuse/ops.hpp"
#include "modalfuse/stream.hpp"

namespace modalfuse {

struct LmTargets {
  std::vector<int> targets;         // per text row, -1 where masked
  std::vector<std::uint8_t> mask;   // per text row
  int count = 0;                    // unmasked rows
};

// Next-token targets for the text rows of a stream. A text position is
// predictable iff its successor position exists and is a text token: the
// token before an image block predicts nothing (patches are never
// cross-entropy targets), while BOI itself is a predictable target.
inline LmTargets lm_targets(const TokenStream& s) {
  LmTargets out;
  const int n = s.size();
  for (int p = 0; p < n; ++p) {
    if (s.modality[static_cast<std::size_t>(p)] != Modality::text) continue;
    const bool has_text_succ = p + 1 < n && s.modality[static_cast<std::size_t>(p + 1)] == Modality::text;
    if (has_text_succ) {
      out.targets.push_back(s.text_id[static_cast<std::size_t>(p + 1)]);
      out.mask.push_back(1);
      ++out.count;
    } else {
      out.targets.push_back(-1);
      out.mask.push_back(0);
    }
  }
  for (auto& t : out.targets)
    if (t < 0) t = 0;  // placeholder under mask
  return out;
}

// Cross-entropy of each text position predicting the next text token.
// Returns exact 0 when no position is predictable. `count_out`, when given,
// receives the number of contributing positions.
template <class S>
TensorT<S> lm_loss(const TensorT<S>& logits, const TokenStream& s, int* count_out = nullptr) {
  LmTargets t = lm_targets(s);
  if (count_out) *count_out = t.count;
  if (t.count == 0 || !logits.defined()) return TensorT<S>::scalar(S(0));
  return cross_entropy_logits(logits, t.targets, t.mask);
}

// Mean squared error between predicted and true noise, averaged over every
// image-latent coordinate of the stream. Zero segments yields exact 0.
template <class S>
TensorT<S> ddpm_loss(const std::vector<TensorT<S>>& eps_pred, const TokenStream& s,
                     long* coords_out = nullptr) {
  if (eps_pred.size() != s.segments.size())
    throw std::invalid_argument("ddpm_loss: prediction count does not match segments");
  long coords = 0;
  TensorT<S> total;
  for (std::size_t i = 0; i < s.segments.size(); ++i) {
    const ImageSegment& seg = s.segments[i];
    if (seg.eps.size() != seg.patches.size())
      throw std::invalid_argument("ddpm_loss: segment is missing its drawn noise");
    std::vector<S> target(seg.eps.size());
    for (std::size_t j = 0; j < target.size(); ++j) target[j] = static_cast<S>(seg.eps[j]);
    TensorT<S> se = sum_sq_diff(eps_pred[i], target);
    total = total.defined() ? add(total, se) : se;
    coords += static_cast<long>(target.size());
  }
  if (coords_out) *coords_out = coords;
  if (coords == 0) return TensorT<S>::scalar(S(0));
  return scale(total, 1.0 / static_cast<double>(coords));
}

// lm + lambda * ddpm
template <class S>
TensorT<S> combined_loss(const TensorT<S>& lm, const TensorT<S>& ddpm, double lambda) {
  return add(lm, scale(ddpm, lambda));
}

}  // namespace modalfuse
