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
#include <stdexcept>
#include <string>
#include <vector>

namespace modalfuse {

enum class Modality : std::uint8_t { text, image };

// Special token ids occupy fixed slots at the front of every vocabulary.
namespace tok {
inline constexpr int BOS = 0;
inline constexpr int EOS = 1;
inline constexpr int BOI = 2;
inline constexpr int EOI = 3;
inline constexpr int NUL = 4;  // null caption for the unconditional pathway
inline constexpr int kNumSpecial = 5;
}  // namespace tok

// One contiguous block of image-latent patches inside a stream.
struct ImageSegment {
  int first = 0;   // position of the first patch
  int count = 0;   // number of patches
  int t_noise = 0; // shared diffusion step of the whole segment
  std::vector<float> patches;  // count * patch_dim values at noise level t_noise
  std::vector<float> eps;      // noise actually drawn (training only; may be empty)
  std::vector<float> clean;    // clean latent patches (kept for loss-free uses)
};

// Interleaved sequence of text-token ids and image-latent patch vectors.
struct TokenStream {
  int patch_dim = 0;
  std::vector<Modality> modality;  // per position
  std::vector<int> text_id;        // -1 at image positions
  std::vector<int> segment_of;     // segment index, -1 at text positions
  std::vector<ImageSegment> segments;

  int size() const { return static_cast<int>(modality.size()); }

  void push_text(int id) {
    modality.push_back(Modality::text);
    text_id.push_back(id);
    segment_of.push_back(-1);
  }

  // Appends a whole segment; patches are row-major, count*patch_dim long.
  void push_segment(std::vector<float> patches, int count) {
    ImageSegment seg;
    seg.first = size();
    seg.count = count;
    seg.clean = patches;
    seg.patches = std::move(patches);
    const int seg_id = static_cast<int>(segments.size());
    for (int i = 0; i < count; ++i) {
      modality.push_back(Modality::image);
      text_id.push_back(-1);
      segment_of.push_back(seg_id);
    }
    segments.push_back(std::move(seg));
  }

  bool pure_text() const { return segments.empty(); }

  // Enforces the structural invariants: contiguous segments of the declared
  // length, each bracketed by BOI/EOI text tokens.
  void validate() const {
    const int n = size();
    if (static_cast<int>(text_id.size()) != n || static_cast<int>(segment_of.size()) != n)
      throw std::invalid_argument("token stream: ragged per-position arrays");
    for (int p = 0; p < n; ++p) {
      if (modality[p] == Modality::text) {
        if (text_id[p] < 0) throw std::invalid_argument("token stream: text position without id");
        if (segment_of[p] != -1) throw std::invalid_argument("token stream: text position with segment id");
      } else {
        if (segment_of[p] < 0 || segment_of[p] >= static_cast<int>(segments.size()))
          throw std::invalid_argument("token stream: image position with bad segment id");
      }
    }
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const ImageSegment& seg = segments[s];
      if (seg.count <= 0) throw std::invalid_argument("token stream: empty image segment");
      if (static_cast<int>(seg.patches.size()) != seg.count * patch_dim)
        throw std::invalid_argument("token stream: segment patch buffer has wrong length");
      for (int i = 0; i < seg.count; ++i) {
        const int p = seg.first + i;
        if (p < 0 || p >= n || modality[p] != Modality::image ||
            segment_of[p] != static_cast<int>(s))
          throw std::invalid_argument("token stream: segment " + std::to_string(s) + " is not contiguous");
      }
      const int before = seg.first - 1, after = seg.first + seg.count;
      if (before < 0 || modality[before] != Modality::text || text_id[before] != tok::BOI)
        throw std::invalid_argument("token stream: segment " + std::to_string(s) + " not preceded by BOI");
      if (after >= n || modality[after] != Modality::text || text_id[after] != tok::EOI)
        throw std::invalid_argument("token stream: segment " + std::to_string(s) + " not followed by EOI");
    }
  }
};

// Precomputed per-stream index lists used by the model forward.
struct StreamIndex {
  std::vector<int> text_pos;   // ascending positions of text tokens
  std::vector<int> image_pos;  // ascending positions of image tokens
  std::vector<int> all_pos;    // 0..n-1

  explicit StreamIndex(const TokenStream& s) {
    const int n = s.size();
    all_pos.resize(static_cast<std::size_t>(n));
    for (int p = 0; p < n; ++p) {
      all_pos[static_cast<std::size_t>(p)] = p;
      if (s.modality[static_cast<std::size_t>(p)] == Modality::text)
        text_pos.push_back(p);
      else
        image_pos.push_back(p);
    }
  }
};

// Hybrid attention mask: causal everywhere, bidirectional inside an image
// segment. allowed[q*n + k] = (k <= q) or (segment(k) == segment(q) != none).
inline std::vector<std::uint8_t> build_mask(const TokenStream& s) {
  const int n = s.size();
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(n) * n, 0);
  for (int q = 0; q < n; ++q) {
    for (int k = 0; k < n; ++k) {
      const bool causal = k <= q;
      const bool same_segment = s.segment_of[static_cast<std::size_t>(q)] != -1 &&
                                s.segment_of[static_cast<std::size_t>(q)] == s.segment_of[static_cast<std::size_t>(k)];
      allowed[static_cast<std::size_t>(q) * n + k] = (causal || same_segment) ? 1 : 0;
    }
  }
  return allowed;
}

// Replaces the caption (every non-special text token) with a single NULL
// token; used for the unconditional CFG pathway and caption dropout.
inline TokenStream null_caption_variant(const TokenStream& s) {
  TokenStream out;
  out.patch_dim = s.patch_dim;
  bool caption_replaced = false;
  int p = 0;
  const int n = s.size();
  while (p < n) {
    if (s.modality[static_cast<std::size_t>(p)] == Modality::text) {
      const int id = s.text_id[static_cast<std::size_t>(p)];
      if (id < tok::kNumSpecial) {
        out.push_text(id);
      } else if (!caption_replaced) {
        out.push_text(tok::NUL);
        caption_replaced = true;
      }  // later caption tokens are dropped
      ++p;
    } else {
      const ImageSegment& seg = s.segments[static_cast<std::size_t>(s.segment_of[static_cast<std::size_t>(p)])];
      out.push_segment(seg.patches, seg.count);
      out.segments.back().t_noise = seg.t_noise;
      out.segments.back().eps = seg.eps;
      out.segments.back().clean = seg.clean;
      p += seg.count;
    }
  }
  return out;
}

}  // namespace modalfuse
