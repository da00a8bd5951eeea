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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modalfuse/rng.hpp"
#include "modalfuse/stream.hpp"

namespace modalfuse {

enum class ToyShape : int { square = 0, circle = 1, triangle = 2, cross = 3 };
enum class ToyColor : int { red = 0, green = 1, blue = 2, yellow = 3 };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kNumClasses = kNumShapes * kNumColors;

const char* to_string(ToyShape s);
const char* to_string(ToyColor c);

// Geometry and sampling knobs of the procedural dataset. Latents are
// channel-major [C x H x W] grids in [-1, 1], cut into row-major
// (patch_h x patch_w) blocks.
struct DataConfig {
  int height = 8;
  int width = 8;
  int channels = 1;
  int patch_h = 4;
  int patch_w = 4;
  double ordering_p = 0.8;  // probability of caption-before-image order
  double jitter = 0.05;     // uniform per-cell jitter amplitude
  double filler_p = 0.35;   // probability of each optional filler slot

  int patches_per_image() const { return (height / patch_h) * (width / patch_w); }
  int patch_dim() const { return channels * patch_h * patch_w; }
  std::size_t latent_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }

  void validate() const {
    if (height < 4 || width < 4 || channels < 1 || channels > 4)
      throw std::invalid_argument("data config: latent geometry out of range");
    if (patch_h < 1 || patch_w < 1 || height % patch_h != 0 || width % patch_w != 0)
      throw std::invalid_argument("data config: latent does not divide into patches");
    if (ordering_p < 0.0 || ordering_p > 1.0 || jitter < 0.0 || filler_p < 0.0 || filler_p > 1.0)
      throw std::invalid_argument("data config: probabilities out of range");
  }
};

// Fixed 24-word vocabulary. Special tokens occupy ids 0..4 (see stream.hpp).
class Vocab {
 public:
  static const Vocab& instance();

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const;
  int id(const std::string& w) const;  // -1 when unknown
  int article_id() const { return article_; }
  int shape_id(ToyShape s) const { return shape0_ + static_cast<int>(s); }
  int color_id(ToyColor c) const { return color0_ + static_cast<int>(c); }
  bool is_shape(int id) const { return id >= shape0_ && id < shape0_ + kNumShapes; }
  bool is_color(int id) const { return id >= color0_ && id < color0_ + kNumColors; }
  bool is_filler(int id) const { return id >= filler0_ && id < size(); }
  const std::vector<int>& filler_ids() const { return fillers_; }
  std::string listing() const;  // space-separated word list for diagnostics

 private:
  Vocab();
  std::vector<std::string> words_;
  int article_ = 0, shape0_ = 0, color0_ = 0, filler0_ = 0;
  std::vector<int> fillers_;
};

struct ToySample {
  ToyShape shape = ToyShape::square;
  ToyColor color = ToyColor::red;
  std::vector<float> latent;   // [C x H x W]
  std::vector<int> caption;    // token ids, e.g. "a red square"
};

// Clean class template (zero jitter).
std::vector<float> class_template(ToyShape shape, ToyColor color, const DataConfig& cfg);

// Deterministic rasterization plus uniform jitter; values clamped to [-1, 1].
std::vector<float> render_latent(ToyShape shape, ToyColor color, const DataConfig& cfg, Rng* jitter_rng);

// Nearest-template classification over the 16 clean templates.
struct OracleResult {
  bool accepted = false;
  ToyShape shape = ToyShape::square;
  ToyColor color = ToyColor::red;
  double distance = 0.0;  // mean squared distance to the nearest template
};
inline constexpr double kOracleRejectDistance = 0.25;
OracleResult oracle_classify(const std::vector<float>& latent, const DataConfig& cfg);

// "a {color} {shape}"
std::vector<int> canonical_caption(ToyShape shape, ToyColor color);
// Exact attribute extraction; nullopt when either attribute word is missing.
std::optional<std::pair<ToyShape, ToyColor>> decode_caption(const std::vector<int>& ids);

// Row-major non-overlapping patchify and its inverse.
std::vector<float> patchify(const std::vector<float>& latent, const DataConfig& cfg);
std::vector<float> unpatchify(const std::vector<float>& patches, const DataConfig& cfg);

// caption_first: [BOS caption BOI patches EOI EOS]
// otherwise:     [BOS BOI patches EOI caption EOS]
TokenStream make_stream(const ToySample& sample, bool caption_first, const DataConfig& cfg);

// Reproducible random-access dataset: every sample is a pure function of
// (seed, index). Classes are uniform over the 16 combinations; ordering is
// Bernoulli(ordering_p).
class ToyDataset {
 public:
  ToyDataset(std::uint64_t seed, DataConfig cfg, double ordering_p);

  ToySample sample(long index) const;
  bool caption_first(long index) const;
  TokenStream stream(long index) const;
  const DataConfig& config() const { return cfg_; }

 private:
  std::uint64_t seed_;
  DataConfig cfg_;
  double ordering_p_;
};

// Pure-text stream [BOS caption EOS] for language-only training/eval.
TokenStream text_stream_at(std::uint64_t seed, long index, const DataConfig& cfg);

// One record per line: index,shape,color,caption_first,seed. Regeneration is
// always from the seed, never from stored latents.
void dataset_export(const std::string& path, std::uint64_t seed, long n, double ordering_p,
                    const DataConfig& cfg);

}  // namespace modalfuse
