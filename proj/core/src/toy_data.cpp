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

#include "modalfuse/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace modalfuse {

const char* to_string(ToyShape s) {
  switch (s) {
    case ToyShape::square: return "square";
    case ToyShape::circle: return "circle";
    case ToyShape::triangle: return "triangle";
    case ToyShape::cross: return "cross";
  }
  return "?";
}

const char* to_string(ToyColor c) {
  switch (c) {
    case ToyColor::red: return "red";
    case ToyColor::green: return "green";
    case ToyColor::blue: return "blue";
    case ToyColor::yellow: return "yellow";
  }
  return "?";
}

Vocab::Vocab() {
  words_ = {"<bos>", "<eos>", "<boi>", "<eoi>", "<null>"};
  article_ = static_cast<int>(words_.size());
  words_.push_back("a");
  shape0_ = static_cast<int>(words_.size());
  words_.insert(words_.end(), {"square", "circle", "triangle", "cross"});
  color0_ = static_cast<int>(words_.size());
  words_.insert(words_.end(), {"red", "green", "blue", "yellow"});
  filler0_ = static_cast<int>(words_.size());
  words_.insert(words_.end(),
                {"small", "big", "shiny", "dark", "bright", "plain", "soft", "neat", "tiny", "bold"});
  for (int i = filler0_; i < size(); ++i) fillers_.push_back(i);
}

const Vocab& Vocab::instance() {
  static Vocab v;
  return v;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id out of range");
  return words_[static_cast<std::size_t>(id)];
}

int Vocab::id(const std::string& w) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == w) return static_cast<int>(i);
  return -1;
}

std::string Vocab::listing() const {
  std::ostringstream os;
  for (int i = 0; i < size(); ++i) {
    if (i) os << " ";
    os << words_[static_cast<std::size_t>(i)];
  }
  return os.str();
}

namespace {

// per-channel interior intensity; background is -1 everywhere
double color_intensity(ToyColor color, int channel, int channels) {
  static const double kMono[4] = {1.0, 0.5, 0.0, -0.5};  // red green blue yellow
  static const double kRgb[4][3] = {
      {1.0, -1.0, -1.0},  // red
      {-1.0, 1.0, -1.0},  // green
      {-1.0, -1.0, 1.0},  // blue
      {1.0, 1.0, -1.0},   // yellow
  };
  const int c = static_cast<int>(color);
  if (channels == 1) return kMono[c];
  if (channel < 3) return kRgb[c][channel];
  return 1.0;  // alpha-like extra channel
}

bool in_shape(ToyShape shape, int r, int c, int h, int w) {
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  switch (shape) {
    case ToyShape::square:
      return r >= 1 && r <= h - 2 && c >= 1 && c <= w - 2;
    case ToyShape::circle: {
      const double rad = std::min(h, w) / 2.0 - 0.9;
      const double dy = r - cy, dx = c - cx;
      return dy * dy + dx * dx <= rad * rad;
    }
    case ToyShape::triangle: {
      if (r < 1 || r > h - 2) return false;
      const double halfw = 0.5 + (w / 2.0 - 1.0) * (r - 1) / std::max(1, h - 3);
      return std::abs(c - cx) <= halfw;
    }
    case ToyShape::cross: {
      const bool hband = (r == h / 2 - 1 || r == h / 2) && c >= 1 && c <= w - 2;
      const bool vband = (c == w / 2 - 1 || c == w / 2) && r >= 1 && r <= h - 2;
      return hband || vband;
    }
  }
  return false;
}

}  // namespace

std::vector<float> class_template(ToyShape shape, ToyColor color, const DataConfig& cfg) {
  cfg.validate();
  std::vector<float> latent(cfg.latent_size(), -1.0f);
  for (int ch = 0; ch < cfg.channels; ++ch) {
    const float fill = static_cast<float>(color_intensity(color, ch, cfg.channels));
    for (int r = 0; r < cfg.height; ++r)
      for (int c = 0; c < cfg.width; ++c)
        if (in_shape(shape, r, c, cfg.height, cfg.width))
          latent[(static_cast<std::size_t>(ch) * cfg.height + r) * cfg.width + c] = fill;
  }
  return latent;
}

std::vector<float> render_latent(ToyShape shape, ToyColor color, const DataConfig& cfg, Rng* jitter_rng) {
  std::vector<float> latent = class_template(shape, color, cfg);
  if (jitter_rng && cfg.jitter > 0.0) {
    for (auto& v : latent) {
      const double j = jitter_rng->uniform(-cfg.jitter, cfg.jitter);
      v = static_cast<float>(std::clamp(static_cast<double>(v) + j, -1.0, 1.0));
    }
  }
  return latent;
}

OracleResult oracle_classify(const std::vector<float>& latent, const DataConfig& cfg) {
  if (latent.size() != cfg.latent_size())
    throw std::invalid_argument("oracle_classify: latent has wrong geometry");
  OracleResult best;
  best.distance = std::numeric_limits<double>::infinity();
  for (int s = 0; s < kNumShapes; ++s) {
    for (int c = 0; c < kNumColors; ++c) {
      const std::vector<float> tmpl =
          class_template(static_cast<ToyShape>(s), static_cast<ToyColor>(c), cfg);
      double acc = 0.0;
      for (std::size_t i = 0; i < latent.size(); ++i) {
        const double d = static_cast<double>(latent[i]) - static_cast<double>(tmpl[i]);
        acc += d * d;
      }
      acc /= static_cast<double>(latent.size());
      if (acc < best.distance) {
        best.distance = acc;
        best.shape = static_cast<ToyShape>(s);
        best.color = static_cast<ToyColor>(c);
      }
    }
  }
  best.accepted = best.distance <= kOracleRejectDistance;
  return best;
}

std::vector<int> canonical_caption(ToyShape shape, ToyColor color) {
  const Vocab& v = Vocab::instance();
  return {v.article_id(), v.color_id(color), v.shape_id(shape)};
}

std::optional<std::pair<ToyShape, ToyColor>> decode_caption(const std::vector<int>& ids) {
  const Vocab& v = Vocab::instance();
  std::optional<ToyShape> shape;
  std::optional<ToyColor> color;
  for (int id : ids) {
    if (!shape && v.is_shape(id)) shape = static_cast<ToyShape>(id - v.shape_id(ToyShape::square));
    if (!color && v.is_color(id)) color = static_cast<ToyColor>(id - v.color_id(ToyColor::red));
  }
  if (!shape || !color) return std::nullopt;
  return std::make_pair(*shape, *color);
}

std::vector<float> patchify(const std::vector<float>& latent, const DataConfig& cfg) {
  if (latent.size() != cfg.latent_size())
    throw std::invalid_argument("patchify: latent has wrong geometry");
  cfg.validate();
  std::vector<float> out;
  out.reserve(latent.size());
  const int bh = cfg.height / cfg.patch_h, bw = cfg.width / cfg.patch_w;
  for (int bi = 0; bi < bh; ++bi)
    for (int bj = 0; bj < bw; ++bj)
      for (int ch = 0; ch < cfg.channels; ++ch)
        for (int r = 0; r < cfg.patch_h; ++r)
          for (int c = 0; c < cfg.patch_w; ++c) {
            const int rr = bi * cfg.patch_h + r, cc = bj * cfg.patch_w + c;
            out.push_back(latent[(static_cast<std::size_t>(ch) * cfg.height + rr) * cfg.width + cc]);
          }
  return out;
}

std::vector<float> unpatchify(const std::vector<float>& patches, const DataConfig& cfg) {
  if (patches.size() != cfg.latent_size())
    throw std::invalid_argument("unpatchify: patch buffer has wrong size");
  std::vector<float> latent(cfg.latent_size());
  const int bh = cfg.height / cfg.patch_h, bw = cfg.width / cfg.patch_w;
  std::size_t i = 0;
  for (int bi = 0; bi < bh; ++bi)
    for (int bj = 0; bj < bw; ++bj)
      for (int ch = 0; ch < cfg.channels; ++ch)
        for (int r = 0; r < cfg.patch_h; ++r)
          for (int c = 0; c < cfg.patch_w; ++c) {
            const int rr = bi * cfg.patch_h + r, cc = bj * cfg.patch_w + c;
            latent[(static_cast<std::size_t>(ch) * cfg.height + rr) * cfg.width + cc] = patches[i++];
          }
  return latent;
}

TokenStream make_stream(const ToySample& sample, bool caption_first, const DataConfig& cfg) {
  cfg.validate();
  TokenStream s;
  s.patch_dim = cfg.patch_dim();
  const std::vector<float> patches = patchify(sample.latent, cfg);
  s.push_text(tok::BOS);
  if (caption_first) {
    for (int id : sample.caption) s.push_text(id);
    s.push_text(tok::BOI);
    s.push_segment(patches, cfg.patches_per_image());
    s.push_text(tok::EOI);
  } else {
    s.push_text(tok::BOI);
    s.push_segment(patches, cfg.patches_per_image());
    s.push_text(tok::EOI);
    for (int id : sample.caption) s.push_text(id);
  }
  s.push_text(tok::EOS);
  s.validate();
  return s;
}

namespace {

std::vector<int> caption_with_fillers(ToyShape shape, ToyColor color, double filler_p, Rng& rng) {
  const Vocab& v = Vocab::instance();
  std::vector<int> caption;
  caption.push_back(v.article_id());
  // up to two optional filler words between the article and the attributes
  for (int slot = 0; slot < 2; ++slot) {
    if (rng.bernoulli(filler_p))
      caption.push_back(v.filler_ids()[rng.uniform_int(v.filler_ids().size())]);
  }
  caption.push_back(v.color_id(color));
  caption.push_back(v.shape_id(shape));
  return caption;
}

}  // namespace

ToyDataset::ToyDataset(std::uint64_t seed, DataConfig cfg, double ordering_p)
    : seed_(seed), cfg_(cfg), ordering_p_(ordering_p) {
  cfg_.validate();
  if (ordering_p < 0.0 || ordering_p > 1.0)
    throw std::invalid_argument("dataset: ordering_p must be in [0, 1]");
}

ToySample ToyDataset::sample(long index) const {
  Rng rng = Rng::derive(seed_, "data", static_cast<std::uint64_t>(index));
  ToySample out;
  const int cls = static_cast<int>(rng.uniform_int(kNumClasses));
  out.shape = static_cast<ToyShape>(cls / kNumColors);
  out.color = static_cast<ToyColor>(cls % kNumColors);
  out.caption = caption_with_fillers(out.shape, out.color, cfg_.filler_p, rng);
  out.latent = render_latent(out.shape, out.color, cfg_, &rng);
  return out;
}

bool ToyDataset::caption_first(long index) const {
  Rng rng = Rng::derive(seed_, "order", static_cast<std::uint64_t>(index));
  return rng.bernoulli(ordering_p_);
}

TokenStream ToyDataset::stream(long index) const {
  return make_stream(sample(index), caption_first(index), cfg_);
}

TokenStream text_stream_at(std::uint64_t seed, long index, const DataConfig& cfg) {
  Rng rng = Rng::derive(seed, "text", static_cast<std::uint64_t>(index));
  const int cls = static_cast<int>(rng.uniform_int(kNumClasses));
  const auto shape = static_cast<ToyShape>(cls / kNumColors);
  const auto color = static_cast<ToyColor>(cls % kNumColors);
  TokenStream s;
  s.push_text(tok::BOS);
  for (int id : caption_with_fillers(shape, color, cfg.filler_p, rng)) s.push_text(id);
  s.push_text(tok::EOS);
  return s;
}

void dataset_export(const std::string& path, std::uint64_t seed, long n, double ordering_p,
                    const DataConfig& cfg) {
  ToyDataset ds(seed, cfg, ordering_p);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("dataset_export: cannot open " + path);
  f << "index,shape,color,caption_first,seed\n";
  for (long i = 0; i < n; ++i) {
    const ToySample s = ds.sample(i);
    f << i << "," << to_string(s.shape) << "," << to_string(s.color) << ","
      << (ds.caption_first(i) ? 1 : 0) << "," << seed << "\n";
  }
}

}  // namespace modalfuse
