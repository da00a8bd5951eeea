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

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modalfuse/ops.hpp"
#include "modalfuse/rng.hpp"
#include "modalfuse/stream.hpp"
#include "modalfuse/tensor.hpp"

namespace modalfuse {

// Degree of modality separation inside the transformer stack:
//   deep    - modality-specific attention and FFN
//   shallow - modality-specific FFN only, shared attention
//   none    - a single dense stack shared by both modalities
enum class Separation { deep, shallow, none };

enum class ParamGroup { text, image };

inline const char* to_string(Separation s) {
  switch (s) {
    case Separation::deep: return "deep";
    case Separation::shallow: return "shallow";
    case Separation::none: return "none";
  }
  return "?";
}

inline Separation separation_from_string(const std::string& s) {
  if (s == "deep") return Separation::deep;
  if (s == "shallow") return Separation::shallow;
  if (s == "none") return Separation::none;
  throw std::invalid_argument("unknown separation '" + s + "' (expected deep|shallow|none)");
}

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int ffn_hidden = 128;
  int vocab_size = 24;
  int patch_dim = 16;
  int patches_per_image = 4;
  int diffusion_steps = 1000;
  int max_seq = 128;
  Separation separation = Separation::deep;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || ffn_hidden < 1 || vocab_size < 1 ||
        patch_dim < 1 || patches_per_image < 1 || diffusion_steps < 1 || max_seq < 1)
      throw std::invalid_argument("model config: all extents must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0)
      throw std::invalid_argument("model config: head_dim must be even for rotary encoding");
    if (d_model % 2 != 0)
      throw std::invalid_argument("model config: d_model must be even for sinusoidal conditioning");
  }
};

template <class S>
struct AttnWeightsT {
  TensorT<S> norm1, wq, wk, wv, wo;
  bool present() const { return norm1.defined(); }
};

template <class S>
struct FfnWeightsT {
  TensorT<S> norm2, gate, up, down;
  bool present() const { return norm2.defined(); }
};

template <class S>
struct FusedLayerT {
  AttnWeightsT<S> attn_text;
  AttnWeightsT<S> attn_image;  // present iff deep separation
  FfnWeightsT<S> ffn_text;
  FfnWeightsT<S> ffn_image;  // present iff deep or shallow separation
};

template <class S>
struct ParamRefT {
  std::string name;
  TensorT<S> tensor;
  ParamGroup group;
};

// Text-set tensors of a trained model, keyed by name; used to initialize new
// models from a pretrained text-only base.
struct TextBase {
  ModelConfig cfg;
  std::map<std::string, std::vector<float>> tensors;
};

template <class S>
struct FusedModelT {
  ModelConfig cfg;
  TensorT<S> embed;    // [V x d]
  std::vector<FusedLayerT<S>> layers;
  TensorT<S> final_norm_text;
  TensorT<S> final_norm_image;  // present iff separation != none
  TensorT<S> lm_head;  // [d x V]
  // toy U-Net projectors: linear patchify/unpatchify with timestep conditioning
  TensorT<S> down_w, down_b;               // [p x d], [d]
  TensorT<S> up_w_hidden, up_w_skip, up_b; // [d x p], [p x p], [p]

  mutable long forward_calls = 0;

  std::vector<ParamRefT<S>> params() const {
    std::vector<ParamRefT<S>> out;
    out.push_back({"embed.text", embed, ParamGroup::text});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string base = "layers." + std::to_string(i) + ".";
      const FusedLayerT<S>& l = layers[i];
      auto push_attn = [&](const AttnWeightsT<S>& a, const std::string& side, ParamGroup g) {
        out.push_back({base + side + ".norm1", a.norm1, g});
        out.push_back({base + side + ".wq", a.wq, g});
        out.push_back({base + side + ".wk", a.wk, g});
        out.push_back({base + side + ".wv", a.wv, g});
        out.push_back({base + side + ".wo", a.wo, g});
      };
      auto push_ffn = [&](const FfnWeightsT<S>& f, const std::string& side, ParamGroup g) {
        out.push_back({base + side + ".norm2", f.norm2, g});
        out.push_back({base + side + ".ffn_gate", f.gate, g});
        out.push_back({base + side + ".ffn_up", f.up, g});
        out.push_back({base + side + ".ffn_down", f.down, g});
      };
      push_attn(l.attn_text, "text", ParamGroup::text);
      push_ffn(l.ffn_text, "text", ParamGroup::text);
      if (l.attn_image.present()) push_attn(l.attn_image, "image", ParamGroup::image);
      if (l.ffn_image.present()) push_ffn(l.ffn_image, "image", ParamGroup::image);
    }
    out.push_back({"final_norm.text", final_norm_text, ParamGroup::text});
    if (final_norm_image.defined())
      out.push_back({"final_norm.image", final_norm_image, ParamGroup::image});
    out.push_back({"lm_head", lm_head, ParamGroup::text});
    out.push_back({"down.weight", down_w, ParamGroup::image});
    out.push_back({"down.bias", down_b, ParamGroup::image});
    out.push_back({"up.w_hidden", up_w_hidden, ParamGroup::image});
    out.push_back({"up.w_skip", up_w_skip, ParamGroup::image});
    out.push_back({"up.bias", up_b, ParamGroup::image});
    return out;
  }
};

// Standard interleaved sin/cos embedding of an integer timestep.
template <class S>
std::vector<S> sinusoid_embedding(int t, int dim, double base = 10000.0) {
  std::vector<S> out(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * i / dim);
    out[static_cast<std::size_t>(2 * i)] = static_cast<S>(std::sin(t * freq));
    out[static_cast<std::size_t>(2 * i + 1)] = static_cast<S>(std::cos(t * freq));
  }
  return out;
}

namespace detail {

template <class S>
TensorT<S> normal_init(std::vector<int> shape, double std_dev, Rng& rng) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape), true);
  for (auto& v : t.value()) v = static_cast<S>(rng.normal() * std_dev);
  return t;
}

template <class S>
TensorT<S> ones_init(std::vector<int> shape) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape), true);
  for (auto& v : t.value()) v = S(1);
  return t;
}

}  // namespace detail

// Builds a model with fresh weights, or with the text set taken from `base`
// and the image transformer set copied from it (tied initialization). The
// patch projectors are always freshly initialized: scaled-normal draws with
// the transformer-side output projection of the upsampler zeroed, so the
// initial noise prediction depends only on the skip path.
template <class S>
FusedModelT<S> init_model(const ModelConfig& cfg, std::uint64_t seed, const TextBase* base = nullptr) {
  cfg.validate();
  constexpr double kStd = 0.02;
  FusedModelT<S> m;
  m.cfg = cfg;
  const int d = cfg.d_model, v = cfg.vocab_size, p = cfg.patch_dim, h = cfg.ffn_hidden;

  auto rng_for = [&](const std::string& name) { return Rng::derive(seed, "init." + name); };
  auto fresh = [&](const std::string& name, std::vector<int> shape) {
    Rng r = rng_for(name);
    return detail::normal_init<S>(std::move(shape), kStd, r);
  };
  auto zeros_p = [](std::vector<int> shape) { return TensorT<S>::zeros(std::move(shape), true); };

  m.embed = fresh("embed.text", {v, d});
  m.lm_head = zeros_p({d, v});  // zero head: uniform logits at init
  m.final_norm_text = detail::ones_init<S>({d});
  if (cfg.separation != Separation::none) m.final_norm_image = detail::ones_init<S>({d});

  m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string lb = "layers." + std::to_string(i) + ".";
    auto make_attn = [&](const std::string& side) {
      AttnWeightsT<S> a;
      a.norm1 = detail::ones_init<S>({d});
      a.wq = fresh(lb + side + ".wq", {d, d});
      a.wk = fresh(lb + side + ".wk", {d, d});
      a.wv = fresh(lb + side + ".wv", {d, d});
      a.wo = fresh(lb + side + ".wo", {d, d});
      return a;
    };
    auto make_ffn = [&](const std::string& side) {
      FfnWeightsT<S> f;
      f.norm2 = detail::ones_init<S>({d});
      f.gate = fresh(lb + side + ".ffn_gate", {d, h});
      f.up = fresh(lb + side + ".ffn_up", {d, h});
      f.down = fresh(lb + side + ".ffn_down", {h, d});
      return f;
    };
    FusedLayerT<S>& l = m.layers[static_cast<std::size_t>(i)];
    l.attn_text = make_attn("text");
    l.ffn_text = make_ffn("text");
    if (cfg.separation == Separation::deep) l.attn_image = make_attn("image");
    if (cfg.separation != Separation::none) l.ffn_image = make_ffn("image");
  }

  m.down_w = fresh("down.weight", {p, d});
  m.down_b = zeros_p({d});
  m.up_w_hidden = zeros_p({d, p});  // zeroed output projection
  m.up_w_skip = fresh("up.w_skip", {p, p});
  m.up_b = zeros_p({p});

  if (base) {
    auto load_into = [&](TensorT<S>& dst, const std::string& name) {
      auto it = base->tensors.find(name);
      if (it == base->tensors.end())
        throw std::invalid_argument("init_model: base is missing tensor '" + name + "'");
      if (it->second.size() != dst.numel())
        throw std::invalid_argument("init_model: base tensor '" + name + "' extent mismatch (" +
                                    std::to_string(it->second.size()) + " vs " +
                                    std::to_string(dst.numel()) + ")");
      for (std::size_t j = 0; j < dst.numel(); ++j) dst.value()[j] = static_cast<S>(it->second[j]);
    };
    load_into(m.embed, "embed.text");
    load_into(m.lm_head, "lm_head");
    load_into(m.final_norm_text, "final_norm.text");
    if (m.final_norm_image.defined()) load_into(m.final_norm_image, "final_norm.text");
    for (int i = 0; i < cfg.n_layers; ++i) {
      const std::string tb = "layers." + std::to_string(i) + ".text.";
      FusedLayerT<S>& l = m.layers[static_cast<std::size_t>(i)];
      auto load_attn = [&](AttnWeightsT<S>& a) {
        load_into(a.norm1, tb + "norm1");
        load_into(a.wq, tb + "wq");
        load_into(a.wk, tb + "wk");
        load_into(a.wv, tb + "wv");
        load_into(a.wo, tb + "wo");
      };
      auto load_ffn = [&](FfnWeightsT<S>& f) {
        load_into(f.norm2, tb + "norm2");
        load_into(f.gate, tb + "ffn_gate");
        load_into(f.up, tb + "ffn_up");
        load_into(f.down, tb + "ffn_down");
      };
      load_attn(l.attn_text);
      load_ffn(l.ffn_text);
      if (l.attn_image.present()) load_attn(l.attn_image);
      if (l.ffn_image.present()) load_ffn(l.ffn_image);
    }
  }
  return m;
}

// Snapshot of the text-group tensors, usable as a tied-initialization base.
template <class S>
TextBase extract_text_base(const FusedModelT<S>& m) {
  TextBase base;
  base.cfg = m.cfg;
  for (const auto& p : m.params()) {
    if (p.group != ParamGroup::text) continue;
    std::vector<float> v(p.tensor.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(p.tensor.value()[i]);
    base.tensors.emplace(p.name, std::move(v));
  }
  return base;
}

// ---------------------------------------------------------------------------
// forward pass

template <class S>
struct EmbedOutT {
  TensorT<S> h;                      // [n x d]
  std::vector<TensorT<S>> skips;     // per segment: the raw noisy patches [count x p]
};

// Text rows come from the embedding table; image rows from the linear patch
// downsampler plus a sinusoidal embedding of the segment's noise step. The
// pre-projection patches are retained per segment as the upsampler skip.
template <class S>
EmbedOutT<S> embed_inputs(const FusedModelT<S>& m, const TokenStream& s) {
  const int n = s.size();
  const int d = m.cfg.d_model;
  StreamIndex ix(s);
  EmbedOutT<S> out;

  TensorT<S> h;
  if (!ix.text_pos.empty()) {
    std::vector<int> ids;
    ids.reserve(ix.text_pos.size());
    for (int p : ix.text_pos) ids.push_back(s.text_id[static_cast<std::size_t>(p)]);
    TensorT<S> text_rows = embedding_rows(m.embed, ids);
    h = scatter_rows(text_rows, ix.text_pos, n);
  } else {
    h = TensorT<S>::zeros({n, d});
  }

  for (const ImageSegment& seg : s.segments) {
    std::vector<S> patch_vals(seg.patches.size());
    for (std::size_t i = 0; i < patch_vals.size(); ++i) patch_vals[i] = static_cast<S>(seg.patches[i]);
    TensorT<S> patches = TensorT<S>::from({seg.count, m.cfg.patch_dim}, patch_vals);
    out.skips.push_back(patches);
    TensorT<S> e = add_bias(matmul(patches, m.down_w), m.down_b);
    TensorT<S> t_emb = TensorT<S>::from({d}, sinusoid_embedding<S>(seg.t_noise, d));
    e = add_bias(e, t_emb);
    std::vector<int> seg_pos(static_cast<std::size_t>(seg.count));
    for (int i = 0; i < seg.count; ++i) seg_pos[static_cast<std::size_t>(i)] = seg.first + i;
    h = add(h, scatter_rows(e, seg_pos, n));
  }
  out.h = h;
  return out;
}

namespace detail {

// norm + three projections per modality, reassembled in position order
template <class S>
void project_qkv(const FusedModelT<S>& m, const FusedLayerT<S>& l, const TensorT<S>& h,
                 const StreamIndex& ix, TensorT<S>& q, TensorT<S>& k, TensorT<S>& v) {
  const int n = h.dim(0);
  if (m.cfg.separation == Separation::deep && !ix.image_pos.empty() && !ix.text_pos.empty()) {
    TensorT<S> at = rmsnorm(gather_rows(h, ix.text_pos), l.attn_text.norm1);
    TensorT<S> ai = rmsnorm(gather_rows(h, ix.image_pos), l.attn_image.norm1);
    q = add(scatter_rows(matmul(at, l.attn_text.wq), ix.text_pos, n),
            scatter_rows(matmul(ai, l.attn_image.wq), ix.image_pos, n));
    k = add(scatter_rows(matmul(at, l.attn_text.wk), ix.text_pos, n),
            scatter_rows(matmul(ai, l.attn_image.wk), ix.image_pos, n));
    v = add(scatter_rows(matmul(at, l.attn_text.wv), ix.text_pos, n),
            scatter_rows(matmul(ai, l.attn_image.wv), ix.image_pos, n));
  } else if (m.cfg.separation == Separation::deep && !ix.image_pos.empty()) {
    TensorT<S> ai = rmsnorm(h, l.attn_image.norm1);
    q = matmul(ai, l.attn_image.wq);
    k = matmul(ai, l.attn_image.wk);
    v = matmul(ai, l.attn_image.wv);
  } else {
    // shared attention (shallow/none) or a pure-text stream in a deep model
    TensorT<S> a = rmsnorm(h, l.attn_text.norm1);
    q = matmul(a, l.attn_text.wq);
    k = matmul(a, l.attn_text.wk);
    v = matmul(a, l.attn_text.wv);
  }
}

template <class S>
TensorT<S> ffn_apply(const FfnWeightsT<S>& w, const TensorT<S>& x) {
  TensorT<S> y = rmsnorm(x, w.norm2);
  TensorT<S> gated = mul(silu(matmul(y, w.gate)), matmul(y, w.up));
  return matmul(gated, w.down);
}

}  // namespace detail

// Shared self-attention over position-ordered keys/values from both
// modalities, with modality-specific QKV and O weights, rotary positions and
// the hybrid mask. Residual connection included.
template <class S>
TensorT<S> fused_attention(const FusedModelT<S>& m, const FusedLayerT<S>& l, const TensorT<S>& h,
                           const StreamIndex& ix, const std::vector<std::uint8_t>& mask) {
  const int n = h.dim(0);
  TensorT<S> q, k, v;
  detail::project_qkv(m, l, h, ix, q, k, v);
  q = rope(q, ix.all_pos, m.cfg.head_dim());
  k = rope(k, ix.all_pos, m.cfg.head_dim());
  TensorT<S> attn = multihead_attention(q, k, v, mask, m.cfg.n_heads);
  TensorT<S> o;
  if (m.cfg.separation == Separation::deep && !ix.image_pos.empty() && !ix.text_pos.empty()) {
    o = add(scatter_rows(matmul(gather_rows(attn, ix.text_pos), l.attn_text.wo), ix.text_pos, n),
            scatter_rows(matmul(gather_rows(attn, ix.image_pos), l.attn_image.wo), ix.image_pos, n));
  } else if (m.cfg.separation == Separation::deep && !ix.image_pos.empty()) {
    o = matmul(attn, l.attn_image.wo);
  } else {
    o = matmul(attn, l.attn_text.wo);
  }
  return add(h, o);
}

// Modality-specific gated-SiLU FFN with residual connection.
template <class S>
TensorT<S> modality_ffn(const FusedModelT<S>& m, const FusedLayerT<S>& l, const TensorT<S>& h,
                        const StreamIndex& ix) {
  const int n = h.dim(0);
  const bool routed = m.cfg.separation != Separation::none;
  TensorT<S> y;
  if (!routed) {
    y = detail::ffn_apply(l.ffn_text, h);
  } else if (ix.image_pos.empty()) {
    y = detail::ffn_apply(l.ffn_text, h);
  } else if (ix.text_pos.empty()) {
    y = detail::ffn_apply(l.ffn_image, h);
  } else {
    y = add(scatter_rows(detail::ffn_apply(l.ffn_text, gather_rows(h, ix.text_pos)), ix.text_pos, n),
            scatter_rows(detail::ffn_apply(l.ffn_image, gather_rows(h, ix.image_pos)), ix.image_pos, n));
  }
  return add(h, y);
}

template <class S>
struct ForwardOutT {
  TensorT<S> logits;                 // [n_text x V]; undefined when the stream has no text
  std::vector<TensorT<S>> eps_pred;  // per segment [count x p]
  std::vector<int> text_pos;
};

// Full model: N fused layers, final per-modality norm, LM head on text rows
// and the skip-connected upsampler on each image segment.
template <class S>
ForwardOutT<S> model_forward(const FusedModelT<S>& m, const TokenStream& s) {
  s.validate();
  const int n = s.size();
  if (n > m.cfg.max_seq)
    throw std::invalid_argument("stream length " + std::to_string(n) + " exceeds max_seq " +
                                std::to_string(m.cfg.max_seq));
  if (s.patch_dim != 0 && s.patch_dim != m.cfg.patch_dim)
    throw std::invalid_argument("stream patch_dim does not match model");
  for (const auto& seg : s.segments) {
    if (seg.count != m.cfg.patches_per_image)
      throw std::invalid_argument("image segment length " + std::to_string(seg.count) +
                                  " != patches_per_image " + std::to_string(m.cfg.patches_per_image));
    if (seg.t_noise < 0 || seg.t_noise > m.cfg.diffusion_steps)
      throw std::invalid_argument("segment t_noise out of range");
  }
  ++m.forward_calls;

  StreamIndex ix(s);
  std::vector<std::uint8_t> mask = build_mask(s);
  EmbedOutT<S> emb = embed_inputs(m, s);
  TensorT<S> h = emb.h;
  for (const auto& layer : m.layers) {
    h = fused_attention(m, layer, h, ix, mask);
    h = modality_ffn(m, layer, h, ix);
  }

  ForwardOutT<S> out;
  out.text_pos = ix.text_pos;

  const bool dense_norm = m.cfg.separation == Separation::none;
  TensorT<S> h_normed_dense;
  if (dense_norm) h_normed_dense = rmsnorm(h, m.final_norm_text);

  if (!ix.text_pos.empty()) {
    TensorT<S> text_rows = dense_norm ? gather_rows(h_normed_dense, ix.text_pos)
                                      : rmsnorm(gather_rows(h, ix.text_pos), m.final_norm_text);
    out.logits = matmul(text_rows, m.lm_head);
  }

  for (std::size_t si = 0; si < s.segments.size(); ++si) {
    const ImageSegment& seg = s.segments[si];
    std::vector<int> seg_pos(static_cast<std::size_t>(seg.count));
    for (int i = 0; i < seg.count; ++i) seg_pos[static_cast<std::size_t>(i)] = seg.first + i;
    TensorT<S> rows = dense_norm ? gather_rows(h_normed_dense, seg_pos)
                                 : rmsnorm(gather_rows(h, seg_pos), m.final_norm_image);
    TensorT<S> t_emb = TensorT<S>::from({m.cfg.d_model}, sinusoid_embedding<S>(seg.t_noise, m.cfg.d_model));
    rows = add_bias(rows, t_emb);
    TensorT<S> eps = add(matmul(rows, m.up_w_hidden), matmul(emb.skips[si], m.up_w_skip));
    out.eps_pred.push_back(add_bias(eps, m.up_b));
  }
  return out;
}

using FusedModel = FusedModelT<float>;
using ForwardOut = ForwardOutT<float>;

}  // namespace modalfuse
