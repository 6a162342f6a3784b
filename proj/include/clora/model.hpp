#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/errors.hpp"
#include "clora/random.hpp"
#include "clora/tensor.hpp"
#include "clora/tokenizer.hpp"

namespace clora {

enum class EncoderKind { vision, text };
enum class AttnMatrix { q, k, v, o };

inline constexpr std::array<AttnMatrix, 4> all_attn_matrices{AttnMatrix::q, AttnMatrix::k, AttnMatrix::v,
                                                             AttnMatrix::o};

inline std::string_view to_string(EncoderKind e) { return e == EncoderKind::vision ? "vision" : "text"; }

inline char to_char(AttnMatrix m) {
  switch (m) {
    case AttnMatrix::q: return 'q';
    case AttnMatrix::k: return 'k';
    case AttnMatrix::v: return 'v';
    case AttnMatrix::o: return 'o';
  }
  return '?';
}

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Toy-scale architecture. Defaults: d=64, H=4, L=4 per encoder, d_e=32,
/// 16x16 single-channel images in 4x4 patches, text length 16.
struct ModelConfig {
  EncoderConfig vision;
  EncoderConfig text;
  std::size_t embed_dim = 32;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t max_text_len = 16;
  double init_temperature = 0.07;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t pixels_per_image() const { return image_size * image_size * channels; }
  std::size_t vision_seq_len() const { return num_patches() + 1; }

  void validate() const {
    for (const EncoderConfig* e : {&vision, &text}) {
      if (e->depth < 1) throw ConfigError("encoder depth must be >= 1");
      if (e->heads == 0 || e->width % e->heads != 0) {
        throw ConfigError("encoder width " + std::to_string(e->width) + " not divisible by heads " +
                          std::to_string(e->heads));
      }
      if (embed_dim == 0 || embed_dim > e->width) throw ConfigError("embedding dimension must satisfy 0 < d_e <= d");
    }
    if (patch_size == 0 || image_size % patch_size != 0) throw ConfigError("image size must be divisible by patch size");
    if (channels == 0) throw ConfigError("channels must be >= 1");
    if (max_text_len < 3) throw ConfigError("max text length must be >= 3");
    if (!(init_temperature > 0)) throw ConfigError("temperature must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Pre-norm transformer block with fused [d x d] attention projections.
template <std::floating_point T>
struct AttentionBlock {
  std::size_t width = 0;
  std::size_t heads = 0;
  Parameter<T> ln1_gain, ln1_bias;
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> ln2_gain, ln2_bias;
  Parameter<T> fc1_w, fc1_b, fc2_w, fc2_b;

  std::size_t head_dim() const { return width / heads; }

  Parameter<T>& weight(AttnMatrix m) {
    switch (m) {
      case AttnMatrix::q: return wq;
      case AttnMatrix::k: return wk;
      case AttnMatrix::v: return wv;
      case AttnMatrix::o: return wo;
    }
    throw StateError("bad attention matrix");
  }
  const Parameter<T>& weight(AttnMatrix m) const { return const_cast<AttentionBlock*>(this)->weight(m); }

  template <class F>
  void for_each_parameter(F&& f) {
    for (Parameter<T>* p : {&ln1_gain, &ln1_bias, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_gain, &ln2_bias,
                            &fc1_w, &fc1_b, &fc2_w, &fc2_b})
      f(*p);
  }

  static AttentionBlock create(const std::string& prefix, std::size_t d, std::size_t heads, std::size_t depth,
                               Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ShapeError("attention block width " + std::to_string(d) + " not divisible by " + std::to_string(heads));
    }
    AttentionBlock b;
    b.width = d;
    b.heads = heads;
    auto normal = [&](const std::string& name, Shape s, double std) {
      Tensor<T> t(std::move(s));
      for (T& v : t.data()) v = static_cast<T>(rng.normal() * std);
      return Parameter<T>(prefix + name, std::move(t));
    };
    auto constant = [&](const std::string& name, Shape s, T v) { return Parameter<T>(prefix + name, Tensor<T>(std::move(s), v)); };
    const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_res = s_in / std::sqrt(2.0 * static_cast<double>(depth));
    b.ln1_gain = constant("ln1.gain", {d}, T(1));
    b.ln1_bias = constant("ln1.bias", {d}, T(0));
    b.wq = normal("attn.q.weight", {d, d}, s_in);
    b.bq = constant("attn.q.bias", {d}, T(0));
    b.wk = normal("attn.k.weight", {d, d}, s_in);
    b.bk = constant("attn.k.bias", {d}, T(0));
    b.wv = normal("attn.v.weight", {d, d}, s_in);
    b.bv = constant("attn.v.bias", {d}, T(0));
    b.wo = normal("attn.o.weight", {d, d}, s_res);
    b.bo = constant("attn.o.bias", {d}, T(0));
    b.ln2_gain = constant("ln2.gain", {d}, T(1));
    b.ln2_bias = constant("ln2.bias", {d}, T(0));
    b.fc1_w = normal("mlp.fc1.weight", {4 * d, d}, s_in);
    b.fc1_b = constant("mlp.fc1.bias", {4 * d}, T(0));
    b.fc2_w = normal("mlp.fc2.weight", {d, 4 * d}, 1.0 / std::sqrt(4.0 * static_cast<double>(d) * 2.0 * static_cast<double>(depth)));
    b.fc2_b = constant("mlp.fc2.bias", {d}, T(0));
    return b;
  }
};

/// Hook over an attention projection: receives the projection input and the
/// frozen-path output, returns the output to use. Used to attach LoRA deltas.
template <std::floating_point T>
using ProjectionHook = std::function<Var<T>(Var<T> input, Var<T> base, EncoderKind, std::size_t layer, AttnMatrix)>;

template <std::floating_point T>
struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
  ProjectionHook<T> hook;
};

namespace detail {
template <std::floating_point T>
Var<T> project(Tape<T>& tape, Parameter<T>& w, Parameter<T>& b, Var<T> x, const ForwardOptions<T>& opt,
               EncoderKind enc, std::size_t layer, AttnMatrix m) {
  Var<T> base = linear(x, tape.param(w), tape.param(b));
  return opt.hook ? opt.hook(x, base, enc, layer, m) : base;
}
}  // namespace detail

/// MHA(x) = concat(head_1..head_H) W_o with head_i = softmax(x W_qi (x W_ki)^T / sqrt(d_h)) x W_vi.
/// x packs `batch` sequences of `seq` rows. Returns the pre-residual output.
template <std::floating_point T>
Var<T> multi_head_attention(Tape<T>& tape, AttentionBlock<T>& block, Var<T> x, std::size_t batch, std::size_t seq,
                            std::span<const std::uint8_t> key_mask = {}, const ForwardOptions<T>& opt = {},
                            EncoderKind enc = EncoderKind::vision, std::size_t layer = 0) {
  if (x.shape().size() != 2 || x.shape()[1] != block.width) {
    throw ShapeError("multi_head_attention: input " + shape_str(x.shape()) + " does not match block width " +
                     std::to_string(block.width));
  }
  Var<T> q = detail::project(tape, block.wq, block.bq, x, opt, enc, layer, AttnMatrix::q);
  Var<T> k = detail::project(tape, block.wk, block.bk, x, opt, enc, layer, AttnMatrix::k);
  Var<T> v = detail::project(tape, block.wv, block.bv, x, opt, enc, layer, AttnMatrix::v);
  Var<T> a = attention(q, k, v, batch, seq, block.heads, key_mask);
  return detail::project(tape, block.wo, block.bo, a, opt, enc, layer, AttnMatrix::o);
}

template <std::floating_point T>
Var<T> block_forward(Tape<T>& tape, AttentionBlock<T>& block, Var<T> x, std::size_t batch, std::size_t seq,
                     std::span<const std::uint8_t> key_mask, const ForwardOptions<T>& opt, EncoderKind enc,
                     std::size_t layer) {
  Var<T> h = layer_norm(x, tape.param(block.ln1_gain), tape.param(block.ln1_bias));
  x = add(x, multi_head_attention(tape, block, h, batch, seq, key_mask, opt, enc, layer));
  Var<T> h2 = layer_norm(x, tape.param(block.ln2_gain), tape.param(block.ln2_bias));
  Var<T> m = linear(gelu(linear(h2, tape.param(block.fc1_w), tape.param(block.fc1_b))), tape.param(block.fc2_w),
                    tape.param(block.fc2_b));
  return add(x, m);
}

template <std::floating_point T>
struct VisionEncoder {
  Parameter<T> patch_embed;  // [d x patch_dim]
  Parameter<T> class_token;  // [1 x d]
  Parameter<T> pos_embed;    // [(P+1) x d]
  std::vector<AttentionBlock<T>> blocks;
  Parameter<T> ln_final_gain, ln_final_bias;
  Parameter<T> proj;  // [d_e x d]

  template <class F>
  void for_each_parameter(F&& f) {
    f(patch_embed);
    f(class_token);
    f(pos_embed);
    for (auto& b : blocks) b.for_each_parameter(f);
    f(ln_final_gain);
    f(ln_final_bias);
    f(proj);
  }
};

template <std::floating_point T>
struct TextEncoder {
  Parameter<T> token_embed;  // [V x d]
  Parameter<T> pos_embed;    // [max_len x d]
  std::vector<AttentionBlock<T>> blocks;
  Parameter<T> ln_final_gain, ln_final_bias;
  Parameter<T> proj;  // [d_e x d]

  template <class F>
  void for_each_parameter(F&& f) {
    f(token_embed);
    f(pos_embed);
    for (auto& b : blocks) b.for_each_parameter(f);
    f(ln_final_gain);
    f(ln_final_bias);
    f(proj);
  }
};

/// Packed token batch; every row is padded to `seq` columns.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> ids;      // batch*seq
  std::vector<std::size_t> lengths;  // valid tokens per row, EOS last
  std::vector<std::uint8_t> mask;    // batch*seq, 1 = valid

  /// Packs prompts, trimming trailing columns that are padding in every row.
  static TokenBatch from_prompts(std::span<const ClassPrompt> prompts) {
    if (prompts.empty()) throw InputError("empty prompt batch");
    TokenBatch tb;
    tb.batch = prompts.size();
    for (const auto& p : prompts) {
      if (p.length < 2 || p.length > p.tokens.size()) throw InputError("malformed prompt '" + p.class_name + "'");
      tb.seq = std::max(tb.seq, p.length);
    }
    for (const auto& p : prompts) {
      for (std::size_t j = 0; j < tb.seq; ++j) {
        tb.ids.push_back(j < p.tokens.size() ? p.tokens[j] : Vocabulary::pad_id);
        tb.mask.push_back(j < p.length ? 1 : 0);
      }
      tb.lengths.push_back(p.length);
    }
    return tb;
  }
};

/// CLIP-style dual encoder with a positive temperature.
template <std::floating_point T>
class DualEncoderModel {
 public:
  DualEncoderModel() = default;

  static DualEncoderModel create(const ModelConfig& cfg, Vocabulary vocab, std::uint64_t seed) {
    cfg.validate();
    DualEncoderModel m;
    m.config_ = cfg;
    m.vocab_ = std::move(vocab);
    Rng rng(seed);
    auto normal = [&](const std::string& name, Shape s, double std) {
      Tensor<T> t(std::move(s));
      for (T& v : t.data()) v = static_cast<T>(rng.normal() * std);
      return Parameter<T>(name, std::move(t));
    };
    const std::size_t dv = cfg.vision.width, dt = cfg.text.width;
    m.vision_.patch_embed = normal("vision.patch_embed", {dv, cfg.patch_dim()}, 1.0 / std::sqrt(double(cfg.patch_dim())));
    m.vision_.class_token = normal("vision.class_token", {1, dv}, 0.1);
    m.vision_.pos_embed = normal("vision.pos_embed", {cfg.vision_seq_len(), dv}, 0.1);
    for (std::size_t l = 0; l < cfg.vision.depth; ++l) {
      m.vision_.blocks.push_back(AttentionBlock<T>::create("vision.blocks." + std::to_string(l) + ".", dv,
                                                           cfg.vision.heads, cfg.vision.depth, rng));
    }
    m.vision_.ln_final_gain = Parameter<T>("vision.ln_final.gain", Tensor<T>({dv}, T(1)));
    m.vision_.ln_final_bias = Parameter<T>("vision.ln_final.bias", Tensor<T>({dv}, T(0)));
    m.vision_.proj = normal("vision.proj", {cfg.embed_dim, dv}, 1.0 / std::sqrt(double(dv)));

    m.text_.token_embed = normal("text.token_embed", {m.vocab_.size(), dt}, 0.1);
    m.text_.pos_embed = normal("text.pos_embed", {cfg.max_text_len, dt}, 0.1);
    for (std::size_t l = 0; l < cfg.text.depth; ++l) {
      m.text_.blocks.push_back(AttentionBlock<T>::create("text.blocks." + std::to_string(l) + ".", dt, cfg.text.heads,
                                                         cfg.text.depth, rng));
    }
    m.text_.ln_final_gain = Parameter<T>("text.ln_final.gain", Tensor<T>({dt}, T(1)));
    m.text_.ln_final_bias = Parameter<T>("text.ln_final.bias", Tensor<T>({dt}, T(0)));
    m.text_.proj = normal("text.proj", {cfg.embed_dim, dt}, 1.0 / std::sqrt(double(dt)));
    m.tau_ = Parameter<T>("logit.tau", Tensor<T>::scalar(static_cast<T>(cfg.init_temperature)));
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const Vocabulary& vocabulary() const noexcept { return vocab_; }
  VisionEncoder<T>& vision() noexcept { return vision_; }
  const VisionEncoder<T>& vision() const noexcept { return vision_; }
  TextEncoder<T>& text() noexcept { return text_; }
  const TextEncoder<T>& text() const noexcept { return text_; }
  Parameter<T>& tau_param() noexcept { return tau_; }
  T tau() const { return tau_.value[0]; }

  std::vector<AttentionBlock<T>>& blocks(EncoderKind e) { return e == EncoderKind::vision ? vision_.blocks : text_.blocks; }
  const std::vector<AttentionBlock<T>>& blocks(EncoderKind e) const {
    return e == EncoderKind::vision ? vision_.blocks : text_.blocks;
  }
  std::size_t depth(EncoderKind e) const { return blocks(e).size(); }

  /// Visits every parameter in a fixed order (checkpoint order).
  template <class F>
  void for_each_parameter(F&& f) {
    vision_.for_each_parameter(f);
    text_.for_each_parameter(f);
    f(tau_);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    const_cast<DualEncoderModel*>(this)->for_each_parameter([&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  Parameter<T>* find_parameter(std::string_view name) {
    Parameter<T>* found = nullptr;
    for_each_parameter([&](Parameter<T>& p) {
      if (p.name == name) found = &p;
    });
    return found;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const Parameter<T>& p) { n += p.numel(); });
    return n;
  }

  /// Set while an AdaptedModel holds this model.
  bool adapter_attached() const noexcept { return adapter_attached_; }
  void set_adapter_attached(bool v) noexcept { adapter_attached_ = v; }

  void set_trainable(bool trainable) {
    for_each_parameter([&](Parameter<T>& p) { p.trainable = trainable; });
  }

  /// Model with identical values converted to another precision.
  template <std::floating_point U>
  DualEncoderModel<U> cast() const {
    DualEncoderModel<U> out = DualEncoderModel<U>::create(config_, vocab_, 0);
    auto src = const_cast<DualEncoderModel*>(this)->parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value = src[i]->value.template cast<U>();
      dst[i]->trainable = src[i]->trainable;
    }
    return out;
  }

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  VisionEncoder<T> vision_;
  TextEncoder<T> text_;
  Parameter<T> tau_;
  bool adapter_attached_ = false;
};

/// Splits row-major (h, w, c) images into raster-ordered p x p patches:
/// [batch*num_patches x patch_dim].
template <std::floating_point T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& cfg) {
  const std::size_t px = cfg.pixels_per_image();
  if (images.rank() != 2 || images.cols() != px) {
    throw ShapeError("images must be [batch x " + std::to_string(px) + "] (" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels) + "), got " +
                     shape_str(images.shape()));
  }
  const std::size_t n = images.rows(), g = cfg.patches_per_side(), p = cfg.patch_size, c = cfg.channels,
                    w = cfg.image_size;
  Tensor<T> out({n * cfg.num_patches(), cfg.patch_dim()});
  T* o = out.ptr();
  for (std::size_t b = 0; b < n; ++b) {
    const T* img = images.ptr() + b * px;
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch) *o++ = img[((gy * p + dy) * w + gx * p + dx) * c + ch];
  }
  return out;
}

/// Image embeddings [batch x d_e], unit norm. `images` is [batch x h*w*c].
template <std::floating_point T>
Var<T> encode_images(Tape<T>& tape, DualEncoderModel<T>& model, const Tensor<T>& images,
                     const ForwardOptions<T>& opt = {}) {
  const ModelConfig& cfg = model.config();
  auto& enc = model.vision();
  const std::size_t batch = images.rows(), np = cfg.num_patches(), seq = cfg.vision_seq_len();
  Var<T> patches = tape.constant(patchify(images, cfg));
  Var<T> emb = linear(patches, tape.param(enc.patch_embed));
  // Row 0 is the class token, row 1 + i the i-th patch embedding.
  Var<T> table = concat_rows<T>({tape.param(enc.class_token), emb});
  std::vector<std::size_t> order;
  order.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(0);
    for (std::size_t i = 0; i < np; ++i) order.push_back(1 + b * np + i);
  }
  Var<T> x = add_tiled(gather_rows(table, std::move(order)), tape.param(enc.pos_embed));
  for (std::size_t l = 0; l < enc.blocks.size(); ++l) {
    x = block_forward(tape, enc.blocks[l], x, batch, seq, {}, opt, EncoderKind::vision, l);
  }
  std::vector<std::size_t> pooled(batch);
  for (std::size_t b = 0; b < batch; ++b) pooled[b] = b * seq;
  Var<T> h = layer_norm(gather_rows(x, std::move(pooled)), tape.param(enc.ln_final_gain), tape.param(enc.ln_final_bias));
  return l2_normalize_rows(linear(h, tape.param(enc.proj)));
}

/// Text embeddings from already-embedded tokens `tokens` [batch*seq x d]
/// (positions not yet added). Pools the EOS row (index length-1) of each row.
template <std::floating_point T>
Var<T> encode_token_embeddings(Tape<T>& tape, DualEncoderModel<T>& model, Var<T> tokens, const TokenBatch& tb,
                               const ForwardOptions<T>& opt = {}) {
  auto& enc = model.text();
  if (tb.seq > model.config().max_text_len) {
    throw InputError("token sequence of length " + std::to_string(tb.seq) + " exceeds max length " +
                     std::to_string(model.config().max_text_len));
  }
  std::vector<std::size_t> positions(tb.seq);
  for (std::size_t j = 0; j < tb.seq; ++j) positions[j] = j;
  Var<T> x = add_tiled(tokens, gather_rows(tape.param(enc.pos_embed), std::move(positions)));
  for (std::size_t l = 0; l < enc.blocks.size(); ++l) {
    x = block_forward(tape, enc.blocks[l], x, tb.batch, tb.seq, tb.mask, opt, EncoderKind::text, l);
  }
  std::vector<std::size_t> pooled(tb.batch);
  for (std::size_t b = 0; b < tb.batch; ++b) pooled[b] = b * tb.seq + tb.lengths[b] - 1;
  Var<T> h = layer_norm(gather_rows(x, std::move(pooled)), tape.param(enc.ln_final_gain), tape.param(enc.ln_final_bias));
  return l2_normalize_rows(linear(h, tape.param(enc.proj)));
}

template <std::floating_point T>
Var<T> encode_tokens(Tape<T>& tape, DualEncoderModel<T>& model, const TokenBatch& tb, const ForwardOptions<T>& opt = {}) {
  const std::size_t v = model.vocabulary().size();
  for (std::size_t id : tb.ids) {
    if (id >= v) throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(v));
  }
  Var<T> tokens = gather_rows(tape.param(model.text().token_embed), tb.ids);
  return encode_token_embeddings(tape, model, tokens, tb, opt);
}

/// Text embeddings [K x d_e] for a list of prompts, unit norm.
template <std::floating_point T>
Var<T> encode_prompts(Tape<T>& tape, DualEncoderModel<T>& model, std::span<const ClassPrompt> prompts,
                      const ForwardOptions<T>& opt = {}) {
  return encode_tokens(tape, model, TokenBatch::from_prompts(prompts), opt);
}

/// Eval-mode embedding of a single image [h*w*c] (or [1 x h*w*c]).
template <std::floating_point T>
Tensor<T> encode_image(DualEncoderModel<T>& model, const Tensor<T>& pixels) {
  Tape<T> tape;
  return encode_images(tape, model, pixels.reshaped({1, pixels.size()})).value().reshaped({model.config().embed_dim});
}

template <std::floating_point T>
Tensor<T> encode_text(DualEncoderModel<T>& model, const ClassPrompt& prompt) {
  Tape<T> tape;
  return encode_prompts(tape, model, std::span<const ClassPrompt>(&prompt, 1)).value().reshaped({model.config().embed_dim});
}

template <std::floating_point T>
ClassPrompt make_prompt(const DualEncoderModel<T>& model, std::string_view class_name) {
  return tokenize_prompt(class_name, model.vocabulary(), model.config().max_text_len);
}

}  // namespace clora
