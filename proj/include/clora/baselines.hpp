#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/errors.hpp"
#include "clora/fewshot.hpp"
#include "clora/model.hpp"
#include "clora/optim.hpp"
#include "clora/random.hpp"

namespace clora {

namespace detail {

/// Generic loop shared by the baselines. `logits(tape, batch_indices)` builds
/// the [batch x K] similarity logits for support rows; they get divided by tau.
template <std::floating_point T>
TrainingHistory train_loop(const std::function<Var<T>(Tape<T>&, const std::vector<std::size_t>&, Rng&)>& logits,
                           const std::vector<std::size_t>& labels, std::size_t shots, T tau, const TrainConfig& cfg,
                           std::vector<Parameter<T>*> params) {
  if (labels.empty()) throw DomainError("support set is empty");
  const std::size_t total = cfg.iterations(shots);
  AdamW<T> opt(std::move(params), AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  BatchSampler sampler(labels.size(), cfg.batch_size, derive_seed(cfg.seed, hash_string("batches")));
  Rng rng(derive_seed(cfg.seed, hash_string("dropout")));
  TrainingHistory hist;
  hist.steps.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = sampler.next();
    std::vector<std::size_t> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
    Tape<T> tape;
    Var<T> loss = softmax_cross_entropy(scale(logits(tape, idx, rng), T(1) / tau), std::move(y));
    tape.backward(loss);
    const double lr = cosine_lr(static_cast<std::int64_t>(step), static_cast<std::int64_t>(total), cfg.lr);
    opt.step(lr);
    hist.steps.push_back({step, lr, static_cast<double>(loss.value()[0])});
  }
  hist.final_lr = cosine_lr(static_cast<std::int64_t>(total), static_cast<std::int64_t>(total), cfg.lr);
  return hist;
}

template <std::floating_point T>
Tensor<T> select_rows(const Tensor<T>& m, const std::vector<std::size_t>& idx) {
  Tensor<T> out({idx.size(), m.cols()}, Tensor<T>::uninitialized);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.ptr() + idx[i] * m.cols(), m.cols(), out.ptr() + i * m.cols());
  return out;
}

template <std::floating_point T>
Tensor<T> embed_class_prompts(DualEncoderModel<T>& model, const std::vector<std::string>& class_names) {
  std::vector<ClassPrompt> prompts;
  for (const auto& c : class_names) prompts.push_back(make_prompt(model, c));
  Tape<T> tape;
  return encode_prompts(tape, model, std::span<const ClassPrompt>(prompts)).value();
}

}  // namespace detail

/// Learnable context vectors replacing the hand-written template:
/// [BOS, ctx_1..ctx_M, class words, EOS]. Only the M x d context is trained.
template <std::floating_point T>
class SoftPrompt {
 public:
  /// Context initialized from the template word embeddings when M matches the
  /// template length, otherwise N(0, 0.02).
  static SoftPrompt create(const DualEncoderModel<T>& model, std::size_t context_len, std::uint64_t seed) {
    if (context_len == 0) throw ConfigError("soft prompt needs at least one context vector");
    const auto words = split_words(prompt_template);
    const std::size_t d = model.config().text.width;
    SoftPrompt sp;
    sp.ctx_ = Parameter<T>("soft_prompt.ctx", Tensor<T>({context_len, d}));
    if (context_len == words.size()) {
      const auto& table = model.text().token_embed.value;
      for (std::size_t j = 0; j < context_len; ++j) {
        const std::size_t id = model.vocabulary().id(words[j]);
        std::copy_n(table.ptr() + id * d, d, sp.ctx_.value.ptr() + j * d);
      }
    } else {
      Rng rng(derive_seed(seed, hash_string("soft_prompt")));
      for (T& v : sp.ctx_.value.data()) v = static_cast<T>(0.02 * rng.normal());
    }
    return sp;
  }

  std::size_t context_len() const { return ctx_.value.rows(); }
  std::size_t trainable_count() const { return ctx_.numel(); }
  Parameter<T>& context() { return ctx_; }

  /// Prompts whose context positions hold placeholder ids vocab_size + j.
  std::vector<ClassPrompt> prompts(const DualEncoderModel<T>& model, const std::vector<std::string>& class_names) const {
    const std::size_t v = model.vocabulary().size(), m = context_len(), max_len = model.config().max_text_len;
    std::vector<ClassPrompt> out;
    for (const auto& name : class_names) {
      const auto words = split_words(name);
      if (words.empty()) throw InputError("class name must not be empty");
      if (m + words.size() + 2 > max_len) {
        throw ConfigError("soft prompt for '" + name + "' needs " + std::to_string(m + words.size() + 2) +
                          " tokens, max length is " + std::to_string(max_len));
      }
      ClassPrompt p;
      p.class_name = name;
      p.tokens.assign(max_len, Vocabulary::pad_id);
      p.tokens[0] = Vocabulary::bos_id;
      for (std::size_t j = 0; j < m; ++j) p.tokens[1 + j] = static_cast<TokenId>(v + j);
      for (std::size_t j = 0; j < words.size(); ++j) p.tokens[1 + m + j] = model.vocabulary().id(words[j]);
      p.tokens[1 + m + words.size()] = Vocabulary::eos_id;
      p.length = m + words.size() + 2;
      out.push_back(std::move(p));
    }
    return out;
  }

  /// Unit-norm class embeddings [K x d_e].
  Var<T> encode(Tape<T>& tape, DualEncoderModel<T>& model, const std::vector<ClassPrompt>& prompts) {
    const TokenBatch tb = TokenBatch::from_prompts(std::span<const ClassPrompt>(prompts));
    Var<T> table = concat_rows<T>({tape.param(model.text().token_embed), tape.param(ctx_)});
    return encode_token_embeddings(tape, model, gather_rows(table, tb.ids), tb);
  }

 private:
  Parameter<T> ctx_;
};

/// Soft-prompt similarity logits for `images`.
template <std::floating_point T>
Tensor<T> soft_prompt_logits(DualEncoderModel<T>& model, SoftPrompt<T>& sp, const Tensor<T>& images,
                             const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw DomainError("classification needs at least 2 classes");
  Tape<T> tape;
  Tensor<T> text = sp.encode(tape, model, sp.prompts(model, class_names)).value();
  return similarity_logits(embed_images(model, images), text);
}

template <std::floating_point T>
TrainingHistory finetune_soft_prompt(DualEncoderModel<T>& model, SoftPrompt<T>& sp, const FewShotTask<T>& task,
                                     const TrainConfig& cfg) {
  model.set_trainable(false);
  sp.context().trainable = true;
  const Tensor<T> feats = embed_images(model, task.support.images);
  const auto prompts = sp.prompts(model, task.class_names);
  return detail::train_loop<T>(
      [&](Tape<T>& tape, const std::vector<std::size_t>& idx, Rng&) {
        Var<T> t = sp.encode(tape, model, prompts);
        return linear(tape.constant(detail::select_rows(feats, idx)), t);
      },
      task.support.labels, task.shots, model.tau(), cfg, {&sp.context()});
}

template <std::floating_point T>
double evaluate_soft_prompt(DualEncoderModel<T>& model, SoftPrompt<T>& sp, const FewShotTask<T>& task) {
  if (task.query.size() == 0) throw DomainError("evaluation needs a non-empty query set");
  return accuracy(predict(soft_prompt_logits(model, sp, task.query.images, task.class_names)), task.query.labels);
}

/// Residual bottleneck MLP on frozen image features:
/// f' = normalize(alpha * (W2 relu(W1 f + b1) + b2) + (1 - alpha) f).
/// W2, b2 start at zero so the adapter initially preserves feature directions.
template <std::floating_point T>
class FeatureAdapter {
 public:
  static FeatureAdapter create(std::size_t dim, std::size_t bottleneck, double alpha, std::uint64_t seed) {
    if (bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("adapter blend alpha must lie in [0, 1]");
    FeatureAdapter a;
    a.alpha_ = alpha;
    Rng rng(derive_seed(seed, hash_string("adapter")));
    Tensor<T> w1({bottleneck, dim});
    const double bound = std::sqrt(6.0 / static_cast<double>(dim));
    for (T& v : w1.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    a.w1_ = Parameter<T>("adapter.fc1.weight", std::move(w1), true);
    a.b1_ = Parameter<T>("adapter.fc1.bias", Tensor<T>({bottleneck}), true);
    a.w2_ = Parameter<T>("adapter.fc2.weight", Tensor<T>({dim, bottleneck}), true);
    a.b2_ = Parameter<T>("adapter.fc2.bias", Tensor<T>({dim}), true);
    return a;
  }

  double alpha() const { return alpha_; }
  std::vector<Parameter<T>*> parameters() { return {&w1_, &b1_, &w2_, &b2_}; }
  std::size_t trainable_count() const { return w1_.numel() + b1_.numel() + w2_.numel() + b2_.numel(); }

  /// alpha = 0 returns the input features untouched.
  Var<T> apply(Tape<T>& tape, Var<T> f) {
    if (alpha_ == 0.0) return f;
    Var<T> h = linear(relu(linear(f, tape.param(w1_), tape.param(b1_))), tape.param(w2_), tape.param(b2_));
    return l2_normalize_rows(add(scale(h, static_cast<T>(alpha_)), scale(f, static_cast<T>(1.0 - alpha_))));
  }

 private:
  double alpha_ = 0.2;
  Parameter<T> w1_, b1_, w2_, b2_;
};

template <std::floating_point T>
Tensor<T> adapter_logits(DualEncoderModel<T>& model, FeatureAdapter<T>& adapter, const Tensor<T>& images,
                         const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw DomainError("classification needs at least 2 classes");
  const Tensor<T> text = detail::embed_class_prompts(model, class_names);
  Tape<T> tape;
  Var<T> f = adapter.apply(tape, tape.constant(embed_images(model, images)));
  return similarity_logits(f.value(), text);
}

template <std::floating_point T>
TrainingHistory finetune_adapter(DualEncoderModel<T>& model, FeatureAdapter<T>& adapter, const FewShotTask<T>& task,
                                 const TrainConfig& cfg) {
  model.set_trainable(false);
  const Tensor<T> feats = embed_images(model, task.support.images);
  const Tensor<T> text = detail::embed_class_prompts(model, task.class_names);
  return detail::train_loop<T>(
      [&](Tape<T>& tape, const std::vector<std::size_t>& idx, Rng&) {
        Var<T> f = adapter.apply(tape, tape.constant(detail::select_rows(feats, idx)));
        return linear(f, tape.constant(text));
      },
      task.support.labels, task.shots, model.tau(), cfg, adapter.parameters());
}

template <std::floating_point T>
double evaluate_adapter(DualEncoderModel<T>& model, FeatureAdapter<T>& adapter, const FewShotTask<T>& task) {
  if (task.query.size() == 0) throw DomainError("evaluation needs a non-empty query set");
  return accuracy(predict(adapter_logits(model, adapter, task.query.images, task.class_names)), task.query.labels);
}

/// Bias vectors of every attention projection and MLP layer in both encoders.
template <std::floating_point T>
std::vector<Parameter<T>*> bias_parameters(DualEncoderModel<T>& model) {
  std::vector<Parameter<T>*> out;
  for (EncoderKind e : {EncoderKind::vision, EncoderKind::text}) {
    for (auto& b : model.blocks(e)) {
      for (Parameter<T>* p : {&b.bq, &b.bk, &b.bv, &b.bo, &b.fc1_b, &b.fc2_b}) out.push_back(p);
    }
  }
  return out;
}

template <std::floating_point T>
std::size_t bias_parameter_count(DualEncoderModel<T>& model) {
  std::size_t n = 0;
  for (auto* p : bias_parameters(model)) n += p->numel();
  return n;
}

/// Trains only the attention and MLP biases (in place), both encoders active.
template <std::floating_point T>
TrainingHistory finetune_bias_only(DualEncoderModel<T>& model, const FewShotTask<T>& task, const TrainConfig& cfg) {
  model.set_trainable(false);
  auto params = bias_parameters(model);
  for (auto* p : params) p->trainable = true;
  TrainingHistory h = finetune_classifier<T>(model, task, cfg, params, [](bool training, Rng* rng) {
    ForwardOptions<T> o;
    o.training = training;
    o.rng = rng;
    return o;
  });
  model.set_trainable(false);
  return h;
}

}  // namespace clora
