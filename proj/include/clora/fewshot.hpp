#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/errors.hpp"
#include "clora/lora.hpp"
#include "clora/model.hpp"
#include "clora/optim.hpp"
#include "clora/random.hpp"

namespace clora {

/// Images [n x h*w*c] with one class label each.
template <std::floating_point T>
struct ImageSet {
  Tensor<T> images;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  ImageSet subset(std::span<const std::size_t> idx) const {
    ImageSet out;
    if (idx.empty()) return out;
    const std::size_t px = images.cols();
    out.images = Tensor<T>({idx.size(), px}, Tensor<T>::uninitialized);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.ptr() + idx[i] * px, px, out.images.ptr() + i * px);
      out.labels.push_back(labels.at(idx[i]));
    }
    return out;
  }
};

/// K classes, `shots` support images per class and a disjoint query set.
template <std::floating_point T>
struct FewShotTask {
  std::vector<std::string> class_names;
  std::size_t shots = 0;
  ImageSet<T> support;
  ImageSet<T> query;
  std::vector<std::size_t> support_index;  // positions in the source pool
  std::vector<std::size_t> query_index;

  std::size_t num_classes() const noexcept { return class_names.size(); }
};

/// Draws `shots` images per class without replacement; everything else in the
/// pool becomes the query set (pool order preserved).
template <std::floating_point T>
FewShotTask<T> sample_support_set(const ImageSet<T>& pool, const std::vector<std::string>& class_names,
                                  std::size_t shots, std::uint64_t seed, std::size_t min_query_per_class = 1) {
  if (shots == 0) throw DomainError("shots must be >= 1");
  const std::size_t k = class_names.size();
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool.labels[i] >= k) throw InputError("pool label " + std::to_string(pool.labels[i]) + " has no class name");
    by_class[pool.labels[i]].push_back(i);
  }
  Rng rng(derive_seed(seed, hash_string("support-set")));
  std::vector<char> chosen(pool.size(), 0);
  FewShotTask<T> task;
  task.class_names = class_names;
  task.shots = shots;
  for (std::size_t c = 0; c < k; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < shots + min_query_per_class) {
      throw DomainError("class '" + class_names[c] + "' has " + std::to_string(idx.size()) + " images, needs " +
                        std::to_string(shots + min_query_per_class) + " for " + std::to_string(shots) + " shots");
    }
    for (std::size_t s = 0; s < shots; ++s) {
      const std::size_t j = s + rng.index(idx.size() - s);
      std::swap(idx[s], idx[j]);
      task.support_index.push_back(idx[s]);
      chosen[idx[s]] = 1;
    }
  }
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!chosen[i]) task.query_index.push_back(i);
  task.support = pool.subset(task.support_index);
  task.query = pool.subset(task.query_index);
  return task;
}

/// Unit-norm image embeddings [n x d_e], encoded in chunks of `chunk` rows.
template <std::floating_point T>
Tensor<T> embed_images(DualEncoderModel<T>& model, const Tensor<T>& images, const ForwardOptions<T>& opt = {},
                       std::size_t chunk = 128) {
  const std::size_t n = images.rows(), px = images.cols(), d = model.config().embed_dim;
  Tensor<T> out({n, d}, Tensor<T>::uninitialized);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Tensor<T> part({m, px}, Tensor<T>::uninitialized);
    std::copy_n(images.ptr() + start * px, m * px, part.ptr());
    Tape<T> tape;
    const Tensor<T>& f = encode_images(tape, model, part, opt).value();
    std::copy_n(f.ptr(), m * d, out.ptr() + start * d);
  }
  return out;
}

/// l[i][k] = f_i . t_k for image features [n x d_e] and class features [K x d_e].
template <std::floating_point T>
Tensor<T> similarity_logits(const Tensor<T>& image_features, const Tensor<T>& class_features) {
  if (image_features.rank() != 2 || class_features.rank() != 2 || image_features.cols() != class_features.cols()) {
    throw ShapeError("similarity: " + shape_str(image_features.shape()) + " vs " + shape_str(class_features.shape()));
  }
  Tensor<T> out({image_features.rows(), class_features.rows()}, Tensor<T>::uninitialized);
  detail::mat(out).noalias() = detail::mat(image_features) * detail::mat(class_features).transpose();
  return out;
}

/// Encodes `prompts` once and the images in chunks; returns l[i][k] = f_i . t_k.
template <std::floating_point T>
Tensor<T> class_logits(DualEncoderModel<T>& model, const Tensor<T>& images, std::span<const ClassPrompt> prompts,
                       const ForwardOptions<T>& opt = {}, std::size_t chunk = 128) {
  if (prompts.size() < 2) throw DomainError("zero-shot prediction needs at least 2 classes");
  Tensor<T> text;
  {
    Tape<T> tape;
    text = encode_prompts(tape, model, prompts, opt).value();
  }
  return similarity_logits(embed_images(model, images, opt, chunk), text);
}

/// Eq. 1 logits for a frozen model with "a photo of a <class>" prompts.
template <std::floating_point T>
Tensor<T> zero_shot_logits(DualEncoderModel<T>& model, const Tensor<T>& images,
                           const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw DomainError("zero-shot prediction needs at least 2 classes");
  std::vector<ClassPrompt> prompts;
  for (const auto& c : class_names) prompts.push_back(make_prompt(model, c));
  return class_logits(model, images, std::span<const ClassPrompt>(prompts));
}

/// p[i][k] = exp(l[i][k]/tau) / sum_j exp(l[i][j]/tau).
template <std::floating_point T>
Tensor<T> posterior(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw DomainError("posterior: temperature must be positive");
  if (logits.rank() != 2) throw ShapeError("posterior: logits must be a matrix, got " + shape_str(logits.shape()));
  Tensor<T> p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i) detail::softmax_inplace(p.ptr() + i * p.cols(), p.cols(), T(1) / tau);
  return p;
}

/// Row-wise argmax; ties resolve to the lowest class index.
template <std::floating_point T>
std::vector<std::size_t> predict(const Tensor<T>& scores) {
  if (scores.rank() != 2) throw ShapeError("predict: scores must be a matrix");
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto r = scores.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

/// -(1/N) sum_i ln p[i][y_i] for posteriors p.
template <std::floating_point T>
T cross_entropy_loss(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.rows() != labels.size()) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for posteriors " +
                     shape_str(probs.shape()));
  }
  T loss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= probs.cols()) throw InputError("cross_entropy_loss: label out of range");
    loss -= std::log(probs.at(i, labels[i]));
  }
  return loss / static_cast<T>(labels.size());
}

/// Same loss computed from logits through a max-shifted log-sum-exp of l/tau.
template <std::floating_point T>
T cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::size_t> labels, T tau) {
  if (!(tau > T(0))) throw DomainError("cross_entropy_from_logits: temperature must be positive");
  Tape<T> tape;
  Var<T> z = scale(tape.constant(logits), T(1) / tau);
  return softmax_cross_entropy(z, std::vector<std::size_t>(labels.begin(), labels.end())).value()[0];
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (labels.empty()) throw DomainError("accuracy over an empty set");
  if (predicted.size() != labels.size()) throw ShapeError("accuracy: prediction/label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Fixed adaptation hyper-parameters: lr 2e-4, batch 32, 500 x shots
/// iterations, cosine schedule. `iterations_override` (> 0) exists for tests.
struct TrainConfig {
  double lr = 2e-4;
  std::size_t batch_size = 32;
  std::size_t iterations_per_shot = 500;
  std::size_t iterations_override = 0;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;

  std::size_t iterations(std::size_t shots) const {
    return iterations_override ? iterations_override : iterations_per_shot * shots;
  }
};

struct TrainStep {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainingHistory {
  std::vector<TrainStep> steps;
  double final_lr = 0;  // schedule value after the last update

  std::size_t iterations() const noexcept { return steps.size(); }
};

/// Streams support indices in batches: with replacement when the support set
/// is smaller than a batch, otherwise epoch-wise reshuffled permutations.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed) {
    if (n == 0) throw DomainError("cannot sample batches from an empty set");
    if (batch == 0) throw DomainError("batch size must be >= 1");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    if (n_ < batch_) {
      for (std::size_t i = 0; i < batch_; ++i) out.push_back(rng_.index(n_));
      return out;
    }
    while (out.size() < batch_) {
      if (cursor_ == perm_.size()) reshuffle();
      out.push_back(perm_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    for (std::size_t i = n_; i > 1; --i) std::swap(perm_[i - 1], perm_[rng_.index(i)]);
    cursor_ = 0;
  }

  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
};

/// Mean cross-entropy of softmax(f . t / tau) against the batch labels, on the tape.
template <std::floating_point T>
Var<T> classification_loss(Tape<T>& tape, DualEncoderModel<T>& model, const ImageSet<T>& batch,
                           std::span<const ClassPrompt> prompts, T inv_tau, const ForwardOptions<T>& opt = {}) {
  Var<T> f = encode_images(tape, model, batch.images, opt);
  Var<T> t = encode_prompts(tape, model, prompts, opt);
  return softmax_cross_entropy(scale(linear(f, t), inv_tau), batch.labels);
}

/// Options factory: (training, dropout stream) -> forward options.
template <std::floating_point T>
using OptionsFactory = std::function<ForwardOptions<T>(bool, Rng*)>;

/// Cross-entropy fine-tuning of `params` on the support set: both encoders run
/// every step (class prompts are re-encoded), logits are scaled by the model's
/// frozen temperature, AdamW with a cosine schedule.
template <std::floating_point T>
TrainingHistory finetune_classifier(DualEncoderModel<T>& model, const FewShotTask<T>& task, const TrainConfig& cfg,
                                    std::vector<Parameter<T>*> params, const OptionsFactory<T>& options) {
  if (task.support.size() == 0) throw DomainError("support set is empty");
  if (task.num_classes() < 2) throw DomainError("fine-tuning needs at least 2 classes");
  const std::size_t total = cfg.iterations(task.shots);
  std::vector<ClassPrompt> prompts;
  for (const auto& c : task.class_names) prompts.push_back(make_prompt(model, c));
  const T inv_tau = T(1) / model.tau();
  AdamW<T> opt(std::move(params), AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  BatchSampler sampler(task.support.size(), cfg.batch_size, derive_seed(cfg.seed, hash_string("batches")));
  Rng dropout_rng(derive_seed(cfg.seed, hash_string("dropout")));
  TrainingHistory hist;
  hist.steps.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = sampler.next();
    const ImageSet<T> batch = task.support.subset(idx);
    double loss_value = 0;
    try {
      Tape<T> tape;
      const ForwardOptions<T> fo = options(true, &dropout_rng);
      Var<T> loss = classification_loss(tape, model, batch, std::span<const ClassPrompt>(prompts), inv_tau, fo);
      loss_value = static_cast<double>(loss.value()[0]);
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (last good step " +
                         (step ? std::to_string(step - 1) : std::string("none")) + "): " + e.what());
    }
    const double lr = cosine_lr(static_cast<std::int64_t>(step), static_cast<std::int64_t>(total), cfg.lr);
    opt.step(lr);
    hist.steps.push_back({step, lr, loss_value});
  }
  hist.final_lr = cosine_lr(static_cast<std::int64_t>(total), static_cast<std::int64_t>(total), cfg.lr);
  return hist;
}

/// CLIP-LoRA: trains only the A/B matrices of `adapted`.
template <std::floating_point T>
TrainingHistory finetune_lora(AdaptedModel<T>& adapted, const FewShotTask<T>& task, const TrainConfig& cfg) {
  if (adapted.merged()) throw StateError("cannot fine-tune merged LoRA modules; unmerge first");
  return finetune_classifier<T>(adapted.base(), task, cfg, adapted.trainable_parameters(),
                                [&](bool training, Rng* rng) { return adapted.forward_options(training, rng); });
}

/// Top-1 accuracy on the query set in eval mode.
template <std::floating_point T>
double evaluate(DualEncoderModel<T>& model, const FewShotTask<T>& task, const ForwardOptions<T>& opt = {}) {
  if (task.query.size() == 0) throw DomainError("evaluation needs a non-empty query set");
  std::vector<ClassPrompt> prompts;
  for (const auto& c : task.class_names) prompts.push_back(make_prompt(model, c));
  const Tensor<T> l = class_logits(model, task.query.images, std::span<const ClassPrompt>(prompts), opt);
  return accuracy(predict(l), task.query.labels);
}

template <std::floating_point T>
double evaluate(AdaptedModel<T>& adapted, const FewShotTask<T>& task) {
  return evaluate(adapted.base(), task, adapted.forward_options(false, nullptr));
}

/// Image/caption pairs for contrastive pretraining.
template <std::floating_point T>
struct PairedDataset {
  Tensor<T> images;
  std::vector<ClassPrompt> captions;

  std::size_t size() const noexcept { return captions.size(); }
};

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double min_tau = 0.01;  // keeps l/tau <= 100 for unit-vector logits
  std::uint64_t seed = 0;
};

/// Symmetric in-batch contrastive training of every parameter, temperature
/// included (clamped to min_tau). Mutates `model`; returns the per-step log.
template <std::floating_point T>
TrainingHistory contrastive_pretrain(DualEncoderModel<T>& model, const PairedDataset<T>& data,
                                     const PretrainConfig& cfg) {
  if (cfg.batch_size < 2) throw DomainError("contrastive pretraining needs a batch size of at least 2");
  if (data.size() < cfg.batch_size) throw DomainError("dataset smaller than one batch");
  if (data.images.rows() != data.size()) throw ShapeError("image and caption counts differ");
  model.set_trainable(true);
  AdamW<T> opt(model.parameters(), AdamWConfig{cfg.lr, 0.9, 0.98, 1e-8, cfg.weight_decay});
  const std::size_t per_epoch = data.size() / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  BatchSampler sampler(data.size(), cfg.batch_size, derive_seed(cfg.seed, hash_string("pretrain-batches")));
  std::vector<std::size_t> diag(cfg.batch_size);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  const std::size_t px = data.images.cols();
  TrainingHistory hist;
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = sampler.next();
    Tensor<T> imgs({idx.size(), px}, Tensor<T>::uninitialized);
    std::vector<ClassPrompt> caps;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(data.images.ptr() + idx[i] * px, px, imgs.ptr() + i * px);
      caps.push_back(data.captions[idx[i]]);
    }
    Tape<T> tape;
    Var<T> f = encode_images(tape, model, imgs);
    Var<T> t = encode_prompts(tape, model, std::span<const ClassPrompt>(caps));
    Var<T> z = div_scalar(linear(f, t), tape.param(model.tau_param()));
    Var<T> loss = scale(add(softmax_cross_entropy(z, diag), softmax_cross_entropy(transpose(z), diag)), T(0.5));
    tape.backward(loss);
    const double lr = cosine_lr(static_cast<std::int64_t>(step), static_cast<std::int64_t>(total), cfg.lr);
    opt.step(lr);
    T& tau = model.tau_param().value[0];
    tau = std::max(tau, static_cast<T>(cfg.min_tau));
    hist.steps.push_back({step, lr, static_cast<double>(loss.value()[0])});
  }
  hist.final_lr = 0.0;
  model.set_trainable(false);
  return hist;
}

}  // namespace clora
