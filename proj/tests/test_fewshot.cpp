#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "clora/fewshot.hpp"
#include "clora/lora.hpp"
#include "test_util.hpp"

using namespace clora;
using clora::test::random_tensor;
using clora::test::tiny_config;
using clora::test::tiny_vocabulary;

namespace {

const std::vector<std::string> tiny_classes = {"cat", "dog", "bird"};

/// Per-class mean image plus noise so the tiny problem is learnable.
ImageSet<double> tiny_pool(std::size_t per_class, std::uint64_t seed, std::size_t px = 16) {
  const auto means = random_tensor<double>({3, px}, 100);
  ImageSet<double> s;
  s.images = random_tensor<double>({3 * per_class, px}, seed, 0.3);
  for (std::size_t i = 0; i < 3 * per_class; ++i) {
    s.labels.push_back(i % 3);
    for (std::size_t j = 0; j < px; ++j) s.images.at(i, j) += means.at(i % 3, j);
  }
  return s;
}

}  // namespace

TEST(Posterior, MatchesExplicitSoftmax) {
  const auto l = random_tensor<double>({4, 5}, 3, 0.5);
  for (double tau : {0.07, 0.5, 2.0}) {
    const auto p = posterior(l, tau);
    for (std::size_t i = 0; i < 4; ++i) {
      double z = 0, total = 0;
      for (std::size_t j = 0; j < 5; ++j) z += std::exp(l.at(i, j) / tau);
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_NEAR(p.at(i, j), std::exp(l.at(i, j) / tau) / z, 1e-14);
        total += p.at(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-14);
    }
  }
  // Shifting a row leaves the posterior unchanged, even for huge logits.
  Tensor<double> big = Tensor<double>::matrix({{1000, 1001}, {0, 1}});
  const auto pb = posterior(big, 1.0);
  EXPECT_NEAR(pb.at(0, 1), pb.at(1, 1), 1e-15);
  EXPECT_THROW(posterior(l, 0.0), DomainError);
  EXPECT_THROW(posterior(l, -1.0), DomainError);
}

TEST(Posterior, PredictBreaksTiesTowardLowestIndex) {
  const auto s = Tensor<double>::matrix({{0.2, 0.7, 0.7}, {0.5, 0.5, 0.1}, {0.1, 0.2, 0.3}, {1, 1, 1}});
  EXPECT_EQ(predict(s), (std::vector<std::size_t>{1, 0, 2, 0}));
}

TEST(Posterior, CrossEntropyHandValues) {
  const auto l = Tensor<double>::matrix({{0.0, std::log(3.0)}, {std::log(4.0), 0.0}});
  const std::vector<std::size_t> y = {1, 1};
  const double expect = -(std::log(0.75) + std::log(0.2)) / 2;
  EXPECT_NEAR(cross_entropy_loss(posterior(l, 1.0), std::span<const std::size_t>(y)), expect, 1e-14);
  EXPECT_NEAR(cross_entropy_from_logits(l, std::span<const std::size_t>(y), 1.0), expect, 1e-14);
  const auto r = random_tensor<double>({6, 4}, 5);
  const std::vector<std::size_t> yr = {0, 3, 2, 1, 1, 0};
  EXPECT_NEAR(cross_entropy_loss(posterior(r, 0.3), std::span<const std::size_t>(yr)),
              cross_entropy_from_logits(r, std::span<const std::size_t>(yr), 0.3), 1e-12);
}

TEST(Posterior, Accuracy) {
  const std::vector<std::size_t> p = {0, 1, 2, 2}, y = {0, 1, 1, 2};
  EXPECT_DOUBLE_EQ(accuracy(p, y), 0.75);
  EXPECT_THROW(accuracy({}, {}), DomainError);
  EXPECT_THROW(accuracy(std::span<const std::size_t>(p).first(3), y), ShapeError);
}

TEST(SupportSet, ExactShotsDisjointAndDeterministic) {
  const auto pool = tiny_pool(10, 1);
  for (std::size_t shots : {1u, 2u, 4u, 8u}) {
    const auto task = sample_support_set(pool, tiny_classes, shots, 42);
    EXPECT_EQ(task.support.size(), 3 * shots);
    EXPECT_EQ(task.query.size(), 30 - 3 * shots);
    std::vector<std::size_t> per(3);
    for (std::size_t y : task.support.labels) ++per[y];
    EXPECT_EQ(per, std::vector<std::size_t>(3, shots));
    std::set<std::size_t> all(task.support_index.begin(), task.support_index.end());
    EXPECT_EQ(all.size(), 3 * shots);
    for (std::size_t q : task.query_index) EXPECT_TRUE(all.insert(q).second);
    EXPECT_EQ(all.size(), 30u);
    EXPECT_TRUE(std::is_sorted(task.query_index.begin(), task.query_index.end()));
    for (std::size_t i = 0; i < task.support_index.size(); ++i) {
      EXPECT_EQ(task.support.labels[i], pool.labels[task.support_index[i]]);
    }
    const auto again = sample_support_set(pool, tiny_classes, shots, 42);
    EXPECT_EQ(again.support_index, task.support_index);
  }
  EXPECT_NE(sample_support_set(pool, tiny_classes, 4, 1).support_index,
            sample_support_set(pool, tiny_classes, 4, 2).support_index);
}

TEST(SupportSet, Errors) {
  const auto pool = tiny_pool(4, 1);
  EXPECT_THROW(sample_support_set(pool, tiny_classes, 0, 0), DomainError);
  try {
    sample_support_set(pool, tiny_classes, 4, 0);
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("'cat'"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(sample_support_set(pool, tiny_classes, 4, 0, 0));
  EXPECT_THROW(sample_support_set(pool, std::vector<std::string>{"cat", "dog"}, 1, 0), InputError);
}

TEST(BatchSamplerTest, PermutationsAndReplacement) {
  BatchSampler s(8, 4, 3);
  std::multiset<std::size_t> epoch;
  for (int b = 0; b < 2; ++b)
    for (std::size_t i : s.next()) epoch.insert(i);
  EXPECT_EQ(epoch, (std::multiset<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));

  BatchSampler small(3, 32, 3);
  for (int b = 0; b < 5; ++b) {
    const auto idx = small.next();
    EXPECT_EQ(idx.size(), 32u);
    for (std::size_t i : idx) EXPECT_LT(i, 3u);
  }
  EXPECT_THROW(BatchSampler(0, 4, 0), DomainError);
  EXPECT_THROW(BatchSampler(4, 0, 0), DomainError);
}

TEST(Finetune, IterationBudget) {
  TrainConfig c;
  for (std::size_t k : {1u, 2u, 4u, 8u, 16u}) EXPECT_EQ(c.iterations(k), 500 * k);
  c.iterations_override = 7;
  EXPECT_EQ(c.iterations(16), 7u);
}

TEST(Finetune, LoraTraceFollowsCosineScheduleAndLeavesBaseUntouched) {
  auto base = DualEncoderModel<double>::create(tiny_config(8, 2, 2), tiny_vocabulary(), 2);
  const auto frozen = base;
  const auto task = sample_support_set(tiny_pool(6, 4), tiny_classes, 2, 0);
  auto a = AdaptedModel<double>::inject(base, PlacementConfig{}, 1);
  TrainConfig cfg;
  cfg.iterations_override = 12;
  cfg.lr = 1e-2;
  const auto h = finetune_lora(a, task, cfg);
  ASSERT_EQ(h.iterations(), 12u);
  for (std::size_t t = 0; t < 12; ++t) {
    EXPECT_EQ(h.steps[t].step, t);
    EXPECT_NEAR(h.steps[t].lr, 1e-2 * 0.5 * (1 + std::cos(std::numbers::pi * double(t) / 12)), 1e-15);
    EXPECT_TRUE(std::isfinite(h.steps[t].loss));
  }
  EXPECT_EQ(h.steps[0].lr, 1e-2);
  EXPECT_EQ(h.final_lr, 0.0);

  auto p0 = const_cast<DualEncoderModel<double>&>(frozen).parameters();
  auto p1 = base.parameters();
  for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_TRUE(bitwise_equal(p0[i]->value, p1[i]->value)) << p0[i]->name;
  double moved = 0;
  for (const auto& [t, m] : a.modules())
    for (double b : m.B.value.data()) moved += std::abs(b);
  EXPECT_GT(moved, 0.0);

  a.merge();
  EXPECT_THROW(finetune_lora(a, task, cfg), StateError);
}

TEST(Finetune, TrainingLossDecreasesOnSeparableTask) {
  auto base = DualEncoderModel<double>::create(tiny_config(8, 2, 1), tiny_vocabulary(), 2);
  base.tau_param().value[0] = 0.1;
  const auto task = sample_support_set(tiny_pool(8, 4), tiny_classes, 4, 0);
  auto a = AdaptedModel<double>::inject(base, PlacementConfig{}, 1);
  TrainConfig cfg;
  cfg.iterations_override = 150;
  cfg.lr = 2e-2;
  const auto h = finetune_lora(a, task, cfg);
  double first = 0, last = 0;
  for (std::size_t t = 0; t < 10; ++t) {
    first += h.steps[t].loss;
    last += h.steps[140 + t].loss;
  }
  EXPECT_LT(last, 0.7 * first);
}

TEST(Finetune, NonFiniteLossAbortsWithStep) {
  auto base = DualEncoderModel<double>::create(tiny_config(), tiny_vocabulary(), 2);
  const auto task = sample_support_set(tiny_pool(6, 4), tiny_classes, 2, 0);
  auto a = AdaptedModel<double>::inject(base, PlacementConfig{}, 1);
  a.modules().begin()->second.B.value[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.iterations_override = 3;
  try {
    finetune_lora(a, task, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, LogitsAreCosinesAndChunkInvariant) {
  auto m = DualEncoderModel<double>::create(tiny_config(), tiny_vocabulary(), 2);
  const auto pool = tiny_pool(5, 3);
  std::vector<ClassPrompt> prompts;
  for (const auto& c : tiny_classes) prompts.push_back(make_prompt(m, c));
  const auto full = class_logits(m, pool.images, std::span<const ClassPrompt>(prompts));
  const auto chunked = class_logits(m, pool.images, std::span<const ClassPrompt>(prompts), {}, 4);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full[i], chunked[i], 1e-14);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto f = encode_image(m, Tensor<double>({16}, std::vector<double>(pool.images.row(i).begin(), pool.images.row(i).end())));
    for (std::size_t k = 0; k < 3; ++k) {
      const auto t = encode_text(m, prompts[k]);
      double dot = 0;
      for (std::size_t j = 0; j < 4; ++j) dot += f[j] * t[j];
      EXPECT_NEAR(full.at(i, k), dot, 1e-13);
      EXPECT_LE(std::abs(full.at(i, k)), 1.0 + 1e-12);
    }
  }
  EXPECT_TRUE(bitwise_equal(zero_shot_logits(m, pool.images, tiny_classes), full));
  EXPECT_THROW(zero_shot_logits(m, pool.images, std::vector<std::string>{"cat"}), DomainError);

  auto task = sample_support_set(pool, tiny_classes, 1, 0);
  const double acc = evaluate(m, task);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  task.query = {};
  EXPECT_THROW(evaluate(m, task), DomainError);
}

TEST(Pretrain, ValidatesAndClampsTemperature) {
  auto m = DualEncoderModel<double>::create(tiny_config(), tiny_vocabulary(), 2);
  const auto pool = tiny_pool(4, 5);
  PairedDataset<double> data{pool.images, {}};
  for (std::size_t y : pool.labels) data.captions.push_back(make_prompt(m, tiny_classes[y]));
  PretrainConfig cfg;
  cfg.batch_size = 1;
  EXPECT_THROW(contrastive_pretrain(m, data, cfg), DomainError);
  cfg.batch_size = 13;
  EXPECT_THROW(contrastive_pretrain(m, data, cfg), DomainError);
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.min_tau = 0.5;
  const auto h = contrastive_pretrain(m, data, cfg);
  EXPECT_EQ(h.iterations(), 6u);
  EXPECT_GE(m.tau(), 0.5);
  m.for_each_parameter([](const Parameter<double>& p) { EXPECT_FALSE(p.trainable) << p.name; });
  for (const auto& s : h.steps) EXPECT_TRUE(std::isfinite(s.loss));
}
