#include <gtest/gtest.h>

#include <cmath>

#include "instances.hpp"
#include "normlab/trainer.hpp"

namespace normlab {
namespace {

using testing::tiny_config;

TEST(LrSchedule, WarmupEndpointsAndDecay) {
  TrainConfig c;
  c.lr = 5e-4;
  c.warmup_updates = 4000;
  c.warmup_init_lr = 1e-7;
  EXPECT_DOUBLE_EQ(lr_at(4000, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(16000, c), 2.5e-4);
  EXPECT_DOUBLE_EQ(lr_at(1, c), 1e-7 + (5e-4 - 1e-7) / 4000);
  EXPECT_LT(lr_at(100, c), lr_at(101, c));
  EXPECT_THROW(lr_at(0, c), ContractError);
}

TEST(LrSchedule, NoWarmupIsConstant) {
  TrainConfig c;
  c.warmup_updates = 0;
  c.lr = 1e-3;
  EXPECT_EQ(lr_at(1, c), 1e-3);
  EXPECT_EQ(lr_at(100000, c), 1e-3);
}

TEST(Adam, ZeroGradientOnlyDecaysMatrices) {
  Tensor w = Tensor::matrix(1, 2, {1.0, -2.0});
  Tensor b = Tensor::vector({3.0});
  TrainConfig c;
  c.weight_decay = 0.01;
  AdamState s;
  adam_step({&w, &b}, s, 0.1, c);
  EXPECT_DOUBLE_EQ(w.data[0], 1.0 * (1 - 0.1 * 0.01));
  EXPECT_DOUBLE_EQ(w.data[1], -2.0 * (1 - 0.1 * 0.01));
  EXPECT_EQ(b.data[0], 3.0);
}

TEST(Adam, ConstantGradientStepsApproachLr) {
  Tensor p = Tensor::vector({0.0, 0.0});
  TrainConfig c;
  c.weight_decay = 0.0;
  AdamState s;
  double last_delta = 0.0;
  for (int i = 0; i < 500; ++i) {
    p.grad = std::vector<double>{0.3, -7.0};
    const double before = p.data[1];
    adam_step({&p}, s, 1e-3, c);
    last_delta = p.data[1] - before;
  }
  EXPECT_NEAR(last_delta, 1e-3, 1e-9);
  EXPECT_LT(p.data[0], 0.0);
}

TEST(Adam, ThreeStepScalarTrace) {
  // Scalar Adam written out by hand.
  const double lr = 0.01, b1 = 0.9, b2 = 0.98, eps = 1e-8, wd = 0.0;
  const double gs[3] = {0.5, -1.5, 2.0};
  double x = 1.0, m = 0.0, v = 0.0;
  Tensor p = Tensor::vector({1.0});
  TrainConfig c;
  c.adam_beta1 = b1;
  c.adam_beta2 = b2;
  c.adam_eps = eps;
  c.weight_decay = wd;
  AdamState s;
  for (int k = 1; k <= 3; ++k) {
    const double g = gs[k - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, k));
    const double vh = v / (1 - std::pow(b2, k));
    x -= lr * mh / (std::sqrt(vh) + eps);
    p.grad = std::vector<double>{g};
    adam_step({&p}, s, lr, c);
    EXPECT_NEAR(p.data[0], x, 1e-12) << "step " << k;
  }
}

TEST(Adam, ShapeMismatch) {
  Tensor a = Tensor::vector({1.0, 2.0});
  Tensor b = Tensor::vector({1.0});
  AdamState s;
  TrainConfig c;
  adam_step({&a}, s, 0.1, c);
  EXPECT_THROW(adam_step({&b}, s, 0.1, c), ContractError);
  s.m[0].resize(5);
  EXPECT_THROW(adam_step({&a}, s, 0.1, c), ContractError);
}

TEST(GradClip, RescalesToMaxNorm) {
  Tensor a = Tensor::vector({3.0});
  a.grad = std::vector<double>{3.0};
  Tensor b = Tensor::vector({0.0});
  b.grad = std::vector<double>{4.0};
  EXPECT_DOUBLE_EQ(clip_grad_norm({&a, &b}, 1.0), 5.0);
  EXPECT_NEAR(grad_norm({&a, &b}), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(clip_grad_norm({&a, &b}, 0.0), grad_norm({&a, &b}));
}

TEST(Task, CopyAndReverseLayout) {
  TaskSpec t;
  t.min_len = 3;
  t.max_len = 3;
  Batch b = sample_batch(t, 5, 8);
  ASSERT_GE(b.target_tokens(), 8u);
  for (std::size_t i = 0; i < b.size; ++i) {
    EXPECT_EQ(b.tgt_in[i * 4], kBosId);
    EXPECT_EQ(b.tgt_out[i * 4 + 3], kEosId);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(b.tgt_out[i * 4 + k], b.src[i * 3 + k]);
      EXPECT_EQ(b.tgt_in[i * 4 + k + 1], b.src[i * 3 + k]);
      EXPECT_GE(b.src[i * 3 + k], kReservedTokens);
      EXPECT_LT(b.src[i * 3 + k], 16);
    }
  }
  t.kind = TaskKind::kReverse;
  Batch r = sample_batch(t, 5, 8);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(r.tgt_out[k], r.src[2 - k]);
}

TEST(Task, DeterministicPerStep) {
  TaskSpec t;
  EXPECT_EQ(sample_batch(t, 3, 64).src, sample_batch(t, 3, 64).src);
  EXPECT_NE(sample_batch(t, 3, 64).src, sample_batch(t, 4, 64).src);
  t.samples = 5;
  Batch pooled = sample_batch(t, 9, 200);
  EXPECT_GE(pooled.size, 5u);
}

TEST(Task, Validation) {
  TaskSpec t;
  t.vocab_size = 3;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TaskSpec{};
  t.min_len = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_THROW(parse_task_kind("sort"), ConfigError);
}

ModelConfig small_model(const NormStrategy& s) {
  ModelConfig c = tiny_config(s, 16, 16);
  c.max_len = 16;
  c.dropout = 0.1;
  return c;
}

TrainConfig short_run(std::int64_t steps) {
  TrainConfig c;
  c.lr = 2e-3;
  c.warmup_updates = 10;
  c.max_updates = steps;
  c.batch_size_tokens = 32;
  return c;
}

TEST(Train, DeterministicRecordsAndChecksum) {
  auto a = train(small_model(NormStrategy::branch_norm(20)), short_run(25), TaskSpec{});
  auto b = train(small_model(NormStrategy::branch_norm(20)), short_run(25), TaskSpec{});
  ASSERT_EQ(a.records.size(), 25u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].loss, b.records[i].loss);
    EXPECT_EQ(a.records[i].grad_norm, b.records[i].grad_norm);
  }
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(b.model));
  EXPECT_FALSE(a.diverged);
}

TEST(Train, AlphaFollowsSchedule) {
  auto s = NormStrategy::branch_norm(20, {ScheduleVariant::kSigmoid});
  auto r = train(small_model(s), short_run(25), TaskSpec{});
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.alpha, branchnorm_alpha(rec.step, 20, {ScheduleVariant::kSigmoid}));
  }
  EXPECT_EQ(r.records.back().alpha, 1.0);
}

TEST(Train, LossDecreasesOnCopy) {
  auto r = train(small_model(NormStrategy::pre_ln()), short_run(150), TaskSpec{});
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += r.records[static_cast<std::size_t>(i)].loss;
    tail += r.records[r.records.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(tail, head);
}

TEST(Train, NanStopsCleanly) {
  TrainConfig c = short_run(50);
  c.lr = 1e308;
  c.warmup_updates = 0;
  auto r = train(small_model(NormStrategy::post_ln()), c, TaskSpec{});
  EXPECT_TRUE(r.diverged);
  EXPECT_TRUE(r.records.back().diverged);
  EXPECT_LT(r.steps, 50);
}

TEST(Train, BlowupAfterGraceIsDivergence) {
  TrainConfig c = short_run(30);
  c.divergence.grace_steps = 5;
  c.divergence.loss_blowup_factor = 1e-3;  // any loss counts as a blow-up
  auto r = train(small_model(NormStrategy::post_ln()), c, TaskSpec{});
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.steps, 6);
}

TEST(Train, RejectsMismatchedTask) {
  TaskSpec t;
  t.vocab_size = 40;
  EXPECT_THROW(train(small_model(NormStrategy::post_ln()), short_run(2), t), ConfigError);
  TrainConfig bad = short_run(2);
  bad.adam_beta2 = 1.0;
  EXPECT_THROW(train(small_model(NormStrategy::post_ln()), bad, TaskSpec{}), ConfigError);
}

TEST(Sweep, EmptyStrategyDimensionExpandsToAll) {
  auto cells = expand_grid(SweepGrid{}, small_model(NormStrategy::post_ln()), short_run(1));
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[3].strategy, NormKind::kBranchNorm);
}

TEST(Sweep, TGridRowsAndFailures) {
  SweepGrid g;
  g.strategies = {NormKind::kBranchNorm};
  g.max_norm_steps = {100, 400, 4000, 20000};
  auto rows = sweep(g, small_model(NormStrategy::branch_norm(10)), short_run(3), TaskSpec{}, 2);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[2].cell.max_norm_step, 4000);
  std::string csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "strategy,depth,T,warmup,lr,final_loss,diverged,steps,error");

  g.depths = {1, 0};
  g.max_norm_steps = {100};
  rows = sweep(g, small_model(NormStrategy::branch_norm(10)), short_run(3), TaskSpec{});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].error.empty());
  EXPECT_FALSE(rows[1].error.empty());
}

TEST(Sweep, DeepNormCoefficientsFollowDepth) {
  SweepCell cell{NormKind::kDeepNorm, 4, 4000, 0, 1e-3};
  auto [mc, tc] = cell_configs(cell, small_model(NormStrategy::post_ln()), short_run(1));
  EXPECT_EQ(mc.encoder_layers, 4);
  EXPECT_EQ(mc.strategy.deepnorm.alpha_decoder, deepnorm_coeffs(4, 4).alpha_decoder);
  EXPECT_EQ(tc.lr, 1e-3);
}

TEST(Sweep, ParallelMatchesSerial) {
  SweepGrid g;
  g.strategies = {NormKind::kPostLN, NormKind::kBranchNorm};
  auto serial = sweep(g, small_model(NormStrategy::post_ln()), short_run(4), TaskSpec{}, 1);
  auto parallel = sweep(g, small_model(NormStrategy::post_ln()), short_run(4), TaskSpec{}, 3);
  EXPECT_EQ(sweep_csv(serial), sweep_csv(parallel));
}

}  // namespace
}  // namespace normlab
