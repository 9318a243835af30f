#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "../support/oracles.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/model.hpp"
#include "voxmae/optim.hpp"
#include "voxmae/rng.hpp"

using namespace voxmae;
using oracle::Big;

namespace {

ParameterSet<double> single(double value, int n = 1) {
  ParameterSet<double> p;
  Matrix<double> m(1, n);
  for (auto& x : m.storage()) x = value;
  p.arrays.emplace("w", m);
  return p;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = single(0.37, 4);
  auto state = AdamState<double>::zeros_for(p);
  const auto before = p.at("w").storage();
  adam_step(p, p.zeros_like(), state, 1e-3);
  EXPECT_EQ(p.at("w").storage(), before);
  EXPECT_EQ(state.t, 1);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  auto p = single(0.0, 3);
  auto g = p.zeros_like();
  g.at("w")(0, 0) = 2.5;
  g.at("w")(0, 1) = -1e-3;
  g.at("w")(0, 2) = 40.0;
  auto state = AdamState<double>::zeros_for(p);
  adam_step(p, g, state, 1e-3);
  EXPECT_NEAR(p.at("w")(0, 0), -1e-3, 1e-9);
  EXPECT_NEAR(p.at("w")(0, 1), 1e-3, 1e-8);
  EXPECT_NEAR(p.at("w")(0, 2), -1e-3, 1e-9);
}

TEST(Adam, FirstStepIsScaleEquivariant) {
  auto a = single(0.5, 2), b = single(0.5, 2);
  auto ga = a.zeros_like(), gb = b.zeros_like();
  ga.at("w")(0, 0) = 0.3;
  ga.at("w")(0, 1) = -0.7;
  gb.at("w")(0, 0) = 30.0;
  gb.at("w")(0, 1) = -70.0;
  auto sa = AdamState<double>::zeros_for(a), sb = AdamState<double>::zeros_for(b);
  adam_step(a, ga, sa, 1e-2);
  adam_step(b, gb, sb, 1e-2);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(a.at("w")(0, i), b.at("w")(0, i), 1e-9);
}

TEST(Adam, TwoStepsMatchHighPrecision) {
  const double w0 = 0.8, g = 0.123, lr = 1e-3;
  auto p = single(w0);
  auto grads = p.zeros_like();
  grads.at("w")(0, 0) = g;
  auto state = AdamState<double>::zeros_for(p);
  adam_step(p, grads, state, lr);
  adam_step(p, grads, state, lr);

  Big w = w0, m = 0, v = 0;
  const Big b1("0.9"), b2("0.999"), eps("1e-8"), G(g), LR(lr);
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * G;
    v = b2 * v + (1 - b2) * G * G;
    const Big mh = m / (1 - boost::multiprecision::pow(b1, t));
    const Big vh = v / (1 - boost::multiprecision::pow(b2, t));
    w -= LR * mh / (boost::multiprecision::sqrt(vh) + eps);
  }
  EXPECT_NEAR(p.at("w")(0, 0), static_cast<double>(w), 1e-12);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto p = single(1.0);
  auto grads = p.zeros_like();
  grads.at("w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  auto state = AdamState<double>::zeros_for(p);
  try {
    adam_step(p, grads, state, 1e-3);
    FAIL() << "NaN gradient accepted";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
}

TEST(Schedule, FinetuneExamples) {
  const auto s = ScheduleSpec::finetune_default();
  EXPECT_NEAR(lr_at(s, 5), 5e-5, 1e-18);
  EXPECT_EQ(lr_at(s, s.warmup_epochs), s.base_lr);
  EXPECT_NEAR(lr_at(s, s.total_epochs - 1), 1e-6, 1e-12);
  EXPECT_THROW(lr_at(s, s.total_epochs), InvalidArgument);
  EXPECT_THROW(lr_at(s, -1), InvalidArgument);
}

TEST(Schedule, MonotoneAfterWarmup) {
  const auto s = ScheduleSpec::pretrain_default();
  for (int e = 1; e < s.warmup_epochs; ++e) EXPECT_LT(lr_at(s, e - 1), lr_at(s, e));
  for (int e = s.warmup_epochs + 1; e < s.total_epochs; ++e) ASSERT_LE(lr_at(s, e), lr_at(s, e - 1));
  EXPECT_NEAR(lr_at(s, s.total_epochs - 1), s.final_lr, 1e-15);
}

TEST(Schedule, RejectsInvalidSpecs) {
  ScheduleSpec s;
  s.warmup_epochs = s.total_epochs + 1;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = ScheduleSpec{};
  s.final_lr = 2 * s.base_lr;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(LayerDecay, GeometricGroups) {
  const auto lrs = layerwise_lrs(1e-4, 0.75, 2);
  ASSERT_EQ(lrs.size(), 4u);
  EXPECT_NEAR(lrs[3], 1e-4, 1e-18);
  EXPECT_NEAR(lrs[2], 7.5e-5, 1e-18);
  EXPECT_NEAR(lrs[1], 5.625e-5, 1e-18);
  EXPECT_NEAR(lrs[0], 4.21875e-5, 1e-18);
  for (std::size_t g = 1; g < lrs.size(); ++g) EXPECT_NEAR(lrs[g - 1] / lrs[g], 0.75, 1e-15);
  for (double lr : layerwise_lrs(3e-4, 1.0, 5)) EXPECT_EQ(lr, 3e-4);
}

TEST(LayerDecay, ParameterGroups) {
  EXPECT_EQ(parameter_group("patch_embed.weight", 2), 0);
  EXPECT_EQ(parameter_group("cls_token", 2), 0);
  EXPECT_EQ(parameter_group("blocks.0.attn.qkv.weight", 2), 1);
  EXPECT_EQ(parameter_group("blocks.1.mlp.fc2.bias", 2), 2);
  EXPECT_EQ(parameter_group("norm.gain", 2), 3);
  EXPECT_EQ(parameter_group("head.fc.weight", 2), 3);
  EXPECT_EQ(parameter_group("decoder_pred.weight", 2), -1);
  const auto map = layerwise_lr_map(1e-4, 0.75, 2);
  EXPECT_NEAR(map("patch_embed.bias"), 4.21875e-5, 1e-18);
  EXPECT_NEAR(map("head.fc.bias"), 1e-4, 1e-18);
}

TEST(Bce, Examples) {
  Matrix<double> p(1, 1), y(1, 1);
  const std::vector<double> one{1.0}, four{4.0};
  p(0, 0) = 0.5;
  EXPECT_NEAR(weighted_bce(p, y, one), std::log(2.0), 1e-15);
  p(0, 0) = 0.8;
  y(0, 0) = 1.0;
  const double expected = static_cast<double>(-4 * boost::multiprecision::log(Big("0.8")));
  EXPECT_NEAR(weighted_bce(p, y, four), expected, 1e-14);
  EXPECT_NEAR(weighted_bce(p, y, four), 0.8926, 1e-4);
  p(0, 0) = 1.0 - 1e-12;
  EXPECT_LT(weighted_bce(p, y, one), 1e-11);
  p(0, 0) = 1.0;
  EXPECT_THROW(weighted_bce(p, y, one), InvalidArgument);
}

TEST(Bce, LogitsAgreeWithProbabilitiesAndStayFinite) {
  Rng rng(3);
  Matrix<double> z(6, 2), p(6, 2), y(6, 2);
  for (int i = 0; i < 12; ++i) {
    z[static_cast<std::size_t>(i)] = rng.uniform(-4, 4);
    p[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-z[static_cast<std::size_t>(i)]));
    y[static_cast<std::size_t>(i)] = rng.below(2);
  }
  const std::vector<double> w{2.0, 0.5};
  EXPECT_NEAR(weighted_bce_logits(z, y, w), weighted_bce(p, y, w), 1e-12);
  Matrix<double> big(1, 1), label(1, 1);
  big(0, 0) = -800.0;
  label(0, 0) = 1.0;
  const std::vector<double> one{1.0};
  EXPECT_NEAR(weighted_bce_logits(big, label, one), 800.0, 1e-9);
}

TEST(Bce, PositiveWeightsAreNegOverPos) {
  const std::vector<std::vector<std::uint8_t>> labels{{1, 0}, {0, 0}, {0, 0}, {1, 0}, {0, 0}};
  const auto w = pos_weights(labels, 2);
  EXPECT_DOUBLE_EQ(w[0], 1.5);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
}

TEST(Accumulate, IdentityAndAverage) {
  auto a = single(1.0, 2), b = single(3.0, 2);
  const std::vector<GradientSet<double>> one{a};
  EXPECT_EQ(accumulate<double>(one, 1).at("w").storage(), a.at("w").storage());
  const std::vector<GradientSet<double>> two{a, b};
  const auto avg = accumulate<double>(two, 2);
  for (double x : avg.at("w").storage()) EXPECT_EQ(x, 2.0);
  auto c = single(1.0, 3);
  const std::vector<GradientSet<double>> bad{a, c};
  EXPECT_THROW(accumulate<double>(bad, 2), InvalidArgument);
}

TEST(Accumulate, MicrobatchesMatchFullBatch) {
  // Mean-reduced MAE loss over a batch of 12 vs 3 microbatches of 4 (float).
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 5);
  std::vector<PatchSequence> seqs;
  std::vector<MaskPlan> plans;
  Rng rng(6);
  for (int i = 0; i < 12; ++i) {
    Volume v(cfg.input_dims, {1, 1, 1}, Unit::Normalized);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
    seqs.push_back(patchify(v, cfg.patch_size));
    plans.push_back(random_mask(seqs.back().n_tokens(), cfg.mask_ratio, 100 + i));
  }
  std::vector<GradientSet<float>> singles;
  for (int i = 0; i < 12; ++i) singles.push_back(mae_forward_backward(params, cfg, seqs[static_cast<std::size_t>(i)], plans[static_cast<std::size_t>(i)]).grads);
  const auto full = accumulate<float>(singles, 12);

  GradientAccumulator<float> acc(3);
  for (int m = 0; m < 3; ++m) {
    const std::span<const GradientSet<float>> part(singles.data() + 4 * m, 4);
    acc.add(accumulate<float>(part, 4));
  }
  ASSERT_TRUE(acc.ready());
  const auto accumulated = acc.take();
  EXPECT_EQ(acc.count(), 0);
  double worst = 0.0;
  for (const auto& [name, m] : full.arrays) {
    const auto& o = accumulated.at(name);
    for (std::size_t i = 0; i < m.size(); ++i)
      worst = std::max(worst, std::abs(double(m[i]) - double(o[i])) / std::max(1e-3, std::abs(double(m[i]))));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(ClipGradNorm, ScalesDown) {
  auto g = single(3.0, 1);
  g.arrays.emplace("v", Matrix<double>(1, 1));
  g.at("v")(0, 0) = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.at("w")(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(g.at("v")(0, 0), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 10.0), 1.0);
}
