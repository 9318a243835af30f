#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "../support/gradcheck.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/eval_stats.hpp"
#include "voxmae/finetune.hpp"
#include "voxmae/pretrain.hpp"

using namespace voxmae;
namespace fs = std::filesystem;

namespace {

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.patch_size = 4;
  c.input_dims = {16, 16, 16};
  c.embed_dim = 24;
  c.depth = 2;
  c.heads = 2;
  c.decoder_dim = 12;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  return c;
}

SyntheticCorpus corpus_for(const ModelConfig& cfg, int n, std::uint64_t seed) {
  SyntheticSpec s;
  s.dims = cfg.input_dims;
  s.n_volumes = n;
  s.seed = seed;
  s.lesion_radius_lo = 2.0;
  s.lesion_radius_hi = 3.0;
  return generate_synthetic(s);
}

FinetuneConfig quick_config(HeadKind kind, int epochs) {
  FinetuneConfig f;
  f.model = ModelConfig::tiny();
  f.head = {kind, 1};
  f.schedule.base_lr = 1e-3;
  f.schedule.warmup_epochs = 1;
  f.schedule.total_epochs = epochs;
  f.max_epochs = epochs;
  f.augmentation = AugmentationSpec::identity();
  f.patience = 0;
  return f;
}

}  // namespace

TEST(Features, LengthIsTwiceEmbedDim) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 1, false);
  const auto c = corpus_for(cfg, 1, 2);
  EXPECT_EQ(extract_features(params, cfg, c.volumes[0]).size(), static_cast<std::size_t>(2 * cfg.embed_dim));
}

TEST(Features, ClassTokenThenPooledTokens) {
  ad::Tape<double> tape;
  Matrix<double> latent(5, 3);
  for (int c = 0; c < 3; ++c) {
    latent(0, c) = 10.0 + c;
    for (int r = 1; r < 5; ++r) latent(r, c) = -2.0 * c + 0.5;
  }
  const auto f = tape.value(pooled_features(tape, tape.constant(latent)));
  ASSERT_EQ(f.cols(), 6);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(f(0, c), 10.0 + c);
    EXPECT_DOUBLE_EQ(f(0, 3 + c), -2.0 * c + 0.5);
  }
}

TEST(Head, ZeroWeightsGiveOneHalf) {
  const auto cfg = ModelConfig::tiny();
  Classifier c = make_classifier(cfg, {HeadKind::Linear, 2}, nullptr, 3);
  for (auto& [name, m] : c.params.arrays)
    if (name.rfind("head.", 0) == 0)
      for (auto& x : m.storage()) x = 0.0f;
  const auto corpus = corpus_for(cfg, 1, 4);
  for (double p : predict(c, corpus.volumes[0])) EXPECT_EQ(p, 0.5);
}

TEST(Head, ParseAndValidate) {
  EXPECT_EQ(parse_head_kind("linear"), HeadKind::Linear);
  EXPECT_EQ(parse_head_kind(to_string(HeadKind::Mlp64)), HeadKind::Mlp64);
  EXPECT_THROW(parse_head_kind("conv"), InvalidArgument);
  EXPECT_THROW((HeadConfig{HeadKind::Linear, 0}.validate()), InvalidArgument);
}

// Sampled central differences for the classification loss: arrays with at
// most 200 entries are checked in full, larger ones on 20 seeded entries.
class ClassificationGradients : public ::testing::TestWithParam<HeadKind> {};

TEST_P(ClassificationGradients, MatchFiniteDifferences) {
  const auto cfg = gradcheck_config();
  const HeadConfig head{GetParam(), 2};
  auto params = init_parameters<double>(cfg, 5, false);
  for (auto& [name, m] : init_head<double>(head, 2 * cfg.embed_dim, 6).arrays) params.arrays.emplace(name, m);
  const auto buffers = init_head_buffers(head).cast<double>();
  const auto corpus = corpus_for(cfg, 4, 7);
  const std::vector<const Volume*> batch{&corpus.volumes[0], &corpus.volumes[1], &corpus.volumes[2], &corpus.volumes[3]};
  Matrix<double> labels(4, 2);
  for (int r = 0; r < 4; ++r) {
    labels(r, 0) = r % 2;
    labels(r, 1) = r / 2;
  }
  const std::vector<double> w{1.5, 0.7};
  const auto step = classifier_forward_backward<double>(params, buffers, cfg, head, batch, labels, w, true);
  const auto errors = oracle::finite_difference_check(
      params, step.grads,
      [&](const ParameterSet<double>& p) { return classifier_forward_backward<double>(p, buffers, cfg, head, batch, labels, w, true).loss; },
      1e-5, 200, 20, 8);
  for (const auto& [group, e] : errors) EXPECT_LE(e.max_rel, 1e-6) << group << " worst " << e.worst;
}

INSTANTIATE_TEST_SUITE_P(Heads, ClassificationGradients, ::testing::Values(HeadKind::Linear, HeadKind::Mlp64),
                         [](const auto& info) { return to_string(info.param); });

TEST(LabelSubsample, StratifiedCounts) {
  DatasetManifest m;
  m.class_names = {"a"};
  for (int i = 0; i < 100; ++i) m.records.push_back({"v" + std::to_string(i), {static_cast<std::uint8_t>(i % 10 == 0)}, std::nullopt});
  const auto s = subsample_labels(m, 0.1, 3);
  ASSERT_EQ(s.indices.size(), 10u);
  EXPECT_EQ(m.subset(s.indices).positive_counts()[0], 1);
  EXPECT_EQ(subsample_labels(m, 1.0, 0).indices.size(), 100u);
  EXPECT_EQ(subsample_labels(m, 0.1, 3).indices, s.indices);
  EXPECT_THROW(subsample_labels(m, 0.0, 0), InvalidArgument);
  EXPECT_THROW(subsample_labels(m, 1.5, 0), InvalidArgument);
}

TEST(EarlyStopping, ArgminExample) {
  EXPECT_EQ(argmin_epoch({0.9, 0.7, 0.8, 0.6, 0.65}), 4);
  EXPECT_EQ(argmin_epoch({0.5, 0.5}), 1);
}

TEST(Finetune, BestEpochIsValidationArgminAndRestored) {
  const auto corpus = Dataset::from_corpus(corpus_for(ModelConfig::tiny(), 16, 9));
  std::vector<int> tr, va;
  for (int i = 0; i < 16; ++i) (i < 10 ? tr : va).push_back(i);
  const auto train = corpus.subset(tr), val = corpus.subset(va);
  auto cfg = quick_config(HeadKind::Linear, 4);
  cfg.microbatch = 2;
  cfg.accumulation_steps = 2;
  const auto r = run_finetune(cfg, nullptr, train, val, &val);
  ASSERT_EQ(r.epochs.size(), 4u);
  EXPECT_EQ(r.best_epoch, argmin_epoch(r.val_losses()));
  for (const auto& e : r.epochs) EXPECT_TRUE(e.test_auroc.has_value());
  const auto train_labels = label_rows(train.manifest);
  EXPECT_EQ(r.pos_weight, pos_weights(train_labels, 1));

  // The returned classifier reproduces the best epoch's validation AUROC.
  const auto again = run_finetune(cfg, nullptr, train, val, &val);
  EXPECT_EQ(again.best.params.fingerprint(), r.best.params.fingerprint());
  const auto scores = predict_logits_dataset(r.best, val);
  const auto auc = evaluate_metric("AUROC", scores, label_rows(val.manifest)).mean;
  EXPECT_DOUBLE_EQ(auc, *r.epochs[static_cast<std::size_t>(r.best_epoch - 1)].test_auroc);
}

TEST(Finetune, PatienceStopsEarly) {
  const auto corpus = Dataset::from_corpus(corpus_for(ModelConfig::tiny(), 8, 10));
  const auto train = corpus.subset({0, 1, 2, 3, 4}), val = corpus.subset({5, 6, 7});
  auto cfg = quick_config(HeadKind::Linear, 30);
  cfg.schedule.base_lr = 0.0;
  cfg.schedule.final_lr = 0.0;
  cfg.schedule.warmup_epochs = 0;
  cfg.patience = 2;
  const auto r = run_finetune(cfg, nullptr, train, val);
  EXPECT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(r.best_epoch, 1);
}

TEST(Finetune, UsesPretrainedEncoder) {
  PretrainConfig pc;
  pc.model = ModelConfig::tiny();
  pc.schedule.total_epochs = 1;
  pc.schedule.warmup_epochs = 0;
  const auto corpus = Dataset::from_corpus(corpus_for(pc.model, 4, 11));
  const auto ckpt = run_pretraining(pc, corpus);
  const auto c = make_classifier(pc.model, {HeadKind::Linear, 1}, &ckpt, 0);
  EXPECT_EQ(c.params.at("blocks.0.attn.qkv.weight").storage(), ckpt.params.at("blocks.0.attn.qkv.weight").storage());
  for (const auto& [name, m] : c.params.arrays) EXPECT_FALSE(is_decoder_parameter(name)) << name;

  auto other = pc.model;
  other.depth = 1;
  EXPECT_THROW(make_classifier(other, {HeadKind::Linear, 1}, &ckpt, 0), InvalidArgument);
}

TEST(Finetune, ClassifierCheckpointRoundTrip) {
  const auto dir = fs::temp_directory_path() / "voxmae_classifier_ckpt";
  fs::create_directories(dir);
  const auto c = make_classifier(ModelConfig::tiny(), {HeadKind::Mlp64, 2}, nullptr, 12);
  save_checkpoint(classifier_checkpoint(c), dir / "c.vmck");
  const auto back = classifier_from_checkpoint(load_checkpoint(dir / "c.vmck"));
  EXPECT_EQ(back.head.kind, HeadKind::Mlp64);
  EXPECT_EQ(back.head.class_count, 2);
  EXPECT_EQ(back.params.fingerprint(), c.params.fingerprint());
  EXPECT_EQ(back.buffers.fingerprint(), c.buffers.fingerprint());
}

TEST(Probe, LeavesEncoderUntouchedAndFitsSeparableData) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 13, false);
  const auto before = params.fingerprint();
  const auto corpus = Dataset::from_corpus(corpus_for(cfg, 6, 14));
  const auto table = extract_feature_table(params, cfg, corpus);
  EXPECT_EQ(params.fingerprint(), before);

  Matrix<float> x(40, 4);
  std::vector<std::vector<std::uint8_t>> y;
  Rng rng(15);
  for (int r = 0; r < 40; ++r) {
    const bool pos = r % 2;
    for (int c = 0; c < 4; ++c) x(r, c) = static_cast<float>(rng.normal() * 0.3 + (pos ? 1.0 : -1.0) * (c == 0));
    y.push_back({static_cast<std::uint8_t>(pos)});
  }
  ProbeConfig pc;
  pc.epochs = 100;
  const auto probe = train_frozen_probe(x, y, pc);
  const auto p = predict_probe(probe, x);
  int correct = 0;
  for (int r = 0; r < 40; ++r) correct += (p(r, 0) > 0.5) == static_cast<bool>(y[static_cast<std::size_t>(r)][0]);
  EXPECT_EQ(correct, 40);
  EXPECT_LT(probe.loss_history.back(), probe.loss_history.front());
  EXPECT_THROW(predict_probe(probe, table), InvalidArgument);
}

TEST(Probe, FeatureTableRoundTrip) {
  const auto dir = fs::temp_directory_path() / "voxmae_features";
  fs::create_directories(dir);
  Matrix<float> m(3, 5);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(i) * 0.25f - 1.0f;
  write_feature_table(m, dir / "f.f32");
  const auto back = read_feature_table(dir / "f.f32");
  EXPECT_EQ(back.rows(), 3);
  EXPECT_EQ(back.storage(), m.storage());
}
