#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "../support/gradcheck.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/model.hpp"
#include "voxmae/rng.hpp"

using namespace voxmae;

namespace {

Volume random_volume(Extents dims, std::uint64_t seed) {
  Volume v(dims, {1.0f, 1.0f, 1.0f}, Unit::Normalized);
  Rng rng(seed);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  return v;
}

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

}  // namespace

TEST(Patchify, Counting) {
  const auto s = patchify(random_volume({32, 32, 32}, 1), 16);
  EXPECT_EQ(s.n_tokens(), 8);
  EXPECT_EQ(s.tokens.cols(), 4096);
  EXPECT_EQ(s.grid, (Extents{2, 2, 2}));
}

TEST(Patchify, ConstantVolumeGivesConstantTokens) {
  const auto s = patchify(Volume({16, 8, 8}, {1, 1, 1}, Unit::Normalized, 0.3f), 4);
  for (float x : s.tokens.storage()) ASSERT_EQ(x, 0.3f);
}

TEST(Patchify, RoundTripProperty) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const int p = 1 + static_cast<int>(rng.below(4));
    const Extents d{p * (1 + static_cast<int>(rng.below(3))), p * (1 + static_cast<int>(rng.below(3))), p * (1 + static_cast<int>(rng.below(3)))};
    const auto v = random_volume(d, 100 + i);
    ASSERT_EQ(unpatchify(patchify(v, p)), v);
  }
}

TEST(Patchify, IndivisibleDimsRejected) {
  EXPECT_THROW(patchify(random_volume({10, 8, 8}, 3), 4), InvalidArgument);
}

TEST(Unpatchify, SingleTokenAndOrderSensitivity) {
  const auto v = random_volume({4, 4, 4}, 4);
  const auto s = patchify(v, 4);
  ASSERT_EQ(s.n_tokens(), 1);
  EXPECT_EQ(unpatchify(s).voxels, v.voxels);

  const auto two = patchify(random_volume({8, 4, 4}, 5), 4);
  auto swapped = two;
  for (int c = 0; c < two.tokens.cols(); ++c) std::swap(swapped.tokens(0, c), swapped.tokens(1, c));
  EXPECT_NE(unpatchify(swapped), unpatchify(two));

  auto bad = two;
  bad.tokens = Matrix<float>(2, 63);
  EXPECT_THROW(unpatchify(bad), InvalidArgument);
}

TEST(Posembed, OriginIsSinZeroCosOne) {
  const int dim = 48, block = dim / 3;
  const auto t = posembed_3d({4, 4, 4}, dim);
  for (int a = 0; a < 3; ++a)
    for (int i = 0; i < block; ++i) EXPECT_EQ(t(0, a * block + i), i < block / 2 ? 0.0 : 1.0);
}

TEST(Posembed, RowsDistinctAndBounded) {
  const auto t = posembed_3d({8, 8, 8}, 48);
  ASSERT_EQ(t.rows(), 512);
  for (double x : t.storage()) ASSERT_TRUE(x >= -1.0 && x <= 1.0);
  for (int i = 0; i < t.rows(); ++i)
    for (int j = i + 1; j < t.rows(); ++j) {
      double d = 0.0;
      for (int c = 0; c < t.cols(); ++c) d = std::max(d, std::abs(t(i, c) - t(j, c)));
      ASSERT_GT(d, 1e-9) << i << " vs " << j;
    }
}

TEST(Posembed, RequiresDimDivisibleBySix) {
  EXPECT_THROW(posembed_3d({2, 2, 2}, 50), InvalidArgument);
  const auto padded = padded_posembed<double>({2, 2, 2}, 50);
  for (int r = 0; r < padded.rows(); ++r) {
    EXPECT_EQ(padded(r, 48), 0.0);
    EXPECT_EQ(padded(r, 49), 0.0);
  }
}

TEST(Mask, VisibleCount) {
  const auto p = random_mask(4096, 0.75, 1);
  EXPECT_EQ(p.n_visible, 1024);
  EXPECT_EQ(std::count(p.visible.begin(), p.visible.end(), 1), 1024);
}

TEST(Mask, PermutationProperty) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto p = random_mask(64 + static_cast<int>(s), 0.75, s);
    auto sorted = p.shuffle;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> iota(sorted.size());
    std::iota(iota.begin(), iota.end(), 0);
    ASSERT_EQ(sorted, iota);
    for (int i = 0; i < p.n_tokens; ++i) ASSERT_EQ(p.restore[static_cast<std::size_t>(p.shuffle[static_cast<std::size_t>(i)])], i);
  }
}

TEST(Mask, SeedsDiffer) {
  EXPECT_EQ(random_mask(64, 0.75, 3), random_mask(64, 0.75, 3));
  for (std::uint64_t s = 0; s < 100; ++s) ASSERT_NE(random_mask(64, 0.75, 2 * s).shuffle, random_mask(64, 0.75, 2 * s + 1).shuffle);
}

TEST(Mask, DegenerateRatiosRejected) {
  EXPECT_THROW(random_mask(4, 0.99, 0), InvalidArgument);
  EXPECT_THROW(random_mask(4, 0.0, 0), InvalidArgument);
  EXPECT_THROW(random_mask(1, 0.5, 0), InvalidArgument);
}

TEST(Encoder, RowCountsAndDeterminism) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 1);
  const auto seq = patchify(random_volume(cfg.input_dims, 2), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 3);
  const auto a = encode(params, cfg, seq, &plan);
  EXPECT_EQ(a.rows.rows(), 1 + plan.n_visible);
  EXPECT_EQ(a.rows.cols(), cfg.embed_dim);
  EXPECT_EQ(encode(params, cfg, seq, nullptr).rows.rows(), 1 + seq.n_tokens());
  EXPECT_EQ(encode(params, cfg, seq, &plan).rows.storage(), a.rows.storage());
}

TEST(Encoder, AttentionRowsSumToOne) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 4);
  const auto seq = patchify(random_volume(cfg.input_dims, 5), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 6);
  Instrumentation<float> instr;
  instr.capture_attention = true;
  const auto latent = encode(params, cfg, seq, &plan, &instr);
  decode(params, cfg, latent, &instr);
  ASSERT_EQ(instr.encoder_attention.size(), static_cast<std::size_t>(cfg.depth));
  ASSERT_EQ(instr.decoder_attention.size(), static_cast<std::size_t>(cfg.decoder_depth));
  for (const auto* set : {&instr.encoder_attention, &instr.decoder_attention})
    for (const auto& block : *set)
      for (const auto& head : block)
        for (int r = 0; r < head.rows(); ++r) {
          double s = 0.0;
          for (int c = 0; c < head.cols(); ++c) s += head(r, c);
          ASSERT_NEAR(s, 1.0, 1e-5);
        }
}

TEST(Decoder, ShapeAndSigmoidRange) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 7);
  const auto seq = patchify(random_volume(cfg.input_dims, 8), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 9);
  const auto recon = decode(params, cfg, encode(params, cfg, seq, &plan));
  EXPECT_EQ(recon.n_tokens(), seq.n_tokens());
  EXPECT_EQ(recon.tokens.cols(), cfg.patch_volume());
  for (float x : recon.tokens.storage()) ASSERT_TRUE(x > 0.0f && x < 1.0f);
}

TEST(Decoder, RequiresMaskPlan) {
  const auto cfg = ModelConfig::tiny();
  const auto params = init_parameters<float>(cfg, 7);
  const auto seq = patchify(random_volume(cfg.input_dims, 8), cfg.patch_size);
  EXPECT_THROW(decode(params, cfg, encode(params, cfg, seq, nullptr)), InvalidArgument);
}

TEST(Decoder, UnshuffleFollowsRestore) {
  // Tag the mask token with a value the projected rows cannot take: with a
  // zero encoder-to-decoder projection and bias 0 those rows are all zero.
  const auto cfg = ModelConfig::tiny();
  auto params = init_parameters<double>(cfg, 10);
  for (auto& x : params.at("decoder_embed.weight").storage()) x = 0.0;
  for (auto& x : params.at("mask_token").storage()) x = 7.0;
  const auto seq = patchify(random_volume(cfg.input_dims, 11), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 12);
  Instrumentation<double> instr;
  decode(params, cfg, encode(params, cfg, seq, &plan), &instr);
  ASSERT_EQ(instr.decoder_input.rows(), 1 + seq.n_tokens());
  for (int t = 0; t < seq.n_tokens(); ++t) {
    const double v = instr.decoder_input(1 + t, 0);
    ASSERT_EQ(v, plan.visible[static_cast<std::size_t>(t)] ? 0.0 : 7.0) << "token " << t;
  }
}

TEST(MaeLoss, Examples) {
  const auto target = patchify(random_volume({8, 8, 8}, 13), 4);
  const auto plan = random_mask(target.n_tokens(), 0.75, 14);
  EXPECT_EQ(mae_loss(target, target, plan), 0.0);
  auto shifted = target;
  for (auto& x : shifted.tokens.storage()) x += 0.1f;
  EXPECT_NEAR(mae_loss(shifted, target, plan), 0.01, 1e-6);

  auto visible_noise = target;
  for (int t : plan.visible_tokens())
    for (int c = 0; c < target.tokens.cols(); ++c) visible_noise.tokens(t, c) = 0.9f;
  EXPECT_EQ(mae_loss(visible_noise, target, plan), 0.0);
  EXPECT_GT(mae_loss(visible_noise, target, plan, false), 0.0);
}

TEST(ParameterCount, PatchEmbedArithmetic) {
  const ModelConfig cfg;
  std::int64_t n = 0;
  for (const auto& s : parameter_shapes(cfg, false))
    if (s.name.rfind("patch_embed.", 0) == 0) n += static_cast<std::int64_t>(s.rows) * s.cols;
  EXPECT_EQ(n, 4195328);
}

TEST(ParameterCount, DefaultEncoderNearPaper) {
  const auto n = count_parameters(ModelConfig{}, false);
  EXPECT_GE(n, 280'000'000);
  EXPECT_LE(n, 345'000'000);
}

TEST(ParameterCount, MatchesAllocationAndDepthIsAdditive) {
  auto cfg = ModelConfig::tiny();
  EXPECT_EQ(count_parameters(cfg, true), static_cast<std::int64_t>(init_parameters<float>(cfg, 0, true).scalar_count()));
  EXPECT_EQ(count_parameters(cfg, false), static_cast<std::int64_t>(init_parameters<float>(cfg, 0, false).scalar_count()));
  const auto base = count_parameters(cfg, false);
  cfg.depth = 1;
  const auto one = count_parameters(cfg, false);
  const auto per_block = base - one;
  cfg.depth = 4;
  EXPECT_EQ(count_parameters(cfg, false), one + 3 * per_block);
}

TEST(Init, ShapesAndStatistics) {
  const auto cfg = ModelConfig::tiny();
  const auto p = init_parameters<double>(cfg, 15);
  for (const auto& s : parameter_shapes(cfg, true)) {
    const auto& m = p.at(s.name);
    ASSERT_EQ(m.rows(), s.rows) << s.name;
    ASSERT_EQ(m.cols(), s.cols) << s.name;
  }
  for (double x : p.at("blocks.0.norm1.gain").storage()) EXPECT_EQ(x, 1.0);
  for (double x : p.at("patch_embed.bias").storage()) EXPECT_EQ(x, 0.0);
  for (double x : p.at("patch_embed.weight").storage()) ASSERT_LE(std::abs(x), 0.04 + 1e-12);
}

TEST(Config, SerializeParseHash) {
  const auto cfg = ModelConfig::tiny();
  EXPECT_EQ(ModelConfig::parse(cfg.serialize()), cfg);
  auto other = cfg;
  other.depth = 3;
  EXPECT_NE(other.hash(), cfg.hash());
  other = cfg;
  other.embed_dim = 50;
  EXPECT_THROW(other.validate(), InvalidArgument);
}

// Every MAE parameter of the dim-24 config against central differences.
TEST(Gradients, MaeMatchesFiniteDifferences) {
  const auto cfg = gradcheck_config();
  const auto params = init_parameters<double>(cfg, 21);
  const auto seq = patchify(random_volume(cfg.input_dims, 22), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 23);
  const auto step = mae_forward_backward(params, cfg, seq, plan);
  const auto errors = oracle::finite_difference_check(params, step.grads, [&](const ParameterSet<double>& p) {
    return mae_forward_backward(p, cfg, seq, plan).loss;
  });
  for (const auto& [group, e] : errors) EXPECT_LE(e.max_rel, 1e-6) << group << " worst " << e.worst;
  EXPECT_EQ(errors.size() > 20, true);
}

TEST(Gradients, OneDimensionalHandCase) {
  ad::Tape<double> tape;
  Matrix<double> w(1, 1), x(1, 1), y(1, 1);
  w(0, 0) = 1.0;
  x(0, 0) = 1.0;
  const auto wv = tape.parameter(w);
  tape.backward(ad::mse(tape, ad::matmul(tape, tape.constant(x), wv), y));
  EXPECT_EQ(tape.grad(wv)(0, 0), 2.0);
}

TEST(Gradients, DecoderIsDeadUnderEncoderOnlyLoss) {
  const auto cfg = gradcheck_config();
  const auto params = init_parameters<double>(cfg, 24);
  const auto seq = patchify(random_volume(cfg.input_dims, 25), cfg.patch_size);
  ad::Tape<double> tape;
  const auto bound = bind_parameters(tape, params, true);
  const auto enc = encoder_forward(tape, bound, cfg, seq, nullptr);
  tape.backward(ad::select(tape, ad::mean_rows(tape, enc.latent), 0, 0));
  const auto g = collect_gradients(tape, bound, params);
  for (const auto& [name, m] : g.arrays)
    if (is_decoder_parameter(name))
      for (double v : m.storage()) ASSERT_EQ(v, 0.0) << name;
}

TEST(Timing, VisibleOnlyEncodingIsCheaper) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_dims = {64, 64, 64};
  const auto params = init_parameters<float>(cfg, 26, false);
  const auto seq = patchify(random_volume(cfg.input_dims, 27), cfg.patch_size);
  const auto plan = random_mask(seq.n_tokens(), cfg.mask_ratio, 28);
  const auto time = [&](const MaskPlan* p) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 3; ++i) encode(params, cfg, seq, p);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  time(&plan);
  EXPECT_GE(time(nullptr) / time(&plan), 2.0);
}
