#include "voxmae/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "voxmae/errors.hpp"
#include "voxmae/parallel.hpp"

namespace voxmae {

namespace {
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kOrderStream = 0x0de7;
constexpr std::uint64_t kMaskStream = 0x3a5c;
constexpr std::uint64_t kFlipStream = 0xf11b;
}  // namespace

void PretrainConfig::validate() const {
  model.validate();
  schedule.validate();
  if (!(corpus_fraction > 0.0 && corpus_fraction <= 1.0)) throw InvalidArgument("PretrainConfig: corpus_fraction must lie in (0,1]");
  if (batch_size < 1) throw InvalidArgument("PretrainConfig: batch_size must be at least 1");
  if (accumulation_steps < 1) throw InvalidArgument("PretrainConfig: accumulation_steps must be at least 1");
  if (checkpoint_every < 0) throw InvalidArgument("PretrainConfig: checkpoint_every must be non-negative");
  if (grad_clip && !(*grad_clip > 0.0)) throw InvalidArgument("PretrainConfig: grad_clip must be positive");
}

std::string record_source(const ManifestRecord& r) { return std::filesystem::path(r.path).parent_path().generic_string(); }

std::vector<int> subsample_indices(const DatasetManifest& m, double fraction, std::uint64_t seed, bool stratify_by_source) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("subsample_corpus: fraction must lie in (0,1]");
  const int n = static_cast<int>(m.records.size());
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (fraction == 1.0) return all;
  const int total = static_cast<int>(std::lround(fraction * n));
  if (total < 1) throw InvalidArgument("subsample_corpus: fraction " + std::to_string(fraction) + " of " + std::to_string(n) + " records is empty");

  std::map<std::string, std::vector<int>> by_source;
  if (stratify_by_source) {
    for (int i = 0; i < n; ++i) by_source[record_source(m.records[static_cast<std::size_t>(i)])].push_back(i);
  } else {
    by_source[""] = all;
  }
  std::vector<double> weights;
  for (const auto& [src, idx] : by_source) weights.push_back(static_cast<double>(idx.size()));
  const auto quota = largest_remainder(total, weights);

  Rng rng(seed);
  std::vector<int> keep;
  std::size_t k = 0;
  for (auto& [src, idx] : by_source) {
    shuffle_in_place(idx, rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + quota[k++]);
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

DatasetManifest subsample_corpus(const DatasetManifest& m, double fraction, std::uint64_t seed, bool stratify_by_source) {
  return m.subset(subsample_indices(m, fraction, seed, stratify_by_source));
}

// ---------------------------------------------------------------- state

PretrainState PretrainState::fresh(const PretrainConfig& config) {
  config.validate();
  PretrainState s;
  s.config = config;
  s.params = init_parameters<float>(config.model, mix_seed(config.seed, kInitStream), true);
  s.rng = Rng(mix_seed(config.seed, kOrderStream));
  s.adam = AdamState<float>::zeros_for(s.params);
  return s;
}

PretrainState PretrainState::resume(const PretrainConfig& config, const Checkpoint& ckpt) {
  config.validate();
  if (ckpt.kind != "pretrain") throw InvalidArgument("resume: checkpoint kind is '" + ckpt.kind + "', expected pretrain");
  if (ckpt.config_hash != config.model.hash()) throw InvalidArgument("resume: checkpoint was written for a different model configuration");
  if (ckpt.epoch > config.schedule.total_epochs) throw InvalidArgument("resume: checkpoint is past the configured epoch count");
  PretrainState s;
  s.config = config;
  s.params = ckpt.params;
  s.adam = ckpt.adam;
  s.adam.validate_against(s.params);
  s.rng.restore(ckpt.rng_state);
  s.epoch = ckpt.epoch;
  s.epoch_losses = ckpt.epoch_losses;
  s.epoch_lrs = ckpt.epoch_lrs;
  s.step_losses = ckpt.step_losses;
  return s;
}

Checkpoint PretrainState::checkpoint() const {
  Checkpoint c;
  c.kind = "pretrain";
  c.model = config.model;
  c.config_hash = config.model.hash();
  c.epoch = epoch;
  c.metadata["seed"] = std::to_string(config.seed);
  c.metadata["total_epochs"] = std::to_string(config.schedule.total_epochs);
  c.params = params;
  c.adam = adam;
  c.rng_state = rng.state();
  c.epoch_losses = epoch_losses;
  c.epoch_lrs = epoch_lrs;
  c.step_losses = step_losses;
  return c;
}

std::uint64_t mask_seed(std::uint64_t run_seed, int epoch, int record) {
  return mix_seed(mix_seed(run_seed, kMaskStream), static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(record));
}

std::uint64_t flip_seed(std::uint64_t run_seed, int epoch, int record) {
  return mix_seed(mix_seed(run_seed, kFlipStream), static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(record));
}

// ---------------------------------------------------------------- loop

double pretrain_epoch(PretrainState& state, const Dataset& corpus) {
  const auto& cfg = state.config;
  if (corpus.size() == 0) throw InvalidArgument("pretrain_epoch: empty corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus.volumes[i]->dims != cfg.model.input_dims)
      throw InvalidArgument("pretrain_epoch: record " + std::to_string(i) + " has extents that differ from the model input; preprocess first");
  if (state.epoch >= cfg.schedule.total_epochs) throw InvalidArgument("pretrain_epoch: all epochs already run");

  const double lr = lr_at(cfg.schedule, state.epoch);
  const auto order = random_permutation(static_cast<int>(corpus.size()), state.rng);
  const int per_step = cfg.volumes_per_step();
  const auto flips = AugmentationSpec::pretrain_flips();

  double epoch_sum = 0.0;
  int batch = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(per_step), ++batch) {
    const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(per_step));
    std::vector<MaeStep<float>> steps(count);
    parallel_for(count, [&](std::size_t j) {
      const int record = order[start + j];
      const Volume& src = *corpus.volumes[static_cast<std::size_t>(record)];
      const Volume input = cfg.flip_augment ? augment(src, flips, flip_seed(cfg.seed, state.epoch, record)) : src;
      const PatchSequence seq = patchify(input, cfg.model.patch_size);
      const MaskPlan plan = random_mask(seq.n_tokens(), cfg.model.mask_ratio, mask_seed(cfg.seed, state.epoch, record));
      steps[j] = mae_forward_backward(state.params, cfg.model, seq, plan);
    });
    GradientAccumulator<float> acc(static_cast<int>(count));
    double batch_loss = 0.0;
    for (auto& s : steps) {
      if (!std::isfinite(s.loss)) throw NumericError("pretraining loss is not finite at batch " + std::to_string(batch));
      batch_loss += s.loss;
      acc.add(s.grads);
    }
    batch_loss /= static_cast<double>(count);
    GradientSet<float> grads = acc.take();
    if (cfg.grad_clip) clip_grad_norm(grads, *cfg.grad_clip);
    adam_step(state.params, grads, state.adam, lr);
    state.step_losses.push_back(batch_loss);
    epoch_sum += batch_loss * static_cast<double>(count);
  }
  const double mean = epoch_sum / static_cast<double>(order.size());
  state.epoch_losses.push_back(mean);
  state.epoch_lrs.push_back(lr);
  ++state.epoch;
  return mean;
}

Checkpoint run_pretraining(const PretrainConfig& config, const Dataset& corpus, const Checkpoint* resume_from, const EpochCallback& on_epoch) {
  PretrainState state = resume_from ? PretrainState::resume(config, *resume_from) : PretrainState::fresh(config);
  const bool persist = !config.checkpoint_dir.empty();
  while (state.epoch < config.schedule.total_epochs) {
    pretrain_epoch(state, corpus);
    if (persist && config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.vmck", state.epoch);
      save_checkpoint(state.checkpoint(), config.checkpoint_dir / name);
    }
    if (on_epoch) on_epoch(state);
  }
  Checkpoint final = state.checkpoint();
  if (persist) save_checkpoint(final, config.checkpoint_dir / "final.vmck");
  return final;
}

// ---------------------------------------------------------------- preview

ReconstructionPreview reconstruct_preview(const ParameterSet<float>& params, const ModelConfig& cfg, const Volume& v, std::uint64_t seed) {
  if (v.dims != cfg.input_dims) throw InvalidArgument("reconstruct_preview: volume extents differ from the model input");
  const PatchSequence seq = patchify(v, cfg.patch_size);
  ReconstructionPreview out;
  out.plan = random_mask(seq.n_tokens(), cfg.mask_ratio, seed);
  const auto latent = encode(params, cfg, seq, &out.plan);
  const PatchSequence recon = decode(params, cfg, latent);

  PatchSequence masked = seq, merged = seq;
  double err = 0.0, base = 0.0;
  std::size_t count = 0;
  for (int t = 0; t < seq.n_tokens(); ++t) {
    if (out.plan.visible[static_cast<std::size_t>(t)]) continue;
    for (int c = 0; c < seq.tokens.cols(); ++c) {
      const double x = seq.tokens(t, c);
      const double r = recon.tokens(t, c);
      masked.tokens(t, c) = 0.0f;
      merged.tokens(t, c) = recon.tokens(t, c);
      err += (r - x) * (r - x);
      base += (0.5 - x) * (0.5 - x);
      ++count;
    }
  }
  out.masked = unpatchify(masked, v.unit);
  out.reconstruction = unpatchify(merged, v.unit);
  out.masked_mse = err / static_cast<double>(count);
  out.constant_baseline_mse = base / static_cast<double>(count);
  return out;
}

void write_loss_history(const Checkpoint& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.precision(10);
  os << "epoch,mean_loss,lr\n";
  for (std::size_t i = 0; i < c.epoch_losses.size(); ++i)
    os << (i + 1) << ',' << c.epoch_losses[i] << ',' << (i < c.epoch_lrs.size() ? c.epoch_lrs[i] : 0.0) << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace voxmae
