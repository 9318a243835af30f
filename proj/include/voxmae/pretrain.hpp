#pragma once

// Masked-reconstruction pretraining loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <utility>

#include "voxmae/checkpoint.hpp"
#include "voxmae/model.hpp"
#include "voxmae/optim.hpp"
#include "voxmae/rng.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

struct PretrainConfig {
  ModelConfig model;
  ScheduleSpec schedule = ScheduleSpec::pretrain_default();
  double corpus_fraction = 1.0;
  bool stratify_by_source = true;
  // Volumes per microbatch; each microbatch gradient is the mean over its volumes.
  int batch_size = 1;
  int accumulation_steps = 1;
  std::uint64_t seed = 0;
  // Save every k epochs into checkpoint_dir (0: final checkpoint only).
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  std::optional<double> grad_clip;
  bool flip_augment = true;

  void validate() const;
  int volumes_per_step() const { return batch_size * accumulation_steps; }
};

// Source of a record: its parent directory ("" for bare file names).
std::string record_source(const ManifestRecord& r);

// Seed-deterministic subset, record order preserved. When stratified, each
// source receives its largest-remainder share of round(fraction * n).
DatasetManifest subsample_corpus(const DatasetManifest& m, double fraction, std::uint64_t seed, bool stratify_by_source);
std::vector<int> subsample_indices(const DatasetManifest& m, double fraction, std::uint64_t seed, bool stratify_by_source);

struct PretrainState {
  PretrainConfig config;
  ParameterSet<float> params;
  AdamState<float> adam;
  Rng rng;
  int epoch = 0;  // epochs completed
  std::vector<double> epoch_losses;
  std::vector<double> epoch_lrs;
  std::vector<double> step_losses;

  static PretrainState fresh(const PretrainConfig& config);
  static PretrainState resume(const PretrainConfig& config, const Checkpoint& ckpt);
  Checkpoint checkpoint() const;
};

// Seeds for one record in one epoch; independent of data order.
std::uint64_t mask_seed(std::uint64_t run_seed, int epoch, int record);
std::uint64_t flip_seed(std::uint64_t run_seed, int epoch, int record);

// One pass over the corpus in a freshly drawn order. Returns the mean loss.
double pretrain_epoch(PretrainState& state, const Dataset& corpus);

using EpochCallback = std::function<void(const PretrainState&)>;

// Trains until config.schedule.total_epochs epochs are complete, starting
// from `resume_from` when given.
Checkpoint run_pretraining(const PretrainConfig& config, const Dataset& corpus, const Checkpoint* resume_from = nullptr,
                           const EpochCallback& on_epoch = {});

struct ReconstructionPreview {
  Volume masked;         // masked patches set to 0
  Volume reconstruction;  // visible patches copied from the input
  MaskPlan plan;
  double masked_mse = 0.0;           // decoder vs input over masked voxels
  double constant_baseline_mse = 0.0;  // 0.5 vs input over masked voxels
};

ReconstructionPreview reconstruct_preview(const ParameterSet<float>& params, const ModelConfig& cfg, const Volume& v,
                                          std::uint64_t seed);

// CSV with header epoch,mean_loss,lr (epochs 1-indexed).
void write_loss_history(const Checkpoint& c, const std::filesystem::path& path);

}  // namespace voxmae
