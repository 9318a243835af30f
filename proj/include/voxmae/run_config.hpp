#pragma once

// Experiment configuration file: [model] [pretrain] [finetune] [eval]
// [augment] [synth] sections of "key = value" lines. '#' starts a comment.
// Unknown sections or keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include "voxmae/finetune.hpp"
#include "voxmae/interpret.hpp"
#include "voxmae/eval_stats.hpp"
#include "voxmae/pretrain.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

struct EvalConfig {
  int seeds = 5;
  int tta_draws = 50;
  std::string tta_preset = "aggressive";
  EntropyMode entropy_mode = EntropyMode::MeanOfEntropies;
  TTestKind t_test = TTestKind::Welch;
  double devices = 4;
  double watts_per_device = 300;
  double hours_per_epoch = 1.5;
  double epochs = 400;
  double kg_co2_per_kwh = 0.4;

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  PretrainConfig pretrain;  // pretrain.model mirrors [model]
  FinetuneConfig finetune;  // finetune.model mirrors [model]; augmentation mirrors [augment]
  ProbeConfig probe;
  EvalConfig eval;
  SyntheticSpec synth;

  // Desk-scale defaults used when no file is given.
  static RunConfig desk_default();
  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
std::string serialize_run_config(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

// Every documented "section.key".
std::vector<std::string> run_config_keys();

AugmentationSpec augmentation_preset(const std::string& name);
std::string to_string(TTestKind k);
TTestKind parse_t_test_kind(const std::string& s);

}  // namespace voxmae
