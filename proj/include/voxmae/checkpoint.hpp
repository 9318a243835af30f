#pragma once

// Training snapshots shared by pretraining and fine-tuning.
//
// Layout (little-endian): "VMCK", u32 version, u64 config hash, i32 epoch,
// string kind, string model config, u32 metadata count + (key, value)
// strings, then the parameter, buffer and Adam moment sets (u32 count, each
// entry: name, u32 rows, u32 cols, f32 payload), Adam t/betas/eps, the
// generator state string and three f64 histories.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "voxmae/model.hpp"
#include "voxmae/optim.hpp"

namespace voxmae {

struct Checkpoint {
  std::string kind = "pretrain";  // "pretrain" or "finetune"
  ModelConfig model;
  std::uint64_t config_hash = 0;
  int epoch = 0;  // epochs completed
  std::map<std::string, std::string> metadata;
  ParameterSet<float> params;
  // Non-trainable state such as batch-norm running statistics.
  ParameterSet<float> buffers;
  AdamState<float> adam;
  std::string rng_state;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_lrs;
  std::vector<double> step_losses;

  bool operator==(const Checkpoint&) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace voxmae
