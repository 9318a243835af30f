#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "voxmae/checkpoint.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/rng.hpp"

using namespace voxmae;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.kind = "finetune";
  c.model = ModelConfig::tiny();
  c.config_hash = c.model.hash();
  c.epoch = 3;
  c.metadata = {{"seed", "7"}, {"task", "lesion"}};
  c.params = init_parameters<float>(c.model, 1, false);
  c.buffers.arrays.emplace("head.bn.running_mean", Matrix<float>(1, 4));
  c.adam = AdamState<float>::zeros_for(c.params);
  c.adam.t = 12;
  c.rng_state = Rng(5).state();
  c.epoch_losses = {0.7, 0.5, 0.4};
  c.epoch_lrs = {1e-5, 2e-5, 3e-5};
  c.step_losses = {0.71, 0.69};
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("voxmae_ckpt_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = scratch("round");
  const auto c = sample_checkpoint();
  save_checkpoint(c, dir / "a.vmck");
  const auto back = load_checkpoint(dir / "a.vmck");
  EXPECT_TRUE(back == c);
  EXPECT_EQ(back.params.fingerprint(), c.params.fingerprint());
  EXPECT_EQ(back.metadata.at("task"), "lesion");
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto dir = scratch("corrupt");
  save_checkpoint(sample_checkpoint(), dir / "a.vmck");
  std::ifstream in(dir / "a.vmck", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::ofstream(dir / "short.vmck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(dir / "short.vmck"), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  std::ofstream(dir / "magic.vmck", std::ios::binary) << magic;
  EXPECT_THROW(load_checkpoint(dir / "magic.vmck"), FormatError);

  std::ofstream(dir / "trailing.vmck", std::ios::binary) << bytes << "junk";
  EXPECT_THROW(load_checkpoint(dir / "trailing.vmck"), FormatError);

  EXPECT_THROW(load_checkpoint(dir / "missing.vmck"), IoError);
}

TEST(Checkpoint, UnwritableDestinationIsIoError) {
  const auto dir = scratch("unwritable");
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(save_checkpoint(sample_checkpoint(), dir / "file" / "a.vmck"), IoError);
}
