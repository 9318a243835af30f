#pragma once

// voxmae <synth|preprocess|pretrain|finetune|probe|eval|gradcam|entropy|report> [flags]
//
// Exit codes: 0 ok, 2 usage or configuration, 3 I/O or file format, 4 numeric failure.

#include <iosfwd>

namespace voxmae {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace voxmae
