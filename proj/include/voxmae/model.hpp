#pragma once

// Volumetric masked autoencoder: 3D patch tokenization, fixed sine-cosine
// positional tables, shuffle masking, a pre-norm transformer encoder that sees
// only visible tokens, and a light decoder that reconstructs every patch.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxmae/autodiff.hpp"
#include "voxmae/tensor.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

struct ModelConfig {
  int patch_size = 16;
  Extents input_dims{256, 256, 256};
  int embed_dim = 1024;
  int depth = 24;
  int heads = 16;
  double mlp_ratio = 4.0;
  int decoder_dim = 512;
  int decoder_depth = 8;
  int decoder_heads = 16;
  double mask_ratio = 0.75;
  // Reconstruction loss over masked tokens only (false: every token).
  bool masked_loss_only = true;

  void validate() const;
  Extents grid() const;
  int n_tokens() const;
  int patch_volume() const;
  int n_visible() const;
  int mlp_hidden() const;
  int decoder_mlp_hidden() const;

  // key=value lines, one per field, fixed order.
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  std::uint64_t hash() const;

  bool operator==(const ModelConfig&) const = default;

  // Desk-scale configuration used by tests and the synthetic recipes.
  static ModelConfig tiny();
};

// FNV-1a over bytes.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// ---------------------------------------------------------------- tokens

struct PatchSequence {
  Matrix<float> tokens;  // n_tokens x patch_size^3
  Extents grid{0, 0, 0};
  int patch_size = 0;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};

  int n_tokens() const { return tokens.rows(); }
};

PatchSequence patchify(const Volume& v, int patch_size);
Volume unpatchify(const PatchSequence& s, Unit unit = Unit::Normalized);

// Rows follow the x-fastest token order of `grid`. Each third of `dim` holds
// the 1D encoding of one axis coordinate: sines then cosines with frequencies
// 1 / 10000^(i / (dim/6)).
Matrix<double> posembed_3d(Extents grid, int dim);

// Table for a model width that need not be divisible by 6; the trailing
// dim % 6 columns are zero.
template <typename Real>
Matrix<Real> padded_posembed(Extents grid, int dim);

struct MaskPlan {
  int n_tokens = 0;
  int n_visible = 0;
  std::vector<int> shuffle;  // shuffle[j] = token at shuffled position j
  std::vector<int> restore;  // restore[token] = shuffled position
  std::vector<char> visible;

  std::vector<int> visible_tokens() const { return {shuffle.begin(), shuffle.begin() + n_visible}; }
  bool operator==(const MaskPlan&) const = default;
};

MaskPlan random_mask(int n_tokens, double mask_ratio, std::uint64_t seed);

// ---------------------------------------------------------------- parameters

template <typename Real>
struct ParameterSet {
  std::map<std::string, Matrix<Real>> arrays;

  Matrix<Real>& at(const std::string& name);
  const Matrix<Real>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return arrays.count(name) != 0; }
  std::size_t scalar_count() const;
  // Shape-matched zeros.
  ParameterSet zeros_like() const;
  // Copies the arrays whose names start with `prefix` (all when empty).
  ParameterSet filtered(const std::function<bool(const std::string&)>& keep) const;
  std::uint64_t fingerprint() const;

  template <typename To>
  ParameterSet<To> cast() const {
    ParameterSet<To> out;
    for (const auto& [name, m] : arrays) out.arrays.emplace(name, matrix_cast<To>(m));
    return out;
  }
};

template <typename Real>
using GradientSet = ParameterSet<Real>;

struct ParameterShape {
  std::string name;
  int rows = 0;
  int cols = 0;
};

std::vector<ParameterShape> parameter_shapes(const ModelConfig& cfg, bool include_decoder);
std::int64_t count_parameters(const ModelConfig& cfg, bool include_decoder);
bool is_decoder_parameter(const std::string& name);

// Truncated normal (std 0.02, cut at 2 std) for projections and tokens,
// zeros for biases, ones for norm gains.
template <typename Real>
ParameterSet<Real> init_parameters(const ModelConfig& cfg, std::uint64_t seed, bool include_decoder = true);

// ---------------------------------------------------------------- forward passes

template <typename Real>
struct Instrumentation {
  bool capture_attention = false;
  // [block][head] probability matrices.
  std::vector<std::vector<Matrix<Real>>> encoder_attention;
  std::vector<std::vector<Matrix<Real>>> decoder_attention;
  // Decoder sequence after unshuffling, before positional rows (class row first).
  Matrix<Real> decoder_input;
};

template <typename Real>
struct BoundParameters {
  std::map<std::string, ad::Var> vars;
  ad::Var operator[](const std::string& name) const;
};

template <typename Real>
BoundParameters<Real> bind_parameters(ad::Tape<Real>& tape, const ParameterSet<Real>& params, bool requires_grad);

// Gradients for every bound array; arrays the loss did not reach are zero.
template <typename Real>
GradientSet<Real> collect_gradients(const ad::Tape<Real>& tape, const BoundParameters<Real>& bound, const ParameterSet<Real>& params);

struct EncoderVars {
  ad::Var latent;      // (1 + n) x embed_dim after the final norm, class row first
  ad::Var last_block;  // output of the final transformer block, before the norm
};

template <typename Real>
EncoderVars encoder_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, const PatchSequence& seq,
                            const MaskPlan* plan, Instrumentation<Real>* instr = nullptr);

// Sigmoid reconstruction, n_tokens x patch_volume in grid order.
template <typename Real>
ad::Var decoder_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, ad::Var latent,
                        const MaskPlan& plan, Instrumentation<Real>* instr = nullptr);

template <typename Real>
struct LatentSequence {
  Matrix<Real> rows;
  std::optional<MaskPlan> plan;
};

template <typename Real>
LatentSequence<Real> encode(const ParameterSet<Real>& params, const ModelConfig& cfg, const PatchSequence& seq, const MaskPlan* plan,
                            Instrumentation<Real>* instr = nullptr);

template <typename Real>
PatchSequence decode(const ParameterSet<Real>& params, const ModelConfig& cfg, const LatentSequence<Real>& latent,
                     Instrumentation<Real>* instr = nullptr);

// Mean squared error over masked tokens (or all tokens when masked_only is false).
double mae_loss(const PatchSequence& recon, const PatchSequence& target, const MaskPlan& plan, bool masked_only = true);

template <typename Real>
struct MaeStep {
  Real loss = 0;
  GradientSet<Real> grads;
  Matrix<Real> reconstruction;
};

// One forward/backward pass of the reconstruction objective.
template <typename Real>
MaeStep<Real> mae_forward_backward(const ParameterSet<Real>& params, const ModelConfig& cfg, const PatchSequence& seq,
                                   const MaskPlan& plan);

}  // namespace voxmae
