#pragma once

// Adam, learning-rate schedules, layer-wise decay and classification losses.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxmae/model.hpp"

namespace voxmae {

template <typename Real>
struct AdamState {
  ParameterSet<Real> m;
  ParameterSet<Real> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros_for(const ParameterSet<Real>& params);
  void validate_against(const ParameterSet<Real>& params) const;
};

// Per-array learning rate; the default applies one rate everywhere.
using LrForName = std::function<double(const std::string&)>;

// Bias-corrected Adam. Arrays missing from `grads` are left untouched but the
// step counter still advances once per call.
template <typename Real>
void adam_step(ParameterSet<Real>& params, const GradientSet<Real>& grads, AdamState<Real>& state, double lr);

template <typename Real>
void adam_step(ParameterSet<Real>& params, const GradientSet<Real>& grads, AdamState<Real>& state, const LrForName& lr);

struct ScheduleSpec {
  double base_lr = 1e-4;
  int warmup_epochs = 10;
  int total_epochs = 200;
  double final_lr = 1e-6;
  std::optional<double> layer_decay = 0.75;

  void validate() const;
  static ScheduleSpec pretrain_default();
  static ScheduleSpec finetune_default();
};

// Linear warmup base*e/warmup for e < warmup, then cosine from base_lr at
// e == warmup down to final_lr at e == total-1.
double lr_at(const ScheduleSpec& s, int epoch);

// Groups [embed, block 1..n, head]; group g gets base * decay^(n+1-g).
std::vector<double> layerwise_lrs(double base_lr, double decay, int n_layers);

// Layer group of a parameter name for an encoder of `depth` blocks:
// 0 for patch_embed and cls_token, b+1 for blocks.b, depth+1 for the final
// norm and every head array. Decoder arrays have no group (-1).
int parameter_group(const std::string& name, int depth);

// Rates for every array when fine-tuning with layer-wise decay.
LrForName layerwise_lr_map(double lr, std::optional<double> decay, int depth);

// Mean over samples and classes of -[w y log p + (1-y) log(1-p)].
// `probs` and `labels` are samples x classes; `pos_weight` has one entry per class.
double weighted_bce(const Matrix<double>& probs, const Matrix<double>& labels, std::span<const double> pos_weight);
double weighted_bce_logits(const Matrix<double>& logits, const Matrix<double>& labels, std::span<const double> pos_weight);

// neg/pos per class over the given label rows; classes with no positives get 1.
std::vector<double> pos_weights(const std::vector<std::vector<std::uint8_t>>& labels, std::size_t n_classes);

// Averages microbatch gradients; for mean-reduced losses over equal-sized
// microbatches this equals one pass over the concatenated batch.
template <typename Real>
GradientSet<Real> accumulate(std::span<const GradientSet<Real>> micro, int accumulation_steps);

template <typename Real>
class GradientAccumulator {
 public:
  explicit GradientAccumulator(int steps);
  void add(const GradientSet<Real>& g);
  bool ready() const { return count_ == steps_; }
  int count() const { return count_; }
  // Mean of the added gradients; resets the accumulator.
  GradientSet<Real> take();

 private:
  int steps_;
  int count_ = 0;
  ParameterSet<double> sum_;
};

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <typename Real>
double clip_grad_norm(GradientSet<Real>& grads, double max_norm);

template <typename Real>
void require_finite(const GradientSet<Real>& grads);

}  // namespace voxmae
