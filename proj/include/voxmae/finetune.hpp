#pragma once

// Classification on top of the encoder: pooled features, heads, end-to-end
// fine-tuning with early stopping, and frozen-feature probes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "voxmae/checkpoint.hpp"
#include "voxmae/model.hpp"
#include "voxmae/optim.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

enum class HeadKind { Linear, Mlp64, AnnProbe };

std::string to_string(HeadKind k);
HeadKind parse_head_kind(const std::string& s);

struct HeadConfig {
  HeadKind kind = HeadKind::Linear;
  int class_count = 1;

  void validate() const;
};

inline constexpr int kMlpHidden = 64;
inline constexpr int kProbeHidden1 = 128;
inline constexpr int kProbeHidden2 = 32;
inline constexpr double kBatchNormMomentum = 0.1;

// Head arrays are named head.*; batch-norm running statistics live in a
// separate buffer set (head.bn.running_mean / head.bn.running_var).
template <typename Real>
ParameterSet<Real> init_head(const HeadConfig& head, int in_dim, std::uint64_t seed);
ParameterSet<float> init_head_buffers(const HeadConfig& head);

// A classifier: encoder arrays (no decoder) plus head arrays.
struct Classifier {
  ModelConfig model;
  HeadConfig head;
  ParameterSet<float> params;
  ParameterSet<float> buffers;
};

// Random encoder (seeded) or the encoder of a pretraining checkpoint, plus a
// fresh head.
Classifier make_classifier(const ModelConfig& cfg, const HeadConfig& head, const Checkpoint* pretrained, std::uint64_t seed);
Classifier classifier_from_checkpoint(const Checkpoint& c);
Checkpoint classifier_checkpoint(const Classifier& c);

// Class-token output followed by the mean of the patch-token outputs.
template <typename Real>
ad::Var pooled_features(ad::Tape<Real>& tape, ad::Var latent);

template <typename Real>
struct ClassifierGraph {
  EncoderVars encoder;
  ad::Var features;  // batch x 2 embed_dim
  ad::Var logits;    // batch x classes
};

// Builds the forward graph for a batch of volumes. In training mode the
// batch-norm layer of mlp64 uses batch statistics when the batch has at least
// two rows and writes updated running statistics to *buffers_out; otherwise
// the running statistics are used.
template <typename Real>
ClassifierGraph<Real> classifier_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, const HeadConfig& head,
                                         const ParameterSet<Real>& buffers, const std::vector<const Volume*>& batch, bool training,
                                         ParameterSet<Real>* buffers_out = nullptr);

// Head applied to precomputed features.
template <typename Real>
ad::Var head_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const HeadConfig& head, const ParameterSet<Real>& buffers,
                     ad::Var features, bool training, ParameterSet<Real>* buffers_out = nullptr);

template <typename Real>
struct ClassifierStep {
  double loss = 0.0;
  GradientSet<Real> grads;
  ParameterSet<Real> buffers;  // updated running statistics
};

// Weighted cross-entropy and its gradients for one microbatch.
template <typename Real>
ClassifierStep<Real> classifier_forward_backward(const ParameterSet<Real>& params, const ParameterSet<Real>& buffers, const ModelConfig& cfg,
                                                 const HeadConfig& head, const std::vector<const Volume*>& batch, const Matrix<Real>& labels,
                                                 const std::vector<Real>& pos_weight, bool training = true);

// All tokens, no masking. Length 2 embed_dim.
std::vector<float> extract_features(const ParameterSet<float>& params, const ModelConfig& cfg, const Volume& v);
Matrix<float> extract_feature_table(const ParameterSet<float>& params, const ModelConfig& cfg, const Dataset& d);

// Per-class sigmoid probabilities, evaluation mode, no augmentation.
std::vector<double> predict(const Classifier& c, const Volume& v);
Matrix<double> predict_dataset(const Classifier& c, const Dataset& d);
// Raw logits. Ranking metrics use these since probabilities saturate to 1.0.
Matrix<double> predict_logits_dataset(const Classifier& c, const Dataset& d);

struct LabelSubsample {
  std::vector<int> indices;
  std::vector<std::string> warnings;
};

// Stratified by label pattern with largest-remainder quotas over
// round(fraction * n) records (at least one).
LabelSubsample subsample_labels(const DatasetManifest& train, double fraction, std::uint64_t seed);

struct FinetuneConfig {
  ModelConfig model;
  HeadConfig head;
  ScheduleSpec schedule = ScheduleSpec::finetune_default();
  int max_epochs = 200;
  double label_fraction = 1.0;
  AugmentationSpec augmentation = AugmentationSpec::finetune_default();
  // Effective batch = microbatch * accumulation_steps. Zero picks 1 x 12,
  // or 4 x 3 for the mlp64 head whose batch norm needs several rows.
  int microbatch = 0;
  int accumulation_steps = 0;
  // Stop after this many epochs without a new best validation loss (0: never).
  int patience = 20;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> pos_weight_override;
  std::optional<double> grad_clip;

  void validate() const;
  int effective_microbatch() const;
  int effective_accumulation() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-indexed
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  std::optional<double> test_auroc;
};

struct EarlyStopRecord {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-indexed
  Classifier best;
  std::vector<double> pos_weight;
  std::vector<std::string> warnings;
  int train_records = 0;

  std::vector<double> val_losses() const;
};

// 1-indexed position of the first minimum.
int argmin_epoch(const std::vector<double>& losses);

using FinetuneEpochCallback = std::function<void(const EpochRecord&)>;

// `test` (optional) is only scored for the per-epoch AUROC curve; it never
// affects training or model selection.
EarlyStopRecord run_finetune(const FinetuneConfig& config, const Checkpoint* pretrained, const Dataset& train, const Dataset& val,
                             const Dataset* test = nullptr, const FinetuneEpochCallback& on_epoch = {});

void write_early_stop_csv(const EarlyStopRecord& r, const std::filesystem::path& path);

// ---------------------------------------------------------------- frozen probes

struct ProbeConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct Probe {
  HeadConfig head{HeadKind::AnnProbe, 1};
  int in_dim = 0;
  ParameterSet<float> params;
  std::vector<double> loss_history;
};

Probe train_frozen_probe(const Matrix<float>& features, const std::vector<std::vector<std::uint8_t>>& labels, const ProbeConfig& cfg);
Matrix<double> predict_probe(const Probe& p, const Matrix<float>& features);

// Flat little-endian f32 rows plus "<path>.shape" holding "rows cols".
void write_feature_table(const Matrix<float>& m, const std::filesystem::path& path);
Matrix<float> read_feature_table(const std::filesystem::path& path);

std::vector<std::vector<std::uint8_t>> label_rows(const DatasetManifest& m);

}  // namespace voxmae
