#include "voxmae/finetune.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "voxmae/binary_io.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/eval_stats.hpp"
#include "voxmae/parallel.hpp"
#include "voxmae/rng.hpp"

namespace voxmae {

namespace {
constexpr std::uint64_t kEncoderInitStream = 0xe1c0;
constexpr std::uint64_t kHeadInitStream = 0x4ead;
constexpr std::uint64_t kLabelStream = 0x1abe;
constexpr std::uint64_t kOrderStream = 0x0de7;
constexpr std::uint64_t kAugmentStream = 0xa06e;
}  // namespace

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::Linear: return "linear";
    case HeadKind::Mlp64: return "mlp64";
    case HeadKind::AnnProbe: return "ann_probe";
  }
  return "linear";
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "linear") return HeadKind::Linear;
  if (s == "mlp64") return HeadKind::Mlp64;
  if (s == "ann_probe") return HeadKind::AnnProbe;
  throw InvalidArgument("unknown head kind '" + s + "' (expected linear, mlp64 or ann_probe)");
}

void HeadConfig::validate() const {
  if (class_count < 1) throw InvalidArgument("HeadConfig: class_count must be at least 1");
}

// ---------------------------------------------------------------- heads

template <typename Real>
ParameterSet<Real> init_head(const HeadConfig& head, int in_dim, std::uint64_t seed) {
  head.validate();
  if (in_dim < 1) throw InvalidArgument("init_head: input width must be positive");
  Rng rng(seed);
  auto weight = [&rng](int rows, int cols) {
    Matrix<Real> m(rows, cols);
    for (auto& x : m.storage()) {
      double z = rng.normal();
      while (std::abs(z) > 2.0) z = rng.normal();
      x = static_cast<Real>(0.02 * z);
    }
    return m;
  };
  const int k = head.class_count;
  ParameterSet<Real> p;
  switch (head.kind) {
    case HeadKind::Linear:
      p.arrays.emplace("head.weight", weight(in_dim, k));
      p.arrays.emplace("head.bias", Matrix<Real>(1, k));
      break;
    case HeadKind::Mlp64: {
      p.arrays.emplace("head.fc1.weight", weight(in_dim, kMlpHidden));
      p.arrays.emplace("head.fc1.bias", Matrix<Real>(1, kMlpHidden));
      Matrix<Real> gain(1, kMlpHidden);
      gain.fill(Real(1));
      p.arrays.emplace("head.bn.gain", std::move(gain));
      p.arrays.emplace("head.bn.bias", Matrix<Real>(1, kMlpHidden));
      p.arrays.emplace("head.fc2.weight", weight(kMlpHidden, k));
      p.arrays.emplace("head.fc2.bias", Matrix<Real>(1, k));
      break;
    }
    case HeadKind::AnnProbe:
      p.arrays.emplace("head.fc1.weight", weight(in_dim, kProbeHidden1));
      p.arrays.emplace("head.fc1.bias", Matrix<Real>(1, kProbeHidden1));
      p.arrays.emplace("head.fc2.weight", weight(kProbeHidden1, kProbeHidden2));
      p.arrays.emplace("head.fc2.bias", Matrix<Real>(1, kProbeHidden2));
      p.arrays.emplace("head.fc3.weight", weight(kProbeHidden2, k));
      p.arrays.emplace("head.fc3.bias", Matrix<Real>(1, k));
      break;
  }
  return p;
}

ParameterSet<float> init_head_buffers(const HeadConfig& head) {
  ParameterSet<float> b;
  if (head.kind == HeadKind::Mlp64) {
    Matrix<float> var(1, kMlpHidden);
    var.fill(1.0f);
    b.arrays.emplace("head.bn.running_mean", Matrix<float>(1, kMlpHidden));
    b.arrays.emplace("head.bn.running_var", std::move(var));
  }
  return b;
}

Classifier make_classifier(const ModelConfig& cfg, const HeadConfig& head, const Checkpoint* pretrained, std::uint64_t seed) {
  cfg.validate();
  head.validate();
  Classifier c{cfg, head, {}, init_head_buffers(head)};
  if (pretrained) {
    if (pretrained->config_hash != cfg.hash()) throw InvalidArgument("pretrained checkpoint was written for a different model configuration");
    c.params = pretrained->params.filtered([](const std::string& n) { return !is_decoder_parameter(n) && n.rfind("head.", 0) != 0; });
  } else {
    c.params = init_parameters<float>(cfg, mix_seed(seed, kEncoderInitStream), false);
  }
  for (auto& [name, m] : init_head<float>(head, 2 * cfg.embed_dim, mix_seed(seed, kHeadInitStream)).arrays) c.params.arrays.emplace(name, std::move(m));
  return c;
}

Classifier classifier_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "finetune") throw InvalidArgument("checkpoint kind is '" + ck.kind + "', expected finetune");
  Classifier c;
  c.model = ck.model;
  try {
    c.head.kind = parse_head_kind(ck.metadata.at("head"));
    c.head.class_count = std::stoi(ck.metadata.at("class_count"));
  } catch (const std::out_of_range&) {
    throw FormatError("finetune checkpoint lacks head metadata");
  }
  c.params = ck.params;
  c.buffers = ck.buffers;
  return c;
}

Checkpoint classifier_checkpoint(const Classifier& c) {
  Checkpoint ck;
  ck.kind = "finetune";
  ck.model = c.model;
  ck.config_hash = c.model.hash();
  ck.metadata["head"] = to_string(c.head.kind);
  ck.metadata["class_count"] = std::to_string(c.head.class_count);
  ck.params = c.params;
  ck.buffers = c.buffers;
  return ck;
}

// ---------------------------------------------------------------- forward

template <typename Real>
ad::Var pooled_features(ad::Tape<Real>& tape, ad::Var latent) {
  const int rows = tape.value(latent).rows();
  if (rows < 2) throw InvalidArgument("pooled_features: latent has no patch tokens");
  ad::Var cls = ad::slice_rows(tape, latent, 0, 1);
  ad::Var patches = ad::mean_rows(tape, ad::slice_rows(tape, latent, 1, rows - 1));
  return ad::concat_cols(tape, cls, patches);
}

template <typename Real>
ad::Var head_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const HeadConfig& head, const ParameterSet<Real>& buffers,
                     ad::Var features, bool training, ParameterSet<Real>* buffers_out) {
  switch (head.kind) {
    case HeadKind::Linear: return ad::linear(tape, features, p["head.weight"], p["head.bias"]);
    case HeadKind::AnnProbe: {
      ad::Var h = ad::relu(tape, ad::linear(tape, features, p["head.fc1.weight"], p["head.fc1.bias"]));
      h = ad::relu(tape, ad::linear(tape, h, p["head.fc2.weight"], p["head.fc2.bias"]));
      return ad::linear(tape, h, p["head.fc3.weight"], p["head.fc3.bias"]);
    }
    case HeadKind::Mlp64: {
      ad::Var h = ad::leaky_relu(tape, ad::linear(tape, features, p["head.fc1.weight"], p["head.fc1.bias"]));
      const auto& rm = buffers.at("head.bn.running_mean");
      const auto& rv = buffers.at("head.bn.running_var");
      const std::vector<Real> run_mean(rm.storage().begin(), rm.storage().end());
      const std::vector<Real> run_var(rv.storage().begin(), rv.storage().end());
      const int n = tape.value(h).rows();
      if (training && n >= 2) {
        std::vector<Real> mean, var;
        h = ad::batch_norm_train(tape, h, p["head.bn.gain"], p["head.bn.bias"], &mean, &var);
        if (buffers_out) {
          *buffers_out = buffers;
          auto& om = buffers_out->at("head.bn.running_mean");
          auto& ov = buffers_out->at("head.bn.running_var");
          const Real mom = static_cast<Real>(kBatchNormMomentum);
          const Real unbias = static_cast<Real>(n) / static_cast<Real>(n - 1);
          for (std::size_t i = 0; i < mean.size(); ++i) {
            om[i] = (Real(1) - mom) * run_mean[i] + mom * mean[i];
            ov[i] = (Real(1) - mom) * run_var[i] + mom * var[i] * unbias;
          }
        }
      } else {
        h = ad::batch_norm_eval(tape, h, p["head.bn.gain"], p["head.bn.bias"], run_mean, run_var);
        if (buffers_out) *buffers_out = buffers;
      }
      return ad::linear(tape, h, p["head.fc2.weight"], p["head.fc2.bias"]);
    }
  }
  throw InvalidArgument("head_forward: unknown head kind");
}

template <typename Real>
ClassifierGraph<Real> classifier_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, const HeadConfig& head,
                                         const ParameterSet<Real>& buffers, const std::vector<const Volume*>& batch, bool training,
                                         ParameterSet<Real>* buffers_out) {
  if (batch.empty()) throw InvalidArgument("classifier_forward: empty batch");
  ClassifierGraph<Real> g;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->dims != cfg.input_dims) throw InvalidArgument("classifier: volume extents differ from the model input");
    g.encoder = encoder_forward(tape, p, cfg, patchify(*batch[i], cfg.patch_size), nullptr, static_cast<Instrumentation<Real>*>(nullptr));
    ad::Var f = pooled_features(tape, g.encoder.latent);
    g.features = i == 0 ? f : ad::concat_rows(tape, g.features, f);
  }
  g.logits = head_forward(tape, p, head, buffers, g.features, training, buffers_out);
  return g;
}

template <typename Real>
ClassifierStep<Real> classifier_forward_backward(const ParameterSet<Real>& params, const ParameterSet<Real>& buffers, const ModelConfig& cfg,
                                                 const HeadConfig& head, const std::vector<const Volume*>& batch, const Matrix<Real>& labels,
                                                 const std::vector<Real>& pos_weight, bool training) {
  ad::Tape<Real> tape;
  const auto bound = bind_parameters(tape, params, true);
  ClassifierStep<Real> step;
  step.buffers = buffers;
  const auto g = classifier_forward(tape, bound, cfg, head, buffers, batch, training, &step.buffers);
  const ad::Var loss = ad::bce_with_logits(tape, g.logits, labels, pos_weight);
  tape.backward(loss);
  step.loss = static_cast<double>(tape.value(loss)[0]);
  step.grads = collect_gradients(tape, bound, params);
  return step;
}

std::vector<float> extract_features(const ParameterSet<float>& params, const ModelConfig& cfg, const Volume& v) {
  if (v.dims != cfg.input_dims) throw InvalidArgument("extract_features: volume extents differ from the model input");
  ad::Tape<float> tape;
  const auto bound = bind_parameters(tape, params.filtered([](const std::string& n) { return n.rfind("head.", 0) != 0 && !is_decoder_parameter(n); }), false);
  const auto enc = encoder_forward(tape, bound, cfg, patchify(v, cfg.patch_size), nullptr, static_cast<Instrumentation<float>*>(nullptr));
  const auto& f = tape.value(pooled_features(tape, enc.latent));
  return {f.storage().begin(), f.storage().end()};
}

Matrix<float> extract_feature_table(const ParameterSet<float>& params, const ModelConfig& cfg, const Dataset& d) {
  Matrix<float> table(static_cast<int>(d.size()), 2 * cfg.embed_dim);
  parallel_for(d.size(), [&](std::size_t i) {
    const auto f = extract_features(params, cfg, *d.volumes[i]);
    std::copy(f.begin(), f.end(), table.row(static_cast<int>(i)));
  });
  return table;
}

namespace {

Matrix<double> head_outputs(const ParameterSet<float>& params, const HeadConfig& head, const ParameterSet<float>& buffers,
                            const Matrix<float>& features, bool probabilities) {
  ad::Tape<float> tape;
  const auto bound = bind_parameters(tape, params.filtered([](const std::string& n) { return n.rfind("head.", 0) == 0; }), false);
  const ad::Var logits = head_forward(tape, bound, head, buffers, tape.constant(features), false);
  const auto& z = tape.value(logits);
  Matrix<double> p(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z[i];
    if (!probabilities) {
      p[i] = x;
      continue;
    }
    p[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return p;
}

}  // namespace

std::vector<double> predict(const Classifier& c, const Volume& v) {
  const auto f = extract_features(c.params, c.model, v);
  Matrix<float> row(1, static_cast<int>(f.size()));
  std::copy(f.begin(), f.end(), row.row(0));
  const auto p = head_outputs(c.params, c.head, c.buffers, row, true);
  return {p.storage().begin(), p.storage().end()};
}

Matrix<double> predict_dataset(const Classifier& c, const Dataset& d) {
  if (d.size() == 0) return Matrix<double>(0, c.head.class_count);
  return head_outputs(c.params, c.head, c.buffers, extract_feature_table(c.params, c.model, d), true);
}

Matrix<double> predict_logits_dataset(const Classifier& c, const Dataset& d) {
  if (d.size() == 0) return Matrix<double>(0, c.head.class_count);
  return head_outputs(c.params, c.head, c.buffers, extract_feature_table(c.params, c.model, d), false);
}

// ---------------------------------------------------------------- subsampling

std::vector<std::vector<std::uint8_t>> label_rows(const DatasetManifest& m) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(r.labels);
  return out;
}

LabelSubsample subsample_labels(const DatasetManifest& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("subsample_labels: fraction must lie in (0,1]");
  const int n = static_cast<int>(train.records.size());
  if (n == 0) throw InvalidArgument("subsample_labels: empty training split");
  LabelSubsample out;
  if (fraction == 1.0) {
    for (int i = 0; i < n; ++i) out.indices.push_back(i);
    return out;
  }
  std::map<std::vector<std::uint8_t>, std::vector<int>> by_pattern;
  for (int i = 0; i < n; ++i) by_pattern[train.records[static_cast<std::size_t>(i)].labels].push_back(i);
  std::vector<double> sizes;
  for (const auto& [pattern, idx] : by_pattern) sizes.push_back(static_cast<double>(idx.size()));
  const int total = std::max(1, static_cast<int>(std::lround(fraction * n)));
  const auto quota = largest_remainder(total, sizes);
  Rng rng(seed);
  std::size_t k = 0;
  for (auto& [pattern, idx] : by_pattern) {
    shuffle_in_place(idx, rng);
    out.indices.insert(out.indices.end(), idx.begin(), idx.begin() + quota[k++]);
  }
  std::sort(out.indices.begin(), out.indices.end());
  const auto before = train.positive_counts();
  const auto after = train.subset(out.indices).positive_counts();
  for (std::size_t c = 0; c < before.size(); ++c)
    if (before[c] > 0 && after[c] == 0)
      out.warnings.push_back("class '" + train.class_names[c] + "' has no positives after subsampling to fraction " + std::to_string(fraction));
  return out;
}

// ---------------------------------------------------------------- fine-tuning

void FinetuneConfig::validate() const {
  model.validate();
  head.validate();
  schedule.validate();
  if (max_epochs < 1 || max_epochs > 200) throw InvalidArgument("FinetuneConfig: max_epochs must lie in [1, 200]");
  if (max_epochs > schedule.total_epochs) throw InvalidArgument("FinetuneConfig: max_epochs exceeds the schedule length");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw InvalidArgument("FinetuneConfig: label_fraction must lie in (0,1]");
  augmentation.validate();
  if (microbatch < 0 || accumulation_steps < 0) throw InvalidArgument("FinetuneConfig: batch settings must be non-negative");
  if (patience < 0) throw InvalidArgument("FinetuneConfig: patience must be non-negative");
  if (pos_weight_override) {
    if (static_cast<int>(pos_weight_override->size()) != head.class_count) throw InvalidArgument("FinetuneConfig: pos_weight needs one entry per class");
    for (double w : *pos_weight_override)
      if (!(w > 0.0)) throw InvalidArgument("FinetuneConfig: pos_weight entries must be positive");
  }
  if (grad_clip && !(*grad_clip > 0.0)) throw InvalidArgument("FinetuneConfig: grad_clip must be positive");
}

int FinetuneConfig::effective_microbatch() const {
  if (microbatch > 0) return microbatch;
  return head.kind == HeadKind::Mlp64 ? 4 : 1;
}

int FinetuneConfig::effective_accumulation() const {
  if (accumulation_steps > 0) return accumulation_steps;
  return std::max(1, 12 / effective_microbatch());
}

std::vector<double> EarlyStopRecord::val_losses() const {
  std::vector<double> v;
  for (const auto& e : epochs) v.push_back(e.val_loss);
  return v;
}

int argmin_epoch(const std::vector<double>& losses) {
  if (losses.empty()) throw InvalidArgument("argmin_epoch: no losses");
  std::size_t best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i] < losses[best]) best = i;
  return static_cast<int>(best) + 1;
}

namespace {

Matrix<float> label_matrix(const Dataset& d, const std::vector<int>& rows) {
  const int k = static_cast<int>(d.manifest.class_count());
  Matrix<float> y(static_cast<int>(rows.size()), k);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < k; ++c) y(static_cast<int>(i), c) = d.manifest.records[static_cast<std::size_t>(rows[i])].labels[static_cast<std::size_t>(c)];
  return y;
}

double dataset_loss(const Classifier& c, const Dataset& d, const std::vector<double>& pos_weight) {
  const Matrix<float> f = extract_feature_table(c.params, c.model, d);
  ad::Tape<float> tape;
  const auto bound = bind_parameters(tape, c.params.filtered([](const std::string& n) { return n.rfind("head.", 0) == 0; }), false);
  const auto& z = tape.value(head_forward(tape, bound, c.head, c.buffers, tape.constant(f), false));
  Matrix<double> logits(z.rows(), z.cols()), y(z.rows(), z.cols());
  for (int r = 0; r < z.rows(); ++r)
    for (int k = 0; k < z.cols(); ++k) {
      logits(r, k) = z(r, k);
      y(r, k) = d.manifest.records[static_cast<std::size_t>(r)].labels[static_cast<std::size_t>(k)];
    }
  return weighted_bce_logits(logits, y, pos_weight);
}

double mean_auroc(const Classifier& c, const Dataset& d) {
  const Matrix<double> p = predict_logits_dataset(c, d);
  return evaluate_metric("AUROC", p, label_rows(d.manifest)).mean;
}

}  // namespace

EarlyStopRecord run_finetune(const FinetuneConfig& config, const Checkpoint* pretrained, const Dataset& train, const Dataset& val,
                             const Dataset* test, const FinetuneEpochCallback& on_epoch) {
  config.validate();
  if (static_cast<int>(train.manifest.class_count()) != config.head.class_count)
    throw InvalidArgument("run_finetune: head class count does not match the training manifest");
  if (val.size() == 0) throw InvalidArgument("run_finetune: empty validation split");
  if (val.manifest.class_count() != train.manifest.class_count()) throw InvalidArgument("run_finetune: validation classes differ from training");

  EarlyStopRecord record;
  Classifier model = make_classifier(config.model, config.head, pretrained, config.seed);
  const auto sub = subsample_labels(train.manifest, config.label_fraction, mix_seed(config.seed, kLabelStream));
  record.warnings = sub.warnings;
  const Dataset tr = train.subset(sub.indices);
  record.train_records = static_cast<int>(tr.size());
  record.pos_weight = config.pos_weight_override ? *config.pos_weight_override : pos_weights(label_rows(tr.manifest), tr.manifest.class_count());
  const std::vector<float> pos_weight_f(record.pos_weight.begin(), record.pos_weight.end());

  AdamState<float> adam = AdamState<float>::zeros_for(model.params);
  Rng order_rng(mix_seed(config.seed, kOrderStream));
  const int mb = config.effective_microbatch();
  const int per_step = mb * config.effective_accumulation();

  double best_val = std::numeric_limits<double>::infinity();
  record.best = model;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = lr_at(config.schedule, epoch);
    const LrForName rates = layerwise_lr_map(lr, config.schedule.layer_decay, config.model.depth);
    const auto order = random_permutation(static_cast<int>(tr.size()), order_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(per_step)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(per_step));
      const int n_micro = static_cast<int>((stop - start + static_cast<std::size_t>(mb) - 1) / static_cast<std::size_t>(mb));
      GradientAccumulator<float> acc(n_micro);
      for (std::size_t m0 = start; m0 < stop; m0 += static_cast<std::size_t>(mb)) {
        const std::size_t m1 = std::min(stop, m0 + static_cast<std::size_t>(mb));
        std::vector<int> rows(order.begin() + static_cast<std::ptrdiff_t>(m0), order.begin() + static_cast<std::ptrdiff_t>(m1));
        std::vector<Volume> inputs(rows.size());
        parallel_for(rows.size(), [&](std::size_t j) {
          const auto seed = mix_seed(mix_seed(config.seed, kAugmentStream), static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(rows[j]));
          inputs[j] = augment(*tr.volumes[static_cast<std::size_t>(rows[j])], config.augmentation, seed);
        });
        std::vector<const Volume*> batch;
        for (const auto& v : inputs) batch.push_back(&v);
        auto step = classifier_forward_backward(model.params, model.buffers, model.model, model.head, batch, label_matrix(tr, rows), pos_weight_f);
        if (!std::isfinite(step.loss)) throw NumericError("fine-tuning loss is not finite at epoch " + std::to_string(epoch + 1));
        loss_sum += step.loss * static_cast<double>(rows.size());
        model.buffers = std::move(step.buffers);
        acc.add(step.grads);
      }
      GradientSet<float> grads = acc.take();
      if (config.grad_clip) clip_grad_norm(grads, *config.grad_clip);
      adam_step(model.params, grads, adam, rates);
    }

    EpochRecord e;
    e.epoch = epoch + 1;
    e.lr = lr;
    e.train_loss = loss_sum / static_cast<double>(tr.size());
    e.val_loss = dataset_loss(model, val, record.pos_weight);
    if (!std::isfinite(e.val_loss)) throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch + 1));
    if (test && test->size() > 0) e.test_auroc = mean_auroc(model, *test);
    record.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
    if (e.val_loss < best_val) {
      best_val = e.val_loss;
      record.best_epoch = e.epoch;
      record.best = model;
    }
    if (config.patience > 0 && e.epoch - record.best_epoch >= config.patience) break;
  }
  return record;
}

void write_early_stop_csv(const EarlyStopRecord& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.precision(10);
  os << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : r.epochs) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------- probes

Probe train_frozen_probe(const Matrix<float>& features, const std::vector<std::vector<std::uint8_t>>& labels, const ProbeConfig& cfg) {
  if (features.rows() == 0 || static_cast<std::size_t>(features.rows()) != labels.size())
    throw InvalidArgument("train_frozen_probe: feature and label counts differ");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) throw InvalidArgument("train_frozen_probe: invalid training settings");
  if (!all_finite(features)) throw NumericError("train_frozen_probe: non-finite features");
  Probe probe;
  probe.head = {HeadKind::AnnProbe, static_cast<int>(labels.front().size())};
  probe.in_dim = features.cols();
  probe.params = init_head<float>(probe.head, probe.in_dim, mix_seed(cfg.seed, kHeadInitStream));
  const auto pw = pos_weights(labels, labels.front().size());
  const std::vector<float> pos_weight(pw.begin(), pw.end());
  const ParameterSet<float> no_buffers;
  AdamState<float> adam = AdamState<float>::zeros_for(probe.params);
  Rng rng(mix_seed(cfg.seed, kOrderStream));
  const int n = features.rows(), k = probe.head.class_count;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = random_permutation(n, rng);
    double sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      Matrix<float> x(count, features.cols()), y(count, k);
      for (int i = 0; i < count; ++i) {
        const int r = order[static_cast<std::size_t>(start + i)];
        std::copy_n(features.row(r), features.cols(), x.row(i));
        for (int c = 0; c < k; ++c) y(i, c) = labels[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      }
      ad::Tape<float> tape;
      const auto bound = bind_parameters(tape, probe.params, true);
      const ad::Var logits = head_forward(tape, bound, probe.head, no_buffers, tape.constant(std::move(x)), true);
      const ad::Var loss = ad::bce_with_logits(tape, logits, y, pos_weight);
      tape.backward(loss);
      sum += static_cast<double>(tape.value(loss)[0]) * count;
      adam_step(probe.params, collect_gradients(tape, bound, probe.params), adam, cfg.lr);
    }
    probe.loss_history.push_back(sum / n);
  }
  return probe;
}

Matrix<double> predict_probe(const Probe& p, const Matrix<float>& features) {
  if (features.cols() != p.in_dim) throw InvalidArgument("predict_probe: feature width differs from the trained probe");
  return head_outputs(p.params, p.head, ParameterSet<float>{}, features, true);
}

void write_feature_table(const Matrix<float>& m, const std::filesystem::path& path) {
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    binio::put_array(os, m.storage().data(), m.size());
    if (!os) throw IoError("write failed for '" + path.string() + "'");
  }
  auto shape = path;
  shape += ".shape";
  std::ofstream os(shape, std::ios::trunc);
  os << m.rows() << ' ' << m.cols() << '\n';
  if (!os) throw IoError("write failed for '" + shape.string() + "'");
}

Matrix<float> read_feature_table(const std::filesystem::path& path) {
  auto shape = path;
  shape += ".shape";
  std::ifstream ss(shape);
  if (!ss) throw IoError("cannot open '" + shape.string() + "'");
  long long rows = -1, cols = -1;
  ss >> rows >> cols;
  if (!ss || rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 20)) throw FormatError("'" + shape.string() + "': expected 'rows cols'");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const auto expected = static_cast<std::uintmax_t>(rows * cols) * sizeof(float);
  if (std::filesystem::file_size(path) != expected)
    throw FormatError("'" + path.string() + "': expected " + std::to_string(expected) + " bytes for a " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " table");
  Matrix<float> m(static_cast<int>(rows), static_cast<int>(cols));
  binio::get_array(is, m.storage().data(), m.size(), "feature table");
  return m;
}

#define VOXMAE_INSTANTIATE_FINETUNE(Real)                                                                                                   \
  template ParameterSet<Real> init_head<Real>(const HeadConfig&, int, std::uint64_t);                                                       \
  template ad::Var pooled_features<Real>(ad::Tape<Real>&, ad::Var);                                                                         \
  template ad::Var head_forward<Real>(ad::Tape<Real>&, const BoundParameters<Real>&, const HeadConfig&, const ParameterSet<Real>&, ad::Var, \
                                      bool, ParameterSet<Real>*);                                                                           \
  template ClassifierGraph<Real> classifier_forward<Real>(ad::Tape<Real>&, const BoundParameters<Real>&, const ModelConfig&,                \
                                                          const HeadConfig&, const ParameterSet<Real>&, const std::vector<const Volume*>&,  \
                                                          bool, ParameterSet<Real>*);                                                       \
  template ClassifierStep<Real> classifier_forward_backward<Real>(const ParameterSet<Real>&, const ParameterSet<Real>&, const ModelConfig&, \
                                                                  const HeadConfig&, const std::vector<const Volume*>&, const Matrix<Real>&, \
                                                                  const std::vector<Real>&, bool);

VOXMAE_INSTANTIATE_FINETUNE(float)
VOXMAE_INSTANTIATE_FINETUNE(double)

#undef VOXMAE_INSTANTIATE_FINETUNE

}  // namespace voxmae
