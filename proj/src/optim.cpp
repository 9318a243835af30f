#include "voxmae/optim.hpp"

#include <cmath>
#include <numbers>

#include "voxmae/errors.hpp"

namespace voxmae {

template <typename Real>
AdamState<Real> AdamState<Real>::zeros_for(const ParameterSet<Real>& params) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

template <typename Real>
void AdamState<Real>::validate_against(const ParameterSet<Real>& params) const {
  if (t < 0) throw InvalidArgument("AdamState: negative step counter");
  for (const auto& [name, p] : params.arrays) {
    if (!m.contains(name) || !v.contains(name)) throw InvalidArgument("AdamState: no moments for '" + name + "'");
    if (!m.at(name).same_shape(p) || !v.at(name).same_shape(p)) throw InvalidArgument("AdamState: moment shape mismatch for '" + name + "'");
  }
}

template <typename Real>
void require_finite(const GradientSet<Real>& grads) {
  for (const auto& [name, g] : grads.arrays)
    if (!all_finite(g)) throw NumericError("non-finite gradient in '" + name + "'");
}

template <typename Real>
void adam_step(ParameterSet<Real>& params, const GradientSet<Real>& grads, AdamState<Real>& state, const LrForName& lr) {
  require_finite(grads);
  for (const auto& [name, g] : grads.arrays) {
    if (!params.contains(name)) throw InvalidArgument("adam_step: gradient for unknown parameter '" + name + "'");
    if (!params.at(name).same_shape(g)) throw InvalidArgument("adam_step: gradient shape mismatch for '" + name + "'");
  }
  for (const auto& [name, p] : params.arrays) {
    if (!state.m.contains(name)) {
      state.m.arrays.emplace(name, Matrix<Real>(p.rows(), p.cols()));
      state.v.arrays.emplace(name, Matrix<Real>(p.rows(), p.cols()));
    }
  }
  ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (const auto& [name, g] : grads.arrays) {
    const double rate = lr(name);
    if (!std::isfinite(rate) || rate < 0.0) throw InvalidArgument("adam_step: invalid learning rate for '" + name + "'");
    auto& p = params.at(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p[i] = static_cast<Real>(double(p[i]) - rate * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template <typename Real>
void adam_step(ParameterSet<Real>& params, const GradientSet<Real>& grads, AdamState<Real>& state, double lr) {
  adam_step(params, grads, state, LrForName([lr](const std::string&) { return lr; }));
}

// ---------------------------------------------------------------- schedules

void ScheduleSpec::validate() const {
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw InvalidArgument("ScheduleSpec: base_lr must be finite and non-negative");
  if (total_epochs < 1) throw InvalidArgument("ScheduleSpec: total_epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs > total_epochs) throw InvalidArgument("ScheduleSpec: warmup_epochs must lie in [0, total_epochs]");
  if (!(final_lr >= 0.0) || final_lr > base_lr) throw InvalidArgument("ScheduleSpec: final_lr must lie in [0, base_lr]");
  if (layer_decay && !(*layer_decay > 0.0 && *layer_decay <= 1.0)) throw InvalidArgument("ScheduleSpec: layer_decay must lie in (0, 1]");
}

ScheduleSpec ScheduleSpec::pretrain_default() {
  ScheduleSpec s;
  s.base_lr = 1e-4;
  s.warmup_epochs = 20;
  s.total_epochs = 400;
  s.final_lr = 0.0;
  s.layer_decay.reset();
  return s;
}

ScheduleSpec ScheduleSpec::finetune_default() { return ScheduleSpec{}; }

double lr_at(const ScheduleSpec& s, int epoch) {
  s.validate();
  if (epoch < 0 || epoch >= s.total_epochs)
    throw InvalidArgument("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + ")");
  if (epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
  const int span = s.total_epochs - 1 - s.warmup_epochs;
  if (span <= 0) return s.base_lr;
  const double progress = static_cast<double>(epoch - s.warmup_epochs) / span;
  if (epoch == s.total_epochs - 1) return s.final_lr;
  return s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<double> layerwise_lrs(double base_lr, double decay, int n_layers) {
  if (!(decay > 0.0 && decay <= 1.0)) throw InvalidArgument("layerwise_lrs: decay must lie in (0, 1]");
  if (n_layers < 0) throw InvalidArgument("layerwise_lrs: negative layer count");
  const int groups = n_layers + 2;
  std::vector<double> out(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) out[static_cast<std::size_t>(g)] = base_lr * std::pow(decay, groups - 1 - g);
  return out;
}

int parameter_group(const std::string& name, int depth) {
  if (is_decoder_parameter(name)) return -1;
  if (name.rfind("patch_embed.", 0) == 0 || name == "cls_token") return 0;
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    const int b = std::stoi(name.substr(7, dot - 7));
    if (b < 0 || b >= depth) throw InvalidArgument("parameter_group: block index out of range in '" + name + "'");
    return b + 1;
  }
  return depth + 1;
}

LrForName layerwise_lr_map(double lr, std::optional<double> decay, int depth) {
  if (!decay) return [lr](const std::string&) { return lr; };
  auto rates = layerwise_lrs(lr, *decay, depth);
  return [rates = std::move(rates), depth, lr](const std::string& name) {
    const int g = parameter_group(name, depth);
    return g < 0 ? lr : rates[static_cast<std::size_t>(g)];
  };
}

// ---------------------------------------------------------------- losses

namespace {

void check_loss_shapes(const Matrix<double>& x, const Matrix<double>& labels, std::span<const double> pos_weight) {
  if (!x.same_shape(labels)) throw InvalidArgument("weighted_bce: shape mismatch " + x.shape_string() + " vs " + labels.shape_string());
  if (x.empty()) throw InvalidArgument("weighted_bce: empty batch");
  if (pos_weight.size() != static_cast<std::size_t>(x.cols())) throw InvalidArgument("weighted_bce: one pos_weight per class required");
  for (double w : pos_weight)
    if (!(w > 0.0)) throw InvalidArgument("weighted_bce: pos_weight must be positive");
  for (double y : labels.storage())
    if (y != 0.0 && y != 1.0) throw InvalidArgument("weighted_bce: labels must be 0 or 1");
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double weighted_bce(const Matrix<double>& probs, const Matrix<double>& labels, std::span<const double> pos_weight) {
  check_loss_shapes(probs, labels, pos_weight);
  double acc = 0.0;
  for (int r = 0; r < probs.rows(); ++r)
    for (int c = 0; c < probs.cols(); ++c) {
      const double p = probs(r, c);
      if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("weighted_bce: probability " + std::to_string(p) + " outside (0,1)");
      const double y = labels(r, c);
      acc -= pos_weight[static_cast<std::size_t>(c)] * y * std::log(p) + (1.0 - y) * std::log1p(-p);
    }
  return acc / static_cast<double>(probs.size());
}

double weighted_bce_logits(const Matrix<double>& logits, const Matrix<double>& labels, std::span<const double> pos_weight) {
  check_loss_shapes(logits, labels, pos_weight);
  double acc = 0.0;
  for (int r = 0; r < logits.rows(); ++r)
    for (int c = 0; c < logits.cols(); ++c) {
      const double z = logits(r, c);
      const double y = labels(r, c);
      // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
      acc += pos_weight[static_cast<std::size_t>(c)] * y * softplus(-z) + (1.0 - y) * softplus(z);
    }
  return acc / static_cast<double>(logits.size());
}

std::vector<double> pos_weights(const std::vector<std::vector<std::uint8_t>>& labels, std::size_t n_classes) {
  std::vector<double> pos(n_classes, 0.0), neg(n_classes, 0.0);
  for (const auto& row : labels) {
    if (row.size() != n_classes) throw InvalidArgument("pos_weights: label row has the wrong class count");
    for (std::size_t c = 0; c < n_classes; ++c) (row[c] ? pos : neg)[c] += 1.0;
  }
  std::vector<double> w(n_classes, 1.0);
  for (std::size_t c = 0; c < n_classes; ++c)
    if (pos[c] > 0.0 && neg[c] > 0.0) w[c] = neg[c] / pos[c];
  return w;
}

// ---------------------------------------------------------------- accumulation

template <typename Real>
GradientSet<Real> accumulate(std::span<const GradientSet<Real>> micro, int accumulation_steps) {
  if (accumulation_steps < 1) throw InvalidArgument("accumulate: accumulation_steps must be at least 1");
  if (micro.size() != static_cast<std::size_t>(accumulation_steps))
    throw InvalidArgument("accumulate: expected " + std::to_string(accumulation_steps) + " microbatch gradients, got " +
                          std::to_string(micro.size()));
  GradientAccumulator<Real> acc(accumulation_steps);
  for (const auto& g : micro) acc.add(g);
  return acc.take();
}

template <typename Real>
GradientAccumulator<Real>::GradientAccumulator(int steps) : steps_(steps) {
  if (steps < 1) throw InvalidArgument("GradientAccumulator: steps must be at least 1");
}

template <typename Real>
void GradientAccumulator<Real>::add(const GradientSet<Real>& g) {
  if (count_ == steps_) throw InvalidArgument("GradientAccumulator: already holds a full batch");
  if (count_ == 0) {
    sum_ = g.template cast<double>();
  } else {
    if (g.arrays.size() != sum_.arrays.size()) throw InvalidArgument("accumulate: gradient sets have different arrays");
    for (const auto& [name, m] : g.arrays) {
      auto it = sum_.arrays.find(name);
      if (it == sum_.arrays.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols()) throw InvalidArgument("accumulate: mismatched gradient '" + name + "'");
      for (std::size_t i = 0; i < m.size(); ++i) it->second[i] += double(m[i]);
    }
  }
  ++count_;
}

template <typename Real>
GradientSet<Real> GradientAccumulator<Real>::take() {
  if (count_ == 0) throw InvalidArgument("GradientAccumulator: nothing accumulated");
  for (auto& [name, m] : sum_.arrays)
    for (auto& x : m.storage()) x /= count_;
  GradientSet<Real> out = sum_.template cast<Real>();
  sum_ = {};
  count_ = 0;
  return out;
}

template <typename Real>
double clip_grad_norm(GradientSet<Real>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw InvalidArgument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [name, g] : grads.arrays)
    for (Real x : g.storage()) sq += double(x) * double(x);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads.arrays)
      for (auto& x : g.storage()) x = static_cast<Real>(x * s);
  }
  return norm;
}

#define VOXMAE_INSTANTIATE_OPTIM(Real)                                                                             \
  template struct AdamState<Real>;                                                                                 \
  template class GradientAccumulator<Real>;                                                                        \
  template void require_finite<Real>(const GradientSet<Real>&);                                                    \
  template void adam_step<Real>(ParameterSet<Real>&, const GradientSet<Real>&, AdamState<Real>&, double);          \
  template void adam_step<Real>(ParameterSet<Real>&, const GradientSet<Real>&, AdamState<Real>&, const LrForName&); \
  template GradientSet<Real> accumulate<Real>(std::span<const GradientSet<Real>>, int);                            \
  template double clip_grad_norm<Real>(GradientSet<Real>&, double);

VOXMAE_INSTANTIATE_OPTIM(float)
VOXMAE_INSTANTIATE_OPTIM(double)

#undef VOXMAE_INSTANTIATE_OPTIM

}  // namespace voxmae
