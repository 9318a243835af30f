#include "voxmae/eval_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "voxmae/errors.hpp"

namespace voxmae {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
  if (scores.size() != labels.size()) throw InvalidArgument(std::string(what) + ": scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw InvalidArgument(std::string(what) + ": non-finite score");
  for (auto y : labels)
    if (y > 1) throw InvalidArgument(std::string(what) + ": labels must be 0 or 1");
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "auroc");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("auroc: labels contain a single class");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks over tie groups; the positive rank sum gives U exactly.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels, "auprc");
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw UndefinedMetric("auprc: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!labels[order[k]]) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  return ap / static_cast<double>(n_pos);
}

MetricResult evaluate_metric(const std::string& metric, const Matrix<double>& scores, const std::vector<std::vector<std::uint8_t>>& labels) {
  if (metric != "AUROC" && metric != "AUPRC") throw InvalidArgument("evaluate_metric: unknown metric '" + metric + "'");
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) throw InvalidArgument("evaluate_metric: row count mismatch");
  MetricResult r;
  r.metric = metric;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < scores.cols(); ++c) {
    std::vector<double> s(labels.size());
    std::vector<std::uint8_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].size() != static_cast<std::size_t>(scores.cols())) throw InvalidArgument("evaluate_metric: label width mismatch");
      s[i] = scores(static_cast<int>(i), c);
      y[i] = labels[i][static_cast<std::size_t>(c)];
    }
    try {
      const double v = metric == "AUROC" ? auroc(s, y) : auprc(s, y);
      r.per_class.emplace_back(v);
      sum += v;
      ++defined;
    } catch (const UndefinedMetric&) {
      r.per_class.emplace_back(std::nullopt);
    }
  }
  if (defined == 0) throw UndefinedMetric("evaluate_metric: " + metric + " undefined for every class");
  r.mean = sum / defined;
  return r;
}

SeedAggregate aggregate_seeds(std::span<const double> values) {
  if (values.size() < 2) throw InvalidArgument("aggregate_seeds: at least two values required");
  SeedAggregate a;
  a.values.assign(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  // Centered on the first value so constant inputs give exactly zero spread.
  const double origin = values[0];
  double shift = 0.0;
  for (double v : values) shift += v - origin;
  shift /= n;
  a.mean = origin + shift;
  double ss = 0.0;
  for (double v : values) ss += (v - origin - shift) * (v - origin - shift);
  a.std = std::sqrt(ss / (n - 1.0));
  a.se = a.std / std::sqrt(n);
  a.ci95 = 1.96 * a.se;
  return a;
}

// ---------------------------------------------------------------- t tests

namespace {

// Continued fraction for I_x(a,b), modified Lentz.
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double var_of(std::span<const double> v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw InvalidArgument("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("incomplete_beta: x outside [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw InvalidArgument("student_t_two_sided_p: df must be positive");
  if (std::isinf(t)) return 0.0;
  if (t == 0.0) return 1.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

TTestResult t_test(std::span<const double> a, std::span<const double> b, TTestKind kind) {
  if (a.size() < 2 || b.size() < 2) throw InvalidArgument("t_test: each sample needs at least two values");
  TTestResult r;
  if (kind == TTestKind::Paired) {
    if (a.size() != b.size()) throw InvalidArgument("t_test: paired samples differ in length");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double md = mean_of(d);
    const double vd = var_of(d, md);
    r.df = static_cast<double>(d.size() - 1);
    if (vd == 0.0) {
      r.t = md == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), md);
      r.p = md == 0.0 ? 1.0 : 0.0;
      return r;
    }
    r.t = md / std::sqrt(vd / static_cast<double>(d.size()));
    r.p = student_t_two_sided_p(r.t, r.df);
    return r;
  }
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = var_of(a, ma), vb = var_of(b, mb);
  const double diff = ma - mb;
  if (va == 0.0 && vb == 0.0) {
    r.df = na + nb - 2.0;
    r.t = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    r.p = diff == 0.0 ? 1.0 : 0.0;
    return r;
  }
  if (kind == TTestKind::Welch) {
    const double sa = va / na, sb = vb / nb;
    r.t = diff / std::sqrt(sa + sb);
    r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  } else {
    const double pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    r.t = diff / std::sqrt(pooled * (1.0 / na + 1.0 / nb));
    r.df = na + nb - 2.0;
  }
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

double t_test_two_sided(std::span<const double> a, std::span<const double> b) { return t_test(a, b, TTestKind::Welch).p; }

std::vector<double> bonferroni(std::span<const double> p_values, std::optional<int> m) {
  const int count = m.value_or(static_cast<int>(p_values.size()));
  if (count < 1) throw InvalidArgument("bonferroni: m must be at least 1");
  std::vector<double> out;
  out.reserve(p_values.size());
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("bonferroni: p value outside [0,1]");
    out.push_back(std::min(1.0, count * p));
  }
  return out;
}

EnergyLedger energy_ledger(double n_devices, double watts_per_device, double hours_per_epoch, double epochs, double kg_co2_per_kwh) {
  for (double x : {n_devices, watts_per_device, hours_per_epoch, epochs, kg_co2_per_kwh})
    if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidArgument("energy_ledger: inputs must be finite and non-negative");
  EnergyLedger e;
  e.kwh = n_devices * watts_per_device * hours_per_epoch * epochs / 1000.0;
  e.kg_co2 = e.kwh * kg_co2_per_kwh;
  return e;
}

}  // namespace voxmae
