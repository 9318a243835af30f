#pragma once

// Ranking metrics, seed aggregation, t-tests and the energy ledger.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxmae/tensor.hpp"

namespace voxmae {

// Mann-Whitney AUROC with half credit for ties.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Average precision over positives ranked by descending score, ties broken by
// ascending index.
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricResult {
  std::string metric;  // "AUROC" or "AUPRC"
  std::vector<std::optional<double>> per_class;  // empty when undefined for that class
  double mean = 0.0;  // over defined classes
};

// scores and labels are samples x classes. Classes with a single label value
// are left undefined and excluded from the mean; if every class is undefined
// UndefinedMetric is thrown.
MetricResult evaluate_metric(const std::string& metric, const Matrix<double>& scores, const std::vector<std::vector<std::uint8_t>>& labels);

struct SeedAggregate {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // n-1 denominator
  double se = 0.0;
  double ci95 = 0.0;  // half-width, 1.96 * se
};

SeedAggregate aggregate_seeds(std::span<const double> values);

enum class TTestKind { Welch, Pooled, Paired };

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

TTestResult t_test(std::span<const double> a, std::span<const double> b, TTestKind kind = TTestKind::Welch);
double t_test_two_sided(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// P(|T| > |t|) for Student's t with df degrees of freedom.
double student_t_two_sided_p(double t, double df);

// min(1, m p); m defaults to the number of p values.
std::vector<double> bonferroni(std::span<const double> p_values, std::optional<int> m = std::nullopt);

struct EnergyLedger {
  double kwh = 0.0;
  double kg_co2 = 0.0;
};

EnergyLedger energy_ledger(double n_devices, double watts_per_device, double hours_per_epoch, double epochs,
                           double kg_co2_per_kwh = 0.4);

}  // namespace voxmae
