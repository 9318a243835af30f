#pragma once

// Per-seed metric files and the merged experiment report.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxmae/eval_stats.hpp"

namespace voxmae {

inline constexpr int kReportSchemaVersion = 1;

struct MetricFile {
  std::string task;
  std::string model;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> class_names;
  MetricResult auroc;
  MetricResult auprc;
  double wall_clock_s = 0.0;
};

std::string metric_file_json(const MetricFile& m);
MetricFile parse_metric_file(const std::string& json_text);
void write_metric_file(const MetricFile& m, const std::filesystem::path& path);
MetricFile read_metric_file(const std::filesystem::path& path);

struct ModelSummary {
  std::string task;
  std::string model;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> config_hashes;
  std::map<std::string, SeedAggregate> per_class;  // AUROC per class over seeds
  SeedAggregate auroc;
  std::optional<SeedAggregate> auprc;
};

struct Comparison {
  std::string task;
  std::string model_a;
  std::string model_b;
  double t = 0.0;
  double df = 0.0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  int m = 1;
};

struct ExperimentReport {
  std::vector<ModelSummary> models;
  std::vector<Comparison> comparisons;
  TTestKind t_test = TTestKind::Welch;
  std::optional<EnergyLedger> energy;
  double wall_clock_s = 0.0;
};

// Groups metric files by (task, model); models of the same task are compared
// pairwise on seed-level mean AUROC with Bonferroni over all pairs of the task.
ExperimentReport build_report(const std::vector<MetricFile>& files, TTestKind kind = TTestKind::Welch);

std::string report_json(const ExperimentReport& r);
std::string report_csv(const ExperimentReport& r);

}  // namespace voxmae
