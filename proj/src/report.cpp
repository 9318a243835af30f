#include "voxmae/report.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "voxmae/errors.hpp"

namespace voxmae {

using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json metric_json(const MetricResult& r, const std::vector<std::string>& names) {
  ordered_json per_class = ordered_json::object();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const std::string name = c < names.size() ? names[c] : std::to_string(c);
    per_class[name] = r.per_class[c] ? ordered_json(*r.per_class[c]) : ordered_json(nullptr);
  }
  return ordered_json{{"per_class", per_class}, {"mean", r.mean}};
}

MetricResult metric_from_json(const ordered_json& j, const std::string& name, const std::vector<std::string>& names) {
  MetricResult r;
  r.metric = name;
  r.mean = j.at("mean").get<double>();
  const auto& pc = j.at("per_class");
  for (const auto& n : names) r.per_class.push_back(pc.at(n).is_null() ? std::nullopt : std::optional<double>(pc.at(n).get<double>()));
  return r;
}

ordered_json aggregate_json(const SeedAggregate& a) {
  return ordered_json{{"values", a.values}, {"mean", a.mean}, {"std", a.std}, {"se", a.se}, {"ci95", a.ci95}};
}

SeedAggregate aggregate_or_single(const std::vector<double>& v) {
  if (v.size() >= 2) return aggregate_seeds(v);
  SeedAggregate a;
  a.values = v;
  a.mean = v.empty() ? 0.0 : v.front();
  return a;
}

}  // namespace

std::string metric_file_json(const MetricFile& m) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["task"] = m.task;
  j["model"] = m.model;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["class_names"] = m.class_names;
  j["metrics"] = ordered_json{{"AUROC", metric_json(m.auroc, m.class_names)}, {"AUPRC", metric_json(m.auprc, m.class_names)}};
  j["wall_clock_s"] = m.wall_clock_s;
  return j.dump(2) + "\n";
}

MetricFile parse_metric_file(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw FormatError("unsupported metric schema version");
    MetricFile m;
    m.task = j.at("task").get<std::string>();
    m.model = j.at("model").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.auroc = metric_from_json(j.at("metrics").at("AUROC"), "AUROC", m.class_names);
    m.auprc = metric_from_json(j.at("metrics").at("AUPRC"), "AUPRC", m.class_names);
    m.wall_clock_s = j.value("wall_clock_s", 0.0);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metric file: ") + e.what());
  }
}

void write_metric_file(const MetricFile& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << metric_file_json(m);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

MetricFile read_metric_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open metric file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_metric_file(ss.str());
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

ExperimentReport build_report(const std::vector<MetricFile>& files, TTestKind kind) {
  if (files.empty()) throw InvalidArgument("build_report: no metric files");
  ExperimentReport r;
  r.t_test = kind;
  std::map<std::pair<std::string, std::string>, std::vector<const MetricFile*>> groups;
  for (const auto& f : files) groups[{f.task, f.model}].push_back(&f);

  std::map<std::string, std::vector<std::size_t>> by_task;
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(), [](const MetricFile* a, const MetricFile* b) { return a->seed < b->seed; });
    ModelSummary s;
    s.task = key.first;
    s.model = key.second;
    std::vector<double> auroc, auprc;
    std::map<std::string, std::vector<double>> per_class;
    std::set<std::uint64_t> seen;
    for (const auto* m : members) {
      if (!seen.insert(m->seed).second) throw InvalidArgument("build_report: duplicate seed " + std::to_string(m->seed) + " for " + s.task + "/" + s.model);
      s.seeds.push_back(m->seed);
      s.config_hashes.push_back(m->config_hash);
      auroc.push_back(m->auroc.mean);
      auprc.push_back(m->auprc.mean);
      for (std::size_t c = 0; c < m->auroc.per_class.size(); ++c)
        if (m->auroc.per_class[c]) per_class[c < m->class_names.size() ? m->class_names[c] : std::to_string(c)].push_back(*m->auroc.per_class[c]);
      r.wall_clock_s += m->wall_clock_s;
    }
    s.auroc = aggregate_or_single(auroc);
    s.auprc = aggregate_or_single(auprc);
    for (auto& [name, values] : per_class) s.per_class[name] = aggregate_or_single(values);
    by_task[s.task].push_back(r.models.size());
    r.models.push_back(std::move(s));
  }

  for (const auto& [task, idx] : by_task) {
    std::vector<Comparison> local;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = i + 1; j < idx.size(); ++j) {
        const auto& a = r.models[idx[i]];
        const auto& b = r.models[idx[j]];
        Comparison c{task, a.model, b.model};
        if (a.auroc.values.size() >= 2 && b.auroc.values.size() >= 2) {
          const auto t = t_test(a.auroc.values, b.auroc.values, kind);
          c.t = t.t;
          c.df = t.df;
          c.p_raw = t.p;
        }
        local.push_back(c);
      }
    std::vector<double> raw;
    for (const auto& c : local) raw.push_back(c.p_raw);
    if (!raw.empty()) {
      const auto adj = bonferroni(raw);
      for (std::size_t k = 0; k < local.size(); ++k) {
        local[k].p_adjusted = adj[k];
        local[k].m = static_cast<int>(local.size());
      }
    }
    r.comparisons.insert(r.comparisons.end(), local.begin(), local.end());
  }
  return r;
}

std::string report_json(const ExperimentReport& r) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["t_test"] = r.t_test == TTestKind::Welch ? "welch" : r.t_test == TTestKind::Pooled ? "pooled" : "paired";
  ordered_json models = ordered_json::array();
  for (const auto& s : r.models) {
    ordered_json per_class = ordered_json::object();
    for (const auto& [name, a] : s.per_class) per_class[name] = aggregate_json(a);
    ordered_json m{{"task", s.task}, {"model", s.model}, {"seeds", s.seeds}, {"config_hashes", s.config_hashes}, {"per_class", per_class},
                   {"mean", s.auroc.mean}, {"ci95", s.auroc.ci95}, {"auroc", aggregate_json(s.auroc)}};
    if (s.auprc) m["auprc"] = aggregate_json(*s.auprc);
    models.push_back(m);
  }
  j["models"] = models;
  ordered_json comps = ordered_json::array();
  for (const auto& c : r.comparisons)
    comps.push_back(ordered_json{{"task", c.task}, {"model_a", c.model_a}, {"model_b", c.model_b}, {"t", c.t}, {"df", c.df},
                                 {"p_raw", c.p_raw}, {"p_bonferroni", c.p_adjusted}, {"m", c.m}});
  j["comparisons"] = comps;
  ordered_json meta{{"wall_clock_s", r.wall_clock_s}};
  if (r.energy) meta["energy"] = ordered_json{{"kwh", r.energy->kwh}, {"kg_co2", r.energy->kg_co2}};
  j["metadata"] = meta;
  return j.dump(2) + "\n";
}

std::string report_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "kind,task,model,metric,n,mean,std,se,ci95,p_raw,p_bonferroni,m\n";
  for (const auto& s : r.models) {
    os << "summary," << s.task << ',' << s.model << ",AUROC," << s.auroc.values.size() << ',' << s.auroc.mean << ',' << s.auroc.std << ','
       << s.auroc.se << ',' << s.auroc.ci95 << ",,,\n";
    if (s.auprc)
      os << "summary," << s.task << ',' << s.model << ",AUPRC," << s.auprc->values.size() << ',' << s.auprc->mean << ',' << s.auprc->std << ','
         << s.auprc->se << ',' << s.auprc->ci95 << ",,,\n";
  }
  for (const auto& c : r.comparisons)
    os << "comparison," << c.task << ',' << c.model_a << " vs " << c.model_b << ",AUROC,,,,,," << c.p_raw << ',' << c.p_adjusted << ',' << c.m
       << '\n';
  return os.str();
}

}  // namespace voxmae
