#include "voxmae/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "voxmae/checkpoint.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/eval_stats.hpp"
#include "voxmae/finetune.hpp"
#include "voxmae/interpret.hpp"
#include "voxmae/pretrain.hpp"
#include "voxmae/report.hpp"
#include "voxmae/run_config.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string hex(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string config_hash(const RunConfig& c) { return hex(fnv1a(serialize_run_config(c))); }

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write failed for '" + p.string() + "'");
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    if (config_path.empty()) return RunConfig::desk_default();
    return load_run_config(config_path);
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "run configuration file");
  sub->add_option("--seed", c.seed, "base seed");
}

Dataset load_nonempty(const std::string& path, const char* what) {
  Dataset d = load_dataset(path);
  if (d.size() == 0) throw InvalidArgument(std::string(what) + " manifest '" + path + "' lists no records");
  return d;
}

MetricFile score(const Classifier& c, const Dataset& test, const std::string& task, const std::string& model, std::uint64_t seed,
                 const std::string& hash) {
  const auto scores = predict_logits_dataset(c, test);
  const auto labels = label_rows(test.manifest);
  MetricFile m;
  m.task = task;
  m.model = model;
  m.seed = seed;
  m.config_hash = hash;
  m.class_names = test.manifest.class_names;
  m.auroc = evaluate_metric("AUROC", scores, labels);
  m.auprc = evaluate_metric("AUPRC", scores, labels);
  return m;
}

std::string seed_stem(const std::string& model, std::uint64_t seed) { return model + "_seed" + std::to_string(seed); }

// ---------------------------------------------------------------- commands

struct SynthArgs {
  Common common;
  std::string out;
  double split_train = 0.5, split_val = 0.1, split_test = 0.4;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  RunConfig cfg = a.common.load();
  if (a.common.seed) cfg.synth.seed = *a.common.seed;
  const auto corpus = generate_synthetic(cfg.synth);
  const fs::path dir(a.out);
  ensure_dir(dir);
  for (std::size_t i = 0; i < corpus.volumes.size(); ++i) write_volume(corpus.volumes[i], dir / corpus.manifest.records[i].path);
  write_manifest(corpus.manifest, dir / "manifest.tsv");

  SplitSpec split;
  split.ratios = {a.split_train, a.split_val, a.split_test};
  split.seed = cfg.synth.seed;
  split = split_dataset(corpus.manifest, split);
  write_manifest(corpus.manifest.subset(split.indices(Split::Train)), dir / "train.tsv");
  write_manifest(corpus.manifest.subset(split.indices(Split::Val)), dir / "val.tsv");
  write_manifest(corpus.manifest.subset(split.indices(Split::Test)), dir / "test.tsv");

  std::ostringstream lesions;
  lesions.precision(17);
  lesions << "record\tclass\tcx\tcy\tcz\trx\try\trz\n";
  for (const auto& l : corpus.lesions)
    lesions << corpus.manifest.records[static_cast<std::size_t>(l.record)].path << '\t' << l.class_index << '\t' << l.center[0] << '\t'
            << l.center[1] << '\t' << l.center[2] << '\t' << l.radii[0] << '\t' << l.radii[1] << '\t' << l.radii[2] << '\n';
  write_text(dir / "lesions.tsv", lesions.str());
  out << (dir / "manifest.tsv").string() << '\n';
  return kExitOk;
}

struct PreprocessArgs {
  std::string manifest, out;
  int size = 256;
  double hu_lo = kDefaultHuLow, hu_hi = kDefaultHuHigh;
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
  if (a.size < 1) throw InvalidArgument("--size must be positive");
  if (!(a.hu_lo < a.hu_hi)) throw InvalidArgument("--hu-lo must be below --hu-hi");
  const fs::path in(a.manifest);
  const auto m = read_manifest(in);
  if (m.records.empty()) throw InvalidArgument("manifest '" + a.manifest + "' lists no records");
  const fs::path dir(a.out);
  ensure_dir(dir);
  for (const auto& r : m.records) {
    fs::path src(r.path);
    if (src.is_relative()) src = in.parent_path() / src;
    Volume v;
    try {
      v = read_volume(src);
    } catch (const std::exception& e) {
      throw IoError("unreadable volume '" + src.string() + "': " + e.what());
    }
    v = resample_volume(v, {a.size, a.size, a.size});
    if (v.unit == Unit::Hounsfield) v = clip_normalize(v, a.hu_lo, a.hu_hi);
    fs::path dst = dir / fs::path(r.path).relative_path();
    if (dst.has_parent_path()) ensure_dir(dst.parent_path());
    write_volume(v, dst);
  }
  DatasetManifest outm = m;
  for (auto& r : outm.records) r.path = fs::path(r.path).relative_path().generic_string();
  write_manifest(outm, dir / "manifest.tsv");
  out << (dir / "manifest.tsv").string() << '\n';
  return kExitOk;
}

struct PretrainArgs {
  Common common;
  std::string manifest, out, from_checkpoint;
  std::optional<double> corpus_fraction;
  std::optional<int> epochs;
  int checkpoint_every = 0;
  std::optional<std::string> preview;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.common.load();
  auto& pc = cfg.pretrain;
  if (a.common.seed) pc.seed = *a.common.seed;
  if (a.corpus_fraction) pc.corpus_fraction = *a.corpus_fraction;
  if (a.epochs) pc.schedule.total_epochs = *a.epochs;
  pc.checkpoint_every = a.checkpoint_every;
  pc.checkpoint_dir = a.out;
  pc.validate();

  const Dataset all = load_nonempty(a.manifest, "pretraining");
  const Dataset corpus = all.subset(subsample_indices(all.manifest, pc.corpus_fraction, pc.seed, pc.stratify_by_source));
  ensure_dir(a.out);
  std::optional<Checkpoint> resume;
  if (!a.from_checkpoint.empty()) resume = load_checkpoint(a.from_checkpoint);
  const auto t0 = Clock::now();
  Checkpoint ck = run_pretraining(pc, corpus, resume ? &*resume : nullptr, [&](const PretrainState& s) {
    out << "epoch " << s.epoch << " loss " << s.epoch_losses.back() << " lr " << s.epoch_lrs.back() << '\n';
  });
  ck.metadata["config_hash"] = config_hash(cfg);
  ck.metadata["corpus_records"] = std::to_string(corpus.size());
  ck.metadata["wall_clock_s"] = std::to_string(seconds_since(t0));
  save_checkpoint(ck, fs::path(a.out) / "final.vmck");
  write_loss_history(ck, fs::path(a.out) / "loss.csv");
  write_text(fs::path(a.out) / "config.ini", serialize_run_config(cfg));
  if (a.preview) {
    const auto p = reconstruct_preview(ck.params, ck.model, *corpus.volumes.front(), pc.seed);
    const fs::path pdir(*a.preview);
    ensure_dir(pdir);
    const Plane plane = parse_plane("axial");
    const int mid = ck.model.input_dims[2] / 2;
    render_slices(*corpus.volumes.front(), plane, mid, nullptr, pdir / "input.pgm");
    render_slices(p.masked, plane, mid, nullptr, pdir / "masked.pgm");
    render_slices(p.reconstruction, plane, mid, nullptr, pdir / "reconstruction.pgm");
    out << "preview masked_mse " << p.masked_mse << " constant_baseline_mse " << p.constant_baseline_mse << '\n';
  }
  out << (fs::path(a.out) / "final.vmck").string() << '\n';
  return kExitOk;
}

struct FinetuneArgs {
  Common common;
  std::string train, val, test, out, from_checkpoint, task = "task", head;
  std::optional<std::string> model_name;
  int seeds = 1;
  std::optional<double> label_fraction;
  std::optional<int> max_epochs;
};

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  if (a.seeds < 1) throw InvalidArgument("--seeds must be at least 1");
  RunConfig cfg = a.common.load();
  auto& fc = cfg.finetune;
  if (a.label_fraction) fc.label_fraction = *a.label_fraction;
  if (a.max_epochs) fc.max_epochs = *a.max_epochs;
  if (!a.head.empty()) fc.head.kind = parse_head_kind(a.head);
  const std::uint64_t base = a.common.seed.value_or(fc.seed);

  const Dataset train = load_nonempty(a.train, "training");
  const Dataset val = load_nonempty(a.val, "validation");
  const Dataset test = a.test.empty() ? val : load_nonempty(a.test, "test");
  fc.head.class_count = static_cast<int>(train.manifest.class_count());

  std::optional<Checkpoint> pre;
  if (!a.from_checkpoint.empty()) {
    pre = load_checkpoint(a.from_checkpoint);
    if (pre->kind != "pretrain") throw InvalidArgument("--from-checkpoint expects a pretraining checkpoint");
    cfg.model = pre->model;
    cfg.pretrain.model = pre->model;
    fc.model = pre->model;
  }
  const std::string model = a.model_name.value_or(pre ? "pretrained" : "scratch");
  const fs::path dir(a.out);
  ensure_dir(dir);
  write_text(dir / (model + "_config.ini"), serialize_run_config(cfg));

  for (int i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = base + static_cast<std::uint64_t>(i);
    fc.seed = seed;
    fc.validate();
    const std::string hash = config_hash(cfg);
    const auto t0 = Clock::now();
    const auto rec = run_finetune(fc, pre ? &*pre : nullptr, train, val);
    for (const auto& w : rec.warnings) out << "warning: " << w << '\n';
    Checkpoint ck = classifier_checkpoint(rec.best);
    ck.epoch = rec.best_epoch;
    ck.metadata["seed"] = std::to_string(seed);
    ck.metadata["task"] = a.task;
    ck.metadata["model"] = model;
    ck.metadata["config_hash"] = hash;
    ck.metadata["label_fraction"] = std::to_string(fc.label_fraction);
    const std::string stem = seed_stem(model, seed);
    save_checkpoint(ck, dir / (stem + ".vmck"));
    write_early_stop_csv(rec, dir / (stem + "_epochs.csv"));
    MetricFile m = score(rec.best, test, a.task, model, seed, hash);
    m.wall_clock_s = seconds_since(t0);
    write_metric_file(m, dir / (stem + ".json"));
    out << stem << " best_epoch " << rec.best_epoch << " AUROC " << m.auroc.mean << " AUPRC " << m.auprc.mean << '\n';
  }
  return kExitOk;
}

struct ProbeArgs {
  Common common;
  std::string train, test, out, from_checkpoint, task = "task";
  std::optional<std::string> model_name;
  int seeds = 1;
  std::optional<double> label_fraction;
};

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  if (a.seeds < 1) throw InvalidArgument("--seeds must be at least 1");
  RunConfig cfg = a.common.load();
  const double fraction = a.label_fraction.value_or(cfg.finetune.label_fraction);
  const std::uint64_t base = a.common.seed.value_or(cfg.probe.seed);
  const Checkpoint pre = load_checkpoint(a.from_checkpoint);
  const Dataset train = load_nonempty(a.train, "training");
  const Dataset test = load_nonempty(a.test, "test");
  if (train.manifest.class_names != test.manifest.class_names) throw InvalidArgument("training and test manifests list different classes");

  const fs::path dir(a.out);
  ensure_dir(dir);
  const auto train_features = extract_feature_table(pre.params, pre.model, train);
  const auto test_features = extract_feature_table(pre.params, pre.model, test);
  write_feature_table(train_features, dir / "train_features.f32");
  write_feature_table(test_features, dir / "test_features.f32");
  const auto train_labels = label_rows(train.manifest);
  const auto test_labels = label_rows(test.manifest);
  const std::string model = a.model_name.value_or("probe");

  for (int i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = base + static_cast<std::uint64_t>(i);
    const auto t0 = Clock::now();
    const auto sub = subsample_labels(train.manifest, fraction, seed);
    Matrix<float> x(static_cast<int>(sub.indices.size()), train_features.cols());
    std::vector<std::vector<std::uint8_t>> y;
    for (std::size_t r = 0; r < sub.indices.size(); ++r) {
      for (int c = 0; c < x.cols(); ++c) x(static_cast<int>(r), c) = train_features(sub.indices[r], c);
      y.push_back(train_labels[static_cast<std::size_t>(sub.indices[r])]);
    }
    ProbeConfig pc = cfg.probe;
    pc.seed = seed;
    const Probe probe = train_frozen_probe(x, y, pc);
    const auto scores = predict_probe(probe, test_features);
    MetricFile m;
    m.task = a.task;
    m.model = model;
    m.seed = seed;
    m.config_hash = config_hash(cfg);
    m.class_names = test.manifest.class_names;
    m.auroc = evaluate_metric("AUROC", scores, test_labels);
    m.auprc = evaluate_metric("AUPRC", scores, test_labels);
    m.wall_clock_s = seconds_since(t0);
    const std::string stem = seed_stem(model, seed);
    write_metric_file(m, dir / (stem + ".json"));
    out << stem << " AUROC " << m.auroc.mean << " AUPRC " << m.auprc.mean << '\n';
  }
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string train, test, out;
  std::optional<std::string> task, model_name;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Dataset test = load_nonempty(a.test, "test");
  std::optional<DatasetManifest> train;
  if (!a.train.empty()) {
    train = read_manifest(a.train);
    if (train->class_names != test.manifest.class_names) throw InvalidArgument("training and test manifests list different classes");
  }
  const fs::path dir(a.out);
  ensure_dir(dir);
  for (const auto& path : a.checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    const Classifier c = classifier_from_checkpoint(ck);
    if (c.head.class_count != static_cast<int>(test.manifest.class_count()))
      throw InvalidArgument("checkpoint '" + path + "' predicts " + std::to_string(c.head.class_count) + " classes, test manifest lists " +
                            std::to_string(test.manifest.class_count()));
    const auto meta = [&](const char* key, const std::string& fallback) {
      const auto it = ck.metadata.find(key);
      return it == ck.metadata.end() ? fallback : it->second;
    };
    const std::uint64_t seed = std::stoull(meta("seed", "0"));
    const std::string task = a.task.value_or(meta("task", "task"));
    const std::string model = a.model_name.value_or(meta("model", "model"));
    const auto t0 = Clock::now();
    MetricFile m = score(c, test, task, model, seed, meta("config_hash", hex(ck.config_hash)));
    m.wall_clock_s = seconds_since(t0);
    const std::string stem = seed_stem(model, seed);
    write_metric_file(m, dir / (stem + ".json"));
    out << stem << " AUROC " << m.auroc.mean << " AUPRC " << m.auprc.mean << '\n';
  }
  return kExitOk;
}

struct GradcamArgs {
  std::string checkpoint, manifest, out, plane = "axial";
  int case_index = 0, target_class = 0, slice = -1;
};

int cmd_gradcam(const GradcamArgs& a, std::ostream& out) {
  const Classifier c = classifier_from_checkpoint(load_checkpoint(a.checkpoint));
  const Dataset d = load_nonempty(a.manifest, "input");
  if (a.case_index < 0 || a.case_index >= static_cast<int>(d.size()))
    throw InvalidArgument("--case " + std::to_string(a.case_index) + " outside [0, " + std::to_string(d.size()) + ")");
  const Volume& v = *d.volumes[static_cast<std::size_t>(a.case_index)];
  const auto s = gradcam(c, v, a.target_class);
  const Plane plane = parse_plane(a.plane);
  const int axis = plane == Plane::Axial ? 2 : plane == Plane::Coronal ? 1 : 0;
  const int index = a.slice >= 0 ? a.slice : v.dims[static_cast<std::size_t>(axis)] / 2;
  const fs::path dir(a.out);
  ensure_dir(dir);
  write_volume(s.values, dir / "saliency.tvol");
  render_slices(v, plane, index, nullptr, dir / "slice.pgm");
  render_slices(v, plane, index, &s, dir / "overlay.ppm");
  out << (dir / "overlay.ppm").string() << '\n';
  return kExitOk;
}

struct EntropyArgs {
  Common common;
  std::string checkpoint, manifest, out;
  std::optional<int> n;
  std::optional<std::string> preset, mode;
};

int cmd_entropy(const EntropyArgs& a, std::ostream& out) {
  const RunConfig cfg = a.common.load();
  const int n = a.n.value_or(cfg.eval.tta_draws);
  const std::string preset = a.preset.value_or(cfg.eval.tta_preset);
  const EntropyMode mode = a.mode ? parse_entropy_mode(*a.mode) : cfg.eval.entropy_mode;
  const Classifier c = classifier_from_checkpoint(load_checkpoint(a.checkpoint));
  const Dataset d = load_nonempty(a.manifest, "input");
  const auto r = dataset_entropy(c, d, n, a.common.seed.value_or(0), augmentation_preset(preset), preset, mode);
  const fs::path path(a.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_entropy_csv(r, path);
  out << "mean_entropy " << r.mean << '\n';
  return kExitOk;
}

struct ReportArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string out, csv;
  std::optional<std::string> t_test;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const RunConfig cfg = a.common.load();
  std::vector<fs::path> paths;
  for (const auto& in : a.inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".json") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      paths.insert(paths.end(), found.begin(), found.end());
    } else {
      paths.push_back(p);
    }
  }
  if (paths.empty()) throw InvalidArgument("report: no metric files found");
  std::vector<MetricFile> files;
  for (const auto& p : paths) files.push_back(read_metric_file(p));
  ExperimentReport r = build_report(files, a.t_test ? parse_t_test_kind(*a.t_test) : cfg.eval.t_test);
  const auto& e = cfg.eval;
  r.energy = energy_ledger(e.devices, e.watts_per_device, e.hours_per_epoch, e.epochs, e.kg_co2_per_kwh);
  const fs::path path(a.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_text(path, report_json(r));
  if (!a.csv.empty()) write_text(a.csv, report_csv(r));
  for (const auto& m : r.models)
    out << m.task << '/' << m.model << " AUROC " << m.auroc.mean << " +/- " << m.auroc.ci95 << " (n=" << m.auroc.values.size() << ")\n";
  for (const auto& c : r.comparisons)
    out << c.task << ": " << c.model_a << " vs " << c.model_b << " p=" << c.p_raw << " adjusted=" << c.p_adjusted << " m=" << c.m << '\n';
  return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Volumetric masked-autoencoder pipeline", "voxmae"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "generate a synthetic labelled corpus");
  add_common(s_synth, synth.common);
  s_synth->add_option("--out", synth.out, "output directory")->required();
  s_synth->add_option("--split-train", synth.split_train);
  s_synth->add_option("--split-val", synth.split_val);
  s_synth->add_option("--split-test", synth.split_test);

  PreprocessArgs pre;
  auto* s_pre = app.add_subcommand("preprocess", "resample and normalize every volume of a manifest");
  s_pre->add_option("--manifest", pre.manifest)->required();
  s_pre->add_option("--out", pre.out)->required();
  s_pre->add_option("--size", pre.size, "cubic output edge")->capture_default_str();
  s_pre->add_option("--hu-lo", pre.hu_lo)->capture_default_str();
  s_pre->add_option("--hu-hi", pre.hu_hi)->capture_default_str();

  PretrainArgs pt;
  auto* s_pt = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
  add_common(s_pt, pt.common);
  s_pt->add_option("--manifest", pt.manifest)->required();
  s_pt->add_option("--out", pt.out, "checkpoint directory")->required();
  s_pt->add_option("--corpus-fraction", pt.corpus_fraction);
  s_pt->add_option("--epochs", pt.epochs);
  s_pt->add_option("--checkpoint-every", pt.checkpoint_every);
  s_pt->add_option("--from-checkpoint", pt.from_checkpoint, "resume from a pretraining checkpoint");
  s_pt->add_option("--preview", pt.preview, "directory for reconstruction slices");

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune", "fine-tune a classifier with early stopping");
  add_common(s_ft, ft.common);
  s_ft->add_option("--train-manifest", ft.train)->required();
  s_ft->add_option("--val-manifest", ft.val)->required();
  s_ft->add_option("--test-manifest", ft.test, "scored after training (defaults to validation)");
  s_ft->add_option("--out", ft.out)->required();
  s_ft->add_option("--from-checkpoint", ft.from_checkpoint, "pretraining checkpoint (omit to train from scratch)");
  s_ft->add_option("--seeds", ft.seeds, "runs with seeds base+0..n-1");
  s_ft->add_option("--label-fraction", ft.label_fraction);
  s_ft->add_option("--max-epochs", ft.max_epochs);
  s_ft->add_option("--head", ft.head, "linear, mlp64 or ann_probe");
  s_ft->add_option("--task", ft.task);
  s_ft->add_option("--model-name", ft.model_name);

  ProbeArgs pb;
  auto* s_pb = app.add_subcommand("probe", "ANN probe on frozen encoder features");
  add_common(s_pb, pb.common);
  s_pb->add_option("--from-checkpoint", pb.from_checkpoint)->required();
  s_pb->add_option("--train-manifest", pb.train)->required();
  s_pb->add_option("--test-manifest", pb.test)->required();
  s_pb->add_option("--out", pb.out)->required();
  s_pb->add_option("--seeds", pb.seeds);
  s_pb->add_option("--label-fraction", pb.label_fraction);
  s_pb->add_option("--task", pb.task);
  s_pb->add_option("--model-name", pb.model_name);

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "score fine-tuned checkpoints on a test manifest");
  s_ev->add_option("--checkpoint", ev.checkpoints)->required();
  s_ev->add_option("--test-manifest", ev.test)->required();
  s_ev->add_option("--train-manifest", ev.train, "manifest the checkpoints were trained on");
  s_ev->add_option("--out", ev.out)->required();
  s_ev->add_option("--task", ev.task);
  s_ev->add_option("--model-name", ev.model_name);

  GradcamArgs gc;
  auto* s_gc = app.add_subcommand("gradcam", "Grad-CAM saliency for one case");
  s_gc->add_option("--checkpoint", gc.checkpoint)->required();
  s_gc->add_option("--manifest", gc.manifest)->required();
  s_gc->add_option("--out", gc.out)->required();
  s_gc->add_option("--case", gc.case_index);
  s_gc->add_option("--class", gc.target_class);
  s_gc->add_option("--plane", gc.plane);
  s_gc->add_option("--slice", gc.slice, "slice index (default: middle)");

  EntropyArgs en;
  auto* s_en = app.add_subcommand("entropy", "test-time-augmentation entropy per case");
  add_common(s_en, en.common);
  s_en->add_option("--checkpoint", en.checkpoint)->required();
  s_en->add_option("--manifest", en.manifest)->required();
  s_en->add_option("--out", en.out, "CSV path")->required();
  s_en->add_option("-n,--draws", en.n);
  s_en->add_option("--preset", en.preset);
  s_en->add_option("--mode", en.mode, "mean_of_entropies or entropy_of_mean");

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "merge per-seed metric files");
  add_common(s_rp, rp.common);
  s_rp->add_option("inputs", rp.inputs, "metric JSON files or directories")->required();
  s_rp->add_option("--out", rp.out)->required();
  s_rp->add_option("--csv", rp.csv);
  s_rp->add_option("--t-test", rp.t_test, "welch, pooled or paired");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return kExitOk;
    }
    err << "voxmae: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (s_synth->parsed()) return cmd_synth(synth, out);
    if (s_pre->parsed()) return cmd_preprocess(pre, out);
    if (s_pt->parsed()) return cmd_pretrain(pt, out);
    if (s_ft->parsed()) return cmd_finetune(ft, out);
    if (s_pb->parsed()) return cmd_probe(pb, out);
    if (s_ev->parsed()) return cmd_eval(ev, out);
    if (s_gc->parsed()) return cmd_gradcam(gc, out);
    if (s_en->parsed()) return cmd_entropy(en, out);
    if (s_rp->parsed()) return cmd_report(rp, out);
  } catch (const InvalidArgument& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const UndefinedMetric& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "voxmae: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace voxmae
