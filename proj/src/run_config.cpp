#include "voxmae/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "voxmae/errors.hpp"

namespace voxmae {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same double.
std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw InvalidArgument("expected a number, got '" + s + "'");
  return x;
}

long long parse_int(const std::string& s) {
  long long x = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw InvalidArgument("expected an integer, got '" + s + "'");
  return x;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InvalidArgument("expected true or false, got '" + s + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  return out;
}

std::string fmt_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

Extents parse_extents(const std::string& s) {
  const auto items = split_list(s);
  if (items.size() == 1) {
    const int e = static_cast<int>(parse_int(items[0]));
    return {e, e, e};
  }
  if (items.size() != 3) throw InvalidArgument("expected one or three extents, got '" + s + "'");
  return {static_cast<int>(parse_int(items[0])), static_cast<int>(parse_int(items[1])), static_cast<int>(parse_int(items[2]))};
}

std::string fmt_extents(const Extents& e) { return std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]); }

std::optional<double> parse_optional(const std::string& s) {
  if (s == "none") return std::nullopt;
  return parse_double(s);
}

std::string fmt_optional(const std::optional<double>& x) { return x ? fmt(*x) : "none"; }

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define VOX_INT(sec, name, expr) \
  Field { sec, name, [](const RunConfig& c) { return std::to_string(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = static_cast<decltype(c.expr)>(parse_int(v)); } }
#define VOX_REAL(sec, name, expr) \
  Field { sec, name, [](const RunConfig& c) { return fmt(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); } }
#define VOX_BOOL(sec, name, expr) \
  Field { sec, name, [](const RunConfig& c) { return fmt_bool(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); } }
#define VOX_OPT(sec, name, expr) \
  Field { sec, name, [](const RunConfig& c) { return fmt_optional(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_optional(v); } }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      VOX_INT("model", "patch_size", model.patch_size),
      Field{"model", "input_dims", [](const RunConfig& c) { return fmt_extents(c.model.input_dims); },
            [](RunConfig& c, const std::string& v) { c.model.input_dims = parse_extents(v); }},
      VOX_INT("model", "embed_dim", model.embed_dim),
      VOX_INT("model", "depth", model.depth),
      VOX_INT("model", "heads", model.heads),
      VOX_REAL("model", "mlp_ratio", model.mlp_ratio),
      VOX_INT("model", "decoder_dim", model.decoder_dim),
      VOX_INT("model", "decoder_depth", model.decoder_depth),
      VOX_INT("model", "decoder_heads", model.decoder_heads),
      VOX_REAL("model", "mask_ratio", model.mask_ratio),
      VOX_BOOL("model", "masked_loss_only", model.masked_loss_only),

      VOX_REAL("pretrain", "base_lr", pretrain.schedule.base_lr),
      VOX_INT("pretrain", "warmup_epochs", pretrain.schedule.warmup_epochs),
      VOX_INT("pretrain", "total_epochs", pretrain.schedule.total_epochs),
      VOX_REAL("pretrain", "final_lr", pretrain.schedule.final_lr),
      VOX_REAL("pretrain", "corpus_fraction", pretrain.corpus_fraction),
      VOX_BOOL("pretrain", "stratify_by_source", pretrain.stratify_by_source),
      VOX_INT("pretrain", "batch_size", pretrain.batch_size),
      VOX_INT("pretrain", "accumulation_steps", pretrain.accumulation_steps),
      VOX_INT("pretrain", "seed", pretrain.seed),
      VOX_INT("pretrain", "checkpoint_every", pretrain.checkpoint_every),
      VOX_OPT("pretrain", "grad_clip", pretrain.grad_clip),
      VOX_BOOL("pretrain", "flip_augment", pretrain.flip_augment),

      Field{"finetune", "head", [](const RunConfig& c) { return to_string(c.finetune.head.kind); },
            [](RunConfig& c, const std::string& v) { c.finetune.head.kind = parse_head_kind(v); }},
      VOX_REAL("finetune", "base_lr", finetune.schedule.base_lr),
      VOX_INT("finetune", "warmup_epochs", finetune.schedule.warmup_epochs),
      VOX_INT("finetune", "total_epochs", finetune.schedule.total_epochs),
      VOX_REAL("finetune", "final_lr", finetune.schedule.final_lr),
      VOX_OPT("finetune", "layer_decay", finetune.schedule.layer_decay),
      VOX_INT("finetune", "max_epochs", finetune.max_epochs),
      VOX_REAL("finetune", "label_fraction", finetune.label_fraction),
      VOX_INT("finetune", "microbatch", finetune.microbatch),
      VOX_INT("finetune", "accumulation_steps", finetune.accumulation_steps),
      VOX_INT("finetune", "patience", finetune.patience),
      VOX_INT("finetune", "seed", finetune.seed),
      Field{"finetune", "pos_weight",
            [](const RunConfig& c) { return c.finetune.pos_weight_override ? fmt_doubles(*c.finetune.pos_weight_override) : std::string("auto"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "auto") c.finetune.pos_weight_override.reset();
              else c.finetune.pos_weight_override = parse_doubles(v);
            }},
      VOX_OPT("finetune", "grad_clip", finetune.grad_clip),
      VOX_INT("finetune", "probe_epochs", probe.epochs),
      VOX_INT("finetune", "probe_batch_size", probe.batch_size),
      VOX_REAL("finetune", "probe_lr", probe.lr),

      VOX_INT("eval", "seeds", eval.seeds),
      VOX_INT("eval", "tta_draws", eval.tta_draws),
      Field{"eval", "tta_preset", [](const RunConfig& c) { return c.eval.tta_preset; },
            [](RunConfig& c, const std::string& v) {
              augmentation_preset(v);
              c.eval.tta_preset = v;
            }},
      Field{"eval", "entropy_mode", [](const RunConfig& c) { return to_string(c.eval.entropy_mode); },
            [](RunConfig& c, const std::string& v) { c.eval.entropy_mode = parse_entropy_mode(v); }},
      Field{"eval", "t_test", [](const RunConfig& c) { return to_string(c.eval.t_test); },
            [](RunConfig& c, const std::string& v) { c.eval.t_test = parse_t_test_kind(v); }},
      VOX_REAL("eval", "devices", eval.devices),
      VOX_REAL("eval", "watts_per_device", eval.watts_per_device),
      VOX_REAL("eval", "hours_per_epoch", eval.hours_per_epoch),
      VOX_REAL("eval", "epochs", eval.epochs),
      VOX_REAL("eval", "kg_co2_per_kwh", eval.kg_co2_per_kwh),

      VOX_REAL("augment", "flip_x", finetune.augmentation.flip_probability[0]),
      VOX_REAL("augment", "flip_y", finetune.augmentation.flip_probability[1]),
      VOX_REAL("augment", "flip_z", finetune.augmentation.flip_probability[2]),
      VOX_REAL("augment", "rotation_max_deg", finetune.augmentation.rotation_max_deg),
      VOX_REAL("augment", "scale_lo", finetune.augmentation.scale_lo),
      VOX_REAL("augment", "scale_hi", finetune.augmentation.scale_hi),
      VOX_REAL("augment", "noise_sigma", finetune.augmentation.noise_sigma),
      VOX_REAL("augment", "smooth_sigma_lo", finetune.augmentation.smooth_sigma_lo),
      VOX_REAL("augment", "smooth_sigma_hi", finetune.augmentation.smooth_sigma_hi),
      VOX_REAL("augment", "gamma_lo", finetune.augmentation.gamma_lo),
      VOX_REAL("augment", "gamma_hi", finetune.augmentation.gamma_hi),
      VOX_INT("augment", "translation_max_voxels", finetune.augmentation.translation_max_voxels),

      Field{"synth", "dims", [](const RunConfig& c) { return fmt_extents(c.synth.dims); },
            [](RunConfig& c, const std::string& v) { c.synth.dims = parse_extents(v); }},
      VOX_INT("synth", "n_volumes", synth.n_volumes),
      VOX_INT("synth", "class_count", synth.class_count),
      VOX_REAL("synth", "lesion_radius_lo", synth.lesion_radius_lo),
      VOX_REAL("synth", "lesion_radius_hi", synth.lesion_radius_hi),
      VOX_REAL("synth", "lesion_intensity_delta", synth.lesion_intensity_delta),
      VOX_REAL("synth", "background_texture_scale", synth.background_texture_scale),
      Field{"synth", "prevalence", [](const RunConfig& c) { return fmt_doubles(c.synth.prevalence); },
            [](RunConfig& c, const std::string& v) { c.synth.prevalence = parse_doubles(v); }},
      VOX_INT("synth", "seed", synth.seed),
      VOX_INT("synth", "decoy_max", synth.decoy_max),
      VOX_REAL("synth", "decoy_radius", synth.decoy_radius),
      VOX_BOOL("synth", "hounsfield", synth.hounsfield),
  };
  return table;
}

#undef VOX_INT
#undef VOX_REAL
#undef VOX_BOOL
#undef VOX_OPT

const std::vector<std::string> kSections = {"model", "pretrain", "finetune", "eval", "augment", "synth"};

void sync(RunConfig& c) {
  c.pretrain.model = c.model;
  c.finetune.model = c.model;
}

}  // namespace

std::string to_string(TTestKind k) {
  switch (k) {
    case TTestKind::Welch: return "welch";
    case TTestKind::Pooled: return "pooled";
    case TTestKind::Paired: return "paired";
  }
  return "welch";
}

TTestKind parse_t_test_kind(const std::string& s) {
  if (s == "welch") return TTestKind::Welch;
  if (s == "pooled") return TTestKind::Pooled;
  if (s == "paired") return TTestKind::Paired;
  throw InvalidArgument("unknown t-test kind '" + s + "' (expected welch, pooled or paired)");
}

AugmentationSpec augmentation_preset(const std::string& name) {
  if (name == "identity") return AugmentationSpec::identity();
  if (name == "finetune_default") return AugmentationSpec::finetune_default();
  if (name == "desk_finetune") return AugmentationSpec::desk_finetune();
  if (name == "aggressive") return AugmentationSpec::aggressive();
  if (name == "pretrain_flips") return AugmentationSpec::pretrain_flips();
  throw InvalidArgument("unknown augmentation preset '" + name + "'");
}

RunConfig RunConfig::desk_default() {
  RunConfig c;
  c.model = ModelConfig::tiny();
  c.pretrain.schedule = ScheduleSpec::pretrain_default();
  c.pretrain.schedule.base_lr = 1e-3;
  c.pretrain.schedule.warmup_epochs = 2;
  c.pretrain.schedule.total_epochs = 40;
  c.pretrain.batch_size = 4;
  c.finetune.schedule = ScheduleSpec::finetune_default();
  c.finetune.schedule.base_lr = 1e-3;
  c.finetune.schedule.warmup_epochs = 3;
  c.finetune.schedule.total_epochs = 30;
  c.finetune.max_epochs = 30;
  c.finetune.patience = 10;
  c.finetune.head.kind = HeadKind::Mlp64;
  c.finetune.augmentation = AugmentationSpec::desk_finetune();
  c.synth = SyntheticSpec{};
  c.synth.n_volumes = 128;
  c.synth.lesion_radius_lo = 4.0;
  c.synth.lesion_radius_hi = 6.0;
  c.synth.decoy_max = 2;
  sync(c);
  return c;
}

void RunConfig::validate() const {
  model.validate();
  pretrain.validate();
  finetune.validate();
  synth.validate();
  if (eval.seeds < 1) throw InvalidArgument("[eval] seeds must be at least 1");
  if (eval.tta_draws < 1) throw InvalidArgument("[eval] tta_draws must be at least 1");
  if (probe.epochs < 1 || probe.batch_size < 1 || !(probe.lr > 0.0)) throw InvalidArgument("[finetune] probe settings must be positive");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c = RunConfig::desk_default();
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw InvalidArgument(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
        throw InvalidArgument(where + "unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidArgument(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw InvalidArgument(where + "key '" + key + "' appears before any section");
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == table.end()) throw InvalidArgument(where + "unknown key '" + key + "' in section [" + section + "]");
    try {
      it->set(c, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(where + section + "." + key + ": " + e.what());
    }
  }
  sync(c);
  c.validate();
  return c;
}

std::string serialize_run_config(const RunConfig& c) {
  std::string out;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      out += (current.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.section + "." + f.key);
  return keys;
}

}  // namespace voxmae
