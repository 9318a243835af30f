#include "voxmae/model.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "voxmae/errors.hpp"
#include "voxmae/rng.hpp"

namespace voxmae {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (patch_size <= 0) throw InvalidArgument("ModelConfig: patch_size must be positive");
  for (int e : input_dims)
    if (e <= 0 || e % patch_size != 0)
      throw InvalidArgument("ModelConfig: input extent " + std::to_string(e) + " not divisible by patch size " + std::to_string(patch_size));
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw InvalidArgument("ModelConfig: embed_dim must be divisible by heads");
  if (decoder_dim <= 0 || decoder_heads <= 0 || decoder_dim % decoder_heads != 0)
    throw InvalidArgument("ModelConfig: decoder_dim must be divisible by decoder_heads");
  if (embed_dim < 6 || decoder_dim < 6) throw InvalidArgument("ModelConfig: widths must be at least 6");
  if (depth < 1 || decoder_depth < 1) throw InvalidArgument("ModelConfig: depths must be positive");
  if (!(mlp_ratio > 0.0)) throw InvalidArgument("ModelConfig: mlp_ratio must be positive");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw InvalidArgument("ModelConfig: mask_ratio must lie in (0,1)");
  if (n_tokens() < 2) throw InvalidArgument("ModelConfig: at least two tokens required");
  if (n_visible() < 1 || n_visible() >= n_tokens()) throw InvalidArgument("ModelConfig: mask ratio leaves no masked or no visible token");
}

Extents ModelConfig::grid() const {
  return {input_dims[0] / patch_size, input_dims[1] / patch_size, input_dims[2] / patch_size};
}

int ModelConfig::n_tokens() const {
  const auto g = grid();
  return g[0] * g[1] * g[2];
}

int ModelConfig::patch_volume() const { return patch_size * patch_size * patch_size; }

int ModelConfig::n_visible() const { return static_cast<int>(std::lround((1.0 - mask_ratio) * n_tokens())); }

int ModelConfig::mlp_hidden() const { return static_cast<int>(std::lround(embed_dim * mlp_ratio)); }

int ModelConfig::decoder_mlp_hidden() const { return static_cast<int>(std::lround(decoder_dim * mlp_ratio)); }

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "patch_size=" << patch_size << '\n'
     << "input_dims=" << input_dims[0] << ',' << input_dims[1] << ',' << input_dims[2] << '\n'
     << "embed_dim=" << embed_dim << '\n'
     << "depth=" << depth << '\n'
     << "heads=" << heads << '\n'
     << "mlp_ratio=" << mlp_ratio << '\n'
     << "decoder_dim=" << decoder_dim << '\n'
     << "decoder_depth=" << decoder_depth << '\n'
     << "decoder_heads=" << decoder_heads << '\n'
     << "mask_ratio=" << mask_ratio << '\n'
     << "masked_loss_only=" << (masked_loss_only ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("ModelConfig: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "patch_size") c.patch_size = std::stoi(value);
      else if (key == "input_dims") {
        char sep;
        std::istringstream vs(value);
        vs >> c.input_dims[0] >> sep >> c.input_dims[1] >> sep >> c.input_dims[2];
        if (!vs) throw FormatError("bad extents");
      } else if (key == "embed_dim") c.embed_dim = std::stoi(value);
      else if (key == "depth") c.depth = std::stoi(value);
      else if (key == "heads") c.heads = std::stoi(value);
      else if (key == "mlp_ratio") c.mlp_ratio = std::stod(value);
      else if (key == "decoder_dim") c.decoder_dim = std::stoi(value);
      else if (key == "decoder_depth") c.decoder_depth = std::stoi(value);
      else if (key == "decoder_heads") c.decoder_heads = std::stoi(value);
      else if (key == "mask_ratio") c.mask_ratio = std::stod(value);
      else if (key == "masked_loss_only") c.masked_loss_only = std::stoi(value) != 0;
      else throw FormatError("ModelConfig: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("ModelConfig: bad value for '" + key + "'");
    }
  }
  return c;
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t ModelConfig::hash() const { return fnv1a(serialize()); }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.patch_size = 8;
  c.input_dims = {32, 32, 32};
  c.embed_dim = 48;
  c.depth = 2;
  c.heads = 4;
  c.mlp_ratio = 4.0;
  c.decoder_dim = 24;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  c.mask_ratio = 0.75;
  return c;
}

// ---------------------------------------------------------------- tokens

PatchSequence patchify(const Volume& v, int patch_size) {
  if (patch_size <= 0) throw InvalidArgument("patchify: patch size must be positive");
  for (int e : v.dims)
    if (e % patch_size != 0)
      throw InvalidArgument("patchify: extent " + std::to_string(e) + " not divisible by patch size " + std::to_string(patch_size));
  if (v.voxels.size() != v.voxel_count()) throw InvalidArgument("patchify: voxel count does not match extents");
  PatchSequence s;
  s.patch_size = patch_size;
  s.spacing = v.spacing;
  s.grid = {v.dims[0] / patch_size, v.dims[1] / patch_size, v.dims[2] / patch_size};
  const int p = patch_size;
  s.tokens = Matrix<float>(s.grid[0] * s.grid[1] * s.grid[2], p * p * p);
  int t = 0;
  for (int gz = 0; gz < s.grid[2]; ++gz)
    for (int gy = 0; gy < s.grid[1]; ++gy)
      for (int gx = 0; gx < s.grid[0]; ++gx, ++t) {
        float* row = s.tokens.row(t);
        for (int z = 0; z < p; ++z)
          for (int y = 0; y < p; ++y) std::memcpy(row + (z * p + y) * p, &v.voxels[v.index(gx * p, gy * p + y, gz * p + z)], sizeof(float) * p);
      }
  return s;
}

Volume unpatchify(const PatchSequence& s, Unit unit) {
  const int p = s.patch_size;
  if (p <= 0 || s.tokens.cols() != p * p * p)
    throw InvalidArgument("unpatchify: token length " + std::to_string(s.tokens.cols()) + " is not patch_size^3");
  for (int g : s.grid)
    if (g <= 0) throw InvalidArgument("unpatchify: grid extents must be positive");
  if (s.tokens.rows() != s.grid[0] * s.grid[1] * s.grid[2])
    throw InvalidArgument("unpatchify: token count " + std::to_string(s.tokens.rows()) + " does not match grid");
  Volume v({s.grid[0] * p, s.grid[1] * p, s.grid[2] * p}, s.spacing, Unit::Normalized);
  v.unit = unit;
  int t = 0;
  for (int gz = 0; gz < s.grid[2]; ++gz)
    for (int gy = 0; gy < s.grid[1]; ++gy)
      for (int gx = 0; gx < s.grid[0]; ++gx, ++t) {
        const float* row = s.tokens.row(t);
        for (int z = 0; z < p; ++z)
          for (int y = 0; y < p; ++y) std::memcpy(&v.voxels[v.index(gx * p, gy * p + y, gz * p + z)], row + (z * p + y) * p, sizeof(float) * p);
      }
  return v;
}

Matrix<double> posembed_3d(Extents grid, int dim) {
  if (dim <= 0 || dim % 6 != 0) throw InvalidArgument("posembed_3d: dim " + std::to_string(dim) + " is not divisible by 6");
  for (int g : grid)
    if (g <= 0) throw InvalidArgument("posembed_3d: grid extents must be positive");
  const int axis_dim = dim / 3;
  const int half = axis_dim / 2;
  std::vector<double> omega(static_cast<std::size_t>(half));
  for (int i = 0; i < half; ++i) omega[static_cast<std::size_t>(i)] = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
  Matrix<double> table(grid[0] * grid[1] * grid[2], dim);
  int t = 0;
  for (int z = 0; z < grid[2]; ++z)
    for (int y = 0; y < grid[1]; ++y)
      for (int x = 0; x < grid[0]; ++x, ++t) {
        const int coord[3] = {x, y, z};
        double* row = table.row(t);
        for (int a = 0; a < 3; ++a) {
          double* block = row + a * axis_dim;
          for (int i = 0; i < half; ++i) {
            const double angle = coord[a] * omega[static_cast<std::size_t>(i)];
            block[i] = std::sin(angle);
            block[half + i] = std::cos(angle);
          }
        }
      }
  return table;
}

template <typename Real>
Matrix<Real> padded_posembed(Extents grid, int dim) {
  const int usable = dim - dim % 6;
  const Matrix<double> core = posembed_3d(grid, usable);
  Matrix<Real> out(core.rows(), dim);
  for (int r = 0; r < core.rows(); ++r)
    for (int c = 0; c < usable; ++c) out(r, c) = static_cast<Real>(core(r, c));
  return out;
}

MaskPlan random_mask(int n_tokens, double mask_ratio, std::uint64_t seed) {
  if (n_tokens < 2) throw InvalidArgument("random_mask: at least two tokens required");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw InvalidArgument("random_mask: mask ratio must lie in (0,1)");
  const int n_visible = static_cast<int>(std::lround((1.0 - mask_ratio) * n_tokens));
  if (n_visible <= 0 || n_visible >= n_tokens)
    throw InvalidArgument("random_mask: ratio " + std::to_string(mask_ratio) + " leaves " + std::to_string(n_visible) + " of " +
                          std::to_string(n_tokens) + " tokens visible");
  Rng rng(seed);
  MaskPlan plan;
  plan.n_tokens = n_tokens;
  plan.n_visible = n_visible;
  plan.shuffle = random_permutation(n_tokens, rng);
  plan.restore.assign(static_cast<std::size_t>(n_tokens), 0);
  plan.visible.assign(static_cast<std::size_t>(n_tokens), 0);
  for (int j = 0; j < n_tokens; ++j) {
    const int token = plan.shuffle[static_cast<std::size_t>(j)];
    plan.restore[static_cast<std::size_t>(token)] = j;
    plan.visible[static_cast<std::size_t>(token)] = j < n_visible ? 1 : 0;
  }
  return plan;
}

// ---------------------------------------------------------------- parameters

template <typename Real>
Matrix<Real>& ParameterSet<Real>::at(const std::string& name) {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw InvalidArgument("ParameterSet: no array named '" + name + "'");
  return it->second;
}

template <typename Real>
const Matrix<Real>& ParameterSet<Real>::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw InvalidArgument("ParameterSet: no array named '" + name + "'");
  return it->second;
}

template <typename Real>
std::size_t ParameterSet<Real>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : arrays) n += m.size();
  return n;
}

template <typename Real>
ParameterSet<Real> ParameterSet<Real>::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, m] : arrays) out.arrays.emplace(name, Matrix<Real>(m.rows(), m.cols()));
  return out;
}

template <typename Real>
ParameterSet<Real> ParameterSet<Real>::filtered(const std::function<bool(const std::string&)>& keep) const {
  ParameterSet out;
  for (const auto& [name, m] : arrays)
    if (keep(name)) out.arrays.emplace(name, m);
  return out;
}

template <typename Real>
std::uint64_t ParameterSet<Real>::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, m] : arrays) {
    h = fnv1a(name, h);
    h = fnv1a(std::string(reinterpret_cast<const char*>(m.storage().data()), m.size() * sizeof(Real)), h);
  }
  return h;
}

namespace {

void add_block_shapes(std::vector<ParameterShape>& out, const std::string& prefix, int dim, int hidden) {
  out.push_back({prefix + "norm1.gain", 1, dim});
  out.push_back({prefix + "norm1.bias", 1, dim});
  out.push_back({prefix + "attn.qkv.weight", dim, 3 * dim});
  out.push_back({prefix + "attn.qkv.bias", 1, 3 * dim});
  out.push_back({prefix + "attn.proj.weight", dim, dim});
  out.push_back({prefix + "attn.proj.bias", 1, dim});
  out.push_back({prefix + "norm2.gain", 1, dim});
  out.push_back({prefix + "norm2.bias", 1, dim});
  out.push_back({prefix + "mlp.fc1.weight", dim, hidden});
  out.push_back({prefix + "mlp.fc1.bias", 1, hidden});
  out.push_back({prefix + "mlp.fc2.weight", hidden, dim});
  out.push_back({prefix + "mlp.fc2.bias", 1, dim});
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<ParameterShape> parameter_shapes(const ModelConfig& cfg, bool include_decoder) {
  cfg.validate();
  std::vector<ParameterShape> out;
  const int d = cfg.embed_dim;
  out.push_back({"patch_embed.weight", cfg.patch_volume(), d});
  out.push_back({"patch_embed.bias", 1, d});
  out.push_back({"cls_token", 1, d});
  for (int b = 0; b < cfg.depth; ++b) add_block_shapes(out, "blocks." + std::to_string(b) + ".", d, cfg.mlp_hidden());
  out.push_back({"norm.gain", 1, d});
  out.push_back({"norm.bias", 1, d});
  if (include_decoder) {
    const int dd = cfg.decoder_dim;
    out.push_back({"decoder_embed.weight", d, dd});
    out.push_back({"decoder_embed.bias", 1, dd});
    out.push_back({"mask_token", 1, dd});
    for (int b = 0; b < cfg.decoder_depth; ++b)
      add_block_shapes(out, "decoder_blocks." + std::to_string(b) + ".", dd, cfg.decoder_mlp_hidden());
    out.push_back({"decoder_norm.gain", 1, dd});
    out.push_back({"decoder_norm.bias", 1, dd});
    out.push_back({"decoder_pred.weight", dd, cfg.patch_volume()});
    out.push_back({"decoder_pred.bias", 1, cfg.patch_volume()});
  }
  return out;
}

std::int64_t count_parameters(const ModelConfig& cfg, bool include_decoder) {
  std::int64_t n = 0;
  for (const auto& s : parameter_shapes(cfg, include_decoder)) n += static_cast<std::int64_t>(s.rows) * s.cols;
  return n;
}

bool is_decoder_parameter(const std::string& name) {
  return name.rfind("decoder_", 0) == 0 || name == "mask_token";
}

template <typename Real>
ParameterSet<Real> init_parameters(const ModelConfig& cfg, std::uint64_t seed, bool include_decoder) {
  Rng rng(seed);
  auto trunc_normal = [&rng]() {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    return 0.02 * z;
  };
  ParameterSet<Real> p;
  for (const auto& s : parameter_shapes(cfg, include_decoder)) {
    Matrix<Real> m(s.rows, s.cols);
    if (ends_with(s.name, ".gain")) {
      m.fill(Real(1));
    } else if (ends_with(s.name, ".bias")) {
      // zeros
    } else {
      for (auto& x : m.storage()) x = static_cast<Real>(trunc_normal());
    }
    p.arrays.emplace(s.name, std::move(m));
  }
  return p;
}

// ---------------------------------------------------------------- forward passes

template <typename Real>
ad::Var BoundParameters<Real>::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw InvalidArgument("missing parameter '" + name + "'");
  return it->second;
}

template <typename Real>
BoundParameters<Real> bind_parameters(ad::Tape<Real>& tape, const ParameterSet<Real>& params, bool requires_grad) {
  BoundParameters<Real> b;
  for (const auto& [name, m] : params.arrays) b.vars.emplace(name, requires_grad ? tape.parameter(m) : tape.constant(m));
  return b;
}

template <typename Real>
GradientSet<Real> collect_gradients(const ad::Tape<Real>& tape, const BoundParameters<Real>& bound, const ParameterSet<Real>& params) {
  GradientSet<Real> g = params.zeros_like();
  for (auto& [name, m] : g.arrays) {
    auto it = bound.vars.find(name);
    if (it == bound.vars.end()) continue;
    const auto& grad = tape.grad(it->second);
    if (!grad.empty()) m = grad;
  }
  return g;
}

namespace {

template <typename Real>
ad::Var transformer_block(ad::Tape<Real>& t, const BoundParameters<Real>& p, const std::string& prefix, ad::Var h, int heads,
                          std::vector<Matrix<Real>>* capture) {
  ad::Var a = ad::layer_norm(t, h, p[prefix + "norm1.gain"], p[prefix + "norm1.bias"]);
  ad::Var qkv = ad::linear(t, a, p[prefix + "attn.qkv.weight"], p[prefix + "attn.qkv.bias"]);
  ad::Var att = ad::attention(t, qkv, heads, capture);
  h = ad::add(t, h, ad::linear(t, att, p[prefix + "attn.proj.weight"], p[prefix + "attn.proj.bias"]));
  ad::Var b = ad::layer_norm(t, h, p[prefix + "norm2.gain"], p[prefix + "norm2.bias"]);
  ad::Var m = ad::gelu(t, ad::linear(t, b, p[prefix + "mlp.fc1.weight"], p[prefix + "mlp.fc1.bias"]));
  return ad::add(t, h, ad::linear(t, m, p[prefix + "mlp.fc2.weight"], p[prefix + "mlp.fc2.bias"]));
}

template <typename Real>
void check_sequence(const ModelConfig& cfg, const PatchSequence& seq) {
  if (seq.patch_size != cfg.patch_size || seq.grid != cfg.grid() || seq.tokens.cols() != cfg.patch_volume())
    throw InvalidArgument("encode: patch sequence does not match the model configuration");
}

}  // namespace

template <typename Real>
EncoderVars encoder_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, const PatchSequence& seq,
                            const MaskPlan* plan, Instrumentation<Real>* instr) {
  check_sequence<Real>(cfg, seq);
  const int n = seq.n_tokens();
  std::vector<int> tokens;
  if (plan) {
    if (plan->n_tokens != n) throw InvalidArgument("encode: mask plan covers " + std::to_string(plan->n_tokens) + " tokens, sequence has " + std::to_string(n));
    tokens = plan->visible_tokens();
  } else {
    tokens.resize(static_cast<std::size_t>(n));
    std::iota(tokens.begin(), tokens.end(), 0);
  }

  // Only the kept rows are copied onto the tape.
  const int d = cfg.embed_dim;
  const Matrix<Real> pos_table = padded_posembed<Real>(cfg.grid(), d);
  Matrix<Real> x(static_cast<int>(tokens.size()), seq.tokens.cols());
  Matrix<Real> pos(static_cast<int>(tokens.size()), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const float* src = seq.tokens.row(tokens[i]);
    Real* dst = x.row(static_cast<int>(i));
    for (int c = 0; c < x.cols(); ++c) dst[c] = static_cast<Real>(src[c]);
    std::copy_n(pos_table.row(tokens[i]), d, pos.row(static_cast<int>(i)));
  }

  ad::Var h = ad::linear(tape, tape.constant(std::move(x)), p["patch_embed.weight"], p["patch_embed.bias"]);
  h = ad::add(tape, h, tape.constant(std::move(pos)));
  // The class token carries a zero positional row.
  h = ad::concat_rows(tape, p["cls_token"], h);

  if (instr && instr->capture_attention) instr->encoder_attention.assign(static_cast<std::size_t>(cfg.depth), {});
  for (int b = 0; b < cfg.depth; ++b) {
    auto* capture = (instr && instr->capture_attention) ? &instr->encoder_attention[static_cast<std::size_t>(b)] : nullptr;
    h = transformer_block(tape, p, "blocks." + std::to_string(b) + ".", h, cfg.heads, capture);
  }
  EncoderVars out;
  out.last_block = h;
  out.latent = ad::layer_norm(tape, h, p["norm.gain"], p["norm.bias"]);
  return out;
}

template <typename Real>
ad::Var decoder_forward(ad::Tape<Real>& tape, const BoundParameters<Real>& p, const ModelConfig& cfg, ad::Var latent,
                        const MaskPlan& plan, Instrumentation<Real>* instr) {
  const int n = cfg.n_tokens();
  if (plan.n_tokens != n || static_cast<int>(plan.restore.size()) != n)
    throw InvalidArgument("decode: mask plan does not match the token grid");
  if (tape.value(latent).rows() != 1 + plan.n_visible)
    throw InvalidArgument("decode: latent has " + std::to_string(tape.value(latent).rows()) + " rows, plan expects " +
                          std::to_string(1 + plan.n_visible));
  ad::Var y = ad::linear(tape, latent, p["decoder_embed.weight"], p["decoder_embed.bias"]);
  ad::Var cls = ad::slice_rows(tape, y, 0, 1);
  ad::Var vis = ad::slice_rows(tape, y, 1, plan.n_visible);
  ad::Var full = ad::unshuffle_with_mask(tape, vis, p["mask_token"], plan.restore);
  if (instr) {
    const auto& cv = tape.value(cls);
    const auto& fv = tape.value(full);
    instr->decoder_input = Matrix<Real>(1 + fv.rows(), fv.cols());
    std::copy_n(cv.row(0), cv.cols(), instr->decoder_input.row(0));
    std::copy(fv.storage().begin(), fv.storage().end(), instr->decoder_input.row(1));
  }
  full = ad::add(tape, full, tape.constant(padded_posembed<Real>(cfg.grid(), cfg.decoder_dim)));
  ad::Var h = ad::concat_rows(tape, cls, full);
  if (instr && instr->capture_attention) instr->decoder_attention.assign(static_cast<std::size_t>(cfg.decoder_depth), {});
  for (int b = 0; b < cfg.decoder_depth; ++b) {
    auto* capture = (instr && instr->capture_attention) ? &instr->decoder_attention[static_cast<std::size_t>(b)] : nullptr;
    h = transformer_block(tape, p, "decoder_blocks." + std::to_string(b) + ".", h, cfg.decoder_heads, capture);
  }
  h = ad::layer_norm(tape, h, p["decoder_norm.gain"], p["decoder_norm.bias"]);
  h = ad::slice_rows(tape, h, 1, n);
  return ad::sigmoid(tape, ad::linear(tape, h, p["decoder_pred.weight"], p["decoder_pred.bias"]));
}

template <typename Real>
LatentSequence<Real> encode(const ParameterSet<Real>& params, const ModelConfig& cfg, const PatchSequence& seq, const MaskPlan* plan,
                            Instrumentation<Real>* instr) {
  ad::Tape<Real> tape;
  const auto bound = bind_parameters(tape, params, false);
  const EncoderVars out = encoder_forward(tape, bound, cfg, seq, plan, instr);
  LatentSequence<Real> latent;
  latent.rows = tape.value(out.latent);
  if (plan) latent.plan = *plan;
  return latent;
}

template <typename Real>
PatchSequence decode(const ParameterSet<Real>& params, const ModelConfig& cfg, const LatentSequence<Real>& latent,
                     Instrumentation<Real>* instr) {
  if (!latent.plan) throw InvalidArgument("decode: latent sequence has no mask plan");
  ad::Tape<Real> tape;
  const auto bound = bind_parameters(tape, params, false);
  const ad::Var lat = tape.constant(latent.rows);
  const ad::Var out = decoder_forward(tape, bound, cfg, lat, *latent.plan, instr);
  PatchSequence s;
  s.patch_size = cfg.patch_size;
  s.grid = cfg.grid();
  s.tokens = matrix_cast<float>(tape.value(out));
  return s;
}

double mae_loss(const PatchSequence& recon, const PatchSequence& target, const MaskPlan& plan, bool masked_only) {
  if (!recon.tokens.same_shape(target.tokens))
    throw InvalidArgument("mae_loss: shape mismatch " + recon.tokens.shape_string() + " vs " + target.tokens.shape_string());
  if (plan.n_tokens != recon.n_tokens()) throw InvalidArgument("mae_loss: plan does not match token count");
  double acc = 0.0;
  std::size_t rows = 0;
  for (int r = 0; r < recon.n_tokens(); ++r) {
    if (masked_only && plan.visible[static_cast<std::size_t>(r)]) continue;
    ++rows;
    for (int c = 0; c < recon.tokens.cols(); ++c) {
      const double e = double(recon.tokens(r, c)) - double(target.tokens(r, c));
      acc += e * e;
    }
  }
  if (rows == 0) throw InvalidArgument("mae_loss: no masked tokens");
  return acc / (static_cast<double>(rows) * recon.tokens.cols());
}

template <typename Real>
MaeStep<Real> mae_forward_backward(const ParameterSet<Real>& params, const ModelConfig& cfg, const PatchSequence& seq,
                                   const MaskPlan& plan) {
  ad::Tape<Real> tape;
  const auto bound = bind_parameters(tape, params, true);
  const EncoderVars enc = encoder_forward(tape, bound, cfg, seq, &plan, static_cast<Instrumentation<Real>*>(nullptr));
  const ad::Var recon = decoder_forward(tape, bound, cfg, enc.latent, plan, static_cast<Instrumentation<Real>*>(nullptr));
  std::vector<char> rows(static_cast<std::size_t>(plan.n_tokens), 1);
  if (cfg.masked_loss_only)
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = plan.visible[i] ? 0 : 1;
  const ad::Var loss = ad::masked_mse(tape, recon, matrix_cast<Real>(seq.tokens), std::move(rows));
  tape.backward(loss);
  MaeStep<Real> step;
  step.loss = tape.value(loss)[0];
  step.grads = collect_gradients(tape, bound, params);
  step.reconstruction = tape.value(recon);
  return step;
}

#define VOXMAE_INSTANTIATE_MODEL(Real)                                                                                                  \
  template struct ParameterSet<Real>;                                                                                                   \
  template struct BoundParameters<Real>;                                                                                                \
  template Matrix<Real> padded_posembed<Real>(Extents, int);                                                                            \
  template ParameterSet<Real> init_parameters<Real>(const ModelConfig&, std::uint64_t, bool);                                           \
  template BoundParameters<Real> bind_parameters<Real>(ad::Tape<Real>&, const ParameterSet<Real>&, bool);                               \
  template GradientSet<Real> collect_gradients<Real>(const ad::Tape<Real>&, const BoundParameters<Real>&, const ParameterSet<Real>&);   \
  template EncoderVars encoder_forward<Real>(ad::Tape<Real>&, const BoundParameters<Real>&, const ModelConfig&, const PatchSequence&,    \
                                             const MaskPlan*, Instrumentation<Real>*);                                                  \
  template ad::Var decoder_forward<Real>(ad::Tape<Real>&, const BoundParameters<Real>&, const ModelConfig&, ad::Var, const MaskPlan&,   \
                                         Instrumentation<Real>*);                                                                       \
  template LatentSequence<Real> encode<Real>(const ParameterSet<Real>&, const ModelConfig&, const PatchSequence&, const MaskPlan*,      \
                                             Instrumentation<Real>*);                                                                   \
  template PatchSequence decode<Real>(const ParameterSet<Real>&, const ModelConfig&, const LatentSequence<Real>&, Instrumentation<Real>*); \
  template MaeStep<Real> mae_forward_backward<Real>(const ParameterSet<Real>&, const ModelConfig&, const PatchSequence&, const MaskPlan&);

VOXMAE_INSTANTIATE_MODEL(float)
VOXMAE_INSTANTIATE_MODEL(double)

#undef VOXMAE_INSTANTIATE_MODEL

}  // namespace voxmae
