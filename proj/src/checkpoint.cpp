#include "voxmae/checkpoint.hpp"

#include <fstream>

#include "voxmae/binary_io.hpp"
#include "voxmae/errors.hpp"

namespace voxmae {

namespace {

constexpr char kMagic[4] = {'V', 'M', 'C', 'K'};

void put_set(std::ostream& os, const ParameterSet<float>& s) {
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.arrays.size()));
  for (const auto& [name, m] : s.arrays) {
    binio::put_string(os, name);
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    binio::put_array(os, m.storage().data(), m.size());
  }
}

ParameterSet<float> get_set(std::istream& is, const char* what) {
  ParameterSet<float> s;
  const auto n = binio::get<std::uint32_t>(is, what);
  if (n > (1u << 20)) throw FormatError(std::string("implausible array count in ") + what);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = binio::get_string(is, what);
    const auto rows = binio::get<std::uint32_t>(is, what);
    const auto cols = binio::get<std::uint32_t>(is, what);
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 32)) throw FormatError("implausible array shape for '" + name + "'");
    Matrix<float> m(static_cast<int>(rows), static_cast<int>(cols));
    binio::get_array(is, m.storage().data(), m.size(), what);
    s.arrays.emplace(std::move(name), std::move(m));
  }
  return s;
}

void put_history(std::ostream& os, const std::vector<double>& h) {
  binio::put<std::uint64_t>(os, h.size());
  binio::put_array(os, h.data(), h.size());
}

std::vector<double> get_history(std::istream& is, const char* what) {
  const auto n = binio::get<std::uint64_t>(is, what);
  if (n > (1ull << 28)) throw FormatError(std::string("implausible history length in ") + what);
  std::vector<double> h(n);
  binio::get_array(is, h.data(), h.size(), what);
  return h;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  return kind == o.kind && model == o.model && config_hash == o.config_hash && epoch == o.epoch && metadata == o.metadata &&
         params.arrays == o.params.arrays && buffers.arrays == o.buffers.arrays && adam.m.arrays == o.adam.m.arrays &&
         adam.v.arrays == o.adam.v.arrays && adam.t == o.adam.t && adam.beta1 == o.adam.beta1 && adam.beta2 == o.adam.beta2 &&
         adam.eps == o.adam.eps && rng_state == o.rng_state && epoch_losses == o.epoch_losses && epoch_lrs == o.epoch_lrs &&
         step_losses == o.step_losses;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  // Write to a sibling file and rename so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(kMagic, 4);
    binio::put<std::uint32_t>(os, kCheckpointVersion);
    binio::put<std::uint64_t>(os, c.config_hash);
    binio::put<std::int32_t>(os, c.epoch);
    binio::put_string(os, c.kind);
    binio::put_string(os, c.model.serialize());
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.metadata.size()));
    for (const auto& [k, v] : c.metadata) {
      binio::put_string(os, k);
      binio::put_string(os, v);
    }
    put_set(os, c.params);
    put_set(os, c.buffers);
    put_set(os, c.adam.m);
    put_set(os, c.adam.v);
    binio::put<std::int64_t>(os, c.adam.t);
    binio::put<double>(os, c.adam.beta1);
    binio::put<double>(os, c.adam.beta2);
    binio::put<double>(os, c.adam.eps);
    binio::put_string(os, c.rng_state);
    put_history(os, c.epoch_losses);
    put_history(os, c.epoch_lrs);
    put_history(os, c.step_losses);
    os.flush();
    if (!os) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("'" + path.string() + "': not a checkpoint");
  const auto version = binio::get<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) throw FormatError("'" + path.string() + "': unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = binio::get<std::uint64_t>(is, "config hash");
  c.epoch = binio::get<std::int32_t>(is, "epoch");
  c.kind = binio::get_string(is, "kind");
  c.model = ModelConfig::parse(binio::get_string(is, "model config"));
  if (c.model.hash() != c.config_hash) throw FormatError("'" + path.string() + "': config hash does not match stored configuration");
  const auto n_meta = binio::get<std::uint32_t>(is, "metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = binio::get_string(is, "metadata key");
    c.metadata[k] = binio::get_string(is, "metadata value");
  }
  c.params = get_set(is, "parameters");
  c.buffers = get_set(is, "buffers");
  c.adam.m = get_set(is, "adam first moments");
  c.adam.v = get_set(is, "adam second moments");
  c.adam.t = binio::get<std::int64_t>(is, "adam step");
  c.adam.beta1 = binio::get<double>(is, "adam beta1");
  c.adam.beta2 = binio::get<double>(is, "adam beta2");
  c.adam.eps = binio::get<double>(is, "adam eps");
  c.rng_state = binio::get_string(is, "generator state");
  c.epoch_losses = get_history(is, "epoch losses");
  c.epoch_lrs = get_history(is, "epoch lrs");
  c.step_losses = get_history(is, "step losses");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("'" + path.string() + "': trailing bytes after checkpoint");
  return c;
}

}  // namespace voxmae
