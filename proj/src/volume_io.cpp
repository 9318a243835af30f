#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "voxmae/binary_io.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

namespace {
constexpr char kTvolMagic[4] = {'T', 'V', 'L', '1'};
constexpr std::uint8_t kDtypeFloat32 = 0;
}  // namespace

void write_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kTvolMagic, 4);
  for (int e : v.dims) binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (float s : v.spacing) binio::put<float>(os, s);
  binio::put<std::uint8_t>(os, kDtypeFloat32);
  binio::put_array(os, v.voxels.data(), v.voxels.size());
  os.flush();
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

Volume read_volume(const std::filesystem::path& path, std::optional<Unit> unit_hint) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const auto file_size = std::filesystem::file_size(path);
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kTvolMagic, 4) != 0)
    throw FormatError("'" + path.string() + "': bad magic, expected TVL1");
  Volume v;
  for (int& e : v.dims) {
    const auto d = binio::get<std::uint32_t>(is, "TVOL extents");
    if (d == 0 || d > (1u << 16)) throw FormatError("'" + path.string() + "': invalid extent " + std::to_string(d));
    e = static_cast<int>(d);
  }
  for (float& s : v.spacing) s = binio::get<float>(is, "TVOL spacing");
  const auto dtype = binio::get<std::uint8_t>(is, "TVOL dtype");
  if (dtype != kDtypeFloat32) throw FormatError("'" + path.string() + "': unknown dtype code " + std::to_string(dtype));
  const std::size_t expected = v.voxel_count() * sizeof(float);
  const std::size_t actual = file_size >= kTvolHeaderBytes ? file_size - kTvolHeaderBytes : 0;
  if (actual != expected)
    throw FormatError("'" + path.string() + "': payload length mismatch, expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(actual));
  v.voxels.resize(v.voxel_count());
  binio::get_array(is, v.voxels.data(), v.voxels.size(), "TVOL payload");
  for (float s : v.spacing)
    if (!(s > 0.0f)) throw FormatError("'" + path.string() + "': non-positive spacing");
  if (unit_hint) {
    v.unit = *unit_hint;
  } else {
    const bool unit_range = std::all_of(v.voxels.begin(), v.voxels.end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
    v.unit = unit_range ? Unit::Normalized : Unit::Hounsfield;
  }
  return v;
}

// ---------------------------------------------------------------- manifest

namespace {

std::vector<std::string> split_string(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \r\n\t");
  const auto e = s.find_last_not_of(" \r\n\t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  m.validate();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "#classes:";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) os << (i ? "," : "") << m.class_names[i];
  os << '\n';
  for (const auto& r : m.records) {
    os << r.path << '\t';
    for (std::size_t i = 0; i < r.labels.size(); ++i) os << (i ? "," : "") << static_cast<int>(r.labels[i]);
    if (r.subject) os << '\t' << *r.subject;
    os << '\n';
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  std::string line;
  if (!std::getline(is, line) || line.rfind("#classes:", 0) != 0)
    throw FormatError("'" + path.string() + "': first line must start with #classes:");
  for (auto& name : split_string(trim(line.substr(9)), ',')) {
    name = trim(name);
    if (name.empty()) throw FormatError("'" + path.string() + "': empty class name");
    m.class_names.push_back(name);
  }
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_string(line, '\t');
    if (fields.size() < 2 || fields.size() > 3)
      throw FormatError("'" + path.string() + "' line " + std::to_string(line_no) + ": expected 2 or 3 tab-separated fields");
    ManifestRecord r;
    r.path = fields[0];
    for (const auto& tok : split_string(fields[1], ',')) {
      const auto t = trim(tok);
      if (t != "0" && t != "1")
        throw FormatError("'" + path.string() + "' line " + std::to_string(line_no) + ": labels must be 0 or 1");
      r.labels.push_back(t == "1" ? 1 : 0);
    }
    if (fields.size() == 3 && !trim(fields[2]).empty()) r.subject = trim(fields[2]);
    m.records.push_back(std::move(r));
  }
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return m;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset d;
  d.manifest = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  for (const auto& r : d.manifest.records) {
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = base / p;
    d.volumes.push_back(std::make_shared<const Volume>(read_volume(p)));
  }
  return d;
}

}  // namespace voxmae
