#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include "voxmae/cli.hpp"
#include "voxmae/errors.hpp"
#include "voxmae/eval_stats.hpp"
#include "voxmae/interpret.hpp"
#include "voxmae/model.hpp"
#include "voxmae/run_config.hpp"
#include "voxmae/volume.hpp"

namespace py = pybind11;
using namespace voxmae;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// Arrays are indexed [z, y, x], matching the x-fastest voxel order.
FloatArray to_numpy(const Volume& v) {
  FloatArray a({v.dims[2], v.dims[1], v.dims[0]});
  std::memcpy(a.mutable_data(), v.voxels.data(), v.voxels.size() * sizeof(float));
  return a;
}

Volume from_numpy(const FloatArray& a, std::array<float, 3> spacing, const std::string& unit) {
  if (a.ndim() != 3) throw InvalidArgument("expected a 3-dimensional array indexed [z, y, x]");
  Volume v({static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0))}, spacing,
           unit == "HU" ? Unit::Hounsfield : Unit::Normalized);
  std::memcpy(v.voxels.data(), a.data(), v.voxels.size() * sizeof(float));
  return v;
}

ModelConfig model_from_kwargs(const py::kwargs& kw) {
  ModelConfig c;
  for (const auto& [k, val] : kw) {
    const auto key = k.cast<std::string>();
    if (key == "patch_size") c.patch_size = val.cast<int>();
    else if (key == "input_dims") c.input_dims = val.cast<Extents>();
    else if (key == "embed_dim") c.embed_dim = val.cast<int>();
    else if (key == "depth") c.depth = val.cast<int>();
    else if (key == "heads") c.heads = val.cast<int>();
    else if (key == "mlp_ratio") c.mlp_ratio = val.cast<double>();
    else if (key == "decoder_dim") c.decoder_dim = val.cast<int>();
    else if (key == "decoder_depth") c.decoder_depth = val.cast<int>();
    else if (key == "decoder_heads") c.decoder_heads = val.cast<int>();
    else if (key == "mask_ratio") c.mask_ratio = val.cast<double>();
    else throw InvalidArgument("unknown model field '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the voxmae C++ core";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const IoError& e) {
      PyErr_SetString(PyExc_OSError, e.what());
    } catch (const FormatError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const NumericError& e) {
      PyErr_SetString(PyExc_ArithmeticError, e.what());
    } catch (const UndefinedMetric& e) {
      PyErr_SetString(PyExc_ArithmeticError, e.what());
    }
  });

  m.def(
      "read_volume",
      [](const std::filesystem::path& path) {
        const Volume v = read_volume(path);
        return py::make_tuple(to_numpy(v), v.spacing, to_string(v.unit));
      },
      py::arg("path"), "Returns (array[z, y, x], spacing, unit).");
  m.def(
      "write_volume",
      [](const std::filesystem::path& path, const FloatArray& a, std::array<float, 3> spacing, const std::string& unit) {
        write_volume(from_numpy(a, spacing, unit), path);
      },
      py::arg("path"), py::arg("array"), py::arg("spacing") = std::array<float, 3>{1.0f, 1.0f, 1.0f}, py::arg("unit") = "normalized");
  m.def(
      "resample",
      [](const FloatArray& a, Extents size, const std::string& unit) { return to_numpy(resample_volume(from_numpy(a, {1.0f, 1.0f, 1.0f}, unit), size)); },
      py::arg("array"), py::arg("size"), py::arg("unit") = "HU", "Trilinear resampling; size is (x, y, z).");
  m.def(
      "clip_normalize",
      [](const FloatArray& a, double lo, double hi) { return to_numpy(clip_normalize(from_numpy(a, {1.0f, 1.0f, 1.0f}, "HU"), lo, hi)); },
      py::arg("array"), py::arg("hu_lo") = kDefaultHuLow, py::arg("hu_hi") = kDefaultHuHigh);

  m.def(
      "synthetic",
      [](int n, Extents dims, std::uint64_t seed, double delta, int decoy_max, double radius_lo, double radius_hi) {
        SyntheticSpec s;
        s.n_volumes = n;
        s.dims = dims;
        s.seed = seed;
        s.lesion_intensity_delta = delta;
        s.decoy_max = decoy_max;
        s.lesion_radius_lo = radius_lo;
        s.lesion_radius_hi = radius_hi;
        const auto c = generate_synthetic(s);
        py::list volumes, labels, masks;
        for (int i = 0; i < n; ++i) {
          volumes.append(to_numpy(c.volumes[static_cast<std::size_t>(i)]));
          labels.append(static_cast<int>(c.manifest.records[static_cast<std::size_t>(i)].labels[0]));
          const auto mask = c.lesion_mask(i);
          py::array_t<std::uint8_t> ma({dims[2], dims[1], dims[0]});
          std::memcpy(ma.mutable_data(), mask.data(), mask.size());
          masks.append(ma);
        }
        return py::make_tuple(volumes, labels, masks);
      },
      py::arg("n") = 8, py::arg("dims") = Extents{32, 32, 32}, py::arg("seed") = 0, py::arg("delta") = 0.3, py::arg("decoy_max") = 0,
      py::arg("radius_lo") = 3.0, py::arg("radius_hi") = 5.0, "Returns (volumes, labels, lesion masks).");

  m.def(
      "patchify",
      [](const FloatArray& a, int patch) {
        const auto s = patchify(from_numpy(a, {1.0f, 1.0f, 1.0f}, "normalized"), patch);
        FloatArray out({s.tokens.rows(), s.tokens.cols()});
        std::memcpy(out.mutable_data(), s.tokens.storage().data(), s.tokens.storage().size() * sizeof(float));
        return out;
      },
      py::arg("array"), py::arg("patch_size"));
  m.def(
      "roundtrip_patches",
      [](const FloatArray& a, int patch) { return to_numpy(unpatchify(patchify(from_numpy(a, {1.0f, 1.0f, 1.0f}, "normalized"), patch))); },
      py::arg("array"), py::arg("patch_size"));
  m.def(
      "random_mask",
      [](int n, double ratio, std::uint64_t seed) {
        const auto p = random_mask(n, ratio, seed);
        return py::make_tuple(p.shuffle, p.restore, p.n_visible);
      },
      py::arg("n_tokens"), py::arg("mask_ratio") = 0.75, py::arg("seed") = 0, "Returns (shuffle, restore, n_visible).");
  m.def(
      "count_parameters", [](bool include_decoder, const py::kwargs& kw) { return count_parameters(model_from_kwargs(kw), include_decoder); },
      py::arg("include_decoder") = false, "Analytic parameter count; keyword arguments override default model fields.");

  m.def("auroc", [](const std::vector<double>& s, const std::vector<std::uint8_t>& y) { return auroc(s, y); }, py::arg("scores"), py::arg("labels"));
  m.def("auprc", [](const std::vector<double>& s, const std::vector<std::uint8_t>& y) { return auprc(s, y); }, py::arg("scores"), py::arg("labels"));
  m.def(
      "aggregate_seeds",
      [](const std::vector<double>& v) {
        const auto a = aggregate_seeds(v);
        return py::dict(py::arg("mean") = a.mean, py::arg("std") = a.std, py::arg("se") = a.se, py::arg("ci95") = a.ci95);
      },
      py::arg("values"));
  m.def(
      "t_test",
      [](const std::vector<double>& a, const std::vector<double>& b, const std::string& kind) {
        const auto r = t_test(a, b, parse_t_test_kind(kind));
        return py::make_tuple(r.t, r.df, r.p);
      },
      py::arg("a"), py::arg("b"), py::arg("kind") = "welch", "Returns (t, df, two-sided p).");
  m.def(
      "bonferroni", [](const std::vector<double>& p, std::optional<int> n) { return bonferroni(p, n); }, py::arg("p_values"), py::arg("m") = py::none());
  m.def(
      "energy_ledger",
      [](double n, double w, double h, double e, double k) {
        const auto l = energy_ledger(n, w, h, e, k);
        return py::make_tuple(l.kwh, l.kg_co2);
      },
      py::arg("n_devices") = 4, py::arg("watts_per_device") = 300, py::arg("hours_per_epoch") = 1.5, py::arg("epochs") = 400,
      py::arg("kg_co2_per_kwh") = 0.4, "Returns (kWh, kg CO2).");
  m.def("binary_entropy", &binary_entropy, py::arg("p"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"voxmae"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one voxmae command in-process; returns (exit_code, stdout, stderr).");
}
