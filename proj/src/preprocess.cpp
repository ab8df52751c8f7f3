#include "ctseg/preprocess.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "ctseg/errors.hpp"
#include "ctseg/numeric.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

namespace {

template <typename T>
double quantile_impl(std::span<const T> values, double q) {
  if (values.empty()) {
    throw EmptyInputError("quantile of an empty set");
  }
  if (!(q >= 0.0 && q <= 1.0)) {
    throw ConfigError("quantile fraction must lie in [0, 1]");
  }
  std::vector<double> v(values.begin(), values.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(k);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  const double lower = v[k];
  if (frac == 0.0 || k + 1 >= v.size()) {
    return lower;
  }
  const double upper = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(k) + 1, v.end());
  return lower + frac * (upper - lower);
}

void require_state(const CtVolume& v, UnitState s, const char* op) {
  if (v.unit_state() != s) {
    throw UnitStateError(std::string(op) + " expects a " + std::string(to_string(s)) + " volume, got " +
                         std::string(to_string(v.unit_state())));
  }
}

}  // namespace

std::string_view to_string(WindowPreset p) noexcept {
  switch (p) {
    case WindowPreset::Organ: return "organ";
    case WindowPreset::Bone: return "bone";
    case WindowPreset::Lung: return "lung";
    case WindowPreset::Custom: return "custom";
  }
  return "custom";
}

WindowPreset parse_window_preset(std::string_view name) {
  if (name == "organ") return WindowPreset::Organ;
  if (name == "bone") return WindowPreset::Bone;
  if (name == "lung") return WindowPreset::Lung;
  if (name == "custom") return WindowPreset::Custom;
  throw ConfigError("unknown window preset '" + std::string(name) + "'");
}

WindowConfig WindowConfig::from_preset(WindowPreset preset) {
  switch (preset) {
    case WindowPreset::Organ: return {0.6, 0.99, preset};
    case WindowPreset::Bone: return {0.9, 1.0, preset};
    case WindowPreset::Lung: return {0.02, 0.6, preset};
    case WindowPreset::Custom: break;
  }
  return {0.6, 0.99, WindowPreset::Custom};
}

void WindowConfig::validate() const {
  if (!(q_low >= 0.0 && q_low < 1.0 && q_high > 0.0 && q_high <= 1.0 && q_low < q_high)) {
    throw ConfigError("window quantiles must satisfy 0 <= q_low < q_high <= 1");
  }
}

void write_stats(const IntensityStats& stats, std::ostream& out) {
  out << "mean=" << format_double(stats.mean) << '\n'
      << "std=" << format_double(stats.std) << '\n'
      << "sample_fraction=" << format_double(stats.sample_fraction) << '\n'
      << "seed=" << stats.seed << '\n'
      << "n_volumes_sampled=" << stats.n_volumes_sampled << '\n';
}

IntensityStats read_stats(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("expected key=value", line_no);
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto get = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) {
      throw ParseError(std::string("missing key ") + key, line_no);
    }
    return it->second;
  };
  const auto num = [&](const char* key, auto& dst) {
    const std::string& s = get(key);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), dst);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
      throw ParseError(std::string("bad value for ") + key, line_no);
    }
  };
  IntensityStats st;
  num("mean", st.mean);
  num("std", st.std);
  num("sample_fraction", st.sample_fraction);
  num("seed", st.seed);
  num("n_volumes_sampled", st.n_volumes_sampled);
  if (!(std::isfinite(st.mean) && std::isfinite(st.std) && st.std > 0.0) || st.n_volumes_sampled < 1) {
    throw StatsError("stats file violates std > 0 / n_volumes_sampled >= 1");
  }
  return st;
}

void save_stats(const IntensityStats& stats, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string(), 0);
  write_stats(stats, out);
}

IntensityStats load_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string(), 0);
  return read_stats(in);
}

double quantile(std::span<const float> values, double q) { return quantile_impl(values, q); }
double quantile(std::span<const double> values, double q) { return quantile_impl(values, q); }

WindowBounds window_bounds(const CtVolume& volume, const WindowConfig& cfg) {
  cfg.validate();
  // Both quantiles from one sorted copy.
  std::vector<float> sorted(volume.voxels().begin(), volume.voxels().end());
  std::sort(sorted.begin(), sorted.end());
  const auto at = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto k = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(k);
    const double lower = sorted[k];
    if (frac == 0.0 || k + 1 >= sorted.size()) return lower;
    return lower + frac * (static_cast<double>(sorted[k + 1]) - lower);
  };
  WindowBounds b{at(cfg.q_low), at(cfg.q_high)};
  if (!(b.lo < b.hi)) {
    throw DegenerateWindowError("window collapses to a single value (" + format_double(b.lo) + ")");
  }
  return b;
}

CtVolume window(const CtVolume& volume, const WindowConfig& cfg) {
  require_state(volume, UnitState::Hounsfield, "window");
  const WindowBounds b = window_bounds(volume, cfg);
  const auto lo = static_cast<float>(b.lo);
  const auto hi = static_cast<float>(b.hi);
  std::vector<float> out(volume.voxels().begin(), volume.voxels().end());
  for (float& v : out) v = std::clamp(v, lo, hi);
  return CtVolume(volume.dims(), volume.spacing(), UnitState::Windowed, std::move(out));
}

std::vector<std::size_t> stats_sample_indices(std::size_t manifest_size, double sample_fraction, std::uint64_t seed) {
  if (manifest_size == 0) {
    throw EmptyInputError("cannot sample statistics from an empty manifest");
  }
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
    throw ConfigError("sample fraction must lie in (0, 1]");
  }
  // The epsilon keeps products like 0.3 * 10 = 3.0000000000000004 from rounding up.
  const double want = std::ceil(sample_fraction * static_cast<double>(manifest_size) - 1e-9);
  const auto m = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, manifest_size);
  Rng rng(seed);
  return sample_without_replacement(rng, manifest_size, m);
}

IntensityStats pooled_stats(std::span<const CtVolume> volumes) {
  CompensatedSum sum;
  std::size_t count = 0;
  for (const auto& v : volumes) {
    for (float x : v.voxels()) sum.add(x);
    count += v.voxels().size();
  }
  if (count == 0) {
    throw StatsError("no voxels to pool");
  }
  const double mean = sum.value() / static_cast<double>(count);
  CompensatedSum sq;
  for (const auto& v : volumes) {
    for (float x : v.voxels()) {
      const double d = x - mean;
      sq.add(d * d);
    }
  }
  IntensityStats st;
  st.mean = mean;
  st.std = std::sqrt(sq.value() / static_cast<double>(count));
  st.n_volumes_sampled = volumes.size();
  return st;
}

IntensityStats sample_stats(const Manifest& manifest, const VolumeStore& store, const WindowConfig& cfg,
                            double sample_fraction, std::uint64_t seed) {
  const auto picks = stats_sample_indices(manifest.size(), sample_fraction, seed);
  std::vector<CtVolume> windowed;
  for (auto i : picks) {
    const auto pair = store.load(manifest.records()[i]);
    try {
      windowed.push_back(window(pair.volume, cfg));
    } catch (const DegenerateWindowError&) {
      continue;
    }
  }
  if (windowed.empty()) {
    throw StatsError("every sampled volume has a degenerate window");
  }
  IntensityStats st = pooled_stats(windowed);
  if (!(st.std > 0.0)) {
    throw StatsError("pooled standard deviation is zero");
  }
  st.sample_fraction = sample_fraction;
  st.seed = seed;
  return st;
}

CtVolume normalize(const CtVolume& volume, const IntensityStats& stats) {
  require_state(volume, UnitState::Windowed, "normalize");
  if (!(stats.std > 0.0)) {
    throw StatsError("normalization needs std > 0");
  }
  std::vector<float> out(volume.voxels().size());
  const auto in = volume.voxels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((static_cast<double>(in[i]) - stats.mean) / stats.std);
  }
  return CtVolume(volume.dims(), volume.spacing(), UnitState::Normalized, std::move(out));
}

std::vector<std::size_t> draw_slice_indices(std::span<const std::size_t> candidates, std::size_t k,
                                            std::uint64_t seed) {
  if (candidates.empty()) {
    throw NoForegroundError("no candidate slices");
  }
  Rng rng(seed);
  const auto picks = candidates.size() >= k ? sample_without_replacement(rng, candidates.size(), k)
                                            : sample_with_replacement(rng, candidates.size(), k);
  std::vector<std::size_t> z;
  z.reserve(k);
  for (auto p : picks) z.push_back(candidates[p]);
  std::sort(z.begin(), z.end());
  return z;
}

SliceSelection select_slices(const CtVolume& volume, const LabelVolume* labels, std::size_t k, bool training,
                             std::uint64_t seed) {
  if (k == 0) {
    throw ConfigError("target slice count must be >= 1");
  }
  if (training && labels == nullptr) {
    throw ConfigError("training-mode slice selection needs labels");
  }
  if (labels != nullptr) require_same_dims(volume.dims(), labels->dims(), "select_slices");

  const auto& d = volume.dims();
  std::vector<std::size_t> candidates;
  for (std::size_t z = 0; z < d.nz; ++z) {
    if (!training) {
      candidates.push_back(z);
      continue;
    }
    const auto s = labels->slice(z);
    if (std::any_of(s.begin(), s.end(), [](std::uint8_t l) { return l != 0; })) candidates.push_back(z);
  }
  if (candidates.empty()) {
    throw NoForegroundError("training volume has no foreground slice");
  }
  auto picks = draw_slice_indices(candidates, k, seed);

  const std::size_t plane = d.slice_size();
  std::vector<float> vox;
  vox.reserve(plane * k);
  std::vector<std::uint8_t> lab;
  if (labels != nullptr) lab.reserve(plane * k);
  for (auto z : picks) {
    const auto s = volume.slice(z);
    vox.insert(vox.end(), s.begin(), s.end());
    if (labels != nullptr) {
      const auto ls = labels->slice(z);
      lab.insert(lab.end(), ls.begin(), ls.end());
    }
  }
  const Dims out_dims{d.nx, d.ny, static_cast<std::uint32_t>(k)};
  SliceSelection sel{CtVolume(out_dims, volume.spacing(), volume.unit_state(), std::move(vox)), std::nullopt,
                     std::move(picks)};
  if (labels != nullptr) sel.labels = LabelVolume(out_dims, labels->spacing(), labels->num_classes(), std::move(lab));
  return sel;
}

VolumePair downsample(const CtVolume& volume, const LabelVolume* labels, std::uint32_t target) {
  const auto& d = volume.dims();
  if (d.nx != d.ny) {
    throw ShapeError("downsample expects square slices");
  }
  if (target == 0) {
    throw ConfigError("target size must be >= 1");
  }
  if (target > d.nx) {
    throw UpsampleRefusedError("target " + std::to_string(target) + " exceeds slice size " + std::to_string(d.nx));
  }
  if (labels != nullptr) require_same_dims(d, labels->dims(), "downsample");
  if (target == d.nx) {
    return {volume, labels ? std::optional<LabelVolume>(*labels) : std::nullopt};
  }

  const double scale = static_cast<double>(d.nx) / target;
  const Dims out_dims{target, target, d.nz};
  // Source coordinate of each output pixel centre, per axis (square slices).
  std::vector<std::size_t> i0(target), i1(target), nearest(target);
  std::vector<double> t(target);
  for (std::uint32_t i = 0; i < target; ++i) {
    const double u = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(d.nx - 1));
    i0[i] = static_cast<std::size_t>(std::floor(u));
    i1[i] = std::min<std::size_t>(i0[i] + 1, d.nx - 1);
    t[i] = u - static_cast<double>(i0[i]);
    nearest[i] = std::min<std::size_t>(static_cast<std::size_t>(std::floor((i + 0.5) * scale)), d.nx - 1);
  }

  // HU data stays on the integer grid of the int16 storage.
  const bool hounsfield = volume.unit_state() == UnitState::Hounsfield;
  std::vector<float> vox(out_dims.voxels());
  std::vector<std::uint8_t> lab(labels ? out_dims.voxels() : 0);
  std::size_t o = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::uint32_t y = 0; y < target; ++y) {
      for (std::uint32_t x = 0; x < target; ++x, ++o) {
        const double a = volume.at(i0[x], i0[y], z);
        const double b = volume.at(i1[x], i0[y], z);
        const double c = volume.at(i0[x], i1[y], z);
        const double e = volume.at(i1[x], i1[y], z);
        const double top = a + t[x] * (b - a);
        const double bottom = c + t[x] * (e - c);
        const double value = top + t[y] * (bottom - top);
        vox[o] = static_cast<float>(hounsfield ? std::nearbyint(value) : value);
        if (labels) lab[o] = labels->labels()[(z * d.ny + nearest[y]) * d.nx + nearest[x]];
      }
    }
  }
  Spacing sp = volume.spacing();
  sp.sx = static_cast<float>(sp.sx * scale);
  sp.sy = static_cast<float>(sp.sy * scale);
  VolumePair r{CtVolume(out_dims, sp, volume.unit_state(), std::move(vox)), std::nullopt};
  if (labels) {
    Spacing lsp = labels->spacing();
    lsp.sx = static_cast<float>(lsp.sx * scale);
    lsp.sy = static_cast<float>(lsp.sy * scale);
    r.labels = LabelVolume(out_dims, lsp, labels->num_classes(), std::move(lab));
  }
  return r;
}

}  // namespace ctseg
