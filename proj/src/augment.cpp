#include "ctseg/augment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "ctseg/dataset.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

namespace {

enum ChainStep : std::uint64_t { kNoise = 1, kSkip = 2, kInterp = 3, kRotate = 4 };

void require_normalized(const CtVolume& v, const char* op) {
  if (v.unit_state() != UnitState::Normalized) {
    throw UnitStateError(std::string(op) + " expects a normalized volume");
  }
}

void require_rate(double r, const char* name) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw ConfigError(std::string(name) + " must lie in [0, 1]");
  }
}

// floor(rate * n) that does not lose a whole unit to representation error.
std::size_t count_of(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

Spacing with_sz(Spacing s, double sz) {
  s.sz = static_cast<float>(sz);
  return s;
}

VolumePair copy_pair(const CtVolume& volume, const LabelVolume* labels) {
  return {volume, labels ? std::optional<LabelVolume>(*labels) : std::nullopt};
}

}  // namespace

std::string_view to_string(TrainMode m) noexcept { return m == TrainMode::TwoD ? "2d" : "3d"; }

TrainMode parse_train_mode(std::string_view name) {
  if (name == "2d" || name == "2D") return TrainMode::TwoD;
  if (name == "3d" || name == "3D") return TrainMode::ThreeD;
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected 2d or 3d)");
}

void AugmentConfig::validate() const {
  require_rate(skip_rate, "skip_rate");
  require_rate(interp_insert_rate, "interp_insert_rate");
  require_rate(policy_3d, "policy_3d");
  require_rate(policy_2d, "policy_2d");
  require_rate(shift_prob, "shift_prob");
  if (!(noise_sigma >= 0.0 && std::isfinite(noise_sigma))) throw ConfigError("noise_sigma must be >= 0");
  if (!(shift_max >= 0.0 && std::isfinite(shift_max))) throw ConfigError("shift_max must be >= 0");
  if (!(rot_max_deg >= 0.0 && rot_max_deg <= 45.0)) throw ConfigError("rot_max_deg must lie in [0, 45]");
}

void write_augment_config(const AugmentConfig& cfg, std::ostream& out) {
  out << "noise_sigma=" << format_double(cfg.noise_sigma) << '\n'
      << "skip_rate=" << format_double(cfg.skip_rate) << '\n'
      << "interp_insert_rate=" << format_double(cfg.interp_insert_rate) << '\n'
      << "shift_max=" << format_double(cfg.shift_max) << '\n'
      << "rot_max_deg=" << format_double(cfg.rot_max_deg) << '\n'
      << "policy_3d=" << format_double(cfg.policy_3d) << '\n'
      << "policy_2d=" << format_double(cfg.policy_2d) << '\n'
      << "shift_prob=" << format_double(cfg.shift_prob) << '\n';
}

AugmentConfig read_augment_config(std::istream& in) {
  AugmentConfig cfg;
  const std::map<std::string, double*> fields{
      {"noise_sigma", &cfg.noise_sigma}, {"skip_rate", &cfg.skip_rate},   {"interp_insert_rate", &cfg.interp_insert_rate},
      {"shift_max", &cfg.shift_max},     {"rot_max_deg", &cfg.rot_max_deg}, {"policy_3d", &cfg.policy_3d},
      {"policy_2d", &cfg.policy_2d},     {"shift_prob", &cfg.shift_prob}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", line_no);
    const auto it = fields.find(line.substr(0, eq));
    if (it == fields.end()) throw ParseError("unknown key '" + line.substr(0, eq) + "'", line_no);
    const std::string value = line.substr(eq + 1);
    const auto res = std::from_chars(value.data(), value.data() + value.size(), *it->second);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
      throw ParseError("bad number '" + value + "'", line_no);
    }
  }
  cfg.validate();
  return cfg;
}

CtVolume gaussian_noise(const CtVolume& volume, double sigma, std::uint64_t seed) {
  require_normalized(volume, "gaussian_noise");
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  if (sigma == 0.0) return volume;
  Rng rng(seed);
  std::vector<float> out(volume.voxels().begin(), volume.voxels().end());
  for (float& v : out) v = static_cast<float>(v + sigma * rng.normal());
  return CtVolume(volume.dims(), volume.spacing(), volume.unit_state(), std::move(out));
}

std::vector<std::size_t> skipped_slices(std::size_t nz, double skip_rate, std::uint64_t seed) {
  require_rate(skip_rate, "skip_rate");
  if (nz < 2) throw TooFewSlicesError("slice skipping needs at least 2 slices");
  const std::size_t m = count_of(skip_rate, nz);
  if (m > nz - 2) {
    throw TooFewSlicesError("cannot skip " + std::to_string(m) + " interior slices of " + std::to_string(nz));
  }
  Rng rng(seed);
  auto picks = sample_without_replacement(rng, nz - 2, m);
  for (auto& p : picks) ++p;
  std::sort(picks.begin(), picks.end());
  return picks;
}

VolumePair skip_slices(const CtVolume& volume, const LabelVolume* labels, double skip_rate, std::uint64_t seed) {
  const auto& d = volume.dims();
  if (labels) require_same_dims(d, labels->dims(), "skip_slices");
  const auto drop = skipped_slices(d.nz, skip_rate, seed);
  if (drop.empty()) return copy_pair(volume, labels);

  const std::size_t plane = d.slice_size();
  const std::size_t keep = d.nz - drop.size();
  std::vector<float> vox;
  vox.reserve(plane * keep);
  std::vector<std::uint8_t> lab;
  std::size_t next = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    if (next < drop.size() && drop[next] == z) {
      ++next;
      continue;
    }
    const auto s = volume.slice(z);
    vox.insert(vox.end(), s.begin(), s.end());
    if (labels) {
      const auto ls = labels->slice(z);
      lab.insert(lab.end(), ls.begin(), ls.end());
    }
  }
  const Dims out_dims{d.nx, d.ny, static_cast<std::uint32_t>(keep)};
  const double scale = static_cast<double>(d.nz - 1) / static_cast<double>(keep - 1);
  VolumePair r{CtVolume(out_dims, with_sz(volume.spacing(), volume.spacing().sz * scale), volume.unit_state(),
                        std::move(vox)),
               std::nullopt};
  if (labels) {
    r.labels = LabelVolume(out_dims, with_sz(labels->spacing(), labels->spacing().sz * scale), labels->num_classes(),
                           std::move(lab));
  }
  return r;
}

std::vector<std::size_t> interpolation_gaps(std::size_t nz, double insert_rate, std::uint64_t seed) {
  require_rate(insert_rate, "interp_insert_rate");
  if (nz < 2) throw TooFewSlicesError("slice interpolation needs at least 2 slices");
  const std::size_t m = count_of(insert_rate, nz - 1);
  Rng rng(seed);
  auto gaps = sample_without_replacement(rng, nz - 1, m);
  std::sort(gaps.begin(), gaps.end());
  return gaps;
}

VolumePair interpolate_slices(const CtVolume& volume, const LabelVolume* labels, double insert_rate,
                              std::uint64_t seed) {
  const auto& d = volume.dims();
  if (labels) require_same_dims(d, labels->dims(), "interpolate_slices");
  const auto gaps = interpolation_gaps(d.nz, insert_rate, seed);
  if (gaps.empty()) return copy_pair(volume, labels);

  const std::size_t plane = d.slice_size();
  const std::size_t out_nz = d.nz + gaps.size();
  std::vector<float> vox;
  vox.reserve(plane * out_nz);
  std::vector<std::uint8_t> lab;
  std::size_t next = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    const auto s = volume.slice(z);
    vox.insert(vox.end(), s.begin(), s.end());
    if (labels) {
      const auto ls = labels->slice(z);
      lab.insert(lab.end(), ls.begin(), ls.end());
    }
    if (next < gaps.size() && gaps[next] == z) {
      ++next;
      const auto upper = volume.slice(z + 1);
      for (std::size_t i = 0; i < plane; ++i) {
        vox.push_back(static_cast<float>(0.5 * (static_cast<double>(s[i]) + upper[i])));
      }
      if (labels) {
        const auto ls = labels->slice(z);
        lab.insert(lab.end(), ls.begin(), ls.end());
      }
    }
  }
  const Dims out_dims{d.nx, d.ny, static_cast<std::uint32_t>(out_nz)};
  const double scale = static_cast<double>(d.nz - 1) / static_cast<double>(out_nz - 1);
  VolumePair r{CtVolume(out_dims, with_sz(volume.spacing(), volume.spacing().sz * scale), volume.unit_state(),
                        std::move(vox)),
               std::nullopt};
  if (labels) {
    r.labels = LabelVolume(out_dims, with_sz(labels->spacing(), labels->spacing().sz * scale), labels->num_classes(),
                           std::move(lab));
  }
  return r;
}

double draw_shift(double delta, std::uint64_t seed) {
  if (!(delta >= 0.0)) throw ConfigError("shift magnitude must be >= 0");
  Rng rng(seed);
  return delta * (2.0 * rng.uniform() - 1.0);
}

CtVolume shift_by(const CtVolume& volume, double offset) {
  require_normalized(volume, "range_shift");
  if (offset == 0.0) return volume;
  std::vector<float> out(volume.voxels().begin(), volume.voxels().end());
  for (float& v : out) v = static_cast<float>(v + offset);
  return CtVolume(volume.dims(), volume.spacing(), volume.unit_state(), std::move(out));
}

CtVolume range_shift(const CtVolume& volume, double delta, std::uint64_t seed) {
  return shift_by(volume, draw_shift(delta, seed));
}

VolumePair rotate_by(const CtVolume& volume, const LabelVolume* labels, double angle_deg) {
  const auto& d = volume.dims();
  if (labels) require_same_dims(d, labels->dims(), "rotate");
  if (angle_deg == 0.0) return copy_pair(volume, labels);

  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double cx = (d.nx - 1) / 2.0;
  const double cy = (d.ny - 1) / 2.0;
  const double xmax = d.nx - 1;
  const double ymax = d.ny - 1;
  constexpr double kEdge = 1e-9;
  const float fill = *std::min_element(volume.voxels().begin(), volume.voxels().end());
  const bool hounsfield = volume.unit_state() == UnitState::Hounsfield;

  std::vector<float> vox(d.voxels());
  std::vector<std::uint8_t> lab(labels ? d.voxels() : 0);
  for (std::size_t z = 0; z < d.nz; ++z) {
    const auto plane = volume.slice(z);
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        // Inverse map: output pixel -> source position.
        const double dx = x - cx;
        const double dy = y - cy;
        const double sx = c * dx + s * dy + cx;
        const double sy = -s * dx + c * dy + cy;
        const std::size_t o = volume.index(x, y, z);

        if (sx < -kEdge || sy < -kEdge || sx > xmax + kEdge || sy > ymax + kEdge) {
          vox[o] = fill;
        } else {
          const double ux = std::clamp(sx, 0.0, xmax);
          const double uy = std::clamp(sy, 0.0, ymax);
          const auto x0 = static_cast<std::size_t>(std::floor(ux));
          const auto y0 = static_cast<std::size_t>(std::floor(uy));
          const std::size_t x1 = std::min<std::size_t>(x0 + 1, d.nx - 1);
          const std::size_t y1 = std::min<std::size_t>(y0 + 1, d.ny - 1);
          const double tx = ux - x0;
          const double ty = uy - y0;
          const double a = plane[y0 * d.nx + x0];
          const double b = plane[y0 * d.nx + x1];
          const double e = plane[y1 * d.nx + x0];
          const double f = plane[y1 * d.nx + x1];
          const double top = a + tx * (b - a);
          const double bottom = e + tx * (f - e);
          const double value = top + ty * (bottom - top);
          vox[o] = static_cast<float>(hounsfield ? std::nearbyint(value) : value);
        }
        if (labels) {
          const double rx = std::nearbyint(sx);
          const double ry = std::nearbyint(sy);
          lab[o] = (rx < 0.0 || ry < 0.0 || rx > xmax || ry > ymax)
                       ? std::uint8_t{0}
                       : labels->labels()[(z * d.ny + static_cast<std::size_t>(ry)) * d.nx +
                                          static_cast<std::size_t>(rx)];
        }
      }
    }
  }
  VolumePair r{CtVolume(d, volume.spacing(), volume.unit_state(), std::move(vox)), std::nullopt};
  if (labels) r.labels = LabelVolume(d, labels->spacing(), labels->num_classes(), std::move(lab));
  return r;
}

Rotated rotate(const CtVolume& volume, const LabelVolume* labels, double max_deg, std::uint64_t seed) {
  if (!(max_deg >= 0.0 && max_deg <= 45.0)) throw ConfigError("rotation limit must lie in [0, 45] degrees");
  Rng rng(seed);
  const double angle = max_deg * (2.0 * rng.uniform() - 1.0);
  return {rotate_by(volume, labels, angle), angle};
}

bool AugmentTrace::any_shift() const noexcept {
  return std::any_of(volumes.begin(), volumes.end(), [](const VolumeTrace& v) { return v.shifted; });
}

std::string AugmentTrace::ops() const {
  std::string out;
  if (chain_applied) out = "noise,skip,interpolate,rotate";
  if (any_shift()) out += out.empty() ? "shift" : ",shift";
  return out.empty() ? "none" : out;
}

std::string format_trace(const AugmentTrace& trace) {
  std::string angles;
  std::string shifts;
  for (std::size_t i = 0; i < trace.volumes.size(); ++i) {
    const auto& v = trace.volumes[i];
    if (i > 0) {
      angles += ',';
      shifts += ',';
    }
    angles += v.chain ? format_double(v.angle_deg) : "-";
    shifts += v.shifted ? format_double(v.shift) : "-";
  }
  return std::to_string(trace.batch_id) + '\t' + trace.ops() + '\t' + (angles.empty() ? "-" : angles) + '\t' +
         (shifts.empty() ? "-" : shifts);
}

AugmentedBatch apply_policy(std::vector<VolumePair> batch, const AugmentConfig& cfg, TrainMode mode,
                            std::uint64_t seed, std::uint64_t batch_id) {
  if (batch.empty()) throw EmptyInputError("apply_policy needs a nonempty batch");
  cfg.validate();

  Rng rng(seed);
  AugmentedBatch out;
  out.trace.batch_id = batch_id;
  out.trace.chain_applied = rng.bernoulli(cfg.chain_probability(mode));
  out.items.reserve(batch.size());

  for (auto& item : batch) {
    const std::uint64_t chain_seed = rng.next_u64();
    const bool shift = rng.bernoulli(cfg.shift_prob);
    const std::uint64_t shift_seed = rng.next_u64();

    VolumeTrace vt;
    VolumePair cur = std::move(item);
    if (out.trace.chain_applied) {
      vt.chain = true;
      cur.volume = gaussian_noise(cur.volume, cfg.noise_sigma, derive_seed(chain_seed, {kNoise}));
      const std::size_t nz = cur.volume.dims().nz;
      if (nz >= 2 && count_of(cfg.skip_rate, nz) <= nz - 2) {
        cur = skip_slices(cur.volume, cur.labels ? &*cur.labels : nullptr, cfg.skip_rate,
                          derive_seed(chain_seed, {kSkip}));
      }
      if (cur.volume.dims().nz >= 2) {
        cur = interpolate_slices(cur.volume, cur.labels ? &*cur.labels : nullptr, cfg.interp_insert_rate,
                                 derive_seed(chain_seed, {kInterp}));
      }
      auto rot = rotate(cur.volume, cur.labels ? &*cur.labels : nullptr, cfg.rot_max_deg,
                        derive_seed(chain_seed, {kRotate}));
      cur = std::move(rot.pair);
      vt.angle_deg = rot.angle_deg;
    }
    if (shift) {
      vt.shifted = true;
      vt.shift = draw_shift(cfg.shift_max, shift_seed);
      cur.volume = shift_by(cur.volume, vt.shift);
    }
    out.trace.volumes.push_back(vt);
    out.items.push_back(std::move(cur));
  }
  return out;
}

}  // namespace ctseg
