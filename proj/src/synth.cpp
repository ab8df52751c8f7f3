#include "ctseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

namespace {

enum StreamKey : std::uint64_t { kGeometry = 1, kTexture = 2, kLayout = 3, kPhantom = 4 };

constexpr std::uint8_t kOrganLabel = 1;
constexpr std::uint8_t kTumorLabel = 2;

void check_tissue(const TissueModel& t, const char* name) {
  if (!(t.mean >= kMinHu && t.mean <= kMaxHu)) throw ConfigError(std::string(name) + " mean outside the HU range");
  if (!(t.std >= 0.0 && std::isfinite(t.std))) throw ConfigError(std::string(name) + " std must be >= 0");
}

void check_range(const Range& r, const char* name, double lo, double hi) {
  if (!(r.lo <= r.hi && r.lo >= lo && r.hi <= hi)) {
    throw ConfigError(std::string(name) + " range must be ordered and within [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  }
}

double draw(Rng& rng, const Range& r) { return r.lo + (r.hi - r.lo) * rng.uniform(); }

}  // namespace

void PhantomConfig::validate() const {
  check_tissue(air, "air");
  check_tissue(soft, "soft tissue");
  check_tissue(organ, "organ");
  check_tissue(tumor, "tumor");
  check_tissue(bone, "bone");
  if (!(noise_std >= 0.0 && std::isfinite(noise_std))) throw ConfigError("noise std must be >= 0");
  if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0)) throw ConfigError("spacing must be > 0");
  check_range(body_rx, "body_rx", 0.0, 0.5);
  check_range(body_ry, "body_ry", 0.0, 0.5);
  if (!(bone_coverage >= 0.0 && bone_coverage <= 1.0)) throw ConfigError("bone coverage must lie in [0, 1]");
  check_range(organ_offset, "organ_offset", 0.0, 0.5);
  check_range(organ_rx, "organ_rx", 0.0, 0.5);
  check_range(organ_ry, "organ_ry", 0.0, 0.5);
  check_range(organ_rz, "organ_rz", 0.0, 0.5);
  check_range(tumor_scale, "tumor_scale", 0.0, 1.0);
  if (!(tumor_scale.lo > 0.0 && tumor_scale.hi < 1.0)) throw ConfigError("tumor scale must lie in (0, 1)");
}

double Ellipsoid::level(double x, double y, double z) const noexcept {
  const double dx = (x - cx) / rx;
  const double dy = (y - cy) / ry;
  const double dz = (z - cz) / rz;
  return dx * dx + dy * dy + dz * dz;
}

Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Dims d = cfg.dims;
  if (d.nx < 16 || d.ny < 16 || d.nz < 4) {
    throw GeometryError("phantom needs at least 16x16x4 voxels, got " + std::to_string(d.nx) + "x" +
                        std::to_string(d.ny) + "x" + std::to_string(d.nz));
  }

  Rng geo(derive_seed(seed, {kGeometry}));
  const double cx = (d.nx - 1) / 2.0;
  const double cy = (d.ny - 1) / 2.0;
  const double cz = (d.nz - 1) / 2.0;

  PhantomGeometry g;
  g.body_rx = draw(geo, cfg.body_rx) * d.nx;
  g.body_ry = draw(geo, cfg.body_ry) * d.ny;
  const double side = geo.bernoulli(0.5) ? 1.0 : -1.0;
  g.organ.cx = cx + side * draw(geo, cfg.organ_offset) * d.nx;
  g.organ.cy = cy + geo.uniform(-0.05, 0.05) * d.ny;
  g.organ.cz = cz + geo.uniform(-0.1, 0.1) * d.nz;
  g.organ.rx = draw(geo, cfg.organ_rx) * d.nx;
  g.organ.ry = draw(geo, cfg.organ_ry) * d.ny;
  g.organ.rz = draw(geo, cfg.organ_rz) * d.nz;
  if (g.organ.rx < 1.0 || g.organ.ry < 1.0 || g.organ.rz < 1.0 || g.body_rx < 2.0 || g.body_ry < 2.0) {
    throw GeometryError("organ or body smaller than one voxel");
  }

  // Homothetic tumor; |offset / r| + f <= 0.3 sqrt(3) (1 - f) + f < 1 keeps it strictly inside.
  const double f = draw(geo, cfg.tumor_scale);
  g.tumor.rx = f * g.organ.rx;
  g.tumor.ry = f * g.organ.ry;
  g.tumor.rz = f * g.organ.rz;
  g.tumor.cx = g.organ.cx + geo.uniform(-0.3, 0.3) * g.organ.rx * (1.0 - f);
  g.tumor.cy = g.organ.cy + geo.uniform(-0.3, 0.3) * g.organ.ry * (1.0 - f);
  g.tumor.cz = g.organ.cz + geo.uniform(-0.3, 0.3) * g.organ.rz * (1.0 - f);

  auto in_body = [&](double x, double y) {
    const double u = (x - cx) / g.body_rx;
    const double v = (y - cy) / g.body_ry;
    return u * u + v * v <= 1.0;
  };
  auto on_bone = [&](std::size_t x, std::size_t y) {
    if (!in_body(x, y)) return false;
    const bool edge = (x == 0 || !in_body(x - 1.0, y)) || (x + 1 == d.nx || !in_body(x + 1.0, y)) ||
                      (y == 0 || !in_body(x, y - 1.0)) || (y + 1 == d.ny || !in_body(x, y + 1.0));
    if (!edge) return false;
    // 8 arcs, each covering bone_coverage of its sector.
    const double angle = std::atan2(y - cy, x - cx) * 8.0 / std::numbers::pi;
    const double phase = angle - 2.0 * std::floor(angle / 2.0);
    return phase < 2.0 * cfg.bone_coverage;
  };

  const std::size_t plane = d.slice_size();
  std::vector<std::uint8_t> tissue_plane(plane);  // 0 air, 1 soft, 2 bone
  for (std::size_t y = 0; y < d.ny; ++y) {
    for (std::size_t x = 0; x < d.nx; ++x) {
      tissue_plane[y * d.nx + x] = on_bone(x, y) ? 2 : (in_body(x, y) ? 1 : 0);
    }
  }

  Rng tex(derive_seed(seed, {kTexture}));
  std::vector<float> vox(d.voxels());
  std::vector<std::uint8_t> lab(d.voxels(), 0);
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        const std::size_t i = (z * d.ny + y) * d.nx + x;
        const TissueModel* t = nullptr;
        if (g.tumor.contains(x, y, z)) {
          lab[i] = kTumorLabel;
          t = &cfg.tumor;
        } else if (g.organ.contains(x, y, z)) {
          lab[i] = kOrganLabel;
          t = &cfg.organ;
        } else {
          const auto k = tissue_plane[y * d.nx + x];
          t = k == 2 ? &cfg.bone : (k == 1 ? &cfg.soft : &cfg.air);
        }
        double hu = t->mean;
        if (t->std > 0.0) hu += t->std * tex.normal();
        if (cfg.noise_std > 0.0) hu += cfg.noise_std * tex.normal();
        vox[i] = static_cast<float>(std::clamp(std::nearbyint(hu), double{kMinHu}, double{kMaxHu}));
      }
    }
  }

  return {CtVolume(d, cfg.spacing, UnitState::Hounsfield, std::move(vox)), LabelVolume(d, cfg.spacing, 3, std::move(lab)),
          g};
}

void DatasetConfig::validate() const {
  if (count < 1) throw ConfigError("dataset needs at least one volume");
  if (size_min < 1 || size_min > size_max) throw ConfigError("in-plane size range is empty");
  if (slices_min < 1 || slices_min > slices_max) throw ConfigError("slice count range is empty");
  if (!(thickness_min > 0.0 && thickness_min <= thickness_max)) throw ConfigError("thickness range is empty");
  if (id_prefix.empty()) throw ConfigError("id prefix must not be empty");
  phantom.validate();
}

std::vector<DatasetEntry> generate_entries(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<DatasetEntry> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng layout(derive_seed(seed, {kLayout, i}));
    const auto size = static_cast<std::uint32_t>(cfg.size_min + layout.below(cfg.size_max - cfg.size_min + 1));
    const auto slices = static_cast<std::uint32_t>(cfg.slices_min + layout.below(cfg.slices_max - cfg.slices_min + 1));
    double thickness = std::round(layout.uniform(cfg.thickness_min, cfg.thickness_max) * 4.0) / 4.0;
    thickness = std::clamp(thickness, cfg.thickness_min, cfg.thickness_max);

    PhantomConfig pc = cfg.phantom;
    pc.dims = {size, size, slices};
    pc.spacing.sz = static_cast<float>(thickness);
    char id[32];
    std::snprintf(id, sizeof id, "%03zu", i);
    const std::string name = cfg.id_prefix + id;
    ManifestRecord rec{name, name + ".ctv", name + ".lbl", slices, static_cast<double>(pc.spacing.sz)};
    out.push_back({std::move(rec), generate_phantom(pc, derive_seed(seed, {kPhantom, i}))});
  }
  return out;
}

Manifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir) {
  const auto entries = generate_entries(cfg, seed);
  std::filesystem::create_directories(out_dir);
  std::vector<ManifestRecord> records;
  for (const auto& e : entries) {
    save_volume(e.phantom.volume, out_dir / e.record.volume_path);
    save_labels(e.phantom.labels, out_dir / *e.record.label_path);
    records.push_back(e.record);
  }
  Manifest manifest(std::move(records), out_dir);
  save_manifest(manifest, out_dir / "manifest.tsv");
  return manifest;
}

}  // namespace ctseg
