#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctseg/dataset.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

struct TissueModel {
  double mean = 0.0;  ///< HU
  double std = 0.0;   ///< per-voxel spread inside the tissue, HU

  bool operator==(const TissueModel&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  bool operator==(const Range&) const = default;
};

/// Geometry ranges are fractions of the matching grid extent (organ and
/// body in-plane radii of nx / ny, organ depth of nz).
struct PhantomConfig {
  Dims dims{64, 64, 24};
  Spacing spacing{1.0f, 1.0f, 2.5f};

  TissueModel air{-1000.0, 0.0};
  TissueModel soft{40.0, 0.0};
  TissueModel organ{100.0, 0.0};
  TissueModel tumor{55.0, 0.0};
  TissueModel bone{700.0, 0.0};
  /// Additive Gaussian noise over the whole volume.
  double noise_std = 10.0;

  Range body_rx{0.40, 0.46};
  Range body_ry{0.36, 0.42};
  /// Share of the body outline covered by bone, split into 8 arcs.
  double bone_coverage = 0.15;
  /// Organ centre offset from the body centre along x (either side).
  Range organ_offset{0.10, 0.20};
  Range organ_rx{0.12, 0.18};
  Range organ_ry{0.10, 0.15};
  Range organ_rz{0.25, 0.40};
  /// Tumor radii as a fraction of the organ radii.
  Range tumor_scale{0.35, 0.50};

  /// Throws ConfigError for negative stds, means outside the HU range,
  /// empty or inverted ranges, or a tumor scale outside (0, 1).
  void validate() const;
};

struct Ellipsoid {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double rx = 1.0, ry = 1.0, rz = 1.0;

  /// Sum of squared normalized offsets; <= 1 inside.
  double level(double x, double y, double z) const noexcept;
  bool contains(double x, double y, double z) const noexcept { return level(x, y, z) <= 1.0; }
};

struct PhantomGeometry {
  double body_rx = 0.0;
  double body_ry = 0.0;
  Ellipsoid organ;
  Ellipsoid tumor;
};

struct Phantom {
  CtVolume volume;  ///< Hounsfield
  LabelVolume labels;
  PhantomGeometry geometry;
};

/// Soft-tissue body ellipse in air with bone arcs along its outline, an
/// organ ellipsoid (class 1) and a tumor ellipsoid (class 2) strictly inside
/// it. Labels depend on geometry only; noise is drawn from its own stream.
/// Throws GeometryError when the grid is too small to hold the anatomy.
Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed);

struct DatasetConfig {
  std::size_t count = 10;
  /// Square in-plane size range (voxels).
  std::uint32_t size_min = 64;
  std::uint32_t size_max = 64;
  std::uint32_t slices_min = 16;
  std::uint32_t slices_max = 32;
  /// Slice thickness range in mm; draws are rounded to 0.25 mm.
  double thickness_min = 1.0;
  double thickness_max = 5.0;
  std::string id_prefix = "ph";
  PhantomConfig phantom;

  void validate() const;
};

struct DatasetEntry {
  ManifestRecord record;
  Phantom phantom;
};

/// In-memory dataset; ids are <prefix><index, zero-padded to 3 digits>.
std::vector<DatasetEntry> generate_entries(const DatasetConfig& cfg, std::uint64_t seed);

/// Writes <id>.ctv / <id>.lbl files and manifest.tsv into out_dir and
/// returns the manifest (paths relative to out_dir).
Manifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace ctseg
