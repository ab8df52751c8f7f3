#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ctseg/volume.hpp"

namespace ctseg {

enum class TrainMode { TwoD, ThreeD };

std::string_view to_string(TrainMode m) noexcept;
TrainMode parse_train_mode(std::string_view name);

/// Magnitudes are in normalized-intensity units. The three policy
/// probabilities gate the batch-level chain (per mode) and the per-volume
/// range shift.
struct AugmentConfig {
  double noise_sigma = 0.05;
  double skip_rate = 0.1;
  double interp_insert_rate = 0.1;
  double shift_max = 0.1;
  double rot_max_deg = 16.0;
  double policy_3d = 0.8;
  double policy_2d = 0.9;
  double shift_prob = 0.2;

  double chain_probability(TrainMode mode) const noexcept { return mode == TrainMode::TwoD ? policy_2d : policy_3d; }
  /// Throws ConfigError for rates outside [0, 1], negative magnitudes or a
  /// rotation limit outside [0, 45] degrees.
  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

/// key=value lines. Missing keys keep their defaults; unknown keys are a ParseError.
void write_augment_config(const AugmentConfig& cfg, std::ostream& out);
AugmentConfig read_augment_config(std::istream& in);

/// Adds an independent Normal(0, sigma^2) draw to every voxel of a NORMALIZED volume.
CtVolume gaussian_noise(const CtVolume& volume, double sigma, std::uint64_t seed);

/// Interior slice indices removed by skip_slices, ascending.
std::vector<std::size_t> skipped_slices(std::size_t nz, double skip_rate, std::uint64_t seed);

/// Removes floor(skip_rate * nz) interior slices. The first and last slice
/// are kept, so sz is rescaled to preserve the covered extent. Throws
/// TooFewSlicesError for nz < 2 or when the count exceeds the interior.
VolumePair skip_slices(const CtVolume& volume, const LabelVolume* labels, double skip_rate, std::uint64_t seed);

/// Gap indices g (insert between slice g and g + 1) chosen by interpolate_slices, ascending.
std::vector<std::size_t> interpolation_gaps(std::size_t nz, double insert_rate, std::uint64_t seed);

/// Inserts the voxelwise mean of floor(insert_rate * (nz - 1)) adjacent
/// slice pairs between them. The inserted label slice copies the lower
/// neighbour (midpoint ties go to the lower index).
VolumePair interpolate_slices(const CtVolume& volume, const LabelVolume* labels, double insert_rate,
                              std::uint64_t seed);

/// The scalar range_shift adds: uniform in [-delta, +delta].
double draw_shift(double delta, std::uint64_t seed);
CtVolume range_shift(const CtVolume& volume, double delta, std::uint64_t seed);
CtVolume shift_by(const CtVolume& volume, double offset);

struct Rotated {
  VolumePair pair;
  double angle_deg = 0.0;
};

/// In-plane rotation about each slice centre. Intensities are bilinear with
/// out-of-field voxels set to the volume minimum; labels are nearest
/// neighbour with background fill.
VolumePair rotate_by(const CtVolume& volume, const LabelVolume* labels, double angle_deg);

/// rotate_by with an angle drawn uniformly from [-max_deg, +max_deg].
Rotated rotate(const CtVolume& volume, const LabelVolume* labels, double max_deg, std::uint64_t seed);

struct VolumeTrace {
  bool chain = false;
  double angle_deg = 0.0;
  bool shifted = false;
  double shift = 0.0;
};

/// What apply_policy did to one batch.
struct AugmentTrace {
  std::uint64_t batch_id = 0;
  bool chain_applied = false;
  std::vector<VolumeTrace> volumes;

  bool any_shift() const noexcept;
  /// Comma-separated subset of noise,skip,interpolate,rotate,shift or "none".
  std::string ops() const;
};

/// One tab-separated line: batch id, applied ops, drawn angles, drawn
/// shifts. Per-volume values are comma-separated; "-" marks "not drawn".
std::string format_trace(const AugmentTrace& trace);

struct AugmentedBatch {
  std::vector<VolumePair> items;
  AugmentTrace trace;
};

/// With probability chain_probability(mode) the whole batch goes through
/// noise, skip, interpolate, rotate (fixed order); independently, each volume
/// gets a range shift with probability shift_prob. Every draw comes from one
/// stream seeded by seed; per-volume sub-seeds are split from it. Skip and
/// interpolation are left out for volumes too thin for them.
AugmentedBatch apply_policy(std::vector<VolumePair> batch, const AugmentConfig& cfg, TrainMode mode,
                            std::uint64_t seed, std::uint64_t batch_id = 0);

}  // namespace ctseg
