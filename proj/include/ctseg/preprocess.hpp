#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ctseg/dataset.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

enum class WindowPreset { Organ, Bone, Lung, Custom };

std::string_view to_string(WindowPreset p) noexcept;
WindowPreset parse_window_preset(std::string_view name);

/// Quantile fractions bounding the intensity window of each volume.
struct WindowConfig {
  double q_low = 0.6;
  double q_high = 0.99;
  WindowPreset preset = WindowPreset::Organ;

  /// Organ (0.6, 0.99), bone (0.9, 1.0), lung (0.02, 0.6).
  static WindowConfig from_preset(WindowPreset preset);
  /// Throws ConfigError unless 0 <= q_low < q_high <= 1.
  void validate() const;
};

/// Pooled intensity statistics of a windowed dataset sample.
struct IntensityStats {
  double mean = 0.0;
  double std = 1.0;
  double sample_fraction = 1.0;
  std::uint64_t seed = 0;
  std::size_t n_volumes_sampled = 1;

  bool operator==(const IntensityStats&) const = default;
};

/// Key=value text (mean, std, sample_fraction, seed, n_volumes_sampled).
void write_stats(const IntensityStats& stats, std::ostream& out);
IntensityStats read_stats(std::istream& in);
void save_stats(const IntensityStats& stats, const std::filesystem::path& path);
IntensityStats load_stats(const std::filesystem::path& path);

/// Linear-interpolation quantile: with sorted values v and p = q (n - 1),
/// returns v[floor(p)] + frac(p) (v[floor(p) + 1] - v[floor(p)]).
/// Throws EmptyInputError on empty input and ConfigError for q outside [0, 1].
double quantile(std::span<const float> values, double q);
double quantile(std::span<const double> values, double q);

struct WindowBounds {
  double lo = 0.0;
  double hi = 0.0;
};

/// Per-volume quantile bounds; throws DegenerateWindowError when lo == hi.
WindowBounds window_bounds(const CtVolume& volume, const WindowConfig& cfg);

/// Clamps every voxel to the volume's own quantile window. Input must be in
/// Hounsfield units; the result is WINDOWED.
CtVolume window(const CtVolume& volume, const WindowConfig& cfg);

/// Draws ceil(sample_fraction * N) volumes without replacement, windows each
/// and returns the pooled mean and population standard deviation. Volumes
/// whose window is degenerate are skipped; StatsError if none remain.
IntensityStats sample_stats(const Manifest& manifest, const VolumeStore& store, const WindowConfig& cfg,
                            double sample_fraction, std::uint64_t seed);

/// Indices (into the manifest) that sample_stats draws for these arguments.
std::vector<std::size_t> stats_sample_indices(std::size_t manifest_size, double sample_fraction, std::uint64_t seed);

/// Pooled mean / population std over several volumes, compensated sums.
IntensityStats pooled_stats(std::span<const CtVolume> volumes);

/// z-score: (v - mean) / std. Input must be WINDOWED; result is NORMALIZED.
CtVolume normalize(const CtVolume& volume, const IntensityStats& stats);

struct SliceSelection {
  CtVolume volume;
  std::optional<LabelVolume> labels;
  /// Source z index of every output slice, ascending.
  std::vector<std::size_t> source_slices;
};

/// Reduces a volume to k slices. In training mode candidates are the slices
/// holding at least one non-background label (labels required); otherwise
/// every slice. Draws without replacement when there are at least k
/// candidates and with replacement otherwise, then sorts by z.
SliceSelection select_slices(const CtVolume& volume, const LabelVolume* labels, std::size_t k, bool training,
                             std::uint64_t seed);

/// Source slice indices select_slices would pick; candidates in ascending z.
std::vector<std::size_t> draw_slice_indices(std::span<const std::size_t> candidates, std::size_t k,
                                            std::uint64_t seed);

/// In-plane resampling of square slices to target x target: intensities
/// bilinear at pixel centres, labels nearest neighbour, sx/sy scaled by
/// nx / target. Throws UpsampleRefusedError when target > nx.
VolumePair downsample(const CtVolume& volume, const LabelVolume* labels, std::uint32_t target);

}  // namespace ctseg
