#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace ctseg {

inline constexpr int kMinHu = -1024;
inline constexpr int kMaxHu = 3071;

/// Tolerance on per-voxel probability sums.
inline constexpr double kProbSumTolerance = 1e-5;

struct Dims {
  std::uint32_t nx = 1;
  std::uint32_t ny = 1;
  std::uint32_t nz = 1;

  std::size_t slice_size() const noexcept { return std::size_t{nx} * ny; }
  std::size_t voxels() const noexcept { return slice_size() * nz; }
  bool operator==(const Dims&) const = default;
};

/// Millimetres per voxel; sz is the slice thickness.
struct Spacing {
  float sx = 1.0f;
  float sy = 1.0f;
  float sz = 1.0f;
  bool operator==(const Spacing&) const = default;
};

enum class UnitState : std::uint8_t { Hounsfield = 0, Windowed = 1, Normalized = 2 };

std::string_view to_string(UnitState s) noexcept;

/// Intensity volume. Voxels are ordered x fastest, then y, then z, so each
/// slice is a contiguous plane. Immutable after construction.
class CtVolume {
public:
  /// Throws ShapeError / RangeError when the invariants do not hold:
  /// dims >= 1, buffer length matches, spacing > 0, values finite, and
  /// integral values in [kMinHu, kMaxHu] for Hounsfield volumes.
  CtVolume(Dims dims, Spacing spacing, UnitState state, std::vector<float> voxels);

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  UnitState unit_state() const noexcept { return state_; }

  std::span<const float> voxels() const noexcept { return voxels_; }
  std::span<const float> slice(std::size_t z) const noexcept {
    return std::span<const float>(voxels_).subspan(z * dims_.slice_size(), dims_.slice_size());
  }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return (z * dims_.ny + y) * dims_.nx + x;
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const noexcept { return voxels_[index(x, y, z)]; }

  bool operator==(const CtVolume&) const = default;

private:
  Dims dims_;
  Spacing spacing_;
  UnitState state_;
  std::vector<float> voxels_;
};

/// Per-voxel class ids: 0 background, 1 organ, 2 tumor by convention.
class LabelVolume {
public:
  LabelVolume(Dims dims, Spacing spacing, std::uint8_t num_classes, std::vector<std::uint8_t> labels);

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::uint8_t num_classes() const noexcept { return num_classes_; }
  std::span<const std::uint8_t> labels() const noexcept { return labels_; }
  std::span<const std::uint8_t> slice(std::size_t z) const noexcept {
    return std::span<const std::uint8_t>(labels_).subspan(z * dims_.slice_size(), dims_.slice_size());
  }

  bool operator==(const LabelVolume&) const = default;

private:
  Dims dims_;
  Spacing spacing_;
  std::uint8_t num_classes_;
  std::vector<std::uint8_t> labels_;
};

/// Per-voxel class probabilities, stored class-major: probs[c * voxels + i].
class ProbMap {
public:
  /// Throws NormalizationError if an entry leaves [0, 1] or a voxel's
  /// probabilities do not sum to 1 within kProbSumTolerance.
  ProbMap(Dims dims, Spacing spacing, std::uint8_t num_classes, std::vector<float> probs);

  /// Narrows double probabilities (class-major) to storage precision.
  static ProbMap from_doubles(Dims dims, Spacing spacing, std::uint8_t num_classes,
                              std::span<const double> probs);

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::uint8_t num_classes() const noexcept { return num_classes_; }
  std::span<const float> probs() const noexcept { return probs_; }
  std::span<const float> channel(std::size_t c) const noexcept {
    return std::span<const float>(probs_).subspan(c * dims_.voxels(), dims_.voxels());
  }
  float at(std::size_t c, std::size_t i) const noexcept { return probs_[c * dims_.voxels() + i]; }

  /// Class-major probabilities widened to double.
  std::vector<double> to_doubles() const;

  bool operator==(const ProbMap&) const = default;

private:
  Dims dims_;
  Spacing spacing_;
  std::uint8_t num_classes_;
  std::vector<float> probs_;
};

/// An intensity volume with its (optional) co-registered labels.
struct VolumePair {
  CtVolume volume;
  std::optional<LabelVolume> labels;
};

/// Per-voxel argmax; ties resolve to the lower class id.
LabelVolume argmax_labels(const ProbMap& probs);

/// Exact one-hot encoding of a label volume.
ProbMap one_hot(const LabelVolume& labels);

/// Throws ShapeError unless both grids have identical dims.
void require_same_dims(const Dims& a, const Dims& b, std::string_view what);

}  // namespace ctseg
