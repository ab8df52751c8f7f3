#include "ctseg/volume.hpp"

#include <cmath>
#include <string>

#include "ctseg/errors.hpp"

namespace ctseg {

namespace {

void check_grid(const Dims& dims, const Spacing& spacing, std::size_t buffer_len) {
  if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0) {
    throw ShapeError("volume dims must be >= 1");
  }
  if (buffer_len != dims.voxels()) {
    throw ShapeError("voxel buffer length " + std::to_string(buffer_len) + " does not match dims (" +
                     std::to_string(dims.voxels()) + ")");
  }
  for (float s : {spacing.sx, spacing.sy, spacing.sz}) {
    if (!(std::isfinite(s) && s > 0.0f)) {
      throw RangeError("voxel spacing must be finite and > 0");
    }
  }
}

}  // namespace

std::string_view to_string(UnitState s) noexcept {
  switch (s) {
    case UnitState::Hounsfield: return "hounsfield";
    case UnitState::Windowed: return "windowed";
    case UnitState::Normalized: return "normalized";
  }
  return "unknown";
}

CtVolume::CtVolume(Dims dims, Spacing spacing, UnitState state, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), state_(state), voxels_(std::move(voxels)) {
  check_grid(dims_, spacing_, voxels_.size());
  if (state_ != UnitState::Hounsfield && state_ != UnitState::Windowed && state_ != UnitState::Normalized) {
    throw RangeError("unknown unit state");
  }
  for (float v : voxels_) {
    if (!std::isfinite(v)) {
      throw RangeError("non-finite voxel value");
    }
  }
  if (state_ == UnitState::Hounsfield) {
    for (float v : voxels_) {
      if (v < kMinHu || v > kMaxHu || std::nearbyint(v) != v) {
        throw RangeError("Hounsfield value " + std::to_string(v) + " outside [-1024, 3071] or not integral");
      }
    }
  }
}

LabelVolume::LabelVolume(Dims dims, Spacing spacing, std::uint8_t num_classes, std::vector<std::uint8_t> labels)
    : dims_(dims), spacing_(spacing), num_classes_(num_classes), labels_(std::move(labels)) {
  check_grid(dims_, spacing_, labels_.size());
  if (num_classes_ < 2) {
    throw RangeError("label volume needs at least 2 classes");
  }
  for (auto l : labels_) {
    if (l >= num_classes_) {
      throw RangeError("label " + std::to_string(l) + " >= num_classes " + std::to_string(num_classes_));
    }
  }
}

ProbMap::ProbMap(Dims dims, Spacing spacing, std::uint8_t num_classes, std::vector<float> probs)
    : dims_(dims), spacing_(spacing), num_classes_(num_classes), probs_(std::move(probs)) {
  if (num_classes_ < 2) {
    throw RangeError("probability map needs at least 2 classes");
  }
  if (probs_.size() % num_classes_ != 0) {
    throw ShapeError("probability buffer is not a multiple of num_classes");
  }
  check_grid(dims_, spacing_, probs_.size() / num_classes_);
  const std::size_t n = dims_.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes_; ++c) {
      const float p = probs_[c * n + i];
      if (!(p >= 0.0f && p <= 1.0f)) {
        throw NormalizationError("probability outside [0, 1] at voxel " + std::to_string(i));
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > kProbSumTolerance) {
      throw NormalizationError("probabilities at voxel " + std::to_string(i) + " sum to " + std::to_string(sum));
    }
  }
}

ProbMap ProbMap::from_doubles(Dims dims, Spacing spacing, std::uint8_t num_classes, std::span<const double> probs) {
  std::vector<float> narrowed(probs.begin(), probs.end());
  return ProbMap(dims, spacing, num_classes, std::move(narrowed));
}

std::vector<double> ProbMap::to_doubles() const { return {probs_.begin(), probs_.end()}; }

LabelVolume argmax_labels(const ProbMap& probs) {
  const std::size_t n = probs.dims().voxels();
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    float best = probs.at(0, i);
    for (std::size_t c = 1; c < probs.num_classes(); ++c) {
      if (probs.at(c, i) > best) {
        best = probs.at(c, i);
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return LabelVolume(probs.dims(), probs.spacing(), probs.num_classes(), std::move(out));
}

ProbMap one_hot(const LabelVolume& labels) {
  const std::size_t n = labels.dims().voxels();
  std::vector<float> probs(n * labels.num_classes(), 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    probs[labels.labels()[i] * n + i] = 1.0f;
  }
  return ProbMap(labels.dims(), labels.spacing(), labels.num_classes(), std::move(probs));
}

void require_same_dims(const Dims& a, const Dims& b, std::string_view what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": dims mismatch (" + std::to_string(a.nx) + "x" + std::to_string(a.ny) +
                     "x" + std::to_string(a.nz) + " vs " + std::to_string(b.nx) + "x" + std::to_string(b.ny) + "x" +
                     std::to_string(b.nz) + ")");
  }
}

}  // namespace ctseg
