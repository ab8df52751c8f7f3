#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctseg/augment.hpp"
#include "ctseg/dataset.hpp"
#include "ctseg/objective.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

/// Per-voxel features of the reference segmenter: intensity, 3x3 in-plane
/// mean, in-plane gradient magnitude, x and y position in [-1, 1].
inline constexpr std::size_t kNumFeatures = 5;
inline constexpr std::uint16_t kVoxelFeatureVersion = 1;

/// Row-major voxel x feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const noexcept {
    return std::span<const double>(values).subspan(i * cols, cols);
  }
};

/// Throws UnitStateError unless the volume is NORMALIZED. Borders are
/// handled by clamping coordinates into the slice.
FeatureMatrix featurize(const CtVolume& volume);

/// Linear softmax classifier: p = softmax(W x + b) per row.
struct PredictorParams {
  std::uint16_t feature_version = kVoxelFeatureVersion;
  std::size_t num_classes = 0;
  std::size_t num_features = 0;
  std::vector<double> weights;  ///< num_classes x num_features, row-major
  std::vector<double> bias;     ///< num_classes

  static PredictorParams zeros(std::size_t num_classes, std::size_t num_features,
                               std::uint16_t feature_version = kVoxelFeatureVersion);
  /// Entries uniform in [-scale, scale] drawn from seed (weights, then biases).
  static PredictorParams random(std::size_t num_classes, std::size_t num_features, std::uint64_t seed,
                                double scale = 0.01, std::uint16_t feature_version = kVoxelFeatureVersion);

  /// Throws ShapeError for inconsistent sizes and RangeError for non-finite entries.
  void validate() const;
  std::size_t size() const noexcept { return weights.size() + bias.size(); }
  /// Weights followed by biases; the layout adam_step operates on.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

  bool operator==(const PredictorParams&) const = default;
};

/// "PRM1", feature version u16, num_classes u16, num_features u16, then
/// weights and biases as little-endian IEEE 754 doubles.
void write_params(const PredictorParams& params, std::ostream& out);
PredictorParams read_params(std::istream& in);
void save_params(const PredictorParams& params, const std::filesystem::path& path);
PredictorParams load_params(const std::filesystem::path& path);

/// Class-major probabilities (probs[c * rows + i]) for every feature row.
/// Throws ShapeError when features.cols != params.num_features.
std::vector<double> linear_softmax(const PredictorParams& params, const FeatureMatrix& features);

/// Gradient of a loss with respect to the flattened parameters, given the
/// probabilities the forward pass produced and dL/dp (both class-major).
std::vector<double> linear_softmax_backward(const PredictorParams& params, const FeatureMatrix& features,
                                            std::span<const double> probs, std::span<const double> dl_dp);

/// Features of a NORMALIZED volume pushed through the classifier.
ProbMap predict(const PredictorParams& params, const CtVolume& volume);

struct TrainConfig {
  TrainMode mode = TrainMode::ThreeD;
  std::size_t batch_size = 1;
  std::size_t max_epochs = 100;
  /// 0 means ceil(training volumes / batch_size).
  std::size_t batches_per_epoch = 0;
  std::size_t patience = 10;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  LossConfig loss;
  AdamConfig adam;
  AugmentConfig augment;
  bool augmentation = true;
  WindowConfig window;
  double stats_fraction = 0.2;
  std::size_t slices = 16;
  std::uint32_t size = 128;
  double init_scale = 0.01;
  std::uint8_t num_classes = 3;

  /// 28 for 2D, 1 for 3D.
  static std::size_t default_batch_size(TrainMode mode) noexcept { return mode == TrainMode::TwoD ? 28 : 1; }
  static TrainConfig for_mode(TrainMode mode);
  /// Throws ConfigError on an invalid field.
  void validate() const;
};

struct LabeledVolume {
  std::string id;
  CtVolume volume;  ///< Hounsfield
  LabelVolume labels;
};

/// Deterministic inference preprocessing: window, normalize, then in-plane
/// downsampling to min(size, nx). Labels follow the same grid.
VolumePair prepare_inference(const CtVolume& volume, const LabelVolume* labels, const IntensityStats& stats,
                             const WindowConfig& window, std::uint32_t size);

struct VolumeScore {
  std::string id;
  double loss = 0.0;
  /// Dice of every class, background included (index = class id).
  std::vector<double> class_dice;
  double pooled_foreground = 0.0;
};

struct ValidationResult {
  /// Mean of the per-volume combined losses.
  double loss = 0.0;
  std::vector<VolumeScore> volumes;
};

/// No augmentation; every slice is kept. Throws EmptyInputError for an
/// empty validation set.
ValidationResult validate(const PredictorParams& params, std::span<const LabeledVolume> validation,
                          const IntensityStats& stats, const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  PredictorParams params;  ///< best validation loss seen, initial params included
  IntensityStats stats;
  double initial_val_loss = 0.0;
  std::size_t best_epoch = 0;  ///< 0 = the initial parameters
  double best_val_loss = 0.0;
  std::vector<EpochRecord> log;
};

/// Tab-separated lines (epoch, train loss, val loss, wall seconds) after a
/// '#' header describing the validation protocol.
void write_train_log(const TrainResult& result, std::ostream& out);

/// The training loop: per batch, sample volumes, window, normalize,
/// augment, downsample, reduce slices, forward, combined loss, ADAM step;
/// validate after each epoch and stop after `patience` epochs without an
/// improvement larger than `tolerance`. Intensity statistics are sampled
/// from the training volumes. Throws DivergenceError on a non-finite loss.
TrainResult train(std::span<const LabeledVolume> training, std::span<const LabeledVolume> validation,
                  const TrainConfig& cfg);

/// Loads the training folds and the held-out fold and runs train.
TrainResult train(const Manifest& manifest, const VolumeStore& store, const FoldPlan& plan, std::size_t held_out,
                  const TrainConfig& cfg);

/// Loads the listed records; throws ManifestError when one has no label file.
std::vector<LabeledVolume> load_labeled(const Manifest& manifest, const VolumeStore& store,
                                        std::span<const std::string> ids);

}  // namespace ctseg
