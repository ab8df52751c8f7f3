#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ctseg/volume.hpp"

namespace ctseg {

struct LossConfig {
  double alpha = 0.6;
  double beta = 0.4;
  double smooth = 1e-5;
  double prob_floor = 1e-12;

  /// Throws ConfigError unless alpha, beta >= 0, alpha + beta > 0,
  /// smooth > 0 and prob_floor in (0, 1e-3].
  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

/// The loss functions below take probabilities class-major (probs[c * n + i])
/// for n voxels, and truth as class ids in [0, num_classes). All arithmetic is
/// in double precision. Size mismatches throw ShapeError; a label outside the
/// class range throws RangeError.

struct TanimotoLoss {
  std::vector<double> per_class;
  double mean = 0.0;
};

TanimotoLoss tanimoto_loss(std::span<const double> probs, std::span<const std::uint8_t> truth,
                           std::size_t num_classes, double smooth);
TanimotoLoss tanimoto_loss(const ProbMap& pred, const LabelVolume& truth, double smooth);

/// Gradient of the class-mean Tanimoto loss with respect to every probability.
std::vector<double> tanimoto_grad(std::span<const double> probs, std::span<const std::uint8_t> truth,
                                  std::size_t num_classes, double smooth);
std::vector<double> tanimoto_grad(const ProbMap& pred, const LabelVolume& truth, double smooth);

/// Mean over voxels of -ln(max(p_true, prob_floor)).
double cross_entropy(std::span<const double> probs, std::span<const std::uint8_t> truth, std::size_t num_classes,
                     double prob_floor);
double cross_entropy(const ProbMap& pred, const LabelVolume& truth, double prob_floor);

/// Zero where the floor is active.
std::vector<double> cross_entropy_grad(std::span<const double> probs, std::span<const std::uint8_t> truth,
                                       std::size_t num_classes, double prob_floor);
std::vector<double> cross_entropy_grad(const ProbMap& pred, const LabelVolume& truth, double prob_floor);

struct CombinedLoss {
  double value = 0.0;
  double tanimoto = 0.0;
  double cross_entropy = 0.0;
  /// Empty unless requested.
  std::vector<double> grad;
};

/// alpha * Tanimoto + beta * CE, with the matching gradient when with_grad.
CombinedLoss combined_loss(std::span<const double> probs, std::span<const std::uint8_t> truth,
                           std::size_t num_classes, const LossConfig& cfg, bool with_grad = true);
CombinedLoss combined_loss(const ProbMap& pred, const LabelVolume& truth, const LossConfig& cfg,
                           bool with_grad = true);

/// Voxel counts behind one Dice value.
struct DiceCounts {
  std::size_t overlap = 0;
  std::size_t predicted = 0;
  std::size_t actual = 0;

  bool both_empty() const noexcept { return predicted == 0 && actual == 0; }
  /// 2 |P & A| / (|P| + |A|); 1 when both masks are empty.
  double score() const noexcept;
};

DiceCounts dice_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t cls);
double dice_score(const LabelVolume& pred, const LabelVolume& truth, std::uint8_t cls);

/// How the "total" column is formed from a multi-class labelling.
enum class TotalDice {
  PooledForeground,  ///< binary Dice of (label > 0)
  ForegroundMean,    ///< mean of per-class Dice over classes 1..C-1
};

std::string_view to_string(TotalDice t) noexcept;
TotalDice parse_total_dice(std::string_view name);

DiceCounts pooled_foreground_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
double total_dice(const LabelVolume& pred, const LabelVolume& truth, TotalDice kind = TotalDice::PooledForeground);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
};

/// Throws EmptyInputError on an empty input.
Aggregate aggregate(std::span<const double> scores);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Throws ConfigError for lr < 0, betas outside [0, 1) or eps <= 0.
  void validate() const;
  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  explicit AdamState(std::size_t n, AdamConfig config = {}) : cfg(config), m(n, 0.0), v(n, 0.0) {}
  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected ADAM update of params in place; increments state.step.
/// Throws ShapeError when the lengths of params, grads, m and v differ.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace ctseg
