#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctseg/objective.hpp"
#include "ctseg/reference_model.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

/// Stacker parameters use the PRM1 layout with this feature version.
inline constexpr std::uint16_t kStackerFeatureVersion = 2;

struct Candidate {
  std::string id;
  double score = 0.0;
};

/// The n highest scores, ties broken by ascending id; all candidates when
/// there are no more than n. Throws EmptyInputError on an empty input.
std::vector<Candidate> select_top_n(std::span<const Candidate> candidates, std::size_t n = 5);

/// Per-voxel weighted mean, renormalized. Empty weights mean equal weights.
/// Throws ShapeError on mismatched members and WeightError for negative,
/// non-finite or all-zero weights.
ProbMap combine_mean(std::span<const ProbMap> members, std::span<const double> weights = {});

/// Embeds a 2-class (background, foreground) map as (p_bg, p_fg, 0, ...).
ProbMap map_binary_member(const ProbMap& binary, std::uint8_t num_classes = 3);

/// Member probabilities concatenated per voxel: row i holds member 0's
/// classes, then member 1's, and so on.
FeatureMatrix stack_features(std::span<const ProbMap> members);

/// A stacker whose logits are the summed member evidence for each class,
/// so its argmax matches combine_mean before any training.
PredictorParams identity_stacker(std::span<const std::uint8_t> member_classes, std::uint8_t num_classes);

struct StackerSample {
  std::vector<ProbMap> members;
  LabelVolume truth;
};

struct StackerConfig {
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  LossConfig loss;
  AdamConfig adam{0.05, 0.9, 0.999, 1e-8};

  void validate() const;
};

/// Multinomial logistic regression from stacked member probabilities to the
/// truth, one ADAM step per sample per epoch in a seeded order, starting
/// from identity_stacker. Throws DivergenceError on a non-finite loss.
PredictorParams train_stacker(std::span<const StackerSample> samples, const StackerConfig& cfg);

ProbMap apply_stacker(const PredictorParams& stacker, std::span<const ProbMap> members);

enum class CombinerKind { Mean, Weighted, Stacker };

std::string_view to_string(CombinerKind k) noexcept;
CombinerKind parse_combiner(std::string_view name);

struct EnsembleMember {
  std::filesystem::path params_path;
  std::string mode;  ///< e.g. binary-3d, multiclass-2d
  double score = 0.0;
};

/// Text lines "member <path> <mode> <score>", "combiner <kind>",
/// "stacker <path>". WEIGHTED uses the member scores as weights.
struct EnsembleSpec {
  std::vector<EnsembleMember> members;
  CombinerKind combiner = CombinerKind::Mean;
  std::optional<std::filesystem::path> stacker_path;

  /// Throws ConfigError for no members, a STACKER without a stacker path or
  /// non-finite scores.
  void validate() const;
};

void write_ensemble_spec(const EnsembleSpec& spec, std::ostream& out);
/// Relative paths are resolved against base_dir.
EnsembleSpec read_ensemble_spec(std::istream& in, const std::filesystem::path& base_dir = {});
EnsembleSpec load_ensemble_spec(const std::filesystem::path& path);
void save_ensemble_spec(const EnsembleSpec& spec, const std::filesystem::path& path);

struct StackedPrediction {
  ProbMap probs;
  LabelVolume labels;
};

/// Fuses already computed member maps (binary members are mapped first).
StackedPrediction combine_members(std::span<const ProbMap> members, CombinerKind kind,
                                  std::span<const double> weights, const PredictorParams* stacker,
                                  std::uint8_t num_classes = 3);

/// Runs every member on a NORMALIZED volume and fuses the results.
StackedPrediction stacked_predict(const EnsembleSpec& spec, const CtVolume& volume, std::uint8_t num_classes = 3);

}  // namespace ctseg
