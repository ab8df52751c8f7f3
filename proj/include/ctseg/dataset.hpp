#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctseg/volume.hpp"

namespace ctseg {

struct ManifestRecord {
  std::string id;
  std::filesystem::path volume_path;
  std::optional<std::filesystem::path> label_path;
  std::uint32_t slice_count = 1;
  double slice_thickness_mm = 1.0;
};

/// Dataset listing. Relative paths resolve against base_dir (the directory
/// holding the manifest file).
class Manifest {
public:
  /// Throws ManifestError on duplicate ids, slice_count < 1 or thickness <= 0.
  explicit Manifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir = {});

  const std::vector<ManifestRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::filesystem::path& base_dir() const noexcept { return base_dir_; }

  /// Throws ManifestError for an unknown id.
  const ManifestRecord& find(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::filesystem::path resolve(const std::filesystem::path& p) const;

  /// Records with the given ids, in the order given.
  Manifest subset(std::span<const std::string> ids) const;

private:
  std::vector<ManifestRecord> records_;
  std::filesystem::path base_dir_;
  std::map<std::string, std::size_t> index_;
};

/// Tab-separated lines: id, volume path, label path or "-", slice count,
/// slice thickness in mm. Blank lines and lines starting with '#' are skipped.
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, std::ostream& out);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Deterministic k-way partition of manifest ids.
struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::vector<std::string>> folds;

  std::size_t fold_of(const std::string& id) const;
  /// Ids of every fold except held_out, in fold order.
  std::vector<std::string> training_ids(std::size_t held_out) const;
};

/// Sorts by (slice_count, slice_thickness, id) and cuts the sorted list into
/// k contiguous blocks; the first (n mod k) blocks take one extra record.
/// Throws FoldError when k == 0 or the manifest has fewer than k records.
FoldPlan assign_folds(const Manifest& manifest, std::size_t k = 5);

/// Lines of "fold<TAB>id".
void write_fold_plan(const FoldPlan& plan, std::ostream& out);
FoldPlan read_fold_plan(std::istream& in);

/// Shortest decimal text that parses back to exactly v.
std::string format_double(double v);

/// Batch of ids for (seed, epoch, batch_index). Without replacement while
/// batch_size <= ids.size(); larger batches concatenate independent shuffles.
std::vector<std::string> sample_batch(std::span<const std::string> ids, std::size_t batch_size, std::uint64_t seed,
                                      std::uint64_t epoch, std::uint64_t batch_index);

/// Source of the volumes a manifest refers to.
class VolumeStore {
public:
  virtual ~VolumeStore() = default;
  virtual VolumePair load(const ManifestRecord& record) const = 0;
};

/// Reads CTV1/LBL1 files, resolving relative paths against base_dir.
class FileVolumeStore final : public VolumeStore {
public:
  explicit FileVolumeStore(std::filesystem::path base_dir = {}) : base_dir_(std::move(base_dir)) {}
  VolumePair load(const ManifestRecord& record) const override;

private:
  std::filesystem::path base_dir_;
};

/// In-memory store keyed by record id.
class MemoryVolumeStore final : public VolumeStore {
public:
  void add(const std::string& id, VolumePair pair) { items_.insert_or_assign(id, std::move(pair)); }
  VolumePair load(const ManifestRecord& record) const override;

private:
  std::map<std::string, VolumePair> items_;
};

}  // namespace ctseg
