#include "ctseg/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>

#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Manifest::Manifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.id.empty()) {
      throw ManifestError("empty id in manifest");
    }
    if (r.slice_count < 1) {
      throw ManifestError("slice_count must be >= 1 for " + r.id);
    }
    if (!(std::isfinite(r.slice_thickness_mm) && r.slice_thickness_mm > 0.0)) {
      throw ManifestError("slice thickness must be > 0 for " + r.id);
    }
    if (!index_.emplace(r.id, i).second) {
      throw ManifestError("duplicate id " + r.id);
    }
  }
}

const ManifestRecord& Manifest::find(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) {
    throw ManifestError("unknown id " + id);
  }
  return records_[it->second];
}

std::filesystem::path Manifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
}

Manifest Manifest::subset(std::span<const std::string> ids) const {
  std::vector<ManifestRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(find(id));
  return Manifest(std::move(out), base_dir_);
}

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty() || line.front() == '#') continue;
    const auto f = split_tabs(line);
    if (f.size() != 5) {
      throw ParseError("expected 5 tab-separated fields, got " + std::to_string(f.size()), line_no);
    }
    ManifestRecord r;
    r.id = f[0];
    if (r.id.empty() || f[1].empty() || f[2].empty()) {
      throw ParseError("empty field", line_no);
    }
    r.volume_path = f[1];
    if (f[2] != "-") r.label_path = std::filesystem::path(f[2]);

    std::uint32_t count = 0;
    const auto [p, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), count);
    if (ec != std::errc{} || p != f[3].data() + f[3].size() || count < 1) {
      throw ParseError("slice count must be an integer >= 1, got '" + f[3] + "'", line_no);
    }
    r.slice_count = count;

    double thickness = 0.0;
    std::istringstream ts(f[4]);
    ts.imbue(std::locale::classic());
    if (!(ts >> thickness) || !ts.eof() || !std::isfinite(thickness) || thickness <= 0.0) {
      throw ParseError("slice thickness must be a number > 0, got '" + f[4] + "'", line_no);
    }
    r.slice_thickness_mm = thickness;
    records.push_back(std::move(r));
  }
  return Manifest(std::move(records), base_dir);
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open manifest " + path.string(), 0);
  }
  return parse_manifest(in, path.parent_path());
}

void write_manifest(const Manifest& manifest, std::ostream& out) {
  std::ostringstream buf;
  for (const auto& r : manifest.records()) {
    buf << r.id << '\t' << r.volume_path.generic_string() << '\t'
        << (r.label_path ? r.label_path->generic_string() : std::string("-")) << '\t' << r.slice_count << '\t'
        << format_double(r.slice_thickness_mm) << '\n';
  }
  out << buf.str();
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write manifest " + path.string(), 0);
  }
  write_manifest(manifest, out);
}

std::size_t FoldPlan::fold_of(const std::string& id) const {
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (std::find(folds[f].begin(), folds[f].end(), id) != folds[f].end()) return f;
  }
  throw FoldError("id " + id + " is not in the fold plan");
}

std::vector<std::string> FoldPlan::training_ids(std::size_t held_out) const {
  if (held_out >= folds.size()) {
    throw FoldError("held-out fold " + std::to_string(held_out) + " out of range");
  }
  std::vector<std::string> ids;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f != held_out) ids.insert(ids.end(), folds[f].begin(), folds[f].end());
  }
  return ids;
}

FoldPlan assign_folds(const Manifest& manifest, std::size_t k) {
  if (k == 0) {
    throw FoldError("k must be >= 1");
  }
  if (manifest.size() < k) {
    throw FoldError("manifest has " + std::to_string(manifest.size()) + " records, fewer than k=" + std::to_string(k));
  }
  std::vector<const ManifestRecord*> sorted;
  for (const auto& r : manifest.records()) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const ManifestRecord* a, const ManifestRecord* b) {
    return std::tie(a->slice_count, a->slice_thickness_mm, a->id) <
           std::tie(b->slice_count, b->slice_thickness_mm, b->id);
  });

  FoldPlan plan;
  plan.k = k;
  plan.folds.resize(k);
  const std::size_t n = sorted.size();
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) plan.folds[f].push_back(sorted[pos++]->id);
  }
  return plan;
}

void write_fold_plan(const FoldPlan& plan, std::ostream& out) {
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    for (const auto& id : plan.folds[f]) out << f << '\t' << id << '\n';
  }
}

FoldPlan read_fold_plan(std::istream& in) {
  FoldPlan plan;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty() || line.front() == '#') continue;
    const auto f = split_tabs(line);
    std::size_t fold = 0;
    if (f.size() != 2 || f[1].empty() ||
        std::from_chars(f[0].data(), f[0].data() + f[0].size(), fold).ptr != f[0].data() + f[0].size()) {
      throw ParseError("expected '<fold>\\t<id>'", line_no);
    }
    if (fold >= plan.folds.size()) plan.folds.resize(fold + 1);
    plan.folds[fold].push_back(f[1]);
  }
  plan.k = plan.folds.size();
  return plan;
}

std::vector<std::string> sample_batch(std::span<const std::string> ids, std::size_t batch_size, std::uint64_t seed,
                                      std::uint64_t epoch, std::uint64_t batch_index) {
  if (ids.empty()) {
    throw EmptyInputError("cannot sample a batch from an empty training set");
  }
  Rng rng(derive_seed(seed, {epoch, batch_index}));
  std::vector<std::string> batch;
  batch.reserve(batch_size);
  while (batch.size() < batch_size) {
    const std::size_t take = std::min(batch_size - batch.size(), ids.size());
    for (auto i : sample_without_replacement(rng, ids.size(), take)) batch.push_back(ids[i]);
  }
  return batch;
}

VolumePair FileVolumeStore::load(const ManifestRecord& record) const {
  const auto resolve = [&](const std::filesystem::path& p) {
    return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
  };
  VolumePair pair{load_volume(resolve(record.volume_path)), std::nullopt};
  if (record.label_path) {
    pair.labels = load_labels(resolve(*record.label_path));
    require_same_dims(pair.volume.dims(), pair.labels->dims(), "labels of " + record.id);
  }
  return pair;
}

VolumePair MemoryVolumeStore::load(const ManifestRecord& record) const {
  const auto it = items_.find(record.id);
  if (it == items_.end()) {
    throw ManifestError("no in-memory volume for id " + record.id);
  }
  return it->second;
}

}  // namespace ctseg
