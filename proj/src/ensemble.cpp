#include "ctseg/ensemble.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ctseg/dataset.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

namespace {

void require_members(std::span<const ProbMap> members) {
  if (members.empty()) throw EmptyInputError("no ensemble members");
  for (const auto& m : members) require_same_dims(members.front().dims(), m.dims(), "ensemble member");
}

std::vector<ProbMap> mapped(std::span<const ProbMap> members, std::uint8_t num_classes) {
  std::vector<ProbMap> out;
  out.reserve(members.size());
  for (const auto& m : members) {
    if (m.num_classes() == num_classes) {
      out.push_back(m);
    } else if (m.num_classes() == 2) {
      out.push_back(map_binary_member(m, num_classes));
    } else {
      throw ShapeError("member with " + std::to_string(m.num_classes()) + " classes cannot feed a " +
                       std::to_string(num_classes) + "-class ensemble");
    }
  }
  return out;
}

std::vector<std::uint8_t> class_counts(std::span<const ProbMap> members) {
  std::vector<std::uint8_t> counts;
  for (const auto& m : members) counts.push_back(m.num_classes());
  return counts;
}

}  // namespace

std::vector<Candidate> select_top_n(std::span<const Candidate> candidates, std::size_t n) {
  if (candidates.empty()) throw EmptyInputError("no candidates to select from");
  std::vector<Candidate> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (sorted.size() > n) sorted.resize(n);
  return sorted;
}

ProbMap combine_mean(std::span<const ProbMap> members, std::span<const double> weights) {
  require_members(members);
  const std::uint8_t classes = members.front().num_classes();
  for (const auto& m : members) {
    if (m.num_classes() != classes) throw ShapeError("ensemble members differ in class count");
  }
  std::vector<double> w(members.size(), 1.0);
  if (!weights.empty()) {
    if (weights.size() != members.size()) throw WeightError("one weight per member is required");
    w.assign(weights.begin(), weights.end());
  }
  double wsum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0 && std::isfinite(x))) throw WeightError("member weights must be finite and >= 0");
    wsum += x;
  }
  if (!(wsum > 0.0)) throw WeightError("member weights sum to zero");

  const std::size_t n = members.front().dims().voxels();
  std::vector<double> acc(classes * n, 0.0);
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (w[m] == 0.0) continue;
    const auto p = members[m].probs();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w[m] * p[k];
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += acc[c * n + i];
    for (std::size_t c = 0; c < classes; ++c) acc[c * n + i] /= s;
  }
  const auto& f = members.front();
  return ProbMap::from_doubles(f.dims(), f.spacing(), classes, acc);
}

ProbMap map_binary_member(const ProbMap& binary, std::uint8_t num_classes) {
  if (binary.num_classes() != 2) throw ShapeError("binary member must have exactly 2 classes");
  if (num_classes < 2) throw ShapeError("target class count must be >= 2");
  const std::size_t n = binary.dims().voxels();
  std::vector<float> out(std::size_t{num_classes} * n, 0.0f);
  std::copy(binary.probs().begin(), binary.probs().end(), out.begin());
  return ProbMap(binary.dims(), binary.spacing(), num_classes, std::move(out));
}

FeatureMatrix stack_features(std::span<const ProbMap> members) {
  require_members(members);
  const std::size_t n = members.front().dims().voxels();
  std::size_t cols = 0;
  for (const auto& m : members) cols += m.num_classes();
  FeatureMatrix fm{n, cols, std::vector<double>(n * cols)};
  std::size_t offset = 0;
  for (const auto& m : members) {
    for (std::size_t c = 0; c < m.num_classes(); ++c) {
      const auto ch = m.channel(c);
      for (std::size_t i = 0; i < n; ++i) fm.values[i * cols + offset + c] = ch[i];
    }
    offset += m.num_classes();
  }
  return fm;
}

PredictorParams identity_stacker(std::span<const std::uint8_t> member_classes, std::uint8_t num_classes) {
  std::size_t cols = 0;
  for (auto c : member_classes) cols += c;
  auto p = PredictorParams::zeros(num_classes, cols, kStackerFeatureVersion);
  std::size_t offset = 0;
  for (auto mc : member_classes) {
    for (std::size_t c = 0; c < std::min<std::size_t>(mc, num_classes); ++c) p.weights[c * cols + offset + c] = 1.0;
    offset += mc;
  }
  return p;
}

void StackerConfig::validate() const {
  loss.validate();
  adam.validate();
}

PredictorParams train_stacker(std::span<const StackerSample> samples, const StackerConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw EmptyInputError("stacker needs at least one sample");
  const std::uint8_t classes = samples.front().truth.num_classes();

  std::vector<FeatureMatrix> features;
  std::vector<std::uint8_t> counts;
  for (const auto& s : samples) {
    if (s.members.empty()) throw EmptyInputError("stacker sample without members");
    require_same_dims(s.members.front().dims(), s.truth.dims(), "stacker sample");
    if (s.truth.num_classes() != classes) throw ShapeError("stacker samples differ in class count");
    const auto these = class_counts(s.members);
    if (counts.empty()) {
      counts = these;
    } else if (these != counts) {
      throw ShapeError("stacker samples have different member layouts");
    }
    features.push_back(stack_features(s.members));
  }

  auto params = identity_stacker(counts, classes);
  AdamState adam(params.size(), cfg.adam);
  auto flat = params.flatten();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {epoch}));
    const auto order = sample_without_replacement(rng, samples.size(), samples.size());
    for (std::size_t step = 0; step < order.size(); ++step) {
      const auto k = order[step];
      const auto probs = linear_softmax(params, features[k]);
      const auto loss = combined_loss(probs, samples[k].truth.labels(), classes, cfg.loss, true);
      if (!std::isfinite(loss.value)) throw DivergenceError("non-finite stacker loss", epoch, step);
      const auto grad = linear_softmax_backward(params, features[k], probs, loss.grad);
      adam_step(flat, grad, adam);
      params.assign(flat);
    }
  }
  return params;
}

ProbMap apply_stacker(const PredictorParams& stacker, std::span<const ProbMap> members) {
  require_members(members);
  const auto fm = stack_features(members);
  const auto probs = linear_softmax(stacker, fm);
  const auto& f = members.front();
  return ProbMap::from_doubles(f.dims(), f.spacing(), static_cast<std::uint8_t>(stacker.num_classes), probs);
}

std::string_view to_string(CombinerKind k) noexcept {
  switch (k) {
    case CombinerKind::Mean: return "mean";
    case CombinerKind::Weighted: return "weighted";
    case CombinerKind::Stacker: return "stacker";
  }
  return "mean";
}

CombinerKind parse_combiner(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "mean") return CombinerKind::Mean;
  if (lower == "weighted") return CombinerKind::Weighted;
  if (lower == "stacker") return CombinerKind::Stacker;
  throw ConfigError("unknown combiner '" + std::string(name) + "'");
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw ConfigError("ensemble needs at least one member");
  for (const auto& m : members) {
    if (!std::isfinite(m.score)) throw ConfigError("member score must be finite");
  }
  if (combiner == CombinerKind::Stacker && !stacker_path) throw ConfigError("stacker combiner needs a stacker file");
}

void write_ensemble_spec(const EnsembleSpec& spec, std::ostream& out) {
  spec.validate();
  for (const auto& m : spec.members) {
    out << "member " << m.params_path.generic_string() << ' ' << m.mode << ' ' << format_double(m.score) << '\n';
  }
  out << "combiner " << to_string(spec.combiner) << '\n';
  if (spec.stacker_path) out << "stacker " << spec.stacker_path->generic_string() << '\n';
}

EnsembleSpec read_ensemble_spec(std::istream& in, const std::filesystem::path& base_dir) {
  EnsembleSpec spec;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    std::vector<std::string> rest;
    for (std::string tok; fields >> tok;) rest.push_back(tok);
    if (key == "member") {
      if (rest.size() != 3) throw ParseError("member needs <path> <mode> <score>", line_no);
      double score = 0.0;
      const auto& s = rest[2];
      const auto r = std::from_chars(s.data(), s.data() + s.size(), score);
      if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ParseError("bad score '" + s + "'", line_no);
      spec.members.push_back({resolve(rest[0]), rest[1], score});
    } else if (key == "combiner") {
      if (rest.size() != 1) throw ParseError("combiner needs one kind", line_no);
      try {
        spec.combiner = parse_combiner(rest[0]);
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), line_no);
      }
    } else if (key == "stacker") {
      if (rest.size() != 1) throw ParseError("stacker needs one path", line_no);
      spec.stacker_path = resolve(rest[0]);
    } else {
      throw ParseError("unknown directive '" + key + "'", line_no);
    }
  }
  spec.validate();
  return spec;
}

EnsembleSpec load_ensemble_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string(), 0);
  return read_ensemble_spec(in, path.parent_path());
}

void save_ensemble_spec(const EnsembleSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing", 0);
  write_ensemble_spec(spec, out);
}

StackedPrediction combine_members(std::span<const ProbMap> members, CombinerKind kind,
                                  std::span<const double> weights, const PredictorParams* stacker,
                                  std::uint8_t num_classes) {
  require_members(members);
  if (kind == CombinerKind::Stacker) {
    if (!stacker) throw ConfigError("stacker combiner without stacker parameters");
    if (stacker->feature_version != kStackerFeatureVersion) throw ShapeError("parameters are not a stacker");
    // Unmapped: the stacker was fitted on the raw member channels.
    auto probs = apply_stacker(*stacker, members);
    auto labels = argmax_labels(probs);
    return {std::move(probs), std::move(labels)};
  }
  const auto maps = mapped(members, num_classes);
  auto probs = kind == CombinerKind::Weighted ? combine_mean(maps, weights) : combine_mean(maps);
  auto labels = argmax_labels(probs);
  return {std::move(probs), std::move(labels)};
}

StackedPrediction stacked_predict(const EnsembleSpec& spec, const CtVolume& volume, std::uint8_t num_classes) {
  spec.validate();
  std::vector<ProbMap> outputs;
  std::vector<double> weights;
  for (const auto& m : spec.members) {
    outputs.push_back(predict(load_params(m.params_path), volume));
    weights.push_back(m.score);
  }
  std::optional<PredictorParams> stacker;
  if (spec.combiner == CombinerKind::Stacker) stacker = load_params(*spec.stacker_path);
  return combine_members(outputs, spec.combiner, weights, stacker ? &*stacker : nullptr, num_classes);
}

}  // namespace ctseg
