#include "ctseg/reference_model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

namespace {

// Sub-stream keys under the run seed.
enum StreamKey : std::uint64_t { kInit = 1, kStats = 2, kBatch = 3, kAugment = 4, kSlices = 5 };

constexpr std::array<char, 4> kParamsMagic{'P', 'R', 'M', '1'};

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2]{static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (auto& c : b) {
    c = static_cast<char>(bits & 0xff);
    bits >>= 8;
  }
  out.write(b, 8);
}

void get_bytes(std::istream& in, unsigned char* dst, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw TruncationError(std::string("parameter file ends inside ") + what);
}

std::uint16_t get_u16(std::istream& in, const char* what) {
  unsigned char b[2];
  get_bytes(in, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  get_bytes(in, b, 8, "payload");
  std::uint64_t bits = 0;
  for (int k = 7; k >= 0; --k) bits = (bits << 8) | b[k];
  return std::bit_cast<double>(bits);
}

// Probabilities straight from the classifier, argmax'ed without narrowing.
std::vector<std::uint8_t> argmax_rows(std::span<const double> probs, std::size_t rows, std::size_t classes) {
  std::vector<std::uint8_t> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    double best = probs[i];
    for (std::size_t c = 1; c < classes; ++c) {
      if (probs[c * rows + i] > best) {
        best = probs[c * rows + i];
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

struct PreparedVolume {
  std::string id;
  FeatureMatrix features;
  LabelVolume labels;
};

PreparedVolume prepare_validation(const LabeledVolume& v, const IntensityStats& stats, const TrainConfig& cfg) {
  auto pair = prepare_inference(v.volume, &v.labels, stats, cfg.window, cfg.size);
  return {v.id, featurize(pair.volume), std::move(*pair.labels)};
}

VolumeScore score_volume(const PredictorParams& params, const PreparedVolume& pv, const LossConfig& loss) {
  const auto probs = linear_softmax(params, pv.features);
  const std::size_t classes = params.num_classes;
  VolumeScore s;
  s.id = pv.id;
  s.loss = combined_loss(probs, pv.labels.labels(), classes, loss, false).value;
  const auto pred = argmax_rows(probs, pv.features.rows, classes);
  for (std::size_t c = 0; c < classes; ++c) {
    s.class_dice.push_back(dice_counts(pred, pv.labels.labels(), static_cast<std::uint8_t>(c)).score());
  }
  s.pooled_foreground = pooled_foreground_counts(pred, pv.labels.labels()).score();
  return s;
}

ValidationResult score_all(const PredictorParams& params, std::span<const PreparedVolume> prepared,
                           const LossConfig& loss) {
  ValidationResult r;
  double sum = 0.0;
  for (const auto& pv : prepared) {
    r.volumes.push_back(score_volume(params, pv, loss));
    sum += r.volumes.back().loss;
  }
  r.loss = sum / static_cast<double>(prepared.size());
  return r;
}

ManifestRecord memory_record(const LabeledVolume& v) {
  return {v.id, v.id, v.id, v.volume.dims().nz, static_cast<double>(v.volume.spacing().sz)};
}

}  // namespace

FeatureMatrix featurize(const CtVolume& volume) {
  if (volume.unit_state() != UnitState::Normalized) throw UnitStateError("featurize expects a normalized volume");
  const auto& d = volume.dims();
  FeatureMatrix fm{d.voxels(), kNumFeatures, std::vector<double>(d.voxels() * kNumFeatures)};
  const auto xs = static_cast<std::ptrdiff_t>(d.nx);
  const auto ys = static_cast<std::ptrdiff_t>(d.ny);
  auto cx = [&](std::ptrdiff_t x) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x, 0, xs - 1)); };
  auto cy = [&](std::ptrdiff_t y) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y, 0, ys - 1)); };
  const double px_scale = d.nx > 1 ? 2.0 / (d.nx - 1) : 0.0;
  const double py_scale = d.ny > 1 ? 2.0 / (d.ny - 1) : 0.0;

  std::size_t row = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    const auto plane = volume.slice(z);
    auto at = [&](std::size_t x, std::size_t y) { return static_cast<double>(plane[y * d.nx + x]); };
    for (std::ptrdiff_t y = 0; y < ys; ++y) {
      for (std::ptrdiff_t x = 0; x < xs; ++x, ++row) {
        double local = 0.0;
        for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) local += at(cx(x + dx), cy(y + dy));
        }
        const double gx = 0.5 * (at(cx(x + 1), cy(y)) - at(cx(x - 1), cy(y)));
        const double gy = 0.5 * (at(cx(x), cy(y + 1)) - at(cx(x), cy(y - 1)));
        double* f = &fm.values[row * kNumFeatures];
        f[0] = at(cx(x), cy(y));
        f[1] = local / 9.0;
        f[2] = std::sqrt(gx * gx + gy * gy);
        f[3] = d.nx > 1 ? px_scale * x - 1.0 : 0.0;
        f[4] = d.ny > 1 ? py_scale * y - 1.0 : 0.0;
      }
    }
  }
  return fm;
}

PredictorParams PredictorParams::zeros(std::size_t num_classes, std::size_t num_features,
                                       std::uint16_t feature_version) {
  PredictorParams p;
  p.feature_version = feature_version;
  p.num_classes = num_classes;
  p.num_features = num_features;
  p.weights.assign(num_classes * num_features, 0.0);
  p.bias.assign(num_classes, 0.0);
  p.validate();
  return p;
}

PredictorParams PredictorParams::random(std::size_t num_classes, std::size_t num_features, std::uint64_t seed,
                                        double scale, std::uint16_t feature_version) {
  auto p = zeros(num_classes, num_features, feature_version);
  Rng rng(seed);
  for (auto& w : p.weights) w = rng.uniform(-scale, scale);
  for (auto& b : p.bias) b = rng.uniform(-scale, scale);
  return p;
}

void PredictorParams::validate() const {
  if (num_classes < 2 || num_classes > 255) throw ShapeError("predictor needs between 2 and 255 classes");
  if (num_features < 1) throw ShapeError("predictor needs at least one feature");
  if (weights.size() != num_classes * num_features || bias.size() != num_classes) {
    throw ShapeError("predictor parameter sizes do not match its class and feature counts");
  }
  const auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(weights.begin(), weights.end(), finite) || !std::all_of(bias.begin(), bias.end(), finite)) {
    throw RangeError("non-finite predictor parameter");
  }
}

std::vector<double> PredictorParams::flatten() const {
  std::vector<double> flat(weights);
  flat.insert(flat.end(), bias.begin(), bias.end());
  return flat;
}

void PredictorParams::assign(std::span<const double> flat) {
  if (flat.size() != size()) throw ShapeError("flat parameter vector has the wrong length");
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(weights.size()), weights.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(weights.size()), flat.end(), bias.begin());
}

void write_params(const PredictorParams& params, std::ostream& out) {
  params.validate();
  out.write(kParamsMagic.data(), 4);
  put_u16(out, params.feature_version);
  put_u16(out, static_cast<std::uint16_t>(params.num_classes));
  put_u16(out, static_cast<std::uint16_t>(params.num_features));
  for (double w : params.weights) put_f64(out, w);
  for (double b : params.bias) put_f64(out, b);
  if (!out) throw IoError("writing predictor parameters failed", 0);
}

PredictorParams read_params(std::istream& in) {
  std::array<unsigned char, 4> magic{};
  get_bytes(in, magic.data(), 4, "header");
  if (!std::equal(magic.begin(), magic.end(), kParamsMagic.begin())) throw FormatError("not a PRM1 parameter file");
  PredictorParams p;
  p.feature_version = get_u16(in, "header");
  p.num_classes = get_u16(in, "header");
  p.num_features = get_u16(in, "header");
  if (p.num_classes < 2 || p.num_classes > 255 || p.num_features < 1) {
    throw FormatError("parameter header declares an unusable shape");
  }
  p.weights.resize(p.num_classes * p.num_features);
  p.bias.resize(p.num_classes);
  for (auto& w : p.weights) w = get_f64(in);
  for (auto& b : p.bias) b = get_f64(in);
  p.validate();
  return p;
}

void save_params(const PredictorParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing", 0);
  write_params(params, out);
}

PredictorParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string(), 0);
  auto p = read_params(in);
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after parameters");
  return p;
}

std::vector<double> linear_softmax(const PredictorParams& params, const FeatureMatrix& features) {
  if (features.cols != params.num_features) {
    throw ShapeError("feature width " + std::to_string(features.cols) + " does not match predictor width " +
                     std::to_string(params.num_features));
  }
  const std::size_t n = features.rows;
  const std::size_t classes = params.num_classes;
  std::vector<double> probs(classes * n);
  std::vector<double> z(classes);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = features.row(i);
    double zmax = -INFINITY;
    for (std::size_t c = 0; c < classes; ++c) {
      double acc = params.bias[c];
      const double* w = &params.weights[c * params.num_features];
      for (std::size_t f = 0; f < params.num_features; ++f) acc += w[f] * x[f];
      z[c] = acc;
      zmax = std::max(zmax, acc);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      z[c] = std::exp(z[c] - zmax);
      sum += z[c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[c * n + i] = z[c] / sum;
  }
  return probs;
}

std::vector<double> linear_softmax_backward(const PredictorParams& params, const FeatureMatrix& features,
                                            std::span<const double> probs, std::span<const double> dl_dp) {
  const std::size_t n = features.rows;
  const std::size_t classes = params.num_classes;
  const std::size_t nf = params.num_features;
  if (features.cols != nf || probs.size() != classes * n || dl_dp.size() != classes * n) {
    throw ShapeError("backward pass: sizes do not match the predictor");
  }
  std::vector<double> grad(params.size(), 0.0);
  double* gw = grad.data();
  double* gb = grad.data() + classes * nf;
  std::vector<double> dz(classes);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += probs[c * n + i] * dl_dp[c * n + i];
    const auto x = features.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      const double d = probs[c * n + i] * (dl_dp[c * n + i] - s);
      for (std::size_t f = 0; f < nf; ++f) gw[c * nf + f] += d * x[f];
      gb[c] += d;
    }
  }
  return grad;
}

ProbMap predict(const PredictorParams& params, const CtVolume& volume) {
  if (params.feature_version != kVoxelFeatureVersion || params.num_features != kNumFeatures) {
    throw ShapeError("parameters were not trained on voxel features");
  }
  const auto probs = linear_softmax(params, featurize(volume));
  return ProbMap::from_doubles(volume.dims(), volume.spacing(), static_cast<std::uint8_t>(params.num_classes), probs);
}

TrainConfig TrainConfig::for_mode(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.batch_size = default_batch_size(mode);
  return cfg;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be > 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (slices < 1) throw ConfigError("slice count must be >= 1");
  if (size < 1) throw ConfigError("target size must be >= 1");
  if (num_classes < 2) throw ConfigError("at least 2 classes are required");
  if (!(stats_fraction > 0.0 && stats_fraction <= 1.0)) throw ConfigError("stats fraction must lie in (0, 1]");
  if (!(init_scale >= 0.0)) throw ConfigError("init scale must be >= 0");
  loss.validate();
  adam.validate();
  augment.validate();
  window.validate();
}

VolumePair prepare_inference(const CtVolume& volume, const LabelVolume* labels, const IntensityStats& stats,
                             const WindowConfig& window_cfg, std::uint32_t size) {
  const auto normalized = normalize(window(volume, window_cfg), stats);
  return downsample(normalized, labels, std::min(size, normalized.dims().nx));
}

ValidationResult validate(const PredictorParams& params, std::span<const LabeledVolume> validation,
                          const IntensityStats& stats, const TrainConfig& cfg) {
  if (validation.empty()) throw EmptyInputError("validation set is empty");
  std::vector<PreparedVolume> prepared;
  prepared.reserve(validation.size());
  for (const auto& v : validation) prepared.push_back(prepare_validation(v, stats, cfg));
  return score_all(params, prepared, cfg.loss);
}

void write_train_log(const TrainResult& result, std::ostream& out) {
  out << "# validation: window, normalize, downsample; every slice; no augmentation\n"
      << "# initial_val_loss\t" << format_double(result.initial_val_loss) << '\n'
      << "# best_epoch\t" << result.best_epoch << '\n'
      << "# best_val_loss\t" << format_double(result.best_val_loss) << '\n'
      << "epoch\ttrain_loss\tval_loss\twall_seconds\n";
  for (const auto& e : result.log) {
    out << e.epoch << '\t' << format_double(e.train_loss) << '\t' << format_double(e.val_loss) << '\t'
        << format_double(e.wall_seconds) << '\n';
  }
}

TrainResult train(std::span<const LabeledVolume> training, std::span<const LabeledVolume> validation,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (training.empty()) throw EmptyInputError("training set is empty");
  if (validation.empty()) throw EmptyInputError("validation set is empty");
  const auto t0 = std::chrono::steady_clock::now();

  // Intensity statistics from a random sample of the training volumes.
  std::vector<ManifestRecord> records;
  MemoryVolumeStore store;
  for (const auto& v : training) {
    records.push_back(memory_record(v));
    store.add(v.id, VolumePair{v.volume, v.labels});
  }
  const Manifest train_manifest(std::move(records));

  TrainResult result;
  result.stats =
      sample_stats(train_manifest, store, cfg.window, cfg.stats_fraction, derive_seed(cfg.seed, {kStats}));

  // Windowing and normalization are deterministic; do them once.
  std::vector<std::string> ids;
  std::map<std::string, VolumePair> normalized;
  for (const auto& v : training) {
    ids.push_back(v.id);
    normalized.emplace(v.id, VolumePair{normalize(window(v.volume, cfg.window), result.stats), v.labels});
  }
  std::vector<PreparedVolume> prepared;
  for (const auto& v : validation) prepared.push_back(prepare_validation(v, result.stats, cfg));

  PredictorParams params =
      PredictorParams::random(cfg.num_classes, kNumFeatures, derive_seed(cfg.seed, {kInit}), cfg.init_scale);
  AdamState adam(params.size(), cfg.adam);
  std::vector<double> flat = params.flatten();

  result.initial_val_loss = score_all(params, prepared, cfg.loss).loss;
  if (!std::isfinite(result.initial_val_loss)) throw DivergenceError("non-finite validation loss", 0, 0);
  result.params = params;
  result.best_val_loss = result.initial_val_loss;
  double reference = result.initial_val_loss;
  std::size_t stale = 0;

  const std::size_t batches =
      cfg.batches_per_epoch > 0 ? cfg.batches_per_epoch : (ids.size() + cfg.batch_size - 1) / cfg.batch_size;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto batch_ids = sample_batch(ids, cfg.batch_size, derive_seed(cfg.seed, {kBatch}), epoch, b);
      std::vector<VolumePair> items;
      items.reserve(batch_ids.size());
      for (const auto& id : batch_ids) items.push_back(normalized.at(id));
      if (cfg.augmentation) {
        items = apply_policy(std::move(items), cfg.augment, cfg.mode, derive_seed(cfg.seed, {kAugment, epoch, b}),
                             (epoch - 1) * batches + b)
                    .items;
      }

      FeatureMatrix features{0, kNumFeatures, {}};
      std::vector<std::uint8_t> truth;
      for (std::size_t j = 0; j < items.size(); ++j) {
        const auto& it = items[j];
        const auto small = downsample(it.volume, &*it.labels, std::min(cfg.size, it.volume.dims().nx));
        const std::uint64_t slice_seed = derive_seed(cfg.seed, {kSlices, epoch, b, j});
        std::optional<SliceSelection> sel;
        try {
          sel.emplace(select_slices(small.volume, &*small.labels, cfg.slices, true, slice_seed));
        } catch (const NoForegroundError&) {
          // Augmentation can drop every labelled slice of a thin structure.
          sel.emplace(select_slices(small.volume, &*small.labels, cfg.slices, false, slice_seed));
        }
        const auto fm = featurize(sel->volume);
        features.values.insert(features.values.end(), fm.values.begin(), fm.values.end());
        features.rows += fm.rows;
        const auto labs = sel->labels->labels();
        truth.insert(truth.end(), labs.begin(), labs.end());
      }

      const auto probs = linear_softmax(params, features);
      const auto loss = combined_loss(probs, truth, params.num_classes, cfg.loss, true);
      if (!std::isfinite(loss.value)) throw DivergenceError("non-finite training loss", epoch, b);
      const auto grad = linear_softmax_backward(params, features, probs, loss.grad);
      if (!std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
        throw DivergenceError("non-finite gradient", epoch, b);
      }
      adam_step(flat, grad, adam);
      params.assign(flat);
      epoch_loss += loss.value;
    }

    const double val = score_all(params, prepared, cfg.loss).loss;
    if (!std::isfinite(val)) throw DivergenceError("non-finite validation loss", epoch, batches);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back({epoch, epoch_loss / static_cast<double>(batches), val, wall});

    if (val < result.best_val_loss) {
      result.best_val_loss = val;
      result.best_epoch = epoch;
      result.params = params;
    }
    if (val < reference - cfg.tolerance) {
      reference = val;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return result;
}

std::vector<LabeledVolume> load_labeled(const Manifest& manifest, const VolumeStore& store,
                                        std::span<const std::string> ids) {
  std::vector<LabeledVolume> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto& rec = manifest.find(id);
    auto pair = store.load(rec);
    if (!pair.labels) throw ManifestError("record '" + id + "' has no label file");
    out.push_back({id, std::move(pair.volume), std::move(*pair.labels)});
  }
  return out;
}

TrainResult train(const Manifest& manifest, const VolumeStore& store, const FoldPlan& plan, std::size_t held_out,
                  const TrainConfig& cfg) {
  if (held_out >= plan.k) throw FoldError("held-out fold " + std::to_string(held_out) + " does not exist");
  const auto train_ids = plan.training_ids(held_out);
  if (train_ids.empty()) throw EmptyInputError("no training volumes outside the held-out fold");
  const auto training = load_labeled(manifest, store, train_ids);
  const auto validation = load_labeled(manifest, store, plan.folds[held_out]);
  return train(training, validation, cfg);
}

}  // namespace ctseg
