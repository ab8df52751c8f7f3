#include "ctseg/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctseg/augment.hpp"
#include "ctseg/dataset.hpp"
#include "ctseg/ensemble.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/objective.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/reference_model.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/selftest.hpp"
#include "ctseg/synth.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string env_name(const std::string& flag) {
  std::string out = "CTSEG_";
  for (char c : flag) {
    if (c == '-') {
      if (out.size() > 6) out += '_';
    } else {
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
  }
  return out;
}

template <class T>
CLI::Option* add(CLI::App* app, const std::string& flag, T& var, const std::string& help) {
  return app->add_option(flag, var, help)->capture_default_str()->envname(env_name(flag));
}

CLI::Option* add_flag(CLI::App* app, const std::string& flag, bool& var, const std::string& help) {
  return app->add_flag(flag, var, help)->envname(env_name(flag));
}

struct WindowOpts {
  std::string preset = "organ";
  double q_low = 0.6;
  double q_high = 0.99;
  CLI::Option* lo = nullptr;
  CLI::Option* hi = nullptr;

  void attach(CLI::App* app) {
    add(app, "--preset", preset, "window preset: organ, bone, lung");
    lo = add(app, "--q-low", q_low, "lower window quantile (overrides the preset)");
    hi = add(app, "--q-high", q_high, "upper window quantile (overrides the preset)");
  }

  WindowConfig resolve() const {
    auto cfg = WindowConfig::from_preset(parse_window_preset(preset));
    if (lo->count() > 0 || hi->count() > 0) {
      if (lo->count() > 0) cfg.q_low = q_low;
      if (hi->count() > 0) cfg.q_high = q_high;
      cfg.preset = WindowPreset::Custom;
    }
    cfg.validate();
    return cfg;
  }
};

void attach_augment(CLI::App* app, AugmentConfig& a) {
  add(app, "--noise-sigma", a.noise_sigma, "noise standard deviation (normalized units)");
  add(app, "--skip-rate", a.skip_rate, "fraction of slices removed");
  add(app, "--interp-rate", a.interp_insert_rate, "fraction of slice gaps filled by interpolation");
  add(app, "--shift-max", a.shift_max, "maximum range shift (normalized units)");
  add(app, "--rot-max", a.rot_max_deg, "maximum in-plane rotation in degrees");
  add(app, "--policy-3d", a.policy_3d, "chain probability in 3D mode");
  add(app, "--policy-2d", a.policy_2d, "chain probability in 2D mode");
  add(app, "--shift-prob", a.shift_prob, "per-volume range shift probability");
}

void attach_loss(CLI::App* app, LossConfig& l) {
  add(app, "--alpha", l.alpha, "Tanimoto weight");
  add(app, "--beta", l.beta, "cross-entropy weight");
  add(app, "--smooth", l.smooth, "Tanimoto smooth factor");
}

/// Everything a RunManifest records besides the resolved options.
struct Run {
  std::string command;
  json seeds = json::object();
  json inputs = json::array();
  json outputs = json::array();
  std::optional<fs::path> manifest_path;

  void input(const fs::path& p) { inputs.push_back(p.generic_string()); }
  void output(const fs::path& p) {
    outputs.push_back(p.generic_string());
    if (!manifest_path) manifest_path = fs::path(p.string() + ".run.json");
  }
};

json resolved_options(const CLI::App* app) {
  json cfg = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt == app->get_help_ptr() || opt->get_lnames().empty()) continue;
    const std::string key = opt->get_lnames().front();
    if (opt->get_type_size() == 0) {
      cfg[key] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto& r = opt->results();
      if (r.size() == 1) {
        cfg[key] = r.front();
      } else {
        cfg[key] = r;
      }
    } else {
      cfg[key] = opt->get_default_str();
    }
  }
  return cfg;
}

void write_run_manifest(const Run& run, const CLI::App* sub, int threads,
                        std::chrono::steady_clock::time_point start, const std::string& override_path) {
  fs::path path = override_path.empty() ? run.manifest_path.value_or(fs::path(run.command + ".run.json"))
                                        : fs::path(override_path);
  json j;
  j["command"] = run.command;
  j["tool_version"] = kToolVersion;
  j["config"] = resolved_options(sub);
  j["seeds"] = run.seeds;
  j["inputs"] = run.inputs;
  j["outputs"] = run.outputs;
  j["threads"] = threads;
  j["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write run manifest " + path.string(), 0);
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing", 0);
  out << text;
  if (!out) throw IoError("writing " + path.string() + " failed", 0);
}

std::string class_name(std::size_t c) {
  if (c == 1) return "organ";
  if (c == 2) return "tumor";
  return "class" + std::to_string(c);
}

// ---- synth ---------------------------------------------------------------

struct SynthOpts {
  std::string out;
  DatasetConfig cfg;
  std::uint64_t seed = 0;
};

int cmd_synth(SynthOpts& o, Run& run) {
  const auto manifest = generate_dataset(o.cfg, o.seed, o.out);
  run.seeds["seed"] = o.seed;
  run.manifest_path = fs::path(o.out) / "synth.run.json";
  run.output(fs::path(o.out) / "manifest.tsv");
  std::cout << "wrote " << manifest.size() << " phantoms to " << o.out << '\n';
  return kExitOk;
}

// ---- stats ---------------------------------------------------------------

struct StatsOpts {
  std::string manifest;
  std::string out;
  double fraction = 0.2;
  std::uint64_t seed = 0;
  WindowOpts window;
};

int cmd_stats(StatsOpts& o, Run& run) {
  const auto manifest = load_manifest(o.manifest);
  const auto stats =
      sample_stats(manifest, FileVolumeStore(manifest.base_dir()), o.window.resolve(), o.fraction, o.seed);
  save_stats(stats, o.out);
  run.seeds["seed"] = o.seed;
  run.input(o.manifest);
  run.output(o.out);
  std::cout << "mean " << format_double(stats.mean) << " std " << format_double(stats.std) << " over "
            << stats.n_volumes_sampled << " volumes\n";
  return kExitOk;
}

// ---- preprocess ----------------------------------------------------------

struct PreprocessOpts {
  std::string input;
  std::string labels;
  std::string manifest;
  std::string stats;
  std::string out;
  std::string out_labels;
  std::uint32_t size = 128;
  std::size_t slices = 16;
  bool training = false;
  std::uint64_t seed = 0;
  WindowOpts window;
};

VolumePair preprocess_one(const CtVolume& volume, const LabelVolume* labels, const IntensityStats& stats,
                          const PreprocessOpts& o, std::uint64_t seed) {
  auto pair = prepare_inference(volume, labels, stats, o.window.resolve(), o.size);
  if (o.slices == 0) return pair;
  auto sel = select_slices(pair.volume, pair.labels ? &*pair.labels : nullptr, o.slices, o.training, seed);
  return {std::move(sel.volume), std::move(sel.labels)};
}

int cmd_preprocess(PreprocessOpts& o, Run& run) {
  const auto stats = load_stats(o.stats);
  run.input(o.stats);
  run.seeds["seed"] = o.seed;
  if (!o.manifest.empty()) {
    const auto manifest = load_manifest(o.manifest);
    run.input(o.manifest);
    const FileVolumeStore store(manifest.base_dir());
    const fs::path dir(o.out);
    fs::create_directories(dir);
    std::vector<ManifestRecord> records;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const auto& rec = manifest.records()[i];
      const auto src = store.load(rec);
      const auto pair = preprocess_one(src.volume, src.labels ? &*src.labels : nullptr, stats, o,
                                       derive_seed(o.seed, {i}));
      ManifestRecord out{rec.id, rec.id + ".ctv", std::nullopt, pair.volume.dims().nz,
                         static_cast<double>(pair.volume.spacing().sz)};
      save_volume(pair.volume, dir / out.volume_path);
      if (pair.labels) {
        out.label_path = rec.id + ".lbl";
        save_labels(*pair.labels, dir / *out.label_path);
      }
      records.push_back(std::move(out));
    }
    save_manifest(Manifest(std::move(records), dir), dir / "manifest.tsv");
    run.manifest_path = dir / "preprocess.run.json";
    run.output(dir / "manifest.tsv");
    return kExitOk;
  }
  if (o.input.empty()) throw ConfigError("preprocess needs --input or --manifest");
  const auto volume = load_volume(o.input);
  run.input(o.input);
  std::optional<LabelVolume> labels;
  if (!o.labels.empty()) {
    labels = load_labels(o.labels);
    run.input(o.labels);
  }
  if (o.training && !labels) throw ConfigError("--training needs --labels");
  const auto pair = preprocess_one(volume, labels ? &*labels : nullptr, stats, o, o.seed);
  save_volume(pair.volume, o.out);
  run.output(o.out);
  if (pair.labels) {
    const std::string lab_out = o.out_labels.empty() ? fs::path(o.out).replace_extension(".lbl").string() : o.out_labels;
    save_labels(*pair.labels, lab_out);
    run.output(lab_out);
  }
  return kExitOk;
}

// ---- augment -------------------------------------------------------------

struct AugmentOpts {
  std::string input;
  std::string labels;
  std::string out;
  std::string out_labels;
  std::string trace;
  std::string mode = "3d";
  std::uint64_t seed = 0;
  std::uint64_t batch_id = 0;
  AugmentConfig cfg;
};

int cmd_augment(AugmentOpts& o, Run& run) {
  std::vector<VolumePair> batch{VolumePair{load_volume(o.input), std::nullopt}};
  run.input(o.input);
  if (!o.labels.empty()) {
    batch.front().labels = load_labels(o.labels);
    run.input(o.labels);
  }
  auto result = apply_policy(std::move(batch), o.cfg, parse_train_mode(o.mode), o.seed, o.batch_id);
  run.seeds["seed"] = o.seed;
  const auto& item = result.items.front();
  save_volume(item.volume, o.out);
  run.output(o.out);
  if (item.labels) {
    const std::string lab_out = o.out_labels.empty() ? fs::path(o.out).replace_extension(".lbl").string() : o.out_labels;
    save_labels(*item.labels, lab_out);
    run.output(lab_out);
  }
  const std::string line = format_trace(result.trace);
  if (o.trace.empty()) {
    std::cout << line << '\n';
  } else {
    std::ofstream t(o.trace, std::ios::app);
    if (!t) throw IoError("cannot open trace " + o.trace, 0);
    t << line << '\n';
    run.output(o.trace);
  }
  return kExitOk;
}

// ---- folds ---------------------------------------------------------------

struct FoldsOpts {
  std::string manifest;
  std::string out;
  std::size_t k = 5;
};

int cmd_folds(FoldsOpts& o, Run& run) {
  const auto plan = assign_folds(load_manifest(o.manifest), o.k);
  std::ostringstream text;
  write_fold_plan(plan, text);
  write_text(o.out, text.str());
  run.input(o.manifest);
  run.output(o.out);
  return kExitOk;
}

// ---- train ---------------------------------------------------------------

struct TrainOpts {
  std::string manifest;
  std::string folds;
  std::size_t k = 5;
  std::size_t held_out = 0;
  std::string mode = "3d";
  std::size_t batch_2d = 28;
  std::size_t batch_3d = 1;
  std::string out;
  std::string log;
  std::string stats_out;
  bool no_augment = false;
  WindowOpts window;
  TrainConfig cfg;
};

int cmd_train(TrainOpts& o, Run& run) {
  const auto manifest = load_manifest(o.manifest);
  run.input(o.manifest);
  FoldPlan plan;
  if (o.folds.empty()) {
    plan = assign_folds(manifest, o.k);
  } else {
    std::ifstream in(o.folds);
    if (!in) throw IoError("cannot open " + o.folds, 0);
    plan = read_fold_plan(in);
    run.input(o.folds);
  }
  auto cfg = o.cfg;
  cfg.mode = parse_train_mode(o.mode);
  cfg.batch_size = cfg.mode == TrainMode::TwoD ? o.batch_2d : o.batch_3d;
  cfg.augmentation = !o.no_augment;
  cfg.window = o.window.resolve();

  const auto result = train(manifest, FileVolumeStore(manifest.base_dir()), plan, o.held_out, cfg);
  save_params(result.params, o.out);
  const std::string log_path = o.log.empty() ? o.out + ".log.tsv" : o.log;
  const std::string stats_path = o.stats_out.empty() ? o.out + ".stats" : o.stats_out;
  std::ostringstream log;
  write_train_log(result, log);
  write_text(log_path, log.str());
  save_stats(result.stats, stats_path);
  run.seeds["seed"] = cfg.seed;
  run.output(o.out);
  run.output(log_path);
  run.output(stats_path);
  std::cout << "validation loss " << format_double(result.initial_val_loss) << " -> "
            << format_double(result.best_val_loss) << " (epoch " << result.best_epoch << " of "
            << result.log.size() << ")\n";
  return kExitOk;
}

// ---- predict -------------------------------------------------------------

struct PredictOpts {
  std::string params;
  std::string input;
  std::string stats;
  std::string out_probs;
  std::string out_labels;
  std::uint32_t size = 128;
  WindowOpts window;
};

CtVolume model_input(const std::string& input, const std::string& stats_path, const WindowOpts& w,
                     std::uint32_t size, Run& run) {
  auto volume = load_volume(input);
  run.input(input);
  if (volume.unit_state() == UnitState::Normalized) return volume;
  if (volume.unit_state() != UnitState::Hounsfield) throw UnitStateError("predict expects a HU or normalized volume");
  if (stats_path.empty()) throw ConfigError("a Hounsfield input needs --stats");
  run.input(stats_path);
  return prepare_inference(volume, nullptr, load_stats(stats_path), w.resolve(), size).volume;
}

void save_prediction(const ProbMap& probs, const LabelVolume& labels, const std::string& out_probs,
                     const std::string& out_labels, Run& run) {
  if (out_probs.empty() && out_labels.empty()) throw ConfigError("give --out-probs and/or --out-labels");
  if (!out_probs.empty()) {
    save_probmap(probs, out_probs);
    run.output(out_probs);
  }
  if (!out_labels.empty()) {
    save_labels(labels, out_labels);
    run.output(out_labels);
  }
}

int cmd_predict(PredictOpts& o, Run& run) {
  const auto params = load_params(o.params);
  run.input(o.params);
  const auto volume = model_input(o.input, o.stats, o.window, o.size, run);
  const auto probs = predict(params, volume);
  save_prediction(probs, argmax_labels(probs), o.out_probs, o.out_labels, run);
  return kExitOk;
}

// ---- evaluate ------------------------------------------------------------

struct EvaluateOpts {
  std::vector<std::string> pred;
  std::vector<std::string> truth;
  std::vector<std::string> ids;
  std::string total = "pooled-foreground";
  bool exclude_empty = false;
  std::string report;
};

int cmd_evaluate(EvaluateOpts& o, Run& run) {
  if (o.pred.size() != o.truth.size()) throw ConfigError("--pred and --truth must be given the same number of times");
  if (!o.ids.empty() && o.ids.size() != o.pred.size()) throw ConfigError("one --id per prediction is required");
  const TotalDice kind = parse_total_dice(o.total);

  std::ostringstream text;
  std::map<std::string, std::vector<double>> per_class;
  std::vector<std::string> order;
  auto record = [&](const std::string& id, const std::string& cls, double v) {
    text << id << '\t' << cls << '\t' << format_double(v) << '\n';
    if (!per_class.count(cls)) order.push_back(cls);
    per_class[cls].push_back(v);
  };
  for (std::size_t i = 0; i < o.pred.size(); ++i) {
    const auto pred = load_labels(o.pred[i]);
    const auto truth = load_labels(o.truth[i]);
    run.input(o.pred[i]);
    run.input(o.truth[i]);
    require_same_dims(pred.dims(), truth.dims(), "evaluate");
    const std::string id = o.ids.empty() ? fs::path(o.pred[i]).stem().string() : o.ids[i];
    const std::uint8_t classes = std::max(pred.num_classes(), truth.num_classes());
    for (std::uint8_t c = 1; c < classes; ++c) {
      const auto counts = dice_counts(pred.labels(), truth.labels(), c);
      if (o.exclude_empty && counts.both_empty()) continue;
      record(id, class_name(c), counts.score());
    }
    record(id, "total", total_dice(pred, truth, kind));
  }
  text << "# summary\ttotal=" << to_string(kind) << '\n';
  for (const auto& cls : order) {
    const auto a = aggregate(per_class[cls]);
    text << cls << '\t' << format_double(a.mean) << '\t' << format_double(a.std) << '\n';
  }
  if (o.report.empty()) {
    std::cout << text.str();
  } else {
    write_text(o.report, text.str());
    run.output(o.report);
  }
  return kExitOk;
}

// ---- stack ---------------------------------------------------------------

struct StackSelectOpts {
  std::string candidates;
  std::size_t top_n = 5;
  std::string out;
};

int cmd_stack_select(StackSelectOpts& o, Run& run) {
  std::ifstream in(o.candidates);
  if (!in) throw IoError("cannot open " + o.candidates, 0);
  std::vector<Candidate> cands;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected id<TAB>score", line_no);
    try {
      std::size_t used = 0;
      const std::string num = line.substr(tab + 1);
      const double score = std::stod(num, &used);
      if (used != num.size()) throw std::invalid_argument("trailing");
      cands.push_back({line.substr(0, tab), score});
    } catch (const std::logic_error&) {
      throw ParseError("bad score", line_no);
    }
  }
  run.input(o.candidates);
  std::ostringstream text;
  for (const auto& c : select_top_n(cands, o.top_n)) text << c.id << '\t' << format_double(c.score) << '\n';
  if (o.out.empty()) {
    std::cout << text.str();
  } else {
    write_text(o.out, text.str());
    run.output(o.out);
  }
  return kExitOk;
}

struct StackFitOpts {
  std::string samples;
  std::string out;
  StackerConfig cfg;
};

int cmd_stack_fit(StackFitOpts& o, Run& run) {
  std::ifstream in(o.samples);
  if (!in) throw IoError("cannot open " + o.samples, 0);
  const fs::path base = fs::path(o.samples).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<StackerSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    if (fields.size() < 2) throw ParseError("expected truth<TAB>member[<TAB>member...]", line_no);
    StackerSample s{{}, load_labels(resolve(fields[0]))};
    for (std::size_t k = 1; k < fields.size(); ++k) s.members.push_back(load_probmap(resolve(fields[k])));
    samples.push_back(std::move(s));
  }
  run.input(o.samples);
  const auto params = train_stacker(samples, o.cfg);
  save_params(params, o.out);
  run.seeds["seed"] = o.cfg.seed;
  run.output(o.out);
  return kExitOk;
}

struct StackPredictOpts {
  std::string ensemble;
  std::vector<std::string> members;
  std::string combiner = "mean";
  std::string stacker;
  std::vector<double> weights;
  std::string input;
  std::string stats;
  std::uint32_t size = 128;
  std::string out_probs;
  std::string out_labels;
  WindowOpts window;
};

int cmd_stack_predict(StackPredictOpts& o, Run& run) {
  if (!o.ensemble.empty()) {
    if (o.input.empty()) throw ConfigError("--ensemble needs --input");
    const auto spec = load_ensemble_spec(o.ensemble);
    run.input(o.ensemble);
    const auto volume = model_input(o.input, o.stats, o.window, o.size, run);
    const auto pred = stacked_predict(spec, volume);
    save_prediction(pred.probs, pred.labels, o.out_probs, o.out_labels, run);
    return kExitOk;
  }
  if (o.members.empty()) throw ConfigError("give --ensemble or at least one --member");
  std::vector<ProbMap> maps;
  for (const auto& m : o.members) {
    maps.push_back(load_probmap(m));
    run.input(m);
  }
  const auto kind = parse_combiner(o.combiner);
  std::optional<PredictorParams> stacker;
  if (kind == CombinerKind::Stacker) {
    if (o.stacker.empty()) throw ConfigError("--combiner stacker needs --stacker");
    stacker = load_params(o.stacker);
    run.input(o.stacker);
  }
  const auto pred = combine_members(maps, kind, o.weights, stacker ? &*stacker : nullptr);
  save_prediction(pred.probs, pred.labels, o.out_probs, o.out_labels, run);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Volumetric CT segmentation pipeline toolkit"};
  app.name("ctseg");
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1, 1);

  int threads = 1;
  std::string run_manifest;
  add(&app, "--threads", threads, "worker cap (the pipeline runs single-threaded)")->check(CLI::PositiveNumber);
  add(&app, "--run-manifest", run_manifest, "where to write the run manifest");

  SynthOpts synth;
  auto* s_synth = app.add_subcommand("synth", "generate a phantom dataset");
  add(s_synth, "--out", synth.out, "output directory")->required();
  add(s_synth, "--count", synth.cfg.count, "number of phantoms");
  add(s_synth, "--size-min", synth.cfg.size_min, "smallest in-plane size");
  add(s_synth, "--size-max", synth.cfg.size_max, "largest in-plane size");
  add(s_synth, "--slices-min", synth.cfg.slices_min, "fewest slices");
  add(s_synth, "--slices-max", synth.cfg.slices_max, "most slices");
  add(s_synth, "--thickness-min", synth.cfg.thickness_min, "thinnest slice (mm)");
  add(s_synth, "--thickness-max", synth.cfg.thickness_max, "thickest slice (mm)");
  add(s_synth, "--noise", synth.cfg.phantom.noise_std, "noise standard deviation (HU)");
  add(s_synth, "--prefix", synth.cfg.id_prefix, "id prefix");
  add(s_synth, "--seed", synth.seed, "random seed");

  StatsOpts stats;
  auto* s_stats = app.add_subcommand("stats", "sample intensity statistics of a dataset");
  add(s_stats, "--manifest", stats.manifest, "dataset manifest")->required();
  add(s_stats, "--out", stats.out, "statistics file")->required();
  add(s_stats, "--fraction", stats.fraction, "fraction of volumes sampled");
  add(s_stats, "--seed", stats.seed, "random seed");
  stats.window.attach(s_stats);

  PreprocessOpts pre;
  auto* s_pre = app.add_subcommand("preprocess", "window, normalize, downsample and reduce slices");
  auto* pre_in = add(s_pre, "--input", pre.input, "HU volume");
  add(s_pre, "--labels", pre.labels, "label volume");
  add(s_pre, "--manifest", pre.manifest, "process every record of a manifest")->excludes(pre_in);
  add(s_pre, "--stats", pre.stats, "statistics file")->required();
  add(s_pre, "--out", pre.out, "output volume (or directory with --manifest)")->required();
  add(s_pre, "--out-labels", pre.out_labels, "output labels");
  add(s_pre, "--size", pre.size, "in-plane target size");
  add(s_pre, "--slices", pre.slices, "slices kept (0 keeps all)");
  add_flag(s_pre, "--training", pre.training, "draw slices from labelled slices only");
  add(s_pre, "--seed", pre.seed, "random seed");
  pre.window.attach(s_pre);

  AugmentOpts aug;
  auto* s_aug = app.add_subcommand("augment", "apply the augmentation policy to one volume");
  add(s_aug, "--input", aug.input, "normalized volume")->required();
  add(s_aug, "--labels", aug.labels, "label volume");
  add(s_aug, "--out", aug.out, "output volume")->required();
  add(s_aug, "--out-labels", aug.out_labels, "output labels");
  add(s_aug, "--trace", aug.trace, "append the trace line to this file");
  add(s_aug, "--mode", aug.mode, "2d or 3d");
  add(s_aug, "--seed", aug.seed, "random seed");
  add(s_aug, "--batch-id", aug.batch_id, "batch id recorded in the trace");
  attach_augment(s_aug, aug.cfg);

  FoldsOpts folds;
  auto* s_folds = app.add_subcommand("folds", "assign cross-validation folds");
  add(s_folds, "--manifest", folds.manifest, "dataset manifest")->required();
  add(s_folds, "--out", folds.out, "fold plan file")->required();
  add(s_folds, "--k", folds.k, "number of folds");

  TrainOpts tr;
  auto* s_train = app.add_subcommand("train", "train the reference segmenter");
  add(s_train, "--manifest", tr.manifest, "dataset manifest")->required();
  add(s_train, "--folds", tr.folds, "fold plan (default: assigned with --k)");
  add(s_train, "--k", tr.k, "number of folds");
  add(s_train, "--held-out", tr.held_out, "validation fold");
  add(s_train, "--mode", tr.mode, "2d or 3d");
  add(s_train, "--batch-2d", tr.batch_2d, "batch size in 2D mode");
  add(s_train, "--batch-3d", tr.batch_3d, "batch size in 3D mode");
  add(s_train, "--epochs", tr.cfg.max_epochs, "maximum epochs");
  add(s_train, "--batches-per-epoch", tr.cfg.batches_per_epoch, "0 = training volumes / batch size");
  add(s_train, "--patience", tr.cfg.patience, "epochs without improvement before stopping");
  add(s_train, "--tolerance", tr.cfg.tolerance, "minimum validation improvement");
  add(s_train, "--seed", tr.cfg.seed, "random seed");
  add(s_train, "--lr", tr.cfg.adam.lr, "ADAM learning rate");
  add(s_train, "--slices", tr.cfg.slices, "slices per training volume");
  add(s_train, "--size", tr.cfg.size, "in-plane target size");
  add(s_train, "--stats-fraction", tr.cfg.stats_fraction, "fraction of training volumes sampled for statistics");
  add_flag(s_train, "--no-augment", tr.no_augment, "disable augmentation");
  add(s_train, "--out", tr.out, "parameter file")->required();
  add(s_train, "--log", tr.log, "training log (default <out>.log.tsv)");
  add(s_train, "--stats-out", tr.stats_out, "statistics file (default <out>.stats)");
  attach_loss(s_train, tr.cfg.loss);
  attach_augment(s_train, tr.cfg.augment);
  tr.window.attach(s_train);

  PredictOpts pr;
  auto* s_pred = app.add_subcommand("predict", "run a trained segmenter on one volume");
  add(s_pred, "--params", pr.params, "parameter file")->required();
  add(s_pred, "--input", pr.input, "HU or normalized volume")->required();
  add(s_pred, "--stats", pr.stats, "statistics file (HU input)");
  add(s_pred, "--size", pr.size, "in-plane target size");
  add(s_pred, "--out-probs", pr.out_probs, "probability map output");
  add(s_pred, "--out-labels", pr.out_labels, "label output");
  pr.window.attach(s_pred);

  EvaluateOpts ev;
  auto* s_eval = app.add_subcommand("evaluate", "Dice report for predicted label volumes");
  add(s_eval, "--pred", ev.pred, "predicted labels (repeatable)")->required();
  add(s_eval, "--truth", ev.truth, "true labels (repeatable, same order)")->required();
  add(s_eval, "--id", ev.ids, "volume id per prediction (default: file stem)");
  add(s_eval, "--total", ev.total, "total column: pooled-foreground or foreground-mean");
  add_flag(s_eval, "--exclude-empty", ev.exclude_empty, "drop classes absent from both masks");
  add(s_eval, "--report", ev.report, "report path (default: stdout)");

  auto* s_stack = app.add_subcommand("stack", "ensemble selection, stacker fitting and fusion");
  s_stack->require_subcommand(1, 1);
  StackSelectOpts ss;
  auto* s_sel = s_stack->add_subcommand("select", "keep the top-n candidates by validation score");
  add(s_sel, "--candidates", ss.candidates, "id<TAB>score lines")->required();
  add(s_sel, "--top-n", ss.top_n, "members kept");
  add(s_sel, "--out", ss.out, "selection output (default: stdout)");
  StackFitOpts sf;
  auto* s_fit = s_stack->add_subcommand("fit", "train a stacker on member probability maps");
  add(s_fit, "--samples", sf.samples, "truth<TAB>member... lines")->required();
  add(s_fit, "--out", sf.out, "stacker parameter file")->required();
  add(s_fit, "--epochs", sf.cfg.epochs, "training epochs");
  add(s_fit, "--lr", sf.cfg.adam.lr, "ADAM learning rate");
  add(s_fit, "--seed", sf.cfg.seed, "random seed");
  attach_loss(s_fit, sf.cfg.loss);
  StackPredictOpts sp;
  auto* s_sp = s_stack->add_subcommand("predict", "fuse members into one segmentation");
  auto* sp_ens = add(s_sp, "--ensemble", sp.ensemble, "ensemble spec file");
  add(s_sp, "--member", sp.members, "member probability map (repeatable)")->excludes(sp_ens);
  add(s_sp, "--combiner", sp.combiner, "mean, weighted or stacker");
  add(s_sp, "--stacker", sp.stacker, "stacker parameter file");
  add(s_sp, "--weight", sp.weights, "member weight (repeatable)");
  add(s_sp, "--input", sp.input, "volume for --ensemble");
  add(s_sp, "--stats", sp.stats, "statistics file (HU input)");
  add(s_sp, "--size", sp.size, "in-plane target size");
  add(s_sp, "--out-probs", sp.out_probs, "probability map output");
  add(s_sp, "--out-labels", sp.out_labels, "label output");
  sp.window.attach(s_sp);

  auto* s_self = app.add_subcommand("selftest", "run the built-in invariant checks");

  if (argc <= 1) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const auto start = std::chrono::steady_clock::now();
  Run run;
  const CLI::App* sub = nullptr;
  try {
    int code = kExitOk;
    if (s_synth->parsed()) {
      run.command = "synth";
      sub = s_synth;
      code = cmd_synth(synth, run);
    } else if (s_stats->parsed()) {
      run.command = "stats";
      sub = s_stats;
      code = cmd_stats(stats, run);
    } else if (s_pre->parsed()) {
      run.command = "preprocess";
      sub = s_pre;
      code = cmd_preprocess(pre, run);
    } else if (s_aug->parsed()) {
      run.command = "augment";
      sub = s_aug;
      code = cmd_augment(aug, run);
    } else if (s_folds->parsed()) {
      run.command = "folds";
      sub = s_folds;
      code = cmd_folds(folds, run);
    } else if (s_train->parsed()) {
      run.command = "train";
      sub = s_train;
      code = cmd_train(tr, run);
    } else if (s_pred->parsed()) {
      run.command = "predict";
      sub = s_pred;
      code = cmd_predict(pr, run);
    } else if (s_eval->parsed()) {
      run.command = "evaluate";
      sub = s_eval;
      code = cmd_evaluate(ev, run);
    } else if (s_sel->parsed()) {
      run.command = "stack-select";
      sub = s_sel;
      code = cmd_stack_select(ss, run);
    } else if (s_fit->parsed()) {
      run.command = "stack-fit";
      sub = s_fit;
      code = cmd_stack_fit(sf, run);
    } else if (s_sp->parsed()) {
      run.command = "stack-predict";
      sub = s_sp;
      code = cmd_stack_predict(sp, run);
    } else if (s_self->parsed()) {
      run.command = "selftest";
      sub = s_self;
      code = run_selftest(std::cout) == 0 ? kExitOk : kExitData;
    }
    write_run_manifest(run, sub, threads, start, run_manifest);
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace ctseg
