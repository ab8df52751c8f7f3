#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ctseg/errors.hpp"
#include "ctseg/reference_model.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/synth.hpp"
#include "helpers.hpp"

using namespace ctseg;

namespace {

CtVolume normalized(Dims d, std::vector<float> v) { return CtVolume(d, {}, UnitState::Normalized, std::move(v)); }

/// HU volume whose intensity alone decides the class: -100, 0, 100 HU.
LabeledVolume separable(const std::string& id, std::uint64_t seed, std::uint32_t n = 12, std::uint32_t nz = 4) {
  Rng rng(seed);
  const Dims d{n, n, nz};
  std::vector<float> v(d.voxels());
  std::vector<std::uint8_t> l(d.voxels());
  for (std::size_t i = 0; i < v.size(); ++i) {
    l[i] = static_cast<std::uint8_t>(rng.below(3));
    v[i] = 100.0f * (static_cast<float>(l[i]) - 1.0f);
  }
  return {id, CtVolume(d, {}, UnitState::Hounsfield, std::move(v)), LabelVolume(d, {}, 3, std::move(l))};
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.window = {0.0, 1.0, WindowPreset::Custom};
  cfg.size = 16;
  cfg.stats_fraction = 1.0;
  return cfg;
}

LabeledVolume phantom_volume(std::uint64_t seed) {
  auto ph = testing::small_phantom(seed, 24, 10);
  return {"p" + std::to_string(seed), std::move(ph.volume), std::move(ph.labels)};
}

}  // namespace

TEST_SUITE("reference_model") {
  TEST_CASE("features: constant, ramp, centre position") {
    const auto c = featurize(normalized({5, 5, 1}, std::vector<float>(25, 0.75f)));
    for (std::size_t i = 0; i < c.rows; ++i) {
      CHECK(c.row(i)[1] == doctest::Approx(0.75));
      CHECK(c.row(i)[2] == 0.0);
    }
    CHECK(c.row(12)[3] == 0.0);
    CHECK(c.row(12)[4] == 0.0);
    CHECK(c.row(0)[3] == -1.0);
    CHECK(c.row(24)[4] == 1.0);

    std::vector<float> ramp(7 * 5);
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 7; ++x) ramp[y * 7 + x] = static_cast<float>(-0.5 * x);
    const auto r = featurize(normalized({7, 5, 1}, ramp));
    for (std::size_t y = 1; y < 4; ++y)
      for (std::size_t x = 1; x < 6; ++x) CHECK(r.row(y * 7 + x)[2] == doctest::Approx(0.5));
    CHECK_THROWS_AS(featurize(CtVolume({1, 1, 1}, {}, UnitState::Hounsfield, {0.0f})), UnitStateError);
  }

  TEST_CASE("softmax: zero params are uniform, hand-set params match the scalar oracle") {
    const auto vol = normalized({3, 3, 2}, std::vector<float>(18, 0.3f));
    const auto p = predict(PredictorParams::zeros(3, kNumFeatures), vol);
    for (float x : p.probs()) CHECK(x == doctest::Approx(1.0 / 3.0));

    PredictorParams h = PredictorParams::zeros(3, 2);
    h.weights = {1.0, -2.0, 0.5, 0.5, -1.0, 3.0};
    h.bias = {0.1, -0.2, 0.3};
    const FeatureMatrix fm{1, 2, {0.4, -0.7}};
    const auto got = linear_softmax(h, fm);
    double z[3];
    double s = 0;
    for (int c = 0; c < 3; ++c) s += z[c] = std::exp(h.weights[2 * c] * 0.4 + h.weights[2 * c + 1] * -0.7 + h.bias[c]);
    for (int c = 0; c < 3; ++c) CHECK(got[c] == doctest::Approx(z[c] / s).epsilon(1e-14));
    const FeatureMatrix wrong{1, 3, {0, 0, 0}};
    CHECK_THROWS_AS(linear_softmax(h, wrong), ShapeError);
  }

  TEST_CASE("backward pass matches central differences") {
    Rng rng(6);
    auto params = PredictorParams::random(3, kNumFeatures, 1, 0.5);
    FeatureMatrix fm{8, kNumFeatures, std::vector<double>(8 * kNumFeatures)};
    for (auto& x : fm.values) x = rng.normal();
    std::vector<std::uint8_t> truth(8);
    for (auto& t : truth) t = static_cast<std::uint8_t>(rng.below(3));
    const LossConfig cfg;
    const auto probs = linear_softmax(params, fm);
    const auto grad = linear_softmax_backward(params, fm, probs, combined_loss(probs, truth, 3, cfg).grad);
    auto flat = params.flatten();
    for (std::size_t j = 0; j < flat.size(); ++j) {
      auto loss_at = [&](double delta) {
        auto f = flat;
        f[j] += delta;
        auto p = params;
        p.assign(f);
        return combined_loss(linear_softmax(p, fm), truth, 3, cfg, false).value;
      };
      const double fd = (loss_at(1e-6) - loss_at(-1e-6)) / 2e-6;
      CHECK(std::abs(fd - grad[j]) / std::max(1e-3, std::abs(fd) + std::abs(grad[j])) < 1e-4);
    }
  }

  TEST_CASE("parameter files") {
    const auto p = PredictorParams::random(3, kNumFeatures, 4);
    std::stringstream ss;
    write_params(p, ss);
    CHECK(ss.str().size() == 10 + 8 * 18);
    CHECK(ss.str().substr(0, 4) == "PRM1");
    CHECK(read_params(ss) == p);
    std::istringstream bad("XXXX0000000000");
    CHECK_THROWS_AS(read_params(bad), FormatError);
    std::stringstream cut;
    write_params(p, cut);
    std::istringstream shortened(cut.str().substr(0, 30));
    CHECK_THROWS_AS(read_params(shortened), TruncationError);

    testing::TempDir dir("params");
    save_params(p, dir.path() / "p.prm");
    CHECK(load_params(dir.path() / "p.prm") == p);
    {
      std::ofstream f(dir.path() / "p.prm", std::ios::binary | std::ios::app);
      f.put('\0');
    }
    CHECK_THROWS_AS(load_params(dir.path() / "p.prm"), FormatError);
  }

  TEST_CASE("validate: saturated exact predictor scores perfectly") {
    const auto v = separable("s", 1, 8, 2);
    PredictorParams p = PredictorParams::zeros(3, kNumFeatures);
    p.weights[0 * kNumFeatures] = -2e4;
    p.weights[2 * kNumFeatures] = 2e4;
    p.bias[1] = 1e4;
    IntensityStats st;
    st.mean = 0;
    st.std = 100;
    const auto r = validate(p, std::span(&v, 1), st, small_config());
    CHECK(r.loss == 0.0);
    for (double d : r.volumes[0].class_dice) CHECK(d == 1.0);
    CHECK(r.volumes[0].pooled_foreground == 1.0);
  }

  TEST_CASE("validate: uniform predictor and per-volume recomputation") {
    std::vector<LabeledVolume> vs{phantom_volume(1), phantom_volume(2), phantom_volume(3)};
    IntensityStats st;
    st.mean = 60;
    st.std = 30;
    auto cfg = small_config();
    cfg.window = {};
    const auto zero = PredictorParams::zeros(3, kNumFeatures);
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 1.0;
    CHECK(validate(zero, vs, st, cfg).loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    cfg = small_config();
    cfg.window = {};
    const auto p = PredictorParams::random(3, kNumFeatures, 9, 0.5);
    const auto r = validate(p, vs, st, cfg);
    double sum = 0;
    for (const auto& v : vs) {
      auto prep = prepare_inference(v.volume, &v.labels, st, cfg.window, cfg.size);
      const auto probs = linear_softmax(p, featurize(prep.volume));
      sum += combined_loss(probs, prep.labels->labels(), 3, cfg.loss, false).value;
    }
    CHECK(r.loss == doctest::Approx(sum / 3).epsilon(1e-14));
    CHECK_THROWS_AS(validate(p, std::span<const LabeledVolume>(), st, cfg), EmptyInputError);
  }

  TEST_CASE("inference preprocessing is the deterministic training sub-chain") {
    const auto v = phantom_volume(5);
    IntensityStats st;
    st.mean = 70;
    st.std = 25;
    const WindowConfig w;
    const auto prep = prepare_inference(v.volume, &v.labels, st, w, 16);
    const auto manual = downsample(normalize(window(v.volume, w), st), &v.labels, 16);
    CHECK(prep.volume == manual.volume);
    CHECK(*prep.labels == *manual.labels);
    CHECK(prepare_inference(v.volume, &v.labels, st, w, 128).volume == normalize(window(v.volume, w), st));
  }

  TEST_CASE("train: zero epochs returns the initial parameters") {
    std::vector<LabeledVolume> tr{phantom_volume(1), phantom_volume(2)};
    std::vector<LabeledVolume> va{phantom_volume(3)};
    auto cfg = small_config();
    cfg.max_epochs = 0;
    cfg.seed = 4;
    const auto r = train(tr, va, cfg);
    CHECK(r.log.empty());
    CHECK(r.best_epoch == 0);
    CHECK(r.params == PredictorParams::random(3, kNumFeatures, derive_seed(4, {1}), 0.01));
  }

  TEST_CASE("train: deterministic, finite, logged") {
    std::vector<LabeledVolume> tr{phantom_volume(1), phantom_volume(2), phantom_volume(4)};
    std::vector<LabeledVolume> va{phantom_volume(3)};
    auto cfg = small_config();
    cfg.window = {};
    cfg.max_epochs = 6;
    cfg.seed = 11;
    cfg.mode = TrainMode::TwoD;
    cfg.batch_size = 2;
    const auto a = train(tr, va, cfg);
    const auto b = train(tr, va, cfg);
    CHECK(a.params == b.params);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      CHECK(std::isfinite(a.log[i].train_loss));
      CHECK(a.log[i].train_loss == b.log[i].train_loss);
      CHECK(a.log[i].val_loss == b.log[i].val_loss);
    }
    CHECK(a.best_val_loss <= a.initial_val_loss);
    std::ostringstream log;
    write_train_log(a, log);
    CHECK(log.str().find("epoch\ttrain_loss\tval_loss\twall_seconds") != std::string::npos);
  }

  TEST_CASE("train: early stopping after patience epochs without improvement") {
    std::vector<LabeledVolume> tr{phantom_volume(1)};
    std::vector<LabeledVolume> va{phantom_volume(3)};
    auto cfg = small_config();
    cfg.window = {};
    cfg.adam.lr = 0.0;
    cfg.patience = 3;
    cfg.max_epochs = 50;
    const auto r = train(tr, va, cfg);
    CHECK(r.log.size() == 3);
    CHECK(r.best_epoch == 0);
  }

  TEST_CASE("train: divergence is reported with context") {
    std::vector<LabeledVolume> tr{phantom_volume(1)};
    std::vector<LabeledVolume> va{phantom_volume(3)};
    auto cfg = small_config();
    cfg.window = {};
    cfg.adam.lr = std::numeric_limits<double>::max();
    cfg.max_epochs = 5;
    CHECK_THROWS_AS(train(tr, va, cfg), DivergenceError);
  }

  TEST_CASE("train: intensity-separable task reaches 99% voxel accuracy") {
    std::vector<LabeledVolume> tr, va;
    for (std::uint64_t s = 0; s < 4; ++s) tr.push_back(separable("t" + std::to_string(s), s));
    va.push_back(separable("v", 99));
    auto cfg = small_config();
    cfg.max_epochs = 200;
    cfg.patience = 200;
    cfg.adam.lr = 0.01;
    cfg.seed = 2;
    const auto r = train(tr, va, cfg);
    const auto prep = prepare_inference(va[0].volume, &va[0].labels, r.stats, cfg.window, cfg.size);
    const auto pred = argmax_labels(predict(r.params, prep.volume));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.labels().size(); ++i) hit += pred.labels()[i] == prep.labels->labels()[i];
    CHECK(hit / static_cast<double>(pred.labels().size()) >= 0.99);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    CHECK(TrainConfig::default_batch_size(TrainMode::TwoD) == 28);
    CHECK(TrainConfig::for_mode(TrainMode::ThreeD).batch_size == 1);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.tolerance = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}
