#include "ctseg/selftest.hpp"

#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>

#include "ctseg/augment.hpp"
#include "ctseg/dataset.hpp"
#include "ctseg/objective.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/synth.hpp"
#include "ctseg/volume_io.hpp"

namespace ctseg {

namespace {

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

bool loss_values() {
  const std::vector<double> p{0.5, 0.5};
  const std::vector<std::uint8_t> y{1};
  const double tan = tanimoto_loss(p, y, 2, 1e-5).per_class[1];
  const std::vector<double> u(3, 1.0 / 3.0);
  const std::vector<std::uint8_t> y3{2};
  return close(tan, 1.0 - 0.50001 / 0.75001, 1e-12) && close(cross_entropy(u, y3, 3, 1e-12), std::log(3.0), 1e-12);
}

bool gradients() {
  Rng rng(11);
  const std::size_t n = 8;
  const std::size_t classes = 3;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> p(classes * n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < classes; ++c) s += p[c * n + i] = 0.05 + rng.uniform();
      for (std::size_t c = 0; c < classes; ++c) p[c * n + i] /= s;
      y[i] = static_cast<std::uint8_t>(rng.below(classes));
    }
    const LossConfig cfg;
    const auto g = combined_loss(p, y, classes, cfg).grad;
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto hi = p;
      auto lo = p;
      hi[k] += 1e-6;
      lo[k] -= 1e-6;
      const double fd =
          (combined_loss(hi, y, classes, cfg, false).value - combined_loss(lo, y, classes, cfg, false).value) / 2e-6;
      if (std::abs(fd - g[k]) > 1e-4 * std::max(1.0, std::abs(fd))) return false;
    }
  }
  return true;
}

bool dice_exhaustive() {
  for (unsigned a = 0; a < 16; ++a) {
    for (unsigned b = 0; b < 16; ++b) {
      std::vector<std::uint8_t> pa(4), pb(4);
      int inter = 0, na = 0, nb = 0;
      for (int i = 0; i < 4; ++i) {
        pa[i] = (a >> i) & 1u;
        pb[i] = (b >> i) & 1u;
        na += pa[i];
        nb += pb[i];
        inter += pa[i] & pb[i];
      }
      const double expect = na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
      if (dice_counts(pa, pb, 1).score() != expect) return false;
    }
  }
  return true;
}

bool round_trips() {
  PhantomConfig pc;
  pc.dims = {16, 16, 4};
  const auto ph = generate_phantom(pc, 5);
  const auto p = one_hot(ph.labels);
  return decode_volume(encode(ph.volume)) == ph.volume && decode_labels(encode(ph.labels)) == ph.labels &&
         decode_probmap(encode(p)) == p;
}

bool windowing() {
  PhantomConfig pc;
  pc.dims = {32, 32, 6};
  const auto ph = generate_phantom(pc, 3);
  const WindowConfig cfg;
  const auto b = window_bounds(ph.volume, cfg);
  const auto w = window(ph.volume, cfg);
  for (std::size_t i = 0; i < w.voxels().size(); ++i) {
    const double v = w.voxels()[i];
    if (v < b.lo || v > b.hi) return false;
    if (ph.volume.voxels()[i] >= b.lo && ph.volume.voxels()[i] <= b.hi && v != ph.volume.voxels()[i]) return false;
  }
  return true;
}

bool folds() {
  std::vector<ManifestRecord> recs;
  for (std::uint32_t i = 0; i < 10; ++i) recs.push_back({"v" + std::to_string(i), "v.ctv", std::nullopt, 10 - i, 1.0});
  const auto plan = assign_folds(Manifest(recs), 5);
  std::size_t total = 0;
  for (const auto& f : plan.folds) total += f.size();
  return total == 10 && plan.folds[0] == std::vector<std::string>{"v9", "v8"};
}

bool augmentation() {
  PhantomConfig pc;
  pc.dims = {24, 24, 8};
  const auto ph = generate_phantom(pc, 9);
  const auto norm = normalize(window(ph.volume, WindowConfig{}), IntensityStats{50.0, 30.0});
  const AugmentConfig cfg;
  auto run = [&] {
    return apply_policy({VolumePair{norm, ph.labels}}, cfg, TrainMode::ThreeD, 77).items.front().volume;
  };
  return run() == run();
}

}  // namespace

int run_selftest(std::ostream& out) {
  const std::vector<std::pair<std::string, std::function<bool()>>> checks{
      {"loss values", loss_values},   {"loss gradients", gradients}, {"dice exhaustive", dice_exhaustive},
      {"format round trips", round_trips}, {"windowing", windowing},  {"fold plan", folds},
      {"augmentation determinism", augmentation}};
  int failures = 0;
  for (const auto& [name, check] : checks) {
    bool ok = false;
    std::string detail;
    try {
      ok = check();
    } catch (const std::exception& e) {
      detail = std::string(" (") + e.what() + ")";
    }
    failures += !ok;
    out << (ok ? "PASS " : "FAIL ") << name << detail << '\n';
  }
  return failures;
}

}  // namespace ctseg
