#include "ctseg/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctseg/errors.hpp"
#include "ctseg/numeric.hpp"

namespace ctseg {

namespace {

std::size_t check_shapes(std::span<const double> probs, std::span<const std::uint8_t> truth,
                         std::size_t num_classes) {
  if (num_classes < 2) throw ShapeError("loss needs at least 2 classes");
  if (truth.empty()) throw ShapeError("loss over zero voxels");
  if (probs.size() != num_classes * truth.size()) {
    throw ShapeError("probability buffer of " + std::to_string(probs.size()) + " does not match " +
                     std::to_string(truth.size()) + " voxels x " + std::to_string(num_classes) + " classes");
  }
  for (auto t : truth) {
    if (t >= num_classes) throw RangeError("truth label " + std::to_string(t) + " outside class range");
  }
  return truth.size();
}

void check_pair(const ProbMap& pred, const LabelVolume& truth) {
  require_same_dims(pred.dims(), truth.dims(), "loss");
  if (pred.num_classes() != truth.num_classes()) throw ShapeError("prediction and truth class counts differ");
}

struct ClassSums {
  double inter = 0.0;
  double denom = 0.0;  // |p|^2 + |y|^2 - <p, y>
};

ClassSums class_sums(std::span<const double> p, std::span<const std::uint8_t> truth, std::uint8_t c) {
  CompensatedSum inter;
  CompensatedSum pp;
  std::size_t yy = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double pi = p[i];
    pp.add(pi * pi);
    if (truth[i] == c) {
      inter.add(pi);
      ++yy;
    }
  }
  return {inter.value(), pp.value() + static_cast<double>(yy) - inter.value()};
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0)) throw ConfigError("loss weights must be >= 0 with a positive sum");
  if (!(smooth > 0.0 && std::isfinite(smooth))) throw ConfigError("smooth must be > 0");
  if (!(prob_floor > 0.0 && prob_floor <= 1e-3)) throw ConfigError("prob_floor must lie in (0, 1e-3]");
}

TanimotoLoss tanimoto_loss(std::span<const double> probs, std::span<const std::uint8_t> truth,
                           std::size_t num_classes, double smooth) {
  const std::size_t n = check_shapes(probs, truth, num_classes);
  TanimotoLoss out;
  out.per_class.resize(num_classes);
  CompensatedSum total;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto s = class_sums(probs.subspan(c * n, n), truth, static_cast<std::uint8_t>(c));
    out.per_class[c] = 1.0 - (s.inter + smooth) / (s.denom + smooth);
    total.add(out.per_class[c]);
  }
  out.mean = total.value() / static_cast<double>(num_classes);
  return out;
}

TanimotoLoss tanimoto_loss(const ProbMap& pred, const LabelVolume& truth, double smooth) {
  check_pair(pred, truth);
  return tanimoto_loss(pred.to_doubles(), truth.labels(), pred.num_classes(), smooth);
}

std::vector<double> tanimoto_grad(std::span<const double> probs, std::span<const std::uint8_t> truth,
                                  std::size_t num_classes, double smooth) {
  const std::size_t n = check_shapes(probs, truth, num_classes);
  std::vector<double> grad(probs.size());
  const double inv_c = 1.0 / static_cast<double>(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto p = probs.subspan(c * n, n);
    const auto s = class_sums(p, truth, static_cast<std::uint8_t>(c));
    const double num = s.inter + smooth;
    const double den = s.denom + smooth;
    const double scale = -inv_c / (den * den);
    for (std::size_t i = 0; i < n; ++i) {
      const double y = truth[i] == c ? 1.0 : 0.0;
      // d/dp of (I + s)/(D + s), with dI/dp = y and dD/dp = 2p - y.
      grad[c * n + i] = scale * (y * den - num * (2.0 * p[i] - y));
    }
  }
  return grad;
}

std::vector<double> tanimoto_grad(const ProbMap& pred, const LabelVolume& truth, double smooth) {
  check_pair(pred, truth);
  return tanimoto_grad(pred.to_doubles(), truth.labels(), pred.num_classes(), smooth);
}

double cross_entropy(std::span<const double> probs, std::span<const std::uint8_t> truth, std::size_t num_classes,
                     double prob_floor) {
  const std::size_t n = check_shapes(probs, truth, num_classes);
  CompensatedSum sum;
  for (std::size_t i = 0; i < n; ++i) sum.add(-std::log(std::max(probs[truth[i] * n + i], prob_floor)));
  return sum.value() / static_cast<double>(n);
}

double cross_entropy(const ProbMap& pred, const LabelVolume& truth, double prob_floor) {
  check_pair(pred, truth);
  return cross_entropy(pred.to_doubles(), truth.labels(), pred.num_classes(), prob_floor);
}

std::vector<double> cross_entropy_grad(std::span<const double> probs, std::span<const std::uint8_t> truth,
                                       std::size_t num_classes, double prob_floor) {
  const std::size_t n = check_shapes(probs, truth, num_classes);
  std::vector<double> grad(probs.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = truth[i] * n + i;
    if (probs[k] > prob_floor) grad[k] = -inv_n / probs[k];
  }
  return grad;
}

std::vector<double> cross_entropy_grad(const ProbMap& pred, const LabelVolume& truth, double prob_floor) {
  check_pair(pred, truth);
  return cross_entropy_grad(pred.to_doubles(), truth.labels(), pred.num_classes(), prob_floor);
}

CombinedLoss combined_loss(std::span<const double> probs, std::span<const std::uint8_t> truth,
                           std::size_t num_classes, const LossConfig& cfg, bool with_grad) {
  cfg.validate();
  CombinedLoss out;
  out.tanimoto = tanimoto_loss(probs, truth, num_classes, cfg.smooth).mean;
  out.cross_entropy = cross_entropy(probs, truth, num_classes, cfg.prob_floor);
  out.value = cfg.alpha * out.tanimoto + cfg.beta * out.cross_entropy;
  if (with_grad) {
    out.grad = tanimoto_grad(probs, truth, num_classes, cfg.smooth);
    const auto ce = cross_entropy_grad(probs, truth, num_classes, cfg.prob_floor);
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] = cfg.alpha * out.grad[k] + cfg.beta * ce[k];
  }
  return out;
}

CombinedLoss combined_loss(const ProbMap& pred, const LabelVolume& truth, const LossConfig& cfg, bool with_grad) {
  check_pair(pred, truth);
  return combined_loss(pred.to_doubles(), truth.labels(), pred.num_classes(), cfg, with_grad);
}

double DiceCounts::score() const noexcept {
  if (both_empty()) return 1.0;
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(predicted + actual);
}

DiceCounts dice_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t cls) {
  if (pred.size() != truth.size()) throw ShapeError("dice: label buffers differ in size");
  DiceCounts d;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls;
    const bool t = truth[i] == cls;
    d.predicted += p;
    d.actual += t;
    d.overlap += p && t;
  }
  return d;
}

double dice_score(const LabelVolume& pred, const LabelVolume& truth, std::uint8_t cls) {
  require_same_dims(pred.dims(), truth.dims(), "dice");
  return dice_counts(pred.labels(), truth.labels(), cls).score();
}

std::string_view to_string(TotalDice t) noexcept {
  return t == TotalDice::PooledForeground ? "pooled-foreground" : "foreground-mean";
}

TotalDice parse_total_dice(std::string_view name) {
  if (name == "pooled-foreground" || name == "pooled") return TotalDice::PooledForeground;
  if (name == "foreground-mean" || name == "mean") return TotalDice::ForegroundMean;
  throw ConfigError("unknown total dice kind '" + std::string(name) + "'");
}

DiceCounts pooled_foreground_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: label buffers differ in size");
  DiceCounts d;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool t = truth[i] != 0;
    d.predicted += p;
    d.actual += t;
    d.overlap += p && t;
  }
  return d;
}

double total_dice(const LabelVolume& pred, const LabelVolume& truth, TotalDice kind) {
  require_same_dims(pred.dims(), truth.dims(), "dice");
  if (kind == TotalDice::PooledForeground) return pooled_foreground_counts(pred.labels(), truth.labels()).score();
  const std::uint8_t classes = std::max(pred.num_classes(), truth.num_classes());
  double sum = 0.0;
  for (std::uint8_t c = 1; c < classes; ++c) sum += dice_counts(pred.labels(), truth.labels(), c).score();
  return sum / static_cast<double>(classes - 1);
}

Aggregate aggregate(std::span<const double> scores) {
  if (scores.empty()) throw EmptyInputError("aggregate over no scores");
  CompensatedSum s;
  for (double x : scores) s.add(x);
  const double mean = s.value() / static_cast<double>(scores.size());
  CompensatedSum sq;
  for (double x : scores) sq.add((x - mean) * (x - mean));
  return {mean, std::sqrt(sq.value() / static_cast<double>(scores.size()))};
}

void AdamConfig::validate() const {
  if (!(lr >= 0.0 && std::isfinite(lr))) throw ConfigError("learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: parameter, gradient and moment lengths differ");
  }
  const auto& c = state.cfg;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k];
    state.m[k] = c.beta1 * state.m[k] + (1.0 - c.beta1) * g;
    state.v[k] = c.beta2 * state.v[k] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.m[k] / bc1;
    const double v_hat = state.v[k] / bc2;
    params[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

}  // namespace ctseg
