#include <doctest.h>

#include <cmath>
#include <vector>

#include "../oracle.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/objective.hpp"
#include "ctseg/rng.hpp"

using namespace ctseg;

namespace {

struct Instance {
  std::size_t n = 0;
  std::size_t c = 0;
  std::vector<double> probs;
  std::vector<std::uint8_t> truth;
};

Instance random_instance(Rng& rng) {
  Instance in;
  in.c = 2 + rng.below(2);
  in.n = (1 + rng.below(4)) * (1 + rng.below(4)) * (1 + rng.below(2));
  in.probs.assign(in.n * in.c, 0.0);
  in.truth.resize(in.n);
  for (std::size_t i = 0; i < in.n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < in.c; ++k) s += in.probs[k * in.n + i] = 0.05 + rng.uniform();
    for (std::size_t k = 0; k < in.c; ++k) in.probs[k * in.n + i] /= s;
    in.truth[i] = static_cast<std::uint8_t>(rng.below(in.c));
  }
  return in;
}

double oracle_tanimoto_mean(const Instance& in, double smooth) {
  double s = 0;
  for (std::size_t k = 0; k < in.c; ++k) {
    std::vector<double> p(in.probs.begin() + k * in.n, in.probs.begin() + (k + 1) * in.n);
    std::vector<double> y(in.n);
    for (std::size_t i = 0; i < in.n; ++i) y[i] = in.truth[i] == k;
    s += oracle::tanimoto(p, y, smooth);
  }
  return s / in.c;
}

double oracle_ce(const Instance& in, double floor) {
  double s = 0;
  for (std::size_t i = 0; i < in.n; ++i) s -= std::log(std::max(in.probs[in.truth[i] * in.n + i], floor));
  return s / in.n;
}

template <typename F>
double fd_max_rel_error(Instance in, const std::vector<double>& grad, F loss) {
  constexpr double eps = 1e-6;
  double worst = 0;
  for (std::size_t j = 0; j < in.probs.size(); ++j) {
    const double keep = in.probs[j];
    in.probs[j] = keep + eps;
    const double up = loss(in);
    in.probs[j] = keep - eps;
    const double down = loss(in);
    in.probs[j] = keep;
    const double fd = (up - down) / (2 * eps);
    const double err = std::abs(fd - grad[j]) / std::max(1e-3, std::abs(fd) + std::abs(grad[j]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_SUITE("objective") {
  TEST_CASE("single-voxel examples") {
    const std::vector<double> p{0.5, 0.5};
    const std::vector<std::uint8_t> y{1};
    const auto t = tanimoto_loss(p, y, 2, 1e-5);
    CHECK(t.per_class[1] == doctest::Approx(1 - 0.50001 / 0.75001).epsilon(1e-12));
    CHECK(t.per_class[1] == doctest::Approx(0.33333).epsilon(1e-4));
    LossConfig cfg;
    const auto cl = combined_loss(p, y, 2, cfg);
    CHECK(cl.tanimoto == doctest::Approx(t.mean));
    CHECK(cl.cross_entropy == doctest::Approx(std::log(2.0)));
    CHECK(0.6 * t.per_class[1] + 0.4 * std::log(2.0) == doctest::Approx(0.47726).epsilon(1e-4));
  }

  TEST_CASE("perfect prediction and absent classes give zero") {
    const std::vector<double> p{1, 0, 0, 0, 1, 1, 0, 0, 0};
    const std::vector<std::uint8_t> y{0, 1, 1};
    const auto t = tanimoto_loss(p, y, 3, 1e-5);
    for (double l : t.per_class) CHECK(l == 0.0);
    CHECK(cross_entropy(p, y, 3, 1e-12) == 0.0);
    CHECK(combined_loss(p, y, 3, {}).value == 0.0);
  }

  TEST_CASE("uniform prediction has cross-entropy ln 3") {
    const std::vector<double> p(12, 1.0 / 3);
    const std::vector<std::uint8_t> y{0, 1, 2, 1};
    CHECK(cross_entropy(p, y, 3, 1e-12) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  }

  TEST_CASE("losses equal the scalar oracles") {
    Rng rng(10);
    for (int t = 0; t < 100; ++t) {
      const auto in = random_instance(rng);
      const double smooth = t % 2 ? 1e-5 : 0.3;
      CHECK(std::abs(tanimoto_loss(in.probs, in.truth, in.c, smooth).mean - oracle_tanimoto_mean(in, smooth)) < 1e-12);
      CHECK(std::abs(cross_entropy(in.probs, in.truth, in.c, 1e-12) - oracle_ce(in, 1e-12)) < 1e-12);
      LossConfig cfg{0.3 + 0.01 * t, 0.7, smooth, 1e-12};
      CHECK(std::abs(combined_loss(in.probs, in.truth, in.c, cfg).value -
                     (cfg.alpha * oracle_tanimoto_mean(in, smooth) + cfg.beta * oracle_ce(in, 1e-12))) < 1e-12);
    }
  }

  TEST_CASE("gradients match central differences") {
    Rng rng(20);
    for (int t = 0; t < 100; ++t) {
      const auto in = random_instance(rng);
      const LossConfig cfg;
      CHECK(fd_max_rel_error(in, tanimoto_grad(in.probs, in.truth, in.c, cfg.smooth),
                             [&](const Instance& x) { return tanimoto_loss(x.probs, x.truth, x.c, cfg.smooth).mean; }) <
            1e-4);
      CHECK(fd_max_rel_error(in, cross_entropy_grad(in.probs, in.truth, in.c, cfg.prob_floor),
                             [&](const Instance& x) { return cross_entropy(x.probs, x.truth, x.c, cfg.prob_floor); }) <
            1e-4);
      CHECK(fd_max_rel_error(in, combined_loss(in.probs, in.truth, in.c, cfg).grad, [&](const Instance& x) {
              return combined_loss(x.probs, x.truth, x.c, cfg, false).value;
            }) < 1e-4);
    }
  }

  TEST_CASE("absent class gradient matches central differences") {
    Instance in;
    in.n = 2;
    in.c = 3;
    in.probs = {0.7, 0.6, 0.3, 0.4, 0.0, 0.0};
    in.truth = {0, 1};
    CHECK(fd_max_rel_error(in, tanimoto_grad(in.probs, in.truth, 3, 1e-2),
                           [](const Instance& x) { return tanimoto_loss(x.probs, x.truth, 3, 1e-2).mean; }) < 1e-4);
  }

  TEST_CASE("doubling smooth keeps the single-voxel gradient sign") {
    const std::vector<double> p{0.5, 0.5};
    const std::vector<std::uint8_t> y{1};
    const auto base = tanimoto_grad(p, y, 2, 1e-5);
    for (double s = 2e-5; s < 10; s *= 2) {
      const auto g = tanimoto_grad(p, y, 2, s);
      for (std::size_t j = 0; j < g.size(); ++j) CHECK(std::signbit(g[j]) == std::signbit(base[j]));
    }
  }

  TEST_CASE("combined loss is linear in the weights") {
    Rng rng(30);
    const auto in = random_instance(rng);
    const auto t = combined_loss(in.probs, in.truth, in.c, {1.0, 0.0, 1e-5, 1e-12});
    CHECK(t.value == doctest::Approx(tanimoto_loss(in.probs, in.truth, in.c, 1e-5).mean).epsilon(1e-14));
    const auto e = combined_loss(in.probs, in.truth, in.c, {0.0, 1.0, 1e-5, 1e-12});
    const auto m = combined_loss(in.probs, in.truth, in.c, {0.25, 1.5, 1e-5, 1e-12});
    CHECK(m.value == doctest::Approx(0.25 * t.value + 1.5 * e.value).epsilon(1e-12));
  }

  TEST_CASE("shape and range errors") {
    const std::vector<double> p{0.5, 0.5};
    CHECK_THROWS_AS(tanimoto_loss(p, std::vector<std::uint8_t>{0, 1}, 2, 1e-5), ShapeError);
    CHECK_THROWS_AS(cross_entropy(p, std::vector<std::uint8_t>{2}, 2, 1e-12), RangeError);
    const ProbMap pm({1, 1, 1}, {}, 2, {0.5f, 0.5f});
    const LabelVolume lv({2, 1, 1}, {}, 2, {0, 1});
    CHECK_THROWS_AS(combined_loss(pm, lv, {}), ShapeError);
    LossConfig bad;
    bad.smooth = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("dice: exhaustive 2x2x1 masks against set counting") {
    for (int a = 0; a < 16; ++a) {
      for (int b = 0; b < 16; ++b) {
        std::vector<std::uint8_t> pa(4), pb(4);
        std::vector<int> sa, sb;
        for (int i = 0; i < 4; ++i) {
          pa[i] = (a >> i) & 1;
          pb[i] = (b >> i) & 1;
          if (pa[i]) sa.push_back(i);
          if (pb[i]) sb.push_back(i);
        }
        const LabelVolume la({2, 2, 1}, {}, 2, pa);
        const LabelVolume lb({2, 2, 1}, {}, 2, pb);
        const double d = dice_score(la, lb, 1);
        REQUIRE(d == oracle::dice_sets(sa, sb));
        REQUIRE(d == dice_score(lb, la, 1));
      }
    }
  }

  TEST_CASE("dice examples and total variants") {
    const LabelVolume p({6, 1, 1}, {}, 3, {1, 1, 1, 0, 0, 0});
    const LabelVolume t({6, 1, 1}, {}, 3, {0, 1, 1, 1, 0, 0});
    CHECK(dice_score(p, t, 1) == doctest::Approx(4.0 / 6.0));
    CHECK(dice_score(p, t, 2) == 1.0);
    const LabelVolume q({4, 1, 1}, {}, 3, {1, 2, 0, 0});
    const LabelVolume r({4, 1, 1}, {}, 3, {2, 1, 0, 0});
    CHECK(total_dice(q, r, TotalDice::PooledForeground) == 1.0);
    CHECK(total_dice(q, r, TotalDice::ForegroundMean) == 0.0);
    CHECK(parse_total_dice("pooled") == TotalDice::PooledForeground);
    CHECK(parse_total_dice("foreground-mean") == TotalDice::ForegroundMean);
  }

  TEST_CASE("aggregate") {
    auto agg = [](std::vector<double> v) { return aggregate(v); };
    CHECK(agg({0.9, 0.9}).mean == doctest::Approx(0.9));
    CHECK(agg({0.9, 0.9}).std == doctest::Approx(0.0));
    CHECK(agg({1.0}).std == 0.0);
    CHECK(agg({0.8, 1.0}).mean == doctest::Approx(0.9));
    CHECK(agg({0.8, 1.0}).std == doctest::Approx(0.1));
    CHECK_THROWS_AS(aggregate(std::span<const double>()), EmptyInputError);
  }

  TEST_CASE("adam: zero gradient, first step, lr 0, determinism") {
    std::vector<double> p{1.0, -2.0, 3.0};
    AdamState s(3);
    adam_step(p, std::vector<double>(3, 0.0), s);
    CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
    CHECK(s.step == 1);

    AdamState f(3);
    const std::vector<double> g{0.5, -4.0, 1e-3};
    std::vector<double> q{0, 0, 0};
    adam_step(q, g, f);
    for (std::size_t i = 0; i < 3; ++i) {
      // m_hat = g, v_hat = g^2 after one bias-corrected step.
      CHECK(q[i] == doctest::Approx(-0.001 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
    }

    AdamState z(2, {0.0, 0.9, 0.999, 1e-8});
    std::vector<double> w{1, 2};
    for (int i = 0; i < 5; ++i) adam_step(w, std::vector<double>{0.3, -0.7}, z);
    CHECK(w == std::vector<double>{1, 2});

    Rng rng(1);
    std::vector<std::vector<double>> grads(20, std::vector<double>(4));
    for (auto& gr : grads)
      for (auto& x : gr) x = rng.normal();
    std::vector<double> a(4, 0.5), b(4, 0.5);
    AdamState sa(4), sb(4);
    for (const auto& gr : grads) {
      adam_step(a, gr, sa);
      adam_step(b, gr, sb);
    }
    CHECK(a == b);
    CHECK(sa == sb);
    CHECK_THROWS_AS(adam_step(a, std::vector<double>(3), sa), ShapeError);
  }
}
