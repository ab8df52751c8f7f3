#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "ctseg/ensemble.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/rng.hpp"
#include "helpers.hpp"

using namespace ctseg;

namespace {

/// Member that puts `confidence` on the true class, the rest spread evenly.
ProbMap confident(const LabelVolume& truth, double confidence) {
  const std::size_t n = truth.dims().voxels();
  const std::size_t c = truth.num_classes();
  std::vector<double> p(c * n, (1.0 - confidence) / (c - 1));
  for (std::size_t i = 0; i < n; ++i) p[truth.labels()[i] * n + i] = confidence;
  return ProbMap::from_doubles(truth.dims(), truth.spacing(), static_cast<std::uint8_t>(c), p);
}

ProbMap random_member(const Dims& d, std::uint8_t c, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = d.voxels();
  std::vector<double> p(c * n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += p[k * n + i] = rng.uniform() + 1e-3;
    for (std::size_t k = 0; k < c; ++k) p[k * n + i] /= s;
  }
  return ProbMap::from_doubles(d, {}, c, p);
}

LabelVolume phantom_labels(std::uint64_t seed) { return testing::small_phantom(seed, 24, 8).labels; }

}  // namespace

TEST_SUITE("ensemble") {
  TEST_CASE("top-n selection") {
    const std::vector<Candidate> c{{"c", 0.7}, {"a", 0.9}, {"b", 0.8}};
    const auto top = select_top_n(c, 2);
    REQUIRE(top.size() == 2);
    CHECK(top[0].id == "a");
    CHECK(top[1].id == "b");
    CHECK(select_top_n(c, 5).size() == 3);
    const std::vector<Candidate> tie{{"z", 0.5}, {"m", 0.9}, {"b", 0.5}, {"q", 0.5}};
    const auto t = select_top_n(tie, 2);
    CHECK(t[1].id == "b");
    CHECK_THROWS_AS(select_top_n(std::span<const Candidate>(), 2), EmptyInputError);
  }

  TEST_CASE("top-n scores dominate the rest") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<Candidate> c;
      for (int i = 0; i < 12; ++i) c.push_back({"m" + std::to_string(i), static_cast<double>(rng.below(5))});
      const auto top = select_top_n(c, 5);
      auto sorted = c;
      std::sort(sorted.begin(), sorted.end(),
                [](const auto& a, const auto& b) { return std::tie(b.score, a.id) < std::tie(a.score, b.id); });
      for (std::size_t i = 0; i < 5; ++i) CHECK(top[i].id == sorted[i].id);
      for (const auto& x : c) {
        if (std::none_of(top.begin(), top.end(), [&](const auto& t) { return t.id == x.id; })) {
          for (const auto& t : top) CHECK(t.score >= x.score);
        }
      }
    }
  }

  TEST_CASE("mean combiner") {
    const ProbMap a({1, 1, 1}, {}, 2, {0.8f, 0.2f});
    const ProbMap b({1, 1, 1}, {}, 2, {0.2f, 0.8f});
    const std::vector<ProbMap> ab{a, b};
    const auto m = combine_mean(ab);
    CHECK(m.at(0, 0) == doctest::Approx(0.5));
    CHECK(m.at(1, 0) == doctest::Approx(0.5));
    CHECK(combine_mean(ab, std::vector<double>{1, 0}) == a);
    const std::vector<ProbMap> aa{a, a};
    CHECK(combine_mean(aa) == a);
    CHECK_THROWS_AS(combine_mean(ab, std::vector<double>{0, 0}), WeightError);
    CHECK_THROWS_AS(combine_mean(ab, std::vector<double>{-1, 2}), WeightError);
    const ProbMap other({2, 1, 1}, {}, 2, {0.5f, 0.5f, 0.5f, 0.5f});
    CHECK_THROWS_AS(combine_mean(std::vector<ProbMap>{a, other}), ShapeError);
  }

  TEST_CASE("mean combiner is permutation invariant and normalized") {
    const Dims d{5, 4, 2};
    std::vector<ProbMap> ms{random_member(d, 3, 1), random_member(d, 3, 2), random_member(d, 3, 3)};
    const std::vector<double> w{0.5, 2.0, 1.25};
    const auto ref = combine_mean(ms, w);
    std::vector<ProbMap> rev{ms[2], ms[0], ms[1]};
    const std::vector<double> rw{1.25, 0.5, 2.0};
    const auto got = combine_mean(rev, rw);
    for (std::size_t k = 0; k < ref.probs().size(); ++k) CHECK(got.probs()[k] == doctest::Approx(ref.probs()[k]).epsilon(1e-6));
  }

  TEST_CASE("binary member mapping") {
    const ProbMap b({3, 1, 1}, {}, 2, {0.0f, 1.0f, 0.7f, 1.0f, 0.0f, 0.3f});
    const auto m = map_binary_member(b, 3);
    CHECK(m.at(0, 0) == 0.0f);
    CHECK(m.at(1, 0) == 1.0f);
    CHECK(m.at(2, 0) == 0.0f);
    CHECK(m.at(0, 1) == 1.0f);
    CHECK(m.at(0, 2) == 0.7f);
    CHECK(m.at(1, 2) == 0.3f);
    CHECK(m.at(2, 2) == 0.0f);
    CHECK_THROWS_AS(map_binary_member(m, 3), ShapeError);
  }

  TEST_CASE("argmax ties resolve to class 0") {
    const ProbMap t({1, 1, 1}, {}, 2, {0.5f, 0.5f});
    const auto r = combine_members(std::vector<ProbMap>{t}, CombinerKind::Mean, {}, nullptr, 2);
    CHECK(r.labels.labels()[0] == 0);
  }

  TEST_CASE("one member: mean and weighted reproduce its argmax, untrained stacker too") {
    const auto truth = phantom_labels(1);
    const auto m = random_member(truth.dims(), 3, 5);
    const std::vector<ProbMap> one{m};
    const auto want = argmax_labels(m);
    CHECK(combine_members(one, CombinerKind::Mean, {}, nullptr).labels == want);
    CHECK(combine_members(one, CombinerKind::Weighted, std::vector<double>{0.7}, nullptr).labels == want);
    const std::vector<std::uint8_t> classes{3};
    const auto id = identity_stacker(classes, 3);
    CHECK(combine_members(one, CombinerKind::Stacker, {}, &id).labels == want);
  }

  TEST_CASE("zero-epoch stacker behaves like the mean") {
    const auto truth = phantom_labels(2);
    std::vector<ProbMap> ms{random_member(truth.dims(), 3, 7), random_member(truth.dims(), 3, 8)};
    StackerConfig cfg;
    cfg.epochs = 0;
    const auto s = train_stacker(std::vector<StackerSample>{{ms, truth}}, cfg);
    CHECK(s == identity_stacker(std::vector<std::uint8_t>{3, 3}, 3));
    const auto stacked = argmax_labels(apply_stacker(s, ms));
    const auto mean = argmax_labels(combine_mean(ms));
    std::size_t agree = 0;
    for (std::size_t i = 0; i < mean.labels().size(); ++i) agree += stacked.labels()[i] == mean.labels()[i];
    CHECK(agree / double(mean.labels().size()) >= 0.99);
  }

  TEST_CASE("stacker with one good member keeps its quality on held-out phantoms") {
    std::vector<StackerSample> train;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto t = phantom_labels(s);
      train.push_back({{confident(t, 0.6)}, t});
    }
    const StackerConfig cfg;
    const auto st = train_stacker(train, cfg);
    for (std::uint64_t s = 10; s < 13; ++s) {
      const auto t = phantom_labels(s);
      const std::vector<ProbMap> m{confident(t, 0.6)};
      const auto member = argmax_labels(m[0]);
      const auto stacked = argmax_labels(apply_stacker(st, m));
      CHECK(total_dice(stacked, t) >= total_dice(member, t) - 0.01);
      std::size_t agree = 0;
      for (std::size_t i = 0; i < member.labels().size(); ++i) agree += stacked.labels()[i] == member.labels()[i];
      CHECK(agree / double(member.labels().size()) >= 0.99);
    }
  }

  TEST_CASE("stacker leans on the good member when the other is noise") {
    std::vector<StackerSample> train;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto t = phantom_labels(s);
      train.push_back({{confident(t, 0.7), random_member(t.dims(), 3, 100 + s)}, t});
    }
    const StackerConfig cfg;
    const auto st = train_stacker(train, cfg);
    const std::size_t cols = 6;
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(st.weights[c * cols + c]) > std::abs(st.weights[c * cols + 3 + c]));
    for (std::uint64_t s = 20; s < 23; ++s) {
      const auto t = phantom_labels(s);
      const std::vector<ProbMap> m{confident(t, 0.7), random_member(t.dims(), 3, 200 + s)};
      const double perfect = total_dice(argmax_labels(m[0]), t);
      CHECK(total_dice(argmax_labels(apply_stacker(st, m)), t) >= 0.98 * perfect);
    }
  }

  TEST_CASE("stacker training is deterministic per seed") {
    const auto t = phantom_labels(3);
    std::vector<StackerSample> train{{{confident(t, 0.7), random_member(t.dims(), 3, 1)}, t},
                                     {{confident(t, 0.6), random_member(t.dims(), 3, 2)}, t}};
    StackerConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 9;
    CHECK(train_stacker(train, cfg) == train_stacker(train, cfg));
  }

  TEST_CASE("mixed binary and multiclass members") {
    const auto t = phantom_labels(4);
    const std::size_t n = t.dims().voxels();
    std::vector<double> bin(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      bin[n + i] = t.labels()[i] ? 0.9 : 0.1;
      bin[i] = 1 - bin[n + i];
    }
    const std::vector<ProbMap> ms{ProbMap::from_doubles(t.dims(), {}, 2, bin), confident(t, 0.6)};
    const auto r = combine_members(ms, CombinerKind::Mean, {}, nullptr);
    CHECK(r.probs.num_classes() == 3);
    CHECK(total_dice(r.labels, t) == 1.0);
  }

  TEST_CASE("ensemble spec file") {
    EnsembleSpec spec;
    spec.members = {{"a.prm", "multiclass-3d", 0.91}, {"sub/b.prm", "binary-2d", 0.8}};
    spec.combiner = CombinerKind::Stacker;
    spec.stacker_path = "st.prm";
    std::stringstream ss;
    write_ensemble_spec(spec, ss);
    const auto back = read_ensemble_spec(ss, "/base");
    REQUIRE(back.members.size() == 2);
    CHECK(back.members[1].params_path == std::filesystem::path("/base/sub/b.prm"));
    CHECK(back.members[0].mode == "multiclass-3d");
    CHECK(back.members[0].score == 0.91);
    CHECK(back.combiner == CombinerKind::Stacker);
    CHECK(*back.stacker_path == std::filesystem::path("/base/st.prm"));
    CHECK(parse_combiner("WEIGHTED") == CombinerKind::Weighted);
    CHECK_THROWS_AS(parse_combiner("vote"), ConfigError);
    EnsembleSpec empty;
    CHECK_THROWS_AS(empty.validate(), ConfigError);
    std::istringstream bad("member a.prm\n");
    CHECK_THROWS(read_ensemble_spec(bad));
  }

  TEST_CASE("stacked_predict with identical members equals the member argmax") {
    testing::TempDir dir("ens");
    const auto p = PredictorParams::random(3, kNumFeatures, 3, 1.0);
    save_params(p, dir.path() / "m.prm");
    EnsembleSpec spec;
    spec.members = {{dir.path() / "m.prm", "multiclass-3d", 0.9}, {dir.path() / "m.prm", "multiclass-2d", 0.8}};
    Rng rng(2);
    std::vector<float> v(12 * 12 * 2);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    const CtVolume vol({12, 12, 2}, {}, UnitState::Normalized, v);
    const auto r = stacked_predict(spec, vol);
    CHECK(r.labels == argmax_labels(predict(p, vol)));
  }
}
