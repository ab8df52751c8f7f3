#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "ctseg/cli.hpp"
#include "ctseg/dataset.hpp"
#include "ctseg/synth.hpp"
#include "ctseg/volume_io.hpp"
#include "helpers.hpp"

using namespace ctseg;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "ctseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 1") {
    CHECK(run({}) == kExitUsage);
    CHECK(run({"frobnicate"}) == kExitUsage);
    CHECK(run({"folds", "--bogus"}) == kExitUsage);
    CHECK(run({"folds"}) == kExitUsage);
    CHECK(run({"--help"}) == kExitOk);
  }

  TEST_CASE("data errors exit 2") {
    testing::TempDir dir("cli_err");
    CHECK(run({"folds", "--manifest", (dir.path() / "none.tsv").string(), "--out", (dir.path() / "p.tsv").string()}) ==
          kExitData);
  }

  TEST_CASE("folds on the ten-volume fixture") {
    testing::TempDir dir("cli_folds");
    {
      std::ofstream m(dir.path() / "m.tsv");
      for (int i = 10; i >= 1; --i) m << "v" << i << "\tv" << i << ".ctv\t-\t" << i << "\t1\n";
    }
    const auto plan = dir.path() / "plan.tsv";
    REQUIRE(run({"folds", "--manifest", (dir.path() / "m.tsv").string(), "--k", "5", "--out", plan.string()}) == 0);
    std::ifstream in(plan);
    const auto fp = read_fold_plan(in);
    REQUIRE(fp.folds.size() == 5);
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(fp.folds[f] == std::vector<std::string>{"v" + std::to_string(2 * f + 1), "v" + std::to_string(2 * f + 2)});
    }
    const auto manifest = nlohmann::json::parse(slurp(plan.string() + ".run.json"));
    CHECK(manifest["command"] == "folds");
    CHECK(manifest["tool_version"] == kToolVersion);
    CHECK(manifest["config"]["k"] == "5");
  }

  TEST_CASE("environment overrides flags") {
    testing::TempDir dir("cli_env");
    {
      std::ofstream m(dir.path() / "m.tsv");
      for (int i = 1; i <= 6; ++i) m << "v" << i << "\tv" << i << ".ctv\t-\t" << i << "\t1\n";
    }
    ::setenv("CTSEG_K", "3", 1);
    const auto plan = dir.path() / "plan.tsv";
    const int rc = run({"folds", "--manifest", (dir.path() / "m.tsv").string(), "--out", plan.string()});
    ::unsetenv("CTSEG_K");
    REQUIRE(rc == 0);
    std::ifstream in(plan);
    CHECK(read_fold_plan(in).folds.size() == 3);
  }

  TEST_CASE("evaluate with prediction equal to truth") {
    testing::TempDir dir("cli_eval");
    const auto ph = testing::small_phantom(1, 20, 6);
    save_labels(ph.labels, dir.path() / "t.lbl");
    const auto report = dir.path() / "r.tsv";
    REQUIRE(run({"evaluate", "--pred", (dir.path() / "t.lbl").string(), "--truth", (dir.path() / "t.lbl").string(),
                 "--id", "case0", "--report", report.string()}) == 0);
    std::istringstream lines(slurp(report));
    std::string line;
    int dice_lines = 0;
    while (std::getline(lines, line)) {
      if (line.rfind("case0\t", 0) == 0) {
        ++dice_lines;
        CHECK(line.substr(line.rfind('\t') + 1) == "1");
      }
    }
    CHECK(dice_lines >= 3);
    CHECK(slurp(report).find("pooled-foreground") != std::string::npos);
  }

  TEST_CASE("synth is reproducible and records its seed") {
    testing::TempDir a("cli_synth_a");
    testing::TempDir b("cli_synth_b");
    for (const auto* d : {&a, &b}) {
      REQUIRE(run({"synth", "--out", d->path().string(), "--count", "3", "--size-min", "20", "--size-max", "20",
                   "--slices-min", "4", "--slices-max", "6", "--seed", "17"}) == 0);
    }
    CHECK(slurp(a.path() / "manifest.tsv") == slurp(b.path() / "manifest.tsv"));
    CHECK(slurp(a.path() / "ph001.ctv") == slurp(b.path() / "ph001.ctv"));
    const auto rm = nlohmann::json::parse(slurp(a.path() / "synth.run.json"));
    CHECK(rm["seeds"].dump().find("17") != std::string::npos);
  }

  TEST_CASE("selftest passes") {
    testing::TempDir d("cli_selftest");
    const auto rm = (d.path() / "selftest.run.json").string();
    CHECK(run({"--run-manifest", rm, "selftest"}) == 0);
    CHECK(std::filesystem::exists(rm));
  }
}
