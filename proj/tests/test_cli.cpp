#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "reltopo/parameters.hpp"
#include "reltopo/run_config.hpp"

namespace fs = std::filesystem;
using namespace reltopo;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("reltopo_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(RELTOPO_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Tiny run so the end-to-end commands stay fast.
const char* kSmall = R"({"dataset_count": 3, "model": {"layers": 1, "lane_queries": 8, "te_queries": 4},
                         "train": {"steps": 4}})";

}  // namespace

TEST_CASE("cli: usage and config errors exit with the config code") {
  const auto d = scratch("usage");
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train --no-such-flag") == 2);
  write(d / "typo.json", R"({"ablation": {"plain_sa": true, "no_curve": true}})");
  CHECK(run("train --config " + (d / "typo.json").string() + " --out " + (d / "o").string()) == 2);
  CHECK_FALSE(fs::exists(d / "o" / "config.json"));
  CHECK(run("train --config " + (d / "missing.json").string()) == 2);
}

TEST_CASE("cli: generate writes the config echo and a manifest") {
  const auto d = scratch("generate");
  CHECK(run("generate --count 0 --seed 4 --out " + (d / "empty").string()) == 0);
  CHECK(fs::exists(d / "empty" / "config.json"));
  const auto manifest = nlohmann::json::parse(slurp(d / "empty" / "manifest.json"));
  CHECK(manifest.dump().find("scene") != std::string::npos);
  const auto echo = nlohmann::json::parse(slurp(d / "empty" / "config.json"));
  CHECK(echo["seed"] == 4);
  CHECK(run("generate --count 2 --out " + (d / "a").string()) == 0);
  CHECK(run("generate --count 2 --out " + (d / "b").string()) == 0);
  for (const auto& e : fs::directory_iterator(d / "a")) {
    CHECK(slurp(e.path()) == slurp(d / "b" / e.path().filename()));
  }
}

TEST_CASE("cli: unreadable data exits with the data code") {
  const auto d = scratch("data");
  write(d / "c.json", kSmall);
  CHECK(run("train --config " + (d / "c.json").string() + " --data " + (d / "nowhere").string() + " --out " +
            (d / "o").string()) == 3);
  CHECK(run("generate --count 1 --out /proc/reltopo_cannot_write") == 3);
}

TEST_CASE("cli: --steps 0 leaves the checkpoint at initialisation; flags change only the echo field") {
  const auto d = scratch("train0");
  write(d / "c.json", kSmall);
  const std::string cfg = " --config " + (d / "c.json").string();
  REQUIRE(run("train --steps 0" + cfg + " --out " + (d / "zero").string()) == 0);
  const RunConfig rc = load_run_config(d / "zero" / "config.json");
  CHECK(rc.train.steps == 0);
  Model fresh = Model::create(rc.resolved_model(), rc.seed);
  save_checkpoint(fresh.params, d / "fresh.bin");
  CHECK(slurp(d / "fresh.bin") == slurp(d / "zero" / "checkpoint.bin"));

  REQUIRE(run("train --steps 0 --plain-sa" + cfg + " --out " + (d / "flag").string()) == 0);
  const auto patch = nlohmann::json::diff(nlohmann::json::parse(slurp(d / "zero" / "config.json")),
                                          nlohmann::json::parse(slurp(d / "flag" / "config.json")));
  REQUIRE(patch.size() == 1);
  CHECK(patch[0]["path"] == "/ablation/plain_sa");
}

TEST_CASE("cli: train then eval twice gives identical reports; mismatched config is a data error") {
  const auto d = scratch("eval");
  write(d / "c.json", kSmall);
  const std::string cfg = " --config " + (d / "c.json").string();
  REQUIRE(run("generate --count 3" + cfg + " --out " + (d / "data").string()) == 0);
  REQUIRE(run("train" + cfg + " --data " + (d / "data").string() + " --out " + (d / "t").string()) == 0);
  CHECK(fs::exists(d / "t" / "train.log"));
  const std::string ev = "eval" + cfg + " --checkpoint " + (d / "t" / "checkpoint.bin").string() + " --data " +
                         (d / "data").string() + " --out ";
  REQUIRE(run(ev + (d / "e1").string()) == 0);
  REQUIRE(run(ev + (d / "e2").string()) == 0);
  CHECK(slurp(d / "e1" / "metrics.txt") == slurp(d / "e2" / "metrics.txt"));
  CHECK(slurp(d / "e1" / "pr_lanes.svg").rfind("<svg", 0) == 0);
  CHECK(fs::exists(d / "e1" / "lane_scores.svg"));

  write(d / "wide.json", R"({"dataset_count": 3, "model": {"layers": 1, "lane_queries": 8, "te_queries": 4,
                             "channels": 16, "heads": 2}})");
  CHECK(run("eval --config " + (d / "wide.json").string() + " --checkpoint " + (d / "t" / "checkpoint.bin").string() +
            " --data " + (d / "data").string() + " --out " + (d / "e3").string()) == 3);
}

TEST_CASE("cli: a diverging run exits with the numeric code") {
  const auto d = scratch("numeric");
  write(d / "c.json", R"({"dataset_count": 2, "model": {"layers": 1, "lane_queries": 8, "te_queries": 4},
                          "train": {"steps": 50, "lr": 1e200, "min_lr": 1e200}})");
  CHECK(run("train --config " + (d / "c.json").string() + " --out " + (d / "o").string()) == 4);
}

TEST_CASE("cli: report and gradcheck exit codes") {
  const auto d = scratch("report");
  const std::string table = std::string(RELTOPO_FIXTURE_DIR) + "/table1.json";
  CHECK(run("report --table " + table + " --out " + (d / "r").string()) == 0);
  CHECK(fs::exists(d / "r" / "report.md"));
  // Some published rows do not reproduce within 0.05, so strict mode fails.
  CHECK(run("report --strict --table " + table + " --out " + (d / "s").string()) == 5);
  CHECK(run("report --out " + (d / "n").string()) == 2);
  CHECK(run("gradcheck --cases 1 --out " + (d / "g").string()) == 0);
  CHECK(slurp(d / "g" / "gradcheck.txt").find("max_rel_err") != std::string::npos);
}

TEST_CASE("cli: ablate emits one row per variant and a seed footer") {
  const auto d = scratch("ablate");
  write(d / "c.json", R"({"dataset_count": 4, "holdout_fraction": 0.25,
                          "model": {"layers": 1, "lane_queries": 8, "te_queries": 4}, "train": {"steps": 2}})");
  REQUIRE(run("ablate --variants full --seeds 2 --config " + (d / "c.json").string() + " --out " + (d / "a").string()) == 0);
  const std::string md = slurp(d / "a" / "ablation.md");
  CHECK(md.find("| full | 2 |") != std::string::npos);
  CHECK(md.find("| baseline |") == std::string::npos);
  CHECK(md.find("seeds: 0 1") != std::string::npos);
  CHECK(md.find("train scenes 3, held-out scenes 1") != std::string::npos);
}
