#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "moose/checkpoint.hpp"
#include "moose/cli.hpp"
#include "moose/config.hpp"
#include "moose/evaluate.hpp"

using namespace moose;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  Workspace() : root(fs::temp_directory_path() / "moose_cli_test") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }

  fs::path write_config(const std::string& name, const std::string& extra = "") const {
    const fs::path p = root / name;
    std::ofstream os(p);
    os << "# tiny run\n"
       << "[paths]\n"
       << "data = " << (root / "data").string() << "\n"
       << "checkpoint = " << (root / "run" / "model.ckpt").string() << "\n"
       << "[data]\nimage_size = 32\nmin_objects = 4\nmax_objects = 5\nmin_object_size = 4\n"
       << "max_object_size = 8\nmin_anomaly_size = 4\nmax_anomaly_size = 10\n"
       << "train_size = 6\nval_size = 3\ntest_size = 3\n"
       << "[model]\nencoder_channels = 8\nbranch_channels = 4\nbranch_dilations = 1,2\n"
       << "output_stride = 4\nhead_projection_channels = 8\n"
       << "[probe]\nprojection_channels = 6\n"
       << "[train]\nepochs = 1\nbatch_size = 3\n"
       << "[probe_train]\nepochs = 1\nbatch_size = 3\n"
       << extra;
    return p;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  Workspace ws;
  const std::string cfg = ws.write_config("a.cfg").string();
  const std::string out = (ws.root / "o").string();
  CHECK(cli::run({}) == cli::kExitUsage);
  CHECK(cli::run({"frobnicate", "--out", out}) == cli::kExitUsage);
  CHECK(cli::run({"gen-data", "--config", cfg}) == cli::kExitUsage);
  CHECK(cli::run({"gen-data", "--out", out}) == cli::kExitUsage);
  CHECK(cli::run({"gen-data", "--config", (ws.root / "missing.cfg").string(), "--out", out}) ==
        cli::kExitUsage);
  CHECK(cli::run({"gen-data", "--config", cfg, "--out", out, "--set", "data.colour=3"}) == cli::kExitUsage);
  CHECK(cli::run({"gen-data", "--config", cfg, "--out", out, "--set", "data.image_size=abc"}) ==
        cli::kExitUsage);
  CHECK(cli::run({"eval", "--config", cfg, "--out", out, "--heads", "some"}) == cli::kExitUsage);
  CHECK(cli::run({"eval", "--config", cfg, "--out", out, "--score", "energy"}) == cli::kExitUsage);
  const fs::path bad = ws.write_config("bad.cfg", "[train]\nlearning_rte = 0.1\n");
  CHECK(cli::run({"train", "--config", bad.string(), "--out", out}) == cli::kExitUsage);
  CHECK(cli::run({"--help"}) == cli::kExitOk);
}

TEST_CASE("end to end on a tiny configuration") {
  Workspace ws;
  const std::string cfg = ws.write_config("run.cfg").string();
  const fs::path data = ws.root / "data", run = ws.root / "run";

  REQUIRE(cli::run({"gen-data", "--config", cfg, "--out", data.string()}) == cli::kExitOk);
  CHECK(fs::exists(data / "manifest.txt"));
  CHECK(fs::exists(data / "resolved_config.cfg"));

  // Training without the data directory configured fails at runtime, after the snapshot.
  const fs::path nodata = ws.write_config("nodata.cfg", "[paths]\ndata = " + (ws.root / "none").string() + "\n");
  CHECK(cli::run({"train", "--config", nodata.string(), "--out", (ws.root / "x").string()}) == cli::kExitRuntime);
  CHECK(fs::exists(ws.root / "x" / "resolved_config.cfg"));

  REQUIRE(cli::run({"train", "--config", cfg, "--out", run.string(), "--seed", "3"}) == cli::kExitOk);
  CHECK(fs::exists(run / "model.ckpt"));
  CHECK(fs::exists(run / "train_base.log"));
  CHECK(fs::exists(run / "train_probes.log"));
  CHECK(slurp(run / "resolved_config.cfg").find("seed = 3") != std::string::npos);
  CHECK(load_model(run / "model.ckpt").num_heads() == 3);

  const fs::path ev = ws.root / "eval";
  REQUIRE(cli::run({"eval", "--config", cfg, "--out", ev.string(), "--heads", "global", "--score", "msp"}) ==
          cli::kExitOk);
  const EvalReport r = load_report(ev / "eval_Ghead_msp.txt");
  CHECK(r.head_set == "global_only");
  CHECK(r.aupr >= 0.0);
  CHECK(r.aupr <= 1.0);
  CHECK(fs::exists(ev / "eval_Ghead_msp.json"));
  REQUIRE(cli::run({"eval", "--config", cfg, "--out", ev.string(), "--score", "h"}) == cli::kExitOk);
  CHECK(fs::exists(ev / "eval_MOoSe_h.txt"));

  REQUIRE(cli::run({"report", "--out", ev.string()}) == cli::kExitOk);
  const std::string table = slurp(ev / "table.md");
  CHECK(table.find("Ghead") != std::string::npos);
  CHECK(table.find("MOoSe") != std::string::npos);

  SUBCASE("a checkpoint with a different class count is rejected") {
    const fs::path other = ws.root / "other";
    const fs::path other_cfg =
        ws.write_config("other.cfg", "[paths]\ndata = " + other.string() + "\n[data]\nnum_foreground_classes = 5\n");
    REQUIRE(cli::run({"gen-data", "--config", other_cfg.string(), "--out", other.string()}) == cli::kExitOk);
    CHECK(cli::run({"eval", "--config", other_cfg.string(), "--out", (ws.root / "e2").string()}) ==
          cli::kExitRuntime);
  }
}

TEST_CASE("shipped configuration parses") {
  RunConfig cfg;
  cfg.load_file(fs::path(MOOSE_SOURCE_DIR) / "configs" / "default.cfg");
  CHECK_NOTHROW(cfg.check());
  CHECK(cfg.scene().train_size <= 600);
  CHECK(cfg.scene().image_size == 128);
  CHECK(cfg.get_ints("ablate.dilations") == cfg.pyramid(cfg.scene().num_classes()).branch_dilations);
}
