#include <gtest/gtest.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "app.hpp"
#include "cil/incremental.hpp"
#include "cil/io_util.hpp"
#include "support.hpp"

using namespace cil;
using cil::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cil");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = app::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Small, fast settings shared by the command tests.
std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* s : {"dataset.synth.num_classes=6", "dataset.synth.per_class=30", "dataset.synth.dim=8",
                        "base.epochs_max=6", "base.patience=3", "step.phase1.epochs=2", "step.phase2.epochs_max=3",
                        "step.phase2.patience=2", "exemplars.K=12", "backbone.hidden=[16]"}) {
    args.push_back("--set");
    args.push_back(s);
  }
  return args;
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

// Drops the output directory and thread count echoed in config blocks.
json without_placement(json j) {
  if (j.is_object()) {
    j.erase("out");
    j.erase("jobs");
    for (auto& [k, v] : j.items()) v = without_placement(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = without_placement(v);
  }
  return j;
}

}  // namespace

TEST(Cli, DefaultConfigResolves) {
  const auto cfg = app::parse_config(app::resolve_config(json::object(), {}));
  EXPECT_EQ(cfg.schedule, "4-2-2-2");
  EXPECT_EQ(cfg.exemplar_capacity, 100u);
  EXPECT_EQ(cfg.exemplar_grid, (std::vector<std::size_t>{20, 50, 100, 200, 300, 400}));
  EXPECT_TRUE(cfg.step.losses.ce_new && cfg.step.losses.ce_old && cfg.step.losses.kd_new && cfg.step.losses.kd_old);
  EXPECT_EQ(cfg.step.losses.temperature, 2.0);
  EXPECT_GT(cfg.step.phase1.lr, cfg.step.phase2.lr);
}

TEST(Cli, OverridesAndUnknownKeys) {
  const auto j = app::resolve_config(json::object(), {"step.losses.kd_old=false", "schedule=3-3", "out=somewhere"});
  EXPECT_EQ(j["step"]["losses"]["kd_old"], false);
  EXPECT_EQ(j["schedule"], "3-3");
  EXPECT_EQ(j["out"], "somewhere");
  EXPECT_THROW(app::resolve_config(json::object(), {"step.lossez.kd_old=false"}), ValidationError);
  EXPECT_THROW(app::resolve_config(json{{"bogus", 1}}, {}), ValidationError);
  EXPECT_THROW(app::resolve_config(json::object(), {"novalue"}), ValidationError);
}

TEST(Cli, UnknownKeyExitsOne) {
  TempDir tmp("cli_unknown");
  const auto r = cli({"run-cil", "--out", (tmp / "o").string(), "--set", "base.epochz=3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown config key"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "o"));
}

TEST(Cli, MissingDatasetExitsThree) {
  TempDir tmp("cli_missing");
  const auto r = cli({"run-cil", "--out", (tmp / "o").string(), "--set", "dataset.path=\"" + (tmp / "nope").string() + "\""});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_FALSE(fs::exists(tmp / "o"));
}

TEST(Cli, BadArgumentsExitOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"run-cil", "--heads", "5,x"}).code, 1);
  EXPECT_EQ(cli({"run-cil", "--schedule", "4-2-x"}).code, 1);
}

TEST(Cli, HeadsFlagBuildsPlan) {
  TempDir tmp("cli_heads");
  auto r = cli(small({"train-base", "--schedule", "5-1", "--heads", "5,4,3,2", "--out", (tmp / "a").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(tmp / "a" / "train_base.json");
  EXPECT_EQ(rep["plan"]["tasks"].size(), 4u);
  EXPECT_EQ(rep["plan_label"], "[5,4,3,2]");
  EXPECT_TRUE(fs::exists(tmp / "a" / "base_model.cilm"));
  EXPECT_TRUE(fs::exists(tmp / "a" / "train_log.csv"));

  // A head larger than the base set is rejected before anything is written.
  r = cli(small({"train-base", "--schedule", "5-1", "--heads", "6", "--out", (tmp / "b").string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(tmp / "b"));
}

TEST(Cli, SnapshotThenRunCil) {
  TempDir tmp("cli_snap");
  ASSERT_EQ(cli(small({"train-base", "--schedule", "2-2-2", "--seed", "4", "--out", (tmp / "base").string()})).code, 0);
  const auto snap = (tmp / "base" / "base_model.cilm").string();
  auto r = cli(small({"run-cil", "--schedule", "2-2-2", "--seed", "4", "--snapshot", snap, "--out", (tmp / "cil").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(tmp / "cil" / "report.json");
  ASSERT_EQ(rep["runs"].size(), 1u);
  EXPECT_EQ(rep["runs"][0]["steps"].size(), 3u);
  EXPECT_TRUE(fs::exists(tmp / "cil" / "steps.csv"));
  EXPECT_TRUE(fs::exists(tmp / "cil" / "confusion_seed4.csv"));

  // Same file, different seed: the base classes no longer match.
  r = cli(small({"run-cil", "--schedule", "2-2-2", "--seed", "5", "--snapshot", snap, "--out", (tmp / "bad").string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(tmp / "bad"));
  r = cli(small({"run-cil", "--schedule", "2-2-2", "--snapshot", (tmp / "missing.cilm").string(), "--out",
                 (tmp / "bad").string()}));
  EXPECT_EQ(r.code, 3);
}

TEST(Cli, RunCilIsReproducibleAcrossJobs) {
  TempDir tmp("cli_repro");
  auto base = small({"run-cil", "--schedule", "2-2-2", "--set", "seeds=[0,1]"});
  auto a = base, b = base, c = base;
  a.insert(a.end(), {"--out", (tmp / "a").string(), "--jobs", "1"});
  b.insert(b.end(), {"--out", (tmp / "b").string(), "--jobs", "1"});
  c.insert(c.end(), {"--out", (tmp / "c").string(), "--jobs", "2"});
  ASSERT_EQ(cli(a).code, 0);
  ASSERT_EQ(cli(b).code, 0);
  ASSERT_EQ(cli(c).code, 0);
  const auto ja = without_placement(incremental::strip_timing(read_json(tmp / "a" / "report.json")));
  const auto jb = without_placement(incremental::strip_timing(read_json(tmp / "b" / "report.json")));
  const auto jc = without_placement(incremental::strip_timing(read_json(tmp / "c" / "report.json")));
  EXPECT_EQ(ja.dump(), jb.dump());
  EXPECT_EQ(ja.dump(), jc.dump());
  EXPECT_EQ(io::read_file(tmp / "a" / "steps.csv"), io::read_file(tmp / "c" / "steps.csv"));
}

TEST(Cli, AblationHasSixRows) {
  TempDir tmp("cli_ablate");
  const auto r = cli(small({"ablate-losses", "--schedule", "2-2-2", "--out", tmp.path().string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = io::read_file(tmp / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "losses,step0,step1,step2,avg");
  EXPECT_NE(csv.find("\nCE_N+CE_O+KD_N+KD_O,"), std::string::npos);
}

TEST(Cli, AblationNeedsExemplars) {
  TempDir tmp("cli_ablate_k");
  auto args = small({"ablate-losses", "--schedule", "2-2-2", "--out", tmp.path().string()});
  args.insert(args.end(), {"--set", "exemplars.K=0"});
  const auto r = cli(args);
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, HeadSweepDefaultGrid) {
  TempDir tmp("cli_sweep");
  const auto r = cli(small({"sweep-heads", "--schedule", "5-1", "--out", tmp.path().string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = io::read_file(tmp / "heads_accuracy.csv");
  for (const char* label : {"\"[5]\"", "\"[5,4]\"", "\"[5,4,3]\"", "\"[5,4,3,2]\""}) {
    EXPECT_NE(csv.find(std::string("decreasing,") + label), std::string::npos) << label;
  }
  EXPECT_NE(csv.find("fixed,"), std::string::npos);
  const auto times = io::read_file(tmp / "heads_time.csv");
  std::istringstream lines(times);
  std::string line;
  std::getline(lines, line);
  int rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    EXPECT_GT(std::stod(line.substr(line.rfind(',') + 1)), 0.0) << line;
  }
  EXPECT_EQ(rows, std::count(csv.begin(), csv.end(), '\n') - 1);
}

TEST(Cli, ExemplarSweep) {
  TempDir tmp("cli_exsweep");
  const auto r = cli(small({"sweep-exemplars", "--schedule", "3-3", "--heads", "3,2", "--set", "sweep.exemplar_grid=[6,12]",
                            "--out", tmp.path().string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = io::read_file(tmp / "exemplars_accuracy.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("single_task,\"[3]\",6,"), std::string::npos);
  EXPECT_NE(csv.find("configured,\"[3,2]\",12,"), std::string::npos);
}

TEST(Cli, GradcheckExitCodes) {
  TempDir tmp("cli_grad");
  auto r = cli({"gradcheck", "--out", tmp.path().string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_TRUE(read_json(tmp / "gradcheck.json")["passed"].get<bool>());
  r = cli({"gradcheck", "--inject-fault", "conv2d"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("FAIL conv2d"), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "--inject-fault", "nope"}).code, 1);
}

TEST(Cli, SynthWritesLoadableDataset) {
  TempDir tmp("cli_synth");
  ASSERT_EQ(cli(small({"synth", "--out", (tmp / "ds").string()})).code, 0);
  const auto ds = data::load_dataset(tmp / "ds");
  EXPECT_EQ(ds.num_classes(), 6u);
  EXPECT_EQ(ds.num_samples(), 180u);
  // The written dataset drives run-cil through dataset.path.
  const auto r = cli(small({"run-cil", "--schedule", "2-2-2", "--set", "dataset.path=\"" + (tmp / "ds").string() + "\"",
                            "--out", (tmp / "o").string()}));
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, BackboneOverrides) {
  auto j = app::resolve_config(json::object(), {"backbone.hidden=[8]"});
  EXPECT_EQ(j["backbone"], (json{{"type", "mlp"}, {"hidden", {8}}}));
  // Switching the type replaces the block instead of mixing members.
  j = app::resolve_config(json{{"backbone", {{"type", "conv"}, {"channels", {4, 4, 8, 8}}}}}, {});
  EXPECT_FALSE(j["backbone"].contains("hidden"));
  EXPECT_EQ(j["backbone"]["type"], "conv");
}

TEST(Cli, ScheduleBeyondDatasetRejected) {
  TempDir tmp("cli_sched");
  const auto r = cli(small({"run-cil", "--schedule", "4-2-2", "--out", tmp.path().string() + "/o"}));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(tmp / "o"));
}
