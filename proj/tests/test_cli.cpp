#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vscd/config.hpp"
#include "vscd/image.hpp"
#include "vscd/model.hpp"
#include "vscd/trainer.hpp"

using namespace vscd;
namespace fs = std::filesystem;

namespace {

const std::string kTinyModel =
    " --set model.frame_h=64 --set model.frame_w=64 --set model.encoder.token_dim=32"
    " --set model.corr.change_channels=16 --set model.corr.reduced_channels=16";
const std::string kTinyData =
    " --set data.layouts=2 --set data.scenes_per_layout=3 --set data.frame_h=64"
    " --set data.frame_w=64 --set data.traj_len_min=8 --set data.traj_len_max=12"
    " --set data.test_layouts=1";

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args, const fs::path& workdir) {
  fs::path log = workdir / "cmd_output.txt";
  std::string cmd = std::string(VSCD_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  CmdResult res;
  res.exit_code = WEXITSTATUS(status);
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  res.output = ss.str();
  return res;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string extract_manifest_hash(const std::string& output) {
  auto pos = output.find("manifest_hash ");
  REQUIRE(pos != std::string::npos);
  return output.substr(pos + 14, 16);
}

// one shared tiny dataset + checkpoint for the heavier subcommand tests
struct Fixture {
  fs::path dir;
  std::string data;
  std::string ckpt;
  Fixture() {
    dir = fresh_dir("vscd_cli_fixture");
    data = (dir / "data").string();
    auto gen = run_cli("gen --out " + data + kTinyData + " --seed 7", dir);
    REQUIRE(gen.exit_code == 0);
    auto train = run_cli("train --out " + (dir / "run").string() + " --data " + data + kTinyModel +
                             " --set train.epochs=2 --tkey 3 --seed 3",
                         dir);
    REQUIRE(train.exit_code == 0);
    ckpt = (dir / "run" / "checkpoint.ckpt").string();
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("gen: cycle arithmetic, determinism, and atomic failure on invalid strata") {
  auto dir = fresh_dir("vscd_cli_gen");
  auto a = run_cli("gen --out " + (dir / "a").string() + kTinyData + " --seed 11", dir);
  CHECK(a.exit_code == 0);
  CHECK(a.output.find("generated 6 pairs") != std::string::npos);
  auto b = run_cli("gen --out " + (dir / "b").string() + kTinyData + " --seed 11", dir);
  CHECK(extract_manifest_hash(a.output) == extract_manifest_hash(b.output));
  auto c = run_cli("gen --out " + (dir / "c").string() + kTinyData + " --seed 12", dir);
  CHECK(extract_manifest_hash(a.output) != extract_manifest_hash(c.output));

  // invalid strata: config error exit code, nothing written
  auto bad = run_cli("gen --out " + (dir / "bad").string() + kTinyData +
                         " --set data.change_bins=[[50,60,1.0]]",
                     dir);
  CHECK(bad.exit_code == 2);
  CHECK_FALSE(fs::exists(dir / "bad" / "pairs"));
  fs::remove_all(dir);
}

TEST_CASE("train: zero epochs preserves initialization; missing data errors out") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_train0");
  auto r = run_cli("train --out " + (dir / "run0").string() + " --data " + fx.data + kTinyModel +
                       " --set train.epochs=0 --tkey 3",
                   dir);
  CHECK(r.exit_code == 0);

  // checkpoint equals a fresh model built from the same effective config
  json cfg = resolve_config("", {"model.frame_h=64", "model.frame_w=64",
                                 "model.encoder.token_dim=32", "model.corr.change_channels=16",
                                 "model.corr.reduced_channels=16"});
  VscdNet<float> fresh(model_config_from_json(cfg.at("model")));
  VscdNet<float> loaded(model_config_from_json(cfg.at("model")));
  auto header = load_checkpoint((dir / "run0" / "checkpoint.ckpt").string(), loaded, json());
  CHECK(header.at("step") == 0);
  for (const auto& [name, t] : fresh.params().all()) {
    bool identical = t.data == loaded.params().get(name).data;
    CHECK(identical);
  }

  auto no_data = run_cli("train --out " + (dir / "x").string() + kTinyModel, dir);
  CHECK(no_data.exit_code == 2);  // no dataset root given
  auto bad_data = run_cli("train --out " + (dir / "y").string() + " --data /nonexistent" +
                              kTinyModel,
                          dir);
  CHECK(bad_data.exit_code == 3);  // root given but unreadable
  fs::remove_all(dir);
}

TEST_CASE("train: overfit smoke config reduces the loss") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_overfit");
  auto r = run_cli("train --out " + (dir / "run").string() + " --data " + fx.data + kTinyModel +
                       " --set train.epochs=10 --set train.learning_rate=0.002 --tkey 3",
                   dir);
  CHECK(r.exit_code == 0);
  std::ifstream log(dir / "run" / "train_log.jsonl");
  REQUIRE(log.good());
  std::string line, first_line, last_line;
  while (std::getline(log, line))
    if (!line.empty()) {
      if (first_line.empty()) first_line = line;
      last_line = line;
    }
  double first = json::parse(first_line).at("loss");
  double last = json::parse(last_line).at("loss");
  CHECK(last < first);
  fs::remove_all(dir);
}

TEST_CASE("infer: mask count, threshold monotonicity, byte-identical reruns") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_infer");
  std::string base = "infer --data " + fx.data + " --checkpoint " + fx.ckpt + kTinyModel +
                     " --tkey 3 --pair-id 3";
  auto a = run_cli(base + " --out " + (dir / "m50").string() + " --threshold 0.5", dir);
  CHECK(a.exit_code == 0);
  int mask_files = 0;
  for (const auto& e : fs::directory_iterator(dir / "m50"))
    mask_files += e.path().extension() == ".pgm";
  CHECK(mask_files == 3);  // one per keyframe

  auto b = run_cli(base + " --out " + (dir / "m99").string() + " --threshold 0.99", dir);
  CHECK(b.exit_code == 0);
  for (int t = 0; t < 3; ++t) {
    Image lo = read_pnm((dir / "m50" / frame_file_name("mask", t, "pgm")).string());
    Image hi = read_pnm((dir / "m99" / frame_file_name("mask", t, "pgm")).string());
    for (size_t i = 0; i < lo.data.size(); ++i)
      if (hi.data[i]) CHECK(lo.data[i]);  // tau=0.99 masks are subsets of tau=0.5 masks
  }

  auto c = run_cli(base + " --out " + (dir / "m50b").string() + " --threshold 0.5", dir);
  CHECK(c.exit_code == 0);
  for (int t = 0; t < 3; ++t) {
    Image x = read_pnm((dir / "m50" / frame_file_name("mask", t, "pgm")).string());
    Image y = read_pnm((dir / "m50b" / frame_file_name("mask", t, "pgm")).string());
    CHECK(x.data == y.data);
  }
  fs::remove_all(dir);
}

TEST_CASE("eval: report files, schema, per-frame CSV rows, exit codes") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_eval");
  auto r = run_cli("eval --out " + (dir / "e").string() + " --data " + fx.data +
                       " --checkpoint " + fx.ckpt + kTinyModel + " --tkey 3 --split all",
                   dir);
  CHECK(r.exit_code == 0);
  std::ifstream f(dir / "e" / "report.json");
  REQUIRE(f.good());
  json rep = json::parse(f);
  for (const char* key : {"overall_f1", "frames", "by_length", "by_change_count", "by_size",
                          "ambiguity", "taxonomy", "f1_vs_threshold", "anomaly_scores"})
    CHECK(rep.contains(key));
  // 6 pairs x 3 keyframes
  CHECK(rep.at("frames").get<int>() == 18);
  std::ifstream csv(dir / "e" / "frames.csv");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) rows += !line.empty();
  CHECK(rows == 19);  // header + one row per scored frame

  auto bad = run_cli("eval --out " + (dir / "bad").string() + " --data " + fx.data +
                         " --checkpoint /nonexistent.ckpt" + kTinyModel + " --tkey 3",
                     dir);
  CHECK(bad.exit_code == 3);
  fs::remove_all(dir);
}

TEST_CASE("unknown config keys are rejected with the usage exit code") {
  auto dir = fresh_dir("vscd_cli_unknown");
  auto r = run_cli("gen --out " + (dir / "d").string() + " --set data.nonexistent=1", dir);
  CHECK(r.exit_code == 2);
  auto r2 = run_cli("gen --out " + (dir / "d").string() + " --set typo=1", dir);
  CHECK(r2.exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("sweep: one-at-a-time grid rows plus ablation toggles") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_sweep");
  std::string common = " --data " + fx.data + kTinyModel +
                       " --set train.epochs=1 --tkey 3 --set model.corr.window_k=3";
  auto r = run_cli("sweep --out " + (dir / "s").string() + common +
                       " --grid '{\"model.corr.window_k\":[5]}' --ablations --parallel 2",
                   dir);
  CHECK(r.exit_code == 0);
  std::ifstream csv(dir / "s" / "table.csv");
  REQUIRE(csv.good());
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(csv, line))
    if (!line.empty()) rows.push_back(line);
  // header + default + 1 grid row + 4 ablations
  CHECK(rows.size() == 7);
  CHECK(fs::exists(dir / "s" / "run_default" / "report.json"));
  CHECK(fs::exists(dir / "s" / "run_wo_cf_csp" / "checkpoint.ckpt"));

  // empty grid: default run only
  auto r2 = run_cli("sweep --out " + (dir / "s2").string() + common, dir);
  CHECK(r2.exit_code == 0);
  std::ifstream csv2(dir / "s2" / "table.csv");
  rows.clear();
  while (std::getline(csv2, line))
    if (!line.empty()) rows.push_back(line);
  CHECK(rows.size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("report: plot and table artifacts derived from an eval directory") {
  auto& fx = fixture();
  auto dir = fresh_dir("vscd_cli_report");
  auto e = run_cli("eval --out " + (dir / "e").string() + " --data " + fx.data +
                       " --checkpoint " + fx.ckpt + kTinyModel + " --tkey 3 --split test",
                   dir);
  REQUIRE(e.exit_code == 0);
  auto r = run_cli("report --eval " + (dir / "e").string() + " --out " + (dir / "p").string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "p" / "f1_vs_threshold.csv"));
  CHECK(fs::exists(dir / "p" / "f1_vs_threshold.svg"));
  CHECK(fs::exists(dir / "p" / "tables.md"));
  int anomaly_files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "p")) {
    std::string name = entry.path().filename().string();
    anomaly_files += name.rfind("anomaly_pair", 0) == 0;
  }
  CHECK(anomaly_files == 3);  // one per test pair

  std::ifstream md(dir / "p" / "tables.md");
  std::string line;
  int length_rows = 0;
  bool in_length = false;
  while (std::getline(md, line)) {
    if (line.rfind("## By video length", 0) == 0) in_length = true;
    else if (line.rfind("## ", 0) == 0) in_length = false;
    else if (in_length && line.rfind("| ", 0) == 0 && line.find("bin") == std::string::npos &&
             line.find("---") == std::string::npos)
      ++length_rows;
  }
  CHECK(length_rows == 3);  // one row per length bin
  fs::remove_all(dir);
}
