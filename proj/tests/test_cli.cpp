#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "kgl/cli.hpp"
#include "test_util.hpp"

using namespace kgl;
using testutil::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
  json error() const { return json::parse(err.substr(0, err.find('\n'))); }
};

Result kglnet(std::vector<std::string> args) {
  args.insert(args.begin(), "kglnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

/// Small training and evaluation packs shared by the tests in a directory.
struct Packs {
  TempDir dir{"cli"};
  std::string train = (dir / "train").string(), eval = (dir / "eval").string();
  Packs() {
    EXPECT_EQ(kglnet({"synth", "--out", train, "--n", "64", "--seed", "1"}).code, 0);
    EXPECT_EQ(kglnet({"synth", "--out", eval, "--n", "48", "--seed", "2", "--split", "test"}).code, 0);
  }
};

const std::vector<std::string> kTiny = {"--width", "0.125", "--epochs", "1", "--batch-size", "16"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

}  // namespace

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(kglnet({"--help"}).code, 0);
  const auto v = kglnet({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_EQ(v.out, std::string(cli::kVersion) + "\n");
}

TEST(Cli, UsageErrorsExitTwo) {
  auto r = kglnet({});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.error()["error"]["kind"], "usage");
  r = kglnet({"train", "--bogus"});
  EXPECT_EQ(r.code, 2);
  r = kglnet({"train", "--width", "0.125"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.error()["error"]["exit_code"], 2);
  EXPECT_NE(r.error()["error"]["message"].get<std::string>().find("--data"), std::string::npos);
  EXPECT_EQ(kglnet({"train", "--data", "x", "--arch", "Z9"}).code, 2);
  EXPECT_EQ(kglnet({"train", "--data", "x", "--schedule", "step"}).code, 2);
}

TEST(Cli, MissingPackExitsThree) {
  TempDir dir("nopack");
  const auto r = kglnet(with_tiny({"train", "--data", (dir / "none").string(), "--out", (dir / "run").string()}));
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.error()["error"]["kind"], "data");
  EXPECT_TRUE(fs::exists(dir / "run" / "error.json"));
}

TEST(Cli, DefaultsAreTheReferenceSettings) {
  TempDir dir("defaults");
  ASSERT_EQ(kglnet({"synth", "--out", (dir / "p").string(), "--n", "256"}).code, 0);
  const auto r = kglnet({"train", "--data", (dir / "p").string(), "--out", (dir / "run").string(), "--max-steps", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = read_json(dir / "run" / cli::kRunManifest);
  const auto& t = m["config"]["train"];
  EXPECT_EQ(t["batch_size"], 256);
  EXPECT_EQ(t["epochs"], 100);
  EXPECT_EQ(t["lr_feature"], 5e-3);
  EXPECT_EQ(t["lr_metric_branch"], 5e-5);
  EXPECT_EQ(t["weights"]["alpha"], 1.0);
  EXPECT_EQ(t["weights"]["beta"], 1.0);
  EXPECT_EQ(t["schedule"], "none");
  EXPECT_EQ(t["use_hnsm"], true);
  EXPECT_EQ(t["use_fgl"], true);
  const auto& a = m["config"]["architecture"];
  EXPECT_EQ(a["preset"], "C3");
  EXPECT_EQ(a["descriptor_dim"], 128);
  EXPECT_EQ(a["width"], 1.0);
  EXPECT_EQ(m["versions"]["checkpoint_format"], kCheckpointVersion);
  EXPECT_EQ(m["data"]["train_digest"], pack_digest(load_patch_pack(dir / "p")));
}

TEST(Cli, FixedSeedGivesIdenticalManifestAndLog) {
  Packs p;
  for (const char* run : {"r1", "r2"})
    ASSERT_EQ(kglnet(with_tiny({"train", "--data", p.train, "--seed", "5", "--out", (p.dir / run).string()})).code, 0);
  EXPECT_EQ(slurp(p.dir / "r1" / cli::kRunManifest), slurp(p.dir / "r2" / cli::kRunManifest));
  EXPECT_EQ(slurp(p.dir / "r1" / "train_log.csv"), slurp(p.dir / "r2" / "train_log.csv"));
  EXPECT_EQ(read_lines(p.dir / "r1" / "train_log.csv").size(), 5u);
}

TEST(Cli, ConfigFileThenFlags) {
  TempDir dir("config");
  std::ofstream(dir / "c.json") << R"({"architecture": {"preset": "B2", "width": 0.25},
                                      "train": {"epochs": 3, "batch_size": 32, "schedule": "cosine"},
                                      "data": {"train": "somewhere"}, "eval": {"head": "descriptor"}})";
  const auto r = kglnet({"train", "--config", (dir / "c.json").string(), "--epochs", "1", "--print-config"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["train"]["epochs"], 1);
  EXPECT_EQ(j["train"]["batch_size"], 32);
  EXPECT_EQ(j["train"]["schedule"], "cosine");
  EXPECT_EQ(j["architecture"]["preset"], "B2");
  EXPECT_EQ(j["architecture"]["width"], 0.25);
  EXPECT_EQ(j["data"]["train"], "somewhere");
  EXPECT_EQ(j["eval"]["head"], "descriptor");

  // The resolved config is itself a valid config file.
  std::ofstream(dir / "resolved.json") << r.out;
  const auto again = kglnet({"train", "--config", (dir / "resolved.json").string(), "--print-config"});
  EXPECT_EQ(json::parse(again.out), j);
}

TEST(Cli, ConfigFileRejectsUnknownKeys) {
  TempDir dir("unknown");
  std::ofstream(dir / "c.json") << R"({"train": {"epochs": 3, "learning_rate": 0.1}})";
  auto r = kglnet({"train", "--config", (dir / "c.json").string(), "--data", "x"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos);
  std::ofstream(dir / "d.json") << R"({"train": {"epochs": "many"}})";
  EXPECT_EQ(kglnet({"train", "--config", (dir / "d.json").string(), "--data", "x"}).code, 2);
  std::ofstream(dir / "e.json") << "{ broken";
  EXPECT_EQ(kglnet({"train", "--config", (dir / "e.json").string(), "--data", "x"}).code, 2);
}

TEST(Cli, DivergenceExitsFour) {
  Packs p;
  const auto out = p.dir / "div";
  const auto r = kglnet(with_tiny({"train", "--data", p.train, "--out", out.string(), "--lr-feature", "1e30",
                                   "--lr-metric", "1e30"}));
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_EQ(r.error()["error"]["kind"], "divergence");
  EXPECT_GE(r.error()["error"]["step"].get<long>(), 1);
  const auto doc = read_json(out / "error.json");
  EXPECT_EQ(doc["error"]["exit_code"], 4);
}

TEST(Cli, TrainEvalInspectRoundTrip) {
  Packs p;
  const auto run = p.dir / "run";
  auto r = kglnet(with_tiny({"train", "--data", p.train, "--eval", p.eval, "--out", run.string(), "--arch", "A1"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = load_report(run / "eval" / "report.json");
  EXPECT_EQ(report.subsets.size(), 1u);
  EXPECT_NE(r.out.find("FPR95"), std::string::npos);

  const auto ckpt = (run / "checkpoints" / "final.ckpt").string();
  r = kglnet({"eval", "--ckpt", ckpt, "--data", p.eval, "--out", (p.dir / "ev").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(load_report(p.dir / "ev" / "report.json").mean, report.mean);

  r = kglnet({"inspect", "--ckpt", ckpt, "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["architecture"]["preset"], "A1");
  EXPECT_EQ(j["checkpoint"]["step"], 4);
  EXPECT_EQ(kglnet({"inspect"}).code, 2);
}

TEST(Cli, ResumeExtendsTraining) {
  Packs p;
  ASSERT_EQ(kglnet(with_tiny({"train", "--data", p.train, "--out", (p.dir / "a").string()})).code, 0);
  const auto r = kglnet({"train", "--data", p.train, "--resume", (p.dir / "a" / "checkpoints" / "final.ckpt").string(),
                         "--epochs", "2", "--out", (p.dir / "b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(p.dir / "b" / "checkpoints" / "final.ckpt").step, 8);
  EXPECT_TRUE(fs::exists(p.dir / "b" / "checkpoints" / "epoch_002.ckpt"));
  EXPECT_FALSE(fs::exists(p.dir / "b" / "checkpoints" / "epoch_001.ckpt"));
}

TEST(Cli, IdenticalSpectraEvalIsPerfect) {
  TempDir dir("sev0");
  ASSERT_EQ(kglnet({"synth", "--out", (dir / "p").string(), "--n", "64", "--severity", "0", "--noise", "0"}).code, 0);
  ASSERT_EQ(kglnet(with_tiny({"train", "--data", (dir / "p").string(), "--arch", "A1", "--max-steps", "1", "--out",
                              (dir / "run").string()}))
                .code,
            0);
  const auto r = kglnet({"eval", "--ckpt", (dir / "run" / "checkpoints" / "final.ckpt").string(), "--data",
                         (dir / "p").string(), "--head", "descriptor", "--out", (dir / "ev").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_report(dir / "ev" / "report.json").mean, 0.0);
}

TEST(Cli, SynthIsByteIdentical) {
  TempDir dir("synth");
  for (const char* o : {"x", "y"})
    ASSERT_EQ(kglnet({"synth", "--out", (dir / o).string(), "--n", "40", "--seed", "9"}).code, 0);
  for (const char* f : {"manifest.json", "a.bin", "b.bin", "labels.csv", "run.json"})
    EXPECT_EQ(slurp(dir / "x" / f), slurp(dir / "y" / f)) << f;
  EXPECT_EQ(kglnet({"synth", "--out", (dir / "z").string(), "--severity", "2"}).code, 2);
}

TEST(Cli, ConvertWritesOnePackPerSubset) {
  TempDir dir("convert");
  for (const char* subset : {"field", "urban"}) {
    fs::create_directories(dir / "src" / subset);
    for (int i = 0; i < 3; ++i) {
      GrayImage im{128, 64, std::vector<std::uint8_t>(128 * 64, static_cast<std::uint8_t>(40 * i))};
      write_png_gray(dir / "src" / subset / ("p" + std::to_string(i) + ".png"), im);
    }
  }
  auto r = kglnet({"convert", "--src", (dir / "src").string(), "--layout", "side_by_side", "--out",
                   (dir / "packs").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto packs = load_pack_collection(dir / "packs");
  ASSERT_EQ(packs.size(), 2u);
  EXPECT_EQ(packs[1].subset(), "urban");
  EXPECT_EQ(packs[1].size(), 3u);
  r = kglnet({"convert", "--src", (dir / "src").string(), "--layout", "paired_folders", "--out",
              (dir / "bad").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("paired_folders"), std::string::npos);
}

TEST(Cli, SweepPairsHnsmRows) {
  Packs p;
  const auto out = p.dir / "sweep";
  const auto r = kglnet(with_tiny({"sweep", "--archs", "C3", "--data", p.train, "--eval", p.eval, "--out", out.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_lines(out / "sweep.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "preset,series,use_hnsm,fpr95_mean,fpr95_seeds,failed");
  EXPECT_EQ(rows[1].substr(0, 7), "C3,C,1,");
  EXPECT_EQ(rows[2].substr(0, 7), "C3,C,0,");

  auto on = read_json(out / "C3_hnsm_seed0" / cli::kRunManifest)["config"];
  auto off = read_json(out / "C3_random_seed0" / cli::kRunManifest)["config"];
  EXPECT_EQ(on["train"]["use_hnsm"], true);
  EXPECT_EQ(off["train"]["use_hnsm"], false);
  on["train"].erase("use_hnsm");
  off["train"].erase("use_hnsm");
  EXPECT_EQ(on, off);
}

TEST(Cli, SweepIsolatesFailures) {
  Packs p;
  const auto out = p.dir / "sweep";
  // Batch 100 exceeds the 64-pair pack, so every run fails.
  const auto r = kglnet({"sweep", "--archs", "A1,C3", "--data", p.train, "--eval", p.eval, "--out", out.string(),
                         "--width", "0.125", "--epochs", "1", "--batch-size", "100"});
  EXPECT_NE(r.code, 0);
  const auto rows = read_lines(out / "sweep.csv");
  EXPECT_EQ(rows.size(), 5u);
  EXPECT_EQ(read_lines(out / "runs.csv").size(), 5u);
}

TEST(Cli, AblationHasTheFourRows) {
  Packs p;
  const auto out = p.dir / "ablate";
  const auto r = kglnet(with_tiny({"ablate", "--data", p.train, "--eval", p.eval, "--out", out.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_lines(out / "ablation.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "variant,cna,hnsm_m,fgl,fpr95_mean,fpr95_seeds,failed");
  EXPECT_EQ(rows[1].substr(0, 13), "wo_all,0,0,0,");
  EXPECT_EQ(rows[2].substr(0, 10), "cna,1,0,0,");
  EXPECT_EQ(rows[3].substr(0, 15), "cna_hnsm,1,1,0,");
  EXPECT_EQ(rows[4].substr(0, 11), "full,1,1,1,");
  const auto wo = read_json(out / "wo_all_seed0" / cli::kRunManifest)["config"];
  EXPECT_EQ(wo["architecture"]["metric_only"], true);
  EXPECT_EQ(wo["architecture"]["metric_structure"], "PS");
  EXPECT_EQ(wo["train"]["use_hnsm"], false);
}

TEST(Cli, OutputRootFromEnvironment) {
  Packs p;
  const auto root = p.dir / "root";
  ::setenv(cli::kOutputRootEnv, root.string().c_str(), 1);
  const auto r = kglnet(with_tiny({"train", "--data", p.train, "--max-steps", "1"}));
  ::unsetenv(cli::kOutputRootEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::is_directory(root));
  const auto run = fs::directory_iterator(root)->path();
  EXPECT_EQ(run.filename().string().substr(0, 6), "train_");
  EXPECT_TRUE(fs::exists(run / cli::kRunManifest));
}

TEST(Cli, InspectPresetParameterBudget) {
  const auto r = kglnet({"inspect", "--preset", "C3", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto n = json::parse(r.out)["total_parameters"].get<std::size_t>();
  EXPECT_GE(n, 4'500'000u);
  EXPECT_LE(n, 8'500'000u);
}
