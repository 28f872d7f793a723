#include "rda/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace rda;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "rda");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv("RDA_SEED");
    dir_ = fs::temp_directory_path() / ("rda_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    unsetenv("RDA_SEED");
    fs::remove_all(dir_);
  }

  std::string p(const std::string& rel) const { return (dir_ / rel).string(); }

  /// Small dataset plus a tiny training config.
  void small_setup(int count = 4) {
    ASSERT_EQ(run({"generate", "--count", std::to_string(count), "--dim", "2", "--seed", "1", "--points", "256",
                   "--out", p("data")})
                  .code,
              0);
    std::ofstream cfg(p("cfg.json"));
    cfg << R"({"epochs": 4, "batch_size": 2, "d_z": 4, "K": 4, "d_vel": 8, "vel_hidden": 1, "d_mu": 8, "N_h": 2,
              "mc_surface": 32, "mc_domain": 32, "seed": 3})";
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenerateWritesDatasetDeterministically) {
  ASSERT_EQ(run({"generate", "--count", "16", "--dim", "2", "--seed", "1", "--out", p("a")}).code, 0);
  ASSERT_EQ(run({"generate", "--count", "16", "--dim", "2", "--seed", "1", "--out", p("b")}).code, 0);
  int points = 0, meshes = 0;
  for (const auto& e : fs::directory_iterator(p("a/points"))) points += e.is_regular_file();
  for (const auto& e : fs::directory_iterator(p("a/meshes"))) meshes += e.is_regular_file();
  EXPECT_EQ(points, 16);
  EXPECT_EQ(meshes, 16);
  EXPECT_EQ(cli::load_dataset(p("a")).size(), 16u);
  EXPECT_EQ(slurp(p("a/specs.json")), slurp(p("b/specs.json")));
  EXPECT_EQ(slurp(p("a/points/shape_0007.txt")), slurp(p("b/points/shape_0007.txt")));
  EXPECT_EQ(slurp(p("a/meshes/shape_0015.obj")), slurp(p("b/meshes/shape_0015.obj")));

  // The stored specs and samples round-trip exactly.
  const auto loaded = cli::load_dataset(p("a"));
  const auto direct = geometry::generate_box_dataset(16, 2, 1, 4096);
  EXPECT_EQ(loaded[3].spec.rotation, direct[3].spec.rotation);
  EXPECT_EQ(loaded[3].sample.points, direct[3].sample.points);
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run({"generate", "--count", "2", "--dim", "4", "--out", p("x")}).code, 2);
  EXPECT_EQ(run({"train", "--out", p("x")}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"template", "--checkpoint", p("missing.bin"), "--out", p("x")}).code, 2);
  EXPECT_EQ(run({"train", "--data", p("d"), "--out", p("x"), "--mode", "rigid"}).code, 2);
  EXPECT_EQ(run({"--threads", "0", "verify-c", "--out", p("x")}).code, 2);
  setenv("RDA_SEED", "abc", 1);
  EXPECT_EQ(run({"verify-c", "--res", "16", "--out", p("x")}).code, 2);
}

TEST_F(Cli, HelpAndVersionExitZero) {
  const Result h = run({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("verify-c"), std::string::npos);
  EXPECT_EQ(run({"--version"}).code, 0);
}

TEST_F(Cli, RuntimeFailuresExitWithOne) {
  EXPECT_EQ(run({"train", "--data", p("nowhere"), "--out", p("x")}).code, 1);
  std::ofstream(p("bad.bin")) << "not a checkpoint";
  const Result r = run({"template", "--checkpoint", p("bad.bin"), "--out", p("x")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
}

TEST_F(Cli, TrainWritesArtifactsAndIsReproducible) {
  small_setup();
  const Result a = run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("a")});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("b")}).code, 0);
  for (const char* f : {"checkpoint.bin", "epochs.csv", "latents.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(p(std::string("a/") + f))) << f;
  EXPECT_EQ(slurp(p("a/checkpoint.bin")), slurp(p("b/checkpoint.bin")));
  EXPECT_EQ(slurp(p("a/epochs.csv")), slurp(p("b/epochs.csv")));
  EXPECT_EQ(slurp(p("a/latents.json")), slurp(p("b/latents.json")));

  std::ifstream log(p("a/epochs.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4);

  const auto manifest = nlohmann::json::parse(slurp(p("a/manifest.json")));
  EXPECT_EQ(manifest["status"], "ok");
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["config"]["d_vel"], 8);
  EXPECT_EQ(manifest["version_hash"].get<std::string>().size(), 40u);
  EXPECT_FALSE(manifest["finished"].is_null());
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  small_setup();
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("full"), "--epochs", "6"}).code, 0);
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("part"), "--epochs", "6",
                 "--checkpoint-every", "1"})
                .code,
            0);
  // Resume in place from epoch 1: the log is cut back and regrown.
  const Result r = run({"train", "--data", p("data"), "--out", p("part"), "--resume", p("part/checkpoint_epoch1.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(p("part/checkpoint.bin")), slurp(p("full/checkpoint.bin")));
  EXPECT_EQ(slurp(p("part/epochs.csv")), slurp(p("full/epochs.csv")));
}

TEST_F(Cli, SeedPrecedence) {
  small_setup();
  setenv("RDA_SEED", "11", 1);
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("env"), "--epochs", "1"}).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("env/manifest.json")))["seed"], 11);
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("flag"), "--epochs", "1",
                 "--seed", "12"})
                .code,
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("flag/manifest.json")))["seed"], 12);
  unsetenv("RDA_SEED");
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("file"), "--epochs", "1"}).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("file/manifest.json")))["seed"], 3);
}

TEST_F(Cli, ThreadCountDoesNotChangeArtifacts) {
  small_setup(6);
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("a")}).code, 0);
  ASSERT_EQ(run({"--threads", "3", "train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("b")}).code, 0);
  EXPECT_EQ(slurp(p("a/epochs.csv")), slurp(p("b/epochs.csv")));
}

TEST_F(Cli, NonFiniteLossNamesTheTerm) {
  small_setup();
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("a"), "--epochs", "1"}).code, 0);
  train::TrainState s = train::load_checkpoint(p("a/checkpoint.bin"));
  s.model.tpl.params.tensors[0].setConstant(std::numeric_limits<double>::infinity());
  train::save_checkpoint(s, p("nan.bin"));
  const Result r = run({"train", "--data", p("data"), "--out", p("b"), "--resume", p("nan.bin"), "--epochs", "2"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("term:"), std::string::npos) << r.err;
  EXPECT_NE(nlohmann::json::parse(slurp(p("b/manifest.json")))["status"].get<std::string>().find("failed"),
            std::string::npos);
}

TEST_F(Cli, InferenceCommands) {
  small_setup();
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("run")}).code, 0);
  const std::string ckpt = p("run/checkpoint.bin");

  const Result t = run({"template", "--checkpoint", ckpt, "--res", "64", "--out", p("tpl")});
  ASSERT_EQ(t.code, 0) << t.err;
  int objs = 0;
  for (const auto& e : fs::directory_iterator(p("tpl"))) objs += e.path().extension() == ".obj";
  EXPECT_EQ(objs, 1);

  const Result e = run({"encode", "--checkpoint", ckpt, "--data", p("data"), "--iterations", "5", "--out", p("enc")});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(cli::load_latents(p("enc/latents.json")).size(), 4u);
  EXPECT_EQ(run({"encode", "--checkpoint", ckpt, "--out", p("enc2")}).code, 2);
  const Result single = run({"encode", "--checkpoint", ckpt, "--points", p("data/points/shape_0002.txt"), "--id", "2",
                             "--iterations", "5", "--out", p("enc3")});
  ASSERT_EQ(single.code, 0) << single.err;
  // Same per-shape seed, so the single encoding matches the batch one.
  EXPECT_EQ(cli::load_latents(p("enc3/latents.json"))[0].z, cli::load_latents(p("enc/latents.json"))[2].z);

  ASSERT_EQ(run({"reconstruct", "--checkpoint", ckpt, "--latents", p("enc/latents.json"), "--res", "48", "--out",
                 p("rec")})
                .code,
            0);
  EXPECT_TRUE(fs::exists(p("rec/recon_shape_0003.obj")));
  EXPECT_EQ(run({"reconstruct", "--checkpoint", ckpt, "--res", "48", "--out", p("rec2")}).code, 2);
  EXPECT_EQ(run({"reconstruct", "--checkpoint", ckpt, "--train-latents", "--shape", "9", "--out", p("rec3")}).code, 1);

  ASSERT_EQ(run({"trajectory", "--checkpoint", ckpt, "--train-latents", "--shape", "1", "--res", "48", "--out",
                 p("traj")})
                .code,
            0);
  EXPECT_TRUE(fs::exists(p("traj/manifest.csv")));
  EXPECT_TRUE(fs::exists(p("traj/stage_4.obj")));
  EXPECT_TRUE(fs::exists(p("traj/speeds.csv")));
  EXPECT_EQ(run({"trajectory", "--checkpoint", ckpt, "--train-latents", "--out", p("traj2")}).code, 2);
}

TEST_F(Cli, EvalWritesReports) {
  small_setup(3);
  ASSERT_EQ(run({"train", "--config", p("cfg.json"), "--data", p("data"), "--out", p("run")}).code, 0);
  const Result r = run({"eval", "--checkpoint", p("run/checkpoint.bin"), "--data", p("data"), "--noise", "0.01",
                        "--iterations", "5", "--res", "48", "--iso-points", "64", "--out", p("ev")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(p("ev/metrics.csv")));
  EXPECT_TRUE(fs::exists(p("ev/metrics_noise_0.01.csv")));
  const auto summary = nlohmann::json::parse(slurp(p("ev/summary.json")));
  EXPECT_EQ(summary["levels"].size(), 2u);
  EXPECT_TRUE(summary["isometry_defect"].is_number());
  std::ifstream csv(p("ev/metrics_noise_0.01.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST_F(Cli, VerifyC) {
  const Result r = run({"verify-c", "--out", p("vc")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("lhs"), std::string::npos);
  EXPECT_NE(r.out.find("rel_err"), std::string::npos);
  EXPECT_TRUE(fs::exists(p("vc/verify_c.json")));
  // A coarse grid misses the tolerance and reports failure.
  EXPECT_EQ(run({"verify-c", "--res", "8", "--out", p("vc2")}).code, 1);
}

TEST(CliHash, GitBlobHash) {
  // Reference values from git hash-object.
  EXPECT_EQ(cli::git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(cli::git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
