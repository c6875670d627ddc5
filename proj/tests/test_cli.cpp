#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() /
            (std::string("mcvi_cli_") + info->name() + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(root_ / "work");
  }
  void TearDown() override { fs::remove_all(root_); }

  // Runs the tool from root_/work so stray relative writes would show up there.
  Outcome run(const std::string& args) {
    const fs::path out = root_ / "stdout.txt", err = root_ / "stderr.txt";
    const std::string cmd = "cd '" + (root_ / "work").string() + "' && '" MCVI_CLI_PATH "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    fs::remove(out);
    fs::remove(err);
    return r;
  }

  fs::path write(const std::string& name, const Json& j) {
    const fs::path p = root_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  std::string q(const fs::path& p) const { return "'" + p.string() + "'"; }

  fs::path generate(const std::string& name, const Json& scenario) {
    const auto spec = write(name + "_spec.json", Json{{"schema_version", 1},
                                                      {"preset", "base"},
                                                      {"scenario", scenario},
                                                      {"labels", {{"latent", 0}, {"threshold", 0.0}}}});
    const auto r = run("--quiet generate --spec " + q(spec) + " --out " + q(root_ / name));
    EXPECT_EQ(r.code, 0) << r.err;
    return root_ / name;
  }

  fs::path fit_config(const fs::path& data, const std::string& name) {
    return write(name, Json{{"schema_version", 1},
                            {"data", {{"dir", data.string()}}},
                            {"latent_dims", 4},
                            {"train", {{"epochs", 15}, {"learning_rate", 0.01}, {"batch_size", 50}}},
                            {"output_dir", (root_ / "unused").string()}});
  }

  std::set<fs::path> tree() const {
    std::set<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root_)) out.insert(e.path());
    return out;
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, GenerateFitEvaluatePipeline) {
  const auto data = generate("data", {{"samples", 200}});
  EXPECT_TRUE(fs::exists(data / "ch0.csv"));
  EXPECT_TRUE(fs::exists(data / "truth.json"));
  EXPECT_TRUE(fs::exists(data / "labels.csv"));
  const auto cfg = fit_config(data, "fit.json");

  auto r = run("--quiet fit --config " + q(cfg) + " --out " + q(root_ / "fit"));
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(root_ / "fit" / "model.json"));
  const Json report = Json::parse(slurp(root_ / "fit" / "fit_report.json"));
  EXPECT_EQ(report["report"]["train_nlb"].size(), 15u);

  r = run("evaluate --model " + q(root_ / "fit" / "model.json") + " --data " + q(data) + " --labels " +
          q(data / "labels.csv") + " --mc-samples 8 --lda-repeats 3");
  ASSERT_EQ(r.code, 0) << r.err;
  const Json ev = Json::parse(r.out);
  for (const char* key : {"model", "data", "config", "samples", "mc_samples", "seed", "nlb", "nlb_stderr",
                          "exact_nll", "bound_gap", "bound_holds", "log_jacobian", "nlb_original_units",
                          "truth_nll_original_units", "reconstruction", "lda"})
    EXPECT_TRUE(ev.contains(key)) << key;
  EXPECT_EQ(ev["samples"], 200);
  EXPECT_TRUE(ev["nlb"].is_number());
  EXPECT_GE(ev["lda"]["mean_accuracy"].get<double>(), 0.0);

  r = run("--quiet reconstruct --model " + q(root_ / "fit" / "model.json") + " --data " + q(data) +
          " --mode single --out " + q(root_ / "recon"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "recon" / "ch2_single.csv"));
  EXPECT_TRUE(fs::exists(root_ / "recon" / "recon_report.json"));
}

TEST_F(Cli, FitIsByteReproducible) {
  const auto data = generate("data", {{"samples", 120}});
  const auto cfg = fit_config(data, "fit.json");
  ASSERT_EQ(run("--quiet --seed 9 fit --config " + q(cfg) + " --out " + q(root_ / "a")).code, 0);
  ASSERT_EQ(run("--quiet --seed 9 fit --config " + q(cfg) + " --out " + q(root_ / "b")).code, 0);
  const auto a = slurp(root_ / "a" / "model.json");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(root_ / "b" / "model.json"));
  ASSERT_EQ(run("--quiet --seed 10 fit --config " + q(cfg) + " --out " + q(root_ / "c")).code, 0);
  EXPECT_NE(a, slurp(root_ / "c" / "model.json"));
}

TEST_F(Cli, OutputsStayInsideOutDirectory) {
  const auto data = generate("data", {{"samples", 60}});
  const auto cfg = fit_config(data, "fit.json");
  const auto before = tree();
  ASSERT_EQ(run("--quiet fit --config " + q(cfg) + " --out " + q(root_ / "fit")).code, 0);
  for (const auto& p : tree()) {
    if (before.count(p)) continue;
    const auto rel = p.lexically_relative(root_ / "fit");
    EXPECT_FALSE(rel.empty() || *rel.begin() == "..") << "unexpected output " << p;
  }
  EXPECT_TRUE(fs::is_empty(root_ / "work"));
  EXPECT_FALSE(fs::exists(root_ / "unused"));
}

TEST_F(Cli, ReconstructRejectsMismatchedChannel) {
  const auto data = generate("data", {{"samples", 60}});
  const auto cfg = fit_config(data, "fit.json");
  ASSERT_EQ(run("--quiet fit --config " + q(cfg) + " --out " + q(root_ / "fit")).code, 0);
  const auto other = generate("other", {{"samples", 60}, {"dim", 9}});
  const auto r = run("reconstruct --model " + q(root_ / "fit" / "model.json") + " --data " + q(other) +
                     " --mode multi --out " + q(root_ / "recon"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ch0"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("16"), std::string::npos) << r.err;
}

TEST_F(Cli, UsageErrorsExitOne) {
  auto r = run("fit --bogus");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
  r = run("");
  EXPECT_EQ(r.code, 1);
  r = run("reconstruct --mode sideways");
  EXPECT_EQ(r.code, 1);
  r = run("--help");
  EXPECT_EQ(r.code, 0);
}

TEST_F(Cli, DataErrorsExitTwo) {
  const auto bad = write("bad.json", Json{{"schema_version", 1}, {"data", {{"preset", "base"}}}, {"bogus", 1}});
  const auto r = run("fit --config " + q(bad));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;
}

TEST_F(Cli, SweepWritesTables) {
  const auto data = generate("data", {{"samples", 80}});
  const auto cfg = write("sweep.json", Json{{"schema_version", 1},
                                            {"data", {{"dir", data.string()}, {"labels", (data / "labels.csv").string()}}},
                                            {"latent_dims", {1, 2, 3}},
                                            {"replications", 2},
                                            {"train", {{"epochs", 5}, {"batch_size", 40}}},
                                            {"evaluate", {{"lda_repeats", 2}}}});
  const auto r = run("--quiet --threads 2 sweep --config " + q(cfg) + " --out " + q(root_ / "sweep"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Json s = Json::parse(slurp(root_ / "sweep" / "sweep.json"));
  EXPECT_EQ(s["report"]["cells"].size(), 6u);
  EXPECT_TRUE(fs::exists(root_ / "sweep" / "sweep_cells.csv"));
  EXPECT_TRUE(fs::exists(root_ / "sweep" / "sweep_summary.csv"));
}
