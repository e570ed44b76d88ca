#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "ivdseg/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / ("ivdseg_cli_tests-" + std::to_string(getpid())); }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(root() / "small.cfg") << "phantom_count = 3\nphantom_val = 1\nphantom_discs = 3\n"
                                           "phantom_dims = 36x128x64\naugment = off\n"
                                           "loc_base = 2\nloc_epochs = 1\nseg_base = 2\nseg_epochs = 1\n"
                                           "base2d = 2\nepochs2d = 1\n";
  }

  static void TearDownTestSuite() { fs::remove_all(root()); }

  static Result run(const std::string& args) {
    const auto err = root() / "stderr.txt";
    const std::string cmd = std::string(IVDSEG_CLI_PATH) + " " + args + " --run-root " + (root() / "runs").string() +
                            " 2>" + err.string();
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
  }

  static json ok(const std::string& args) {
    const auto r = run(args);
    EXPECT_EQ(r.code, 0) << args << "\n" << r.err;
    return json::parse(r.out);
  }

  static std::string cfg() { return "--config " + (root() / "small.cfg").string(); }

  static std::string dataset() {
    static std::string manifest;
    if (manifest.empty()) manifest = ok("phantom " + cfg())["manifest"];
    return manifest;
  }
};

void expect_error_line(const Result& r, int code, const std::string& kind) {
  EXPECT_EQ(r.code, code);
  ASSERT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  const auto j = json::parse(r.err);
  EXPECT_EQ(j["error"], kind);
  EXPECT_FALSE(j["message"].get<std::string>().empty());
}

}  // namespace

TEST_F(Cli, ConfigPrintsCanonicalText) {
  const auto r = run("config --seed 5");
  ASSERT_EQ(r.code, 0);
  ivdseg::RunConfig c;
  c.set("seed", "5");
  c.set("run_root", (root() / "runs").string());
  EXPECT_EQ(r.out, c.canonical());
}

TEST_F(Cli, PhantomRunDirectoryListsEveryFile) {
  const auto s = ok("phantom " + cfg() + " --seed 9");
  EXPECT_EQ(s["samples"], 3);
  EXPECT_EQ(s["splits"]["phantom-02"], "val");
  const fs::path dir = s["run_dir"].get<std::string>();
  EXPECT_EQ(dir.filename().string().substr(0, 8), "phantom-");
  const auto manifest = json::parse(slurp(dir / "run.json"));
  std::set<std::string> listed(manifest["files"].begin(), manifest["files"].end());
  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run.json") continue;
    ++on_disk;
    EXPECT_TRUE(listed.count(fs::relative(e.path(), dir).generic_string())) << e.path();
  }
  EXPECT_EQ(on_disk, listed.size());
  EXPECT_TRUE(listed.count("config.txt"));
  EXPECT_EQ(manifest["summary"]["samples"], 3);
}

TEST_F(Cli, EvalOfLabelAgainstItselfIsPerfect) {
  const auto label = (fs::path(dataset()).parent_path() / "phantom-00/label.mvl").string();
  const auto s = ok("eval --pred " + label + " --gt " + label);
  EXPECT_EQ(s["aggregate"]["mean_dice"], 100.0);
  EXPECT_EQ(s["aggregate"]["mean_hd"], 0.0);
  const fs::path dir = s["run_dir"].get<std::string>();
  const auto csv = slurp(dir / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sample_id,disc_index,dice_pct,hd_mm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST_F(Cli, ContrastAndAugment) {
  const auto c = ok("contrast " + cfg() + " --dataset " + dataset());
  EXPECT_GT(c["mean_weber"]["opp"].get<double>(), c["mean_weber"]["fat"].get<double>());
  const auto csv = slurp(fs::path(c["run_dir"].get<std::string>()) / "contrast.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 4);
  const auto a = ok("augment " + cfg() + " --set augment_copies=1 --dataset " + dataset());
  EXPECT_EQ(a["train_out"], 4);
  EXPECT_EQ(a["val"], 1);
}

TEST_F(Cli, TrainPredictEvalIsReproducible) {
  const auto loc = ok("train --stage loc " + cfg() + " --dataset " + dataset());
  const auto seg = ok("train --stage seg " + cfg() + " --dataset " + dataset());
  EXPECT_EQ(loc["fit"]["epochs"], 1);
  EXPECT_TRUE(fs::exists(fs::path(seg["run_dir"].get<std::string>()) / "history.csv"));
  const std::string nets = " --localizer " + loc["checkpoint"].get<std::string>() + " --segmenter " +
                           seg["checkpoint"].get<std::string>();
  const auto p1 = ok("predict " + cfg() + " --dataset " + dataset() + nets);
  const auto p2 = ok("predict " + cfg() + " --dataset " + dataset() + nets);
  const fs::path d1 = p1["run_dir"].get<std::string>(), d2 = p2["run_dir"].get<std::string>();
  EXPECT_NE(d1, d2);
  EXPECT_EQ(slurp(d1 / "discs.json"), slurp(d2 / "discs.json"));
  EXPECT_EQ(slurp(d1 / "predictions/phantom-02.mvl"), slurp(d2 / "predictions/phantom-02.mvl"));
  const auto e = ok("eval --pred " + p1["manifest"].get<std::string>() + " --gt " + dataset());
  EXPECT_EQ(e["samples"], 1);
  EXPECT_EQ(e["aggregate"], p1["aggregate"]);

  // checkpoint with the wrong channel count for the selected modalities
  const auto r = run("predict " + cfg() + " --set modalities=opp --dataset " + dataset() + nets);
  expect_error_line(r, 2, "config");
}

TEST_F(Cli, SlicesTrainA2dNet) {
  const auto s = ok("slice2d " + cfg() + " --axis y --dataset " + dataset());
  EXPECT_EQ(s["slices"], 3 * 128);
  const auto t = ok("train --stage 2d " + cfg() + " --dataset " + s["manifest"].get<std::string>());
  EXPECT_EQ(t["slices"], 2 * 128);
  const auto p = ok("predict " + cfg() + " --dataset " + dataset() + " --model2d " + t["checkpoint"].get<std::string>());
  EXPECT_EQ(p["samples"], 1);
}

TEST_F(Cli, ErrorsAreSingleJsonLines) {
  expect_error_line(run("config --set sede=1"), 2, "config");
  expect_error_line(run("phantom --set phantom_dims=36x100x64"), 2, "config");
  expect_error_line(run("train --stage loc"), 3, "dataset");
  expect_error_line(run("predict --dataset " + dataset()), 3, "checkpoint");
  expect_error_line(run("predict --dataset " + dataset() + " --localizer /nonexistent.mck --segmenter x"), 3,
                    "checkpoint");
  expect_error_line(run("train --stage 3d " + cfg() + " --dataset " + dataset()), 2, "config");
  std::ofstream(root() / "junk.mvl") << "not a volume";
  const auto junk = (root() / "junk.mvl").string();
  expect_error_line(run("eval --pred " + junk + " --gt " + junk), 4, "format");
  expect_error_line(run("frobnicate"), 2, "usage");
}
