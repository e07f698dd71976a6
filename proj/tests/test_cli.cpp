#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "tractseg/tractseg.hpp"

using namespace tractseg;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kCli = TRACTSEG_CLI_PATH;
const std::string kData = TRACTSEG_TEST_DATA;
const std::string kGrad = " --bvals " + kData + "/shell90.bval --bvecs " + kData + "/shell90.bvec";

struct CliResult {
  int code = 0;
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
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tractseg_cli_" + std::to_string(std::random_device{}()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  CliResult run(const std::string& args) const {
    const std::string out = p("stdout.txt"), err = p("stderr.txt");
    const int status = std::system((kCli + " " + args + " >" + out + " 2>" + err).c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  CliResult ok(const std::string& args) const {
    auto r = run(args);
    EXPECT_EQ(r.code, 0) << args << "\n" << r.err;
    return r;
  }

  void simulate(const std::string& name, int seed, double noise = 0.02, int size = 24) const {
    ok("simulate" + kGrad + " --out " + p(name) + " --size " + std::to_string(size) + " --noise " +
       std::to_string(noise) + " --seed " + std::to_string(seed));
  }

  fs::path dir_;
};

void expect_one_line_error(const CliResult& r, const std::string& kind) {
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.err.rfind("error: " + kind + ":", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

}  // namespace

TEST_F(Cli, SimulateWritesDeclaredDimsAndIsDeterministic) {
  simulate("a", 7);
  simulate("b", 7);
  for (const char* f : {"dwi.nii.gz", "b0.nii.gz", "labels.nii.gz", "dwi.bval", "dwi.bvec", "tracts.json"}) {
    ASSERT_TRUE(fs::exists(p("a") + "/" + f)) << f;
    EXPECT_EQ(slurp(p("a") + "/" + f), slurp(p("b") + "/" + f)) << f;
  }
  const auto dwi = read_nifti(p("a") + "/dwi.nii.gz");
  EXPECT_EQ(dwi.grid().dims, (Index3{24, 24, 24}));
  EXPECT_EQ(dwi.channels(), 91u);
  EXPECT_EQ(read_nifti(p("a") + "/labels.nii.gz").channels(), 2u);

  simulate("c", 8);
  EXPECT_NE(slurp(p("a") + "/dwi.nii.gz"), slurp(p("c") + "/dwi.nii.gz"));
}

TEST_F(Cli, SimulateRejectsOutOfGridShape) {
  std::ofstream(p("spec.json")) << R"({"dims": [16, 16, 16], "tracts": [{"label": 1,
      "shape": {"type": "straight", "start": [2, 8, 8], "end": [30, 8, 8], "radius": 2}}]})";
  expect_one_line_error(run("simulate" + kGrad + " --spec " + p("spec.json") + " --out " + p("x")), "domain");
  std::ofstream(p("bad.json")) << "{ not json";
  expect_one_line_error(run("simulate" + kGrad + " --spec " + p("bad.json") + " --out " + p("x")), "config");
}

TEST_F(Cli, SelectDirs) {
  const auto r = ok("select-dirs" + kGrad + " --k 6 --seed 3");
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["indices"].size(), 6u);
  EXPECT_TRUE(j.contains("energy"));
  EXPECT_LT(j["cond"].get<double>(), 3.0);
  const auto table = read_gradients(kData + "/shell90.bval", kData + "/shell90.bvec");
  EXPECT_EQ(j["indices"].get<std::vector<std::size_t>>(), select_subset(table, 6, 1000.0, kDefaultShellTol, 3).indices);

  const auto d = json::parse(ok("select-dirs" + kGrad + " --k 6 --disjoint 2 --seed 3").out);
  ASSERT_EQ(d["subsets"].size(), 2u);
  std::set<std::size_t> all;
  for (const auto& s : d["subsets"])
    for (const auto& i : s["indices"]) all.insert(i.get<std::size_t>());
  EXPECT_EQ(all.size(), 12u);

  EXPECT_NE(run("select-dirs" + kGrad + " --k 13").code, 0);
  expect_one_line_error(run("select-dirs" + kGrad + " --k 6 --b 3000"), "insufficient_directions");
  expect_one_line_error(run("select-dirs --bvals /nope.bval --bvecs /nope.bvec"), "io");
}

TEST_F(Cli, TrainSegmentUncertaintyEvaluateRoundTrip) {
  simulate("s1", 1);
  simulate("s2", 2);
  simulate("s3", 3);
  const std::string train = "train" + kGrad + " --dwi " + p("s1/dwi.nii.gz") + " --labels " + p("s1/labels.nii.gz") +
                            " --dwi " + p("s2/dwi.nii.gz") + " --labels " + p("s2/labels.nii.gz") +
                            " --lr 0.3 --epochs 30 --iterations 8 --patch 24 --seed 5";
  ok(train + " --out " + p("m1"));
  ok(train + " --out " + p("m2"));
  EXPECT_EQ(slurp(p("m1/model.bin")), slurp(p("m2/model.bin")));
  EXPECT_EQ(slurp(p("m1/train_log.csv")), slurp(p("m2/train_log.csv")));
  const auto model = load_checkpoint(p("m1/model.bin"));
  EXPECT_EQ(model.classes(), 2u);

  const std::string seg = "segment" + kGrad + " --dwi " + p("s3/dwi.nii.gz") + " --model " + p("m1/model.bin") +
                          " --patch 16 --stride 8 --seed 4";
  ok(seg + " --n 1 --out " + p("one"));
  EXPECT_EQ(read_nifti(p("one/prob.nii.gz")).data(), read_nifti(p("one/member_0.nii.gz")).data());

  ok(seg + " --n 3 --out " + p("tta"));
  ok(seg + " --n 3 --out " + p("tta2"));
  for (const char* f : {"prob.nii.gz", "mask.nii.gz", "member_2.nii.gz", "tta.json"})
    EXPECT_EQ(slurp(p("tta") + "/" + f), slurp(p("tta2") + "/" + f)) << f;
  const auto prob = read_nifti(p("tta/prob.nii.gz"));
  for (float x : prob.data()) {
    ASSERT_GE(x, 0.0f);
    ASSERT_LE(x, 1.0f);
  }

  const std::string unc = "uncertainty --tta " + p("tta") + " --scan-id s3 --model " + p("m1/model.bin") +
                          " --dwi " + p("s3/dwi.nii.gz") + kGrad + " --seed 2";
  ok(unc + " --out " + p("u1"));
  ok(unc + " --out " + p("u2"));
  EXPECT_EQ(slurp(p("u1/uncertainty.csv")), slurp(p("u2/uncertainty.csv")));
  EXPECT_EQ(slurp(p("u1/uncertainty.json")), slurp(p("u2/uncertainty.json")));
  const auto uj = json::parse(slurp(p("u1/uncertainty.json")));
  ASSERT_EQ(uj["tracts"].size(), 2u);
  EXPECT_FALSE(uj["tracts"][0]["drp_score"].is_null());

  ok("evaluate --pred " + p("tta/mask.nii.gz") + " --labels " + p("s3/labels.nii.gz") + " --scan-id s3 --out " +
     p("met.csv"));
  const auto met = slurp(p("met.csv"));
  EXPECT_EQ(met.substr(0, met.find('\n')), "scan_id,tract,dsc,hd95_mm,assd_mm");

  const auto plot = ok("plotdata --u " + p("u1/uncertainty.csv") + " --dsc " + p("met.csv")).out;
  EXPECT_EQ(std::count(plot.begin(), plot.end(), '\n'), 3);
  EXPECT_EQ(plot.rfind("scan_id,tract,u,dsc\n", 0), 0u);
}

TEST_F(Cli, TrainWithMissingLabelsFails) {
  simulate("s1", 1);
  expect_one_line_error(run("train" + kGrad + " --dwi " + p("s1/dwi.nii.gz") + " --labels " + p("nope.nii.gz") +
                            " --dwi " + p("s1/dwi.nii.gz") + " --labels " + p("s1/labels.nii.gz") + " --out " +
                            p("m")),
                        "io");
  expect_one_line_error(run("train" + kGrad + " --dwi " + p("s1/dwi.nii.gz") + " --labels " +
                            p("s1/labels.nii.gz") + " --out " + p("m")),
                        "config");
}

TEST_F(Cli, EvaluatePerfectPredictionGivesOnes) {
  simulate("s", 1, 0.0);
  const auto out = ok("evaluate --pred " + p("s/labels.nii.gz") + " --labels " + p("s/labels.nii.gz")).out;
  EXPECT_EQ(out, "scan_id,tract,dsc,hd95_mm,assd_mm\nscan,0,1,0,0\nscan,1,1,0,0\n");
}

TEST_F(Cli, UncertaintyOfIdenticalMembersIsZeroAndTauIsStrict) {
  const Grid3 g({16, 16, 16});
  Volume y(g, 2);
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    y(v, 0) = v % 5 == 0 ? 0.9f : 0.05f;
    y(v, 1) = v < 2000 ? 0.8f : 0.1f;
  }
  Volume z = y;
  for (std::size_t v = 0; v < g.voxels(); ++v) z(v, 1) = v >= 2000 ? 0.8f : 0.1f;
  fs::create_directories(p("same"));
  fs::create_directories(p("diff"));
  const json manifest = {{"n", 2}, {"k", 6}, {"seed", 0},
                         {"subsets", {{{"indices", {1, 2, 3, 4, 5, 6}}, {"energy", 1.0}, {"cond", 1.0}},
                                      {{"indices", {1, 2, 3, 4, 5, 6}}, {"energy", 1.0}, {"cond", 1.0}}}}};
  for (const char* d : {"same", "diff"}) std::ofstream(p(d) + "/tta.json") << manifest.dump();
  write_nifti(y, p("same/member_0.nii.gz"));
  write_nifti(y, p("same/member_1.nii.gz"));
  write_nifti(y, p("diff/member_0.nii.gz"));
  write_nifti(z, p("diff/member_1.nii.gz"));

  ok("uncertainty --tta " + p("same") + " --out " + p("us"));
  const auto s = json::parse(slurp(p("us/uncertainty.json")));
  EXPECT_EQ(s["tracts"][0]["u"].get<double>(), 0.0);
  EXPECT_EQ(s["tracts"][1]["u"].get<double>(), 0.0);
  EXPECT_FALSE(s["tracts"][1]["flagged"].get<bool>());

  ok("uncertainty --tta " + p("diff") + " --out " + p("ud"));
  const double u = json::parse(slurp(p("ud/uncertainty.json")))["tracts"][1]["u"].get<double>();
  ASSERT_GT(u, 0.0);
  std::ostringstream at, below;
  at.precision(17);
  below.precision(17);
  at << u;
  below << std::nextafter(u, 0.0);
  ok("uncertainty --tta " + p("diff") + " --out " + p("ua") + " --tau " + at.str());
  EXPECT_FALSE(json::parse(slurp(p("ua/uncertainty.json")))["tracts"][1]["flagged"].get<bool>());
  ok("uncertainty --tta " + p("diff") + " --out " + p("ub") + " --tau " + below.str());
  EXPECT_TRUE(json::parse(slurp(p("ub/uncertainty.json")))["tracts"][1]["flagged"].get<bool>());

  ok("uncertainty --tta " + p("diff") + " --out " + p("ul2") + " --scorer l2");
  EXPECT_EQ(json::parse(slurp(p("ul2/uncertainty.json")))["scorer"], "l2");
  EXPECT_NE(run("uncertainty --tta " + p("diff") + " --out " + p("x") + " --scorer l3").code, 0);
  expect_one_line_error(run("uncertainty --tta " + p("nowhere") + " --out " + p("x")), "io");
}

TEST_F(Cli, DetectAndCalibrate) {
  std::ofstream(p("u.csv")) << "scan_id,tract,u,tau,flagged,ens_score,drp_score\n"
                               "a,0,0.1,0.3,0,nan,nan\na,1,0.2,0.3,0,nan,nan\n"
                               "b,0,0.5,0.3,1,nan,nan\nb,1,inf,0.3,1,nan,nan\n";
  std::ofstream(p("d.csv")) << "scan_id,tract,dsc,hd95_mm,assd_mm\n"
                               "a,0,0.95,1,1\na,1,0.9,1,1\nb,0,0.4,5,3\nb,1,0,nan,nan\n";
  const auto det = json::parse(ok("detect --u " + p("u.csv") + " --dsc " + p("d.csv") + " --tau 0.3").out);
  EXPECT_EQ(det["accuracy"].get<double>(), 1.0);
  EXPECT_EQ(det["tp"].get<int>(), 2);

  const auto cal = json::parse(ok("calibrate --u " + p("u.csv") + " --dsc " + p("d.csv")).out);
  const std::vector<double> u{0.1, 0.2, 0.5, std::numeric_limits<double>::infinity()}, d{0.95, 0.9, 0.4, 0.0};
  EXPECT_EQ(cal["tau"].get<double>(), calibrate_threshold(u, d).tau);
  EXPECT_EQ(cal["stats"]["balanced_accuracy"].get<double>(), 1.0);

  std::ofstream(p("short.csv")) << "scan_id,tract,dsc\na,0,0.9\n";
  expect_one_line_error(run("detect --u " + p("u.csv") + " --dsc " + p("short.csv")), "length_mismatch");
  std::ofstream(p("junk.csv")) << "scan_id,tract,dsc\na,0,zero\n";
  expect_one_line_error(run("calibrate --u " + p("u.csv") + " --dsc " + p("junk.csv")), "parse");
}

TEST_F(Cli, ConfigFileSuppliesDefaultsAndFlagsWin) {
  std::ofstream(p("cfg.json")) << R"({"select-dirs": {"k": 7, "seed": 11}})";
  const auto a = json::parse(ok("--config " + p("cfg.json") + " select-dirs" + kGrad).out);
  EXPECT_EQ(a["indices"].size(), 7u);
  EXPECT_EQ(a["seed"].get<int>(), 11);
  const auto b = json::parse(ok("--config " + p("cfg.json") + " select-dirs" + kGrad + " --k 8").out);
  EXPECT_EQ(b["indices"].size(), 8u);
  EXPECT_EQ(b["seed"].get<int>(), 11);
}

TEST_F(Cli, UsageErrorsAreOneLine) {
  const auto r = run("segment --dwi x");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: usage:", 0), 0u);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_NE(run("").code, 0);
}
