#include <gtest/gtest.h>

#include <iostream>
#include <sstream>

#include "dnas/cli.hpp"
#include "support.hpp"

using namespace dnas;
using dnas::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dnas");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  const int code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str(), err.str()};
}

// One LUT and one short search shared by the tests below.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    write_json_file(path("space.json"), dnas::testing::tiny_space_config().to_json());
    const auto r = run({"bench-lut", "--space", path("space.json"), "--out", path("lut.json"), "--repeats",
                        "5", "--warmup", "1", "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto s = run(search_args("run", "4"));
    ASSERT_EQ(s.code, 0) << s.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& name) { return (*dir_ / name).string(); }
  static std::vector<std::string> search_args(const std::string& out, const std::string& seed) {
    std::vector<std::string> a{"search", "--space", path("space.json"), "--lut", path("lut.json"), "--data",
                               "synth", "--epochs", "2", "--postpone", "1", "--batch", "8",
                               "--synth-per-class", "8", "--out", path(out), "--quiet"};
    if (!seed.empty()) {
      a.push_back("--seed");
      a.push_back(seed);
    }
    return a;
  }
  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST_F(CliTest, BenchLutReportsEntriesAndWritesManifest) {
  const auto r = run({"bench-lut", "--space", path("space.json"), "--out", path("lut2.json"), "--repeats", "5",
                      "--warmup", "1", "--quiet", "--device-label", "unit"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sp = build_space(dnas::testing::tiny_space_config());
  EXPECT_NE(r.out.find("entries: " + std::to_string(distinct_keys(sp).size())), std::string::npos);
  EXPECT_NE(r.out.find("slowest: "), std::string::npos);
  EXPECT_NE(r.out.find("fastest: "), std::string::npos);
  const json m = read_json_file(path("lut2.json.manifest.json"));
  EXPECT_EQ(m.at("device_label"), "unit");
  EXPECT_EQ(m.at("config_hash"), sp.hash);
  EXPECT_EQ(LatencyTable::load(path("lut2.json")).device_label, "unit");
}

TEST_F(CliTest, ArgumentErrorsExitTwo) {
  EXPECT_EQ(run({"bench-lut", "--out", path("x.json")}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"search", "--space", path("space.json"), "--lut", path("lut.json"), "--out", path("bad"),
                 "--epochs", "notanumber"})
                .code,
            2);
}

TEST_F(CliTest, SearchArtifactsAndManifest) {
  for (const char* f : {"manifest.json", "theta.json", "metrics.jsonl"}) {
    EXPECT_TRUE(fs::exists(path("run") + "/" + f)) << f;
  }
  const json m = read_json_file(path("run/manifest.json"));
  for (const char* k : {"config_hash", "seed", "lut_path", "device_label", "output", "started_utc",
                        "finished_utc", "command_line"}) {
    EXPECT_TRUE(m.contains(k)) << k;
  }
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_EQ(m.at("seed_source"), "flag");
  const auto rows = cli::read_metrics(path("run/metrics.jsonl"));
  EXPECT_EQ(rows.size(), 3u);  // two weight epochs, one theta epoch
}

TEST_F(CliTest, SameSeedGivesIdenticalTheta) {
  const auto r = run(search_args("run_again", "4"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_text_file(path("run/theta.json")), read_text_file(path("run_again/theta.json")));
}

TEST_F(CliTest, ThetaDecayModeIsRecorded) {
  const json def = read_json_file(path("run/manifest.json"));
  EXPECT_EQ(def.at("hyper").at("theta_decoupled_wd"), true);
  auto args = search_args("run_l2", "4");
  args.push_back("--theta-l2-decay");
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json_file(path("run_l2/manifest.json")).at("hyper").at("theta_decoupled_wd"), false);
}

TEST_F(CliTest, MissingSeedIsDrawnAndRecorded) {
  const auto r = run(search_args("run_noseed", ""));
  ASSERT_EQ(r.code, 0) << r.err;
  const json m = read_json_file(path("run_noseed/manifest.json"));
  EXPECT_EQ(m.at("seed_source"), "entropy");
  EXPECT_TRUE(m.at("seed").is_number_unsigned());
}

TEST_F(CliTest, SearchRefusesForeignLut) {
  auto other = dnas::testing::tiny_space_config();
  other.head_width = 32;
  write_json_file(path("other_space.json"), other.to_json());
  auto args = search_args("run_foreign", "1");
  args[2] = path("other_space.json");
  const auto r = run(args);
  EXPECT_EQ(r.code, 2);
  const auto lut = LatencyTable::load(path("lut.json"));
  EXPECT_NE(r.err.find(lut.space_hash), std::string::npos);
  EXPECT_NE(r.err.find(other.hash()), std::string::npos);
}

TEST_F(CliTest, SampleWritesSortedValidDescriptors) {
  const auto r = run({"sample", "--theta", path("run/theta.json"), "--seed", "3", "--out", path("samples")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json index = read_json_file(path("samples/index.json"));
  ASSERT_EQ(index.size(), 6u);
  const auto sp = build_space(dnas::testing::tiny_space_config());
  double prev = -1.0;
  for (const auto& row : index) {
    const double lat = row.at("predicted_latency_us").get<double>();
    EXPECT_GE(lat, prev);
    prev = lat;
    const json doc = read_json_file(path("samples/" + row.at("file").get<std::string>()));
    for (const char* k : {"log_prob", "predicted_latency_us", "flops", "params"}) EXPECT_TRUE(doc.contains(k));
    EXPECT_TRUE(validate_arch(sp, ArchDescriptor::from_json(doc)).empty());
  }
  EXPECT_TRUE(fs::exists(path("samples/manifest.json")));
}

TEST_F(CliTest, PredictRowsSumToTotal) {
  ArchDescriptor a{build_space(dnas::testing::tiny_space_config()).hash, {8, 2}};
  write_json_file(path("arch.json"), a.to_json());
  std::ostringstream os;
  cli::PredictArgs pa{path("lut.json"), path("space.json"), path("arch.json"), true};
  ASSERT_EQ(cli::cmd_predict(pa, os), 0);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "layer,kind,latency_us");
  int64_t sum_ns = 0, total_ns = -1;
  bool saw_skip = false;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const std::string v = line.substr(c2 + 1);
    const auto dot = v.find('.');
    const int64_t ns = std::stoll(v.substr(0, dot)) * 1000 + std::stoll(v.substr(dot + 1));
    if (line.rfind("total", 0) == 0) {
      total_ns = ns;
    } else {
      sum_ns += ns;
    }
    if (line.substr(c1 + 1, c2 - c1 - 1) == "skip") {
      saw_skip = true;
      EXPECT_EQ(ns, 0);
    }
  }
  EXPECT_TRUE(saw_skip);
  EXPECT_EQ(sum_ns, total_ns);

  const auto plain = run({"predict", "--lut", path("lut.json"), "--space", path("space.json"), "--arch",
                          path("arch.json")});
  EXPECT_EQ(plain.code, 0);
  EXPECT_EQ(plain.out.rfind("total_us ", 0), 0u);
}

TEST_F(CliTest, PredictCoverageGapNamesKey) {
  auto lut = LatencyTable::load(path("lut.json"));
  const auto victim = lut.entries.rbegin()->first;
  lut.entries.erase(victim);
  lut.save(path("lut_gap.json"));
  ArchDescriptor a{build_space(dnas::testing::tiny_space_config()).hash, {0, 0}};
  write_json_file(path("arch0.json"), a.to_json());
  const auto r = run({"predict", "--lut", path("lut_gap.json"), "--space", path("space.json"), "--arch",
                      path("arch0.json")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(victim.str()), std::string::npos);
}

TEST_F(CliTest, TrainExitCodesAndMetrics) {
  EXPECT_EQ(run({"train", "--space", path("space.json"), "--arch", path("missing.json"), "--out",
                 path("t_missing")})
                .code,
            3);
  write_json_file(path("bad_arch.json"), json{{"space_config_hash", ""}, {"choices", {"k3_e1", "skip"}}});
  EXPECT_EQ(run({"train", "--space", path("space.json"), "--arch", path("bad_arch.json"), "--out", path("t_bad")})
                .code,
            2);
  ArchDescriptor a{build_space(dnas::testing::tiny_space_config()).hash, {1, 1}};
  write_json_file(path("arch1.json"), a.to_json());
  const auto r = run({"train", "--space", path("space.json"), "--arch", path("arch1.json"), "--epochs", "0",
                      "--synth-per-class", "4", "--seed", "1", "--lut", path("lut.json"), "--out", path("t0"),
                      "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json m = read_json_file(path("t0/metrics.json"));
  for (const char* k : {"top1", "param_count", "flops", "predicted_latency_us", "measured_latency_us"}) {
    EXPECT_TRUE(m.contains(k)) << k;
  }
  EXPECT_TRUE(fs::exists(path("t0/manifest.json")));
}

TEST_F(CliTest, ReportRendersSixColumns) {
  const auto r = run({"report", "--run", path("run")});
  ASSERT_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 4);

  fs::create_directories(path("empty_run"));
  std::ofstream(path("empty_run/metrics.jsonl")).close();
  const auto e = run({"report", "--run", path("empty_run")});
  EXPECT_EQ(e.code, 0);
  EXPECT_EQ(e.out, std::string(cli::kReportHeader) + "\n");
  EXPECT_EQ(run({"report", "--run", path("nowhere")}).code, 3);
}

TEST_F(CliTest, DirectoryKeepsOneManifest) {
  const auto r = run({"sample", "--theta", path("run/theta.json"), "--seed", "1", "--out", path("run")});
  EXPECT_EQ(r.code, 2);  // the search manifest is not overwritten by another command
  EXPECT_EQ(read_json_file(path("run/manifest.json")).at("command"), "search");
}

TEST_F(CliTest, SynthDataRoundTripsThroughTrain) {
  ASSERT_EQ(run({"synth-data", "--out", path("d.bin"), "--classes", "3", "--per-class", "4", "--resolution",
                 "8"})
                .code,
            0);
  EXPECT_TRUE(fs::exists(path("d.bin.norm.json")));
  const ArchDescriptor a{build_space(dnas::testing::tiny_space_config()).hash, {2, 0}};
  write_json_file(path("arch_synth.json"), a.to_json());
  const auto r = run({"train", "--space", path("space.json"), "--arch", path("arch_synth.json"), "--data",
                      path("d.bin"), "--epochs", "1", "--seed", "1", "--out", path("t1"), "--quiet"});
  EXPECT_EQ(r.code, 0) << r.err;
}
