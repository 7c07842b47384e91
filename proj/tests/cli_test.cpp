#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "cvil/session.hpp"
#include "cvil/simulation.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CVIL_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t got = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), got);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(CliTest, UnknownSubcommandFails) {
  auto r = run_cli("frobnicate");
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(run_cli("").exit_code, 0);
}

TEST(CliTest, BenchSmallShape) {
  auto r = run_cli("bench --n 100 --d 8 --json");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  auto j = nlohmann::json::parse(r.output);
  EXPECT_EQ(j["n"], 100);
  EXPECT_EQ(j["rows"].size(), 3u);
}

TEST(CliTest, IngestRejectsNonFiniteAndNamesTheRow) {
  auto dir = testing_support::scratch_dir("cli_ingest_nan");
  write_file(dir / "schema.json", R"(["cat","dog"])");
  write_file(dir / "f.csv", "id,f0,f1\na,0.1,0.2\nbad_row,nan,0.3\n");
  auto r = run_cli("ingest --in " + (dir / "f.csv").string() + " --schema " + (dir / "schema.json").string());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("error [non_finite]"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("bad_row"), std::string::npos) << r.output;
}

TEST(CliTest, IngestConvertsCsvToBinary) {
  auto dir = testing_support::scratch_dir("cli_ingest_bin");
  write_file(dir / "schema.json", R"({"classes":["cat","dog"]})");
  write_file(dir / "f.csv", "id,f0,f1,label\n0,0.5,1.5,1\n1,-2,3.25,0\n");
  auto r = run_cli("ingest --in " + (dir / "f.csv").string() + " --schema " +
                   (dir / "schema.json").string() + " --out " + (dir / "f.bin").string() +
                   " --format binary");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::ifstream in(dir / "f.bin", std::ios::binary);
  auto ds = cvil::read_features_binary(in, cvil::read_class_schema(dir / "schema.json"));
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_FLOAT_EQ(ds.row(1)[1], 3.25f);
  EXPECT_EQ(ds.ground_truth()[0], 1);
}

TEST(CliTest, SimulateWritesCurveAndSidecar) {
  auto dir = testing_support::scratch_dir("cli_sim");
  write_file(dir / "sim.json", R"({"strategy":"cvil_batch","iterations":2,"seed":3,
    "dataset":{"synthetic":"overlap_blobs","seed":7},"output":"curve.csv"})");
  auto r = run_cli("simulate --config " + (dir / "sim.json").string());
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto csv = slurp(dir / "curve.csv");
  EXPECT_EQ(csv.rfind("iteration,instance_labels,batch_labels,test_acc,export_acc\n", 0), 0u);
  auto side = nlohmann::json::parse(slurp(dir / "curve.json"));
  EXPECT_EQ(side["config"]["strategy"], "cvil_batch");

  auto overridden = run_cli("simulate --config " + (dir / "sim.json").string() + " --strategy al_baseline --out " +
                            (dir / "al.csv").string());
  ASSERT_EQ(overridden.exit_code, 0) << overridden.output;
  EXPECT_TRUE(fs::exists(dir / "al.csv"));
  EXPECT_EQ(run_cli("simulate --config " + (dir / "missing.json").string()).exit_code, 1);
}

TEST(CliTest, ExportReplaysASavedSession) {
  auto dir = testing_support::scratch_dir("cli_export");
  write_file(dir / "schema.json", R"(["a","b","c"])");
  auto blobs = cvil::make_blobs({{{0, 0}, {5, 0}, {0, 5}}, 15, 1.0, 2});
  {
    std::ofstream f(dir / "f.csv");
    cvil::write_features_csv(blobs, f);
  }
  cvil::SessionConfig cfg;
  cfg.model.epochs = 10;
  cfg.neighborhood.k = 3;
  cfg.dataset.features = (dir / "f.csv").string();
  cfg.dataset.schema = (dir / "schema.json").string();
  auto ds = std::make_shared<const cvil::EmbeddingDataset>(
      cvil::ingest(dir / "f.csv", cvil::read_class_schema(dir / "schema.json")));
  std::string expected;
  {
    cvil::Session s(ds, cfg);
    s.attach_log(dir / "session.jsonl");
    s.label_instance(ds->id(0), 0);
    s.label_instance(ds->id(15), 1);
    s.label_instance(ds->id(30), 2);
    s.retrain(5);
    expected = cvil::export_csv_string(s.export_records());
  }
  auto r = run_cli("export --session " + (dir / "session.jsonl").string() + " --out " + (dir / "out.csv").string());
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(slurp(dir / "out.csv"), expected);
}
