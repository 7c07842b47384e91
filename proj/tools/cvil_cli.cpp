#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvil/dataset.hpp"
#include "cvil/error.hpp"
#include "cvil/service.hpp"
#include "cvil/session.hpp"
#include "cvil/simulation.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

cvil::ApiServer* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cvil::Error(cvil::errc::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw cvil::Error(cvil::errc::kParse, path.string() + ": " + e.what());
  }
}

std::shared_ptr<const cvil::EmbeddingDataset> load_dataset(const cvil::DatasetReference& ref) {
  if (ref.features.empty() || ref.schema.empty())
    throw cvil::Error(cvil::errc::kInvalidArgument, "a features file and a schema are required");
  auto schema = cvil::read_class_schema(ref.schema);
  return std::make_shared<const cvil::EmbeddingDataset>(cvil::ingest(
      ref.features, schema, opt_path(ref.labels), opt_path(ref.images)));
}

// --- ingest ----------------------------------------------------------------

struct IngestArgs {
  std::string in, schema, labels, images, out, format = "binary";
};

int run_ingest(const IngestArgs& a) {
  const auto ds = load_dataset({a.in, a.schema, a.labels, a.images});
  std::cout << "ok: n=" << ds->size() << " d=" << ds->dim() << " classes=" << ds->num_classes()
            << " ground_truth=" << (ds->has_ground_truth() ? "yes" : "no")
            << " images=" << (ds->has_images() ? "yes" : "no") << "\n";
  if (!a.out.empty()) {
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw cvil::Error(cvil::errc::kIo, "cannot write " + a.out);
    if (a.format == "csv")
      cvil::write_features_csv(*ds, out);
    else
      cvil::write_features_binary(*ds, out);
    std::cout << "wrote " << a.out << " (" << a.format << ")\n";
  }
  return 0;
}

// --- serve -----------------------------------------------------------------

struct ServeArgs {
  std::string features, schema, labels, images, session_path, ui;
  std::string host = "127.0.0.1";
  int port = 8080;
  bool resume = false;
};

int run_serve(const ServeArgs& a) {
  cvil::SessionConfig config;
  config.dataset = {fs::absolute(a.features).string(), fs::absolute(a.schema).string(),
                    a.labels.empty() ? "" : fs::absolute(a.labels).string(),
                    a.images.empty() ? "" : fs::absolute(a.images).string()};
  const auto ds = load_dataset(config.dataset);

  std::shared_ptr<cvil::Session> session;
  if (a.resume && !a.session_path.empty() && fs::exists(a.session_path)) {
    std::ifstream log(a.session_path);
    session = cvil::Session::replay(ds, log);
    std::cout << "resumed " << session->action_log().size() << " actions from "
              << a.session_path << "\n";
  } else {
    session = std::make_shared<cvil::Session>(ds, config);
  }
  if (!a.session_path.empty()) session->attach_log(a.session_path);

  cvil::ServiceOptions options;
  if (!a.ui.empty()) options.ui_dir = fs::path(a.ui);
  cvil::ApiServer server(session, options);
  const int port = server.bind(a.host, a.port);
  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << "serving n=" << ds->size() << " on http://" << a.host << ":" << port << "\n"
            << std::flush;
  server.listen();
  g_server = nullptr;
  session->cancel_retrain();
  session->wait_idle();
  return 0;
}

// --- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string config, out, sidecar, strategy;
  std::optional<std::size_t> iterations;
  std::optional<std::uint64_t> seed;
};

int run_simulate(const SimulateArgs& a) {
  const json j = read_json_file(a.config);
  auto config = cvil::simulation_config_from_json(j);
  if (!a.strategy.empty()) {
    const auto s = cvil::parse_strategy(a.strategy);
    if (!s) throw cvil::Error(cvil::errc::kInvalidArgument, "unknown strategy " + a.strategy);
    config.strategy = *s;
  }
  if (a.iterations) config.iterations = *a.iterations;
  if (a.seed) config.seed = *a.seed;

  const fs::path base = fs::path(a.config).parent_path();
  auto resolve = [&base](const std::string& p) {
    if (p.empty()) return p;
    const fs::path path(p);
    return path.is_absolute() ? p : (base / path).string();
  };

  std::shared_ptr<const cvil::EmbeddingDataset> ds;
  const json data = j.value("dataset", json::object());
  if (data.contains("synthetic")) {
    const auto kind = data.at("synthetic").get<std::string>();
    if (kind != "overlap_blobs")
      throw cvil::Error(cvil::errc::kInvalidArgument, "unknown synthetic dataset " + kind);
    ds = std::make_shared<const cvil::EmbeddingDataset>(
        cvil::make_blobs(cvil::overlap_blob_spec(data.value("seed", std::uint64_t{7}))));
  } else {
    ds = load_dataset({resolve(data.value("features", "")), resolve(data.value("schema", "")),
                       resolve(data.value("labels", "")), ""});
  }

  std::string out = a.out;
  if (out.empty()) out = resolve(j.value("output", ""));
  if (out.empty()) out = std::string(cvil::to_string(config.strategy)) + "_curve.csv";
  std::string sidecar = a.sidecar;
  if (sidecar.empty()) sidecar = fs::path(out).replace_extension(".json").string();

  const auto run = cvil::run_simulation(*ds, config);
  {
    std::ofstream csv(out);
    if (!csv) throw cvil::Error(cvil::errc::kIo, "cannot write " + out);
    cvil::write_curve_csv(run, csv);
  }
  {
    std::ofstream js(sidecar);
    if (!js) throw cvil::Error(cvil::errc::kIo, "cannot write " + sidecar);
    js << cvil::run_sidecar_json(run).dump(2) << "\n";
  }
  const auto& f = run.final_record();
  std::printf("%s: %zu iterations, final test_acc %.4f, export_acc %.4f, %zu instance + %zu batch labels, %.2f s\n",
              std::string(cvil::to_string(config.strategy)).c_str(), config.iterations,
              f.test_acc, f.export_acc, f.instance_labels, f.batch_labels, run.seconds);
  std::printf("wrote %s and %s\n", out.c_str(), sidecar.c_str());
  return 0;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  std::size_t n = 16384;
  std::size_t d = 1024;
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  bool json_out = false;
};

int run_bench(const BenchArgs& a) {
  const auto report = cvil::bench_measures(a.n, a.d, a.seed, a.classes);
  if (a.json_out) {
    json rows = json::array();
    for (const auto& r : report.rows) rows.push_back({{"measure", r.measure}, {"seconds", r.seconds}});
    std::cout << json{{"n", report.n}, {"d", report.d}, {"rows", rows},
                      {"total_seconds", report.total_seconds}}
                     .dump(2)
              << "\n";
    return 0;
  }
  std::printf("n=%zu d=%zu\n", report.n, report.d);
  std::printf("%-14s %12s\n", "measure", "ms");
  for (const auto& r : report.rows) std::printf("%-14s %12.2f\n", r.measure.c_str(), r.seconds * 1e3);
  std::printf("%-14s %12.2f\n", "total(bench)", report.total_seconds * 1e3);
  return 0;
}

// --- export ----------------------------------------------------------------

struct ExportArgs {
  std::string session_path, out, features, schema, labels;
  bool accuracy = false;
};

int run_export(const ExportArgs& a) {
  cvil::SessionConfig header;
  {
    std::ifstream in(a.session_path);
    if (!in) throw cvil::Error(cvil::errc::kIo, "cannot open " + a.session_path);
    header = cvil::Session::read_log_header(in);
  }
  auto ref = header.dataset;
  if (!a.features.empty()) ref.features = a.features;
  if (!a.schema.empty()) ref.schema = a.schema;
  if (!a.labels.empty()) ref.labels = a.labels;
  ref.images.clear();
  const auto ds = load_dataset(ref);
  std::ifstream in(a.session_path);
  const auto session = cvil::Session::replay(ds, in);
  const auto records = session->export_records();
  if (a.out.empty() || a.out == "-") {
    cvil::write_export_csv(records, std::cout);
  } else {
    std::ofstream out(a.out);
    if (!out) throw cvil::Error(cvil::errc::kIo, "cannot write " + a.out);
    cvil::write_export_csv(records, out);
    std::cerr << "wrote " << records.size() << " records to " << a.out << "\n";
  }
  if (a.accuracy)
    std::cerr << "export accuracy " << cvil::export_accuracy(records, *ds) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-centric visual interactive labeling engine"};
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate a dataset and optionally convert it");
  ingest_cmd->add_option("--in", ingest.in, "Features file (CSV or binary)")->required();
  ingest_cmd->add_option("--schema", ingest.schema, "Class schema JSON")->required();
  ingest_cmd->add_option("--labels", ingest.labels, "Ground-truth labels CSV (id,class_id)");
  ingest_cmd->add_option("--images", ingest.images, "Image directory");
  ingest_cmd->add_option("--out", ingest.out, "Write the validated dataset here");
  ingest_cmd->add_option("--format", ingest.format, "Output format")
      ->check(CLI::IsMember({"csv", "binary"}));

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP/JSON labeling service");
  serve_cmd->add_option("--features", serve.features, "Features file")->required();
  serve_cmd->add_option("--schema", serve.schema, "Class schema JSON")->required();
  serve_cmd->add_option("--labels", serve.labels, "Ground-truth labels CSV");
  serve_cmd->add_option("--images", serve.images, "Image directory");
  serve_cmd->add_option("--host", serve.host, "Bind address");
  serve_cmd->add_option("--port", serve.port, "Port (0 picks a free one)");
  serve_cmd->add_option("--session", serve.session_path, "Session log file (JSON lines)");
  serve_cmd->add_flag("--resume", serve.resume, "Replay an existing session log first");
  serve_cmd->add_option("--ui", serve.ui, "Static UI bundle directory");

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a labeling simulation from a config file");
  sim_cmd->add_option("--config", sim.config, "Simulation config JSON")->required();
  sim_cmd->add_option("--out", sim.out, "Curve CSV path");
  sim_cmd->add_option("--sidecar", sim.sidecar, "Config/result JSON path");
  sim_cmd->add_option("--strategy", sim.strategy, "Override the strategy");
  sim_cmd->add_option("--iterations", sim.iterations, "Override the iteration count");
  sim_cmd->add_option("--seed", sim.seed, "Override the seed");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time the property measures on random data");
  bench_cmd->add_option("--n", bench.n, "Instances");
  bench_cmd->add_option("--d", bench.d, "Dimensions");
  bench_cmd->add_option("--seed", bench.seed, "Seed");
  bench_cmd->add_option("--classes", bench.classes, "Classes in the random probabilities");
  bench_cmd->add_flag("--json", bench.json_out, "Print JSON instead of a table");

  ExportArgs exp;
  auto* export_cmd = app.add_subcommand("export", "Export labels from a saved session");
  export_cmd->add_option("--session", exp.session_path, "Session log file")->required();
  export_cmd->add_option("--out", exp.out, "Output CSV (default stdout)");
  export_cmd->add_option("--features", exp.features, "Override the recorded features path");
  export_cmd->add_option("--schema", exp.schema, "Override the recorded schema path");
  export_cmd->add_option("--labels", exp.labels, "Ground-truth labels for --accuracy");
  export_cmd->add_flag("--accuracy", exp.accuracy, "Report export accuracy (needs labels)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest_cmd) return run_ingest(ingest);
    if (*serve_cmd) return run_serve(serve);
    if (*sim_cmd) return run_simulate(sim);
    if (*bench_cmd) return run_bench(bench);
    if (*export_cmd) return run_export(exp);
  } catch (const cvil::Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
