#include "cvil/session.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "cvil/error.hpp"
#include "cvil/random.hpp"

namespace cvil {

using nlohmann::json;

namespace {

constexpr const char* kLogFormat = "cvil-session";
constexpr int kLogVersion = 1;

json record_json(const ActionRecord& r) {
  return json{{"seq", r.sequence}, {"kind", r.kind}, {"payload", r.payload}};
}

void check_class(const EmbeddingDataset& ds, ClassId c) {
  if (!ds.schema().contains(c))
    throw Error(errc::kUnknownClass, "unknown class id " + std::to_string(c));
}

}  // namespace

std::string_view to_string(SessionStatus s) {
  return s == SessionStatus::idle ? "idle" : "training";
}

std::string dataset_fingerprint(const EmbeddingDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  const std::uint64_t shape[2] = {ds.size(), ds.dim()};
  mix(shape, sizeof(shape));
  mix(ds.features().data(), ds.features().size_bytes());
  for (const auto& id : ds.ids()) mix(id.data(), id.size() + 1);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json to_json(const SessionConfig& c) {
  return json{
      {"model",
       {{"hidden_sizes", {c.model.hidden_sizes[0], c.model.hidden_sizes[1]}},
        {"seed", c.model.seed},
        {"epochs", c.model.epochs},
        {"learning_rate", c.model.learning_rate},
        {"minibatch_size", c.model.minibatch_size}}},
      {"training",
       {{"batch_weight", c.training.batch_weight},
        {"batch_multiplier", c.training.batch_multiplier}}},
      {"initial_measure", std::string(to_string(c.initial_measure))},
      {"k", c.neighborhood.k},
      {"eccentricity_variance_exponent", c.eccentricity.variance_exponent},
      {"dataset",
       {{"features", c.dataset.features},
        {"schema", c.dataset.schema},
        {"labels", c.dataset.labels},
        {"images", c.dataset.images}}}};
}

SessionConfig session_config_from_json(const json& j) {
  SessionConfig c;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("hidden_sizes")) {
        c.model.hidden_sizes[0] = m.at("hidden_sizes").at(0).get<std::size_t>();
        c.model.hidden_sizes[1] = m.at("hidden_sizes").at(1).get<std::size_t>();
      }
      c.model.seed = m.value("seed", c.model.seed);
      c.model.epochs = m.value("epochs", c.model.epochs);
      c.model.learning_rate = m.value("learning_rate", c.model.learning_rate);
      c.model.minibatch_size = m.value("minibatch_size", c.model.minibatch_size);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.batch_weight = t.value("batch_weight", c.training.batch_weight);
      c.training.batch_multiplier = t.value("batch_multiplier", c.training.batch_multiplier);
    }
    if (j.contains("initial_measure")) {
      const auto name = j.at("initial_measure").get<std::string>();
      const auto m = parse_measure(name);
      if (!m) throw Error(errc::kParse, "unknown measure '" + name + "'");
      c.initial_measure = *m;
    }
    c.neighborhood.k = j.value("k", c.neighborhood.k);
    c.eccentricity.variance_exponent =
        j.value("eccentricity_variance_exponent", c.eccentricity.variance_exponent);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.features = d.value("features", "");
      c.dataset.schema = d.value("schema", "");
      c.dataset.labels = d.value("labels", "");
      c.dataset.images = d.value("images", "");
    }
  } catch (const json::exception& e) {
    throw Error(errc::kParse, std::string("malformed session config: ") + e.what());
  }
  return c;
}

// --- Session -----------------------------------------------------------------

Session::Session(std::shared_ptr<const EmbeddingDataset> dataset, SessionConfig config)
    : dataset_(std::move(dataset)), config_(std::move(config)) {
  if (!dataset_) throw Error(errc::kInvalidArgument, "session needs a dataset");
  if (config_.neighborhood.k < 1 || config_.neighborhood.k >= dataset_->size())
    throw Error(errc::kInvalidArgument, "k must lie in [1, n-1]");
  snapshot_.ledger = std::make_shared<const LabelLedger>(dataset_->size());
  snapshot_.measure = config_.initial_measure;
  progress_.total_epochs = config_.model.epochs;
}

Session::~Session() {
  cancel_ = true;
  wait_idle();
}

SessionSnapshot Session::snapshot() const {
  std::lock_guard lock(state_mutex_);
  return snapshot_;
}

TrainingProgress Session::progress() const {
  std::lock_guard lock(state_mutex_);
  return progress_;
}

std::vector<ActionRecord> Session::action_log() const {
  std::lock_guard lock(state_mutex_);
  return log_;
}

void Session::check_writable(std::optional<std::uint64_t> expected_sequence) const {
  std::lock_guard lock(state_mutex_);
  if (progress_.status == SessionStatus::training)
    throw Error(errc::kBusy, "a retrain is in progress");
  if (expected_sequence && *expected_sequence != snapshot_.sequence)
    throw Error(errc::kStaleSequence, "expected sequence " + std::to_string(*expected_sequence) +
                                          ", session is at " +
                                          std::to_string(snapshot_.sequence));
}

void Session::commit(SessionSnapshot next, ActionRecord record) {
  record.sequence = next.sequence;
  {
    std::lock_guard lock(state_mutex_);
    snapshot_ = std::move(next);
    log_.push_back(record);
  }
  append_to_log(record);
}

void Session::append_to_log(const ActionRecord& record) {
  if (!log_file_) return;
  *log_file_ << record_json(record).dump() << '\n';
  log_file_->flush();
  if (!*log_file_) throw Error(errc::kIo, "failed to append to session log");
}

std::shared_ptr<const PropertyScores> Session::compute_scores(
    Measure m, const ProbabilityMatrix& probs) const {
  switch (m) {
    case Measure::min_margin:
      return std::make_shared<const PropertyScores>(min_margin(probs));
    case Measure::eccentricity: {
      std::call_once(ecc_once_, [&] {
        ecc_values_ = eccentricity_values(*dataset_, config_.eccentricity);
      });
      PropertyScores s;
      s.measure = Measure::eccentricity;
      s.num_classes = probs.cols();
      s.values = ecc_values_;
      s.predicted_class = predicted_classes(probs);
      return std::make_shared<const PropertyScores>(std::move(s));
    }
    case Measure::disagreement:
      std::call_once(graph_once_, [&] {
        graph_ = std::make_shared<const NeighborGraph>(knn_all(*dataset_, config_.neighborhood));
      });
      return std::make_shared<const PropertyScores>(disagreement(*graph_, probs));
  }
  throw Error(errc::kInvalidArgument, "unknown measure");
}

std::uint64_t Session::label_instance(std::string_view id, ClassId c,
                                      std::optional<std::uint64_t> expected_sequence) {
  std::lock_guard writer(writer_mutex_);
  check_writable(expected_sequence);
  const std::size_t index = dataset_->require_index(id);
  check_class(*dataset_, c);

  SessionSnapshot next = snapshot();
  auto ledger = std::make_shared<LabelLedger>(*next.ledger);
  next.sequence = ledger->advance();
  ledger->label_instance(index, c);
  next.ledger = std::move(ledger);
  commit(std::move(next), {0, "label_instance", json{{"id", std::string(id)}, {"class", c}}});
  return snapshot().sequence;
}

BatchLabelResult Session::label_batch(const BatchLabelAction& action,
                                      std::optional<std::uint64_t> expected_sequence) {
  std::lock_guard writer(writer_mutex_);
  check_writable(expected_sequence);
  const auto& schema = dataset_->schema();
  check_class(*dataset_, action.selection.class_id);
  check_class(*dataset_, action.target_class);
  if (action.target_class != action.selection.class_id && !action.override_mismatch)
    throw Error(errc::kClassMismatch,
                "target class '" + schema.name(action.target_class) +
                    "' does not match the selected density plot '" +
                    schema.name(action.selection.class_id) + "'");

  SessionSnapshot next = snapshot();
  if (!next.scores) throw Error(errc::kUntrained, "batch labeling needs a trained model");
  const auto sel = resolve_selection(action.selection, *next.scores, *next.ledger,
                                     std::numeric_limits<std::size_t>::max());

  auto ledger = std::make_shared<LabelLedger>(*next.ledger);
  next.sequence = ledger->advance();
  std::vector<std::size_t> indices;
  indices.reserve(sel.items.size());
  for (const auto& item : sel.items) indices.push_back(item.index);
  std::sort(indices.begin(), indices.end());
  json ids = json::array();
  for (std::size_t i : indices) {
    ledger->label_batch(i, action.target_class);
    ids.push_back(dataset_->id(i));
  }
  next.ledger = std::move(ledger);
  json payload{{"class", action.selection.class_id},
               {"lo", action.selection.lo},
               {"hi", action.selection.hi},
               {"target_class", action.target_class},
               {"override", action.override_mismatch},
               {"count", indices.size()},
               {"ids", std::move(ids)}};
  const std::uint64_t seq = next.sequence;
  commit(std::move(next), {0, "label_batch", std::move(payload)});
  return {seq, indices.size()};
}

std::uint64_t Session::set_measure(Measure m, std::optional<std::uint64_t> expected_sequence) {
  std::lock_guard writer(writer_mutex_);
  check_writable(expected_sequence);
  SessionSnapshot next = snapshot();
  if (!next.trained() && needs_model(m))
    throw Error(errc::kUntrained,
                std::string(to_string(m)) + " needs a trained model");
  if (next.probs) next.scores = compute_scores(m, *next.probs);
  next.measure = m;
  auto ledger = std::make_shared<LabelLedger>(*next.ledger);
  next.sequence = ledger->advance();
  next.ledger = std::move(ledger);
  const std::uint64_t seq = next.sequence;
  commit(std::move(next), {0, "set_measure", json{{"measure", std::string(to_string(m))}}});
  return seq;
}

Session::PendingRetrain Session::begin_retrain(std::uint64_t seed,
                                               std::optional<std::uint64_t> expected_sequence) {
  std::lock_guard writer(writer_mutex_);
  check_writable(expected_sequence);
  const SessionSnapshot snap = snapshot();
  auto ts = build_training_set(*snap.ledger, dataset_->num_classes(), config_.training, seed);
  if (!ts) throw Error(errc::kUntrained, "retraining needs at least one instance label");

  PendingRetrain job;
  job.seed = seed;
  job.measure = snap.measure;
  job.ledger = snap.ledger;
  job.training_set = std::move(*ts);
  std::lock_guard lock(state_mutex_);
  job.job = next_job_++;
  progress_.status = SessionStatus::training;
  progress_.job_id = job.job;
  progress_.epoch = 0;
  progress_.total_epochs = config_.model.epochs;
  progress_.last_error.clear();
  progress_.last_error_code.clear();
  cancel_ = false;
  return job;
}

std::uint64_t Session::run_retrain(const PendingRetrain& job) {
  auto finish = [&](const std::string& code, const std::string& message) {
    std::lock_guard lock(state_mutex_);
    progress_.status = SessionStatus::idle;
    progress_.last_error_code = code;
    progress_.last_error = message;
  };
  try {
    const auto start = std::chrono::steady_clock::now();
    ModelConfig cfg = config_.model;
    cfg.seed = job.seed;
    TrainControl control;
    control.cancel = &cancel_;
    control.on_epoch = [this](std::size_t epoch, std::size_t total, double) {
      std::lock_guard lock(state_mutex_);
      progress_.epoch = epoch;
      progress_.total_epochs = total;
    };
    auto model = std::make_shared<const Mlp>(train(*dataset_, job.training_set, cfg, control));
    auto probs = std::make_shared<const ProbabilityMatrix>(model->predict_proba(*dataset_));
    auto scores = compute_scores(job.measure, *probs);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    RetrainSummary summary;
    summary.seed = job.seed;
    summary.instance_examples = job.training_set.instance_examples.size();
    summary.batch_examples = job.training_set.batch_examples.size();
    summary.c_min = job.training_set.c_min;
    summary.c_min_partial = job.training_set.c_min_partial;
    summary.final_loss = model->final_loss;
    summary.seconds = seconds;

    std::lock_guard writer(writer_mutex_);
    SessionSnapshot next = snapshot();
    auto ledger = std::make_shared<LabelLedger>(*next.ledger);
    next.sequence = ledger->advance();
    next.ledger = std::move(ledger);
    next.model = std::move(model);
    next.probs = std::move(probs);
    next.scores = std::move(scores);
    next.last_retrain = summary;
    const std::uint64_t seq = next.sequence;
    commit(std::move(next), {0, "retrain",
                             json{{"seed", job.seed},
                                  {"instance_examples", summary.instance_examples},
                                  {"batch_examples", summary.batch_examples},
                                  {"c_min", summary.c_min},
                                  {"c_min_partial", summary.c_min_partial}}});
    finish("", "");
    return seq;
  } catch (const Error& e) {
    finish(e.code(), e.what());
    throw;
  } catch (const std::exception& e) {
    finish("internal", e.what());
    throw;
  }
}

std::uint64_t Session::retrain(std::uint64_t seed,
                               std::optional<std::uint64_t> expected_sequence) {
  const auto job = begin_retrain(seed, expected_sequence);
  return run_retrain(job);
}

std::uint64_t Session::start_retrain(std::uint64_t seed,
                                     std::optional<std::uint64_t> expected_sequence) {
  auto job = begin_retrain(seed, expected_sequence);
  std::lock_guard lock(worker_mutex_);
  if (worker_.joinable()) worker_.join();
  const std::uint64_t id = job.job;
  worker_ = std::thread([this, job = std::move(job)] {
    try {
      run_retrain(job);
    } catch (...) {
      // Reported through progress().
    }
  });
  return id;
}

bool Session::cancel_retrain() {
  std::lock_guard lock(state_mutex_);
  if (progress_.status != SessionStatus::training) return false;
  cancel_ = true;
  return true;
}

void Session::wait_idle() {
  std::lock_guard lock(worker_mutex_);
  if (worker_.joinable()) worker_.join();
}

std::vector<std::string> Session::cold_start_sample(std::size_t count, std::uint64_t seed) const {
  if (snapshot().trained())
    throw Error(errc::kInvalidArgument, "cold-start sampling is only available before training");
  if (count > dataset_->size())
    throw Error(errc::kInvalidArgument, "requested " + std::to_string(count) +
                                            " samples from " + std::to_string(dataset_->size()) +
                                            " instances");
  std::vector<std::size_t> pool(dataset_->size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng(seed);
  const auto picked = sample_without_replacement(std::move(pool), count, rng);
  std::vector<std::string> ids;
  ids.reserve(picked.size());
  for (std::size_t i : picked) ids.push_back(dataset_->id(i));
  return ids;
}

std::vector<ExportRecord> Session::export_records() const {
  const auto snap = snapshot();
  std::vector<ClassId> predictions;
  if (snap.probs) predictions = predicted_classes(*snap.probs);
  return export_labels(*dataset_, *snap.ledger, predictions);
}

ClassStats Session::stats() const {
  const auto snap = snapshot();
  return class_stats(*snap.ledger, dataset_->num_classes(), snap.scores.get());
}

// --- persistence -------------------------------------------------------------

json Session::header_json() const {
  return json{{"format", kLogFormat},
              {"version", kLogVersion},
              {"n", dataset_->size()},
              {"d", dataset_->dim()},
              {"classes", dataset_->schema().names()},
              {"fingerprint", dataset_fingerprint(*dataset_)},
              {"config", to_json(config_)}};
}

void Session::write_log(std::ostream& out) const {
  out << header_json().dump() << '\n';
  for (const auto& r : action_log()) out << record_json(r).dump() << '\n';
  if (!out) throw Error(errc::kIo, "failed to write session log");
}

void Session::attach_log(const std::filesystem::path& path) {
  std::lock_guard writer(writer_mutex_);
  auto file = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*file) throw Error(errc::kIo, "cannot open session log " + path.string());
  write_log(*file);
  file->flush();
  log_file_ = std::move(file);
}

namespace {

json parse_line(const std::string& line, std::size_t line_no) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw Error(errc::kParse,
                "session log line " + std::to_string(line_no) + ": " + e.what());
  }
}

json read_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(errc::kParse, "session log is empty");
  json header = parse_line(line, 1);
  if (!header.is_object() || header.value("format", "") != kLogFormat)
    throw Error(errc::kParse, "not a session log");
  if (header.value("version", 0) != kLogVersion)
    throw Error(errc::kParse, "unsupported session log version");
  return header;
}

}  // namespace

SessionConfig Session::read_log_header(std::istream& log) {
  const json header = read_header(log);
  return session_config_from_json(header.value("config", json::object()));
}

std::unique_ptr<Session> Session::replay(std::shared_ptr<const EmbeddingDataset> dataset,
                                         std::istream& log) {
  const json header = read_header(log);
  if (!dataset) throw Error(errc::kInvalidArgument, "replay needs a dataset");
  if (header.value("fingerprint", "") != dataset_fingerprint(*dataset))
    throw Error(errc::kInvalidArgument, "session log was recorded against a different dataset");
  auto session = std::make_unique<Session>(
      dataset, session_config_from_json(header.value("config", json::object())));

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(log, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json rec = parse_line(line, line_no);
    const auto where = "session log line " + std::to_string(line_no) + ": ";
    try {
      const auto kind = rec.at("kind").get<std::string>();
      const auto seq = rec.at("seq").get<std::uint64_t>();
      const json& p = rec.at("payload");
      std::uint64_t got = 0;
      if (kind == "label_instance") {
        got = session->label_instance(p.at("id").get<std::string>(), p.at("class").get<ClassId>());
      } else if (kind == "label_batch") {
        BatchLabelAction a;
        a.selection = {p.at("class").get<ClassId>(), p.at("lo").get<double>(),
                       p.at("hi").get<double>()};
        a.target_class = p.at("target_class").get<ClassId>();
        a.override_mismatch = p.at("override").get<bool>();
        const auto r = session->label_batch(a);
        got = r.sequence;
        if (session->action_log().back().payload.at("ids") != p.at("ids"))
          throw Error(errc::kInvalidArgument, where + "batch selection did not reproduce");
      } else if (kind == "retrain") {
        got = session->retrain(p.at("seed").get<std::uint64_t>());
      } else if (kind == "set_measure") {
        const auto name = p.at("measure").get<std::string>();
        const auto m = parse_measure(name);
        if (!m) throw Error(errc::kParse, where + "unknown measure '" + name + "'");
        got = session->set_measure(*m);
      } else {
        throw Error(errc::kParse, where + "unknown action kind '" + kind + "'");
      }
      if (got != seq)
        throw Error(errc::kInvalidArgument, where + "sequence mismatch during replay");
    } catch (const json::exception& e) {
      throw Error(errc::kParse, where + e.what());
    }
  }
  return session;
}

}  // namespace cvil
