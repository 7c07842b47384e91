#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cvil/classifier.hpp"
#include "cvil/dataset.hpp"
#include "cvil/density.hpp"
#include "cvil/measures.hpp"

namespace cvil {

// Where the dataset came from, so a saved session can be reopened.
struct DatasetReference {
  std::string features;
  std::string schema;
  std::string labels;
  std::string images;
};

struct SessionConfig {
  ModelConfig model;
  TrainingSetParams training;
  Measure initial_measure = Measure::min_margin;
  NeighborhoodConfig neighborhood;
  EccentricityConfig eccentricity;
  DatasetReference dataset;
};

enum class SessionStatus : std::uint8_t { idle, training };

std::string_view to_string(SessionStatus s);

struct RetrainSummary {
  std::uint64_t seed = 0;
  std::size_t instance_examples = 0;
  std::size_t batch_examples = 0;
  std::size_t c_min = 0;
  bool c_min_partial = false;
  double final_loss = 0.0;
  double seconds = 0.0;
};

// Immutable view of the session at one sequence number.
struct SessionSnapshot {
  std::uint64_t sequence = 0;
  Measure measure = Measure::min_margin;
  std::shared_ptr<const LabelLedger> ledger;
  std::shared_ptr<const Mlp> model;                 // null while untrained
  std::shared_ptr<const ProbabilityMatrix> probs;   // null while untrained
  std::shared_ptr<const PropertyScores> scores;     // null while untrained
  std::optional<RetrainSummary> last_retrain;

  bool trained() const noexcept { return model != nullptr; }
};

struct TrainingProgress {
  SessionStatus status = SessionStatus::idle;
  std::uint64_t job_id = 0;
  std::size_t epoch = 0;
  std::size_t total_epochs = 0;
  std::string last_error_code;
  std::string last_error;
};

struct BatchLabelAction {
  RangeSelection selection;
  ClassId target_class = kNoClass;
  bool override_mismatch = false;
};

struct BatchLabelResult {
  std::uint64_t sequence = 0;
  std::size_t count = 0;
};

// One entry of the append-only action log.
struct ActionRecord {
  std::uint64_t sequence = 0;
  std::string kind;  // label_instance | label_batch | retrain | set_measure
  nlohmann::json payload;

  bool operator==(const ActionRecord&) const = default;
};

// Interactive labeling state machine. One writer at a time; readers take
// snapshots and never block on a running retrain.
class Session {
 public:
  Session(std::shared_ptr<const EmbeddingDataset> dataset, SessionConfig config = {});
  ~Session();

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const EmbeddingDataset& dataset() const noexcept { return *dataset_; }
  std::shared_ptr<const EmbeddingDataset> dataset_ptr() const noexcept { return dataset_; }
  const SessionConfig& config() const noexcept { return config_; }

  SessionSnapshot snapshot() const;
  TrainingProgress progress() const;
  std::vector<ActionRecord> action_log() const;

  // Mutations. `expected_sequence`, when given, must equal the current
  // sequence or the call fails with stale_sequence. All mutations fail with
  // busy while a retrain is running.
  std::uint64_t label_instance(std::string_view id, ClassId c,
                               std::optional<std::uint64_t> expected_sequence = {});
  BatchLabelResult label_batch(const BatchLabelAction& action,
                               std::optional<std::uint64_t> expected_sequence = {});
  std::uint64_t set_measure(Measure m, std::optional<std::uint64_t> expected_sequence = {});

  // Blocking retrain. Throws untrained when there are no instance labels.
  std::uint64_t retrain(std::uint64_t seed, std::optional<std::uint64_t> expected_sequence = {});
  // Starts a retrain on a background thread and returns its job id.
  std::uint64_t start_retrain(std::uint64_t seed,
                              std::optional<std::uint64_t> expected_sequence = {});
  // Requests cancellation of the running job; returns false when idle.
  bool cancel_retrain();
  // Blocks until no retrain job is running.
  void wait_idle();

  // Uniform random ids without replacement; only before the first retrain.
  std::vector<std::string> cold_start_sample(std::size_t count, std::uint64_t seed) const;

  std::vector<ExportRecord> export_records() const;
  ClassStats stats() const;

  // Writes the header and every record so far; subsequent actions are
  // appended to `path` as they commit.
  void attach_log(const std::filesystem::path& path);
  void write_log(std::ostream& out) const;

  // Rebuilds a session by re-executing a saved log against `dataset`.
  static std::unique_ptr<Session> replay(std::shared_ptr<const EmbeddingDataset> dataset,
                                         std::istream& log);
  // Reads only the header of a saved log.
  static SessionConfig read_log_header(std::istream& log);

 private:
  void check_writable(std::optional<std::uint64_t> expected_sequence) const;
  void commit(SessionSnapshot next, ActionRecord record);
  void append_to_log(const ActionRecord& record);
  std::shared_ptr<const PropertyScores> compute_scores(Measure m,
                                                       const ProbabilityMatrix& probs) const;
  struct PendingRetrain {
    std::uint64_t job = 0;
    std::uint64_t seed = 0;
    Measure measure = Measure::min_margin;
    std::shared_ptr<const LabelLedger> ledger;
    TrainingSet training_set;
  };
  PendingRetrain begin_retrain(std::uint64_t seed, std::optional<std::uint64_t> expected_sequence);
  std::uint64_t run_retrain(const PendingRetrain& job);
  nlohmann::json header_json() const;

  std::shared_ptr<const EmbeddingDataset> dataset_;
  SessionConfig config_;

  std::mutex writer_mutex_;          // serializes mutations
  mutable std::mutex state_mutex_;  // guards snapshot_, log_, progress_
  SessionSnapshot snapshot_;
  std::vector<ActionRecord> log_;
  TrainingProgress progress_;
  std::atomic<bool> cancel_{false};
  std::uint64_t next_job_ = 1;
  std::mutex worker_mutex_;  // guards worker_
  std::thread worker_;
  std::unique_ptr<std::ofstream> log_file_;

  mutable std::once_flag graph_once_;
  mutable std::shared_ptr<const NeighborGraph> graph_;
  mutable std::once_flag ecc_once_;
  mutable std::vector<double> ecc_values_;
};

// Short hex digest of the feature matrix and ids, stored in session logs.
std::string dataset_fingerprint(const EmbeddingDataset& ds);

nlohmann::json to_json(const SessionConfig& config);
SessionConfig session_config_from_json(const nlohmann::json& j);

}  // namespace cvil
