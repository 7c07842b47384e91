#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cvil/classifier.hpp"
#include "cvil/dataset.hpp"
#include "cvil/measures.hpp"

namespace cvil {

enum class Strategy : std::uint8_t { cvil_instance, cvil_batch, al_baseline };

std::string_view to_string(Strategy s);
std::optional<Strategy> parse_strategy(std::string_view s);

struct SimulationConfig {
  Strategy strategy = Strategy::cvil_instance;
  Measure measure = Measure::min_margin;
  std::size_t samples_per_iteration = 10;
  std::size_t iterations = 30;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  ModelConfig model;
  TrainingSetParams training;
  NeighborhoodConfig neighborhood;
  EccentricityConfig eccentricity;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t instance_labels = 0;  // cumulative
  std::size_t batch_labels = 0;     // cumulative
  double test_acc = 0.0;
  double export_acc = 0.0;
  // Batch labels assigned in this iteration and how many matched ground truth.
  std::size_t batch_assigned = 0;
  std::size_t batch_correct = 0;

  bool operator==(const IterationRecord&) const = default;
};

struct SimulationRun {
  SimulationConfig config;
  std::size_t pool_size = 0;
  std::size_t test_size = 0;
  std::vector<IterationRecord> records;
  double seconds = 0.0;

  const IterationRecord& final_record() const { return records.back(); }
  bool batch_labels_all_correct() const;
};

// Splits `quota` over the non-empty partitions by largest remainder (ties to
// the lower class id), takes the highest-value instances of each partition
// and hands any shortfall to the best remaining instances overall. Partitions
// hold unlabeled instances only, ascending by value.
std::vector<std::size_t> select_instance_candidates(const ClassPartitions& partitions,
                                                    std::size_t quota);

// Longest prefix of an ascending partition whose members are predicted
// correctly (every member of `partition` is predicted as `partition_class`).
std::vector<std::size_t> select_batch_prefix(std::span<const ScoredInstance> partition,
                                             ClassId partition_class,
                                             std::span<const ClassId> ground_truth);

// Globally highest values among eligible instances, ties by lower index.
std::vector<std::size_t> al_select(std::span<const double> values,
                                   std::span<const std::uint8_t> eligible, std::size_t quota);

// Runs one seeded simulation; the dataset must carry ground truth.
SimulationRun run_simulation(const EmbeddingDataset& dataset, const SimulationConfig& config);

void write_curve_csv(const SimulationRun& run, std::ostream& out);
nlohmann::json run_sidecar_json(const SimulationRun& run);

nlohmann::json to_json(const SimulationConfig& config);
SimulationConfig simulation_config_from_json(const nlohmann::json& j);

// Isotropic Gaussian blobs: centers[c] is the mean of class c.
struct BlobSpec {
  std::vector<std::vector<double>> centers;
  std::size_t per_class = 500;
  double stddev = 1.0;
  std::uint64_t seed = 0;
};

EmbeddingDataset make_blobs(const BlobSpec& spec);

// Seeded three-class set, 1,500 points in 32 dimensions: classes 1 and 2 sit
// four standard deviations apart along one axis and overlap in their tails;
// class 0 is well separated from both.
BlobSpec overlap_blob_spec(std::uint64_t seed = 7);

struct BenchRow {
  std::string measure;
  double seconds = 0.0;
};

struct BenchReport {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<BenchRow> rows;
  double total_seconds = 0.0;
};

// Random n x d features and random class probabilities (K = 10), then times
// each measure over all instances.
BenchReport bench_measures(std::size_t n, std::size_t d, std::uint64_t seed,
                           std::size_t num_classes = 10);

}  // namespace cvil
