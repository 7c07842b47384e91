#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cvil/dataset.hpp"

namespace cvil {

// n x K row-stochastic matrix of class probabilities.
class ProbabilityMatrix {
 public:
  ProbabilityMatrix() = default;
  // Validates: every row sums to 1 +- 1e-6, entries finite and >= 0.
  ProbabilityMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {values_.data() + i * cols_, cols_};
  }
  std::span<const double> values() const noexcept { return values_; }

  bool operator==(const ProbabilityMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

enum class Measure : std::uint8_t { min_margin, eccentricity, disagreement };

std::string_view to_string(Measure m);
std::optional<Measure> parse_measure(std::string_view s);
// Whether the measure needs class probabilities from a trained model.
bool needs_model(Measure m);

// Argmax with ties broken towards the lowest class id.
ClassId argmax(std::span<const double> row);
std::vector<ClassId> predicted_classes(const ProbabilityMatrix& probs);

struct PropertyScores {
  Measure measure = Measure::min_margin;
  std::size_t num_classes = 0;
  std::vector<double> values;            // one per instance
  std::vector<ClassId> predicted_class;  // one per instance

  std::size_t size() const noexcept { return values.size(); }
  bool operator==(const PropertyScores&) const = default;
};

// 1 - (p_max - p_second) per row.
std::vector<double> min_margin_values(const ProbabilityMatrix& probs);
PropertyScores min_margin(const ProbabilityMatrix& probs);

struct ColumnMoments {
  std::vector<double> mean;
  std::vector<double> variance;  // population variance
  std::vector<double> median;    // mean of the two middle values for even n
};

// Per-column statistics of a row-major n x d matrix.
ColumnMoments column_moments(std::span<const float> features, std::size_t n, std::size_t d);

struct EccentricityConfig {
  // Coordinates are multiplied by variance^-exponent before the distance.
  // 1.0 scales by 1/sigma^2, 0.5 by 1/sigma.
  double variance_exponent = 1.0;
};

// Distance of each variance-scaled row to the scaled per-dimension median.
// Population variance; dimensions with variance < 1e-12 are skipped.
std::vector<double> eccentricity_values(const EmbeddingDataset& ds,
                                        const EccentricityConfig& config = {});
PropertyScores eccentricity(const EmbeddingDataset& ds, const ProbabilityMatrix& probs,
                            const EccentricityConfig& config = {});

// sqrt of the base-2 Jensen-Shannon divergence, in [0, 1].
double js_distance(std::span<const double> p, std::span<const double> q);

struct NeighborhoodConfig {
  std::size_t k = 20;
};

// Row-major n x k neighbor table, each row ordered by (distance, index).
struct NeighborGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;

  std::span<const std::uint32_t> neighbors(std::size_t i) const noexcept {
    return {indices.data() + i * k, k};
  }
  bool operator==(const NeighborGraph&) const = default;
};

struct KnnOptions {
  // Problems with n*n*d at or below this use direct double-precision
  // distances. Larger ones go through a float32 Gram matrix (BLAS) for
  // candidates, then re-rank the candidates with exact distances.
  double exact_work_limit = 4.0e9;
  // Extra candidates kept per row on the Gram path.
  std::size_t candidate_slack = 12;
  std::size_t tile_rows = 2048;
};

// k nearest neighbors of one row by Euclidean distance, excluding the query.
std::vector<std::size_t> knn(const EmbeddingDataset& ds, std::size_t query,
                             const NeighborhoodConfig& config = {});
NeighborGraph knn_all(const EmbeddingDataset& ds, const NeighborhoodConfig& config = {},
                      const KnnOptions& options = {});

// Mean js_distance between each row and its feature-space neighbors.
std::vector<double> disagreement_values(const NeighborGraph& graph,
                                        const ProbabilityMatrix& probs);
PropertyScores disagreement(const EmbeddingDataset& ds, const ProbabilityMatrix& probs,
                            const NeighborhoodConfig& config = {});
PropertyScores disagreement(const NeighborGraph& graph, const ProbabilityMatrix& probs);

struct ScoredInstance {
  std::size_t index = 0;
  double value = 0.0;
  bool operator==(const ScoredInstance&) const = default;
};

using ClassPartitions = std::vector<std::vector<ScoredInstance>>;

// One ascending list per class (ties by index). When `eligible` is given,
// only instances with eligible[i] != 0 are placed.
ClassPartitions partition_by_class(const PropertyScores& scores,
                                   std::span<const std::uint8_t> eligible = {});

}  // namespace cvil
