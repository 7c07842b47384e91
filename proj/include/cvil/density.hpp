#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cvil/dataset.hpp"
#include "cvil/measures.hpp"

namespace cvil {

inline constexpr std::size_t kDensityPoints = 256;
inline constexpr double kMinBandwidth = 1e-3;

struct DensityCurve {
  ClassId class_id = kNoClass;
  std::vector<double> x;
  std::vector<double> y;
  double bandwidth = 0.0;
  std::size_t count = 0;  // partition size
  double value_min = 0.0;
  double value_max = 0.0;

  bool empty() const noexcept { return count == 0; }
  bool operator==(const DensityCurve&) const = default;
};

// Silverman's rule 0.9 * min(sd, IQR/1.34) * m^(-1/5), with sample standard
// deviation and linearly interpolated quartiles. Falls back to sd when the
// IQR is zero; never below kMinBandwidth.
double silverman_bandwidth(std::span<const double> values);

// Gaussian KDE over `points` equispaced positions on
// [min - 4h, max + 4h]. Empty input yields an empty curve (count 0).
DensityCurve kde_curve(std::span<const double> values, ClassId class_id = kNoClass,
                       std::size_t points = kDensityPoints);

// Trapezoidal integral of the curve.
double curve_integral(const DensityCurve& curve);

struct RangeSelection {
  ClassId class_id = kNoClass;
  double lo = 0.0;
  double hi = 0.0;
};

struct SelectionResult {
  std::vector<ScoredInstance> items;  // descending by value, ties by index
  std::size_t total = 0;              // matches before truncation
};

// Values of the unlabeled instances currently predicted as `class_id`.
std::vector<ScoredInstance> unlabeled_partition(ClassId class_id, const PropertyScores& scores,
                                                const LabelLedger& ledger);

// Unlabeled members of the class partition with lo <= value <= hi. A limit of
// zero returns no items but still reports the total.
SelectionResult resolve_selection(const RangeSelection& selection, const PropertyScores& scores,
                                  const LabelLedger& ledger, std::size_t limit);

// resolve_selection over [partition minimum, value].
SelectionResult hover_preview(ClassId class_id, double value, const PropertyScores& scores,
                              const LabelLedger& ledger, std::size_t limit);

struct ClassCounts {
  std::size_t instance = 0;
  std::size_t batch = 0;
  std::size_t unlabeled = 0;  // unlabeled and predicted as this class

  bool operator==(const ClassCounts&) const = default;
};

struct ClassStats {
  std::vector<ClassCounts> per_class;
  // Unlabeled instances without a prediction (no trained model yet).
  std::size_t unpredicted = 0;

  std::size_t total() const noexcept;
  bool operator==(const ClassStats&) const = default;
};

// Pass nullptr for `scores` when no model is trained.
ClassStats class_stats(const LabelLedger& ledger, std::size_t num_classes,
                       const PropertyScores* scores);

}  // namespace cvil
