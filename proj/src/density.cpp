#include "cvil/density.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cvil/error.hpp"

namespace cvil {

namespace {

// Linear-interpolated quantile of sorted data (type 7).
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

void check_class(ClassId c, std::size_t num_classes) {
  if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
    throw Error(errc::kUnknownClass, "unknown class id " + std::to_string(c));
}

}  // namespace

double silverman_bandwidth(std::span<const double> values) {
  const std::size_t m = values.size();
  if (m < 2) return kMinBandwidth;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(m);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(m - 1));

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);

  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(m), -0.2);
  return std::max(h, kMinBandwidth);
}

DensityCurve kde_curve(std::span<const double> values, ClassId class_id, std::size_t points) {
  DensityCurve curve;
  curve.class_id = class_id;
  if (values.empty()) return curve;
  if (points < 2) throw Error(errc::kInvalidArgument, "need at least two evaluation points");
  for (double v : values)
    if (!std::isfinite(v)) throw Error(errc::kNonFinite, "density input contains a non-finite value");

  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double h = silverman_bandwidth(values);
  curve.count = values.size();
  curve.value_min = *mn;
  curve.value_max = *mx;
  curve.bandwidth = h;

  const double x0 = *mn - 4.0 * h;
  const double x1 = *mx + 4.0 * h;
  const double step = (x1 - x0) / static_cast<double>(points - 1);
  curve.x.resize(points);
  curve.y.assign(points, 0.0);
  for (std::size_t j = 0; j < points; ++j) curve.x[j] = x0 + step * static_cast<double>(j);

  const double inv_h = 1.0 / h;
  const double norm =
      1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t j = 0; j < points; ++j) {
    const double xj = curve.x[j];
    double acc = 0.0;
    for (double v : values) {
      const double u = (xj - v) * inv_h;
      acc += std::exp(-0.5 * u * u);
    }
    curve.y[j] = acc * norm;
  }
  return curve;
}

double curve_integral(const DensityCurve& curve) {
  double area = 0.0;
  for (std::size_t j = 1; j < curve.x.size(); ++j)
    area += 0.5 * (curve.y[j] + curve.y[j - 1]) * (curve.x[j] - curve.x[j - 1]);
  return area;
}

std::vector<ScoredInstance> unlabeled_partition(ClassId class_id, const PropertyScores& scores,
                                                const LabelLedger& ledger) {
  check_class(class_id, scores.num_classes);
  if (ledger.size() != scores.size())
    throw Error(errc::kInvalidArgument, "ledger and scores cover different instance counts");
  std::vector<ScoredInstance> out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores.predicted_class[i] == class_id && ledger.is_unlabeled(i))
      out.push_back({i, scores.values[i]});
  return out;
}

SelectionResult resolve_selection(const RangeSelection& selection, const PropertyScores& scores,
                                  const LabelLedger& ledger, std::size_t limit) {
  if (!(selection.lo <= selection.hi))
    throw Error(errc::kInvalidArgument, "selection requires lo <= hi");
  auto part = unlabeled_partition(selection.class_id, scores, ledger);
  std::erase_if(part, [&](const ScoredInstance& s) {
    return s.value < selection.lo || s.value > selection.hi;
  });
  std::sort(part.begin(), part.end(), [](const ScoredInstance& a, const ScoredInstance& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.index < b.index;
  });
  SelectionResult result;
  result.total = part.size();
  if (part.size() > limit) part.resize(limit);
  result.items = std::move(part);
  return result;
}

SelectionResult hover_preview(ClassId class_id, double value, const PropertyScores& scores,
                              const LabelLedger& ledger, std::size_t limit) {
  const auto part = unlabeled_partition(class_id, scores, ledger);
  if (part.empty()) return {};
  double lo = part.front().value;
  for (const auto& s : part) lo = std::min(lo, s.value);
  if (value < lo) return {};
  return resolve_selection({class_id, lo, value}, scores, ledger, limit);
}

std::size_t ClassStats::total() const noexcept {
  std::size_t t = unpredicted;
  for (const auto& c : per_class) t += c.instance + c.batch + c.unlabeled;
  return t;
}

ClassStats class_stats(const LabelLedger& ledger, std::size_t num_classes,
                       const PropertyScores* scores) {
  if (scores && scores->size() != ledger.size())
    throw Error(errc::kInvalidArgument, "ledger and scores cover different instance counts");
  ClassStats stats;
  stats.per_class.resize(num_classes);
  for (std::size_t i = 0; i < ledger.size(); ++i) {
    const auto& e = ledger.at(i);
    switch (e.state) {
      case LabelState::instance:
        check_class(e.assigned, num_classes);
        ++stats.per_class[static_cast<std::size_t>(e.assigned)].instance;
        break;
      case LabelState::batch:
        check_class(e.assigned, num_classes);
        ++stats.per_class[static_cast<std::size_t>(e.assigned)].batch;
        break;
      case LabelState::unlabeled:
        if (scores) {
          const ClassId c = scores->predicted_class[i];
          check_class(c, num_classes);
          ++stats.per_class[static_cast<std::size_t>(c)].unlabeled;
        } else {
          ++stats.unpredicted;
        }
        break;
    }
  }
  return stats;
}

}  // namespace cvil
