#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cvil/dataset.hpp"
#include "cvil/error.hpp"
#include "cvil/measures.hpp"
#include "oracles.hpp"

namespace testing_support {

inline cvil::ClassSchema schema_of(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < k; ++c) names.push_back("class_" + std::to_string(c));
  return cvil::ClassSchema(std::move(names));
}

inline cvil::EmbeddingDataset dataset_of(const oracle::Matrix& rows, std::size_t k = 2,
                                         std::optional<std::vector<cvil::ClassId>> gt = {}) {
  const std::size_t n = rows.size(), d = rows[0].size();
  std::vector<float> f;
  f.reserve(n * d);
  for (const auto& r : rows)
    for (double v : r) f.push_back(static_cast<float>(v));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("i" + std::to_string(i));
  return cvil::EmbeddingDataset(schema_of(k), n, d, std::move(f), std::move(ids), std::move(gt));
}

inline cvil::ProbabilityMatrix probs_of(const oracle::Matrix& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return cvil::ProbabilityMatrix(rows.size(), rows[0].size(), std::move(v));
}

inline cvil::PropertyScores scores_of(std::vector<double> values,
                                      std::vector<cvil::ClassId> predicted, std::size_t k) {
  cvil::PropertyScores s;
  s.num_classes = k;
  s.values = std::move(values);
  s.predicted_class = std::move(predicted);
  return s;
}

// Runs fn and returns the Error code it throws, or "" when it returns.
template <typename Fn>
std::string error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const cvil::Error& e) {
    return e.code();
  }
  return "";
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cvil_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
