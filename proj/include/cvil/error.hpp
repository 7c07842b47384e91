#pragma once

#include <stdexcept>
#include <string>

namespace cvil {

// Error carrying a stable machine-readable code. The service layer puts the
// code verbatim into the API error envelope.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

namespace errc {
inline constexpr const char* kInvalidArgument = "invalid_argument";
inline constexpr const char* kParse = "parse_error";
inline constexpr const char* kNonFinite = "non_finite";
inline constexpr const char* kDuplicateId = "duplicate_id";
inline constexpr const char* kUnknownClass = "unknown_class";
inline constexpr const char* kUnknownId = "unknown_id";
inline constexpr const char* kForbiddenTransition = "forbidden_transition";
inline constexpr const char* kUntrained = "untrained";
inline constexpr const char* kBusy = "busy";
inline constexpr const char* kClassMismatch = "class_mismatch";
inline constexpr const char* kStaleSequence = "stale_sequence";
inline constexpr const char* kCancelled = "cancelled";
inline constexpr const char* kIo = "io_error";
inline constexpr const char* kMissingGroundTruth = "missing_ground_truth";
inline constexpr const char* kMissingPredictions = "missing_predictions";
inline constexpr const char* kNotFound = "not_found";
}  // namespace errc

}  // namespace cvil
