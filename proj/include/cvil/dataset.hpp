#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cvil {

using ClassId = int;
inline constexpr ClassId kNoClass = -1;

// Ordered class list; class ids are the positions 0..K-1.
class ClassSchema {
 public:
  explicit ClassSchema(std::vector<std::string> names);

  std::size_t size() const noexcept { return names_.size(); }
  bool contains(ClassId c) const noexcept {
    return c >= 0 && static_cast<std::size_t>(c) < names_.size();
  }
  const std::string& name(ClassId c) const;
  std::optional<ClassId> find(std::string_view name) const;
  const std::vector<std::string>& names() const noexcept { return names_; }

  bool operator==(const ClassSchema&) const = default;

 private:
  std::vector<std::string> names_;
};

// Reads a schema from JSON: either ["a","b",...] or {"classes": [...]} where
// entries are names or {"id":..,"name":..} objects listed in id order.
ClassSchema read_class_schema(const std::filesystem::path& path);
ClassSchema parse_class_schema(std::string_view json_text);

// Immutable n x d float32 feature matrix plus per-instance metadata.
class EmbeddingDataset {
 public:
  EmbeddingDataset(ClassSchema schema, std::size_t n, std::size_t d,
                   std::vector<float> features, std::vector<std::string> ids,
                   std::optional<std::vector<ClassId>> ground_truth = {},
                   std::vector<std::string> image_refs = {});

  std::size_t size() const noexcept { return n_; }
  std::size_t dim() const noexcept { return d_; }
  const ClassSchema& schema() const noexcept { return schema_; }
  std::size_t num_classes() const noexcept { return schema_.size(); }

  std::span<const float> features() const noexcept { return features_; }
  std::span<const float> row(std::size_t i) const noexcept {
    return {features_.data() + i * d_, d_};
  }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  std::optional<std::size_t> index_of(std::string_view id) const;
  std::size_t require_index(std::string_view id) const;

  bool has_ground_truth() const noexcept { return ground_truth_.has_value(); }
  // Throws missing_ground_truth when absent.
  std::span<const ClassId> ground_truth() const;

  bool has_images() const noexcept { return !image_refs_.empty(); }
  // Relative image path for instance i, or an empty string.
  const std::string& image_ref(std::size_t i) const;
  void set_images_root(std::filesystem::path root) { images_root_ = std::move(root); }
  const std::filesystem::path& images_root() const noexcept { return images_root_; }

  // New dataset with the selected rows, in the given order.
  EmbeddingDataset subset(std::span<const std::size_t> rows) const;

 private:
  ClassSchema schema_;
  std::size_t n_;
  std::size_t d_;
  std::vector<float> features_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<std::vector<ClassId>> ground_truth_;
  std::vector<std::string> image_refs_;
  std::filesystem::path images_root_;
};

enum class LabelState : std::uint8_t { unlabeled, instance, batch };

std::string_view to_string(LabelState s);

struct LabelEntry {
  LabelState state = LabelState::unlabeled;
  ClassId assigned = kNoClass;
  std::uint64_t sequence_no = 0;  // action counter value of the last change

  bool operator==(const LabelEntry&) const = default;
};

// Per-instance label state. Mutations are expected to come from one writer.
class LabelLedger {
 public:
  explicit LabelLedger(std::size_t n) : entries_(n) {}

  std::size_t size() const noexcept { return entries_.size(); }
  const LabelEntry& at(std::size_t i) const { return entries_.at(i); }
  LabelState state(std::size_t i) const { return entries_.at(i).state; }
  bool is_unlabeled(std::size_t i) const {
    return entries_.at(i).state == LabelState::unlabeled;
  }
  std::uint64_t sequence() const noexcept { return sequence_; }

  // unlabeled|batch|instance -> instance.
  void label_instance(std::size_t i, ClassId c);
  // unlabeled|batch -> batch; instance -> batch throws forbidden_transition.
  void label_batch(std::size_t i, ClassId c);
  // Advances the action counter; returns the new value.
  std::uint64_t advance() noexcept { return ++sequence_; }

  std::size_t count(LabelState s) const noexcept;
  std::vector<std::size_t> indices(LabelState s) const;

  bool operator==(const LabelLedger&) const = default;

 private:
  void check_index(std::size_t i) const;

  std::vector<LabelEntry> entries_;
  std::uint64_t sequence_ = 0;
};

// --- ingestion -------------------------------------------------------------

// CSV with header `id,f0..f{d-1}[,label]`.
EmbeddingDataset read_features_csv(std::istream& in, const ClassSchema& schema);
// Binary: "CVIL", version byte, u32 n, u32 d, n*d float32 (all little-endian),
// optional label block "LABL" + n int32 class ids. Ids are row indices.
EmbeddingDataset read_features_binary(std::istream& in, const ClassSchema& schema);

void write_features_csv(const EmbeddingDataset& ds, std::ostream& out);
void write_features_binary(const EmbeddingDataset& ds, std::ostream& out);

// Labels file `id,class_id` (header optional). Returns per-row class ids for
// every instance of the dataset.
std::vector<ClassId> read_labels_csv(std::istream& in, const EmbeddingDataset& ds);

// Detects the feature format by magic bytes, attaches ground truth from the
// labels file and image references from images_dir (matched by file stem).
EmbeddingDataset ingest(const std::filesystem::path& features_file,
                        const ClassSchema& schema,
                        const std::optional<std::filesystem::path>& labels_file = {},
                        const std::optional<std::filesystem::path>& images_dir = {});

// --- export ----------------------------------------------------------------

enum class Provenance : std::uint8_t { instance, batch, predicted };

std::string_view to_string(Provenance p);

struct ExportRecord {
  std::string id;
  ClassId class_id = kNoClass;
  Provenance provenance = Provenance::predicted;
};

// One record per instance in dataset order. `predictions` may be empty only
// when nothing is unlabeled.
std::vector<ExportRecord> export_labels(const EmbeddingDataset& ds,
                                        const LabelLedger& ledger,
                                        std::span<const ClassId> predictions);

// Writes `id,class_id,provenance` with a header line.
void write_export_csv(std::span<const ExportRecord> records, std::ostream& out);
std::string export_csv_string(std::span<const ExportRecord> records);

// Fraction of records whose class equals the dataset's ground truth.
double export_accuracy(std::span<const ExportRecord> records, const EmbeddingDataset& ds);

}  // namespace cvil
