#include "cvil/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "cvil/error.hpp"

namespace cvil {

namespace fs = std::filesystem;

// --- schema ------------------------------------------------------------------

ClassSchema::ClassSchema(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() < 2)
    throw Error(errc::kInvalidArgument, "class schema needs at least 2 classes");
  std::unordered_set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw Error(errc::kInvalidArgument, "class names must be non-empty");
    if (!seen.insert(n).second)
      throw Error(errc::kInvalidArgument, "duplicate class name '" + n + "'");
  }
}

const std::string& ClassSchema::name(ClassId c) const {
  if (!contains(c))
    throw Error(errc::kUnknownClass, "unknown class id " + std::to_string(c));
  return names_[static_cast<std::size_t>(c)];
}

std::optional<ClassId> ClassSchema::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<ClassId>(i);
  return std::nullopt;
}

ClassSchema parse_class_schema(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(errc::kParse, std::string("class schema: ") + e.what());
  }
  const nlohmann::json& list = j.is_object() ? j.value("classes", nlohmann::json()) : j;
  if (!list.is_array()) throw Error(errc::kParse, "class schema: expected a list of classes");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& e = list[i];
    if (e.is_string()) {
      names.push_back(e.get<std::string>());
    } else if (e.is_object() && e.contains("name")) {
      if (e.contains("id") && e["id"].get<long long>() != static_cast<long long>(i))
        throw Error(errc::kParse, "class schema: ids must be contiguous from 0 in order");
      names.push_back(e["name"].get<std::string>());
    } else {
      throw Error(errc::kParse, "class schema: entry " + std::to_string(i) + " is malformed");
    }
  }
  return ClassSchema(std::move(names));
}

ClassSchema read_class_schema(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(errc::kIo, "cannot open class schema " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_class_schema(ss.str());
}

// --- dataset -----------------------------------------------------------------

EmbeddingDataset::EmbeddingDataset(ClassSchema schema, std::size_t n, std::size_t d,
                                   std::vector<float> features, std::vector<std::string> ids,
                                   std::optional<std::vector<ClassId>> ground_truth,
                                   std::vector<std::string> image_refs)
    : schema_(std::move(schema)),
      n_(n),
      d_(d),
      features_(std::move(features)),
      ids_(std::move(ids)),
      ground_truth_(std::move(ground_truth)),
      image_refs_(std::move(image_refs)) {
  if (n_ < 1 || d_ < 1) throw Error(errc::kInvalidArgument, "dataset needs n >= 1 and d >= 1");
  if (features_.size() != n_ * d_)
    throw Error(errc::kInvalidArgument, "feature buffer does not match n x d");
  if (ids_.size() != n_) throw Error(errc::kInvalidArgument, "id count does not match n");

  std::vector<std::string> bad;
  for (std::size_t i = 0; i < n_; ++i) {
    auto r = row(i);
    if (!std::all_of(r.begin(), r.end(), [](float v) { return std::isfinite(v); }))
      bad.push_back(ids_[i]);
  }
  if (!bad.empty()) {
    std::string msg = "non-finite feature values in rows:";
    for (std::size_t i = 0; i < bad.size() && i < 20; ++i) msg += " " + bad[i];
    if (bad.size() > 20) msg += " ... (" + std::to_string(bad.size()) + " rows)";
    throw Error(errc::kNonFinite, msg);
  }

  index_.reserve(n_);
  for (std::size_t i = 0; i < n_; ++i)
    if (!index_.emplace(ids_[i], i).second)
      throw Error(errc::kDuplicateId, "duplicate instance id '" + ids_[i] + "'");

  if (ground_truth_) {
    if (ground_truth_->size() != n_)
      throw Error(errc::kInvalidArgument, "ground truth length does not match n");
    for (std::size_t i = 0; i < n_; ++i)
      if (!schema_.contains((*ground_truth_)[i]))
        throw Error(errc::kUnknownClass, "unknown class id " +
                                             std::to_string((*ground_truth_)[i]) +
                                             " for instance '" + ids_[i] + "'");
  }
  if (!image_refs_.empty() && image_refs_.size() != n_)
    throw Error(errc::kInvalidArgument, "image reference count does not match n");
}

std::optional<std::size_t> EmbeddingDataset::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingDataset::require_index(std::string_view id) const {
  auto i = index_of(id);
  if (!i) throw Error(errc::kUnknownId, "unknown instance id '" + std::string(id) + "'");
  return *i;
}

std::span<const ClassId> EmbeddingDataset::ground_truth() const {
  if (!ground_truth_) throw Error(errc::kMissingGroundTruth, "dataset has no ground truth");
  return *ground_truth_;
}

const std::string& EmbeddingDataset::image_ref(std::size_t i) const {
  static const std::string none;
  return image_refs_.empty() ? none : image_refs_.at(i);
}

EmbeddingDataset EmbeddingDataset::subset(std::span<const std::size_t> rows) const {
  std::vector<float> feats;
  feats.reserve(rows.size() * d_);
  std::vector<std::string> ids;
  std::optional<std::vector<ClassId>> gt;
  if (ground_truth_) gt.emplace();
  std::vector<std::string> images;
  for (std::size_t r : rows) {
    auto src = row(r);
    feats.insert(feats.end(), src.begin(), src.end());
    ids.push_back(ids_.at(r));
    if (gt) gt->push_back((*ground_truth_)[r]);
    if (!image_refs_.empty()) images.push_back(image_refs_[r]);
  }
  EmbeddingDataset out(schema_, rows.size(), d_, std::move(feats), std::move(ids),
                       std::move(gt), std::move(images));
  out.images_root_ = images_root_;
  return out;
}

// --- ledger ------------------------------------------------------------------

std::string_view to_string(LabelState s) {
  switch (s) {
    case LabelState::unlabeled: return "unlabeled";
    case LabelState::instance: return "instance";
    case LabelState::batch: return "batch";
  }
  return "?";
}

void LabelLedger::check_index(std::size_t i) const {
  if (i >= entries_.size())
    throw Error(errc::kUnknownId, "instance index " + std::to_string(i) + " out of range");
}

void LabelLedger::label_instance(std::size_t i, ClassId c) {
  check_index(i);
  if (c < 0) throw Error(errc::kUnknownClass, "invalid class id " + std::to_string(c));
  entries_[i] = {LabelState::instance, c, sequence_};
}

void LabelLedger::label_batch(std::size_t i, ClassId c) {
  check_index(i);
  if (c < 0) throw Error(errc::kUnknownClass, "invalid class id " + std::to_string(c));
  if (entries_[i].state == LabelState::instance)
    throw Error(errc::kForbiddenTransition,
                "instance " + std::to_string(i) + " carries an instance label; batch labeling it is not allowed");
  entries_[i] = {LabelState::batch, c, sequence_};
}

std::size_t LabelLedger::count(LabelState s) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [s](const LabelEntry& e) { return e.state == s; }));
}

std::vector<std::size_t> LabelLedger::indices(LabelState s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].state == s) out.push_back(i);
  return out;
}

// --- CSV helpers -------------------------------------------------------------

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r'))
      f.remove_suffix(1);
  }
  return out;
}

bool getline_trimmed(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) return true;
  }
  return false;
}

float parse_float(std::string_view s, bool& ok) {
  float v = 0.0f;
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  ok = ec == std::errc() && p == s.data() + s.size();
  // from_chars reports out-of-range for overflow; treat it as infinite.
  if (ec == std::errc::result_out_of_range) {
    ok = true;
    v = std::numeric_limits<float>::infinity();
  }
  return v;
}

std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), sizeof(T)))
    throw Error(errc::kParse, std::string("truncated binary file while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

constexpr std::array<char, 4> kFeatureMagic{'C', 'V', 'I', 'L'};
constexpr std::array<char, 4> kLabelMagic{'L', 'A', 'B', 'L'};
constexpr std::uint8_t kBinaryVersion = 1;

}  // namespace

EmbeddingDataset read_features_csv(std::istream& in, const ClassSchema& schema) {
  std::string line;
  if (!getline_trimmed(in, line)) throw Error(errc::kParse, "empty feature file");
  auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "id")
    throw Error(errc::kParse, "malformed header: expected 'id,f0,...'");
  bool has_label = header.back() == "label";
  std::size_t d = header.size() - 1 - (has_label ? 1 : 0);
  if (d == 0) throw Error(errc::kParse, "malformed header: no feature columns");
  for (std::size_t j = 0; j < d; ++j)
    if (header[1 + j] != "f" + std::to_string(j))
      throw Error(errc::kParse, "malformed header: column " + std::to_string(j + 1) +
                                    " should be 'f" + std::to_string(j) + "'");

  std::vector<float> feats;
  std::vector<std::string> ids;
  std::vector<ClassId> labels;
  std::size_t line_no = 1;
  while (getline_trimmed(in, line)) {
    ++line_no;
    auto fields = split_csv(line);
    if (fields.size() != header.size())
      throw Error(errc::kParse, "row-length mismatch on line " + std::to_string(line_no) +
                                    ": expected " + std::to_string(header.size()) +
                                    " fields, got " + std::to_string(fields.size()));
    ids.emplace_back(fields[0]);
    if (ids.back().empty())
      throw Error(errc::kParse, "empty id on line " + std::to_string(line_no));
    for (std::size_t j = 0; j < d; ++j) {
      bool ok = false;
      float v = parse_float(fields[1 + j], ok);
      if (!ok)
        throw Error(errc::kParse, "unparseable value '" + std::string(fields[1 + j]) +
                                      "' in row '" + ids.back() + "'");
      feats.push_back(v);
    }
    if (has_label) {
      auto c = parse_int(fields.back());
      if (!c || !schema.contains(static_cast<ClassId>(*c)))
        throw Error(errc::kUnknownClass, "unknown class id '" + std::string(fields.back()) +
                                             "' in row '" + ids.back() + "'");
      labels.push_back(static_cast<ClassId>(*c));
    }
  }
  if (ids.empty()) throw Error(errc::kParse, "feature file has no rows");
  std::optional<std::vector<ClassId>> gt;
  if (has_label) gt = std::move(labels);
  const std::size_t n = ids.size();
  return EmbeddingDataset(schema, n, d, std::move(feats), std::move(ids), std::move(gt));
}

EmbeddingDataset read_features_binary(std::istream& in, const ClassSchema& schema) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kFeatureMagic)
    throw Error(errc::kParse, "malformed header: missing CVIL magic");
  auto version = get_le<std::uint8_t>(in, "version");
  if (version != kBinaryVersion)
    throw Error(errc::kParse, "malformed header: unsupported version " + std::to_string(version));
  auto n = get_le<std::uint32_t>(in, "n");
  auto d = get_le<std::uint32_t>(in, "d");
  if (n == 0 || d == 0) throw Error(errc::kParse, "malformed header: n and d must be positive");
  std::vector<float> feats(static_cast<std::size_t>(n) * d);
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(feats.data()),
                 static_cast<std::streamsize>(feats.size() * sizeof(float))))
      throw Error(errc::kParse, "truncated binary file: expected " + std::to_string(n) + "x" +
                                    std::to_string(d) + " float32 values");
  } else {
    for (auto& v : feats) v = get_le<float>(in, "features");
  }
  std::vector<std::string> ids(n);
  for (std::uint32_t i = 0; i < n; ++i) ids[i] = std::to_string(i);

  std::optional<std::vector<ClassId>> gt;
  std::array<char, 4> tag{};
  if (in.read(tag.data(), 4)) {
    if (tag != kLabelMagic) throw Error(errc::kParse, "unexpected trailing block in binary file");
    gt.emplace(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      auto c = get_le<std::int32_t>(in, "labels");
      if (!schema.contains(c))
        throw Error(errc::kUnknownClass,
                    "unknown class id " + std::to_string(c) + " in row '" + ids[i] + "'");
      (*gt)[i] = c;
    }
  } else if (in.gcount() != 0) {
    throw Error(errc::kParse, "truncated label block");
  }
  return EmbeddingDataset(schema, n, d, std::move(feats), std::move(ids), std::move(gt));
}

void write_features_csv(const EmbeddingDataset& ds, std::ostream& out) {
  out << "id";
  for (std::size_t j = 0; j < ds.dim(); ++j) out << ",f" << j;
  if (ds.has_ground_truth()) out << ",label";
  out << '\n';
  std::array<char, 32> buf;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.id(i);
    for (float v : ds.row(i)) {
      auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      out << ',' << std::string_view(buf.data(), static_cast<std::size_t>(p - buf.data()));
    }
    if (ds.has_ground_truth()) out << ',' << ds.ground_truth()[i];
    out << '\n';
  }
}

void write_features_binary(const EmbeddingDataset& ds, std::ostream& out) {
  out.write(kFeatureMagic.data(), 4);
  put_le<std::uint8_t>(out, kBinaryVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.dim()));
  for (float v : ds.features()) put_le<float>(out, v);
  if (ds.has_ground_truth()) {
    out.write(kLabelMagic.data(), 4);
    for (ClassId c : ds.ground_truth()) put_le<std::int32_t>(out, c);
  }
}

std::vector<ClassId> read_labels_csv(std::istream& in, const EmbeddingDataset& ds) {
  std::vector<ClassId> out(ds.size(), kNoClass);
  std::string line;
  bool first = true;
  std::size_t line_no = 0;
  while (getline_trimmed(in, line)) {
    ++line_no;
    auto fields = split_csv(line);
    if (fields.size() != 2)
      throw Error(errc::kParse, "labels file line " + std::to_string(line_no) +
                                    ": expected 'id,class_id'");
    if (first && fields[0] == "id" && fields[1] == "class_id") {
      first = false;
      continue;
    }
    first = false;
    auto idx = ds.index_of(fields[0]);
    if (!idx)
      throw Error(errc::kUnknownId, "labels file references unknown id '" +
                                        std::string(fields[0]) + "'");
    auto c = parse_int(fields[1]);
    if (!c || !ds.schema().contains(static_cast<ClassId>(*c)))
      throw Error(errc::kUnknownClass, "unknown class id '" + std::string(fields[1]) +
                                           "' for id '" + std::string(fields[0]) + "'");
    if (out[*idx] != kNoClass)
      throw Error(errc::kDuplicateId, "labels file lists id '" + std::string(fields[0]) + "' twice");
    out[*idx] = static_cast<ClassId>(*c);
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] == kNoClass)
      throw Error(errc::kParse, "labels file has no entry for id '" + ds.id(i) + "'");
  return out;
}

EmbeddingDataset ingest(const fs::path& features_file, const ClassSchema& schema,
                        const std::optional<fs::path>& labels_file,
                        const std::optional<fs::path>& images_dir) {
  std::ifstream in(features_file, std::ios::binary);
  if (!in) throw Error(errc::kIo, "cannot open feature file " + features_file.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  const bool binary = in.gcount() == 4 && magic == kFeatureMagic;
  in.clear();
  in.seekg(0);

  EmbeddingDataset ds = binary ? read_features_binary(in, schema) : read_features_csv(in, schema);

  std::optional<std::vector<ClassId>> gt;
  if (ds.has_ground_truth()) gt.emplace(ds.ground_truth().begin(), ds.ground_truth().end());
  if (labels_file) {
    std::ifstream lin(*labels_file);
    if (!lin) throw Error(errc::kIo, "cannot open labels file " + labels_file->string());
    gt = read_labels_csv(lin, ds);
  }

  std::vector<std::string> images;
  if (images_dir) {
    if (!fs::is_directory(*images_dir))
      throw Error(errc::kIo, "images directory " + images_dir->string() + " does not exist");
    std::unordered_map<std::string, std::string> by_stem;
    for (const auto& entry : fs::recursive_directory_iterator(*images_dir)) {
      if (!entry.is_regular_file()) continue;
      auto rel = fs::relative(entry.path(), *images_dir).generic_string();
      auto stem = entry.path().stem().string();
      auto [it, inserted] = by_stem.emplace(stem, rel);
      if (!inserted && rel < it->second) it->second = rel;
    }
    images.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto it = by_stem.find(ds.id(i));
      if (it != by_stem.end()) images[i] = it->second;
    }
  }

  if (!labels_file && images.empty()) return ds;
  std::vector<float> feats(ds.features().begin(), ds.features().end());
  EmbeddingDataset out(schema, ds.size(), ds.dim(), std::move(feats), ds.ids(), std::move(gt),
                       std::move(images));
  if (images_dir) out.set_images_root(*images_dir);
  return out;
}

// --- export ------------------------------------------------------------------

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::instance: return "instance";
    case Provenance::batch: return "batch";
    case Provenance::predicted: return "predicted";
  }
  return "?";
}

std::vector<ExportRecord> export_labels(const EmbeddingDataset& ds, const LabelLedger& ledger,
                                        std::span<const ClassId> predictions) {
  if (ledger.size() != ds.size())
    throw Error(errc::kInvalidArgument, "ledger size does not match dataset");
  const bool need_predictions = ledger.count(LabelState::unlabeled) > 0;
  if (need_predictions && predictions.size() != ds.size())
    throw Error(errc::kMissingPredictions,
                "model predictions are required to export unlabeled instances");
  std::vector<ExportRecord> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& e = ledger.at(i);
    switch (e.state) {
      case LabelState::instance: out.push_back({ds.id(i), e.assigned, Provenance::instance}); break;
      case LabelState::batch: out.push_back({ds.id(i), e.assigned, Provenance::batch}); break;
      case LabelState::unlabeled:
        if (!ds.schema().contains(predictions[i]))
          throw Error(errc::kUnknownClass, "prediction for '" + ds.id(i) + "' is not a valid class");
        out.push_back({ds.id(i), predictions[i], Provenance::predicted});
        break;
    }
  }
  return out;
}

void write_export_csv(std::span<const ExportRecord> records, std::ostream& out) {
  out << "id,class_id,provenance\n";
  for (const auto& r : records) out << r.id << ',' << r.class_id << ',' << to_string(r.provenance) << '\n';
}

std::string export_csv_string(std::span<const ExportRecord> records) {
  std::ostringstream ss;
  write_export_csv(records, ss);
  return ss.str();
}

double export_accuracy(std::span<const ExportRecord> records, const EmbeddingDataset& ds) {
  auto gt = ds.ground_truth();
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records)
    if (gt[ds.require_index(r.id)] == r.class_id) ++correct;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

}  // namespace cvil
