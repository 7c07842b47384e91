#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cvil/dataset.hpp"
#include "cvil/error.hpp"
#include "support.hpp"

using namespace cvil;
using testing_support::dataset_of;
using testing_support::error_code_of;
using testing_support::schema_of;

TEST(ClassSchemaTest, ParsesNamesAndObjects) {
  auto a = parse_class_schema(R"(["cat","dog"])");
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(a.name(1), "dog");
  auto b = parse_class_schema(R"({"classes":[{"id":0,"name":"x"},{"id":1,"name":"y"},{"id":2,"name":"z"}]})");
  EXPECT_EQ(b.find("z"), 2);
  EXPECT_FALSE(b.find("w").has_value());
}

TEST(ClassSchemaTest, RejectsInvalidSchemas) {
  EXPECT_EQ(error_code_of([] { parse_class_schema(R"(["only"])"); }), errc::kInvalidArgument);
  EXPECT_EQ(error_code_of([] { parse_class_schema(R"(["a","a"])"); }), errc::kInvalidArgument);
  EXPECT_EQ(error_code_of([] { parse_class_schema(R"({"classes":[{"id":1,"name":"a"},{"id":0,"name":"b"}]})"); }),
            errc::kParse);
  EXPECT_EQ(error_code_of([] { parse_class_schema("{not json"); }), errc::kParse);
}

TEST(IngestTest, MinimalCsvHasNoLabels) {
  std::istringstream in("id,f0,f1\na,0,1\nb,2,3\nc,4,5\n");
  auto ds = read_features_csv(in, schema_of(2));
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_FALSE(ds.has_ground_truth());
  EXPECT_FLOAT_EQ(ds.row(2)[1], 5.0f);
  EXPECT_EQ(ds.index_of("b"), 1u);
  LabelLedger ledger(ds.size());
  EXPECT_EQ(ledger.count(LabelState::unlabeled), 3u);
}

TEST(IngestTest, InfinityIsRejectedNamingTheRow) {
  std::istringstream in("id,f0,f1\na,0,1\nbad_row,inf,3\n");
  try {
    read_features_csv(in, schema_of(2));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("bad_row"), std::string::npos);
  }
}

TEST(IngestTest, NanIsRejected) {
  std::istringstream in("id,f0\nx,nan\n");
  EXPECT_EQ(error_code_of([&] { read_features_csv(in, schema_of(2)); }), errc::kNonFinite);
}

TEST(IngestTest, MalformedInputsAreRejected) {
  auto code = [](const std::string& text) {
    std::istringstream in(text);
    return error_code_of([&] { read_features_csv(in, schema_of(2)); });
  };
  EXPECT_EQ(code("name,f0\na,1\n"), errc::kParse);
  EXPECT_EQ(code("id,f0,f1\na,1\n"), errc::kParse);
  EXPECT_EQ(code("id,f0\na,1\na,2\n"), errc::kDuplicateId);
  EXPECT_EQ(code("id,f0,label\na,1,7\n"), errc::kUnknownClass);
  EXPECT_EQ(code("id,f0\na,abc\n"), errc::kParse);
  EXPECT_EQ(code(""), errc::kParse);
}

TEST(IngestTest, CsvLabelColumnBecomesGroundTruth) {
  std::istringstream in("id,f0,label\na,1,1\nb,2,0\n");
  auto ds = read_features_csv(in, schema_of(2));
  ASSERT_TRUE(ds.has_ground_truth());
  EXPECT_EQ(ds.ground_truth()[0], 1);
  EXPECT_EQ(ds.ground_truth()[1], 0);
}

TEST(IngestTest, BinaryRoundTripPreservesShapeValuesAndLabels) {
  std::mt19937_64 rng(1);
  auto m = oracle::random_matrix(50, 7, rng);
  std::vector<ClassId> gt(50);
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = static_cast<ClassId>(i % 3);
  auto ds = dataset_of(m, 3, gt);
  std::stringstream buf;
  write_features_binary(ds, buf);
  auto back = read_features_binary(buf, schema_of(3));
  EXPECT_EQ(back.size(), 50u);
  EXPECT_EQ(back.dim(), 7u);
  EXPECT_TRUE(std::equal(ds.features().begin(), ds.features().end(), back.features().begin()));
  EXPECT_TRUE(std::equal(gt.begin(), gt.end(), back.ground_truth().begin()));
  EXPECT_EQ(back.id(4), "4");
}

TEST(IngestTest, BinaryHeaderLayoutIsLittleEndian) {
  auto ds = dataset_of({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}});
  std::stringstream buf;
  write_features_binary(ds, buf);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 4u + 4u + 6u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "CVIL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 3u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 2u);
  float first;
  std::memcpy(&first, bytes.data() + 13, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(IngestTest, BinaryTruncationIsReported) {
  auto ds = dataset_of({{1.0, 2.0}, {3.0, 4.0}});
  std::stringstream buf;
  write_features_binary(ds, buf);
  std::istringstream cut(buf.str().substr(0, buf.str().size() - 3));
  EXPECT_EQ(error_code_of([&] { read_features_binary(cut, schema_of(2)); }), errc::kParse);
}

TEST(IngestTest, LargeBinaryShape) {
  const std::size_t n = 16000, d = 1024;
  std::vector<float> f(n * d);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(i % 97) * 0.01f;
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  EmbeddingDataset ds(schema_of(10), n, d, std::move(f), std::move(ids));
  std::stringstream buf;
  write_features_binary(ds, buf);
  auto back = read_features_binary(buf, schema_of(10));
  EXPECT_EQ(back.size(), n);
  EXPECT_EQ(back.dim(), d);
}

TEST(IngestTest, FilesWithLabelsAndImages) {
  auto dir = testing_support::scratch_dir("ingest");
  {
    std::ofstream(dir / "f.csv") << "id,f0,f1\na,0,1\nb,2,3\n";
    std::ofstream(dir / "l.csv") << "id,class_id\nb,0\na,1\n";
    std::filesystem::create_directories(dir / "img");
    std::ofstream(dir / "img" / "a.png") << "png";
  }
  auto ds = ingest(dir / "f.csv", schema_of(2), dir / "l.csv", dir / "img");
  EXPECT_EQ(ds.ground_truth()[0], 1);
  EXPECT_EQ(ds.ground_truth()[1], 0);
  EXPECT_EQ(ds.image_ref(0), "a.png");
  EXPECT_EQ(ds.image_ref(1), "");

  std::ofstream(dir / "bad_labels.csv") << "a,5\nb,0\n";
  EXPECT_EQ(error_code_of([&] { ingest(dir / "f.csv", schema_of(2), dir / "bad_labels.csv"); }),
            errc::kUnknownClass);
  EXPECT_EQ(error_code_of([&] { ingest(dir / "missing.csv", schema_of(2)); }), errc::kIo);
}

TEST(LedgerTest, AllowedTransitions) {
  LabelLedger l(3);
  l.label_instance(0, 1);
  l.label_batch(1, 0);
  l.label_instance(1, 1);  // batch -> instance
  l.label_instance(0, 0);  // instance -> instance
  l.label_batch(2, 0);
  l.label_batch(2, 1);  // batch -> batch
  EXPECT_EQ(l.state(0), LabelState::instance);
  EXPECT_EQ(l.at(0).assigned, 0);
  EXPECT_EQ(l.state(1), LabelState::instance);
  EXPECT_EQ(l.at(2).assigned, 1);
}

TEST(LedgerTest, InstanceToBatchIsForbidden) {
  LabelLedger l(2);
  l.label_instance(0, 1);
  EXPECT_EQ(error_code_of([&] { l.label_batch(0, 0); }), errc::kForbiddenTransition);
  EXPECT_EQ(l.state(0), LabelState::instance);
  EXPECT_EQ(l.at(0).assigned, 1);
  EXPECT_EQ(error_code_of([&] { l.label_instance(5, 0); }), errc::kUnknownId);
}

TEST(LedgerTest, FuzzedActionsNeverDowngradeAndCountsAddUp) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    LabelLedger l(n);
    std::vector<bool> ever_instance(n, false);
    for (int step = 0; step < 200; ++step) {
      const std::size_t i = rng() % n;
      const ClassId c = static_cast<ClassId>(rng() % 3);
      const auto before = l.at(i);
      if (rng() % 2) {
        l.label_instance(i, c);
        ever_instance[i] = true;
      } else {
        const auto code = error_code_of([&] { l.label_batch(i, c); });
        if (before.state == LabelState::instance) {
          EXPECT_EQ(code, errc::kForbiddenTransition);
          EXPECT_EQ(l.at(i).assigned, before.assigned);
        } else {
          EXPECT_EQ(code, "");
        }
      }
      l.advance();
      ASSERT_EQ(l.count(LabelState::unlabeled) + l.count(LabelState::instance) +
                    l.count(LabelState::batch),
                n);
      for (std::size_t j = 0; j < n; ++j)
        if (ever_instance[j]) ASSERT_EQ(l.state(j), LabelState::instance);
    }
  }
}

TEST(ExportTest, AllLabeledHasNoPredictedRecords) {
  auto ds = dataset_of({{0.0}, {1.0}});
  LabelLedger l(2);
  l.label_instance(0, 0);
  l.label_batch(1, 1);
  auto recs = export_labels(ds, l, {});
  for (const auto& r : recs) EXPECT_NE(r.provenance, Provenance::predicted);
}

TEST(ExportTest, ColdExportIsAllPredicted) {
  auto ds = dataset_of({{0.0}, {1.0}, {2.0}});
  LabelLedger l(3);
  std::vector<ClassId> pred{1, 0, 1};
  auto recs = export_labels(ds, l, pred);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].provenance, Provenance::predicted);
    EXPECT_EQ(recs[i].class_id, pred[i]);
  }
}

TEST(ExportTest, LedgerWinsOverPrediction) {
  auto ds = dataset_of({{0.0}, {1.0}});
  LabelLedger l(2);
  l.label_instance(0, 1);
  std::vector<ClassId> pred{0, 0};
  auto recs = export_labels(ds, l, pred);
  EXPECT_EQ(export_csv_string(recs), "id,class_id,provenance\ni0,1,instance\ni1,0,predicted\n");
}

TEST(ExportTest, MissingPredictionsIsAnError) {
  auto ds = dataset_of({{0.0}, {1.0}});
  LabelLedger l(2);
  l.label_instance(0, 1);
  EXPECT_EQ(error_code_of([&] { export_labels(ds, l, {}); }), errc::kMissingPredictions);
}

TEST(ExportTest, ZeroLabelConstantPredictorKeepsEveryIdOnce) {
  std::mt19937_64 rng(5);
  auto ds = dataset_of(oracle::random_matrix(64, 3, rng));
  LabelLedger l(ds.size());
  std::vector<ClassId> pred(ds.size(), 1);
  auto recs = export_labels(ds, l, pred);
  std::multiset<std::string> seen;
  for (const auto& r : recs) seen.insert(r.id);
  ASSERT_EQ(seen.size(), ds.size());
  for (const auto& id : ds.ids()) EXPECT_EQ(seen.count(id), 1u);
}

TEST(ExportAccuracyTest, Examples) {
  auto ds = dataset_of({{0.0}, {1.0}, {2.0}, {3.0}}, 2, std::vector<ClassId>{0, 1, 0, 1});
  auto rec = [&](std::vector<ClassId> cls) {
    std::vector<ExportRecord> r;
    for (std::size_t i = 0; i < cls.size(); ++i) r.push_back({ds.id(i), cls[i], Provenance::predicted});
    return r;
  };
  EXPECT_DOUBLE_EQ(export_accuracy(rec({0, 1, 0, 1}), ds), 1.0);
  EXPECT_DOUBLE_EQ(export_accuracy(rec({0, 1, 1, 0}), ds), 0.5);
  EXPECT_DOUBLE_EQ(export_accuracy(rec({1, 0, 1, 0}), ds), 0.0);
}

TEST(ExportAccuracyTest, InvariantUnderReorderingAndNeedsGroundTruth) {
  std::mt19937_64 rng(9);
  std::vector<ClassId> gt(40);
  for (auto& c : gt) c = static_cast<ClassId>(rng() % 3);
  auto ds = dataset_of(oracle::random_matrix(40, 2, rng), 3, gt);
  std::vector<ExportRecord> recs;
  for (std::size_t i = 0; i < 40; ++i)
    recs.push_back({ds.id(i), static_cast<ClassId>(rng() % 3), Provenance::predicted});
  const double a = export_accuracy(recs, ds);
  std::shuffle(recs.begin(), recs.end(), rng);
  EXPECT_DOUBLE_EQ(export_accuracy(recs, ds), a);

  auto unlabeled = dataset_of({{0.0}});
  EXPECT_EQ(error_code_of([&] { export_accuracy(recs, unlabeled); }), errc::kMissingGroundTruth);
}
