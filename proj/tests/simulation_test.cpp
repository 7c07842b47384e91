#include <gtest/gtest.h>

#include <algorithm>
#include <optional>
#include <sstream>

#include "cvil/simulation.hpp"
#include "support.hpp"

using namespace cvil;
using testing_support::error_code_of;

namespace {

ClassPartitions toy_partitions(std::vector<std::size_t> sizes) {
  ClassPartitions parts(sizes.size());
  std::size_t next = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    for (std::size_t j = 0; j < sizes[c]; ++j)
      parts[c].push_back({next++, static_cast<double>(j + 1) / static_cast<double>(sizes[c] + 1)});
  }
  return parts;
}

std::vector<std::size_t> count_per_class(const ClassPartitions& parts,
                                         const std::vector<std::size_t>& picked) {
  std::vector<std::size_t> counts(parts.size(), 0);
  for (std::size_t i : picked)
    for (std::size_t c = 0; c < parts.size(); ++c)
      for (const auto& e : parts[c])
        if (e.index == i) ++counts[c];
  return counts;
}

EmbeddingDataset separable_two_class(std::uint64_t seed) {
  BlobSpec spec;
  spec.centers = {{-3, 0, 0, 0, 0, 0, 0, 0}, {3, 0, 0, 0, 0, 0, 0, 0}};
  spec.per_class = 200;
  spec.seed = seed;
  return make_blobs(spec);
}

SimulationConfig config_for(Strategy s, std::size_t iterations, std::uint64_t seed) {
  SimulationConfig cfg;
  cfg.strategy = s;
  cfg.iterations = iterations;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(InstanceSelectionTest, OnePerClassForTenClasses) {
  auto parts = toy_partitions(std::vector<std::size_t>(10, 6));
  auto picked = select_instance_candidates(parts, 10);
  ASSERT_EQ(picked.size(), 10u);
  for (std::size_t c = 0; c < 10; ++c) {
    EXPECT_EQ(count_per_class(parts, picked)[c], 1u);
    // The highest value of the ascending partition is its last element.
    EXPECT_NE(std::find(picked.begin(), picked.end(), parts[c].back().index), picked.end());
  }
}

TEST(InstanceSelectionTest, EvenSplitAndRedistribution) {
  auto two = toy_partitions({20, 20});
  EXPECT_EQ(count_per_class(two, select_instance_candidates(two, 10)), (std::vector<std::size_t>{5, 5}));
  auto one_empty = toy_partitions({0, 30});
  EXPECT_EQ(count_per_class(one_empty, select_instance_candidates(one_empty, 10)),
            (std::vector<std::size_t>{0, 10}));
  auto short_one = toy_partitions({2, 30, 30});
  EXPECT_EQ(count_per_class(short_one, select_instance_candidates(short_one, 10)),
            (std::vector<std::size_t>{2, 4, 4}));
  auto three = toy_partitions({9, 9, 9});
  EXPECT_EQ(count_per_class(three, select_instance_candidates(three, 10)),
            (std::vector<std::size_t>{4, 3, 3}));
  auto tiny = toy_partitions({3, 4});
  EXPECT_EQ(select_instance_candidates(tiny, 10).size(), 7u);
}

TEST(BatchPrefixTest, Examples) {
  std::vector<ClassId> gt{0, 0, 1, 0};
  std::vector<ScoredInstance> part{{0, 0.1}, {1, 0.2}, {2, 0.3}, {3, 0.4}};
  EXPECT_EQ(select_batch_prefix(part, 0, gt), (std::vector<std::size_t>{0, 1}));
  std::vector<ScoredInstance> bad_first{{2, 0.1}, {0, 0.2}};
  EXPECT_TRUE(select_batch_prefix(bad_first, 0, gt).empty());
  std::vector<ScoredInstance> good{{0, 0.1}, {1, 0.2}, {3, 0.4}};
  EXPECT_EQ(select_batch_prefix(good, 0, gt), (std::vector<std::size_t>{0, 1, 3}));
}

TEST(AlSelectTest, Examples) {
  std::vector<double> v{0.9, 0.1, 0.5};
  EXPECT_EQ(al_select(v, {}, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(al_select(v, {}, 10).size(), 3u);
  std::vector<double> flat(6, 0.4);
  EXPECT_EQ(al_select(flat, {}, 3), (std::vector<std::size_t>{0, 1, 2}));
  std::vector<std::uint8_t> eligible{0, 1, 1};
  EXPECT_EQ(al_select(v, eligible, 1), (std::vector<std::size_t>{2}));
}

TEST(SimulationTest, InstanceStrategyLearnsSeparableBlobs) {
  auto ds = separable_two_class(3);
  auto run = run_simulation(ds, config_for(Strategy::cvil_instance, 10, 5));
  ASSERT_EQ(run.records.size(), 11u);
  EXPECT_GE(run.final_record().test_acc, 0.95);
  EXPECT_EQ(run.pool_size + run.test_size, ds.size());
  EXPECT_EQ(run.test_size, 80u);
}

TEST(SimulationTest, BatchStrategyMatchesInstanceWithFewerOrEqualLabels) {
  auto ds = separable_two_class(3);
  auto inst = run_simulation(ds, config_for(Strategy::cvil_instance, 10, 5));
  auto batch = run_simulation(ds, config_for(Strategy::cvil_batch, 10, 5));
  const double target = inst.final_record().test_acc;
  std::optional<IterationRecord> reached;
  for (const auto& r : batch.records)
    if (r.test_acc >= target) {
      reached = r;
      break;
    }
  ASSERT_TRUE(reached.has_value());
  EXPECT_LE(reached->instance_labels, inst.final_record().instance_labels);
  EXPECT_GT(batch.final_record().batch_labels, 0u);
  EXPECT_TRUE(batch.batch_labels_all_correct());
}

TEST(SimulationTest, ZeroIterationsRecordsOnlyTheStart) {
  auto ds = separable_two_class(4);
  auto run = run_simulation(ds, config_for(Strategy::al_baseline, 0, 1));
  ASSERT_EQ(run.records.size(), 1u);
  EXPECT_EQ(run.records[0].iteration, 0u);
  EXPECT_EQ(run.records[0].instance_labels, 2u);
  EXPECT_EQ(run.records[0].batch_labels, 0u);
}

TEST(SimulationTest, NeedsGroundTruth) {
  auto ds = testing_support::dataset_of({{0.0}, {1.0}, {2.0}, {3.0}});
  EXPECT_EQ(error_code_of([&] { run_simulation(ds, config_for(Strategy::cvil_instance, 1, 1)); }),
            errc::kMissingGroundTruth);
}

TEST(SimulationTest, ReproducibleAndBudgetedPerIteration) {
  auto ds = make_blobs(overlap_blob_spec());
  for (auto s : {Strategy::cvil_instance, Strategy::al_baseline, Strategy::cvil_batch}) {
    auto a = run_simulation(ds, config_for(s, 5, 8));
    auto b = run_simulation(ds, config_for(s, 5, 8));
    EXPECT_EQ(a.records, b.records) << to_string(s);
    for (std::size_t t = 1; t < a.records.size(); ++t) {
      EXPECT_EQ(a.records[t].instance_labels, a.records[t - 1].instance_labels + 10);
      EXPECT_GE(a.records[t].batch_labels, a.records[t - 1].batch_labels);
    }
    if (s != Strategy::cvil_batch) EXPECT_EQ(a.final_record().batch_labels, 0u);
    EXPECT_TRUE(a.batch_labels_all_correct());
  }
}

TEST(SimulationTest, BatchExportAccuracyDominatesAfterWarmUp) {
  auto ds = make_blobs(overlap_blob_spec());
  auto inst = run_simulation(ds, config_for(Strategy::cvil_instance, 30, 11));
  auto batch = run_simulation(ds, config_for(Strategy::cvil_batch, 30, 11));
  constexpr std::size_t kWarmUp = 3;
  for (std::size_t t = kWarmUp; t < inst.records.size(); ++t)
    EXPECT_GE(batch.records[t].export_acc, inst.records[t].export_acc) << "iteration " << t;
  std::size_t assigned = 0;
  for (const auto& r : batch.records) {
    EXPECT_EQ(r.batch_correct, r.batch_assigned) << "iteration " << r.iteration;
    assigned += r.batch_assigned;
  }
  EXPECT_EQ(assigned, batch.final_record().batch_labels);
}

TEST(SimulationOutputTest, CurveCsvAndConfigRoundTrip) {
  auto ds = separable_two_class(4);
  auto cfg = config_for(Strategy::cvil_batch, 2, 3);
  cfg.measure = Measure::eccentricity;
  auto run = run_simulation(ds, cfg);
  std::ostringstream out;
  write_curve_csv(run, out);
  std::istringstream lines(out.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "iteration,instance_labels,batch_labels,test_acc,export_acc");
  std::size_t rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  EXPECT_EQ(rows, 3u);

  auto back = simulation_config_from_json(to_json(cfg));
  EXPECT_EQ(back.strategy, Strategy::cvil_batch);
  EXPECT_EQ(back.measure, Measure::eccentricity);
  EXPECT_EQ(back.iterations, 2u);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_EQ(back.model, cfg.model);
  auto side = run_sidecar_json(run);
  EXPECT_TRUE(side.contains("config"));
  EXPECT_EQ(error_code_of([] { simulation_config_from_json(nlohmann::json{{"strategy", "random"}}); }),
            errc::kParse);
}

TEST(BlobsTest, DeterministicUnderSeed) {
  auto a = make_blobs(overlap_blob_spec(7));
  auto b = make_blobs(overlap_blob_spec(7));
  auto c = make_blobs(overlap_blob_spec(8));
  EXPECT_EQ(a.size(), 1500u);
  EXPECT_EQ(a.dim(), 32u);
  EXPECT_TRUE(std::equal(a.features().begin(), a.features().end(), b.features().begin()));
  EXPECT_FALSE(std::equal(a.features().begin(), a.features().end(), c.features().begin()));
}

TEST(BenchTest, SmallShapeIsFast) {
  auto report = bench_measures(100, 8, 1);
  ASSERT_EQ(report.rows.size(), 3u);
  for (const auto& r : report.rows) EXPECT_LT(r.seconds, 0.010) << r.measure;
  EXPECT_EQ(report.n, 100u);
  EXPECT_EQ(report.d, 8u);
}
