#include "cvil/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cvil/error.hpp"
#include "cvil/random.hpp"

namespace cvil {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool higher_first(const ScoredInstance& a, const ScoredInstance& b) {
  if (a.value != b.value) return a.value > b.value;
  return a.index < b.index;
}

double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  if (truth.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += predicted[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(truth.size());
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::cvil_instance: return "cvil_instance";
    case Strategy::cvil_batch: return "cvil_batch";
    case Strategy::al_baseline: return "al_baseline";
  }
  return "unknown";
}

std::optional<Strategy> parse_strategy(std::string_view s) {
  for (auto v : {Strategy::cvil_instance, Strategy::cvil_batch, Strategy::al_baseline})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

bool SimulationRun::batch_labels_all_correct() const {
  return std::all_of(records.begin(), records.end(), [](const IterationRecord& r) {
    return r.batch_assigned == r.batch_correct;
  });
}

// --- selection rules -----------------------------------------------------------

std::vector<std::size_t> select_instance_candidates(const ClassPartitions& partitions,
                                                    std::size_t quota) {
  std::vector<std::size_t> non_empty;
  for (std::size_t c = 0; c < partitions.size(); ++c)
    if (!partitions[c].empty()) non_empty.push_back(c);
  if (non_empty.empty() || quota == 0) return {};

  const std::size_t k = non_empty.size();
  std::vector<std::size_t> share(partitions.size(), 0);
  std::size_t assigned = 0;
  for (std::size_t c : non_empty) {
    share[c] = quota / k;
    assigned += share[c];
  }
  // All remainders are equal (quota mod k over k), so the leftover goes to
  // the lowest class ids.
  for (std::size_t j = 0; assigned < quota; ++j, ++assigned) ++share[non_empty[j]];

  std::vector<std::size_t> picked;
  std::vector<ScoredInstance> leftovers;
  std::size_t deficit = 0;
  for (std::size_t c : non_empty) {
    std::vector<ScoredInstance> part = partitions[c];
    std::sort(part.begin(), part.end(), higher_first);
    const std::size_t take = std::min(share[c], part.size());
    deficit += share[c] - take;
    for (std::size_t j = 0; j < take; ++j) picked.push_back(part[j].index);
    leftovers.insert(leftovers.end(), part.begin() + static_cast<std::ptrdiff_t>(take),
                     part.end());
  }
  if (deficit > 0) {
    std::sort(leftovers.begin(), leftovers.end(), higher_first);
    for (std::size_t j = 0; j < std::min(deficit, leftovers.size()); ++j)
      picked.push_back(leftovers[j].index);
  }
  return picked;
}

std::vector<std::size_t> select_batch_prefix(std::span<const ScoredInstance> partition,
                                             ClassId partition_class,
                                             std::span<const ClassId> ground_truth) {
  std::vector<std::size_t> out;
  for (const auto& s : partition) {
    if (s.index >= ground_truth.size())
      throw Error(errc::kInvalidArgument, "partition index outside the ground truth");
    if (ground_truth[s.index] != partition_class) break;
    out.push_back(s.index);
  }
  return out;
}

std::vector<std::size_t> al_select(std::span<const double> values,
                                   std::span<const std::uint8_t> eligible, std::size_t quota) {
  if (!eligible.empty() && eligible.size() != values.size())
    throw Error(errc::kInvalidArgument, "eligibility mask has the wrong length");
  std::vector<ScoredInstance> pool;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (eligible.empty() || eligible[i]) pool.push_back({i, values[i]});
  const std::size_t take = std::min(quota, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(),
                    higher_first);
  std::vector<std::size_t> out(take);
  for (std::size_t j = 0; j < take; ++j) out[j] = pool[j].index;
  return out;
}

// --- simulation loop -------------------------------------------------------------

SimulationRun run_simulation(const EmbeddingDataset& dataset, const SimulationConfig& config) {
  if (!dataset.has_ground_truth())
    throw Error(errc::kMissingGroundTruth, "simulation needs ground-truth labels");
  if (config.samples_per_iteration == 0)
    throw Error(errc::kInvalidArgument, "samples_per_iteration must be positive");
  if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0))
    throw Error(errc::kInvalidArgument, "train_fraction must lie in (0, 1)");
  const auto t0 = Clock::now();
  const std::size_t n_classes = dataset.num_classes();

  // Seeded pool/test split.
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(config.seed, 1));
  shuffle(std::span<std::size_t>(order), split_rng);
  const auto pool_n = static_cast<std::size_t>(
      std::llround(config.train_fraction * static_cast<double>(dataset.size())));
  if (pool_n < 2 || pool_n >= dataset.size())
    throw Error(errc::kInvalidArgument, "split leaves an empty pool or test set");
  std::vector<std::size_t> pool_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pool_n));
  std::vector<std::size_t> test_rows(order.begin() + static_cast<std::ptrdiff_t>(pool_n), order.end());
  std::sort(pool_rows.begin(), pool_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  const EmbeddingDataset pool = dataset.subset(pool_rows);
  const EmbeddingDataset test = dataset.subset(test_rows);
  const auto truth = pool.ground_truth();
  const auto test_truth = test.ground_truth();

  SimulationRun run;
  run.config = config;
  run.pool_size = pool.size();
  run.test_size = test.size();

  // Cold start: one random pool instance per class.
  LabelLedger ledger(pool.size());
  {
    Rng init_rng(derive_seed(config.seed, 2));
    std::vector<std::vector<std::size_t>> by_class(n_classes);
    for (std::size_t i = 0; i < pool.size(); ++i)
      by_class[static_cast<std::size_t>(truth[i])].push_back(i);
    ledger.advance();
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (by_class[c].empty()) continue;
      const auto j = uniform_below(init_rng, by_class[c].size());
      ledger.label_instance(by_class[c][j], static_cast<ClassId>(c));
    }
  }

  std::optional<NeighborGraph> graph;
  std::vector<double> ecc;
  const Measure measure =
      config.strategy == Strategy::al_baseline ? Measure::min_margin : config.measure;

  for (std::size_t it = 0;; ++it) {
    const std::uint64_t it_seed = derive_seed(config.seed, 100 + it);
    const auto ts = build_training_set(ledger, n_classes, config.training, it_seed);
    if (!ts) throw Error(errc::kUntrained, "simulation pool has no labeled instances");
    ModelConfig mc = config.model;
    mc.seed = it_seed;
    const Mlp model = train(pool, *ts, mc);

    const ProbabilityMatrix pool_probs = model.predict_proba(pool);
    const auto pool_pred = predicted_classes(pool_probs);
    const auto test_pred = predicted_classes(model.predict_proba(test));

    IterationRecord rec;
    rec.iteration = it;
    rec.instance_labels = ledger.count(LabelState::instance);
    rec.batch_labels = ledger.count(LabelState::batch);
    rec.test_acc = accuracy(test_pred, test_truth);
    rec.export_acc = export_accuracy(export_labels(pool, ledger, pool_pred), pool);

    if (it == config.iterations) {
      run.records.push_back(rec);
      break;
    }

    PropertyScores scores;
    switch (measure) {
      case Measure::min_margin:
        scores = min_margin(pool_probs);
        break;
      case Measure::eccentricity:
        if (ecc.empty()) ecc = eccentricity_values(pool, config.eccentricity);
        scores.measure = Measure::eccentricity;
        scores.num_classes = n_classes;
        scores.values = ecc;
        scores.predicted_class = pool_pred;
        break;
      case Measure::disagreement:
        if (!graph) graph = knn_all(pool, config.neighborhood);
        scores = disagreement(*graph, pool_probs);
        break;
    }

    std::vector<std::uint8_t> eligible(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) eligible[i] = ledger.is_unlabeled(i) ? 1 : 0;

    ledger.advance();
    std::vector<std::size_t> picks;
    if (config.strategy == Strategy::al_baseline) {
      picks = al_select(scores.values, eligible, config.samples_per_iteration);
    } else {
      picks = select_instance_candidates(partition_by_class(scores, eligible),
                                         config.samples_per_iteration);
    }
    for (std::size_t i : picks) {
      ledger.label_instance(i, truth[i]);
      eligible[i] = 0;
    }

    if (config.strategy == Strategy::cvil_batch) {
      const auto parts = partition_by_class(scores, eligible);
      for (std::size_t c = 0; c < parts.size(); ++c) {
        const auto prefix = select_batch_prefix(parts[c], static_cast<ClassId>(c), truth);
        for (std::size_t i : prefix) {
          ledger.label_batch(i, static_cast<ClassId>(c));
          ++rec.batch_assigned;
          rec.batch_correct += truth[i] == static_cast<ClassId>(c);
        }
      }
    }
    run.records.push_back(rec);
  }
  run.seconds = seconds_since(t0);
  return run;
}

// --- output ----------------------------------------------------------------------

void write_curve_csv(const SimulationRun& run, std::ostream& out) {
  out << "iteration,instance_labels,batch_labels,test_acc,export_acc\n";
  char buf[160];
  for (const auto& r : run.records) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.6f,%.6f\n", r.iteration, r.instance_labels,
                  r.batch_labels, r.test_acc, r.export_acc);
    out << buf;
  }
  if (!out) throw Error(errc::kIo, "failed to write curve CSV");
}

json to_json(const SimulationConfig& c) {
  return json{{"strategy", std::string(to_string(c.strategy))},
              {"measure", std::string(to_string(c.measure))},
              {"samples_per_iteration", c.samples_per_iteration},
              {"iterations", c.iterations},
              {"seed", c.seed},
              {"train_fraction", c.train_fraction},
              {"model",
               {{"hidden_sizes", {c.model.hidden_sizes[0], c.model.hidden_sizes[1]}},
                {"epochs", c.model.epochs},
                {"learning_rate", c.model.learning_rate},
                {"minibatch_size", c.model.minibatch_size}}},
              {"training",
               {{"batch_weight", c.training.batch_weight},
                {"batch_multiplier", c.training.batch_multiplier}}},
              {"k", c.neighborhood.k},
              {"eccentricity_variance_exponent", c.eccentricity.variance_exponent},
              {"initialization", "one_random_instance_per_class"},
              {"batch_prefix_cadence", "every_iteration_per_partition"}};
}

SimulationConfig simulation_config_from_json(const json& j) {
  SimulationConfig c;
  try {
    if (j.contains("strategy")) {
      const auto s = j.at("strategy").get<std::string>();
      const auto v = parse_strategy(s);
      if (!v) throw Error(errc::kParse, "unknown strategy '" + s + "'");
      c.strategy = *v;
    }
    if (j.contains("measure")) {
      const auto s = j.at("measure").get<std::string>();
      const auto v = parse_measure(s);
      if (!v) throw Error(errc::kParse, "unknown measure '" + s + "'");
      c.measure = *v;
    }
    c.samples_per_iteration = j.value("samples_per_iteration", c.samples_per_iteration);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("hidden_sizes")) {
        c.model.hidden_sizes[0] = m.at("hidden_sizes").at(0).get<std::size_t>();
        c.model.hidden_sizes[1] = m.at("hidden_sizes").at(1).get<std::size_t>();
      }
      c.model.epochs = m.value("epochs", c.model.epochs);
      c.model.learning_rate = m.value("learning_rate", c.model.learning_rate);
      c.model.minibatch_size = m.value("minibatch_size", c.model.minibatch_size);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.batch_weight = t.value("batch_weight", c.training.batch_weight);
      c.training.batch_multiplier = t.value("batch_multiplier", c.training.batch_multiplier);
    }
    c.neighborhood.k = j.value("k", c.neighborhood.k);
    c.eccentricity.variance_exponent =
        j.value("eccentricity_variance_exponent", c.eccentricity.variance_exponent);
  } catch (const json::exception& e) {
    throw Error(errc::kParse, std::string("malformed simulation config: ") + e.what());
  }
  return c;
}

json run_sidecar_json(const SimulationRun& run) {
  const auto& f = run.final_record();
  return json{{"config", to_json(run.config)},
              {"pool_size", run.pool_size},
              {"test_size", run.test_size},
              {"iterations_recorded", run.records.size()},
              {"final_test_acc", f.test_acc},
              {"final_export_acc", f.export_acc},
              {"batch_labels_all_correct", run.batch_labels_all_correct()},
              {"seconds", run.seconds}};
}

// --- synthetic data ------------------------------------------------------------

EmbeddingDataset make_blobs(const BlobSpec& spec) {
  const std::size_t k = spec.centers.size();
  if (k < 2) throw Error(errc::kInvalidArgument, "need at least two blob centers");
  const std::size_t d = spec.centers.front().size();
  if (d == 0) throw Error(errc::kInvalidArgument, "blob centers need at least one dimension");
  for (const auto& c : spec.centers)
    if (c.size() != d) throw Error(errc::kInvalidArgument, "blob centers differ in dimension");
  if (spec.per_class == 0) throw Error(errc::kInvalidArgument, "per_class must be positive");

  const std::size_t n = k * spec.per_class;
  std::vector<float> features(n * d);
  std::vector<std::string> ids(n);
  std::vector<ClassId> labels(n);
  std::vector<std::string> names(k);
  for (std::size_t c = 0; c < k; ++c) names[c] = "class_" + std::to_string(c);

  Rng rng(spec.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % k;
    labels[i] = static_cast<ClassId>(c);
    ids[i] = "b" + std::to_string(i);
    for (std::size_t j = 0; j < d; ++j)
      features[i * d + j] = static_cast<float>(spec.centers[c][j] + spec.stddev * normal01(rng));
  }
  return EmbeddingDataset(ClassSchema(std::move(names)), n, d, std::move(features),
                          std::move(ids), std::move(labels));
}

BlobSpec overlap_blob_spec(std::uint64_t seed) {
  constexpr std::size_t d = 32;
  BlobSpec spec;
  spec.per_class = 500;
  spec.stddev = 1.0;
  spec.seed = seed;
  spec.centers.assign(3, std::vector<double>(d, 0.0));
  spec.centers[0][0] = 4.0;
  spec.centers[1][1] = 2.0;
  spec.centers[2][1] = -2.0;
  return spec;
}

// --- benchmark -----------------------------------------------------------------

BenchReport bench_measures(std::size_t n, std::size_t d, std::uint64_t seed,
                           std::size_t num_classes) {
  if (n < 2 || d < 1) throw Error(errc::kInvalidArgument, "bench needs n >= 2 and d >= 1");
  if (num_classes < 2) throw Error(errc::kInvalidArgument, "bench needs at least two classes");
  const auto t_start = Clock::now();

  Rng rng(seed);
  std::vector<float> features(n * d);
  for (auto& v : features) v = static_cast<float>(normal01(rng));
  std::vector<double> probs(n * num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double e = -std::log(1.0 - uniform01(rng));
      probs[i * num_classes + c] = e;
      sum += e;
    }
    for (std::size_t c = 0; c < num_classes; ++c) probs[i * num_classes + c] /= sum;
  }
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  std::vector<std::string> names(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) names[c] = "c" + std::to_string(c);
  const EmbeddingDataset ds(ClassSchema(std::move(names)), n, d, std::move(features),
                            std::move(ids));
  const ProbabilityMatrix pm(n, num_classes, std::move(probs));

  // Median of three for the fast measures; Disagreement is timed once.
  auto median3 = [](auto&& fn) {
    double t[3];
    for (double& x : t) {
      const auto t0 = Clock::now();
      fn();
      x = seconds_since(t0);
    }
    std::sort(t, t + 3);
    return t[1];
  };

  BenchReport report;
  report.n = n;
  report.d = d;
  volatile double sink = 0.0;
  report.rows.push_back({"min_margin", median3([&] { sink = sink + min_margin(pm).values[0]; })});
  report.rows.push_back(
      {"eccentricity", median3([&] { sink = sink + eccentricity(ds, pm).values[0]; })});
  const auto t0 = Clock::now();
  const NeighborhoodConfig nc{std::min<std::size_t>(20, n - 1)};
  sink = sink + disagreement(ds, pm, nc).values[0];
  report.rows.push_back({"disagreement", seconds_since(t0)});
  report.total_seconds = seconds_since(t_start);
  return report;
}

}  // namespace cvil
