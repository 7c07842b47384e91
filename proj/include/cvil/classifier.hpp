#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "cvil/dataset.hpp"
#include "cvil/measures.hpp"

namespace cvil {

struct ModelConfig {
  std::array<std::size_t, 2> hidden_sizes{50, 20};
  std::uint64_t seed = 0;
  std::size_t epochs = 40;
  double learning_rate = 1e-3;
  std::size_t minibatch_size = 32;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainingExample {
  std::size_t index = 0;
  ClassId label = kNoClass;
  double weight = 1.0;

  bool operator==(const TrainingExample&) const = default;
};

struct TrainingSetParams {
  double batch_weight = 0.1;
  std::size_t batch_multiplier = 10;
};

// Examples chosen from a ledger. Instance labels are always used; batch
// labels are capped per class at batch_multiplier * c_min.
struct TrainingSet {
  std::vector<TrainingExample> instance_examples;
  std::vector<TrainingExample> batch_examples;
  double batch_weight = 0.1;
  std::size_t batch_multiplier = 10;
  std::size_t c_min = 0;
  // Set when some class has no instance labels; c_min is then taken over the
  // classes that do.
  bool c_min_partial = false;
  std::vector<std::size_t> batch_available;  // per class
  std::vector<std::size_t> batch_used;       // per class

  std::vector<TrainingExample> all_examples() const;
  std::size_t size() const noexcept { return instance_examples.size() + batch_examples.size(); }
};

// Returns nullopt when the ledger holds no instance labels (the model stays
// untrained). Batch subsampling is deterministic under `seed`.
std::optional<TrainingSet> build_training_set(const LabelLedger& ledger, std::size_t num_classes,
                                              const TrainingSetParams& params, std::uint64_t seed);

// weight * -ln(max(p[true_class], 1e-12)).
double weighted_loss(std::span<const double> probs_row, ClassId true_class, double weight);

// Weighted cross-entropy summed over examples and divided by the example count,
// with gradients laid out like Mlp::parameters().
struct LossGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

// Feed-forward network d -> h1 -> h2 -> K with ReLU hidden units and a
// softmax output.
class Mlp {
 public:
  Mlp() = default;
  // He-style uniform initialization (limit sqrt(6 / fan_in)), zero biases.
  Mlp(std::size_t input_dim, std::size_t num_classes, const ModelConfig& config);

  bool initialized() const noexcept { return input_dim_ > 0; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const ModelConfig& config() const noexcept { return config_; }

  std::size_t parameter_count() const;
  // W1 (row-major), b1, W2, b2, W3, b3.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> flat);

  ProbabilityMatrix predict_proba(const EmbeddingDataset& ds) const;
  ProbabilityMatrix predict_proba(const EmbeddingDataset& ds,
                                  std::span<const std::size_t> indices) const;

  LossGradient loss_and_gradient(const EmbeddingDataset& ds,
                                 std::span<const TrainingExample> examples) const;

  std::size_t epochs_trained = 0;
  double final_loss = 0.0;

 private:
  friend class Trainer;
  std::size_t input_dim_ = 0;
  std::size_t num_classes_ = 0;
  ModelConfig config_;
  Eigen::MatrixXd w1_, w2_, w3_;
  Eigen::VectorXd b1_, b2_, b3_;
};

using ClassifierModel = Mlp;

struct TrainControl {
  const std::atomic<bool>* cancel = nullptr;  // checked between epochs
  std::function<void(std::size_t epoch, std::size_t total, double loss)> on_epoch;
};

// Minibatch Adam on the weighted cross-entropy, from a fresh initialization.
// Deterministic for a fixed config.seed. Throws Error("cancelled") when
// cancelled between epochs.
Mlp train(const EmbeddingDataset& ds, const TrainingSet& training_set, const ModelConfig& config,
          const TrainControl& control = {});
Mlp train(const EmbeddingDataset& ds, std::span<const TrainingExample> examples,
          const ModelConfig& config, const TrainControl& control = {});

// "CVMD", version byte, config echo, training metadata, then little-endian
// float32 parameter blocks in parameters() order.
void save_checkpoint(const Mlp& model, std::ostream& out);
Mlp load_checkpoint(std::istream& in);

}  // namespace cvil
