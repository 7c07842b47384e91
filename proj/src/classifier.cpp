#include "cvil/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>

#include "cvil/error.hpp"
#include "cvil/random.hpp"

namespace cvil {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kProbFloor = 1e-12;
constexpr std::size_t kPredictChunk = 512;

void check_config(const ModelConfig& config) {
  if (config.hidden_sizes[0] == 0 || config.hidden_sizes[1] == 0)
    throw Error(errc::kInvalidArgument, "hidden layer sizes must be positive");
  if (config.epochs == 0) throw Error(errc::kInvalidArgument, "epochs must be positive");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate))
    throw Error(errc::kInvalidArgument, "learning_rate must be positive");
  if (config.minibatch_size == 0)
    throw Error(errc::kInvalidArgument, "minibatch_size must be positive");
}

void fill_uniform(Eigen::MatrixXd& m, double limit, Rng& rng) {
  // Row-major fill order so the result does not depend on Eigen's storage.
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = (2.0 * uniform01(rng) - 1.0) * limit;
}

// Copies the selected feature rows into a dense double matrix.
RowMatrix gather_rows(const EmbeddingDataset& ds, std::span<const std::size_t> rows) {
  RowMatrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ds.dim()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = ds.row(rows[r]);
    double* dst = x.row(static_cast<Eigen::Index>(r)).data();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j];
  }
  return x;
}

void softmax_rows(RowMatrix& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

void validate_examples(const EmbeddingDataset& ds, std::span<const TrainingExample> examples,
                       std::size_t num_classes) {
  for (const auto& e : examples) {
    if (e.index >= ds.size())
      throw Error(errc::kInvalidArgument,
                  "training example index " + std::to_string(e.index) + " out of range");
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes)
      throw Error(errc::kUnknownClass, "training example class " + std::to_string(e.label) +
                                           " out of range");
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight))
      throw Error(errc::kInvalidArgument, "training example weight must be finite and >= 0");
  }
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw Error(errc::kParse, "truncated model checkpoint");
  return value;
}

}  // namespace

std::vector<TrainingExample> TrainingSet::all_examples() const {
  std::vector<TrainingExample> out;
  out.reserve(size());
  out.insert(out.end(), instance_examples.begin(), instance_examples.end());
  out.insert(out.end(), batch_examples.begin(), batch_examples.end());
  return out;
}

std::optional<TrainingSet> build_training_set(const LabelLedger& ledger, std::size_t num_classes,
                                              const TrainingSetParams& params,
                                              std::uint64_t seed) {
  if (num_classes < 2) throw Error(errc::kInvalidArgument, "need at least two classes");
  if (!(params.batch_weight >= 0.0) || !std::isfinite(params.batch_weight))
    throw Error(errc::kInvalidArgument, "batch_weight must be finite and >= 0");

  TrainingSet ts;
  ts.batch_weight = params.batch_weight;
  ts.batch_multiplier = params.batch_multiplier;
  ts.batch_available.assign(num_classes, 0);
  ts.batch_used.assign(num_classes, 0);

  std::vector<std::size_t> instance_count(num_classes, 0);
  std::vector<std::vector<std::size_t>> batch_pool(num_classes);
  for (std::size_t i = 0; i < ledger.size(); ++i) {
    const auto& e = ledger.at(i);
    if (e.state == LabelState::unlabeled) continue;
    if (e.assigned < 0 || static_cast<std::size_t>(e.assigned) >= num_classes)
      throw Error(errc::kUnknownClass, "ledger holds class id " + std::to_string(e.assigned));
    const auto c = static_cast<std::size_t>(e.assigned);
    if (e.state == LabelState::instance) {
      ts.instance_examples.push_back({i, e.assigned, 1.0});
      ++instance_count[c];
    } else {
      batch_pool[c].push_back(i);
    }
  }
  if (ts.instance_examples.empty()) return std::nullopt;

  std::size_t c_min = std::numeric_limits<std::size_t>::max();
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (instance_count[c] == 0) {
      ts.c_min_partial = true;
      continue;
    }
    c_min = std::min(c_min, instance_count[c]);
  }
  ts.c_min = c_min;

  const std::size_t cap = params.batch_multiplier * c_min;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ts.batch_available[c] = batch_pool[c].size();
    Rng rng(derive_seed(seed, 1000 + c));
    auto chosen = sample_without_replacement(std::move(batch_pool[c]), cap, rng);
    std::sort(chosen.begin(), chosen.end());
    ts.batch_used[c] = chosen.size();
    for (std::size_t i : chosen)
      ts.batch_examples.push_back({i, static_cast<ClassId>(c), params.batch_weight});
  }
  std::sort(ts.batch_examples.begin(), ts.batch_examples.end(),
            [](const TrainingExample& a, const TrainingExample& b) { return a.index < b.index; });
  return ts;
}

double weighted_loss(std::span<const double> probs_row, ClassId true_class, double weight) {
  if (true_class < 0 || static_cast<std::size_t>(true_class) >= probs_row.size())
    throw Error(errc::kUnknownClass, "class id " + std::to_string(true_class) + " out of range");
  if (!(weight >= 0.0)) throw Error(errc::kInvalidArgument, "weight must be >= 0");
  const double p = std::max(probs_row[static_cast<std::size_t>(true_class)], kProbFloor);
  return weight * -std::log(p);
}

// --- Mlp -------------------------------------------------------------------

Mlp::Mlp(std::size_t input_dim, std::size_t num_classes, const ModelConfig& config)
    : input_dim_(input_dim), num_classes_(num_classes), config_(config) {
  if (input_dim == 0) throw Error(errc::kInvalidArgument, "input dimension must be positive");
  if (num_classes < 2) throw Error(errc::kInvalidArgument, "need at least two classes");
  check_config(config);
  const auto h1 = static_cast<Eigen::Index>(config.hidden_sizes[0]);
  const auto h2 = static_cast<Eigen::Index>(config.hidden_sizes[1]);
  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto k = static_cast<Eigen::Index>(num_classes);
  w1_.resize(h1, d);
  w2_.resize(h2, h1);
  w3_.resize(k, h2);
  b1_ = Eigen::VectorXd::Zero(h1);
  b2_ = Eigen::VectorXd::Zero(h2);
  b3_ = Eigen::VectorXd::Zero(k);
  Rng rng(derive_seed(config.seed, 0));
  fill_uniform(w1_, std::sqrt(6.0 / static_cast<double>(d)), rng);
  fill_uniform(w2_, std::sqrt(6.0 / static_cast<double>(h1)), rng);
  fill_uniform(w3_, std::sqrt(6.0 / static_cast<double>(h2)), rng);
}

std::size_t Mlp::parameter_count() const {
  return static_cast<std::size_t>(w1_.size() + b1_.size() + w2_.size() + b2_.size() +
                                  w3_.size() + b3_.size());
}

std::vector<double> Mlp::parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  auto push_matrix = [&](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  };
  auto push_vector = [&](const Eigen::VectorXd& v) {
    flat.insert(flat.end(), v.data(), v.data() + v.size());
  };
  push_matrix(w1_);
  push_vector(b1_);
  push_matrix(w2_);
  push_vector(b2_);
  push_matrix(w3_);
  push_vector(b3_);
  return flat;
}

void Mlp::set_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count())
    throw Error(errc::kInvalidArgument, "expected " + std::to_string(parameter_count()) +
                                            " parameters, got " + std::to_string(flat.size()));
  std::size_t pos = 0;
  auto take_matrix = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[pos++];
  };
  auto take_vector = [&](Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = flat[pos++];
  };
  take_matrix(w1_);
  take_vector(b1_);
  take_matrix(w2_);
  take_vector(b2_);
  take_matrix(w3_);
  take_vector(b3_);
}

ProbabilityMatrix Mlp::predict_proba(const EmbeddingDataset& ds) const {
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return predict_proba(ds, all);
}

ProbabilityMatrix Mlp::predict_proba(const EmbeddingDataset& ds,
                                     std::span<const std::size_t> indices) const {
  if (!initialized()) throw Error(errc::kUntrained, "model is not trained");
  if (ds.dim() != input_dim_)
    throw Error(errc::kInvalidArgument, "dataset has d=" + std::to_string(ds.dim()) +
                                            ", model expects " + std::to_string(input_dim_));
  for (std::size_t i : indices)
    if (i >= ds.size())
      throw Error(errc::kInvalidArgument, "row index " + std::to_string(i) + " out of range");

  const std::size_t k = num_classes_;
  std::vector<double> out(indices.size() * k);
  for (std::size_t lo = 0; lo < indices.size(); lo += kPredictChunk) {
    const std::size_t hi = std::min(indices.size(), lo + kPredictChunk);
    const RowMatrix x = gather_rows(ds, indices.subspan(lo, hi - lo));
    RowMatrix a1 = ((x * w1_.transpose()).rowwise() + b1_.transpose()).cwiseMax(0.0);
    RowMatrix a2 = ((a1 * w2_.transpose()).rowwise() + b2_.transpose()).cwiseMax(0.0);
    RowMatrix z = (a2 * w3_.transpose()).rowwise() + b3_.transpose();
    softmax_rows(z);
    std::memcpy(out.data() + lo * k, z.data(), sizeof(double) * z.size());
  }
  return ProbabilityMatrix(indices.size(), k, std::move(out));
}

// Forward/backward on one minibatch. Gradients are written into the members
// of `grad`, which must be shaped like `net`.
class Trainer {
 public:
  struct Grads {
    Eigen::MatrixXd w1, w2, w3;
    Eigen::VectorXd b1, b2, b3;
  };

  static Grads zeros_like(const Mlp& net) {
    return {Eigen::MatrixXd::Zero(net.w1_.rows(), net.w1_.cols()),
            Eigen::MatrixXd::Zero(net.w2_.rows(), net.w2_.cols()),
            Eigen::MatrixXd::Zero(net.w3_.rows(), net.w3_.cols()),
            Eigen::VectorXd::Zero(net.b1_.size()),
            Eigen::VectorXd::Zero(net.b2_.size()),
            Eigen::VectorXd::Zero(net.b3_.size())};
  }

  // x: B x d inputs; labels/weights per row. Returns the batch-mean weighted
  // loss and fills `g` with its gradient.
  static double step(const Mlp& net, const RowMatrix& x, std::span<const ClassId> labels,
                     std::span<const double> weights, Grads& g) {
    const auto b = x.rows();
    const double inv_b = 1.0 / static_cast<double>(b);
    RowMatrix z1 = (x * net.w1_.transpose()).rowwise() + net.b1_.transpose();
    RowMatrix a1 = z1.cwiseMax(0.0);
    RowMatrix z2 = (a1 * net.w2_.transpose()).rowwise() + net.b2_.transpose();
    RowMatrix a2 = z2.cwiseMax(0.0);
    RowMatrix p = (a2 * net.w3_.transpose()).rowwise() + net.b3_.transpose();
    softmax_rows(p);

    double loss = 0.0;
    RowMatrix dz3 = p;
    for (Eigen::Index r = 0; r < b; ++r) {
      const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
      const double w = weights[static_cast<std::size_t>(r)];
      const double py = p(r, y);
      loss += w * -std::log(std::max(py, kProbFloor));
      if (py < kProbFloor) {
        dz3.row(r).setZero();
      } else {
        dz3(r, y) -= 1.0;
        dz3.row(r) *= w * inv_b;
      }
    }

    g.w3.noalias() = dz3.transpose() * a2;
    g.b3 = dz3.colwise().sum().transpose();
    RowMatrix dz2 = (dz3 * net.w3_).cwiseProduct((z2.array() > 0.0).cast<double>().matrix());
    g.w2.noalias() = dz2.transpose() * a1;
    g.b2 = dz2.colwise().sum().transpose();
    RowMatrix dz1 = (dz2 * net.w2_).cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
    g.w1.noalias() = dz1.transpose() * x;
    g.b1 = dz1.colwise().sum().transpose();
    return loss * inv_b;
  }

  static Mlp run(const EmbeddingDataset& ds, std::span<const TrainingExample> examples,
                 const ModelConfig& config, const TrainControl& control) {
    if (examples.empty()) throw Error(errc::kUntrained, "training set is empty");
    Mlp net(ds.dim(), ds.num_classes(), config);
    validate_examples(ds, examples, net.num_classes_);

    std::vector<std::size_t> rows(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) rows[i] = examples[i].index;
    const RowMatrix all_x = gather_rows(ds, rows);

    Grads g = zeros_like(net);
    Grads m = zeros_like(net);
    Grads v = zeros_like(net);
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    double beta1_t = 1.0;
    double beta2_t = 1.0;

    auto adam = [&](auto& param, const auto& grad, auto& mom, auto& vel, double lr_t) {
      mom = beta1 * mom + (1.0 - beta1) * grad;
      vel = beta2 * vel + (1.0 - beta2) * grad.cwiseProduct(grad);
      param.array() -= lr_t * mom.array() / (vel.array().sqrt() + eps);
    };

    Rng shuffle_rng(derive_seed(config.seed, 1));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = config.minibatch_size;
    RowMatrix xb;
    std::vector<ClassId> yb;
    std::vector<double> wb;

    double epoch_loss = 0.0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      if (control.cancel && control.cancel->load())
        throw Error(errc::kCancelled, "training cancelled");
      shuffle(std::span<std::size_t>(order), shuffle_rng);
      double loss_sum = 0.0;
      for (std::size_t lo = 0; lo < order.size(); lo += bs) {
        const std::size_t hi = std::min(order.size(), lo + bs);
        const auto b = static_cast<Eigen::Index>(hi - lo);
        xb.resize(b, all_x.cols());
        yb.resize(hi - lo);
        wb.resize(hi - lo);
        for (std::size_t r = lo; r < hi; ++r) {
          const std::size_t e = order[r];
          xb.row(static_cast<Eigen::Index>(r - lo)) = all_x.row(static_cast<Eigen::Index>(e));
          yb[r - lo] = examples[e].label;
          wb[r - lo] = examples[e].weight;
        }
        loss_sum += step(net, xb, yb, wb, g) * static_cast<double>(hi - lo);

        beta1_t *= beta1;
        beta2_t *= beta2;
        const double lr_t = config.learning_rate * std::sqrt(1.0 - beta2_t) / (1.0 - beta1_t);
        adam(net.w1_, g.w1, m.w1, v.w1, lr_t);
        adam(net.b1_, g.b1, m.b1, v.b1, lr_t);
        adam(net.w2_, g.w2, m.w2, v.w2, lr_t);
        adam(net.b2_, g.b2, m.b2, v.b2, lr_t);
        adam(net.w3_, g.w3, m.w3, v.w3, lr_t);
        adam(net.b3_, g.b3, m.b3, v.b3, lr_t);
      }
      epoch_loss = loss_sum / static_cast<double>(order.size());
      net.epochs_trained = epoch + 1;
      if (control.on_epoch) control.on_epoch(epoch + 1, config.epochs, epoch_loss);
    }
    net.final_loss = epoch_loss;
    return net;
  }
};

LossGradient Mlp::loss_and_gradient(const EmbeddingDataset& ds,
                                    std::span<const TrainingExample> examples) const {
  if (!initialized()) throw Error(errc::kUntrained, "model is not initialized");
  if (examples.empty()) throw Error(errc::kInvalidArgument, "no examples");
  validate_examples(ds, examples, num_classes_);
  std::vector<std::size_t> rows(examples.size());
  std::vector<ClassId> labels(examples.size());
  std::vector<double> weights(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    rows[i] = examples[i].index;
    labels[i] = examples[i].label;
    weights[i] = examples[i].weight;
  }
  const RowMatrix x = gather_rows(ds, rows);
  auto g = Trainer::zeros_like(*this);
  LossGradient out;
  out.loss = Trainer::step(*this, x, labels, weights, g);

  Mlp shaped = *this;
  shaped.w1_ = g.w1;
  shaped.b1_ = g.b1;
  shaped.w2_ = g.w2;
  shaped.b2_ = g.b2;
  shaped.w3_ = g.w3;
  shaped.b3_ = g.b3;
  out.gradient = shaped.parameters();
  return out;
}

Mlp train(const EmbeddingDataset& ds, std::span<const TrainingExample> examples,
          const ModelConfig& config, const TrainControl& control) {
  return Trainer::run(ds, examples, config, control);
}

Mlp train(const EmbeddingDataset& ds, const TrainingSet& training_set, const ModelConfig& config,
          const TrainControl& control) {
  const auto examples = training_set.all_examples();
  return Trainer::run(ds, examples, config, control);
}

// --- checkpoint --------------------------------------------------------------

namespace {
constexpr char kModelMagic[4] = {'C', 'V', 'M', 'D'};
constexpr std::uint8_t kModelVersion = 1;
}  // namespace

void save_checkpoint(const Mlp& model, std::ostream& out) {
  if (!model.initialized()) throw Error(errc::kUntrained, "cannot save an untrained model");
  const auto& cfg = model.config();
  out.write(kModelMagic, 4);
  put<std::uint8_t>(out, kModelVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.hidden_sizes[0]));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.hidden_sizes[1]));
  put<std::uint64_t>(out, cfg.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.epochs));
  put<double>(out, cfg.learning_rate);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.minibatch_size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.input_dim()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.num_classes()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.epochs_trained));
  put<double>(out, model.final_loss);
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (double p : params) put<float>(out, static_cast<float>(p));
  if (!out) throw Error(errc::kIo, "failed to write model checkpoint");
}

Mlp load_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0)
    throw Error(errc::kParse, "not a model checkpoint (bad magic)");
  const auto version = get<std::uint8_t>(in);
  if (version != kModelVersion)
    throw Error(errc::kParse, "unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  cfg.hidden_sizes[0] = get<std::uint32_t>(in);
  cfg.hidden_sizes[1] = get<std::uint32_t>(in);
  cfg.seed = get<std::uint64_t>(in);
  cfg.epochs = get<std::uint32_t>(in);
  cfg.learning_rate = get<double>(in);
  cfg.minibatch_size = get<std::uint32_t>(in);
  const auto d = get<std::uint32_t>(in);
  const auto k = get<std::uint32_t>(in);
  Mlp model(d, k, cfg);
  model.epochs_trained = get<std::uint32_t>(in);
  model.final_loss = get<double>(in);
  const auto count = get<std::uint64_t>(in);
  if (count != model.parameter_count())
    throw Error(errc::kParse, "checkpoint parameter count does not match its shape");
  std::vector<double> params(count);
  for (auto& p : params) p = get<float>(in);
  model.set_parameters(params);
  return model;
}

}  // namespace cvil
