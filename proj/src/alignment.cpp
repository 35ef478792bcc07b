#include "ocbm/alignment.hpp"

#include <cmath>
#include <random>

namespace ocbm {

void LossConfig::validate() const {
  if (!(beta1 >= 0) || !(beta2 >= 0)) fail(ErrorKind::InvalidArgument, "loss weights must be non-negative");
  if (beta1 == 0 && beta2 == 0) fail(ErrorKind::InvalidArgument, "beta1 and beta2 are both zero");
}

RowMatrixXd ToyExtractor::apply(const RowMatrixXd& inputs) const {
  if (inputs.cols() != input_dims())
    fail(ErrorKind::DimensionMismatch, "extractor expects " + std::to_string(input_dims()) + " input dims, got " +
                                           std::to_string(inputs.cols()));
  return inputs * weight.matrix();
}

PrototypeBank compute_prototypes(const LabeledDataset& reference) {
  const Index C = reference.num_classes();
  RowMatrixXd P(C, reference.dims());
  for (Index c = 0; c < C; ++c) {
    const auto rows = reference.rows_of_class(c);
    P.row(c) = row_mean(reference.features().matrix(), rows).transpose();
  }
  return {EmbeddingMatrix(std::move(P)), reference.class_names()};
}

namespace {

void check_labels(const RowMatrixXd& features, std::span<const Index> labels, Index classes) {
  if (static_cast<Index>(labels.size()) != features.rows())
    fail(ErrorKind::DimensionMismatch, "label count differs from feature rows");
  for (Index y : labels)
    if (y < 0 || y >= classes) fail(ErrorKind::LabelOutOfRange, "label " + std::to_string(y));
}

}  // namespace

double align_loss(const RowMatrixXd& features, std::span<const Index> labels, const PrototypeBank& bank) {
  const auto& P = bank.prototypes.matrix();
  check_labels(features, labels, P.rows());
  if (features.rows() == 0) fail(ErrorKind::EmptySelection, "align_loss over no rows");
  if (features.cols() != P.cols()) fail(ErrorKind::DimensionMismatch, "feature and prototype dims differ");
  double acc = 0;
  for (Index i = 0; i < features.rows(); ++i) acc -= cosine(P.row(labels[i]), features.row(i));
  return acc / static_cast<double>(features.rows());
}

double sample_align_loss(const RowMatrixXd& features, const RowMatrixXd& reference_features) {
  if (features.rows() != reference_features.rows() || features.cols() != reference_features.cols())
    fail(ErrorKind::DimensionMismatch, "feature and reference shapes differ");
  if (features.rows() == 0) fail(ErrorKind::EmptySelection, "sample_align_loss over no rows");
  double acc = 0;
  for (Index i = 0; i < features.rows(); ++i) acc -= cosine(reference_features.row(i), features.row(i));
  return acc / static_cast<double>(features.rows());
}

double cross_entropy(const RowMatrixXd& logits, std::span<const Index> labels) {
  check_labels(logits, labels, logits.cols());
  if (!logits.allFinite()) fail(ErrorKind::NumericError, "non-finite logits");
  if (logits.rows() == 0) fail(ErrorKind::EmptySelection, "cross_entropy over no rows");
  double acc = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    acc += lse - logits(i, labels[i]);
  }
  return acc / static_cast<double>(logits.rows());
}

double total_loss(const RowMatrixXd& logits, std::span<const Index> labels, double align, const LossConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(align)) fail(ErrorKind::NumericError, "non-finite alignment loss");
  // beta1 = 0 still validates the logits
  return cfg.beta1 * cross_entropy(logits, labels) + cfg.beta2 * align;
}

LossGradients loss_and_gradients(const ToyExtractor& extractor, const ClassifierHead& head, const RowMatrixXd& inputs,
                                  std::span<const Index> labels, const PrototypeBank& bank, const LossConfig& cfg) {
  cfg.validate();
  if (!head.bias()) fail(ErrorKind::InvalidArgument, "training head needs a bias");
  if (head.dims() != extractor.output_dims()) fail(ErrorKind::DimensionMismatch, "head and extractor dims differ");
  const Index N = inputs.rows();
  const auto& V = head.weights().matrix();
  const auto& P = bank.prototypes.matrix();
  if (P.rows() != head.num_classes()) fail(ErrorKind::DimensionMismatch, "prototype count differs from classes");

  const RowMatrixXd G = extractor.apply(inputs);  // N x D
  RowMatrixXd logits = G * V.transpose();
  logits.rowwise() += head.bias()->transpose();

  LossGradients out;
  out.classification = cross_entropy(logits, labels);
  out.alignment = align_loss(G, labels, bank);
  out.loss = cfg.beta1 * out.classification + cfg.beta2 * out.alignment;

  const double inv_n = 1.0 / static_cast<double>(N);
  // d(mean CE)/d logits = (softmax - onehot) / N
  RowMatrixXd dlogits(N, logits.cols());
  for (Index i = 0; i < N; ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    e /= e.sum();
    e(labels[i]) -= 1.0;
    dlogits.row(i) = e * inv_n * cfg.beta1;
  }

  RowMatrixXd dG = dlogits * V;
  for (Index i = 0; i < N; ++i) {
    const auto p = P.row(labels[i]);
    const auto g = G.row(i);
    const double gn = g.norm();
    const double pn = p.norm();
    const double cos = p.dot(g) / (pn * gn);
    // d(-cos)/dg = -(p / (|p||g|) - cos * g / |g|^2)
    dG.row(i) -= cfg.beta2 * inv_n * (p / (pn * gn) - cos * g / (gn * gn));
  }

  out.d_head = dlogits.transpose() * G;
  out.d_bias = dlogits.colwise().sum().transpose();
  out.d_extractor = inputs.transpose() * dG;
  return out;
}

ToyModel init_toy(Index input_dims, Index dims, Index classes, std::uint64_t seed) {
  if (input_dims <= 0 || dims <= 0 || classes <= 0) fail(ErrorKind::InvalidArgument, "model sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double ws = 1.0 / std::sqrt(static_cast<double>(input_dims));
  const double hs = 0.1 / std::sqrt(static_cast<double>(dims));
  RowMatrixXd W(input_dims, dims);
  for (Index r = 0; r < W.rows(); ++r)
    for (Index c = 0; c < W.cols(); ++c) W(r, c) = ws * normal(rng);
  RowMatrixXd V(classes, dims);
  for (Index r = 0; r < V.rows(); ++r)
    for (Index c = 0; c < V.cols(); ++c) V(r, c) = hs * normal(rng);
  return {ToyExtractor{EmbeddingMatrix(std::move(W))},
          ClassifierHead(EmbeddingMatrix(std::move(V)), VectorXd::Zero(classes))};
}

TrainResult train_toy(const LabeledDataset& train, const LabeledDataset& reference, const LossConfig& cfg,
                      std::size_t epochs, double lr, std::uint64_t seed) {
  cfg.validate();
  if (!(lr > 0) || !std::isfinite(lr)) fail(ErrorKind::InvalidArgument, "learning rate must be positive");
  if (train.size() != reference.size()) fail(ErrorKind::DimensionMismatch, "train and reference row counts differ");
  if (train.labels() != reference.labels()) fail(ErrorKind::InconsistentDims, "train and reference labels differ");
  if (train.num_classes() != reference.num_classes())
    fail(ErrorKind::InconsistentDims, "train and reference class lists differ");

  TrainResult out;
  out.bank = compute_prototypes(reference);
  out.model = init_toy(train.dims(), reference.dims(), train.num_classes(), seed);

  const RowMatrixXd& X = train.features().matrix();
  RowMatrixXd W = out.model.extractor.weight.matrix();
  RowMatrixXd V = out.model.head.weights().matrix();
  VectorXd b = *out.model.head.bias();

  for (std::size_t epoch = 0; epoch <= epochs; ++epoch) {
    LossGradients grads;
    try {
      grads = loss_and_gradients(ToyExtractor{EmbeddingMatrix(W)}, ClassifierHead(EmbeddingMatrix(V), b), X,
                                 train.labels(), out.bank, cfg);
    } catch (const Error& e) {
      Error err(ErrorKind::NumericError, "epoch " + std::to_string(epoch) + ": " + e.what());
      err.epoch = static_cast<long>(epoch);
      throw err;
    }
    if (!std::isfinite(grads.loss)) {
      Error err(ErrorKind::NumericError, "non-finite loss at epoch " + std::to_string(epoch));
      err.epoch = static_cast<long>(epoch);
      throw err;
    }
    out.loss_curve.push_back(grads.loss);
    if (epoch == epochs) break;
    W -= lr * grads.d_extractor;
    V -= lr * grads.d_head;
    b -= lr * grads.d_bias;
  }
  out.model.extractor = ToyExtractor{EmbeddingMatrix(std::move(W))};
  out.model.head = ClassifierHead(EmbeddingMatrix(std::move(V)), std::move(b));
  return out;
}

}  // namespace ocbm
