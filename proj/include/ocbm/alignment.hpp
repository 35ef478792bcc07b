#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ocbm/core.hpp"

namespace ocbm {

/// One row per class: the mean reference embedding of that class.
struct PrototypeBank {
  EmbeddingMatrix prototypes;  // C x D
  std::vector<std::string> class_names;
};

/// Weights of the classification and alignment terms of the training loss.
struct LossConfig {
  double beta1 = 1.0;
  double beta2 = 5.0;

  void validate() const;
};

/// Trainable linear feature map g(x) = x * weight, weight is D_in x D.
struct ToyExtractor {
  EmbeddingMatrix weight;

  Index input_dims() const { return weight.rows(); }
  Index output_dims() const { return weight.dims(); }
  RowMatrixXd apply(const RowMatrixXd& inputs) const;
};

PrototypeBank compute_prototypes(const LabeledDataset& reference);

/// Mean over rows of -cos(P_{label}, feature).
double align_loss(const RowMatrixXd& features, std::span<const Index> labels, const PrototypeBank& bank);

/// Mean over rows of -cos(reference_i, feature_i).
double sample_align_loss(const RowMatrixXd& features, const RowMatrixXd& reference_features);

/// Mean softmax cross-entropy, computed with log-sum-exp.
double cross_entropy(const RowMatrixXd& logits, std::span<const Index> labels);

/// beta1 * cross_entropy(logits, labels) + beta2 * align.
double total_loss(const RowMatrixXd& logits, std::span<const Index> labels, double align, const LossConfig& cfg);

struct LossGradients {
  double loss = 0;
  double classification = 0;
  double alignment = 0;
  RowMatrixXd d_extractor;  // D_in x D
  RowMatrixXd d_head;       // C x D
  VectorXd d_bias;          // C
};

/// Total loss of the extractor + head on `inputs` with analytic gradients of
/// every parameter. The head bias is required.
LossGradients loss_and_gradients(const ToyExtractor& extractor, const ClassifierHead& head, const RowMatrixXd& inputs,
                                 std::span<const Index> labels, const PrototypeBank& bank, const LossConfig& cfg);

struct ToyModel {
  ToyExtractor extractor;
  ClassifierHead head;  // always carries a bias
};

/// Seeded initial parameters.
ToyModel init_toy(Index input_dims, Index dims, Index classes, std::uint64_t seed);

struct TrainResult {
  ToyModel model;
  std::vector<double> loss_curve;  // loss before each epoch, plus the final loss
  PrototypeBank bank;
};

/// Full-batch gradient descent on the combined loss. `train` holds the inputs
/// to the extractor and `reference` the reference-space embeddings of the
/// same items; prototypes are computed once from `reference`.
TrainResult train_toy(const LabeledDataset& train, const LabeledDataset& reference, const LossConfig& cfg,
                      std::size_t epochs, double lr, std::uint64_t seed);

}  // namespace ocbm
