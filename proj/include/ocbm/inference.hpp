#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "ocbm/core.hpp"
#include "ocbm/reconstruct.hpp"

namespace ocbm {

/// Per-class logits split into concept contributions, the residual term and
/// the bias term. logits = concept_terms.rowwise().sum() + residual + bias.
template <typename Scalar>
struct BasicInferenceDecomposition {
  RowMatrix<Scalar> concept_terms;  // C x k: alpha_cj * (x . t_j)
  Vector<Scalar> residual_term;     // x . R_c, zero when the residual is excluded
  Vector<Scalar> bias_term;
  Vector<Scalar> logits;
};

using InferenceDecomposition = BasicInferenceDecomposition<double>;

template <typename Scalar, typename Derived>
Vector<Scalar> infer_full(const BasicClassifierHead<Scalar>& head, const Eigen::MatrixBase<Derived>& feature) {
  if (feature.size() != head.dims())
    fail(ErrorKind::DimensionMismatch, "feature dims " + std::to_string(feature.size()) + " != head dims " +
                                           std::to_string(head.dims()));
  Vector<Scalar> logits = head.weights().matrix() * feature;
  if (head.bias()) logits += *head.bias();
  return logits;
}

template <typename Scalar>
void check_decomposition_inputs(const BasicReconstructionResult<Scalar>& recon,
                                const BasicConceptSet<Scalar>& concepts,
                                const std::type_identity_t<std::optional<Vector<Scalar>>>& bias) {
  if (recon.num_concepts() != concepts.size())
    fail(ErrorKind::DimensionMismatch, "reconstruction has " + std::to_string(recon.num_concepts()) +
                                           " concepts, set has " + std::to_string(concepts.size()));
  if (concepts.size() > 0 && recon.residuals.dims() != concepts.dims())
    fail(ErrorKind::DimensionMismatch, "reconstruction and concept dims differ");
  if (bias && bias->size() != recon.num_classes())
    fail(ErrorKind::DimensionMismatch, "bias length differs from class count");
}

template <typename Scalar, typename Derived>
BasicInferenceDecomposition<Scalar> infer_decomposed(const BasicReconstructionResult<Scalar>& recon,
                                                     const BasicConceptSet<Scalar>& concepts,
                                                     const std::type_identity_t<std::optional<Vector<Scalar>>>& bias,
                                                     const Eigen::MatrixBase<Derived>& feature,
                                                     bool include_residual) {
  check_decomposition_inputs(recon, concepts, bias);
  if (feature.size() != recon.residuals.dims())
    fail(ErrorKind::DimensionMismatch, "feature dims " + std::to_string(feature.size()));
  const Index C = recon.num_classes();
  const Index k = recon.num_concepts();

  BasicInferenceDecomposition<Scalar> out;
  Vector<Scalar> sims = Vector<Scalar>::Zero(k);
  if (k > 0) sims = concepts.embeddings().matrix() * feature;
  out.concept_terms = recon.alpha.array().rowwise() * sims.transpose().array();
  out.residual_term = include_residual ? Vector<Scalar>(recon.residuals.matrix() * feature) : Vector<Scalar>::Zero(C);
  out.bias_term = bias ? *bias : Vector<Scalar>::Zero(C);
  out.logits.resize(C);
  for (Index c = 0; c < C; ++c) {
    Scalar s = 0;
    for (Index j = 0; j < k; ++j) s += out.concept_terms(c, j);
    out.logits[c] = s + out.residual_term[c] + out.bias_term[c];
  }
  return out;
}

/// N x C logits of a head over feature rows.
template <typename Scalar>
RowMatrix<Scalar> head_logits(const BasicClassifierHead<Scalar>& head, const RowMatrix<Scalar>& features) {
  if (features.cols() != head.dims())
    fail(ErrorKind::DimensionMismatch, "feature dims " + std::to_string(features.cols()) + " != head dims " +
                                           std::to_string(head.dims()));
  RowMatrix<Scalar> L = features * head.weights().matrix().transpose();
  if (head.bias()) L.rowwise() += head.bias()->transpose();
  return L;
}

/// N x C logits through the concept pathway, optionally plus the residual.
template <typename Scalar>
RowMatrix<Scalar> decomposed_logits(const BasicReconstructionResult<Scalar>& recon,
                                    const BasicConceptSet<Scalar>& concepts,
                                    const std::type_identity_t<std::optional<Vector<Scalar>>>& bias, const RowMatrix<Scalar>& features,
                                    bool include_residual) {
  check_decomposition_inputs(recon, concepts, bias);
  if (features.cols() != recon.residuals.dims()) fail(ErrorKind::DimensionMismatch, "feature dims differ");
  RowMatrix<Scalar> L = RowMatrix<Scalar>::Zero(features.rows(), recon.num_classes());
  if (recon.num_concepts() > 0) {
    const RowMatrix<Scalar> sims = features * concepts.embeddings().matrix().transpose();  // N x k
    L.noalias() += sims * recon.alpha.transpose();
  }
  if (include_residual) L.noalias() += features * recon.residuals.matrix().transpose();
  if (bias) L.rowwise() += bias->transpose();
  return L;
}

/// Index of the largest entry, lowest index on ties.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

struct AccuracyReport {
  double overall = 0;
  std::vector<double> per_class;
  std::vector<std::string> class_names;
  std::vector<Index> predictions;
};

template <typename Scalar>
AccuracyReport evaluate(const RowMatrix<Scalar>& logits, const BasicLabeledDataset<Scalar>& data) {
  if (data.size() == 0) fail(ErrorKind::EmptySelection, "cannot evaluate an empty dataset");
  if (logits.rows() != data.size() || logits.cols() != data.num_classes())
    fail(ErrorKind::DimensionMismatch, "logits shape does not match dataset");
  const auto C = static_cast<std::size_t>(data.num_classes());
  std::vector<Index> correct(C, 0);
  AccuracyReport out;
  out.class_names = data.class_names();
  out.predictions.resize(static_cast<std::size_t>(data.size()));
  Index total = 0;
  for (Index i = 0; i < data.size(); ++i) {
    const Index p = argmax(logits.row(i));
    out.predictions[static_cast<std::size_t>(i)] = p;
    const Index y = data.labels()[static_cast<std::size_t>(i)];
    if (p == y) {
      ++total;
      ++correct[static_cast<std::size_t>(y)];
    }
  }
  out.overall = static_cast<double>(total) / static_cast<double>(data.size());
  for (std::size_t c = 0; c < C; ++c)
    out.per_class.push_back(static_cast<double>(correct[c]) / static_cast<double>(data.class_counts()[c]));
  return out;
}

struct AccuracyDelta {
  std::vector<std::string> class_names;
  std::vector<double> before;
  std::vector<double> after;
  std::vector<double> delta;  // after - before

  /// Class indices ordered by |delta| descending, ties by class index.
  std::vector<std::size_t> by_magnitude() const {
    std::vector<std::size_t> idx(delta.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(delta[a]) > std::abs(delta[b]); });
    return idx;
  }
};

inline AccuracyDelta accuracy_delta(const AccuracyReport& before, const AccuracyReport& after) {
  if (before.class_names != after.class_names || before.per_class.size() != after.per_class.size())
    fail(ErrorKind::InconsistentDims, "accuracy reports cover different class lists");
  AccuracyDelta out;
  out.class_names = before.class_names;
  out.before = before.per_class;
  out.after = after.per_class;
  for (std::size_t c = 0; c < out.before.size(); ++c) out.delta.push_back(out.after[c] - out.before[c]);
  return out;
}

}  // namespace ocbm
