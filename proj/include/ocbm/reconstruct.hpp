#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ocbm/core.hpp"

namespace ocbm {

/// Singular values below this fraction of the largest are treated as zero.
inline constexpr double kRankThreshold = 1e-10;

/// Least-squares reconstruction of every class head from a concept basis.
template <typename Scalar>
struct BasicReconstructionResult {
  RowMatrix<Scalar> alpha;                 // C x k
  BasicEmbeddingMatrix<Scalar> residuals;  // C x D
  Vector<Scalar> per_class_error;          // squared residual norms
  Scalar total_error = 0;
  std::vector<std::string> concept_names;

  Index num_classes() const { return alpha.rows(); }
  Index num_concepts() const { return alpha.cols(); }

  friend bool operator==(const BasicReconstructionResult& a, const BasicReconstructionResult& b) {
    return a.alpha.rows() == b.alpha.rows() && a.alpha.cols() == b.alpha.cols() && a.alpha == b.alpha &&
           a.residuals == b.residuals && a.per_class_error.size() == b.per_class_error.size() &&
           a.per_class_error == b.per_class_error && a.total_error == b.total_error &&
           a.concept_names == b.concept_names;
  }
};

using ReconstructionResult = BasicReconstructionResult<double>;

/// Minimum-norm least-squares coefficients X (rows x k) minimizing
/// ||targets - X * basis||_F. Uses column-pivoted QR when the basis has full
/// row rank and an SVD pseudoinverse otherwise.
template <typename Scalar>
RowMatrix<Scalar> least_squares_coefficients(const RowMatrix<Scalar>& targets, const RowMatrix<Scalar>& basis) {
  using ColMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (targets.cols() != basis.cols())
    fail(ErrorKind::DimensionMismatch, "target dims " + std::to_string(targets.cols()) + " != basis dims " +
                                           std::to_string(basis.cols()));
  const Index k = basis.rows();
  if (k == 0) return RowMatrix<Scalar>(targets.rows(), 0);

  const ColMatrix A = basis.transpose();    // D x k
  const ColMatrix B = targets.transpose();  // D x C
  ColMatrix X;

  Eigen::ColPivHouseholderQR<ColMatrix> qr(A);
  qr.setThreshold(Scalar(kRankThreshold));
  if (qr.rank() == k) {
    X = qr.solve(B);
    // one refinement step
    const ColMatrix r = B - A * X;
    X += qr.solve(r);
  } else {
    Eigen::BDCSVD<ColMatrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(Scalar(kRankThreshold));
    X = svd.solve(B);
  }
  return X.transpose();
}

/// Reconstructs each class weight vector as a linear combination of the
/// concept embeddings. The head bias plays no part.
template <typename Scalar>
BasicReconstructionResult<Scalar> reconstruct_head(const BasicClassifierHead<Scalar>& head,
                                                   const BasicConceptSet<Scalar>& concepts) {
  if (head.dims() != concepts.dims())
    fail(ErrorKind::DimensionMismatch, "head dims " + std::to_string(head.dims()) + " != concept dims " +
                                           std::to_string(concepts.dims()));
  const auto& V = head.weights().matrix();
  const auto& T = concepts.embeddings().matrix();

  BasicReconstructionResult<Scalar> out;
  out.alpha = least_squares_coefficients<Scalar>(V, T);
  RowMatrix<Scalar> R = V;
  if (T.rows() > 0) R.noalias() -= out.alpha * T;
  out.per_class_error.resize(R.rows());
  out.total_error = 0;
  for (Index c = 0; c < R.rows(); ++c) {
    out.per_class_error[c] = R.row(c).squaredNorm();
    out.total_error += out.per_class_error[c];
  }
  out.residuals = BasicEmbeddingMatrix<Scalar>(std::move(R));
  out.concept_names = concepts.names();
  return out;
}

template <typename Scalar>
struct ReplaceEdit {
  std::string new_name;
  Vector<Scalar> embedding;
};

/// Applies remove, then replace, then add. The input set is untouched.
template <typename Scalar>
BasicConceptSet<Scalar> edit_concepts(const BasicConceptSet<Scalar>& concepts, const BasicConceptSet<Scalar>& add,
                                      const std::vector<std::string>& remove_names,
                                      const std::map<std::string, ReplaceEdit<Scalar>>& replace) {
  const Index D = concepts.dims();
  if (!add.empty() && add.dims() != D)
    fail(ErrorKind::DimensionMismatch, "added concepts have dims " + std::to_string(add.dims()));

  std::vector<std::string> names = concepts.names();
  std::vector<Vector<Scalar>> rows;
  for (Index i = 0; i < concepts.size(); ++i) rows.emplace_back(concepts.raw().row(i).transpose());

  auto position = [&](const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) fail(ErrorKind::UnknownConcept, "unknown concept '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
  };

  for (const auto& name : remove_names) {
    const auto p = position(name);
    names.erase(names.begin() + static_cast<std::ptrdiff_t>(p));
    rows.erase(rows.begin() + static_cast<std::ptrdiff_t>(p));
  }
  for (const auto& [old_name, edit] : replace) {
    const auto p = position(old_name);
    if (edit.embedding.size() != D)
      fail(ErrorKind::DimensionMismatch, "replacement for '" + old_name + "' has wrong length");
    names[p] = edit.new_name;
    rows[p] = edit.embedding;
  }
  for (Index i = 0; i < add.size(); ++i) {
    names.push_back(add.names()[i]);
    rows.emplace_back(add.raw().row(i).transpose());
  }

  RowMatrix<Scalar> m(static_cast<Index>(rows.size()), D);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
  // the constructor rejects name collisions and zero rows
  return BasicConceptSet<Scalar>(std::move(names), std::move(m), concepts.normalization());
}

/// Concepts of one class ordered by |alpha| descending; ties keep set order.
template <typename Scalar>
std::vector<std::pair<std::string, Scalar>> importance_report(const BasicReconstructionResult<Scalar>& result,
                                                              Index class_index, std::size_t top_n) {
  if (class_index < 0 || class_index >= result.num_classes())
    fail(ErrorKind::IndexOutOfRange, "class index " + std::to_string(class_index) + " out of range");
  std::vector<Index> order(static_cast<std::size_t>(result.num_concepts()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto row = result.alpha.row(class_index);
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return std::abs(row(a)) > std::abs(row(b)); });
  order.resize(std::min(top_n, order.size()));
  std::vector<std::pair<std::string, Scalar>> out;
  for (Index i : order) out.emplace_back(result.concept_names[static_cast<std::size_t>(i)], row(i));
  return out;
}

}  // namespace ocbm
