#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ocbm/error.hpp"

namespace ocbm {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixXd = RowMatrix<double>;
using VectorXd = Vector<double>;

// ---------------------------------------------------------------------------
// Kernels

template <typename DerivedA, typename DerivedB>
void check_same_length(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size())
    fail(ErrorKind::DimensionMismatch,
         "vector lengths differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
}

/// Cosine similarity of two equal-length vectors. Throws ZeroVector when
/// either argument has zero norm.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  check_same_length(a, b);
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) fail(ErrorKind::ZeroVector, "cosine of a zero-norm vector");
  const Scalar c = a.dot(b) / (na * nb);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// Mean of the selected rows, updated incrementally in index order so that
/// identical rows give back that row exactly.
template <typename Derived>
Vector<typename Derived::Scalar> row_mean(const Eigen::MatrixBase<Derived>& m, std::span<const Index> rows) {
  using Scalar = typename Derived::Scalar;
  if (rows.empty()) fail(ErrorKind::EmptySelection, "row_mean over an empty selection");
  Vector<Scalar> mean = Vector<Scalar>::Zero(m.cols());
  Scalar n = 0;
  for (Index r : rows) {
    if (r < 0 || r >= m.rows())
      fail(ErrorKind::IndexOutOfRange, "row index " + std::to_string(r) + " out of range");
    n += Scalar(1);
    mean += (m.row(r).transpose() - mean) / n;
  }
  return mean;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      if (!std::isfinite(m(r, c))) {
        Error e(ErrorKind::NonFiniteValue,
                what + " at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
        e.row = r;
        e.col = c;
        throw e;
      }
}

// ---------------------------------------------------------------------------
// Domain types

/// Dense rows-by-dims matrix with finite entries.
template <typename Scalar>
class BasicEmbeddingMatrix {
 public:
  BasicEmbeddingMatrix() = default;
  explicit BasicEmbeddingMatrix(RowMatrix<Scalar> m) : m_(std::move(m)) { require_finite(m_, "embedding matrix"); }
  BasicEmbeddingMatrix(Index rows, Index dims) : m_(RowMatrix<Scalar>::Zero(rows, dims)) {}

  Index rows() const { return m_.rows(); }
  Index dims() const { return m_.cols(); }
  const RowMatrix<Scalar>& matrix() const { return m_; }
  auto row(Index i) const { return m_.row(i); }
  Scalar operator()(Index r, Index c) const { return m_(r, c); }

  friend bool operator==(const BasicEmbeddingMatrix& a, const BasicEmbeddingMatrix& b) {
    return a.m_.rows() == b.m_.rows() && a.m_.cols() == b.m_.cols() && a.m_ == b.m_;
  }

 private:
  RowMatrix<Scalar> m_;
};

/// Feature rows with integer class labels in [0, C).
template <typename Scalar>
class BasicLabeledDataset {
 public:
  BasicLabeledDataset() = default;
  BasicLabeledDataset(BasicEmbeddingMatrix<Scalar> features, std::vector<Index> labels,
                      std::vector<std::string> class_names)
      : features_(std::move(features)), labels_(std::move(labels)), class_names_(std::move(class_names)) {
    if (static_cast<Index>(labels_.size()) != features_.rows())
      fail(ErrorKind::InconsistentDims, "label count " + std::to_string(labels_.size()) +
                                            " != feature rows " + std::to_string(features_.rows()));
    if (class_names_.empty()) fail(ErrorKind::InvalidArgument, "dataset has no classes");
    const auto C = static_cast<Index>(class_names_.size());
    counts_.assign(class_names_.size(), 0);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] < 0 || labels_[i] >= C) {
        Error e(ErrorKind::LabelOutOfRange, "label " + std::to_string(labels_[i]) + " at row " + std::to_string(i));
        e.row = static_cast<long>(i);
        throw e;
      }
      ++counts_[labels_[i]];
    }
    for (std::size_t c = 0; c < counts_.size(); ++c)
      if (counts_[c] == 0) fail(ErrorKind::EmptySelection, "class '" + class_names_[c] + "' has no samples");
  }

  const BasicEmbeddingMatrix<Scalar>& features() const { return features_; }
  const std::vector<Index>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<Index>& class_counts() const { return counts_; }
  Index size() const { return features_.rows(); }
  Index num_classes() const { return static_cast<Index>(class_names_.size()); }
  Index dims() const { return features_.dims(); }

  std::vector<Index> rows_of_class(Index c) const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == c) out.push_back(static_cast<Index>(i));
    return out;
  }

  /// Subset of rows, keeping the class list.
  BasicLabeledDataset select(std::span<const Index> rows) const {
    RowMatrix<Scalar> m(static_cast<Index>(rows.size()), dims());
    std::vector<Index> labels;
    labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      m.row(static_cast<Index>(i)) = features_.row(rows[i]);
      labels.push_back(labels_[rows[i]]);
    }
    return BasicLabeledDataset(BasicEmbeddingMatrix<Scalar>(std::move(m)), std::move(labels), class_names_);
  }

  friend bool operator==(const BasicLabeledDataset&, const BasicLabeledDataset&) = default;

 private:
  BasicEmbeddingMatrix<Scalar> features_;
  std::vector<Index> labels_;
  std::vector<std::string> class_names_;
  std::vector<Index> counts_;
};

/// Linear classifier: logits = weights * x + bias.
template <typename Scalar>
class BasicClassifierHead {
 public:
  BasicClassifierHead() = default;
  explicit BasicClassifierHead(BasicEmbeddingMatrix<Scalar> weights, std::optional<Vector<Scalar>> bias = std::nullopt)
      : weights_(std::move(weights)), bias_(std::move(bias)) {
    if (bias_) {
      if (bias_->size() != weights_.rows())
        fail(ErrorKind::InconsistentDims, "bias length " + std::to_string(bias_->size()) + " != classes " +
                                              std::to_string(weights_.rows()));
      require_finite(*bias_, "head bias");
    }
  }

  const BasicEmbeddingMatrix<Scalar>& weights() const { return weights_; }
  const std::optional<Vector<Scalar>>& bias() const { return bias_; }
  Index num_classes() const { return weights_.rows(); }
  Index dims() const { return weights_.dims(); }

  friend bool operator==(const BasicClassifierHead& a, const BasicClassifierHead& b) {
    if (!(a.weights_ == b.weights_) || a.bias_.has_value() != b.bias_.has_value()) return false;
    return !a.bias_ || (a.bias_->size() == b.bias_->size() && *a.bias_ == *b.bias_);
  }

 private:
  BasicEmbeddingMatrix<Scalar> weights_;
  std::optional<Vector<Scalar>> bias_;
};

enum class Normalization { Unit, Raw };

/// Ordered, uniquely named concept embeddings. The embeddings are kept as
/// supplied (`raw()`) and, in Unit mode, L2-normalized for use (`embeddings()`).
template <typename Scalar>
class BasicConceptSet {
 public:
  BasicConceptSet() = default;
  BasicConceptSet(std::vector<std::string> names, RowMatrix<Scalar> raw, Normalization mode = Normalization::Unit)
      : names_(std::move(names)), raw_(std::move(raw)), mode_(mode) {
    if (static_cast<Index>(names_.size()) != raw_.matrix().rows())
      fail(ErrorKind::InconsistentDims, "concept names (" + std::to_string(names_.size()) + ") != rows (" +
                                            std::to_string(raw_.matrix().rows()) + ")");
    std::unordered_set<std::string> seen;
    for (const auto& n : names_)
      if (!seen.insert(n).second) fail(ErrorKind::DuplicateName, "duplicate concept name '" + n + "'");
    RowMatrix<Scalar> used = raw_.matrix();
    norms_.resize(used.rows());
    for (Index i = 0; i < used.rows(); ++i) {
      norms_[i] = used.row(i).norm();
      if (!(norms_[i] > Scalar(0))) fail(ErrorKind::ZeroVector, "concept '" + names_[i] + "' has zero norm");
      if (mode_ == Normalization::Unit) used.row(i) /= norms_[i];
    }
    emb_ = BasicEmbeddingMatrix<Scalar>(std::move(used));
  }

  /// Empty set of the given dimension.
  static BasicConceptSet empty(Index dims, Normalization mode = Normalization::Unit) {
    return BasicConceptSet({}, RowMatrix<Scalar>(0, dims), mode);
  }

  Index size() const { return static_cast<Index>(names_.size()); }
  Index dims() const { return raw_.dims(); }
  bool empty() const { return names_.empty(); }
  Normalization normalization() const { return mode_; }
  const std::vector<std::string>& names() const { return names_; }
  const BasicEmbeddingMatrix<Scalar>& embeddings() const { return emb_; }
  const BasicEmbeddingMatrix<Scalar>& raw() const { return raw_; }
  const Vector<Scalar>& raw_norms() const { return norms_; }

  std::optional<Index> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<Index>(i);
    return std::nullopt;
  }

  Index index_of(const std::string& name) const {
    auto i = find(name);
    if (!i) fail(ErrorKind::UnknownConcept, "unknown concept '" + name + "'");
    return *i;
  }

  /// Subset in the given order.
  BasicConceptSet select(std::span<const Index> rows) const {
    std::vector<std::string> names;
    RowMatrix<Scalar> m(static_cast<Index>(rows.size()), dims());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= size()) fail(ErrorKind::IndexOutOfRange, "concept index out of range");
      names.push_back(names_[rows[i]]);
      m.row(static_cast<Index>(i)) = raw_.row(rows[i]);
    }
    return BasicConceptSet(std::move(names), std::move(m), mode_);
  }

  friend bool operator==(const BasicConceptSet& a, const BasicConceptSet& b) {
    return a.names_ == b.names_ && a.mode_ == b.mode_ && a.raw_ == b.raw_;
  }

 private:
  std::vector<std::string> names_;
  BasicEmbeddingMatrix<Scalar> raw_;
  BasicEmbeddingMatrix<Scalar> emb_;
  Vector<Scalar> norms_;
  Normalization mode_ = Normalization::Unit;
};

using EmbeddingMatrix = BasicEmbeddingMatrix<double>;
using LabeledDataset = BasicLabeledDataset<double>;
using ClassifierHead = BasicClassifierHead<double>;
using ConceptSet = BasicConceptSet<double>;

}  // namespace ocbm
