#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ocbm/core.hpp"
#include "ocbm/reconstruct.hpp"

namespace ocbm {

enum class Termination { ToleranceMet, SearchSpaceExhausted, MaxIters };

inline std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::ToleranceMet: return "tolerance_met";
    case Termination::SearchSpaceExhausted: return "search_space_exhausted";
    case Termination::MaxIters: return "max_iters";
  }
  return "unknown";
}

inline Termination termination_from_string(std::string_view s) {
  if (s == "tolerance_met") return Termination::ToleranceMet;
  if (s == "search_space_exhausted") return Termination::SearchSpaceExhausted;
  if (s == "max_iters") return Termination::MaxIters;
  fail(ErrorKind::InvalidArgument, "unknown termination '" + std::string(s) + "'");
}

template <typename Scalar>
struct BasicDiscoveryStep {
  std::string concept_name;
  Scalar alpha = 0;             // optimal scalar for the selected concept
  Scalar residual_sq_norm = 0;  // after the update
  Scalar abs_cosine = 0;        // |cos| at selection time

  friend bool operator==(const BasicDiscoveryStep&, const BasicDiscoveryStep&) = default;
};

template <typename Scalar>
struct BasicDiscoveryTrace {
  Index class_index = 0;
  Scalar initial_sq_norm = 0;
  std::vector<BasicDiscoveryStep<Scalar>> steps;
  Termination terminated_by = Termination::ToleranceMet;

  std::vector<std::string> concept_names() const {
    std::vector<std::string> out;
    for (const auto& s : steps) out.push_back(s.concept_name);
    return out;
  }
  Scalar final_sq_norm() const { return steps.empty() ? initial_sq_norm : steps.back().residual_sq_norm; }

  friend bool operator==(const BasicDiscoveryTrace&, const BasicDiscoveryTrace&) = default;
};

using DiscoveryStep = BasicDiscoveryStep<double>;
using DiscoveryTrace = BasicDiscoveryTrace<double>;

struct PursuitOptions {
  /// Skip concepts whose |cosine| with the residual is below the threshold
  /// instead of consuming them with a zero coefficient.
  bool zero_gain_pruning = true;
  double zero_gain_threshold = 1e-12;
};

/// Greedy residual pursuit: repeatedly pick the search-space concept with the
/// largest |cosine| to the residual, subtract its optimal multiple, and drop
/// it from the space. Stops once ||R||^2 <= epsilon, the space is empty, or
/// max_iters steps were taken. Ties go to the lowest remaining index.
template <typename Derived>
BasicDiscoveryTrace<typename Derived::Scalar> discover_missing(const Eigen::MatrixBase<Derived>& residual,
                                                               const BasicConceptSet<typename Derived::Scalar>& space,
                                                               double epsilon, std::size_t max_iters,
                                                               const PursuitOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (!(epsilon > 0)) fail(ErrorKind::InvalidArgument, "epsilon must be positive");
  if (!space.empty() && residual.size() != space.dims())
    fail(ErrorKind::DimensionMismatch, "residual dims " + std::to_string(residual.size()) + " != space dims " +
                                           std::to_string(space.dims()));
  require_finite(residual, "residual");

  const auto& T = space.embeddings().matrix();
  Vector<Scalar> tnorm(T.rows());
  for (Index i = 0; i < T.rows(); ++i) tnorm[i] = T.row(i).norm();

  std::vector<Index> remaining(static_cast<std::size_t>(T.rows()));
  for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = static_cast<Index>(i);

  BasicDiscoveryTrace<Scalar> trace;
  Vector<Scalar> R = residual;
  Scalar sq = R.squaredNorm();
  trace.initial_sq_norm = sq;

  while (true) {
    if (!(sq > Scalar(epsilon))) {
      trace.terminated_by = Termination::ToleranceMet;
      break;
    }
    if (remaining.empty()) {
      trace.terminated_by = Termination::SearchSpaceExhausted;
      break;
    }
    if (trace.steps.size() >= max_iters) {
      trace.terminated_by = Termination::MaxIters;
      break;
    }

    const Scalar rnorm = std::sqrt(sq);
    std::size_t best = 0;
    Scalar best_cos = -1;
    for (std::size_t j = 0; j < remaining.size(); ++j) {
      const Index t = remaining[j];
      const Scalar c = std::abs(R.dot(T.row(t).transpose())) / (rnorm * tnorm[t]);
      if (c > best_cos) {
        best_cos = c;
        best = j;
      }
    }
    if (opts.zero_gain_pruning && best_cos < Scalar(opts.zero_gain_threshold)) {
      // every remaining concept is orthogonal to the residual
      remaining.clear();
      continue;
    }

    const Index t = remaining[best];
    const Scalar a = R.dot(T.row(t).transpose()) / (tnorm[t] * tnorm[t]);
    R -= a * T.row(t).transpose();
    sq = R.squaredNorm();
    trace.steps.push_back({space.names()[static_cast<std::size_t>(t)], a, sq, std::min(best_cos, Scalar(1))});
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return trace;
}

/// Runs discover_missing on every class residual with its own copy of the
/// search space.
template <typename Scalar>
std::vector<BasicDiscoveryTrace<Scalar>> discover_all_classes(const BasicReconstructionResult<Scalar>& result,
                                                              const BasicConceptSet<Scalar>& space, double epsilon,
                                                              std::size_t max_iters, const PursuitOptions& opts = {}) {
  std::vector<BasicDiscoveryTrace<Scalar>> out;
  const auto& R = result.residuals.matrix();
  for (Index c = 0; c < R.rows(); ++c) {
    auto trace = discover_missing(R.row(c).transpose(), space, epsilon, max_iters, opts);
    trace.class_index = c;
    out.push_back(std::move(trace));
  }
  return out;
}

/// Queried concepts followed by every discovered concept not already present,
/// in order of first discovery.
template <typename Scalar>
BasicConceptSet<Scalar> merge_discovered(const BasicConceptSet<Scalar>& queried, const BasicConceptSet<Scalar>& space,
                                         const std::vector<BasicDiscoveryTrace<Scalar>>& traces) {
  std::vector<Index> picks;
  std::vector<std::string> seen = queried.names();
  for (const auto& tr : traces)
    for (const auto& s : tr.steps) {
      if (std::find(seen.begin(), seen.end(), s.concept_name) != seen.end()) continue;
      seen.push_back(s.concept_name);
      picks.push_back(space.index_of(s.concept_name));
    }
  const auto extra = space.select(picks);
  if (queried.empty()) return BasicConceptSet<Scalar>(extra.names(), extra.raw().matrix(), queried.normalization());
  return edit_concepts<Scalar>(queried, extra, {}, {});
}

/// Joint re-fit of the head over queried plus discovered concepts.
template <typename Scalar>
BasicReconstructionResult<Scalar> refit_with_discovered(const BasicClassifierHead<Scalar>& head,
                                                        const BasicConceptSet<Scalar>& queried,
                                                        const BasicConceptSet<Scalar>& space,
                                                        const std::vector<BasicDiscoveryTrace<Scalar>>& traces) {
  return reconstruct_head(head, merge_discovered(queried, space, traces));
}

template <typename Scalar>
struct BasicRemovalResult {
  Vector<Scalar> gamma;
  BasicClassifierHead<Scalar> new_head;
  std::string removed_name;
  Vector<Scalar> removed_embedding;
};

using RemovalResult = BasicRemovalResult<double>;

/// Projects every class weight vector off the given concept direction.
/// gamma_c = (v_c . t) / (t . t); the bias is carried over unchanged.
template <typename Scalar, typename Derived>
BasicRemovalResult<Scalar> remove_unknown(const BasicClassifierHead<Scalar>& head, const std::string& name,
                                          const Eigen::MatrixBase<Derived>& concept_vector) {
  if (concept_vector.size() != head.dims())
    fail(ErrorKind::DimensionMismatch, "concept '" + name + "' has dims " + std::to_string(concept_vector.size()));
  const Vector<Scalar> t = concept_vector;
  const Scalar tt = t.squaredNorm();
  if (!(tt > Scalar(0))) fail(ErrorKind::ZeroVector, "cannot remove zero-norm concept '" + name + "'");

  const auto& V = head.weights().matrix();
  BasicRemovalResult<Scalar> out;
  out.gamma = (V * t) / tt;
  RowMatrix<Scalar> W = V - out.gamma * t.transpose();
  out.new_head = BasicClassifierHead<Scalar>(BasicEmbeddingMatrix<Scalar>(std::move(W)), head.bias());
  out.removed_name = name;
  out.removed_embedding = t;
  return out;
}

}  // namespace ocbm
