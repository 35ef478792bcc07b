#include <cmath>
#include <random>

#include "doctest.h"
#include "ocbm/inference.hpp"
#include "test_util.hpp"

using namespace ocbm;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("infer_full") {
  RowMatrixXd w(2, 2);
  w << 1, 0, 0, 1;
  const ClassifierHead head{EmbeddingMatrix(w)};
  CHECK(infer_full(head, vec({3, 4})) == vec({3, 4}));
  CHECK(infer_full(head, vec({0, 0})).norm() == 0.0);
  CHECK_THROWS_AS(infer_full(head, vec({1, 2, 3})), Error);

  std::mt19937_64 rng(2);
  const RowMatrixXd v = test::random_matrix(4, 6, rng);
  const auto b = test::random_vector(4, rng);
  const auto x = test::random_vector(6, rng);
  const auto logits = infer_full(ClassifierHead(EmbeddingMatrix(v), b), x);
  for (Index c = 0; c < 4; ++c) {
    double dot = b[c];
    for (Index j = 0; j < 6; ++j) dot += v(c, j) * x[j];
    CHECK(std::abs(logits[c] - dot) < 1e-12);
  }
}

TEST_CASE("decomposition by hand") {
  ReconstructionResult r;
  r.alpha.resize(1, 1);
  r.alpha << 2;
  RowMatrixXd res(1, 2);
  res << 0, 1;
  r.residuals = EmbeddingMatrix(res);
  r.concept_names = {"t"};
  RowMatrixXd t(1, 2);
  t << 1, 0;
  const ConceptSet cs({"t"}, t, Normalization::Raw);
  const auto d = infer_decomposed(r, cs, std::nullopt, vec({3, 4}), true);
  CHECK(d.concept_terms(0, 0) == doctest::Approx(6.0));
  CHECK(d.residual_term[0] == doctest::Approx(4.0));
  CHECK(d.logits[0] == doctest::Approx(10.0));
  const auto only = infer_decomposed(r, cs, std::nullopt, vec({3, 4}), false);
  CHECK(only.logits[0] == doctest::Approx(6.0));
}

TEST_CASE("zero alpha leaves only the residual term") {
  ReconstructionResult r;
  r.alpha = RowMatrixXd::Zero(2, 2);
  RowMatrixXd res(2, 2);
  res << 1, 2, 3, 4;
  r.residuals = EmbeddingMatrix(res);
  const ConceptSet cs({"a", "b"}, RowMatrixXd::Identity(2, 2));
  const auto d = infer_decomposed(r, cs, std::nullopt, vec({1, 1}), true);
  CHECK(d.logits == vec({3, 7}));
}

TEST_CASE("concept plus residual equals the full head") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const Index D = 10, C = 4, k = 1 + trial % 8;
    const RowMatrixXd v = test::random_matrix(C, D, rng);
    const auto bias = test::random_vector(C, rng);
    const ClassifierHead head(EmbeddingMatrix(v), bias);
    const auto cs = test::random_concepts(k, D, rng);
    const auto r = reconstruct_head(head, cs);
    const auto x = test::random_vector(D, rng);
    const auto d = infer_decomposed(r, cs, head.bias(), x, true);
    const auto full = infer_full(head, x);
    for (Index c = 0; c < C; ++c) {
      CHECK(rel(d.logits[c], full[c]) < 1e-6);
      double s = 0;
      for (Index j = 0; j < k; ++j) s += d.concept_terms(c, j);
      CHECK(d.logits[c] == s + d.residual_term[c] + d.bias_term[c]);
    }

    RowMatrixXd F = test::random_matrix(7, D, rng);
    const auto L = decomposed_logits(r, cs, head.bias(), F, true);
    CHECK((L - head_logits(head, F)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("exact reconstruction makes the residual irrelevant") {
  std::mt19937_64 rng(9);
  const auto cs = test::random_concepts(6, 4, rng);
  const ClassifierHead head(EmbeddingMatrix(test::random_matrix(3, 4, rng)));
  const auto r = reconstruct_head(head, cs);
  const auto x = test::random_vector(4, rng);
  const auto a = infer_decomposed(r, cs, std::nullopt, x, true);
  const auto b = infer_decomposed(r, cs, std::nullopt, x, false);
  CHECK((a.logits - b.logits).norm() < 1e-12);
}

TEST_CASE("a zero-weight concept does not change concept-only logits") {
  std::mt19937_64 rng(10);
  const auto cs = test::random_concepts(3, 5, rng);
  const ClassifierHead head(EmbeddingMatrix(test::random_matrix(2, 5, rng)));
  auto r = reconstruct_head(head, cs);
  const auto x = test::random_vector(5, rng);
  const auto base = infer_decomposed(r, cs, std::nullopt, x, false);

  RowMatrixXd extra = test::random_matrix(1, 5, rng);
  const auto bigger = edit_concepts<double>(cs, ConceptSet({"extra"}, extra), {}, {});
  ReconstructionResult r2 = r;
  r2.alpha.conservativeResize(2, 4);
  r2.alpha.col(3).setZero();
  r2.concept_names.push_back("extra");
  const auto with = infer_decomposed(r2, bigger, std::nullopt, x, false);
  CHECK((with.logits - base.logits).norm() < 1e-14);
}

TEST_CASE("inverse scaling leaves logits unchanged") {
  std::mt19937_64 rng(12);
  RowMatrixXd t = test::random_matrix(4, 8, rng);
  const ClassifierHead head(EmbeddingMatrix(test::random_matrix(3, 8, rng)));
  const ConceptSet a(test::numbered("c", 4), t, Normalization::Raw);
  const ConceptSet b(test::numbered("c", 4), RowMatrixXd(3.0 * t), Normalization::Raw);
  const auto ra = reconstruct_head(head, a);
  const auto rb = reconstruct_head(head, b);
  const auto x = test::random_vector(8, rng);
  const auto la = infer_decomposed(ra, a, std::nullopt, x, false).logits;
  const auto lb = infer_decomposed(rb, b, std::nullopt, x, false).logits;
  CHECK((la - lb).norm() < 1e-10 * la.norm());
  CHECK(argmax(la) == argmax(lb));
}

TEST_CASE("evaluate") {
  RowMatrixXd f = RowMatrixXd::Zero(2, 2);
  const LabeledDataset data(EmbeddingMatrix(f), {0, 1}, {"a", "b"});
  RowMatrixXd right(2, 2);
  right << 1, 0, 0, 1;
  CHECK(evaluate(right, data).overall == 1.0);
  RowMatrixXd half(2, 2);
  half << 1, 0, 1, 0;
  const auto h = evaluate(half, data);
  CHECK(h.overall == 0.5);
  CHECK(h.per_class == std::vector<double>{1.0, 0.0});
  // ties pick the lowest class
  RowMatrixXd tie = RowMatrixXd::Ones(2, 2);
  CHECK(evaluate(tie, data).predictions == std::vector<Index>{0, 0});
}

TEST_CASE("evaluate matches brute-force counting and is permutation invariant") {
  std::mt19937_64 rng(14);
  const Index N = 200, C = 5;
  std::vector<Index> labels;
  for (Index i = 0; i < N; ++i) labels.push_back(i % C);
  const LabeledDataset data(EmbeddingMatrix(RowMatrixXd::Zero(N, 1)), labels, test::numbered("k", C));
  const RowMatrixXd L = test::random_matrix(N, C, rng);
  const auto rep = evaluate(L, data);

  int correct = 0;
  std::vector<int> per(C, 0);
  for (Index i = 0; i < N; ++i) {
    Index best = 0;
    for (Index c = 1; c < C; ++c)
      if (L(i, c) > L(i, best)) best = c;
    if (best == labels[i]) {
      ++correct;
      ++per[labels[i]];
    }
  }
  CHECK(rep.overall == static_cast<double>(correct) / N);
  for (Index c = 0; c < C; ++c) CHECK(rep.per_class[c] == per[c] / 40.0);

  std::vector<Index> perm(N);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  RowMatrixXd Lp(N, C);
  std::vector<Index> lp;
  for (Index i = 0; i < N; ++i) {
    Lp.row(i) = L.row(perm[i]);
    lp.push_back(labels[perm[i]]);
  }
  const auto rp = evaluate(Lp, LabeledDataset(EmbeddingMatrix(RowMatrixXd::Zero(N, 1)), lp, test::numbered("k", C)));
  CHECK(rp.overall == rep.overall);
  CHECK(rp.per_class == rep.per_class);
}

TEST_CASE("accuracy_delta") {
  AccuracyReport a{0.5, {1.0, 0.5, 0.0}, {"x", "y", "z"}, {}};
  const auto same = accuracy_delta(a, a);
  for (double d : same.delta) CHECK(d == 0.0);
  AccuracyReport b = a;
  b.per_class[1] = 0.0;
  const auto d = accuracy_delta(a, b);
  CHECK(d.delta == std::vector<double>{0.0, -0.5, 0.0});
  CHECK(d.by_magnitude()[0] == 1);
  AccuracyReport other = a;
  other.class_names[0] = "q";
  CHECK_THROWS_AS(accuracy_delta(a, other), Error);
}
