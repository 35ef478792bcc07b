#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "ocbm/discovery.hpp"
#include "test_util.hpp"

using namespace ocbm;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

ConceptSet set_of(std::vector<std::string> names, const RowMatrixXd& t) {
  return ConceptSet(std::move(names), t, Normalization::Raw);
}

RowMatrixXd identity2() {
  RowMatrixXd t(2, 2);
  t << 1, 0, 0, 1;
  return t;
}

}  // namespace

TEST_CASE("pursuit picks the larger |cosine| first") {
  const auto tr = discover_missing(vec({2, 1}), set_of({"x", "y"}, identity2()), 1e-9, 1000);
  REQUIRE(tr.steps.size() == 2);
  CHECK(tr.steps[0].concept_name == "x");
  CHECK(tr.steps[0].alpha == doctest::Approx(2.0));
  CHECK(tr.steps[0].residual_sq_norm == doctest::Approx(1.0));
  CHECK(tr.steps[1].concept_name == "y");
  CHECK(tr.steps[1].alpha == doctest::Approx(1.0));
  CHECK(tr.steps[1].residual_sq_norm == doctest::Approx(0.0));
  CHECK(tr.terminated_by == Termination::ToleranceMet);
}

TEST_CASE("zero residual yields an empty trace") {
  const auto tr = discover_missing(vec({0, 0}), set_of({"x", "y"}, identity2()), 1e-9, 1000);
  CHECK(tr.steps.empty());
  CHECK(tr.terminated_by == Termination::ToleranceMet);
}

TEST_CASE("orthogonal concept: literal vs pruned") {
  RowMatrixXd t(1, 2);
  t << 0, 1;
  PursuitOptions literal;
  literal.zero_gain_pruning = false;
  const auto lit = discover_missing(vec({1, 0}), set_of({"y"}, t), 1e-9, 1000, literal);
  REQUIRE(lit.steps.size() == 1);
  CHECK(lit.steps[0].alpha == 0.0);
  CHECK(lit.steps[0].residual_sq_norm == 1.0);
  CHECK(lit.terminated_by == Termination::SearchSpaceExhausted);

  const auto pruned = discover_missing(vec({1, 0}), set_of({"y"}, t), 1e-9, 1000);
  CHECK(pruned.steps.empty());
  CHECK(pruned.terminated_by == Termination::SearchSpaceExhausted);
}

TEST_CASE("negative coefficients are allowed") {
  RowMatrixXd t(1, 2);
  t << -1, 0;
  const auto tr = discover_missing(vec({3, 4}), set_of({"neg"}, t), 1e-9, 1000);
  REQUIRE(tr.steps.size() == 1);
  CHECK(tr.steps[0].alpha == doctest::Approx(-3.0));
  CHECK(tr.steps[0].residual_sq_norm == doctest::Approx(16.0));
}

TEST_CASE("max_iters caps the loop") {
  std::mt19937_64 rng(7);
  const auto space = test::random_concepts(30, 10, rng);
  const auto tr = discover_missing(test::random_vector(10, rng), space, 1e-30, 4);
  CHECK(tr.steps.size() == 4);
  CHECK(tr.terminated_by == Termination::MaxIters);
}

TEST_CASE("ties go to the lowest index") {
  RowMatrixXd t(3, 2);
  t << 0, 1, 1, 0, -1, 0;
  const auto tr = discover_missing(vec({1, 0}), set_of({"y", "x", "negx"}, t), 1e-9, 1000);
  REQUIRE(!tr.steps.empty());
  CHECK(tr.steps[0].concept_name == "x");
}

TEST_CASE("pursuit invariants on random instances") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const auto space = test::random_concepts(25, 12, rng, trial % 2 ? Normalization::Raw : Normalization::Unit);
    const auto r0 = test::random_vector(12, rng);
    const auto tr = discover_missing(r0, space, 1e-12, 1000);
    double prev = r0.squaredNorm();
    std::set<std::string> names;
    VectorXd R = r0;
    for (const auto& s : tr.steps) {
      CHECK(names.insert(s.concept_name).second);
      // energy identity: |R_new|^2 = |R|^2 (1 - cos^2)
      const double expect = prev * (1.0 - s.abs_cosine * s.abs_cosine);
      CHECK(std::abs(s.residual_sq_norm - expect) <= 1e-10 * prev);
      CHECK(s.residual_sq_norm <= prev);
      if (s.abs_cosine > 0) CHECK(s.residual_sq_norm < prev);
      R -= s.alpha * space.embeddings().row(space.index_of(s.concept_name)).transpose();
      CHECK(std::abs(R.squaredNorm() - s.residual_sq_norm) <= 1e-12 * r0.squaredNorm());
      prev = s.residual_sq_norm;
    }
    CHECK(tr == discover_missing(r0, space, 1e-12, 1000));
  }
}

TEST_CASE("orthogonal dictionary recovers a sparse head") {
  std::mt19937_64 rng(19);
  const Index D = 8;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(test::random_matrix(D, D, rng));
  const RowMatrixXd Q = Eigen::MatrixXd(qr.householderQ()).transpose();
  const ConceptSet dict(test::numbered("d", D), Q);
  RowMatrixXd v = 1.5 * Q.row(1) - 0.7 * Q.row(4) + 0.3 * Q.row(6);

  const auto r = reconstruct_head(ClassifierHead(EmbeddingMatrix(v)), ConceptSet::empty(D));
  const auto traces = discover_all_classes(r, dict, 1e-20, 100);
  REQUIRE(traces.size() == 1);
  const auto names = traces[0].concept_names();
  CHECK(std::set<std::string>(names.begin(), names.end()) == std::set<std::string>{"d1", "d4", "d6"});
  CHECK(traces[0].final_sq_norm() < 1e-20);
  CHECK(traces[0].terminated_by == Termination::ToleranceMet);

  const auto refit = refit_with_discovered(ClassifierHead(EmbeddingMatrix(v)), ConceptSet::empty(D), dict, traces);
  CHECK(refit.num_concepts() == 3);
  CHECK(refit.total_error < 1e-20);
}

TEST_CASE("discover_all_classes uses a fresh space per class") {
  RowMatrixXd v(2, 2);
  v << 1, 0, 1, 0;
  const auto r = reconstruct_head(ClassifierHead(EmbeddingMatrix(v)), ConceptSet::empty(2));
  const auto traces = discover_all_classes(r, set_of({"x", "y"}, identity2()), 1e-9, 10);
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].class_index == 0);
  CHECK(traces[1].class_index == 1);
  CHECK(traces[0].concept_names() == std::vector<std::string>{"x"});
  CHECK(traces[1].concept_names() == std::vector<std::string>{"x"});

  RowMatrixXd zero = RowMatrixXd::Zero(3, 2);
  const auto rz = reconstruct_head(ClassifierHead(EmbeddingMatrix(zero)), ConceptSet::empty(2));
  for (const auto& t : discover_all_classes(rz, set_of({"x", "y"}, identity2()), 1e-9, 10)) CHECK(t.steps.empty());
}

TEST_CASE("discovery errors") {
  CHECK_THROWS_AS(discover_missing(vec({1, 0}), set_of({"x", "y"}, identity2()), 0.0, 10), Error);
  CHECK_THROWS_AS(discover_missing(vec({1, 0, 0}), set_of({"x", "y"}, identity2()), 1e-6, 10), Error);
}

TEST_CASE("remove_unknown") {
  RowMatrixXd v(1, 2);
  v << 2, 1;
  const ClassifierHead head{EmbeddingMatrix(v)};
  const auto r = remove_unknown(head, "x", vec({1, 0}));
  CHECK(r.gamma[0] == doctest::Approx(2.0));
  CHECK(r.new_head.weights().row(0)(0) == doctest::Approx(0.0));
  CHECK(r.new_head.weights().row(0)(1) == doctest::Approx(1.0));

  const auto again = remove_unknown(r.new_head, "x", vec({1, 0}));
  CHECK(again.gamma[0] == 0.0);
  CHECK(again.new_head == r.new_head);

  RowMatrixXd w(2, 2);
  w << 0, 1, 0, -3;
  const auto orth = remove_unknown(ClassifierHead(EmbeddingMatrix(w), VectorXd::Ones(2)), "x", vec({1, 0}));
  CHECK(orth.gamma.norm() == 0.0);
  CHECK(orth.new_head.weights().matrix() == w);
  CHECK(*orth.new_head.bias() == VectorXd::Ones(2));

  CHECK_THROWS_AS(remove_unknown(head, "z", vec({0, 0})), Error);
  CHECK_THROWS_AS(remove_unknown(head, "z", vec({1, 0, 0})), Error);
}

TEST_CASE("removal is an orthogonal projection") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const RowMatrixXd v = test::random_matrix(5, 9, rng);
    const auto t = test::random_vector(9, rng, 3.0);
    const auto r = remove_unknown(ClassifierHead(EmbeddingMatrix(v)), "t", t);
    for (Index c = 0; c < 5; ++c) {
      const auto nv = r.new_head.weights().row(c);
      CHECK(std::abs(nv.dot(t)) <= 1e-8 * v.row(c).norm() * t.norm());
      CHECK(nv.norm() <= v.row(c).norm());
      CHECK((nv - (v.row(c) - r.gamma[c] * t.transpose())).norm() == 0.0);
    }
    const auto twice = remove_unknown(r.new_head, "t", t);
    CHECK((twice.new_head.weights().matrix() - r.new_head.weights().matrix()).norm() < 1e-12);
  }
}
