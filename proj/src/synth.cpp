#include "ocbm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ocbm {

namespace {

std::string padded(const std::string& prefix, Index i, Index count, int min_width) {
  int width = 1;
  for (Index n = std::max<Index>(count - 1, 1); n >= 10; n /= 10) ++width;
  width = std::max(width, min_width);
  std::string digits = std::to_string(i);
  return prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') +
         digits;
}

RowMatrixXd gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

/// rows x cols with orthonormal rows (rows <= cols).
RowMatrixXd orthonormal_rows(Index rows, Index cols, std::mt19937_64& rng) {
  const Eigen::MatrixXd g = gaussian(cols, rows, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cols, rows);
  return q.transpose();
}

}  // namespace

SynthParams SynthParams::resolved() const {
  SynthParams p = *this;
  if (p.concept_count == 0) p.concept_count = std::max<Index>(2 * p.classes, p.dims);
  if (p.input_dims == 0) p.input_dims = p.dims;
  if (p.classes < 2) fail(ErrorKind::InvalidArgument, "synth needs at least 2 classes");
  if (p.dims < p.classes) fail(ErrorKind::InvalidArgument, "synth needs dims >= classes");
  if (p.concept_count < 1) fail(ErrorKind::InvalidArgument, "synth needs at least 1 concept");
  if (p.per_class < 1) fail(ErrorKind::InvalidArgument, "synth needs at least 1 sample per class");
  if (p.support < 1) fail(ErrorKind::InvalidArgument, "synth support must be >= 1");
  if (p.input_dims < 1) fail(ErrorKind::InvalidArgument, "synth input dims must be positive");
  if (!(p.noise >= 0) || !std::isfinite(p.noise)) fail(ErrorKind::InvalidArgument, "noise must be >= 0");
  return p;
}

SynthBundle synth_dataset(const SynthParams& params) {
  SynthBundle out;
  out.params = params.resolved();
  const auto& p = out.params;
  const Index C = p.classes, D = p.dims, K = p.concept_count;
  std::mt19937_64 rng(p.seed);

  // dictionary
  RowMatrixXd T;
  if (K <= D) {
    T = orthonormal_rows(K, D, rng);
  } else {
    T = gaussian(K, D, rng);
    for (Index i = 0; i < K; ++i) T.row(i).normalize();
  }
  T = io::quantize(T);

  // sparse class heads
  RowMatrixXd alpha = RowMatrixXd::Zero(C, K);
  std::uniform_real_distribution<double> weight(0.3, 0.7);
  std::bernoulli_distribution sign(0.5);
  for (Index c = 0; c < C; ++c) {
    const Index g = c % K;
    out.generating_concept.push_back(g);
    alpha(c, g) = 2.0;
    std::vector<Index> pool;
    for (Index j = (K > C ? C : 0); j < K; ++j)
      if (j != g) pool.push_back(j);
    std::shuffle(pool.begin(), pool.end(), rng);
    const auto extra = std::min<std::size_t>(static_cast<std::size_t>(p.support - 1), pool.size());
    for (std::size_t s = 0; s < extra; ++s) {
      const double w = weight(rng);
      alpha(c, pool[s]) = static_cast<float>(sign(rng) ? w : -w);
    }
  }
  const RowMatrixXd W = io::quantize(alpha * T);

  // reference embeddings around the normalized heads
  const Index N = C * p.per_class;
  std::vector<Index> labels;
  RowMatrixXd ref(N, D);
  const RowMatrixXd Z = gaussian(N, D, rng);
  const double scale = p.noise / std::sqrt(static_cast<double>(D));
  for (Index c = 0; c < C; ++c)
    for (Index j = 0; j < p.per_class; ++j) {
      const Index i = c * p.per_class + j;
      ref.row(i) = W.row(c).normalized() + scale * Z.row(i);
      labels.push_back(c);
    }
  ref = io::quantize(ref);

  // extractor inputs
  RowMatrixXd M;
  if (p.input_dims >= D) {
    M = orthonormal_rows(D, p.input_dims, rng);
  } else {
    M = gaussian(D, p.input_dims, rng) / std::sqrt(static_cast<double>(D));
  }
  const RowMatrixXd X = io::quantize(ref * M);

  std::vector<std::string> class_names, concept_names;
  for (Index c = 0; c < C; ++c) class_names.push_back(padded("class_", c, C, 2));
  for (Index k = 0; k < K; ++k) concept_names.push_back(padded("concept_", k, K, 3));

  RowMatrixXd gen(C, D);
  for (Index c = 0; c < C; ++c) gen.row(c) = T.row(out.generating_concept[static_cast<std::size_t>(c)]);

  auto& b = out.bundle;
  b.train = LabeledDataset(EmbeddingMatrix(X), labels, class_names);
  b.reference = LabeledDataset(EmbeddingMatrix(ref), labels, class_names);
  b.head = ClassifierHead(EmbeddingMatrix(W));
  b.concepts.push_back({"class_names", ConceptSet(class_names, gen)});
  b.concepts.push_back({"full_dictionary", ConceptSet(concept_names, T)});
  out.ground_truth_alpha = alpha;
  return out;
}

nlohmann::json SynthBundle::metadata() const {
  nlohmann::json j;
  j["generator"] = "ocbm synth";
  j["rng"] = kRngName;
  j["seed"] = params.seed;
  j["classes"] = params.classes;
  j["dims"] = params.dims;
  j["input_dims"] = params.input_dims;
  j["per_class"] = params.per_class;
  j["concept_count"] = params.concept_count;
  j["support"] = params.support;
  j["noise"] = params.noise;
  const auto& dict = bundle.concept_set("full_dictionary");
  std::vector<std::string> gen;
  for (Index g : generating_concept) gen.push_back(dict.names()[static_cast<std::size_t>(g)]);
  j["generating_concepts"] = gen;
  j["ground_truth_alpha_file"] = "ground_truth_alpha.ocbm";
  return j;
}

void write_synth_bundle(const std::filesystem::path& dir, const SynthBundle& synth) {
  io::write_bundle(dir, synth.bundle);
  io::write_matrix(dir / "ground_truth_alpha.ocbm", synth.ground_truth_alpha);
  io::write_text(dir / "synth.json", synth.metadata().dump(2) + "\n");
}

}  // namespace ocbm
