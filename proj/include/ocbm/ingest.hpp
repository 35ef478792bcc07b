#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ocbm/core.hpp"
#include "ocbm/discovery.hpp"
#include "ocbm/inference.hpp"
#include "ocbm/reconstruct.hpp"

namespace ocbm::io {

namespace fs = std::filesystem;

// Matrix file layout (all integers little-endian):
//   0  char[4]  "OCBM"
//   4  u16      format version
//   6  u32      rows
//   10 u32      dims
//   14 f32[rows*dims] row-major payload
inline constexpr char kMagic[4] = {'O', 'C', 'B', 'M'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 14;

/// Encodes with 32-bit storage; values are rounded to the nearest float.
std::vector<std::uint8_t> encode_matrix(const RowMatrixXd& m);
RowMatrixXd decode_matrix(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

/// Rounds every entry to the nearest representable 32-bit float.
RowMatrixXd quantize(const RowMatrixXd& m);

void write_matrix(const fs::path& path, const RowMatrixXd& m);
RowMatrixXd read_matrix(const fs::path& path);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

void write_labels(const fs::path& path, std::span<const Index> labels);
std::vector<Index> read_labels(const fs::path& path);

void write_class_names(const fs::path& path, const std::vector<std::string>& names);
std::vector<std::string> read_class_names(const fs::path& path);

void write_vector_csv(const fs::path& path, const std::string& column, const VectorXd& v);
VectorXd read_vector_csv(const fs::path& path);

// Concept manifest (JSON):
//   { "names": [...], "matrix_file": "x.ocbm", "normalize": true, "raw_norms": [...] }
// matrix_file is resolved relative to the manifest. The matrix holds the
// embeddings as supplied; "normalize" selects unit-norm use on load.

/// Loads a manifest; `mode` overrides the manifest's normalization flag.
ConceptSet load_concepts(const fs::path& manifest, std::optional<Normalization> mode = std::nullopt);
/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.ocbm`.
void write_concepts(const fs::path& dir, const std::string& stem, const ConceptSet& concepts);

struct NamedConceptSet {
  std::string name;  // manifest stem
  ConceptSet concepts;

  friend bool operator==(const NamedConceptSet&, const NamedConceptSet&) = default;
};

/// A bundle directory:
///   features.ocbm   N x D_in extractor inputs
///   reference.ocbm  N x D reference-space embeddings of the same rows
///   labels.csv      header "row,label"
///   class_names.txt one name per line
///   head.ocbm       C x D (+ head_bias.csv)
///   concepts/*.json concept manifests
struct Bundle {
  LabeledDataset train;
  LabeledDataset reference;
  ClassifierHead head;
  std::vector<NamedConceptSet> concepts;

  const ConceptSet& concept_set(const std::string& name) const;
  friend bool operator==(const Bundle&, const Bundle&) = default;
};

Bundle load_bundle(const fs::path& dir, std::optional<Normalization> mode = std::nullopt);
void write_bundle(const fs::path& dir, const Bundle& bundle);

ClassifierHead load_head(const fs::path& matrix, const std::optional<fs::path>& bias_csv);
void write_head(const fs::path& matrix, const fs::path& bias_csv, const ClassifierHead& head);

/// Resolves a concept reference: an existing manifest path, or the stem of a
/// manifest under `<bundle>/concepts/`.
fs::path resolve_manifest(const fs::path& bundle_dir, const std::string& ref);

// Reconstruction results: alpha.ocbm, residuals.ocbm, reconstruction.json.
void write_reconstruction(const fs::path& dir, const ReconstructionResult& r,
                          const std::vector<std::string>& class_names);
ReconstructionResult read_reconstruction(const fs::path& dir);

// Discovery traces
nlohmann::json traces_to_json(const std::vector<DiscoveryTrace>& traces, const std::vector<std::string>& class_names);
std::vector<DiscoveryTrace> traces_from_json(const nlohmann::json& j);
/// Line-oriented form: "class <c> <name> initial <sq> terminated_by <reason>"
/// followed by tab-separated "step name alpha residual_sq_norm abs_cosine".
std::string traces_to_text(const std::vector<DiscoveryTrace>& traces, const std::vector<std::string>& class_names);
std::vector<DiscoveryTrace> traces_from_text(const std::string& text);

// Reports
void write_accuracy_csv(const fs::path& path, const AccuracyReport& report);
AccuracyReport read_accuracy_csv(const fs::path& path);
/// Columns: class_name,before,after,delta
void write_delta_csv(const fs::path& path, const AccuracyDelta& delta);
void write_matrix_csv(const fs::path& path, const RowMatrixXd& m, const std::vector<std::string>& header);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace ocbm::io
