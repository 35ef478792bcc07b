#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ocbm/ingest.hpp"

namespace ocbm {

struct SynthParams {
  Index classes = 5;
  Index dims = 16;
  Index per_class = 20;
  Index concept_count = 0;  // 0: max(2 * classes, dims)
  Index input_dims = 0;     // 0: same as dims
  Index support = 3;        // dictionary concepts per class head
  double noise = 0.5;
  std::uint64_t seed = 0;

  /// Fills defaults and checks ranges.
  SynthParams resolved() const;
};

/// A generated bundle plus the ground truth it was built from.
struct SynthBundle {
  SynthParams params;
  io::Bundle bundle;
  RowMatrixXd ground_truth_alpha;          // C x concept_count, against the raw dictionary
  std::vector<Index> generating_concept;  // dominant dictionary row of each class head

  nlohmann::json metadata() const;
};

inline constexpr const char* kRngName = "std::mt19937_64";

/// Concept dictionary (orthonormal rows when concept_count <= dims, random
/// unit rows otherwise), class heads as sparse combinations of dictionary
/// rows with the class's generating concept dominant, reference embeddings
/// scattered around the normalized heads, and extractor inputs obtained by a
/// fixed random linear map. Every stored value is representable in 32 bits.
SynthBundle synth_dataset(const SynthParams& params);

/// write_bundle plus ground_truth_alpha.ocbm and synth.json.
void write_synth_bundle(const std::filesystem::path& dir, const SynthBundle& synth);

}  // namespace ocbm
