#pragma once
// Block Influence scoring and whole-layer removal.

#include <iosfwd>
#include <vector>

#include "prunelab/data.hpp"
#include "prunelab/model.hpp"
#include "prunelab/plan.hpp"

namespace prunelab::layerprune {

using model::ToyLVLM;

// Which token positions enter the per-layer cosine average.
enum class BiTokens { kAll, kText, kResponse };

struct BlockInfluenceReport {
  std::vector<double> scores;  // one per layer, in [0, 2]
  int n_samples = 0;
  std::int64_t token_count = 0;
};

// BI_i = 1 - mean over pooled (sample, token) rows of cos(H_i, H_{i+1});
// rows where either side has zero norm count as cosine 0.
BlockInfluenceReport block_influence(const ToyLVLM& m, const std::vector<Triplet>& calibration,
                                     BiTokens tokens = BiTokens::kAll, int jobs = 1);

// Row cosine as used by block_influence.
double row_cosine(const double* a, const double* b, std::size_t n);

// Drops the fewest lowest-BI layers (ties toward lower index) whose LLM
// parameters reach target_ratio of the LLM total.
PruningPlan plan_layer_removal(const BlockInfluenceReport& report, const ToyLVLM& m,
                               double target_ratio);

ToyLVLM apply_layer_plan(const ToyLVLM& m, const PruningPlan& plan);

// Two columns: layer index, BI.
void dump_report(const BlockInfluenceReport& report, std::ostream& os);

BiTokens parse_bi_tokens(const std::string& s);
std::string bi_tokens_name(BiTokens t);

}  // namespace prunelab::layerprune
