#pragma once
// Dependency groups inside each layer, first-order Taylor group importance,
// greedy group selection, physical compaction and a zero-masking oracle.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "prunelab/data.hpp"
#include "prunelab/model.hpp"
#include "prunelab/plan.hpp"

namespace prunelab::widthprune {

using model::ToyLVLM;

// Per layer: `heads` head groups followed by `ff_channels` channel groups,
// numbered consecutively across layers.
std::vector<DependencyGroup> build_groups(const ToyLVLM& m);

struct GroupImportanceReport {
  std::vector<double> importance;  // indexed like the groups passed in
  std::vector<std::int64_t> params;
  int n_samples = 0;
};

// Mean over calibration samples of sum_{w in G} |dL/dw * w|, with L the mean
// response cross-entropy of that sample.
GroupImportanceReport taylor_importance(const ToyLVLM& m, const std::vector<DependencyGroup>& groups,
                                        const std::vector<Triplet>& calibration, int jobs = 1);

// Per-weight mean |dL/dw * w| for each layer's prunable matrices, keyed by
// matrix name.
using WeightScores = std::vector<std::map<std::string, std::vector<double>>>;
WeightScores taylor_weight_scores(const ToyLVLM& m, const std::vector<Triplet>& calibration);

struct Floors {
  int min_heads = 1;
  int min_channels = 4;
};

// Ascending importance, ties by (layer, group id), skipping groups that would
// break a floor, until the removed LLM parameters reach target_ratio. With
// per_layer_uniform the layers take turns giving up their least important
// eligible group.
PruningPlan plan_width_removal(const GroupImportanceReport& report,
                               const std::vector<DependencyGroup>& groups, const ToyLVLM& m,
                               double target_ratio, Floors floors = {},
                               bool per_layer_uniform = false);

ToyLVLM apply_width_plan(const ToyLVLM& m, const PruningPlan& plan);

// Same architecture with the plan's slices set to zero.
ToyLVLM masked_model(const ToyLVLM& m, const PruningPlan& plan);
model::ForwardTrace masked_forward(const ToyLVLM& m, const PruningPlan& plan, const Triplet& sample);

ndgrad::Array& layer_matrix(model::TransformerLayer& layer, const std::string& name);
const ndgrad::Array& layer_matrix(const model::TransformerLayer& layer, const std::string& name);

// Columns: group_id, layer, kind, params, importance.
void dump_groups(const std::vector<DependencyGroup>& groups, const GroupImportanceReport& report,
                 std::ostream& os);

}  // namespace prunelab::widthprune
