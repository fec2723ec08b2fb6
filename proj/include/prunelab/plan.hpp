#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace prunelab {

enum class GroupKind { kAttentionHead, kMlpChannel };

// A weight slice: `axis` 0 selects rows, 1 selects columns.
struct Slice {
  std::string matrix;  // wq, wk, wv, wo, w_up, w_gate, w_down
  int axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Weights that must be removed together: head j spans its columns of
// Wq/Wk/Wv and its rows of Wo; MLP channel c spans column c of W_up and
// W_gate and row c of W_down.
struct DependencyGroup {
  int group_id = 0;
  int layer_index = 0;
  GroupKind kind = GroupKind::kAttentionHead;
  int unit = 0;  // head or channel index within the layer
  std::vector<Slice> slices;
  std::int64_t params = 0;
};

enum class PruneMethod { kLayer, kWidth };

struct PruningPlan {
  PruneMethod method = PruneMethod::kLayer;
  double target_ratio = 0.0;
  std::vector<int> layers;                // layer positions to drop
  std::vector<DependencyGroup> groups;    // groups to drop
  std::int64_t params_before = 0;         // llm_only
  std::int64_t params_removed = 0;
  double achieved_ratio = 0.0;
};

// 1 - remaining/total, the same expression used when checking a pruned model.
inline double ratio_removed(std::int64_t total, std::int64_t removed) {
  return 1.0 - static_cast<double>(total - removed) / static_cast<double>(total);
}

std::string group_kind_name(GroupKind k);
std::string method_name(PruneMethod m);
PruneMethod parse_method(const std::string& s);

}  // namespace prunelab
