#include "prunelab/widthprune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <set>
#include <tuple>

#include "prunelab/errors.hpp"
#include "prunelab/parallel.hpp"

namespace prunelab {

std::string group_kind_name(GroupKind k) {
  return k == GroupKind::kAttentionHead ? "attention_head" : "mlp_channel";
}

std::string method_name(PruneMethod m) { return m == PruneMethod::kLayer ? "layer" : "width"; }

PruneMethod parse_method(const std::string& s) {
  if (s == "layer") return PruneMethod::kLayer;
  if (s == "width") return PruneMethod::kWidth;
  throw ConfigError("unknown pruning method '" + s + "'");
}

namespace widthprune {

namespace nd = ndgrad;
using ndgrad::Array;
using model::TransformerLayer;

namespace {

const char* const kMatrices[] = {"wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"};

std::size_t axis_len(const Array& a, int axis) { return axis == 0 ? a.rows() : a.cols(); }

template <typename Fn>
void for_each_weight(const Array& a, const Slice& s, Fn&& fn) {
  const std::size_t cols = a.cols();
  if (s.axis == 0) {
    for (std::size_t r = s.begin; r < s.end; ++r) {
      for (std::size_t c = 0; c < cols; ++c) fn(r * cols + c);
    }
  } else {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t c = s.begin; c < s.end; ++c) fn(r * cols + c);
    }
  }
}

// Keeps the listed rows (axis 0) or columns (axis 1).
Array keep(const Array& a, int axis, const std::vector<std::size_t>& idx) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out;
  if (axis == 0) {
    out.reserve(idx.size() * cols);
    for (std::size_t r : idx) {
      out.insert(out.end(), a.data().begin() + static_cast<std::ptrdiff_t>(r * cols),
                 a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }
    return Array({idx.size(), cols}, std::move(out), a.requires_grad());
  }
  out.reserve(rows * idx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c : idx) out.push_back(a.at(r, c));
  }
  return Array({rows, idx.size()}, std::move(out), a.requires_grad());
}

void check_plan_groups(const ToyLVLM& m, const PruningPlan& plan) {
  std::set<std::tuple<int, int, int>> seen;
  for (const DependencyGroup& g : plan.groups) {
    if (g.layer_index < 0 || g.layer_index >= static_cast<int>(m.layers.size())) {
      throw ShapeError("width plan: group " + std::to_string(g.group_id) + " names missing layer " +
                       std::to_string(g.layer_index));
    }
    const TransformerLayer& l = m.layers[static_cast<std::size_t>(g.layer_index)];
    const int limit = g.kind == GroupKind::kAttentionHead ? l.heads : l.ff_channels;
    if (g.unit < 0 || g.unit >= limit) {
      throw ShapeError("width plan: group " + std::to_string(g.group_id) + " unit out of range");
    }
    if (!seen.insert({g.layer_index, static_cast<int>(g.kind), g.unit}).second) {
      throw ShapeError("width plan: overlapping slices for group " + std::to_string(g.group_id));
    }
  }
}

}  // namespace

Array& layer_matrix(TransformerLayer& l, const std::string& name) {
  if (name == "wq") return l.wq;
  if (name == "wk") return l.wk;
  if (name == "wv") return l.wv;
  if (name == "wo") return l.wo;
  if (name == "w_up") return l.w_up;
  if (name == "w_gate") return l.w_gate;
  if (name == "w_down") return l.w_down;
  throw ShapeError("unknown layer matrix '" + name + "'");
}

const Array& layer_matrix(const TransformerLayer& l, const std::string& name) {
  return layer_matrix(const_cast<TransformerLayer&>(l), name);
}

std::vector<DependencyGroup> build_groups(const ToyLVLM& m) {
  model::check_structure(m);
  const auto d = static_cast<std::int64_t>(m.config.d);
  const auto dh = static_cast<std::size_t>(m.config.head_dim);
  std::vector<DependencyGroup> out;
  int id = 0;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const TransformerLayer& l = m.layers[li];
    for (int j = 0; j < l.heads; ++j) {
      const std::size_t b = static_cast<std::size_t>(j) * dh, e = b + dh;
      DependencyGroup g{id++, static_cast<int>(li), GroupKind::kAttentionHead, j,
                        {{"wq", 1, b, e}, {"wk", 1, b, e}, {"wv", 1, b, e}, {"wo", 0, b, e}},
                        4 * d * static_cast<std::int64_t>(dh)};
      out.push_back(std::move(g));
    }
    for (int c = 0; c < l.ff_channels; ++c) {
      const auto b = static_cast<std::size_t>(c);
      DependencyGroup g{id++, static_cast<int>(li), GroupKind::kMlpChannel, c,
                        {{"w_up", 1, b, b + 1}, {"w_gate", 1, b, b + 1}, {"w_down", 0, b, b + 1}},
                        3 * d};
      out.push_back(std::move(g));
    }
  }
  return out;
}

namespace {

// Gradients of one sample's response cross-entropy w.r.t. the layer matrices
// of `work`, which must have those matrices marked trainable.
void sample_gradients(ToyLVLM& work, const Triplet& sample) {
  for (TransformerLayer& l : work.layers) {
    for (const char* name : kMatrices) layer_matrix(l, name).zero_grad();
  }
  nd::Tape tape;
  nd::TapeScope scope(tape);
  model::ForwardTrace tr = model::forward(work, sample, {.record_hidden = false});
  if (tr.prediction_rows.empty()) throw ConfigError("taylor_importance: sample without response tokens");
  Array loss = nd::mean(nd::cross_entropy_rowwise(nd::select_rows(tr.logits, tr.prediction_rows),
                                                  tr.prediction_targets));
  tape.backward(loss);
}

ToyLVLM gradient_copy(const ToyLVLM& m) {
  ToyLVLM work = m.clone();
  for (model::NamedParam& np : model::named_parameters(work)) np.param.set_requires_grad(false);
  for (TransformerLayer& l : work.layers) {
    l.lora_q.reset();
    l.lora_v.reset();
    for (const char* name : kMatrices) layer_matrix(l, name).set_requires_grad(true);
  }
  return work;
}

}  // namespace

GroupImportanceReport taylor_importance(const ToyLVLM& m, const std::vector<DependencyGroup>& groups,
                                        const std::vector<Triplet>& calibration, int jobs) {
  if (calibration.empty()) throw ConfigError("taylor_importance: empty calibration set");
  const std::size_t n_workers = static_cast<std::size_t>(std::max(1, jobs));
  std::vector<ToyLVLM> workers;
  for (std::size_t w = 0; w < std::min(n_workers, calibration.size()); ++w) workers.push_back(gradient_copy(m));
  std::vector<std::vector<double>> per_sample(calibration.size());
  parallel_for(calibration.size(), jobs, [&](std::size_t w, std::size_t s) {
    ToyLVLM& work = workers[w];
    sample_gradients(work, calibration[s]);
    auto& imp = per_sample[s];
    imp.assign(groups.size(), 0.0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const DependencyGroup& g = groups[gi];
      const TransformerLayer& l = work.layers.at(static_cast<std::size_t>(g.layer_index));
      double acc = 0.0;
      for (const Slice& sl : g.slices) {
        const Array& a = layer_matrix(l, sl.matrix);
        const auto wd = a.data();
        const auto& gd = a.node()->grad;
        if (gd.empty()) continue;
        for_each_weight(a, sl, [&](std::size_t k) { acc += std::fabs(gd[k] * wd[k]); });
      }
      imp[gi] = acc;
    }
  });
  GroupImportanceReport rep;
  rep.n_samples = static_cast<int>(calibration.size());
  rep.importance.assign(groups.size(), 0.0);
  for (const auto& imp : per_sample) {
    for (std::size_t gi = 0; gi < groups.size(); ++gi) rep.importance[gi] += imp[gi];
  }
  for (double& v : rep.importance) v /= static_cast<double>(calibration.size());
  for (const DependencyGroup& g : groups) rep.params.push_back(g.params);
  return rep;
}

WeightScores taylor_weight_scores(const ToyLVLM& m, const std::vector<Triplet>& calibration) {
  if (calibration.empty()) throw ConfigError("taylor_weight_scores: empty calibration set");
  ToyLVLM work = gradient_copy(m);
  WeightScores out(work.layers.size());
  for (std::size_t li = 0; li < work.layers.size(); ++li) {
    for (const char* name : kMatrices) {
      out[li][name].assign(layer_matrix(work.layers[li], name).size(), 0.0);
    }
  }
  for (const Triplet& s : calibration) {
    sample_gradients(work, s);
    for (std::size_t li = 0; li < work.layers.size(); ++li) {
      for (const char* name : kMatrices) {
        const Array& a = layer_matrix(work.layers[li], name);
        const auto& gd = a.node()->grad;
        if (gd.empty()) continue;
        auto& dst = out[li][name];
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += std::fabs(gd[k] * a.data()[k]);
      }
    }
  }
  for (auto& layer : out) {
    for (auto& [name, v] : layer) {
      for (double& x : v) x /= static_cast<double>(calibration.size());
    }
  }
  return out;
}

PruningPlan plan_width_removal(const GroupImportanceReport& report, const std::vector<DependencyGroup>& groups,
                               const ToyLVLM& m, double target_ratio, Floors floors,
                               bool per_layer_uniform) {
  if (!(target_ratio > 0 && target_ratio < 1)) {
    throw ConfigError("plan_width_removal: target ratio must be in (0, 1)");
  }
  if (report.importance.size() != groups.size()) {
    throw ShapeError("plan_width_removal: importance report does not match the groups");
  }
  if (floors.min_heads < 1 || floors.min_channels < 1) {
    throw ConfigError("plan_width_removal: floors must keep at least one head and channel");
  }
  PruningPlan plan;
  plan.method = PruneMethod::kWidth;
  plan.target_ratio = target_ratio;
  plan.params_before = model::param_count(m, model::ParamScope::kLlmOnly);
  const double goal = target_ratio * static_cast<double>(plan.params_before);

  std::vector<int> heads_left, channels_left;
  for (const TransformerLayer& l : m.layers) {
    heads_left.push_back(l.heads);
    channels_left.push_back(l.ff_channels);
  }
  auto eligible = [&](const DependencyGroup& g) {
    const auto li = static_cast<std::size_t>(g.layer_index);
    return g.kind == GroupKind::kAttentionHead ? heads_left[li] > floors.min_heads
                                               : channels_left[li] > floors.min_channels;
  };
  auto take = [&](std::size_t gi) {
    const DependencyGroup& g = groups[gi];
    const auto li = static_cast<std::size_t>(g.layer_index);
    (g.kind == GroupKind::kAttentionHead ? heads_left[li] : channels_left[li])--;
    plan.groups.push_back(g);
    plan.params_removed += g.params;
  };
  auto before = [&](std::size_t a, std::size_t b) {
    return std::tuple(report.importance[a], groups[a].layer_index, groups[a].group_id) <
           std::tuple(report.importance[b], groups[b].layer_index, groups[b].group_id);
  };
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), before);

  if (!per_layer_uniform) {
    for (std::size_t gi : order) {
      if (static_cast<double>(plan.params_removed) >= goal) break;
      if (eligible(groups[gi])) take(gi);
    }
  } else {
    std::vector<std::vector<std::size_t>> queues(m.layers.size());
    for (std::size_t gi : order) queues.at(static_cast<std::size_t>(groups[gi].layer_index)).push_back(gi);
    std::vector<std::size_t> cursor(queues.size(), 0);
    bool progress = true;
    while (static_cast<double>(plan.params_removed) < goal && progress) {
      progress = false;
      for (std::size_t li = 0; li < queues.size(); ++li) {
        if (static_cast<double>(plan.params_removed) >= goal) break;
        while (cursor[li] < queues[li].size() && !eligible(groups[queues[li][cursor[li]]])) ++cursor[li];
        if (cursor[li] < queues[li].size()) {
          take(queues[li][cursor[li]++]);
          progress = true;
        }
      }
    }
  }
  if (static_cast<double>(plan.params_removed) < goal) {
    throw InfeasiblePlanError("plan_width_removal: ratio " + std::to_string(target_ratio) +
                              " unreachable under the per-layer floors");
  }
  plan.achieved_ratio = ratio_removed(plan.params_before, plan.params_removed);
  return plan;
}

ToyLVLM apply_width_plan(const ToyLVLM& m, const PruningPlan& plan) {
  check_plan_groups(m, plan);
  ToyLVLM out = m.clone();
  const auto dh = static_cast<std::size_t>(m.config.head_dim);
  for (std::size_t li = 0; li < out.layers.size(); ++li) {
    TransformerLayer& l = out.layers[li];
    std::vector<bool> drop_head(static_cast<std::size_t>(l.heads), false);
    std::vector<bool> drop_ch(static_cast<std::size_t>(l.ff_channels), false);
    for (const DependencyGroup& g : plan.groups) {
      if (g.layer_index != static_cast<int>(li)) continue;
      (g.kind == GroupKind::kAttentionHead ? drop_head : drop_ch)[static_cast<std::size_t>(g.unit)] = true;
    }
    std::vector<std::size_t> head_cols, ch;
    for (std::size_t j = 0; j < drop_head.size(); ++j) {
      if (drop_head[j]) continue;
      for (std::size_t k = 0; k < dh; ++k) head_cols.push_back(j * dh + k);
    }
    for (std::size_t c = 0; c < drop_ch.size(); ++c) {
      if (!drop_ch[c]) ch.push_back(c);
    }
    if (head_cols.empty() || ch.empty()) throw InfeasiblePlanError("apply_width_plan: layer emptied");
    if (l.lora_q || l.lora_v) throw ConfigError("apply_width_plan: merge adapters before pruning");
    l.wq = keep(l.wq, 1, head_cols);
    l.wk = keep(l.wk, 1, head_cols);
    l.wv = keep(l.wv, 1, head_cols);
    l.wo = keep(l.wo, 0, head_cols);
    l.w_up = keep(l.w_up, 1, ch);
    l.w_gate = keep(l.w_gate, 1, ch);
    l.w_down = keep(l.w_down, 0, ch);
    l.heads = static_cast<int>(head_cols.size() / dh);
    l.ff_channels = static_cast<int>(ch.size());
  }
  model::check_structure(out);
  return out;
}

ToyLVLM masked_model(const ToyLVLM& m, const PruningPlan& plan) {
  check_plan_groups(m, plan);
  ToyLVLM out = m.clone();
  for (const DependencyGroup& g : plan.groups) {
    TransformerLayer& l = out.layers[static_cast<std::size_t>(g.layer_index)];
    for (const Slice& s : g.slices) {
      Array& a = layer_matrix(l, s.matrix);
      if (s.end > axis_len(a, s.axis)) throw ShapeError("masked_model: slice outside " + s.matrix);
      auto w = a.mutable_data();
      for_each_weight(a, s, [&](std::size_t k) { w[k] = 0.0; });
    }
  }
  return out;
}

model::ForwardTrace masked_forward(const ToyLVLM& m, const PruningPlan& plan, const Triplet& sample) {
  return model::forward(masked_model(m, plan), sample);
}

void dump_groups(const std::vector<DependencyGroup>& groups, const GroupImportanceReport& report,
                 std::ostream& os) {
  char buf[160];
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const DependencyGroup& g = groups[i];
    std::snprintf(buf, sizeof buf, "%d\t%d\t%s\t%lld\t%.17g\n", g.group_id, g.layer_index,
                  group_kind_name(g.kind).c_str(), static_cast<long long>(g.params),
                  i < report.importance.size() ? report.importance[i] : 0.0);
    os << buf;
  }
}

}  // namespace widthprune
}  // namespace prunelab
