#include "prunelab/layerprune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "prunelab/errors.hpp"
#include "prunelab/parallel.hpp"

namespace prunelab::layerprune {

namespace nd = ndgrad;

double row_cosine(const double* a, const double* b, std::size_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

namespace {

bool counts(model::TokenRole role, BiTokens tokens) {
  switch (tokens) {
    case BiTokens::kAll: return true;
    case BiTokens::kText: return role != model::TokenRole::kVisual;
    case BiTokens::kResponse: return role == model::TokenRole::kResponse;
  }
  return true;
}

struct Partial {
  std::vector<double> cos_sum;
  std::int64_t rows = 0;
};

}  // namespace

BlockInfluenceReport block_influence(const ToyLVLM& m, const std::vector<Triplet>& calibration,
                                     BiTokens tokens, int jobs) {
  if (calibration.empty()) throw ConfigError("block_influence: empty calibration set");
  if (m.layers.empty()) throw ConfigError("block_influence: model has no layers");
  const std::size_t n_layers = m.layers.size();
  std::vector<Partial> partial(calibration.size());
  parallel_for(calibration.size(), jobs, [&](std::size_t, std::size_t s) {
    nd::NoGradScope frozen;
    model::ForwardTrace tr = model::forward(m, calibration[s]);
    Partial& p = partial[s];
    p.cos_sum.assign(n_layers, 0.0);
    const std::size_t d = tr.hidden_states[0].cols();
    for (std::size_t t = 0; t < tr.token_roles.size(); ++t) {
      if (!counts(tr.token_roles[t], tokens)) continue;
      ++p.rows;
      for (std::size_t i = 0; i < n_layers; ++i) {
        p.cos_sum[i] += row_cosine(tr.hidden_states[i].data().data() + t * d,
                                   tr.hidden_states[i + 1].data().data() + t * d, d);
      }
    }
  });
  BlockInfluenceReport rep;
  rep.n_samples = static_cast<int>(calibration.size());
  std::vector<double> total(n_layers, 0.0);
  for (const Partial& p : partial) {
    rep.token_count += p.rows;
    for (std::size_t i = 0; i < n_layers; ++i) total[i] += p.cos_sum[i];
  }
  if (rep.token_count == 0) throw ConfigError("block_influence: no token positions selected");
  for (double s : total) rep.scores.push_back(1.0 - s / static_cast<double>(rep.token_count));
  return rep;
}

PruningPlan plan_layer_removal(const BlockInfluenceReport& report, const ToyLVLM& m, double target_ratio) {
  if (!(target_ratio > 0 && target_ratio < 1)) {
    throw ConfigError("plan_layer_removal: target ratio must be in (0, 1)");
  }
  if (report.scores.size() != m.layers.size()) {
    throw ShapeError("plan_layer_removal: report has " + std::to_string(report.scores.size()) +
                     " scores for " + std::to_string(m.layers.size()) + " layers");
  }
  std::vector<int> order(m.layers.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return report.scores[a] < report.scores[b]; });
  PruningPlan plan;
  plan.method = PruneMethod::kLayer;
  plan.target_ratio = target_ratio;
  plan.params_before = model::param_count(m, model::ParamScope::kLlmOnly);
  const double goal = target_ratio * static_cast<double>(plan.params_before);
  for (int idx : order) {
    if (static_cast<double>(plan.params_removed) >= goal) break;
    if (plan.layers.size() + 1 >= m.layers.size()) {
      throw InfeasiblePlanError("plan_layer_removal: ratio " + std::to_string(target_ratio) +
                                " needs removing every layer");
    }
    plan.layers.push_back(idx);
    plan.params_removed += model::layer_param_count(m.layers[static_cast<std::size_t>(idx)]);
  }
  std::sort(plan.layers.begin(), plan.layers.end());
  plan.achieved_ratio = ratio_removed(plan.params_before, plan.params_removed);
  return plan;
}

ToyLVLM apply_layer_plan(const ToyLVLM& m, const PruningPlan& plan) {
  std::vector<bool> drop(m.layers.size(), false);
  for (int i : plan.layers) {
    if (i < 0 || i >= static_cast<int>(m.layers.size())) {
      throw ShapeError("apply_layer_plan: layer index " + std::to_string(i) + " out of range for " +
                       std::to_string(m.layers.size()) + " layers");
    }
    drop[static_cast<std::size_t>(i)] = true;
  }
  ToyLVLM out = m.clone();
  std::vector<model::TransformerLayer> kept;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    if (!drop[i]) kept.push_back(std::move(out.layers[i]));
  }
  if (kept.empty()) throw InfeasiblePlanError("apply_layer_plan: plan removes every layer");
  out.layers = std::move(kept);
  out.config.layers = static_cast<int>(out.layers.size());
  return out;
}

void dump_report(const BlockInfluenceReport& report, std::ostream& os) {
  char buf[64];
  for (std::size_t i = 0; i < report.scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", i, report.scores[i]);
    os << buf;
  }
}

BiTokens parse_bi_tokens(const std::string& s) {
  if (s == "all") return BiTokens::kAll;
  if (s == "text") return BiTokens::kText;
  if (s == "response") return BiTokens::kResponse;
  throw ConfigError("unknown BI token selection '" + s + "'");
}

std::string bi_tokens_name(BiTokens t) {
  switch (t) {
    case BiTokens::kAll: return "all";
    case BiTokens::kText: return "text";
    case BiTokens::kResponse: return "response";
  }
  return "all";
}

}  // namespace prunelab::layerprune
