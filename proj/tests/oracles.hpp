#pragma once
// Independent reference computations used to check the pruning code.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "prunelab/model.hpp"
#include "prunelab/plan.hpp"
#include "prunelab/widthprune.hpp"
#include "support.hpp"

namespace testing {

// Block influence from the dumped hidden states, accumulated in long double
// with each row normalised before the dot product.
inline std::vector<double> bi_oracle(const prunelab::model::ToyLVLM& m,
                                     const std::vector<prunelab::Triplet>& calib) {
  const std::size_t L = m.layers.size();
  std::vector<long double> acc(L, 0.0L);
  long double rows = 0;
  for (const auto& s : calib) {
    auto tr = prunelab::model::forward(m, s);
    const std::size_t T = tr.hidden_states[0].rows(), d = tr.hidden_states[0].cols();
    for (std::size_t t = 0; t < T; ++t) {
      rows += 1;
      for (std::size_t i = 0; i < L; ++i) {
        long double na = 0, nb = 0;
        for (std::size_t k = 0; k < d; ++k) {
          na += (long double)tr.hidden_states[i].at(t, k) * tr.hidden_states[i].at(t, k);
          nb += (long double)tr.hidden_states[i + 1].at(t, k) * tr.hidden_states[i + 1].at(t, k);
        }
        if (na == 0 || nb == 0) continue;
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        long double c = 0;
        for (std::size_t k = 0; k < d; ++k)
          c += (tr.hidden_states[i].at(t, k) / na) * (tr.hidden_states[i + 1].at(t, k) / nb);
        acc[i] += c;
      }
    }
  }
  std::vector<double> out;
  for (long double a : acc) out.push_back(static_cast<double>(1.0L - a / rows));
  return out;
}

// Per-sample mean response cross-entropy, accumulated in long double.
inline std::vector<double> sample_response_ce(const prunelab::model::ToyLVLM& m,
                                              const std::vector<prunelab::Triplet>& calib) {
  std::vector<double> out;
  for (const auto& s : calib) {
    auto tr = prunelab::model::forward(m, s, {.record_hidden = false});
    long double ce = 0;
    for (std::size_t k = 0; k < tr.prediction_rows.size(); ++k) {
      const std::size_t r = tr.prediction_rows[k];
      double mx = -INFINITY;
      for (std::size_t c = 0; c < tr.logits.cols(); ++c) mx = std::max(mx, tr.logits.at(r, c));
      long double z = 0;
      for (std::size_t c = 0; c < tr.logits.cols(); ++c) z += std::exp((long double)(tr.logits.at(r, c) - mx));
      ce += std::log(z) + mx - tr.logits.at(r, static_cast<std::size_t>(tr.prediction_targets[k]));
    }
    out.push_back(static_cast<double>(ce / static_cast<long double>(tr.prediction_rows.size())));
  }
  return out;
}

// Mean over samples of |L(X) - L(X) with the group zeroed|, for every group.
inline std::vector<double> exact_group_deltas(const prunelab::model::ToyLVLM& m,
                                              const std::vector<prunelab::DependencyGroup>& groups,
                                              const std::vector<prunelab::Triplet>& calib) {
  const auto base = sample_response_ce(m, calib);
  std::vector<double> out;
  for (const auto& g : groups) {
    prunelab::PruningPlan p;
    p.method = prunelab::PruneMethod::kWidth;
    p.groups = {g};
    const auto cut = sample_response_ce(prunelab::widthprune::masked_model(m, p), calib);
    double s = 0;
    for (std::size_t i = 0; i < cut.size(); ++i) s += std::fabs(cut[i] - base[i]);
    out.push_back(s / static_cast<double>(cut.size()));
  }
  return out;
}

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j);
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Width plan driven by random group scores.
inline prunelab::PruningPlan random_width_plan(const prunelab::model::ToyLVLM& m, double ratio,
                                               prunelab::Rng& rng, bool uniform = false) {
  auto groups = prunelab::widthprune::build_groups(m);
  prunelab::widthprune::GroupImportanceReport rep;
  for (const auto& g : groups) {
    rep.importance.push_back(rng.uniform());
    rep.params.push_back(g.params);
  }
  return prunelab::widthprune::plan_width_removal(rep, groups, m, ratio, {}, uniform);
}

inline double max_abs_diff(const prunelab::ndgrad::Array& a, const prunelab::ndgrad::Array& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace testing
