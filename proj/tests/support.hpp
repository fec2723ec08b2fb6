#pragma once
// Shared helpers for the unit tests: random arrays, finite differences and
// small model/data fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "prunelab/data.hpp"
#include "prunelab/model.hpp"
#include "prunelab/ndgrad.hpp"
#include "prunelab/rng.hpp"

namespace testing {

using prunelab::ndgrad::Array;

inline Array random_array(prunelab::Rng& rng, prunelab::ndgrad::Shape shape, double lo = -1.0,
                          double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(prunelab::ndgrad::shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Array(std::move(shape), std::move(v), requires_grad);
}

struct GradCheck {
  double max_rel = 0.0;
  int coords = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor) between analytic and central
// difference derivatives at `per_input` random coordinates of each input.
inline GradCheck gradcheck(const std::function<Array(const std::vector<Array>&)>& f,
                           std::vector<Array> inputs, prunelab::Rng& rng, int per_input = 10,
                           double h = 1e-5, double floor = 1e-6) {
  namespace nd = prunelab::ndgrad;
  for (Array& in : inputs) in.zero_grad();
  {
    nd::Tape tape;
    nd::TapeScope scope(tape);
    tape.backward(f(inputs));
  }
  GradCheck res;
  for (Array& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic = in.grad();
    for (int k = 0; k < per_input; ++k) {
      const std::size_t i = rng.below(in.size());
      auto data = in.mutable_data();
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f(inputs).item();
      data[i] = saved - h;
      const double fm = f(inputs).item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
      res.max_rel = std::max(res.max_rel, std::fabs(analytic[i] - numeric) / denom);
      ++res.coords;
    }
  }
  return res;
}

// Reduces an array to a scalar through fixed random weights so that every
// output coordinate reaches the gradient.
inline Array weighted_sum(const Array& out, std::uint64_t seed = 99) {
  namespace nd = prunelab::ndgrad;
  prunelab::Rng rng(seed);
  Array w = random_array(rng, out.shape(), -1.0, 1.0, false);
  return nd::sum(nd::mul(out, w));
}

inline prunelab::model::ModelConfig small_config(std::uint64_t seed = 1) {
  prunelab::model::ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.layers = 3;
  c.d_ff = 12;
  c.visual_tokens = 2;
  c.d_enc = 8;
  c.max_seq = 48;
  c.seed = seed;
  return c;
}

// Layer weights dominate the embeddings enough for width ratios up to ~0.45.
inline prunelab::model::ModelConfig wide_config(std::uint64_t seed = 1) {
  auto c = small_config(seed);
  c.layers = 4;
  c.d_ff = 48;
  return c;
}

inline prunelab::model::ModelConfig tiny_config(std::uint64_t seed = 1) {
  prunelab::model::ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.layers = 1;
  c.d_ff = 8;
  c.visual_tokens = 2;
  c.d_enc = 8;
  c.max_seq = 48;
  c.seed = seed;
  return c;
}

inline std::vector<prunelab::Triplet> sample_data(int n, std::uint64_t seed = 3) {
  prunelab::data::DatasetSpec s;
  s.seed = seed;
  s.size = n;
  return prunelab::data::generate(s);
}

// Model with every projector and LM weight perturbed so no structure is
// degenerate (biases and gains move away from 0 and 1).
inline prunelab::model::ToyLVLM random_model(const prunelab::model::ModelConfig& cfg) {
  auto m = prunelab::model::init_model(cfg);
  prunelab::Rng rng(prunelab::mix_seed(cfg.seed, 77));
  for (auto& np : prunelab::model::named_parameters(m)) {
    if (np.name.find("bias") != std::string::npos || np.name.find("gain") != std::string::npos ||
        np.name.find(".b") != std::string::npos) {
      for (double& x : np.param.mutable_data()) x += rng.uniform(-0.2, 0.2);
    }
  }
  return m;
}

// Model whose logits are `row` at every position: the final norm outputs
// e_0 and lm_head row 0 carries the logits. Entries past row.size() get
// -1000, which underflows to probability 0.
inline prunelab::model::ToyLVLM constant_logits_model(const std::vector<double>& row,
                                                      std::uint64_t seed = 1) {
  auto m = prunelab::model::init_model(small_config(seed));
  for (double& x : m.final_norm.gain.mutable_data()) x = 0.0;
  auto b = m.final_norm.bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
  b[0] = 1.0;
  auto w = m.lm_head.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t v = 0; v < m.lm_head.cols(); ++v) w[v] = v < row.size() ? row[v] : -1000.0;
  return m;
}

}  // namespace testing
