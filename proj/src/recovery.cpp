#include "prunelab/recovery.hpp"

#include <cmath>
#include <numbers>

#include "prunelab/errors.hpp"
#include "prunelab/rng.hpp"

namespace prunelab::recovery {

namespace nd = ndgrad;
using model::ForwardTrace;

void RecoveryConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("recovery: negative loss weight");
  if (!(alpha + beta + gamma > 0)) throw ConfigError("recovery: alpha+beta+gamma must be > 0");
  if (!(tau > 0)) throw ConfigError("recovery: tau must be positive");
  if (beta > 0 && kd_divergence == Divergence::kNone) {
    throw ConfigError("recovery: beta > 0 requires a KD divergence");
  }
  if (gamma > 0 && match_layers == MatchLayers::kNone) {
    throw ConfigError("recovery: gamma > 0 requires a match-layer mode");
  }
  if (!(data_fraction > 0 && data_fraction <= 1)) {
    throw ConfigError("recovery: data fraction must be in (0, 1]");
  }
  if (optimizer.steps < 0 || optimizer.batch < 1 || !(optimizer.lr > 0)) {
    throw ConfigError("recovery: invalid optimizer settings");
  }
  if (lora && lora->rank < 1) throw ConfigError("recovery: lora rank must be >= 1");
}

RecoveryConfig preset(std::string_view name) {
  RecoveryConfig c;
  c.preset = std::string(name);
  c.alpha = c.beta = c.gamma = 0.0;
  if (name == "sft") {
    c.alpha = 1;
  } else if (name == "kl") {
    c.beta = 1;
    c.kd_divergence = Divergence::kForwardKl;
  } else if (name == "rkl") {
    c.beta = 1;
    c.kd_divergence = Divergence::kReverseKl;
  } else if (name == "l2") {
    c.gamma = 1;
  } else if (name == "sft_l2") {
    c.alpha = c.gamma = 1;
  } else if (name == "sft_kl") {
    c.alpha = c.beta = 1;
    c.kd_divergence = Divergence::kForwardKl;
  } else if (name == "sft_l2_kl") {
    c.alpha = c.beta = c.gamma = 1;
    c.kd_divergence = Divergence::kForwardKl;
  } else {
    throw ConfigError("unknown recovery preset '" + std::string(name) + "'");
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"sft", "kl", "rkl", "l2", "sft_l2", "sft_kl", "sft_l2_kl"};
}

RecoveryConfig with_scope(RecoveryConfig cfg, Scope scope) {
  cfg.scope = scope;
  if (scope == Scope::kProjectorOnly) {
    cfg.lora.reset();
    cfg.optimizer.lr = 1e-3;
  } else {
    cfg.lora = LoraConfig{};
    cfg.optimizer.lr = 3e-4;
  }
  return cfg;
}

std::string match_layers_name(MatchLayers m) {
  switch (m) {
    case MatchLayers::kFinalOnly: return "final_only";
    case MatchLayers::kRetainedByOriginalIndex: return "retained_by_original_index";
    case MatchLayers::kNone: return "none";
    case MatchLayers::kAuto: return "auto";
  }
  return "auto";
}

std::vector<MatchPair> match_map(const ToyLVLM& student, const ToyLVLM& teacher, MatchLayers mode) {
  if (mode == MatchLayers::kAuto) {
    mode = student.layers.size() < teacher.layers.size() ? MatchLayers::kRetainedByOriginalIndex
                                                         : MatchLayers::kFinalOnly;
  }
  std::vector<MatchPair> out;
  switch (mode) {
    case MatchLayers::kNone:
    case MatchLayers::kAuto: break;
    case MatchLayers::kFinalOnly:
      out.push_back({static_cast<int>(student.layers.size()), static_cast<int>(teacher.layers.size())});
      break;
    case MatchLayers::kRetainedByOriginalIndex:
      for (std::size_t i = 0; i < student.layers.size(); ++i) {
        const int orig = student.layers[i].original_index;
        if (orig < 0 || orig >= static_cast<int>(teacher.layers.size())) {
          throw ShapeError("match map: student layer " + std::to_string(i) + " has original index " +
                           std::to_string(orig) + " outside the teacher");
        }
        out.push_back({static_cast<int>(i) + 1, orig + 1});
      }
      break;
  }
  return out;
}

std::string match_scale_name(MatchScale s) { return s == MatchScale::kRaw ? "raw" : "teacher_scale"; }

MatchScale parse_match_scale(const std::string& s) {
  if (s == "raw") return MatchScale::kRaw;
  if (s == "teacher_scale") return MatchScale::kTeacherScale;
  throw ConfigError("unknown match scale '" + s + "'");
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: support sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

namespace {

std::vector<std::size_t> kd_rows(const ForwardTrace& tr, bool all_positions) {
  if (!all_positions) return tr.prediction_rows;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < tr.token_roles.size(); ++i) {
    if (tr.token_roles[i] != model::TokenRole::kVisual) rows.push_back(i);
  }
  return rows;
}

std::vector<std::size_t> response_rows(const ForwardTrace& tr) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < tr.token_roles.size(); ++i) {
    if (tr.token_roles[i] == model::TokenRole::kResponse) rows.push_back(i);
  }
  return rows;
}

// Per-row sum over the vocabulary of p * (log p - log q), with p, q given as
// log-probabilities; either side may be a constant.
Array kl_rows(const Array& log_p, const Array& log_q) {
  return nd::sum(nd::mul(nd::softmax_lastdim(log_p), nd::sub(log_p, log_q)));
}

class Accumulator {
 public:
  Accumulator(const ToyLVLM& student, const ToyLVLM* teacher, const RecoveryConfig& cfg,
              bool want_sft, bool want_kd, bool want_match)
      : student_(student), teacher_(teacher), cfg_(cfg),
        want_sft_(want_sft), want_kd_(want_kd), want_match_(want_match) {
    if ((want_kd || want_match) && !teacher) {
      throw ConfigError("recovery: distillation terms need a teacher");
    }
    if (want_kd && teacher->config.vocab_size != student.config.vocab_size) {
      throw ShapeError("logits_kd_loss: teacher vocabulary " +
                       std::to_string(teacher->config.vocab_size) + " != student vocabulary " +
                       std::to_string(student.config.vocab_size));
    }
    if (want_match) pairs_ = match_map(student, *teacher, cfg.match_layers);
  }

  void add(const Triplet& sample) {
    ForwardTrace s = model::forward(student_, sample, {.record_hidden = want_match_});
    ForwardTrace t;
    if (want_kd_ || want_match_) {
      nd::NoGradScope frozen;
      t = model::forward(*teacher_, sample, {.record_hidden = want_match_});
    }
    if (want_sft_) {
      if (!s.prediction_rows.empty()) {
        ce_.push_back(nd::cross_entropy_rowwise(nd::select_rows(s.logits, s.prediction_rows),
                                                s.prediction_targets));
      }
    }
    if (want_kd_) {
      const auto rows = kd_rows(s, cfg_.kd_all_positions);
      if (!rows.empty()) {
        const double inv = 1.0 / cfg_.tau;
        Array ls = nd::log_softmax_lastdim(nd::scale(nd::select_rows(s.logits, rows), inv));
        Array lt = nd::log_softmax_lastdim(nd::scale(nd::select_rows(t.logits, rows), inv)).detach();
        kl_.push_back(cfg_.kd_divergence == Divergence::kReverseKl ? kl_rows(ls, lt) : kl_rows(lt, ls));
        kl_count_ += rows.size();
      }
    }
    if (want_match_) {
      const auto rows = response_rows(s);
      if (match_.empty()) {
        match_.resize(pairs_.size());
        match_count_.assign(pairs_.size(), 0);
        teacher_sq_.assign(pairs_.size(), 0.0);
      }
      for (std::size_t k = 0; k < pairs_.size(); ++k) {
        const Array& hs = s.hidden_states.at(static_cast<std::size_t>(pairs_[k].student));
        const Array& ht = t.hidden_states.at(static_cast<std::size_t>(pairs_[k].teacher));
        if (hs.shape() != ht.shape()) {
          throw ShapeError("hidden_match_loss: student hidden " + nd::shape_str(hs.shape()) +
                           " vs teacher hidden " + nd::shape_str(ht.shape()));
        }
        if (rows.empty()) continue;
        Array target = nd::select_rows(ht, rows).detach();
        Array diff = nd::sub(nd::select_rows(hs, rows), target);
        match_[k].push_back(nd::sum(nd::mul(diff, diff)));
        match_count_[k] += diff.size();
        for (double v : target.data()) teacher_sq_[k] += v * v;
      }
    }
  }

  Array sft() const {
    if (ce_.empty()) throw ConfigError("sft_loss: batch has no response tokens");
    return nd::mean(ce_.size() == 1 ? ce_[0] : concat_rank1(ce_));
  }

  Array kd() const {
    if (kl_.empty()) throw ConfigError("logits_kd_loss: batch has no distillation positions");
    return nd::scale(sum_all(kl_), cfg_.tau * cfg_.tau / static_cast<double>(kl_count_));
  }

  Array match() const {
    if (pairs_.empty()) return Array::scalar(0.0);
    std::vector<Array> per_layer;
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      if (match_.empty() || match_[k].empty()) {
        throw ConfigError("hidden_match_loss: batch has no response tokens");
      }
      const double denom = cfg_.match_scale == MatchScale::kTeacherScale && teacher_sq_[k] > 0
                               ? teacher_sq_[k]
                               : static_cast<double>(match_count_[k]);
      per_layer.push_back(nd::scale(sum_all(match_[k]), 1.0 / denom));
    }
    return nd::scale(sum_all(per_layer), 1.0 / static_cast<double>(per_layer.size()));
  }

 private:
  static Array sum_all(const std::vector<Array>& xs) {
    Array acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = nd::add(acc, xs[i]);
    return acc;
  }

  static Array concat_rank1(const std::vector<Array>& xs) {
    std::vector<Array> rows;
    rows.reserve(xs.size());
    for (const Array& x : xs) rows.push_back(nd::reshape(x, {x.size(), 1}));
    return nd::concat_rows(rows);
  }

  const ToyLVLM& student_;
  const ToyLVLM* teacher_;
  const RecoveryConfig& cfg_;
  bool want_sft_, want_kd_, want_match_;
  std::vector<MatchPair> pairs_;
  std::vector<Array> ce_;
  std::vector<Array> kl_;
  std::size_t kl_count_ = 0;
  std::vector<std::vector<Array>> match_;
  std::vector<std::size_t> match_count_;
  std::vector<double> teacher_sq_;
};

void require_batch(std::span<const Triplet> batch, const char* op) {
  if (batch.empty()) throw ConfigError(std::string(op) + ": empty batch");
}

}  // namespace

Array sft_loss(const ToyLVLM& student, std::span<const Triplet> batch) {
  require_batch(batch, "sft_loss");
  RecoveryConfig cfg;
  Accumulator acc(student, nullptr, cfg, true, false, false);
  for (const Triplet& t : batch) acc.add(t);
  return acc.sft();
}

Array logits_kd_loss(const ToyLVLM& student, const ToyLVLM& teacher, std::span<const Triplet> batch,
                     Divergence divergence, double tau, bool all_positions) {
  require_batch(batch, "logits_kd_loss");
  if (divergence == Divergence::kNone) return Array::scalar(0.0);
  if (!(tau > 0)) throw ConfigError("logits_kd_loss: tau must be positive");
  RecoveryConfig cfg;
  cfg.kd_divergence = divergence;
  cfg.tau = tau;
  cfg.kd_all_positions = all_positions;
  Accumulator acc(student, &teacher, cfg, false, true, false);
  for (const Triplet& t : batch) acc.add(t);
  return acc.kd();
}

Array hidden_match_loss(const ToyLVLM& student, const ToyLVLM& teacher, std::span<const Triplet> batch,
                        MatchLayers mode, MatchScale scale) {
  require_batch(batch, "hidden_match_loss");
  if (mode == MatchLayers::kNone) return Array::scalar(0.0);
  RecoveryConfig cfg;
  cfg.match_layers = mode;
  cfg.match_scale = scale;
  Accumulator acc(student, &teacher, cfg, false, false, true);
  for (const Triplet& t : batch) acc.add(t);
  return acc.match();
}

CombinedLoss combined_loss(const ToyLVLM& student, const ToyLVLM* teacher,
                           std::span<const Triplet> batch, const RecoveryConfig& cfg) {
  cfg.validate();
  require_batch(batch, "combined_loss");
  const bool want_sft = cfg.alpha > 0;
  const bool want_kd = cfg.beta > 0 && cfg.kd_divergence != Divergence::kNone;
  const bool want_match = cfg.gamma > 0 && cfg.match_layers != MatchLayers::kNone;
  Accumulator acc(student, teacher, cfg, want_sft, want_kd, want_match);
  for (const Triplet& t : batch) acc.add(t);

  CombinedLoss out;
  std::vector<Array> terms;
  if (want_sft) {
    Array l = acc.sft();
    out.breakdown.l_sft = l.item();
    terms.push_back(cfg.alpha == 1.0 ? l : nd::scale(l, cfg.alpha));
  }
  if (want_kd) {
    Array l = acc.kd();
    out.breakdown.l_logits = l.item();
    terms.push_back(cfg.beta == 1.0 ? l : nd::scale(l, cfg.beta));
  }
  if (want_match) {
    Array l = acc.match();
    out.breakdown.l_match = l.item();
    terms.push_back(cfg.gamma == 1.0 ? l : nd::scale(l, cfg.gamma));
  }
  Array total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = nd::add(total, terms[i]);
  out.total = total;
  out.breakdown.total = total.item();
  return out;
}

ParamPartition set_trainable_scope(ToyLVLM& student, Scope scope, const std::optional<LoraConfig>& lora,
                                   std::uint64_t seed) {
  ParamPartition part;
  auto assign = [&part](const std::vector<Array>& ps, bool trainable) {
    for (Array p : ps) {
      p.set_requires_grad(trainable);
      (trainable ? part.trainable : part.frozen).push_back(p);
    }
  };
  for (model::TransformerLayer& l : student.layers) {
    l.lora_q.reset();
    l.lora_v.reset();
  }
  assign(model::vision_parameters(student), false);
  assign(model::projector_parameters(student), true);
  if (scope == Scope::kProjectorOnly) {
    assign(model::llm_parameters(student), false);
    return part;
  }
  if (!lora) {
    assign(model::llm_parameters(student), true);
    return part;
  }
  assign(model::llm_parameters(student), false);
  Rng rng(mix_seed(seed, 0x10a4));
  auto make = [&](const Array& w) {
    const std::size_t in = w.rows(), out = w.cols(), r = static_cast<std::size_t>(lora->rank);
    if (r >= std::min(in, out)) {
      throw ConfigError("lora rank " + std::to_string(r) + " must be below min(" + std::to_string(in) +
                        ", " + std::to_string(out) + ")");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> a(in * r);
    for (double& x : a) x = rng.uniform(-bound, bound);
    model::LoraAdapter ad{Array({in, r}, std::move(a), true), Array::zeros({r, out}, true), lora->scaling};
    part.trainable.push_back(ad.a);
    part.trainable.push_back(ad.b);
    return ad;
  };
  for (model::TransformerLayer& l : student.layers) {
    if (lora->target_q) l.lora_q = make(l.wq);
    if (lora->target_v) l.lora_v = make(l.wv);
  }
  return part;
}

Adam::Adam(std::vector<Array> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Array& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

double Adam::step(double lr, double clip) {
  double sq = 0.0;
  for (const Array& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = (clip > 0 && norm > clip) ? clip / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Array p = params_[i];
    if (!p.has_grad()) continue;
    const auto& g = p.node()->grad;
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * factor;
      m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * gj;
      v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * gj * gj;
      w[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
    p.zero_grad();
  }
  return norm;
}

double cosine_lr(const OptimizerConfig& opt, int step, int total_steps) {
  if (total_steps <= 1) return opt.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  const double floor = opt.final_lr_fraction;
  return opt.lr * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
  if (n == 0) throw ConfigError("batch sampler: empty dataset");
  refill();
}

void BatchSampler::refill() {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  Rng rng(mix_seed(seed_, epoch_++));
  rng.shuffle(order_);
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (pos_ == order_.size()) refill();
    out.push_back(order_[pos_++]);
  }
  return out;
}

TrainResult train(const ToyLVLM& student, const ToyLVLM* teacher, const std::vector<Triplet>& data,
                  const RecoveryConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  const auto& opt = cfg.optimizer;
  TrainResult res{student.clone(), {}, {}};
  if ((cfg.beta > 0 || cfg.gamma > 0) && !teacher) {
    throw ConfigError("recovery: distillation terms need a teacher");
  }
  if (cfg.gamma > 0) res.match_pairs = match_map(res.student, *teacher, cfg.match_layers);
  if (opt.steps == 0) return res;

  std::vector<Triplet> subset = data::fraction_subset(data, cfg.data_fraction, mix_seed(opt.seed, 0xf7ac));
  if (subset.empty()) throw ConfigError("recovery: no training data after fraction subsetting");

  ParamPartition part = set_trainable_scope(res.student, cfg.scope, cfg.lora, opt.seed);
  Adam adam(part.trainable);
  BatchSampler sampler(subset.size(), mix_seed(opt.seed, 0xba7c));
  std::vector<Triplet> batch;
  for (int step = 0; step < opt.steps; ++step) {
    batch.clear();
    for (std::size_t i : sampler.next(static_cast<std::size_t>(opt.batch))) batch.push_back(subset[i]);
    nd::Tape tape;
    LossBreakdown bd;
    {
      nd::TapeScope scope(tape);
      CombinedLoss loss = combined_loss(res.student, teacher, batch, cfg);
      bd = loss.breakdown;
      bd.step = step;
      if (!std::isfinite(bd.total)) {
        throw DivergenceError("recovery: non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss.total);
    }
    adam.step(cosine_lr(opt, step, opt.steps), opt.grad_clip);
    res.curve.push_back(bd);
    if (on_step && !on_step(bd, res.student)) break;
  }
  model::merge_adapters(res.student);
  return res;
}

double eval_sft_loss(const ToyLVLM& m, const std::vector<Triplet>& data) {
  nd::NoGradScope frozen;
  double total = 0.0;
  std::size_t rows = 0;
  for (const Triplet& t : data) {
    ForwardTrace tr = model::forward(m, t, {.record_hidden = false});
    if (tr.prediction_rows.empty()) continue;
    Array ce = nd::cross_entropy_rowwise(nd::select_rows(tr.logits, tr.prediction_rows),
                                         tr.prediction_targets);
    for (double v : ce.data()) total += v;
    rows += ce.size();
  }
  if (rows == 0) throw ConfigError("eval_sft_loss: no response tokens");
  return total / static_cast<double>(rows);
}

}  // namespace prunelab::recovery
