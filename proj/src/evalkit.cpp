#include "prunelab/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "prunelab/errors.hpp"
#include "prunelab/parallel.hpp"

namespace prunelab::evalkit {

namespace nd = ndgrad;
namespace tok = data::tok;

std::vector<double> ModelPredictor::next_logits(const Triplet& item, std::span<const int> tokens) {
  nd::NoGradScope frozen;
  const bool visual = item.task_tag != TaskTag::kTextOnly;
  model::ForwardTrace tr = model::forward_tokens(m_, visual ? &item.image_features : nullptr, tokens,
                                                 tokens.size(), {.record_hidden = false});
  const std::size_t last = tr.logits.rows() - 1;
  const auto row = tr.logits.data().subspan(last * tr.logits.cols(), tr.logits.cols());
  return {row.begin(), row.end()};
}

namespace {

int argmax_among(const std::vector<double>& logits, const std::vector<int>& candidates) {
  int best = candidates.front();
  for (int c : candidates) {
    if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(best)]) best = c;
  }
  return best;
}

std::vector<int> option_letters(const Triplet& item) {
  std::vector<int> out;
  for (int t : item.prompt_tokens) {
    if (t >= tok::kOptionA && t < tok::kOptionA + tok::kMaxOptions &&
        std::find(out.begin(), out.end(), t) == out.end()) {
      out.push_back(t);
    }
  }
  return out;
}

}  // namespace

double token_f1(std::span<const int> predicted, std::span<const int> reference) {
  std::map<int, int> pred, ref;
  for (int t : predicted) {
    if (t != tok::kEos) ++pred[t];
  }
  for (int t : reference) {
    if (t != tok::kEos) ++ref[t];
  }
  int np = 0, nr = 0, overlap = 0;
  for (auto [t, c] : pred) np += c;
  for (auto [t, c] : ref) {
    nr += c;
    auto it = pred.find(t);
    if (it != pred.end()) overlap += std::min(c, it->second);
  }
  if (np == 0 && nr == 0) return 1.0;
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / np, r = static_cast<double>(overlap) / nr;
  return 2 * p * r / (p + r);
}

std::vector<int> greedy_decode(Predictor& p, const Triplet& item, int max_tokens, int max_seq) {
  std::vector<int> seq = item.prompt_tokens;
  std::vector<int> out;
  for (int i = 0; i < max_tokens && static_cast<int>(seq.size()) < max_seq; ++i) {
    std::vector<double> logits = p.next_logits(item, seq);
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(next);
    if (next == tok::kEos) break;
    seq.push_back(next);
  }
  return out;
}

double score_item(Predictor& p, const Triplet& item) {
  switch (item.format) {
    case AnswerFormat::kMcq: {
      const std::vector<int> cands = option_letters(item);
      if (cands.empty()) throw ShapeError("score_item: mcq prompt without options");
      return argmax_among(p.next_logits(item, item.prompt_tokens), cands) == item.response_tokens.at(0);
    }
    case AnswerFormat::kYesNo:
      return argmax_among(p.next_logits(item, item.prompt_tokens), {tok::kYes, tok::kNo}) ==
             item.response_tokens.at(0);
    case AnswerFormat::kFreeform:
      return token_f1(greedy_decode(p, item), item.response_tokens);
  }
  return 0.0;
}

double score_benchmark(Predictor& p, const data::Suite& suite) {
  if (suite.items.empty()) throw ConfigError("score_benchmark: empty suite " + suite.name);
  double s = 0.0;
  for (const Triplet& t : suite.items) s += score_item(p, t);
  return s / static_cast<double>(suite.items.size());
}

double score_benchmark(const ToyLVLM& m, const data::Suite& suite, int jobs) {
  if (suite.items.empty()) throw ConfigError("score_benchmark: empty suite " + suite.name);
  const int visual = m.config.visual_tokens;
  std::vector<double> per(suite.items.size(), 0.0);
  parallel_for(suite.items.size(), jobs, [&](std::size_t, std::size_t i) {
    ModelPredictor p(m);
    const Triplet& t = suite.items[i];
    if (t.format == AnswerFormat::kFreeform) {
      const int budget = m.config.max_seq - (t.task_tag == TaskTag::kTextOnly ? 0 : visual);
      per[i] = token_f1(greedy_decode(p, t, kMaxDecodeTokens, budget), t.response_tokens);
    } else {
      per[i] = score_item(p, t);
    }
  });
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

Scores score_suites(const ToyLVLM& m, const std::vector<data::Suite>& suites, int jobs) {
  Scores out;
  for (const data::Suite& s : suites) out[s.name] = score_benchmark(m, s, jobs);
  return out;
}

namespace {

double mean_over(const Scores& scores, const std::vector<data::Suite>& suites, bool text_only) {
  double s = 0.0;
  int n = 0;
  for (const data::Suite& suite : suites) {
    if (suite.text_only != text_only) continue;
    auto it = scores.find(suite.name);
    if (it == scores.end()) throw MissingArtifactError("missing score for benchmark " + suite.name);
    s += it->second;
    ++n;
  }
  if (n == 0) throw ConfigError(std::string("modality_split: no ") + (text_only ? "text-only" : "multimodal") +
                                " suites");
  return s / n;
}

double degradation(double avg, double ref) { return ref > 0 ? 1.0 - avg / ref : 0.0; }

}  // namespace

ModalitySplit modality_split(const Scores& scores, const std::vector<data::Suite>& suites,
                             const Scores& reference) {
  ModalitySplit m;
  m.avg_mm = mean_over(scores, suites, false);
  m.avg_txt = mean_over(scores, suites, true);
  m.deg_mm = degradation(m.avg_mm, mean_over(reference, suites, false));
  m.deg_txt = degradation(m.avg_txt, mean_over(reference, suites, true));
  return m;
}

EvalReport relative_report(const Scores& scores, const Scores& reference,
                           const std::vector<data::Suite>& suites, double ratio) {
  EvalReport r;
  r.scores = scores;
  r.ratio = ratio;
  if (scores.empty()) throw ConfigError("relative_report: no scores");
  for (const auto& [name, v] : scores) {
    auto it = reference.find(name);
    if (it == reference.end()) throw MissingArtifactError("no reference score for benchmark " + name);
    const double rel = it->second > 0 ? v / it->second : (v == 0 ? 1.0 : 0.0);
    r.relative[name] = rel;
    r.avg += v;
    r.avg_rel += rel;
  }
  r.avg /= static_cast<double>(scores.size());
  r.avg_rel /= static_cast<double>(scores.size());
  bool has_mm = false, has_txt = false;
  for (const data::Suite& s : suites) (s.text_only ? has_txt : has_mm) = true;
  if (has_mm && has_txt) r.modality = modality_split(scores, suites, reference);
  return r;
}

EvalReport relative_report(const ToyLVLM& m, const Scores& reference, const std::vector<data::Suite>& suites,
                           double ratio, int jobs) {
  return relative_report(score_suites(m, suites, jobs), reference, suites, ratio);
}

double flops_per_token(const ToyLVLM& m, int seq_len) {
  const double d = m.config.d, dh = m.config.head_dim, t = seq_len;
  double f = 0.0;
  for (const model::TransformerLayer& l : m.layers) {
    if (l.override_mode != model::LayerOverride::kNone) continue;
    f += 2 * (4 * d * l.heads * dh + 2 * t * l.heads * dh + 3 * d * l.ff_channels);
  }
  return f + 2 * d * m.config.vocab_size;
}

std::vector<int> workload_tokens(const ToyLVLM& m, int seq_len) {
  if (seq_len < 1 || seq_len > m.config.max_seq) {
    throw ConfigError("workload: sequence length must be in [1, max_seq]");
  }
  std::vector<int> t(static_cast<std::size_t>(seq_len));
  const int span = m.config.vocab_size - tok::kReserved;
  for (int i = 0; i < seq_len; ++i) t[static_cast<std::size_t>(i)] = tok::kReserved + (i * 7) % span;
  t[0] = tok::kBos;
  return t;
}

std::uint64_t traced_macs(const ToyLVLM& m, int seq_len) {
  const std::vector<int> tokens = workload_tokens(m, seq_len);
  nd::NoGradScope frozen;
  nd::MacCounter counter;
  model::forward_tokens(m, nullptr, tokens, tokens.size(), {.record_hidden = false});
  return counter.count();
}

EfficiencyReport efficiency(const ToyLVLM& m, const Workload& w, bool measure_latency) {
  EfficiencyReport r;
  r.param_total = model::param_count(m, model::ParamScope::kAll);
  r.param_llm = model::param_count(m, model::ParamScope::kLlmOnly);
  r.flops_per_token = flops_per_token(m, w.seq_len);
  r.seq_len = w.seq_len;
  if (!measure_latency) return r;
  const std::vector<int> tokens = workload_tokens(m, w.seq_len);
  nd::NoGradScope frozen;
  auto run = [&] { model::forward_tokens(m, nullptr, tokens, tokens.size(), {.record_hidden = false}); };
  for (int i = 0; i < w.warmup; ++i) run();
  std::vector<double> ms;
  for (int i = 0; i < w.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  r.repetitions = w.repetitions;
  if (ms.empty()) return r;
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  r.latency_ms_mean = mean;
  r.latency_ms_std = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  return r;
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["scores"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.scores) j["scores"][k] = v;
  j["relative"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.relative) j["relative"][k] = v;
  j["avg"] = r.avg;
  j["avg_rel"] = r.avg_rel;
  j["ratio"] = r.ratio;
  j["modality_split"] = {{"avg_mm", r.modality.avg_mm},
                         {"avg_txt", r.modality.avg_txt},
                         {"deg_mm", r.modality.deg_mm},
                         {"deg_txt", r.modality.deg_txt}};
  return j;
}

nlohmann::ordered_json to_json(const EfficiencyReport& r) {
  return {{"param_total", r.param_total},   {"param_llm", r.param_llm},
          {"flops_per_token", r.flops_per_token}, {"seq_len", r.seq_len},
          {"latency_ms_mean", r.latency_ms_mean}, {"latency_ms_std", r.latency_ms_std},
          {"repetitions", r.repetitions}};
}

Scores scores_from_json(const nlohmann::json& j) {
  Scores s;
  const auto& src = j.contains("scores") ? j.at("scores") : j;
  for (auto it = src.begin(); it != src.end(); ++it) s[it.key()] = it.value().get<double>();
  return s;
}

std::string render_table(const EvalReport& r) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-14s %8s %8s\n", "benchmark", "score", "rel");
  os << buf;
  for (const auto& [k, v] : r.scores) {
    const auto it = r.relative.find(k);
    std::snprintf(buf, sizeof buf, "%-14s %8.4f %8.4f\n", k.c_str(), v, it == r.relative.end() ? 0.0 : it->second);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-14s %8.4f %8.4f\n", "AVG", r.avg, r.avg_rel);
  os << buf;
  std::snprintf(buf, sizeof buf, "ratio %.4f  deg_mm %.4f  deg_txt %.4f\n", r.ratio, r.modality.deg_mm,
                r.modality.deg_txt);
  os << buf;
  return os.str();
}

}  // namespace prunelab::evalkit
