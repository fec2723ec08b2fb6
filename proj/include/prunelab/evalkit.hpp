#pragma once
// Benchmark scoring, relative aggregation, modality split and efficiency
// accounting.

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "prunelab/data.hpp"
#include "prunelab/model.hpp"

namespace prunelab::evalkit {

using model::ToyLVLM;
using Scores = std::map<std::string, double>;

// Supplies next-token logits for the last position of a sequence.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<double> next_logits(const Triplet& item, std::span<const int> tokens) = 0;
};

class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const ToyLVLM& m) : m_(m) {}
  std::vector<double> next_logits(const Triplet& item, std::span<const int> tokens) override;

 private:
  const ToyLVLM& m_;
};

inline constexpr int kMaxDecodeTokens = 16;

// 1/0 for mcq and yes/no items, token F1 for freeform items.
double score_item(Predictor& p, const Triplet& item);
std::vector<int> greedy_decode(Predictor& p, const Triplet& item, int max_tokens = kMaxDecodeTokens,
                               int max_seq = 1 << 30);
// Multiset token F1, ignoring end-of-sequence tokens.
double token_f1(std::span<const int> predicted, std::span<const int> reference);

double score_benchmark(Predictor& p, const data::Suite& suite);
double score_benchmark(const ToyLVLM& m, const data::Suite& suite, int jobs = 1);
Scores score_suites(const ToyLVLM& m, const std::vector<data::Suite>& suites, int jobs = 1);

struct ModalitySplit {
  double avg_mm = 0.0;
  double avg_txt = 0.0;
  double deg_mm = 0.0;
  double deg_txt = 0.0;
};

struct EvalReport {
  Scores scores;
  Scores relative;  // per-benchmark score / reference score
  double avg = 0.0;
  double avg_rel = 0.0;
  double ratio = 0.0;
  ModalitySplit modality;
};

// Per-benchmark normalisation, then the mean. Throws MissingArtifactError if
// a benchmark has no reference entry. A zero reference counts as relative 1
// when the score is also zero.
EvalReport relative_report(const Scores& scores, const Scores& reference,
                           const std::vector<data::Suite>& suites, double ratio = 0.0);
EvalReport relative_report(const ToyLVLM& m, const Scores& reference,
                           const std::vector<data::Suite>& suites, double ratio = 0.0, int jobs = 1);

// deg_x = 1 - avg_x / reference avg_x over the multimodal and text-only suites.
ModalitySplit modality_split(const Scores& scores, const std::vector<data::Suite>& suites,
                             const Scores& reference);

struct Workload {
  int seq_len = 128;
  int repetitions = 30;
  int warmup = 5;
};

struct EfficiencyReport {
  std::int64_t param_total = 0;
  std::int64_t param_llm = 0;
  double flops_per_token = 0.0;
  double latency_ms_mean = 0.0;
  double latency_ms_std = 0.0;
  int seq_len = 0;
  int repetitions = 0;
};

// sum over layers of 2*(4*d*heads*dh + 2*T*heads*dh + 3*d*ff) + 2*d*vocab.
double flops_per_token(const ToyLVLM& m, int seq_len);
// Matmul multiply-adds counted during one text-only forward of seq_len tokens.
std::uint64_t traced_macs(const ToyLVLM& m, int seq_len);
std::vector<int> workload_tokens(const ToyLVLM& m, int seq_len);
EfficiencyReport efficiency(const ToyLVLM& m, const Workload& w, bool measure_latency = true);

nlohmann::ordered_json to_json(const EvalReport& r);
nlohmann::ordered_json to_json(const EfficiencyReport& r);
Scores scores_from_json(const nlohmann::json& j);
std::string render_table(const EvalReport& r);

}  // namespace prunelab::evalkit
