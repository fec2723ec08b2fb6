#pragma once
// Recovery training of a pruned student against a frozen teacher: response
// cross-entropy, temperature-softened logits distillation, hidden-state L2
// matching and their weighted sum.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunelab/data.hpp"
#include "prunelab/model.hpp"

namespace prunelab::recovery {

using model::ToyLVLM;
using ndgrad::Array;

enum class Divergence { kForwardKl, kReverseKl, kNone };
enum class MatchLayers { kFinalOnly, kRetainedByOriginalIndex, kNone, kAuto };
enum class Scope { kProjectorOnly, kProjectorPlusLlm };
// kTeacherScale divides each matched layer's squared error by the teacher's
// mean square on the same rows, putting the term on the scale of the others.
enum class MatchScale { kRaw, kTeacherScale };

struct LoraConfig {
  int rank = 8;
  double scaling = 16.0;
  bool target_q = true;
  bool target_v = true;
};

struct OptimizerConfig {
  double lr = 1e-3;
  int steps = 200;
  int batch = 16;
  double grad_clip = 1.0;
  double final_lr_fraction = 0.1;  // cosine decay floor
  std::uint64_t seed = 0;
};

struct RecoveryConfig {
  std::string preset = "sft";
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = 0.0;
  Divergence kd_divergence = Divergence::kNone;
  double tau = 2.0;
  MatchLayers match_layers = MatchLayers::kAuto;
  MatchScale match_scale = MatchScale::kTeacherScale;
  Scope scope = Scope::kProjectorOnly;
  std::optional<LoraConfig> lora;
  OptimizerConfig optimizer;
  double data_fraction = 1.0;
  bool kd_all_positions = false;

  void validate() const;
};

// sft, kl, rkl, l2, sft_l2, sft_kl, sft_l2_kl. Throws ConfigError otherwise.
RecoveryConfig preset(std::string_view name);
std::vector<std::string> preset_names();

// Projector-only runs use lr 1e-3; joint runs use LoRA on Wq/Wv and lr 3e-4.
RecoveryConfig with_scope(RecoveryConfig cfg, Scope scope);

struct LossBreakdown {
  double l_sft = 0.0;
  double l_logits = 0.0;
  double l_match = 0.0;
  double total = 0.0;
  int step = 0;
};

// Student hidden-state index paired with a teacher hidden-state index
// (index 0 is the embedding output, index i+1 follows layer i).
struct MatchPair {
  int student = 0;
  int teacher = 0;
};

std::vector<MatchPair> match_map(const ToyLVLM& student, const ToyLVLM& teacher,
                                 MatchLayers mode);
std::string match_layers_name(MatchLayers m);
std::string match_scale_name(MatchScale s);
MatchScale parse_match_scale(const std::string& s);

// KL(p || q) by direct summation over matching supports.
double kl_divergence(std::span<const double> p, std::span<const double> q);

Array sft_loss(const ToyLVLM& student, std::span<const Triplet> batch);
Array logits_kd_loss(const ToyLVLM& student, const ToyLVLM& teacher,
                     std::span<const Triplet> batch, Divergence divergence, double tau,
                     bool all_positions = false);
Array hidden_match_loss(const ToyLVLM& student, const ToyLVLM& teacher,
                        std::span<const Triplet> batch, MatchLayers mode,
                        MatchScale scale = MatchScale::kRaw);

struct CombinedLoss {
  Array total;
  LossBreakdown breakdown;
};

// `teacher` may be null when beta == gamma == 0.
CombinedLoss combined_loss(const ToyLVLM& student, const ToyLVLM* teacher,
                           std::span<const Triplet> batch, const RecoveryConfig& cfg);

struct ParamPartition {
  std::vector<Array> trainable;
  std::vector<Array> frozen;
};

// Sets requires_grad flags. Joint scope with LoRA attaches fresh adapters
// (A uniform +-1/sqrt(in), B zero) and freezes the base LM; joint scope
// without LoRA trains every LM parameter. Throws ConfigError when the rank
// is not below both matrix dimensions.
ParamPartition set_trainable_scope(ToyLVLM& student, Scope scope,
                                   const std::optional<LoraConfig>& lora, std::uint64_t seed);

class Adam {
 public:
  explicit Adam(std::vector<Array> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  // Clips the global gradient norm to `clip` (if positive), applies one
  // update and clears gradients. Returns the pre-clip norm.
  double step(double lr, double clip);

 private:
  std::vector<Array> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

double cosine_lr(const OptimizerConfig& opt, int step, int total_steps);

// Batches drawn from successive seeded permutations of the data.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  void refill();
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
};

struct TrainResult {
  ToyLVLM student;
  std::vector<LossBreakdown> curve;
  std::vector<MatchPair> match_pairs;
};

using StepCallback = std::function<bool(const LossBreakdown&, const ToyLVLM&)>;

// Trains a copy of `student`. Adapters are merged before returning. Throws
// DivergenceError if the total loss becomes non-finite. `on_step` may stop
// training early by returning false.
TrainResult train(const ToyLVLM& student, const ToyLVLM* teacher, const std::vector<Triplet>& data,
                  const RecoveryConfig& cfg, const StepCallback& on_step = {});

// Mean sft loss over a dataset, no gradients.
double eval_sft_loss(const ToyLVLM& m, const std::vector<Triplet>& data);

}  // namespace prunelab::recovery
