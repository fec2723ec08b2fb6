#pragma once
// Miniature vision-language model: a frozen vision stub, a two-layer gelu
// projector and a pre-norm decoder-only language model with gated MLPs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prunelab/ndgrad.hpp"

namespace prunelab {

struct Triplet;  // data.hpp

namespace model {

using ndgrad::Array;

struct ModelConfig {
  int vocab_size = 256;
  int d = 32;
  int layers = 4;
  int heads = 4;
  int head_dim = 8;
  int d_ff = 96;
  int visual_tokens = 4;
  int d_img = 24;
  int d_enc = 16;
  int max_seq = 128;
  std::uint64_t seed = 0;

  // Throws ConfigError on violated construction invariants.
  void validate() const;
};

struct Mlp2 {
  Array w1, b1, w2, b2;
};

struct Norm {
  Array gain, bias;
};

// W_eff = W + scaling * A * B with A: (in x r), B: (r x out).
struct LoraAdapter {
  Array a;
  Array b;
  double scaling = 1.0;
};

// Test hooks replacing a layer's computation.
enum class LayerOverride { kNone, kIdentity, kNegate };

struct TransformerLayer {
  Norm norm1;
  Array wq, wk, wv;  // d x heads*head_dim
  Array wo;          // heads*head_dim x d
  Norm norm2;
  Array w_up, w_gate;  // d x ff_channels
  Array w_down;        // ff_channels x d
  int heads = 0;
  int ff_channels = 0;
  int original_index = 0;  // position in the unpruned model
  LayerOverride override_mode = LayerOverride::kNone;
  std::optional<LoraAdapter> lora_q;
  std::optional<LoraAdapter> lora_v;
};

struct ToyLVLM {
  ModelConfig config;
  Mlp2 vision;     // frozen
  Mlp2 projector;  // d_enc -> d -> d
  Array embed;     // vocab x d
  Array pos;       // max_seq x d, learned absolute positions
  std::vector<TransformerLayer> layers;
  Norm final_norm;
  Array lm_head;  // d x vocab

  // Deep copy; parameters are not shared with the original.
  ToyLVLM clone() const;
};

struct NamedParam {
  std::string name;
  Array param;
};

// Stable order used by checkpoints. Adapters are not included.
std::vector<NamedParam> named_parameters(const ToyLVLM& m);
std::vector<Array> llm_parameters(const ToyLVLM& m);
std::vector<Array> projector_parameters(const ToyLVLM& m);
std::vector<Array> vision_parameters(const ToyLVLM& m);
std::vector<Array> adapter_parameters(const ToyLVLM& m);

// Deterministic initialisation: uniform +-sqrt(6/(fan_in+fan_out)) from the
// config seed; norm gains 1, biases 0.
ToyLVLM init_model(const ModelConfig& cfg);

enum class TokenRole { kVisual, kPrompt, kResponse };

struct ForwardTrace {
  std::vector<Array> hidden_states;  // H_0 .. H_M, each T x d
  Array logits;                      // T x vocab
  std::vector<TokenRole> token_roles;
  // Row indices whose next token is a response token, with those targets.
  std::vector<std::size_t> prediction_rows;
  std::vector<int> prediction_targets;
};

struct ForwardOptions {
  bool record_hidden = true;
};

// Runs the model on image ⊕ prompt ⊕ response (teacher forcing). Text-only
// triplets contribute no visual positions.
ForwardTrace forward(const ToyLVLM& m, const Triplet& sample, const ForwardOptions& opts = {});

// Lower-level entry: optional image features plus a token sequence whose
// roles are given by `prompt_len` (the rest is response).
ForwardTrace forward_tokens(const ToyLVLM& m, const std::vector<double>* image,
                            std::span<const int> tokens, std::size_t prompt_len,
                            const ForwardOptions& opts = {});

// V x d visual tokens T_v = projector(stub(image)).
Array visual_tokens(const ToyLVLM& m, std::span<const double> image);

// Applies one layer to H (T x d).
Array layer_forward(const TransformerLayer& layer, const Array& h, int head_dim);

// Softmax(logits / tau) rows at the prediction rows; each sums to 1.
std::vector<std::vector<double>> response_probs(const ForwardTrace& trace, double tau);

enum class ParamScope { kLlmOnly, kAll };

// kLlmOnly counts embed, positions, layers, final norm and lm_head.
std::int64_t param_count(const ToyLVLM& m, ParamScope scope);
std::int64_t layer_param_count(const TransformerLayer& layer);

// Folds LoRA adapters into their base matrices and removes them.
void merge_adapters(ToyLVLM& m);

// Structural consistency of every layer; throws ShapeError.
void check_structure(const ToyLVLM& m);

// Binary checkpoint: "PRLB", u16 version, metadata table, shape table and
// little-endian f64 payloads in row-major order.
void save_checkpoint(const ToyLVLM& m, const std::filesystem::path& path);
ToyLVLM load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize(const ToyLVLM& m);
ToyLVLM deserialize(std::span<const std::uint8_t> bytes);

// True when parameters and per-layer structure are bitwise equal.
bool bitwise_equal(const ToyLVLM& a, const ToyLVLM& b);

}  // namespace model
}  // namespace prunelab
