#include "prunelab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "prunelab/data.hpp"
#include "prunelab/errors.hpp"
#include "prunelab/rng.hpp"

namespace prunelab::model {

namespace nd = ndgrad;

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layer count must be >= 1");
  if (heads < 1) throw ConfigError("model: heads must be >= 1");
  if (d_ff < 4) throw ConfigError("model: d_ff must be >= 4");
  if (d != heads * head_dim) throw ConfigError("model: d must equal heads * head_dim");
  if (vocab_size < data::tok::kReserved || visual_tokens < 0 || d_img < 1 || d_enc < 1 ||
      max_seq < 1) {
    throw ConfigError("model: invalid dimensions");
  }
}

namespace {

Array uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Array({rows, cols}, std::move(v));
}

Norm unit_norm(std::size_t d) {
  return {Array({d}, std::vector<double>(d, 1.0)), Array::zeros({d})};
}

Array clone_opt(const Array& a) { return a.defined() ? a.clone() : a; }

}  // namespace

ToyLVLM init_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x1417));
  const auto d = static_cast<std::size_t>(cfg.d);
  const auto hd = static_cast<std::size_t>(cfg.heads * cfg.head_dim);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto enc = static_cast<std::size_t>(cfg.d_enc);
  ToyLVLM m;
  m.config = cfg;
  m.vision.w1 = uniform_matrix(rng, static_cast<std::size_t>(cfg.d_img), enc);
  m.vision.b1 = Array::zeros({enc});
  m.vision.w2 = uniform_matrix(rng, enc, enc * static_cast<std::size_t>(cfg.visual_tokens));
  m.vision.b2 = Array::zeros({enc * static_cast<std::size_t>(cfg.visual_tokens)});
  m.projector.w1 = uniform_matrix(rng, enc, d);
  m.projector.b1 = Array::zeros({d});
  m.projector.w2 = uniform_matrix(rng, d, d);
  m.projector.b2 = Array::zeros({d});
  m.embed = uniform_matrix(rng, static_cast<std::size_t>(cfg.vocab_size), d);
  m.pos = uniform_matrix(rng, static_cast<std::size_t>(cfg.max_seq), d);
  for (int i = 0; i < cfg.layers; ++i) {
    TransformerLayer l;
    l.norm1 = unit_norm(d);
    l.wq = uniform_matrix(rng, d, hd);
    l.wk = uniform_matrix(rng, d, hd);
    l.wv = uniform_matrix(rng, d, hd);
    l.wo = uniform_matrix(rng, hd, d);
    l.norm2 = unit_norm(d);
    l.w_up = uniform_matrix(rng, d, ff);
    l.w_gate = uniform_matrix(rng, d, ff);
    l.w_down = uniform_matrix(rng, ff, d);
    l.heads = cfg.heads;
    l.ff_channels = cfg.d_ff;
    l.original_index = i;
    m.layers.push_back(std::move(l));
  }
  m.final_norm = unit_norm(d);
  m.lm_head = uniform_matrix(rng, d, static_cast<std::size_t>(cfg.vocab_size));
  for (Array p : llm_parameters(m)) p.set_requires_grad(true);
  for (Array p : projector_parameters(m)) p.set_requires_grad(true);
  return m;
}

ToyLVLM ToyLVLM::clone() const {
  ToyLVLM m;
  m.config = config;
  auto mlp = [](const Mlp2& s) { return Mlp2{s.w1.clone(), s.b1.clone(), s.w2.clone(), s.b2.clone()}; };
  auto norm = [](const Norm& n) { return Norm{n.gain.clone(), n.bias.clone()}; };
  m.vision = mlp(vision);
  m.projector = mlp(projector);
  m.embed = embed.clone();
  m.pos = pos.clone();
  for (const TransformerLayer& l : layers) {
    TransformerLayer c = l;
    c.norm1 = norm(l.norm1);
    c.wq = l.wq.clone();
    c.wk = l.wk.clone();
    c.wv = l.wv.clone();
    c.wo = l.wo.clone();
    c.norm2 = norm(l.norm2);
    c.w_up = l.w_up.clone();
    c.w_gate = l.w_gate.clone();
    c.w_down = l.w_down.clone();
    if (l.lora_q) c.lora_q = LoraAdapter{clone_opt(l.lora_q->a), clone_opt(l.lora_q->b), l.lora_q->scaling};
    if (l.lora_v) c.lora_v = LoraAdapter{clone_opt(l.lora_v->a), clone_opt(l.lora_v->b), l.lora_v->scaling};
    m.layers.push_back(std::move(c));
  }
  m.final_norm = norm(final_norm);
  m.lm_head = lm_head.clone();
  return m;
}

std::vector<NamedParam> named_parameters(const ToyLVLM& m) {
  std::vector<NamedParam> out{
      {"vision.w1", m.vision.w1},       {"vision.b1", m.vision.b1},
      {"vision.w2", m.vision.w2},       {"vision.b2", m.vision.b2},
      {"projector.w1", m.projector.w1}, {"projector.b1", m.projector.b1},
      {"projector.w2", m.projector.w2}, {"projector.b2", m.projector.b2},
      {"embed", m.embed},               {"pos", m.pos},
  };
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const TransformerLayer& l = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "norm1.gain", l.norm1.gain});
    out.push_back({p + "norm1.bias", l.norm1.bias});
    out.push_back({p + "wq", l.wq});
    out.push_back({p + "wk", l.wk});
    out.push_back({p + "wv", l.wv});
    out.push_back({p + "wo", l.wo});
    out.push_back({p + "norm2.gain", l.norm2.gain});
    out.push_back({p + "norm2.bias", l.norm2.bias});
    out.push_back({p + "w_up", l.w_up});
    out.push_back({p + "w_gate", l.w_gate});
    out.push_back({p + "w_down", l.w_down});
  }
  out.push_back({"final_norm.gain", m.final_norm.gain});
  out.push_back({"final_norm.bias", m.final_norm.bias});
  out.push_back({"lm_head", m.lm_head});
  return out;
}

std::vector<Array> llm_parameters(const ToyLVLM& m) {
  std::vector<Array> out{m.embed, m.pos};
  for (const TransformerLayer& l : m.layers) {
    for (const Array& a : {l.norm1.gain, l.norm1.bias, l.wq, l.wk, l.wv, l.wo, l.norm2.gain,
                           l.norm2.bias, l.w_up, l.w_gate, l.w_down}) {
      out.push_back(a);
    }
  }
  out.push_back(m.final_norm.gain);
  out.push_back(m.final_norm.bias);
  out.push_back(m.lm_head);
  return out;
}

std::vector<Array> projector_parameters(const ToyLVLM& m) {
  return {m.projector.w1, m.projector.b1, m.projector.w2, m.projector.b2};
}

std::vector<Array> vision_parameters(const ToyLVLM& m) {
  return {m.vision.w1, m.vision.b1, m.vision.w2, m.vision.b2};
}

std::vector<Array> adapter_parameters(const ToyLVLM& m) {
  std::vector<Array> out;
  for (const TransformerLayer& l : m.layers) {
    for (const auto* ad : {&l.lora_q, &l.lora_v}) {
      if (*ad) {
        out.push_back((*ad)->a);
        out.push_back((*ad)->b);
      }
    }
  }
  return out;
}

Array visual_tokens(const ToyLVLM& m, std::span<const double> image) {
  const auto& cfg = m.config;
  if (image.size() != static_cast<std::size_t>(cfg.d_img)) {
    throw ShapeError("visual_tokens: image has " + std::to_string(image.size()) +
                     " features, model expects " + std::to_string(cfg.d_img));
  }
  Array x({1, image.size()}, std::vector<double>(image.begin(), image.end()));
  Array h = nd::gelu(nd::add(nd::matmul(x, m.vision.w1), m.vision.b1));
  Array enc = nd::add(nd::matmul(h, m.vision.w2), m.vision.b2);
  enc = nd::reshape(enc, {static_cast<std::size_t>(cfg.visual_tokens), static_cast<std::size_t>(cfg.d_enc)});
  Array p = nd::gelu(nd::add(nd::matmul(enc, m.projector.w1), m.projector.b1));
  return nd::add(nd::matmul(p, m.projector.w2), m.projector.b2);
}

namespace {

Array project(const Array& x, const Array& w, const std::optional<LoraAdapter>& lora) {
  Array y = nd::matmul(x, w);
  if (lora) y = nd::add(y, nd::scale(nd::matmul(nd::matmul(x, lora->a), lora->b), lora->scaling));
  return y;
}

}  // namespace

Array layer_forward(const TransformerLayer& layer, const Array& h, int head_dim) {
  switch (layer.override_mode) {
    case LayerOverride::kIdentity: return h;
    case LayerOverride::kNegate: return nd::scale(h, -1.0);
    case LayerOverride::kNone: break;
  }
  const auto dh = static_cast<std::size_t>(head_dim);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Array x = nd::layernorm(h, layer.norm1.gain, layer.norm1.bias);
  Array q = project(x, layer.wq, layer.lora_q);
  Array k = nd::matmul(x, layer.wk);
  Array v = project(x, layer.wv, layer.lora_v);
  std::vector<Array> heads;
  heads.reserve(static_cast<std::size_t>(layer.heads));
  for (int j = 0; j < layer.heads; ++j) {
    const std::size_t off = static_cast<std::size_t>(j) * dh;
    Array qj = nd::slice_cols(q, off, dh);
    Array kj = nd::slice_cols(k, off, dh);
    Array vj = nd::slice_cols(v, off, dh);
    Array scores = nd::mask_future(nd::scale(nd::matmul(qj, nd::transpose(kj)), inv_sqrt));
    heads.push_back(nd::matmul(nd::softmax_lastdim(scores), vj));
  }
  Array attn = heads.size() == 1 ? heads[0] : nd::concat_cols(heads);
  Array h1 = nd::add(h, nd::matmul(attn, layer.wo));
  Array x2 = nd::layernorm(h1, layer.norm2.gain, layer.norm2.bias);
  Array gated = nd::mul(nd::silu(nd::matmul(x2, layer.w_gate)), nd::matmul(x2, layer.w_up));
  return nd::add(h1, nd::matmul(gated, layer.w_down));
}

ForwardTrace forward_tokens(const ToyLVLM& m, const std::vector<double>* image,
                            std::span<const int> tokens, std::size_t prompt_len,
                            const ForwardOptions& opts) {
  const auto& cfg = m.config;
  const std::size_t nv = image ? static_cast<std::size_t>(cfg.visual_tokens) : 0;
  const std::size_t t_len = nv + tokens.size();
  if (t_len > static_cast<std::size_t>(cfg.max_seq)) {
    throw SequenceOverflowError("forward: sequence of " + std::to_string(t_len) +
                                " positions exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw VocabularyError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
  }
  ForwardTrace tr;
  tr.token_roles.assign(nv, TokenRole::kVisual);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    tr.token_roles.push_back(i < prompt_len ? TokenRole::kPrompt : TokenRole::kResponse);
  }
  for (std::size_t i = std::max<std::size_t>(prompt_len, 1); i < tokens.size(); ++i) {
    tr.prediction_rows.push_back(nv + i - 1);
    tr.prediction_targets.push_back(tokens[i]);
  }

  Array emb = nd::embedding_lookup(m.embed, tokens);
  Array h = image ? nd::concat_rows({visual_tokens(m, *image), emb}) : emb;
  h = nd::add(h, nd::slice_rows(m.pos, 0, t_len));
  if (opts.record_hidden) tr.hidden_states.push_back(h);
  for (const TransformerLayer& layer : m.layers) {
    h = layer_forward(layer, h, cfg.head_dim);
    if (opts.record_hidden) tr.hidden_states.push_back(h);
  }
  tr.logits = nd::matmul(nd::layernorm(h, m.final_norm.gain, m.final_norm.bias), m.lm_head);
  return tr;
}

ForwardTrace forward(const ToyLVLM& m, const Triplet& sample, const ForwardOptions& opts) {
  std::vector<int> tokens = sample.prompt_tokens;
  tokens.insert(tokens.end(), sample.response_tokens.begin(), sample.response_tokens.end());
  const bool visual = sample.task_tag != TaskTag::kTextOnly;
  return forward_tokens(m, visual ? &sample.image_features : nullptr, tokens,
                        sample.prompt_tokens.size(), opts);
}

std::vector<std::vector<double>> response_probs(const ForwardTrace& trace, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  std::vector<std::vector<double>> out;
  const std::size_t vocab = trace.logits.cols();
  for (std::size_t r : trace.prediction_rows) {
    std::vector<double> row(vocab);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < vocab; ++c) mx = std::max(mx, trace.logits.at(r, c) / tau);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += (row[c] = std::exp(trace.logits.at(r, c) / tau - mx));
    for (double& p : row) p /= z;
    out.push_back(std::move(row));
  }
  return out;
}

std::int64_t layer_param_count(const TransformerLayer& l) {
  std::int64_t n = 0;
  for (const Array& a : {l.norm1.gain, l.norm1.bias, l.wq, l.wk, l.wv, l.wo, l.norm2.gain,
                         l.norm2.bias, l.w_up, l.w_gate, l.w_down}) {
    n += static_cast<std::int64_t>(a.size());
  }
  return n;
}

std::int64_t param_count(const ToyLVLM& m, ParamScope scope) {
  std::int64_t n = 0;
  for (const Array& a : llm_parameters(m)) n += static_cast<std::int64_t>(a.size());
  if (scope == ParamScope::kAll) {
    for (const Array& a : vision_parameters(m)) n += static_cast<std::int64_t>(a.size());
    for (const Array& a : projector_parameters(m)) n += static_cast<std::int64_t>(a.size());
  }
  return n;
}

void merge_adapters(ToyLVLM& m) {
  for (TransformerLayer& l : m.layers) {
    for (auto [ad, w] : {std::pair{&l.lora_q, &l.wq}, std::pair{&l.lora_v, &l.wv}}) {
      if (!*ad) continue;
      const LoraAdapter& a = **ad;
      const std::size_t in = a.a.rows(), r = a.a.cols(), out = a.b.cols();
      auto wd = w->mutable_data();
      for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
          double s = 0.0;
          for (std::size_t p = 0; p < r; ++p) s += a.a.at(i, p) * a.b.at(p, j);
          wd[i * out + j] += a.scaling * s;
        }
      }
      ad->reset();
    }
  }
}

void check_structure(const ToyLVLM& m) {
  const auto d = static_cast<std::size_t>(m.config.d);
  const auto dh = static_cast<std::size_t>(m.config.head_dim);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const TransformerLayer& l = m.layers[i];
    const std::size_t hw = static_cast<std::size_t>(l.heads) * dh;
    const auto ff = static_cast<std::size_t>(l.ff_channels);
    auto bad = [&](const char* what) {
      throw ShapeError("layer " + std::to_string(i) + ": " + what + " inconsistent with heads=" +
                       std::to_string(l.heads) + " ff_channels=" + std::to_string(l.ff_channels));
    };
    if (l.heads < 1 || l.ff_channels < 1) bad("structure");
    if (l.wq.shape() != nd::Shape{d, hw} || l.wk.shape() != nd::Shape{d, hw} ||
        l.wv.shape() != nd::Shape{d, hw}) {
      bad("Wq/Wk/Wv");
    }
    if (l.wo.shape() != nd::Shape{hw, d}) bad("Wo");
    if (l.w_up.shape() != nd::Shape{d, ff} || l.w_gate.shape() != nd::Shape{d, ff}) bad("W_up/W_gate");
    if (l.w_down.shape() != nd::Shape{ff, d}) bad("W_down");
  }
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'R', 'L', 'B'};
constexpr std::uint16_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes_.insert(bytes_.end(), b, b + sizeof(T));
  }
  void put_str(const std::string& s) {
    put(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint16_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::vector<std::pair<std::string, std::int64_t>> metadata(const ToyLVLM& m) {
  const ModelConfig& c = m.config;
  std::vector<std::pair<std::string, std::int64_t>> meta{
      {"vocab_size", c.vocab_size},   {"d", c.d},
      {"config_layers", c.layers},    {"config_heads", c.heads},
      {"head_dim", c.head_dim},       {"d_ff", c.d_ff},
      {"visual_tokens", c.visual_tokens}, {"d_img", c.d_img},
      {"d_enc", c.d_enc},             {"max_seq", c.max_seq},
      {"seed", static_cast<std::int64_t>(c.seed)},
      {"layers", static_cast<std::int64_t>(m.layers.size())},
  };
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    meta.emplace_back(p + "heads", m.layers[i].heads);
    meta.emplace_back(p + "ff_channels", m.layers[i].ff_channels);
    meta.emplace_back(p + "original_index", m.layers[i].original_index);
    meta.emplace_back(p + "override", static_cast<std::int64_t>(m.layers[i].override_mode));
  }
  return meta;
}

}  // namespace

std::vector<std::uint8_t> serialize(const ToyLVLM& src) {
  ToyLVLM merged_storage;
  const ToyLVLM* m = &src;
  if (!adapter_parameters(src).empty()) {
    merged_storage = src.clone();
    merge_adapters(merged_storage);
    m = &merged_storage;
  }
  Writer w;
  w.put_raw(kMagic, 4);
  w.put(kVersion);
  const auto meta = metadata(*m);
  w.put(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.put_str(k);
    w.put(v);
  }
  const auto params = named_parameters(*m);
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_str(p.name);
    w.put(static_cast<std::uint8_t>(p.param.rank()));
    for (std::size_t dim : p.param.shape()) w.put(static_cast<std::uint32_t>(dim));
  }
  for (const auto& p : params) {
    for (double v : p.param.data()) w.put(v);
  }
  return w.take();
}

ToyLVLM deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("checkpoint: bad magic (expected PRLB)");
  }
  for (int i = 0; i < 4; ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  std::map<std::string, std::int64_t> meta;
  const auto nmeta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.get_str();
    meta[k] = r.get<std::int64_t>();
  }
  auto need = [&](const std::string& k) {
    auto it = meta.find(k);
    if (it == meta.end()) throw CheckpointError("checkpoint: missing metadata '" + k + "'");
    return it->second;
  };
  ModelConfig c;
  c.vocab_size = static_cast<int>(need("vocab_size"));
  c.d = static_cast<int>(need("d"));
  c.layers = static_cast<int>(need("config_layers"));
  c.heads = static_cast<int>(need("config_heads"));
  c.head_dim = static_cast<int>(need("head_dim"));
  c.d_ff = static_cast<int>(need("d_ff"));
  c.visual_tokens = static_cast<int>(need("visual_tokens"));
  c.d_img = static_cast<int>(need("d_img"));
  c.d_enc = static_cast<int>(need("d_enc"));
  c.max_seq = static_cast<int>(need("max_seq"));
  c.seed = static_cast<std::uint64_t>(need("seed"));
  const auto nlayers = need("layers");
  if (nlayers < 0 || nlayers > 4096) throw CheckpointError("checkpoint: bad layer count");

  ToyLVLM m;
  m.config = c;
  m.layers.resize(static_cast<std::size_t>(nlayers));
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    m.layers[i].heads = static_cast<int>(need(p + "heads"));
    m.layers[i].ff_channels = static_cast<int>(need(p + "ff_channels"));
    m.layers[i].original_index = static_cast<int>(need(p + "original_index"));
    const auto ov = need(p + "override");
    if (ov < 0 || ov > 2) throw CheckpointError("checkpoint: bad layer override");
    m.layers[i].override_mode = static_cast<LayerOverride>(ov);
  }

  const auto ntensors = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, nd::Shape>> table;
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    std::string name = r.get_str();
    const auto rank = r.get<std::uint8_t>();
    if (rank > 2) throw CheckpointError("checkpoint: tensor '" + name + "' has rank > 2");
    nd::Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint32_t>());
    table.emplace_back(std::move(name), std::move(shape));
  }
  std::map<std::string, Array> loaded;
  for (const auto& [name, shape] : table) {
    std::vector<double> v(nd::shape_size(shape));
    for (double& x : v) x = r.get<double>();
    loaded.emplace(name, Array(shape, std::move(v), true));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after payload");

  auto take = [&](const std::string& name) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError("checkpoint: shape table lacks '" + name + "'");
    return it->second;
  };
  m.vision = {take("vision.w1"), take("vision.b1"), take("vision.w2"), take("vision.b2")};
  m.projector = {take("projector.w1"), take("projector.b1"), take("projector.w2"), take("projector.b2")};
  m.embed = take("embed");
  m.pos = take("pos");
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    TransformerLayer& l = m.layers[i];
    l.norm1 = {take(p + "norm1.gain"), take(p + "norm1.bias")};
    l.wq = take(p + "wq");
    l.wk = take(p + "wk");
    l.wv = take(p + "wv");
    l.wo = take(p + "wo");
    l.norm2 = {take(p + "norm2.gain"), take(p + "norm2.bias")};
    l.w_up = take(p + "w_up");
    l.w_gate = take(p + "w_gate");
    l.w_down = take(p + "w_down");
  }
  m.final_norm = {take("final_norm.gain"), take("final_norm.bias")};
  m.lm_head = take("lm_head");
  if (loaded.size() != named_parameters(m).size()) {
    throw CheckpointError("checkpoint: unexpected tensors in shape table");
  }
  for (Array v : vision_parameters(m)) v.set_requires_grad(false);

  const auto d = static_cast<std::size_t>(c.d);
  auto expect = [&](const Array& a, nd::Shape s, const char* what) {
    if (a.shape() != s) {
      throw CheckpointError(std::string("checkpoint: shape table corrupt for ") + what + ": " +
                            nd::shape_str(a.shape()) + " vs " + nd::shape_str(s));
    }
  };
  expect(m.embed, {static_cast<std::size_t>(c.vocab_size), d}, "embed");
  expect(m.pos, {static_cast<std::size_t>(c.max_seq), d}, "pos");
  expect(m.lm_head, {d, static_cast<std::size_t>(c.vocab_size)}, "lm_head");
  expect(m.projector.w2, {d, d}, "projector.w2");
  try {
    check_structure(m);
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("checkpoint: shape table corrupt: ") + e.what());
  }
  return m;
}

void save_checkpoint(const ToyLVLM& m, const std::filesystem::path& path) {
  const auto bytes = serialize(m);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write to '" + path.string() + "' failed");
}

ToyLVLM load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

bool bitwise_equal(const ToyLVLM& a, const ToyLVLM& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& x = a.layers[i];
    const auto& y = b.layers[i];
    if (x.heads != y.heads || x.ff_channels != y.ff_channels ||
        x.original_index != y.original_index || x.override_mode != y.override_mode) {
      return false;
    }
  }
  const auto pa = named_parameters(a);
  const auto pb = named_parameters(b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].param.shape() != pb[i].param.shape()) return false;
    if (std::memcmp(pa[i].param.data().data(), pb[i].param.data().data(),
                    pa[i].param.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace prunelab::model
