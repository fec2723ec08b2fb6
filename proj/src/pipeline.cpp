#include "prunelab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "prunelab/errors.hpp"
#include "prunelab/parallel.hpp"
#include "prunelab/rng.hpp"

namespace prunelab::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---- manifest ---------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("manifest: " + key + " expects a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("manifest: " + key + " expects an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("manifest: " + key + " expects true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string scope_name(recovery::Scope s) {
  return s == recovery::Scope::kProjectorOnly ? "projector_only" : "projector_plus_llm";
}

recovery::Scope parse_scope(const std::string& s) {
  if (s == "projector_only") return recovery::Scope::kProjectorOnly;
  if (s == "projector_plus_llm") return recovery::Scope::kProjectorPlusLlm;
  throw ConfigError("manifest: unknown recovery scope '" + s + "'");
}

recovery::MatchLayers parse_match(const std::string& s) {
  for (auto m : {recovery::MatchLayers::kAuto, recovery::MatchLayers::kFinalOnly,
                 recovery::MatchLayers::kRetainedByOriginalIndex, recovery::MatchLayers::kNone}) {
    if (recovery::match_layers_name(m) == s) return m;
  }
  throw ConfigError("manifest: unknown match_layers '" + s + "'");
}

struct Key {
  const char* name;
  const char* stage;
  std::function<std::optional<std::string>(const Manifest&)> get;
  std::function<void(Manifest&, const std::string&)> set;
};

PruneStage& prune_of(Manifest& m) {
  if (!m.prune) m.prune = PruneStage{};
  return *m.prune;
}

RecoverStage& recover_of(Manifest& m) {
  if (!m.recover) m.recover = RecoverStage{};
  return *m.recover;
}

#define INT_KEY(NAME, STAGE, FIELD)                                                        \
  Key {                                                                                    \
    NAME, STAGE, [](const Manifest& m) -> std::optional<std::string> {                     \
      return std::to_string(m.FIELD);                                                      \
    },                                                                                     \
        [](Manifest& m, const std::string& v) { m.FIELD = static_cast<int>(parse_int(NAME, v)); } \
  }
#define DBL_KEY(NAME, STAGE, FIELD)                                                        \
  Key {                                                                                    \
    NAME, STAGE, [](const Manifest& m) -> std::optional<std::string> {                     \
      return fmt_double(m.FIELD);                                                          \
    },                                                                                     \
        [](Manifest& m, const std::string& v) { m.FIELD = parse_double(NAME, v); }         \
  }
#define PRUNE_KEY(NAME, GET, SET)                                                          \
  Key {                                                                                    \
    NAME, "prune", [](const Manifest& m) -> std::optional<std::string> {                   \
      if (!m.prune) return std::nullopt;                                                   \
      const PruneStage& p = *m.prune;                                                      \
      return GET;                                                                          \
    },                                                                                     \
        [](Manifest& m, const std::string& v) {                                            \
          PruneStage& p = prune_of(m);                                                     \
          SET;                                                                             \
        }                                                                                  \
  }
#define RECOVER_KEY(NAME, GET, SET)                                                        \
  Key {                                                                                    \
    NAME, "recover", [](const Manifest& m) -> std::optional<std::string> {                 \
      if (!m.recover) return std::nullopt;                                                 \
      const RecoverStage& r = *m.recover;                                                  \
      return GET;                                                                          \
    },                                                                                     \
        [](Manifest& m, const std::string& v) {                                            \
          RecoverStage& r = recover_of(m);                                                 \
          SET;                                                                             \
        }                                                                                  \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table{
      INT_KEY("model.vocab_size", "model", model.vocab_size),
      INT_KEY("model.d", "model", model.d),
      INT_KEY("model.layers", "model", model.layers),
      INT_KEY("model.heads", "model", model.heads),
      INT_KEY("model.head_dim", "model", model.head_dim),
      INT_KEY("model.d_ff", "model", model.d_ff),
      INT_KEY("model.visual_tokens", "model", model.visual_tokens),
      INT_KEY("model.d_img", "model", model.d_img),
      INT_KEY("model.d_enc", "model", model.d_enc),
      INT_KEY("model.max_seq", "model", model.max_seq),
      INT_KEY("data.train_size", "data", data.train_size),
      INT_KEY("data.recovery_size", "data", data.recovery_size),
      INT_KEY("data.bench_size", "data", data.bench_size),
      INT_KEY("data.dev_size", "data", data.dev_size),
      INT_KEY("data.image_dim", "data", data.image_dim),
      DBL_KEY("data.noise", "data", data.noise),
      Key{"data.task_mix", "data",
          [](const Manifest& m) -> std::optional<std::string> {
            std::string s;
            for (std::size_t i = 0; i < m.data.task_mix.size(); ++i) {
              s += (i ? "," : "") + fmt_double(m.data.task_mix[i]);
            }
            return s;
          },
          [](Manifest& m, const std::string& v) {
            const auto parts = split_list(v);
            if (parts.size() != 4) throw ConfigError("manifest: data.task_mix needs 4 weights");
            for (std::size_t i = 0; i < 4; ++i) m.data.task_mix[i] = parse_double("data.task_mix", parts[i]);
          }},
      INT_KEY("pretrain.steps", "pretrain", pretrain.steps),
      DBL_KEY("pretrain.lr", "pretrain", pretrain.lr),
      INT_KEY("pretrain.batch", "pretrain", pretrain.batch),
      INT_KEY("pretrain.eval_every", "pretrain", pretrain.eval_every),
      DBL_KEY("pretrain.target_accuracy", "pretrain", pretrain.target_accuracy),
      DBL_KEY("pretrain.min_accuracy", "pretrain", pretrain.min_accuracy),
      PRUNE_KEY("prune.method", method_name(p.method), p.method = parse_method(v)),
      PRUNE_KEY("prune.ratio", fmt_double(p.ratio), p.ratio = parse_double("prune.ratio", v)),
      PRUNE_KEY("prune.calibration_n", std::to_string(p.calibration_n),
                p.calibration_n = static_cast<int>(parse_int("prune.calibration_n", v))),
      PRUNE_KEY("prune.per_layer_uniform", fmt_bool(p.per_layer_uniform),
                p.per_layer_uniform = parse_bool("prune.per_layer_uniform", v)),
      PRUNE_KEY("prune.bi_tokens", layerprune::bi_tokens_name(p.bi_tokens),
                p.bi_tokens = layerprune::parse_bi_tokens(v)),
      PRUNE_KEY("prune.min_heads", std::to_string(p.floors.min_heads),
                p.floors.min_heads = static_cast<int>(parse_int("prune.min_heads", v))),
      PRUNE_KEY("prune.min_channels", std::to_string(p.floors.min_channels),
                p.floors.min_channels = static_cast<int>(parse_int("prune.min_channels", v))),
      RECOVER_KEY("recover.preset", r.preset, (recovery::preset(v), r.preset = v)),
      RECOVER_KEY("recover.scope", scope_name(r.scope), r.scope = parse_scope(v)),
      RECOVER_KEY("recover.lora", fmt_bool(r.lora), r.lora = parse_bool("recover.lora", v)),
      RECOVER_KEY("recover.lora_rank", std::to_string(r.lora_rank),
                  r.lora_rank = static_cast<int>(parse_int("recover.lora_rank", v))),
      RECOVER_KEY("recover.lora_scaling", fmt_double(r.lora_scaling),
                  r.lora_scaling = parse_double("recover.lora_scaling", v)),
      RECOVER_KEY("recover.fraction", fmt_double(r.fraction), r.fraction = parse_double("recover.fraction", v)),
      RECOVER_KEY("recover.steps", std::to_string(r.steps),
                  r.steps = static_cast<int>(parse_int("recover.steps", v))),
      RECOVER_KEY("recover.batch", std::to_string(r.batch),
                  r.batch = static_cast<int>(parse_int("recover.batch", v))),
      RECOVER_KEY("recover.lr", fmt_double(r.lr), r.lr = parse_double("recover.lr", v)),
      RECOVER_KEY("recover.tau", fmt_double(r.tau), r.tau = parse_double("recover.tau", v)),
      RECOVER_KEY("recover.grad_clip", fmt_double(r.grad_clip), r.grad_clip = parse_double("recover.grad_clip", v)),
      RECOVER_KEY("recover.match_layers", recovery::match_layers_name(r.match_layers),
                  r.match_layers = parse_match(v)),
      RECOVER_KEY("recover.kd_all_positions", fmt_bool(r.kd_all_positions),
                  r.kd_all_positions = parse_bool("recover.kd_all_positions", v)),
      Key{"eval.latency", "eval",
          [](const Manifest& m) -> std::optional<std::string> { return fmt_bool(m.eval_latency); },
          [](Manifest& m, const std::string& v) { m.eval_latency = parse_bool("eval.latency", v); }},
      Key{"seeds", "run",
          [](const Manifest& m) -> std::optional<std::string> {
            std::string s;
            for (std::size_t i = 0; i < m.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(m.seeds[i]);
            return s;
          },
          [](Manifest& m, const std::string& v) {
            m.seeds.clear();
            for (const std::string& p : split_list(v)) {
              const long long s = parse_int("seeds", p);
              if (s < 0) throw ConfigError("manifest: seeds must be nonnegative");
              m.seeds.push_back(static_cast<std::uint64_t>(s));
            }
          }},
      Key{"out", "run", [](const Manifest& m) -> std::optional<std::string> { return m.out; },
          [](Manifest& m, const std::string& v) { m.out = v; }},
  };
  return table;
}

#undef INT_KEY
#undef DBL_KEY
#undef PRUNE_KEY
#undef RECOVER_KEY

std::string stage_lines(const Manifest& m, std::initializer_list<const char*> stages) {
  std::string out;
  for (const char* stage : stages) {
    for (const Key& k : keys()) {
      if (std::string(k.stage) != stage) continue;
      if (auto v = k.get(m)) out += std::string(k.name) + " = " + *v + "\n";
    }
  }
  return out;
}

}  // namespace

void set_key(Manifest& m, const std::string& key, const std::string& value) {
  if (key == "prune.method" && value == "none") {
    m.prune.reset();
    return;
  }
  if (key == "recover.preset" && value == "none") {
    m.recover.reset();
    return;
  }
  for (const Key& k : keys()) {
    if (key == k.name) {
      k.set(m, value);
      return;
    }
  }
  throw ConfigError("manifest: unknown key '" + key + "'");
}

Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool no_prune = false, no_recover = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (value.empty()) throw ConfigError("manifest line " + std::to_string(lineno) + ": empty value");
    if (key == "prune.method" && value == "none") no_prune = true;
    if (key == "recover.preset" && value == "none") no_recover = true;
    set_key(m, key, value);
  }
  if (no_prune) m.prune.reset();
  if (no_recover) m.recover.reset();
  m.validate();
  return m;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

std::string render_manifest(const Manifest& m) {
  return stage_lines(m, {"model", "data", "pretrain", "prune", "recover", "eval", "run"});
}

void Manifest::validate() const {
  model.validate();
  if (data.train_size < 1 || data.recovery_size < 1 || data.bench_size < 1 || data.dev_size < 1) {
    throw ConfigError("manifest: dataset sizes must be positive");
  }
  if (data.image_dim != model.d_img) throw ConfigError("manifest: data.image_dim must equal model.d_img");
  data::DatasetSpec spec;
  spec.image_dim = data.image_dim;
  spec.noise = data.noise;
  spec.task_mix = data.task_mix;
  spec.vocab.vocab_size = model.vocab_size;
  spec.validate();
  if (pretrain.steps < 1) throw ConfigError("manifest: pretrain.steps must be positive");
  if (pretrain.batch < 1 || pretrain.eval_every < 1 || !(pretrain.lr > 0)) {
    throw ConfigError("manifest: invalid pretrain settings");
  }
  if (prune) {
    if (!(prune->ratio > 0 && prune->ratio < 1)) throw ConfigError("manifest: prune.ratio must be in (0, 1)");
    if (prune->calibration_n < 1 || prune->calibration_n > data.recovery_size) {
      throw ConfigError("manifest: prune.calibration_n must be in [1, data.recovery_size]");
    }
  }
  if (recover) recover->to_config(0).validate();
  if (seeds.empty()) throw ConfigError("manifest: at least one seed required");
}

recovery::RecoveryConfig RecoverStage::to_config(std::uint64_t seed) const {
  recovery::RecoveryConfig c = recovery::with_scope(recovery::preset(preset), scope);
  if (scope == recovery::Scope::kProjectorPlusLlm) {
    if (lora) {
      c.lora = recovery::LoraConfig{lora_rank, lora_scaling, true, true};
    } else {
      c.lora.reset();
    }
  }
  if (lr > 0) c.optimizer.lr = lr;
  c.optimizer.steps = steps;
  c.optimizer.batch = batch;
  c.optimizer.grad_clip = grad_clip;
  c.optimizer.seed = seed;
  c.tau = tau;
  c.match_layers = match_layers;
  c.kd_all_positions = kd_all_positions;
  c.data_fraction = fraction;
  return c;
}

std::string pretrain_canonical(const Manifest& m, std::uint64_t seed) {
  return "seed = " + std::to_string(seed) + "\n" + stage_lines(m, {"model", "data", "pretrain"});
}

std::string prune_canonical(const Manifest& m, std::uint64_t seed) {
  std::string s = pretrain_canonical(m, seed);
  return m.prune ? s + stage_lines(m, {"prune"}) : s + "prune.method = none\n";
}

std::string recover_canonical(const Manifest& m, std::uint64_t seed) {
  std::string s = prune_canonical(m, seed);
  return m.recover ? s + stage_lines(m, {"recover"}) : s + "recover.preset = none\n";
}

std::string eval_canonical(const Manifest& m, std::uint64_t seed) {
  return recover_canonical(m, seed) + stage_lines(m, {"eval"});
}

std::string content_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- in-memory stages -------------------------------------------------------

namespace {

data::DatasetSpec base_spec(const Manifest& m, std::uint64_t seed) {
  data::DatasetSpec s;
  s.seed = seed;
  s.image_dim = m.data.image_dim;
  s.noise = m.data.noise;
  s.task_mix = m.data.task_mix;
  s.vocab.vocab_size = m.model.vocab_size;
  return s;
}

data::DatasetSpec derived(data::DatasetSpec s, std::uint64_t seed, std::uint64_t stream, int size) {
  s.seed = mix_seed(seed, stream);
  s.size = size;
  return s;
}

model::ModelConfig model_config(const Manifest& m, std::uint64_t seed) {
  model::ModelConfig c = m.model;
  c.seed = mix_seed(seed, 10);
  return c;
}

}  // namespace

Datasets make_datasets(const Manifest& m, std::uint64_t seed) {
  Datasets ds;
  ds.base = base_spec(m, seed);
  ds.recovery = data::generate(derived(ds.base, seed, 12, m.data.recovery_size));
  ds.suites = data::make_benchmarks(derived(ds.base, seed, 13, 0), m.data.bench_size);
  ds.dev_mcq = data::make_benchmarks(derived(ds.base, seed, 16, 0), m.data.dev_size).front();
  ds.dev_mcq.name = "dev_mcq";
  return ds;
}

std::vector<Triplet> pretrain_corpus(const Manifest& m, std::uint64_t seed) {
  return data::generate(derived(base_spec(m, seed), seed, 11, m.data.train_size));
}

Reference pretrain(const Manifest& m, std::uint64_t seed, const Datasets& ds, int jobs) {
  m.validate();
  const std::vector<Triplet> corpus = pretrain_corpus(m, seed);
  recovery::RecoveryConfig cfg = recovery::preset("sft");
  cfg.scope = recovery::Scope::kProjectorPlusLlm;
  cfg.lora.reset();
  cfg.optimizer.lr = m.pretrain.lr;
  cfg.optimizer.steps = m.pretrain.steps;
  cfg.optimizer.batch = m.pretrain.batch;
  cfg.optimizer.seed = mix_seed(seed, 17);
  Reference ref;
  const int every = m.pretrain.eval_every;
  auto res = recovery::train(model::init_model(model_config(m, seed)), nullptr, corpus, cfg,
                             [&](const recovery::LossBreakdown& b, const ToyLVLM& s) {
                               if ((b.step + 1) % every != 0 && b.step + 1 != m.pretrain.steps) return true;
                               ref.dev_accuracy = evalkit::score_benchmark(s, ds.dev_mcq, jobs);
                               return ref.dev_accuracy < m.pretrain.target_accuracy;
                             });
  ref.model = std::move(res.student);
  ref.curve = std::move(res.curve);
  ref.steps_run = static_cast<int>(ref.curve.size());
  if (ref.dev_accuracy < m.pretrain.min_accuracy) {
    throw Error("pretrain: mcq accuracy " + fmt_double(ref.dev_accuracy) + " after " +
                std::to_string(ref.steps_run) + " steps is below " + fmt_double(m.pretrain.min_accuracy) +
                "; the reference model is unusable");
  }
  ref.scores = evalkit::score_suites(ref.model, ds.suites, jobs);
  return ref;
}

PruneOutcome prune(const ToyLVLM& teacher, const PruneStage& stage, const std::vector<Triplet>& pool,
                   std::uint64_t seed, int jobs) {
  const std::vector<Triplet> calib = data::calibration_subset(pool, stage.calibration_n, mix_seed(seed, 14));
  PruneOutcome out;
  if (stage.method == PruneMethod::kLayer) {
    out.bi = layerprune::block_influence(teacher, calib, stage.bi_tokens, jobs);
    out.plan = layerprune::plan_layer_removal(*out.bi, teacher, stage.ratio);
    out.student = layerprune::apply_layer_plan(teacher, out.plan);
  } else {
    out.groups = widthprune::build_groups(teacher);
    out.importance = widthprune::taylor_importance(teacher, out.groups, calib, jobs);
    out.plan = widthprune::plan_width_removal(*out.importance, out.groups, teacher, stage.ratio, stage.floors,
                                              stage.per_layer_uniform);
    out.student = widthprune::apply_width_plan(teacher, out.plan);
  }
  return out;
}

recovery::TrainResult recover(const ToyLVLM& student, const ToyLVLM& teacher, const RecoverStage& stage,
                              const std::vector<Triplet>& data, std::uint64_t seed) {
  return recovery::train(student, &teacher, data, stage.to_config(mix_seed(seed, 15)));
}

// ---- on-disk runs -----------------------------------------------------------

namespace {

constexpr const char* kDone = "DONE";

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw Error("cannot write " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("missing artifact " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool done(const fs::path& dir) { return fs::exists(dir / kDone); }

void require_done(const fs::path& dir, const char* what) {
  if (!done(dir)) throw MissingArtifactError(std::string("missing ") + what + " artifacts in " + dir.string());
}

std::string loss_table(const std::vector<recovery::LossBreakdown>& curve) {
  std::string s = "step\tl_sft\tl_logits\tl_match\ttotal\n";
  char buf[160];
  for (const auto& b : curve) {
    std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\t%.17g\t%.17g\n", b.step, b.l_sft, b.l_logits, b.l_match,
                  b.total);
    s += buf;
  }
  return s;
}

json scores_json(const evalkit::Scores& s) {
  json j = json::object();
  for (const auto& [k, v] : s) j[k] = v;
  return j;
}

struct StageState {
  ToyLVLM model;
  double ratio = 0.0;
};

// The model a downstream stage starts from, plus the achieved ratio.
StageState load_upstream(const Manifest& m, const RunPaths& p, bool after_recover) {
  StageState st;
  if (after_recover && m.recover) {
    require_done(p.recover, "recover");
    st.model = model::load_checkpoint(p.recover / "model.ckpt");
  } else if (m.prune) {
    require_done(p.prune, "prune");
    st.model = model::load_checkpoint(p.prune / "model.ckpt");
  } else {
    require_done(p.pretrain, "pretrain");
    st.model = model::load_checkpoint(p.pretrain / "model.ckpt");
  }
  if (m.prune) {
    st.ratio = json::parse(read_text(p.prune / "plan.json")).at("achieved_ratio").get<double>();
  }
  return st;
}

}  // namespace

fs::path cache_root(const Manifest& m) {
  if (const char* env = std::getenv("PRUNELAB_CACHE"); env && *env) return fs::path(env);
  return fs::path(m.out) / "cache";
}

fs::path stage_dir(const Manifest& m, const std::string& stage, const std::string& canonical) {
  const fs::path dir = cache_root(m) / (stage + "-" + content_hash(canonical));
  fs::create_directories(dir);
  const fs::path record = dir / "manifest.txt";
  if (fs::exists(record)) {
    if (read_text(record) != canonical) {
      throw ConfigError("manifest hash collision in " + dir.string() + ": stored settings differ");
    }
  } else {
    write_text(record, canonical);
  }
  return dir;
}

RunPaths run_paths(const Manifest& m, std::uint64_t seed) {
  RunPaths p;
  p.pretrain = stage_dir(m, "pretrain", pretrain_canonical(m, seed));
  p.prune = m.prune ? stage_dir(m, "prune", prune_canonical(m, seed)) : fs::path();
  p.recover = m.recover ? stage_dir(m, "recover", recover_canonical(m, seed)) : fs::path();
  p.eval = stage_dir(m, "eval", eval_canonical(m, seed));
  return p;
}

fs::path cmd_pretrain(const Manifest& m, std::uint64_t seed, int jobs) {
  const RunPaths p = run_paths(m, seed);
  if (done(p.pretrain)) return p.pretrain;
  const Datasets ds = make_datasets(m, seed);
  const Reference ref = pretrain(m, seed, ds, jobs);
  model::save_checkpoint(ref.model, p.pretrain / "model.ckpt");
  json j;
  j["seed"] = seed;
  j["steps_run"] = ref.steps_run;
  j["dev_mcq_accuracy"] = ref.dev_accuracy;
  j["scores"] = scores_json(ref.scores);
  write_text(p.pretrain / "reference.json", j.dump(2) + "\n");
  write_text(p.pretrain / "loss.tsv", loss_table(ref.curve));
  write_text(p.pretrain / kDone, "");
  return p.pretrain;
}

fs::path cmd_prune(const Manifest& m, std::uint64_t seed, int jobs) {
  if (!m.prune) throw ConfigError("prune: manifest has no prune stage");
  const RunPaths p = run_paths(m, seed);
  if (done(p.prune)) return p.prune;
  require_done(p.pretrain, "pretrain");
  const ToyLVLM teacher = model::load_checkpoint(p.pretrain / "model.ckpt");
  const Datasets ds = make_datasets(m, seed);
  const PruneOutcome out = prune(teacher, *m.prune, ds.recovery, seed, jobs);
  model::save_checkpoint(out.student, p.prune / "model.ckpt");
  json j;
  j["method"] = method_name(out.plan.method);
  j["target_ratio"] = out.plan.target_ratio;
  j["achieved_ratio"] = out.plan.achieved_ratio;
  j["params_before"] = out.plan.params_before;
  j["params_removed"] = out.plan.params_removed;
  j["calibration_n"] = m.prune->calibration_n;
  j["layers"] = out.plan.layers;
  std::vector<int> ids;
  for (const auto& g : out.plan.groups) ids.push_back(g.group_id);
  j["groups"] = ids;
  write_text(p.prune / "plan.json", j.dump(2) + "\n");
  std::ostringstream table;
  if (out.bi) {
    layerprune::dump_report(*out.bi, table);
    write_text(p.prune / "bi.tsv", table.str());
  } else {
    widthprune::dump_groups(out.groups, *out.importance, table);
    write_text(p.prune / "groups.tsv", table.str());
  }
  write_text(p.prune / kDone, "");
  return p.prune;
}

fs::path cmd_recover(const Manifest& m, std::uint64_t seed, int) {
  if (!m.recover) throw ConfigError("recover: manifest has no recover stage");
  const RunPaths p = run_paths(m, seed);
  if (done(p.recover)) return p.recover;
  require_done(p.pretrain, "pretrain");
  const ToyLVLM teacher = model::load_checkpoint(p.pretrain / "model.ckpt");
  const StageState start = load_upstream(m, p, false);
  const Datasets ds = make_datasets(m, seed);
  const recovery::TrainResult res = recover(start.model, teacher, *m.recover, ds.recovery, seed);
  model::save_checkpoint(res.student, p.recover / "model.ckpt");
  write_text(p.recover / "loss.tsv", loss_table(res.curve));
  std::string pairs = "student_hidden\tteacher_hidden\n";
  for (const auto& mp : res.match_pairs) pairs += std::to_string(mp.student) + "\t" + std::to_string(mp.teacher) + "\n";
  write_text(p.recover / "match.tsv", pairs);
  const recovery::RecoveryConfig cfg = m.recover->to_config(mix_seed(seed, 15));
  json j;
  j["preset"] = m.recover->preset;
  j["scope"] = scope_name(cfg.scope);
  j["lora"] = cfg.lora.has_value();
  j["fraction"] = m.recover->fraction;
  j["steps"] = cfg.optimizer.steps;
  j["lr"] = cfg.optimizer.lr;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["gamma"] = cfg.gamma;
  j["tau"] = cfg.tau;
  j["final_total"] = res.curve.empty() ? 0.0 : res.curve.back().total;
  write_text(p.recover / "recover.json", j.dump(2) + "\n");
  write_text(p.recover / kDone, "");
  return p.recover;
}

fs::path cmd_eval(const Manifest& m, std::uint64_t seed, int jobs) {
  const RunPaths p = run_paths(m, seed);
  if (done(p.eval)) return p.eval;
  require_done(p.pretrain, "pretrain");
  const StageState st = load_upstream(m, p, true);
  const evalkit::Scores reference =
      evalkit::scores_from_json(json::parse(read_text(p.pretrain / "reference.json")));
  const Datasets ds = make_datasets(m, seed);
  const evalkit::EvalReport rep = evalkit::relative_report(st.model, reference, ds.suites, st.ratio, jobs);
  json j = evalkit::to_json(rep);
  j["seed"] = seed;
  j["method"] = m.prune ? method_name(m.prune->method) : "none";
  j["preset"] = m.recover ? m.recover->preset : "none";
  j["fraction"] = m.recover ? m.recover->fraction : 0.0;
  write_text(p.eval / "eval.json", j.dump(2) + "\n");
  write_text(p.eval / "eval.txt", evalkit::render_table(rep));
  if (m.eval_latency) {
    write_text(p.eval / "efficiency.json", evalkit::to_json(evalkit::efficiency(st.model, {})).dump(2) + "\n");
  }
  write_text(p.eval / kDone, "");
  return p.eval;
}

fs::path run_all(const Manifest& m, std::uint64_t seed, int jobs) {
  cmd_pretrain(m, seed, jobs);
  if (m.prune) cmd_prune(m, seed, jobs);
  if (m.recover) cmd_recover(m, seed, jobs);
  return cmd_eval(m, seed, jobs);
}

// ---- sweep / advise / report ------------------------------------------------

SweepAxis parse_axis(const std::string& s) {
  if (s == "ratio") return SweepAxis::kRatio;
  if (s == "fraction") return SweepAxis::kFraction;
  if (s == "calibration_n") return SweepAxis::kCalibrationN;
  if (s == "preset") return SweepAxis::kPreset;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kRatio: return "ratio";
    case SweepAxis::kFraction: return "fraction";
    case SweepAxis::kCalibrationN: return "calibration_n";
    case SweepAxis::kPreset: return "preset";
  }
  return "ratio";
}

std::vector<SweepRow> cmd_sweep(const Manifest& base, SweepAxis axis, const std::vector<std::string>& values,
                                int jobs) {
  static const char* const kKey[] = {"prune.ratio", "recover.fraction", "prune.calibration_n", "recover.preset"};
  struct Run {
    Manifest m;
    std::string value;
    std::uint64_t seed;
    std::string error;
  };
  std::vector<Run> runs;
  for (const std::string& v : values) {
    Manifest m = base;
    set_key(m, kKey[static_cast<int>(axis)], v);
    m.validate();
    for (std::uint64_t s : base.seeds) runs.push_back({m, v, s, ""});
  }
  // Stages run in waves so that runs sharing an upstream directory never
  // compute it concurrently.
  using StageFn = fs::path (*)(const Manifest&, std::uint64_t, int);
  const std::pair<StageFn, fs::path RunPaths::*> waves[] = {
      {cmd_pretrain, &RunPaths::pretrain}, {cmd_prune, &RunPaths::prune},
      {cmd_recover, &RunPaths::recover},   {cmd_eval, &RunPaths::eval}};
  for (const auto& [fn, member] : waves) {
    std::map<fs::path, std::vector<std::size_t>> by_dir;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (!runs[i].error.empty()) continue;
      const fs::path dir = run_paths(runs[i].m, runs[i].seed).*member;
      if (!dir.empty()) by_dir[dir].push_back(i);
    }
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [dir, idx] : by_dir) groups.push_back(idx);
    std::mutex mu;
    parallel_for(groups.size(), jobs, [&](std::size_t, std::size_t g) {
      const Run& r = runs[groups[g].front()];
      std::string err;
      try {
        fn(r.m, r.seed, 1);
      } catch (const std::exception& e) {
        err = e.what();
      }
      if (!err.empty()) {
        std::lock_guard lock(mu);
        for (std::size_t i : groups[g]) runs[i].error = err;
      }
    });
  }
  std::vector<SweepRow> rows;
  for (const Run& r : runs) {
    if (!r.error.empty()) {
      rows.push_back({r.value, r.seed, "error", 0.0, r.error});
      continue;
    }
    const json j = json::parse(read_text(run_paths(r.m, r.seed).eval / "eval.json"));
    rows.push_back({r.value, r.seed, "avg_rel", j.at("avg_rel").get<double>(), ""});
    rows.push_back({r.value, r.seed, "avg", j.at("avg").get<double>(), ""});
    rows.push_back({r.value, r.seed, "ratio", j.at("ratio").get<double>(), ""});
    rows.push_back({r.value, r.seed, "deg_mm", j.at("modality_split").at("deg_mm").get<double>(), ""});
    rows.push_back({r.value, r.seed, "deg_txt", j.at("modality_split").at("deg_txt").get<double>(), ""});
  }
  return rows;
}

void write_sweep(const std::vector<SweepRow>& rows, SweepAxis axis, std::ostream& os) {
  os << "axis\tvalue\tseed\tmetric\tresult\n";
  for (const SweepRow& r : rows) {
    os << axis_name(axis) << '\t' << r.value << '\t' << r.seed << '\t' << r.metric << '\t';
    if (r.error.empty()) {
      os << fmt_double(r.result);
    } else {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), '\t', ' ');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << "NA\t" << msg;
    }
    os << '\n';
  }
}

Budget parse_budget(const std::string& s) {
  if (s == "none") return Budget::kNone;
  if (s == "projector_only") return Budget::kProjectorOnly;
  if (s == "full") return Budget::kFull;
  throw ConfigError("unknown recovery budget '" + s + "'");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kWidthNoRecovery: return "width_no_recovery";
    case Strategy::kLayerProjectorFt: return "layer_projector_ft";
    case Strategy::kWidthSftL2Full: return "width_sft_l2_full";
  }
  return "";
}

Recommendation cmd_advise(double target_ratio, Budget budget) {
  if (!(target_ratio > 0 && target_ratio < 1)) throw ConfigError("advise: ratio must be in (0, 1)");
  if (budget == Budget::kNone) {
    return {Strategy::kWidthNoRecovery,
            "no recovery budget: widthwise pruning keeps more zero-shot performance than dropping layers"};
  }
  if (target_ratio <= 0.30) {
    return {Strategy::kLayerProjectorFt,
            "moderate compression (<= 0.30) with a recovery budget: drop layers and finetune the projector"};
  }
  return {Strategy::kWidthSftL2Full,
          "high compression (> 0.30) with a recovery budget: widthwise pruning with SFT plus hidden-state "
          "distillation"};
}

std::string cmd_report(const Manifest& m) {
  std::ostringstream os;
  for (std::uint64_t seed : m.seeds) {
    const RunPaths p = run_paths(m, seed);
    os << "seed " << seed << " (" << p.eval.filename().string() << ")\n";
    if (!done(p.eval)) {
      os << "  no eval report\n";
      continue;
    }
    os << read_text(p.eval / "eval.txt");
    if (fs::exists(p.eval / "efficiency.json")) os << read_text(p.eval / "efficiency.json");
  }
  return os.str();
}

}  // namespace prunelab::pipeline
