#include "prunelab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "prunelab/errors.hpp"
#include "prunelab/rng.hpp"

namespace prunelab::data {
namespace {

constexpr std::uint64_t kWorldSeed = 0x5eedf00dULL;

int num_slots(const VocabMap& v) { return v.num_shapes + v.num_colors + v.max_count + 1; }

// Orthonormal columns (image_dim x slots), shared by every dataset.
const std::vector<double>& world_basis(int image_dim, int slots) {
  static thread_local std::map<std::pair<int, int>, std::vector<double>> cache;
  auto key = std::make_pair(image_dim, slots);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Rng rng(kWorldSeed);
  std::vector<double> basis(static_cast<std::size_t>(image_dim) * slots);
  auto col = [&](int j, int i) -> double& { return basis[static_cast<std::size_t>(i) * slots + j]; };
  for (int j = 0; j < slots; ++j) {
    for (int i = 0; i < image_dim; ++i) col(j, i) = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < 2; ++pass) {
      for (int q = 0; q < j; ++q) {
        double p = 0.0;
        for (int i = 0; i < image_dim; ++i) p += col(j, i) * col(q, i);
        for (int i = 0; i < image_dim; ++i) col(j, i) -= p * col(q, i);
      }
    }
    double nrm = 0.0;
    for (int i = 0; i < image_dim; ++i) nrm += col(j, i) * col(j, i);
    nrm = std::sqrt(nrm);
    for (int i = 0; i < image_dim; ++i) col(j, i) /= nrm;
  }
  return cache.emplace(key, std::move(basis)).first->second;
}

std::vector<int> slot_offsets(const VocabMap& v) {
  return {0, v.num_shapes, v.num_shapes + v.num_colors};
}

AttributeKind pick_kind(Rng& rng) { return static_cast<AttributeKind>(rng.below(3)); }

Attributes random_attributes(const VocabMap& v, Rng& rng) {
  Attributes a;
  a.shape = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.num_shapes)));
  a.color = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.num_colors)));
  a.count = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.max_count + 1)));
  return a;
}

std::vector<double> random_noise(const DatasetSpec& spec, Rng& rng) {
  std::vector<double> n(static_cast<std::size_t>(spec.image_dim));
  for (double& x : n) x = rng.uniform(-spec.noise, spec.noise);
  return n;
}

int ask_token(AttributeKind k) {
  switch (k) {
    case AttributeKind::kCount: return tok::kAskCount;
    case AttributeKind::kColor: return tok::kAskColor;
    case AttributeKind::kShape: return tok::kAskShape;
  }
  return tok::kAskCount;
}

Triplet random_item(const DatasetSpec& spec, AnswerFormat format, Rng& rng) {
  const VocabMap& v = spec.vocab;
  const Attributes attrs = random_attributes(v, rng);
  const AttributeKind kind = pick_kind(rng);
  Triplet t;
  switch (format) {
    case AnswerFormat::kMcq: {
      const int domain = v.domain_size(kind);
      const int correct = v.attribute_value(attrs, kind);
      std::vector<int> others;
      for (int x = 0; x < domain; ++x) {
        if (x != correct) others.push_back(x);
      }
      rng.shuffle(others);
      std::vector<int> options{correct};
      for (int i = 0; i < tok::kMaxOptions - 1 && i < static_cast<int>(others.size()); ++i) {
        options.push_back(others[static_cast<std::size_t>(i)]);
      }
      rng.shuffle(options);
      t = make_mcq(spec, attrs, kind, options);
      break;
    }
    case AnswerFormat::kYesNo: {
      const int correct = v.attribute_value(attrs, kind);
      int asked = correct;
      if (rng.uniform() < 0.5) {
        const int domain = v.domain_size(kind);
        asked = (correct + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(domain - 1)))) % domain;
      }
      t = make_yesno(spec, attrs, kind, asked);
      break;
    }
    case AnswerFormat::kFreeform: t = make_freeform(spec, attrs); break;
  }
  t.image_features = encode_image(spec, attrs, random_noise(spec, rng));
  return t;
}

}  // namespace

int VocabMap::domain_size(AttributeKind k) const {
  switch (k) {
    case AttributeKind::kCount: return max_count + 1;
    case AttributeKind::kColor: return num_colors;
    case AttributeKind::kShape: return num_shapes;
  }
  return 0;
}

int VocabMap::value_token(AttributeKind k, int v) const {
  switch (k) {
    case AttributeKind::kCount: return count_token(v);
    case AttributeKind::kColor: return color_token(v);
    case AttributeKind::kShape: return shape_token(v);
  }
  return tok::kPad;
}

int VocabMap::attribute_value(const Attributes& a, AttributeKind k) const {
  switch (k) {
    case AttributeKind::kCount: return a.count;
    case AttributeKind::kColor: return a.color;
    case AttributeKind::kShape: return a.shape;
  }
  return 0;
}

void DatasetSpec::validate() const {
  if (size < 1) throw ConfigError("dataset size must be >= 1");
  const double total = std::accumulate(task_mix.begin(), task_mix.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("task mix proportions must sum to 1");
  for (double p : task_mix) {
    if (p < 0.0) throw ConfigError("task mix proportions must be nonnegative");
  }
  const VocabMap& v = vocab;
  if (v.num_shapes < 2 || v.num_colors < 2 || v.max_count < 1) {
    throw ConfigError("attribute domains need at least two values");
  }
  if (v.num_shapes > v.slots_per_attribute || v.num_colors > v.slots_per_attribute ||
      v.max_count + 1 > v.slots_per_attribute) {
    throw VocabularyError("attribute classes exceed the reserved token range");
  }
  if (v.count_base < tok::kReserved || v.color_base < v.count_base + v.slots_per_attribute ||
      v.shape_base < v.color_base + v.slots_per_attribute ||
      v.shape_base + v.slots_per_attribute > v.vocab_size) {
    throw VocabularyError("attribute token ranges overlap or exceed the vocabulary");
  }
  if (image_dim < num_slots(v)) throw ConfigError("image_dim too small to encode attributes");
  if (noise < 0.0 || noise * std::sqrt(static_cast<double>(image_dim)) >= 0.5) {
    throw ConfigError("image noise too large for exact attribute recovery");
  }
}

std::vector<double> encode_image(const DatasetSpec& spec, const Attributes& attrs,
                                 const std::vector<double>& noise) {
  const int slots = num_slots(spec.vocab);
  const auto& basis = world_basis(spec.image_dim, slots);
  const auto off = slot_offsets(spec.vocab);
  const int hot[3] = {off[0] + attrs.shape, off[1] + attrs.color, off[2] + attrs.count};
  std::vector<double> f(static_cast<std::size_t>(spec.image_dim), 0.0);
  for (int i = 0; i < spec.image_dim; ++i) {
    double s = noise.empty() ? 0.0 : noise[static_cast<std::size_t>(i)];
    for (int h : hot) s += basis[static_cast<std::size_t>(i) * slots + h];
    f[static_cast<std::size_t>(i)] = s;
  }
  return f;
}

Attributes decode_image(const DatasetSpec& spec, const std::vector<double>& features) {
  const int slots = num_slots(spec.vocab);
  const auto& basis = world_basis(spec.image_dim, slots);
  std::vector<double> proj(static_cast<std::size_t>(slots), 0.0);
  for (int j = 0; j < slots; ++j) {
    for (int i = 0; i < spec.image_dim; ++i) {
      proj[static_cast<std::size_t>(j)] += basis[static_cast<std::size_t>(i) * slots + j] * features[static_cast<std::size_t>(i)];
    }
  }
  const auto off = slot_offsets(spec.vocab);
  auto argmax = [&](int start, int n) {
    return static_cast<int>(std::max_element(proj.begin() + start, proj.begin() + start + n) -
                            (proj.begin() + start));
  };
  Attributes a;
  a.shape = argmax(off[0], spec.vocab.num_shapes);
  a.color = argmax(off[1], spec.vocab.num_colors);
  a.count = argmax(off[2], spec.vocab.max_count + 1);
  return a;
}

Triplet make_mcq(const DatasetSpec& spec, const Attributes& attrs, AttributeKind kind,
                 const std::vector<int>& option_values) {
  const VocabMap& v = spec.vocab;
  if (option_values.empty() || option_values.size() > static_cast<std::size_t>(tok::kMaxOptions)) {
    throw ConfigError("mcq needs 1..4 options");
  }
  const int correct = v.attribute_value(attrs, kind);
  Triplet t;
  t.task_tag = TaskTag::kMcq;
  t.format = AnswerFormat::kMcq;
  t.attributes = attrs;
  t.image_features = encode_image(spec, attrs, {});
  t.prompt_tokens = {tok::kBos, ask_token(kind)};
  int answer = -1;
  for (std::size_t i = 0; i < option_values.size(); ++i) {
    t.prompt_tokens.push_back(tok::kOptionA + static_cast<int>(i));
    t.prompt_tokens.push_back(v.value_token(kind, option_values[i]));
    if (option_values[i] == correct) answer = tok::kOptionA + static_cast<int>(i);
  }
  if (answer < 0) throw ConfigError("mcq options do not contain the correct value");
  t.prompt_tokens.push_back(tok::kAnswer);
  t.response_tokens = {answer, tok::kEos};
  return t;
}

Triplet make_yesno(const DatasetSpec& spec, const Attributes& attrs, AttributeKind kind,
                   int asked_value) {
  const VocabMap& v = spec.vocab;
  Triplet t;
  t.task_tag = TaskTag::kYesNo;
  t.format = AnswerFormat::kYesNo;
  t.attributes = attrs;
  t.image_features = encode_image(spec, attrs, {});
  t.prompt_tokens = {tok::kBos, tok::kAskIs, ask_token(kind), v.value_token(kind, asked_value),
                     tok::kAnswer};
  const bool yes = v.attribute_value(attrs, kind) == asked_value;
  t.response_tokens = {yes ? tok::kYes : tok::kNo, tok::kEos};
  return t;
}

Triplet make_freeform(const DatasetSpec& spec, const Attributes& attrs) {
  const VocabMap& v = spec.vocab;
  Triplet t;
  t.task_tag = TaskTag::kFreeform;
  t.format = AnswerFormat::kFreeform;
  t.attributes = attrs;
  t.image_features = encode_image(spec, attrs, {});
  t.prompt_tokens = {tok::kBos, tok::kAskCaption, tok::kAnswer};
  t.response_tokens = {v.count_token(attrs.count), v.color_token(attrs.color),
                       v.shape_token(attrs.shape), tok::kEos};
  return t;
}

std::vector<int> oracle_response(const DatasetSpec& spec, const Triplet& t) {
  const VocabMap& v = spec.vocab;
  const Attributes& a = t.attributes;
  // Skip the description block of text-only prompts.
  std::size_t q = 1;
  if (t.prompt_tokens.size() > 1 && t.prompt_tokens[1] == tok::kDescribe) q = 5;
  switch (t.format) {
    case AnswerFormat::kFreeform:
      return {v.count_token(a.count), v.color_token(a.color), v.shape_token(a.shape), tok::kEos};
    case AnswerFormat::kYesNo: {
      const int kind_tok = t.prompt_tokens[q + 1];
      const auto kind = static_cast<AttributeKind>(kind_tok - tok::kAskCount);
      const bool yes = v.value_token(kind, v.attribute_value(a, kind)) == t.prompt_tokens[q + 2];
      return {yes ? tok::kYes : tok::kNo, tok::kEos};
    }
    case AnswerFormat::kMcq: {
      const auto kind = static_cast<AttributeKind>(t.prompt_tokens[q] - tok::kAskCount);
      const int want = v.value_token(kind, v.attribute_value(a, kind));
      for (std::size_t i = q + 1; i + 1 < t.prompt_tokens.size(); i += 2) {
        if (t.prompt_tokens[i + 1] == want) return {t.prompt_tokens[i], tok::kEos};
      }
      return {tok::kPad, tok::kEos};
    }
  }
  return {};
}

std::vector<Triplet> generate(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(spec.size));
  for (int i = 0; i < spec.size; ++i) {
    const double u = rng.uniform();
    double acc = 0.0;
    int tag = 3;
    for (int k = 0; k < 4; ++k) {
      acc += spec.task_mix[static_cast<std::size_t>(k)];
      if (u < acc && spec.task_mix[static_cast<std::size_t>(k)] > 0.0) {
        tag = k;
        break;
      }
    }
    while (spec.task_mix[static_cast<std::size_t>(tag)] <= 0.0) --tag;
    if (tag == 3) {
      const auto fmt = static_cast<AnswerFormat>(rng.below(3));
      out.push_back(text_only_view(spec, random_item(spec, fmt, rng)));
    } else {
      out.push_back(random_item(spec, static_cast<AnswerFormat>(tag), rng));
    }
  }
  return out;
}

std::vector<Triplet> calibration_subset(const std::vector<Triplet>& data, int n,
                                        std::uint64_t seed) {
  if (n < 1 || static_cast<std::size_t>(n) > data.size()) {
    throw ConfigError("calibration size " + std::to_string(n) + " outside [1, " +
                      std::to_string(data.size()) + "]");
  }
  std::array<std::vector<std::size_t>, 4> strata;
  for (std::size_t i = 0; i < data.size(); ++i) {
    strata[static_cast<std::size_t>(data[i].task_tag)].push_back(i);
  }
  Rng rng(mix_seed(seed, 0xca11b));
  for (auto& s : strata) rng.shuffle(s);
  std::vector<std::size_t> order;
  order.reserve(data.size());
  for (std::size_t round = 0; order.size() < data.size(); ++round) {
    for (auto& s : strata) {
      if (round < s.size()) order.push_back(s[round]);
    }
  }
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(data[order[static_cast<std::size_t>(i)]]);
  return out;
}

std::vector<Triplet> fraction_subset(const std::vector<Triplet>& data, double fraction,
                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("data fraction must lie in (0, 1]");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xf7ac));
  rng.shuffle(order);
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size()) + 1e-9));
  std::vector<Triplet> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(data[order[i]]);
  return out;
}

Triplet text_only_view(const DatasetSpec& spec, const Triplet& t) {
  if (t.task_tag == TaskTag::kTextOnly) return t;
  const VocabMap& v = spec.vocab;
  Triplet out = t;
  out.task_tag = TaskTag::kTextOnly;
  std::fill(out.image_features.begin(), out.image_features.end(), 0.0);
  out.prompt_tokens = {tok::kBos, tok::kDescribe, v.count_token(t.attributes.count),
                       v.color_token(t.attributes.color), v.shape_token(t.attributes.shape)};
  out.prompt_tokens.insert(out.prompt_tokens.end(), t.prompt_tokens.begin() + 1, t.prompt_tokens.end());
  return out;
}

std::vector<Suite> make_benchmarks(const DatasetSpec& base, int size_per_suite) {
  std::vector<Suite> suites;
  const std::array<std::pair<const char*, AnswerFormat>, 3> kinds{
      {{"mcq", AnswerFormat::kMcq}, {"yesno", AnswerFormat::kYesNo}, {"freeform", AnswerFormat::kFreeform}}};
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    DatasetSpec s = base;
    s.seed = mix_seed(base.seed, 0xbe00 + k);
    s.size = size_per_suite;
    s.task_mix = {0.0, 0.0, 0.0, 0.0};
    s.task_mix[k] = 1.0;
    suites.push_back({kinds[k].first, kinds[k].second, false, generate(s)});
  }
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    Suite txt{std::string(kinds[k].first) + "_txt", kinds[k].second, true, {}};
    for (const Triplet& t : suites[k].items) txt.items.push_back(text_only_view(base, t));
    suites.push_back(std::move(txt));
  }
  return suites;
}

std::string tag_name(TaskTag t) {
  switch (t) {
    case TaskTag::kMcq: return "mcq";
    case TaskTag::kYesNo: return "yesno";
    case TaskTag::kFreeform: return "freeform";
    case TaskTag::kTextOnly: return "text_only";
  }
  return "?";
}

TaskTag parse_tag(const std::string& s) {
  if (s == "mcq") return TaskTag::kMcq;
  if (s == "yesno") return TaskTag::kYesNo;
  if (s == "freeform") return TaskTag::kFreeform;
  if (s == "text_only") return TaskTag::kTextOnly;
  throw ConfigError("unknown task tag '" + s + "'");
}

std::string format_name(AnswerFormat f) {
  switch (f) {
    case AnswerFormat::kMcq: return "mcq";
    case AnswerFormat::kYesNo: return "yesno";
    case AnswerFormat::kFreeform: return "freeform";
  }
  return "?";
}

AnswerFormat parse_format(const std::string& s) {
  if (s == "mcq") return AnswerFormat::kMcq;
  if (s == "yesno") return AnswerFormat::kYesNo;
  if (s == "freeform") return AnswerFormat::kFreeform;
  throw ConfigError("unknown answer format '" + s + "'");
}

namespace {

template <typename T>
void write_list(std::ostream& os, const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    if constexpr (std::is_floating_point_v<T>) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      os << buf;
    } else {
      os << v[i];
    }
  }
}

template <typename T>
std::vector<T> read_list(const std::string& field) {
  std::vector<T> out;
  std::istringstream is(field);
  std::string w;
  while (is >> w) {
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(std::strtod(w.c_str(), nullptr));
    } else {
      out.push_back(static_cast<T>(std::stol(w)));
    }
  }
  return out;
}

}  // namespace

void dump_dataset(const std::vector<Triplet>& data, std::ostream& os) {
  for (const Triplet& t : data) {
    os << tag_name(t.task_tag) << '|' << format_name(t.format) << '|' << t.attributes.shape << ' '
       << t.attributes.color << ' ' << t.attributes.count << '|';
    write_list(os, t.image_features);
    os << '|';
    write_list(os, t.prompt_tokens);
    os << '|';
    write_list(os, t.response_tokens);
    os << '\n';
  }
}

std::vector<Triplet> restore_dataset(std::istream& is) {
  std::vector<Triplet> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t p; (p = line.find('|', start)) != std::string::npos; start = p + 1) {
      fields.push_back(line.substr(start, p - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 6) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": expected 6 fields");
    }
    Triplet t;
    t.task_tag = parse_tag(fields[0]);
    t.format = parse_format(fields[1]);
    const auto attrs = read_list<int>(fields[2]);
    if (attrs.size() != 3) throw ConfigError("dataset line " + std::to_string(lineno) + ": bad attributes");
    t.attributes = {attrs[0], attrs[1], attrs[2]};
    t.image_features = read_list<double>(fields[3]);
    t.prompt_tokens = read_list<int>(fields[4]);
    t.response_tokens = read_list<int>(fields[5]);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace prunelab::data
