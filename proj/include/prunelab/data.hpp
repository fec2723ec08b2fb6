#pragma once
// Synthetic attribute-grounded instruction data.
//
// Every image encodes three latent attributes (shape, color, object count)
// through a fixed orthonormal embedding plus bounded noise, so the attributes
// are exactly recoverable and every prompt has a unique correct answer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace prunelab {

enum class TaskTag { kMcq, kYesNo, kFreeform, kTextOnly };
enum class AnswerFormat { kMcq, kYesNo, kFreeform };

struct Attributes {
  int shape = 0;
  int color = 0;
  int count = 0;
  bool operator==(const Attributes&) const = default;
};

struct Triplet {
  std::vector<double> image_features;
  std::vector<int> prompt_tokens;
  std::vector<int> response_tokens;
  TaskTag task_tag = TaskTag::kMcq;
  AnswerFormat format = AnswerFormat::kMcq;
  Attributes attributes;
  bool operator==(const Triplet&) const = default;
};

namespace data {

// Token layout. Ids below 32 are reserved for control and answer tokens.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kOptionA = 3;  // A..D occupy 3..6
inline constexpr int kMaxOptions = 4;
inline constexpr int kYes = 7;
inline constexpr int kNo = 8;
inline constexpr int kAnswer = 9;
inline constexpr int kDescribe = 10;  // text-only attribute description marker
inline constexpr int kAskCount = 11;
inline constexpr int kAskColor = 12;
inline constexpr int kAskShape = 13;
inline constexpr int kAskIs = 14;
inline constexpr int kAskCaption = 15;
inline constexpr int kReserved = 32;
}  // namespace tok

enum class AttributeKind { kCount, kColor, kShape };

struct VocabMap {
  int num_shapes = 4;
  int num_colors = 4;
  int max_count = 4;  // counts 0..max_count
  int count_base = 32;
  int color_base = 40;
  int shape_base = 48;
  int slots_per_attribute = 8;
  int vocab_size = 256;

  int count_token(int c) const { return count_base + c; }
  int color_token(int c) const { return color_base + c; }
  int shape_token(int s) const { return shape_base + s; }
  int domain_size(AttributeKind k) const;
  int value_token(AttributeKind k, int v) const;
  int attribute_value(const Attributes& a, AttributeKind k) const;
};

// Order: mcq, yesno, freeform, text_only.
using TaskMix = std::array<double, 4>;

struct DatasetSpec {
  std::uint64_t seed = 0;
  int size = 512;
  TaskMix task_mix{0.3, 0.3, 0.2, 0.2};
  VocabMap vocab;
  int image_dim = 24;
  double noise = 0.05;

  void validate() const;
};

std::vector<Triplet> generate(const DatasetSpec& spec);

// Image features for `attrs` with explicit noise draws (length image_dim).
std::vector<double> encode_image(const DatasetSpec& spec, const Attributes& attrs,
                                 const std::vector<double>& noise);
// Inverse of the image encoding (nearest one-hot per attribute block).
Attributes decode_image(const DatasetSpec& spec, const std::vector<double>& features);

// Multiple-choice item with explicit option values in display order.
Triplet make_mcq(const DatasetSpec& spec, const Attributes& attrs, AttributeKind kind,
                 const std::vector<int>& option_values);
Triplet make_yesno(const DatasetSpec& spec, const Attributes& attrs, AttributeKind kind,
                   int asked_value);
Triplet make_freeform(const DatasetSpec& spec, const Attributes& attrs);

// The answer an attribute-reading oracle gives for a triplet.
std::vector<int> oracle_response(const DatasetSpec& spec, const Triplet& t);

// Stratified by task tag, sampled without replacement; smaller n give
// prefixes of larger n under the same seed.
std::vector<Triplet> calibration_subset(const std::vector<Triplet>& data, int n,
                                        std::uint64_t seed);

// floor(fraction * size) items; smaller fractions are prefixes of larger ones.
std::vector<Triplet> fraction_subset(const std::vector<Triplet>& data, double fraction,
                                     std::uint64_t seed);

// Zeroes the image, prepends a textual attribute description to the prompt
// and retags as text_only. Idempotent.
Triplet text_only_view(const DatasetSpec& spec, const Triplet& t);

struct Suite {
  std::string name;
  AnswerFormat format = AnswerFormat::kMcq;
  bool text_only = false;
  std::vector<Triplet> items;
};

// Three multimodal suites (mcq, yesno, freeform) followed by their
// text-only counterparts built from the same items.
std::vector<Suite> make_benchmarks(const DatasetSpec& base, int size_per_suite);

// One triplet per line: tag|format|attributes|features|prompt|response.
void dump_dataset(const std::vector<Triplet>& data, std::ostream& os);
std::vector<Triplet> restore_dataset(std::istream& is);

std::string tag_name(TaskTag t);
TaskTag parse_tag(const std::string& s);
std::string format_name(AnswerFormat f);
AnswerFormat parse_format(const std::string& s);

}  // namespace data
}  // namespace prunelab
