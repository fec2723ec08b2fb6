#pragma once
// One scalar-valued probe per autograd primitive, shared by the unit tests
// and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "support.hpp"

namespace testing {

struct GradCase {
  std::string name;
  std::function<Array(const std::vector<Array>&)> f;
  std::vector<Array> inputs;
};

inline std::vector<GradCase> primitive_cases(std::uint64_t seed) {
  namespace nd = prunelab::ndgrad;
  prunelab::Rng rng(seed);
  auto r = [&](nd::Shape s) { return random_array(rng, std::move(s)); };
  std::vector<GradCase> cs;
  cs.push_back({"matmul", [](const auto& x) { return weighted_sum(nd::matmul(x[0], x[1])); },
                {r({4, 5}), r({5, 3})}});
  cs.push_back({"transpose", [](const auto& x) { return weighted_sum(nd::transpose(x[0])); },
                {r({3, 4})}});
  cs.push_back({"add", [](const auto& x) { return weighted_sum(nd::add(x[0], x[1])); },
                {r({3, 4}), r({3, 4})}});
  cs.push_back({"add_bias", [](const auto& x) { return weighted_sum(nd::add(x[0], x[1])); },
                {r({3, 4}), r({4})}});
  cs.push_back({"sub", [](const auto& x) { return weighted_sum(nd::sub(x[0], x[1])); },
                {r({3, 4}), r({3, 4})}});
  cs.push_back({"mul", [](const auto& x) { return weighted_sum(nd::mul(x[0], x[1])); },
                {r({3, 4}), r({3, 4})}});
  cs.push_back({"scale", [](const auto& x) { return weighted_sum(nd::scale(x[0], -1.7)); },
                {r({2, 5})}});
  cs.push_back({"softmax", [](const auto& x) { return weighted_sum(nd::softmax_lastdim(x[0])); },
                {r({3, 6})}});
  cs.push_back({"log_softmax",
                [](const auto& x) { return weighted_sum(nd::log_softmax_lastdim(x[0])); },
                {r({3, 6})}});
  cs.push_back({"gelu", [](const auto& x) { return weighted_sum(nd::gelu(x[0])); },
                {random_array(rng, {3, 5}, -3.0, 3.0)}});
  cs.push_back({"silu", [](const auto& x) { return weighted_sum(nd::silu(x[0])); },
                {random_array(rng, {3, 5}, -3.0, 3.0)}});
  cs.push_back({"layernorm",
                [](const auto& x) { return weighted_sum(nd::layernorm(x[0], x[1], x[2])); },
                {r({4, 6}), random_array(rng, {6}, 0.5, 1.5), r({6})}});
  cs.push_back({"embedding_lookup",
                [](const auto& x) {
                  const std::vector<int> ids{3, 0, 3, 5, 1};
                  return weighted_sum(nd::embedding_lookup(x[0], ids));
                },
                {r({6, 4})}});
  cs.push_back({"concat_rows",
                [](const auto& x) { return weighted_sum(nd::concat_rows({x[0], x[1], x[0]})); },
                {r({2, 3}), r({4, 3})}});
  cs.push_back({"slice_rows", [](const auto& x) { return weighted_sum(nd::slice_rows(x[0], 1, 3)); },
                {r({5, 3})}});
  cs.push_back({"select_rows",
                [](const auto& x) {
                  const std::vector<std::size_t> rows{4, 0, 4, 2};
                  return weighted_sum(nd::select_rows(x[0], rows));
                },
                {r({5, 3})}});
  cs.push_back({"concat_cols",
                [](const auto& x) { return weighted_sum(nd::concat_cols({x[0], x[1]})); },
                {r({3, 2}), r({3, 5})}});
  cs.push_back({"slice_cols", [](const auto& x) { return weighted_sum(nd::slice_cols(x[0], 2, 3)); },
                {r({3, 6})}});
  cs.push_back({"reshape", [](const auto& x) { return weighted_sum(nd::reshape(x[0], {2, 6})); },
                {r({3, 4})}});
  cs.push_back({"mask_future",
                [](const auto& x) { return weighted_sum(nd::softmax_lastdim(nd::mask_future(x[0]))); },
                {r({4, 4})}});
  cs.push_back({"cross_entropy_rowwise",
                [](const auto& x) {
                  const std::vector<int> t{2, 0, 5};
                  return weighted_sum(nd::cross_entropy_rowwise(x[0], t));
                },
                {r({3, 6})}});
  cs.push_back({"sum", [](const auto& x) { return nd::sum(nd::mul(x[0], x[0])); }, {r({3, 3})}});
  cs.push_back({"mean", [](const auto& x) { return nd::mean(nd::mul(x[0], x[0])); }, {r({7})}});
  return cs;
}

}  // namespace testing
