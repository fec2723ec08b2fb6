#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "prunelab/errors.hpp"
#include "prunelab/evalkit.hpp"
#include "prunelab/layerprune.hpp"

namespace ek = prunelab::evalkit;
namespace dt = prunelab::data;
namespace md = prunelab::model;

namespace {

// Emits the oracle answer token given how much of it has been produced.
class OraclePredictor : public ek::Predictor {
 public:
  explicit OraclePredictor(dt::DatasetSpec spec) : spec_(std::move(spec)) {}
  std::vector<double> next_logits(const prunelab::Triplet& item, std::span<const int> tokens) override {
    const auto answer = dt::oracle_response(spec_, item);
    const std::size_t k = tokens.size() - item.prompt_tokens.size();
    std::vector<double> l(256, 0.0);
    l[static_cast<std::size_t>(k < answer.size() ? answer[k] : dt::tok::kEos)] = 1.0;
    return l;
  }

 private:
  dt::DatasetSpec spec_;
};

class RandomPredictor : public ek::Predictor {
 public:
  explicit RandomPredictor(std::uint64_t seed) : rng_(seed) {}
  std::vector<double> next_logits(const prunelab::Triplet&, std::span<const int>) override {
    std::vector<double> l(256);
    for (double& x : l) x = rng_.uniform();
    return l;
  }

 private:
  prunelab::Rng rng_;
};

dt::DatasetSpec base_spec() {
  dt::DatasetSpec s;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_CASE("an oracle predictor scores 1 on every suite") {
  OraclePredictor p(base_spec());
  for (const auto& suite : dt::make_benchmarks(base_spec(), 40)) {
    CAPTURE(suite.name);
    CHECK(ek::score_benchmark(p, suite) == 1.0);
  }
}

TEST_CASE("random guessing on 4-option mcq stays inside the binomial bound") {
  auto suites = dt::make_benchmarks(base_spec(), 512);
  RandomPredictor p(3);
  const double s = ek::score_benchmark(p, suites[0]);
  CHECK(std::fabs(s - 0.25) <= 3 * std::sqrt(0.25 * 0.75 / 512));
}

TEST_CASE("token f1") {
  const std::vector<int> ref{33, 41, 50, 2};
  CHECK(ek::token_f1(ref, ref) == 1.0);
  CHECK(ek::token_f1(std::vector<int>{33, 2}, ref) == doctest::Approx(0.5));
  CHECK(ek::token_f1(std::vector<int>{7}, ref) == 0.0);
  CHECK(ek::token_f1(std::vector<int>{2}, std::vector<int>{2}) == 1.0);
  CHECK(ek::token_f1(std::vector<int>{33, 33, 41}, std::vector<int>{33, 41, 41}) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("greedy decoding stops at eos and respects the budget") {
  OraclePredictor p(base_spec());
  auto f = dt::make_freeform(base_spec(), {1, 2, 3});
  CHECK(ek::greedy_decode(p, f) == f.response_tokens);
  CHECK(ek::greedy_decode(p, f, 2).size() == 2);
  CHECK(ek::greedy_decode(p, f, 16, int(f.prompt_tokens.size()) + 1).size() == 1);
}

TEST_CASE("relative report arithmetic") {
  auto suites = dt::make_benchmarks(base_spec(), 4);
  suites.resize(4);
  ek::Scores ref{{"mcq", 0.8}, {"yesno", 0.6}, {"freeform", 0.5}, {"mcq_txt", 0.9}};
  auto same = ek::relative_report(ref, ref, suites, 0.0);
  CHECK(same.avg_rel == 1.0);
  auto half = ref;
  half["yesno"] = 0.3;
  auto r = ek::relative_report(half, ref, suites, 0.3);
  CHECK(r.avg_rel == doctest::Approx(0.875).epsilon(1e-15));
  CHECK(r.relative.at("yesno") == doctest::Approx(0.5));
  CHECK(r.ratio == 0.3);
  CHECK(r.modality.deg_txt == 0.0);
  CHECK(r.modality.deg_mm == doctest::Approx(1.0 - (0.8 + 0.3 + 0.5) / (0.8 + 0.6 + 0.5)));
  auto missing = ref;
  missing.erase("mcq");
  CHECK_THROWS_AS(ek::relative_report(ref, missing, suites), prunelab::MissingArtifactError);
  ek::Scores zero{{"mcq", 0.0}};
  CHECK(ek::relative_report(zero, zero, {}).avg_rel == 1.0);
}

TEST_CASE("zeroing the projector damages only multimodal suites") {
  auto m = testing::random_model(testing::small_config(2));
  auto suites = dt::make_benchmarks(base_spec(), 12);
  auto ref = ek::score_suites(m, suites);
  auto broken = m.clone();
  for (auto* a : {&broken.projector.w2, &broken.projector.b2})
    for (double& x : a->mutable_data()) x = 0.0;
  auto split = ek::modality_split(ek::score_suites(broken, suites), suites, ref);
  CHECK(split.deg_txt == 0.0);
  auto self = ek::relative_report(m, ref, suites, 0.0, 2);
  CHECK(self.avg_rel == 1.0);
  CHECK(self.modality.deg_mm == 0.0);
}

TEST_CASE("model scoring is deterministic and thread-count invariant") {
  auto m = testing::random_model(testing::small_config(2));
  auto suites = dt::make_benchmarks(base_spec(), 10);
  CHECK(ek::score_suites(m, suites, 1) == ek::score_suites(m, suites, 4));
}

TEST_CASE("flops formula equals twice the traced multiply-adds per token") {
  for (auto cfg : {testing::small_config(), testing::wide_config(), md::ModelConfig{}}) {
    auto m = md::init_model(cfg);
    for (int t : {8, 32}) {
      const double traced = 2.0 * double(ek::traced_macs(m, t)) / t;
      CHECK(std::fabs(ek::flops_per_token(m, t) - traced) <= 0.01 * traced);
    }
  }
}

TEST_CASE("dropping a layer removes exactly its flops term") {
  auto m = md::init_model(testing::wide_config());
  prunelab::PruningPlan p;
  p.layers = {1};
  auto s = prunelab::layerprune::apply_layer_plan(m, p);
  const double d = 16, t = 128;
  const double term = 2 * (4 * d * 2 * 8 + 2 * t * 2 * 8 + 3 * d * 48);
  CHECK(ek::flops_per_token(m, 128) - ek::flops_per_token(s, 128) == doctest::Approx(term));
}

TEST_CASE("efficiency report and json") {
  auto m = md::init_model(testing::small_config());
  auto e = ek::efficiency(m, {32, 3, 1});
  CHECK(e.param_llm == md::param_count(m, md::ParamScope::kLlmOnly));
  CHECK(e.repetitions == 3);
  CHECK(e.latency_ms_mean > 0);
  CHECK(ek::efficiency(m, {32, 3, 1}, false).latency_ms_mean == 0.0);
  CHECK_THROWS_AS(ek::workload_tokens(m, 500), prunelab::ConfigError);
  ek::Scores sc{{"mcq", 0.5}};
  auto r = ek::relative_report(sc, sc, {});
  auto j = ek::to_json(r);
  CHECK(j["avg_rel"].get<double>() == 1.0);
  CHECK(ek::scores_from_json(nlohmann::json::parse(j.dump())) == sc);
  CHECK(ek::render_table(r).find("AVG") != std::string::npos);
}
