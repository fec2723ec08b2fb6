#include <cmath>
#include <limits>

#include "doctest.h"
#include "gradcases.hpp"
#include "prunelab/errors.hpp"

namespace nd = prunelab::ndgrad;
using nd::Array;

TEST_CASE("every primitive passes a finite-difference check") {
  prunelab::Rng pick(5);
  for (auto& c : testing::primitive_cases(11)) {
    CAPTURE(c.name);
    const auto res = testing::gradcheck(c.f, c.inputs, pick, 8);
    CHECK(res.coords > 0);
    CHECK(res.max_rel < 1e-6);
  }
}

TEST_CASE("matmul values") {
  Array a = Array::from_rows({{1, 2}, {3, 4}});
  Array b = Array::from_rows({{5, 6}, {7, 8}});
  Array c = nd::matmul(a, b);
  CHECK(c.at(0, 0) == 19);
  CHECK(c.at(0, 1) == 22);
  CHECK(c.at(1, 0) == 43);
  CHECK(c.at(1, 1) == 50);
}

TEST_CASE("softmax rows sum to one and mask_future blocks the upper triangle") {
  prunelab::Rng rng(2);
  Array s = nd::softmax_lastdim(nd::mask_future(testing::random_array(rng, {4, 4}, -3, 3, false)));
  for (std::size_t r = 0; r < 4; ++r) {
    double t = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      t += s.at(r, c);
      if (c > r) CHECK(s.at(r, c) == 0.0);
    }
    CHECK(t == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("log_softmax is stable for large logits") {
  Array a = Array::from_rows({{1000.0, 0.0, -1000.0}});
  Array l = nd::log_softmax_lastdim(a);
  CHECK(std::isfinite(l.at(0, 2)));
  CHECK(l.at(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("cross entropy of uniform logits is log V") {
  Array logits = Array::zeros({2, 256});
  const std::vector<int> t{5, 200};
  Array ce = nd::cross_entropy_rowwise(logits, t);
  CHECK(ce.data()[0] == doctest::Approx(std::log(256.0)).epsilon(1e-14));
}

TEST_CASE("shape and vocabulary errors") {
  Array a = Array::zeros({2, 3});
  CHECK_THROWS_AS(nd::matmul(a, a), prunelab::ShapeError);
  CHECK_THROWS_AS(nd::add(a, Array::zeros({3, 2})), prunelab::ShapeError);
  CHECK_THROWS_AS(nd::slice_rows(a, 1, 2), prunelab::ShapeError);
  CHECK_THROWS_AS(Array({2, 2}, {1.0}), prunelab::ShapeError);
  CHECK_THROWS_AS(Array({1, 1, 1}, {1.0}), prunelab::ShapeError);
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(nd::cross_entropy_rowwise(Array::zeros({1, 3}), bad), prunelab::VocabularyError);
  CHECK_THROWS_AS(nd::embedding_lookup(Array::zeros({3, 2}), bad), prunelab::VocabularyError);
  CHECK_THROWS_AS(a.item(), prunelab::ShapeError);
}

TEST_CASE("backward requires a scalar loss and a non-empty tape") {
  Array x = Array::scalar(2.0, true);
  nd::Tape tape;
  nd::TapeScope scope(tape);
  CHECK_THROWS_AS(tape.backward(x), prunelab::Error);
  Array y = nd::mul(x, x);
  Array v = nd::scale(Array({2}, {1.0, 2.0}, true), 2.0);
  CHECK_THROWS_AS(tape.backward(v), prunelab::ShapeError);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("leaf gradients accumulate across backward passes") {
  Array x = Array::scalar(3.0, true);
  for (int i = 0; i < 2; ++i) {
    nd::Tape tape;
    nd::TapeScope scope(tape);
    tape.backward(nd::mul(x, x));
  }
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  CHECK(!x.has_grad());
}

TEST_CASE("no tape records nothing and NoGradScope suspends recording") {
  Array x = Array::scalar(3.0, true);
  nd::Tape tape;
  {
    nd::TapeScope scope(tape);
    {
      nd::NoGradScope off;
      CHECK(nd::active_tape() == nullptr);
      nd::mul(x, x);
    }
    CHECK(tape.empty());
    CHECK(nd::active_tape() == &tape);
    nd::mul(x, x);
    CHECK(tape.size() == 1);
    // Constants alone are not recorded.
    nd::mul(Array::scalar(1.0), Array::scalar(2.0));
    CHECK(tape.size() == 1);
  }
  CHECK(nd::active_tape() == nullptr);
}

TEST_CASE("clone and detach copy data") {
  Array x = Array::from_rows({{1, 2}}, true);
  Array c = x.clone();
  Array d = x.detach();
  c.mutable_data()[0] = 9;
  CHECK(x.data()[0] == 1);
  CHECK(c.requires_grad());
  CHECK(!d.requires_grad());
  CHECK(!c.same_node(x));
}

TEST_CASE("mac counter counts matmul multiply-adds") {
  Array a = Array::zeros({3, 4}), b = Array::zeros({4, 5});
  nd::MacCounter mc;
  nd::matmul(a, b);
  CHECK(mc.count() == 60);
}
