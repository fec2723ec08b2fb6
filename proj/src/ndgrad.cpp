#include "prunelab/ndgrad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "prunelab/errors.hpp"
#include "prunelab/kernels.hpp"

namespace prunelab::ndgrad {
namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t* g_mac_counter = nullptr;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(const char* op, const Shape& a) {
  std::ostringstream os;
  os << op << ": unsupported shape " << shape_str(a);
  throw ShapeError(os.str());
}

void require_matrix(const char* op, const Array& a) {
  if (a.rank() != 2) shape_fail(op, a.shape());
}

std::vector<double>& ensure_grad(Node* n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
  return n->grad;
}

bool needs_tape(std::initializer_list<const Array*> inputs) {
  if (!g_active_tape) return false;
  for (const Array* a : inputs) {
    if (a->requires_grad()) return true;
  }
  return false;
}

}  // namespace

Array make_result(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->leaf = !requires_grad;
  return Array(std::move(node));
}

namespace {

// Records `rule` so that it runs during backward. The rule reads the output
// gradient and accumulates into each input that requires one.
void record(const std::vector<Array>& inputs, const Array& out, std::function<void()> rule) {
  Tape::Entry e;
  e.inputs.reserve(inputs.size());
  for (const Array& in : inputs) e.inputs.push_back(in.node());
  e.output = out.node();
  e.backward = std::move(rule);
  g_active_tape->record(std::move(e));
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Array::Array(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.size() > 2) throw ShapeError("Array: rank > 2 unsupported " + shape_str(shape));
  if (shape_size(shape) != data.size()) {
    throw ShapeError("Array: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->leaf = true;
}

Array Array::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Array(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Array Array::scalar(double v, bool requires_grad) { return Array({}, {v}, requires_grad); }

Array Array::from_rows(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows[0].size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data), requires_grad);
}

std::size_t Array::rows() const {
  if (rank() == 2) return shape()[0];
  return 1;
}

std::size_t Array::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  return 1;
}

double Array::item() const {
  if (size() != 1) throw ShapeError("item: array is not a scalar " + shape_str(shape()));
  return node_->data[0];
}

std::vector<double> Array::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

std::span<double> Array::mutable_grad() { return ensure_grad(node_.get()); }

Array Array::clone() const {
  return Array(node_->shape, node_->data, node_->requires_grad);
}

Array Array::detach() const { return Array(node_->shape, node_->data, false); }

// ---- tape -----------------------------------------------------------------

void Tape::backward(const Array& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (entries_.empty()) throw Error("backward: tape is empty");
  for (Entry& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
  ensure_grad(loss.node().get())[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Array& loss) {
  if (!g_active_tape) throw Error("backward: no active tape");
  g_active_tape->backward(loss);
}

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = &count_; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }
std::uint64_t MacCounter::count() const { return count_; }

// ---- primitives -------------------------------------------------------------

Array matmul(const Array& a, const Array& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_fail("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  if (g_mac_counter) *g_mac_counter += static_cast<std::uint64_t>(m) * k * n;
  const bool rg = needs_tape({&a, &b});
  Array r = make_result({m, n}, std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    Node* rn = r.node().get();
    record({a, b}, r, [an, bn, rn, m, k, n] {
      if (an->requires_grad) {
        kernels::gemm_nt(m, n, k, rn->grad.data(), bn->data.data(), ensure_grad(an).data());
      }
      if (bn->requires_grad) {
        kernels::gemm_tn(k, m, n, an->data.data(), rn->grad.data(), ensure_grad(bn).data());
      }
    });
  }
  return r;
}

Array transpose(const Array& a) {
  require_matrix("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  }
  const bool rg = needs_tape({&a});
  Array r = make_result({n, m}, std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, m, n] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += rn->grad[j * m + i];
      }
    });
  }
  return r;
}

namespace {

enum class BinOp { kAdd, kSub, kMul };

Array binary(const char* name, BinOp op, const Array& a, const Array& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = op == BinOp::kAdd && a.rank() == 2 && b.rank() == 1 && b.size() == a.cols();
  if (!same && !bias) shape_fail(name, a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  if (same) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (op) {
        case BinOp::kAdd: out[i] = x[i] + y[i]; break;
        case BinOp::kSub: out[i] = x[i] - y[i]; break;
        case BinOp::kMul: out[i] = x[i] * y[i]; break;
      }
    }
  } else {
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % c];
  }
  const bool rg = needs_tape({&a, &b});
  Array r = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    Node* rn = r.node().get();
    record({a, b}, r, [an, bn, rn, op, same] {
      const auto& g = rn->grad;
      if (an->requires_grad) {
        auto& ga = ensure_grad(an);
        if (op == BinOp::kMul) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad(bn);
        if (!same) {
          const std::size_t c = gb.size();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
        } else if (op == BinOp::kMul) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
        } else if (op == BinOp::kSub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }
  return r;
}

// Elementwise map with derivative f'(x) evaluated from the input.
template <typename F, typename DF>
Array unary(const Array& a, F f, DF df) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const bool rg = needs_tape({&a});
  Array r = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, df] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += rn->grad[i] * df(an->data[i]);
    });
  }
  return r;
}

}  // namespace

Array add(const Array& a, const Array& b) { return binary("add", BinOp::kAdd, a, b); }
Array sub(const Array& a, const Array& b) { return binary("sub", BinOp::kSub, a, b); }
Array mul(const Array& a, const Array& b) { return binary("mul", BinOp::kMul, a, b); }

Array scale(const Array& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Array gelu(const Array& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Array silu(const Array& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Array softmax_lastdim(const Array& a) {
  if (a.rank() == 0) shape_fail("softmax_lastdim", a.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  const bool rg = needs_tape({&a});
  Array r = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, rows, cols] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = rn->data.data() + i * cols;
        const double* dy = rn->grad.data() + i * cols;
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += dy[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) g[i * cols + c] += y[c] * (dy[c] - s);
      }
    });
  }
  return r;
}

Array log_softmax_lastdim(const Array& a) {
  if (a.rank() == 0) shape_fail("log_softmax_lastdim", a.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lz;
  }
  const bool rg = needs_tape({&a});
  Array r = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, rows, cols] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = rn->data.data() + i * cols;
        const double* dy = rn->grad.data() + i * cols;
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += dy[c];
        for (std::size_t c = 0; c < cols; ++c) g[i * cols + c] += dy[c] - std::exp(y[c]) * s;
      }
    });
  }
  return r;
}

Array layernorm(const Array& x, const Array& gain, const Array& bias, double eps) {
  require_matrix("layernorm", x);
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) shape_fail("layernorm", x.shape(), gain.shape());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  const bool rg = needs_tape({&x, &gain, &bias});
  Array r = make_result(x.shape(), std::move(out), rg);
  if (rg) {
    Node* xn = x.node().get();
    Node* gn = gain.node().get();
    Node* bn = bias.node().get();
    Node* rn = r.node().get();
    record({x, gain, bias}, r,
           [xn, gn, bn, rn, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)] {
             const auto& dy = rn->grad;
             if (gn->requires_grad) {
               auto& gg = ensure_grad(gn);
               for (std::size_t i = 0; i < dy.size(); ++i) gg[i % cols] += dy[i] * xhat[i];
             }
             if (bn->requires_grad) {
               auto& gb = ensure_grad(bn);
               for (std::size_t i = 0; i < dy.size(); ++i) gb[i % cols] += dy[i];
             }
             if (xn->requires_grad) {
               auto& gx = ensure_grad(xn);
               const double inv_n = 1.0 / static_cast<double>(cols);
               for (std::size_t i = 0; i < rows; ++i) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t c = 0; c < cols; ++c) {
                   const double dh = dy[i * cols + c] * gn->data[c];
                   m1 += dh;
                   m2 += dh * xhat[i * cols + c];
                 }
                 m1 *= inv_n;
                 m2 *= inv_n;
                 for (std::size_t c = 0; c < cols; ++c) {
                   const double dh = dy[i * cols + c] * gn->data[c];
                   gx[i * cols + c] += rstd[i] * (dh - m1 - xhat[i * cols + c] * m2);
                 }
               }
             }
           });
  }
  return r;
}

Array embedding_lookup(const Array& table, std::span<const int> ids) {
  require_matrix("embedding_lookup", table);
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabularyError("embedding_lookup: token id " + std::to_string(ids[i]) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool rg = needs_tape({&table});
  Array r = make_result({ids.size(), d}, std::move(out), rg);
  if (rg) {
    Node* tn = table.node().get();
    Node* rn = r.node().get();
    record({table}, r, [tn, rn, d, idv = std::vector<int>(ids.begin(), ids.end())] {
      auto& g = ensure_grad(tn);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        kernels::axpy(d, 1.0, rn->grad.data() + i * d, g.data() + static_cast<std::size_t>(idv[i]) * d);
      }
    });
  }
  return r;
}

Array concat_rows(const std::vector<Array>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const Array& p : parts) {
    require_matrix("concat_rows", p);
    if (p.cols() != cols) shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  rg = rg && g_active_tape;
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const Array& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Array r = make_result({rows, cols}, std::move(out), rg);
  if (rg) {
    std::vector<Node*> ns;
    for (const Array& p : parts) ns.push_back(p.node().get());
    Node* rn = r.node().get();
    record(parts, r, [ns, rn] {
      std::size_t off = 0;
      for (Node* n : ns) {
        if (n->requires_grad) {
          auto& g = ensure_grad(n);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += rn->grad[off + i];
        }
        off += n->data.size();
      }
    });
  }
  return r;
}

Array slice_rows(const Array& a, std::size_t start, std::size_t count) {
  require_matrix("slice_rows", a);
  if (start + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + shape_str(a.shape()));
  }
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), start);
  return select_rows(a, idx);
}

Array select_rows(const Array& a, std::span<const std::size_t> rows) {
  require_matrix("select_rows", a);
  const std::size_t cols = a.cols();
  std::vector<double> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw ShapeError("select_rows: row index out of range");
    std::copy_n(a.data().data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  const bool rg = needs_tape({&a});
  Array r = make_result({rows.size(), cols}, std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, cols, idx = std::vector<std::size_t>(rows.begin(), rows.end())] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) g[idx[i] * cols + c] += rn->grad[i * cols + c];
      }
    });
  }
  return r;
}

Array concat_cols(const std::vector<Array>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  bool rg = false;
  for (const Array& p : parts) {
    require_matrix("concat_cols", p);
    if (p.rows() != rows) shape_fail("concat_cols", parts[0].shape(), p.shape());
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  rg = rg && g_active_tape;
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (const Array& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(p.data().data() + i * pc, pc, out.data() + i * cols + off);
    }
    off += pc;
  }
  Array r = make_result({rows, cols}, std::move(out), rg);
  if (rg) {
    std::vector<Node*> ns;
    for (const Array& p : parts) ns.push_back(p.node().get());
    Node* rn = r.node().get();
    record(parts, r, [ns, rn, rows, cols] {
      std::size_t o = 0;
      for (Node* n : ns) {
        const std::size_t pc = n->shape[1];
        if (n->requires_grad) {
          auto& g = ensure_grad(n);
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < pc; ++c) g[i * pc + c] += rn->grad[i * cols + o + c];
          }
        }
        o += pc;
      }
    });
  }
  return r;
}

Array slice_cols(const Array& a, std::size_t start, std::size_t count) {
  require_matrix("slice_cols", a);
  const std::size_t rows = a.rows(), cols = a.cols();
  if (start + count > cols) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + shape_str(a.shape()));
  }
  std::vector<double> out(rows * count);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.data().data() + i * cols + start, count, out.data() + i * count);
  }
  const bool rg = needs_tape({&a});
  Array r = make_result({rows, count}, std::move(out), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn, rows, cols, start, count] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < count; ++c) g[i * cols + start + c] += rn->grad[i * count + c];
      }
    });
  }
  return r;
}

Array reshape(const Array& a, Shape shape) {
  if (shape_size(shape) != a.size() || shape.size() > 2) shape_fail("reshape", a.shape(), shape);
  const bool rg = needs_tape({&a});
  Array r = make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += rn->grad[i];
    });
  }
  return r;
}

Array mask_future(const Array& scores) {
  require_matrix("mask_future", scores);
  const std::size_t rows = scores.rows(), cols = scores.cols();
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i + 1; j < cols; ++j) out[i * cols + j] = -std::numeric_limits<double>::infinity();
  }
  const bool rg = needs_tape({&scores});
  Array r = make_result(scores.shape(), std::move(out), rg);
  if (rg) {
    Node* an = scores.node().get();
    Node* rn = r.node().get();
    record({scores}, r, [an, rn, rows, cols] {
      auto& g = ensure_grad(an);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j <= i && j < cols; ++j) g[i * cols + j] += rn->grad[i * cols + j];
      }
    });
  }
  return r;
}

Array cross_entropy_rowwise(const Array& logits, std::span<const int> targets) {
  require_matrix("cross_entropy_rowwise", logits);
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_rowwise: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  const auto x = logits.data();
  std::vector<double> probs(x.size());
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw VocabularyError("cross_entropy_rowwise: target " + std::to_string(targets[r]) +
                            " outside vocabulary of " + std::to_string(cols));
    }
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (probs[r * cols + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
    out[r] = mx + std::log(z) - xr[targets[r]];
  }
  const bool rg = needs_tape({&logits});
  Array res = make_result({rows}, std::move(out), rg);
  if (rg) {
    Node* ln = logits.node().get();
    Node* rn = res.node().get();
    record({logits}, res,
           [ln, rn, rows, cols, probs = std::move(probs),
            tv = std::vector<int>(targets.begin(), targets.end())] {
             auto& g = ensure_grad(ln);
             for (std::size_t r = 0; r < rows; ++r) {
               const double dy = rn->grad[r];
               for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += dy * probs[r * cols + c];
               g[r * cols + static_cast<std::size_t>(tv[r])] -= dy;
             }
           });
  }
  return res;
}

Array sum(const Array& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const bool rg = needs_tape({&a});
  Array r = make_result({}, {s}, rg);
  if (rg) {
    Node* an = a.node().get();
    Node* rn = r.node().get();
    record({a}, r, [an, rn] {
      auto& g = ensure_grad(an);
      for (double& v : g) v += rn->grad[0];
    });
  }
  return r;
}

Array mean(const Array& a) {
  if (a.size() == 0) throw ShapeError("mean: empty array");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

}  // namespace prunelab::ndgrad
