#pragma once
// Dense f64 arrays with tape-based reverse-mode differentiation.
//
// An Array is a shared handle to a node holding shape, data and (lazily) a
// gradient buffer. Operations record themselves on the thread's active Tape
// whenever at least one input requires a gradient; with no active tape they
// simply compute values. Open a tape with TapeScope.
//
// Shapes are rank 0 (scalar), 1 or 2. Broadcasting is limited to adding a
// rank-1 bias to every row of a matrix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace prunelab::ndgrad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  bool leaf = true;
};

class Array {
 public:
  Array() = default;
  Array(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Array zeros(Shape shape, bool requires_grad = false);
  static Array scalar(double v, bool requires_grad = false);
  static Array from_rows(const std::vector<std::vector<double>>& rows,
                         bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  // Rows/cols view a rank-1 array as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; all zeros when no backward pass has reached the node.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  // Deep copy as a fresh leaf with the same requires_grad flag.
  Array clone() const;
  // Deep copy as a constant leaf.
  Array detach() const;

  bool same_node(const Array& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Array(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Array make_result(Shape, std::vector<double>, bool);
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  struct Entry {
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the recorded rules in reverse.
  // Intermediate gradients are reset first; leaf gradients accumulate.
  void backward(const Array& loss);

 private:
  std::vector<Entry> entries_;
};

// Installs a tape as this thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on this thread for its lifetime (frozen forwards).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// backward() on the active tape.
void backward(const Array& loss);

// Counts multiply-adds performed by matmul on this thread while alive.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const;

 private:
  std::uint64_t* previous_;
  std::uint64_t count_ = 0;
};

// ---- primitives ---------------------------------------------------------

Array matmul(const Array& a, const Array& b);
Array transpose(const Array& a);
// Same shapes, or a rank-1 `b` of length cols(a) added to every row.
Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double s);
Array softmax_lastdim(const Array& a);
Array log_softmax_lastdim(const Array& a);
Array gelu(const Array& a);
Array silu(const Array& a);
// Row-wise normalisation followed by per-column gain and bias.
Array layernorm(const Array& x, const Array& gain, const Array& bias, double eps = 1e-5);
Array embedding_lookup(const Array& table, std::span<const int> ids);
Array concat_rows(const std::vector<Array>& parts);
Array slice_rows(const Array& a, std::size_t start, std::size_t count);
Array select_rows(const Array& a, std::span<const std::size_t> rows);
Array concat_cols(const std::vector<Array>& parts);
Array slice_cols(const Array& a, std::size_t start, std::size_t count);
Array reshape(const Array& a, Shape shape);
// Sets entries above the diagonal to -inf (causal attention scores).
Array mask_future(const Array& scores);
// Per-row -log softmax(logits)[target]; returns a rank-1 array.
Array cross_entropy_rowwise(const Array& logits, std::span<const int> targets);
Array sum(const Array& a);
Array mean(const Array& a);

}  // namespace prunelab::ndgrad
