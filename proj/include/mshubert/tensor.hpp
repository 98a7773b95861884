#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Operations record themselves on the tape installed on the current thread by
// a TapeScope, but only when at least one input requires a gradient. Without
// an active tape every op is a plain forward computation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mshubert/errors.hpp"

namespace mshubert {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

std::uint64_t next_node_id();

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t id = next_node_id();

  // Zero-initialises the gradient buffer on first use.
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using Node = TensorNode<T>;

  BasicTensor() = default;

  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor: shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad_buffer();
    return BasicTensor(std::move(node));
  }
  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static BasicTensor full(Shape shape, T fill) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, fill));
  }
  static BasicTensor scalar(T v) { return from({}, {v}); }

  explicit operator bool() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().value.size(); }

  std::span<const T> data() const { return node().value; }
  // Mutating values of a tensor that is already on a tape invalidates its
  // recorded gradients; intended for initialisation and optimiser updates.
  std::span<T> mutable_data() { return node().value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node().value[0];
  }
  T at(std::size_t i) const { return node().value.at(i); }
  T at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw DimensionError("at(r, c) on non-matrix");
    return node().value.at(r * node().shape[1] + c);
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) {
    node().requires_grad = on;
    if (on) node().grad_buffer();
  }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad_buffer(); }
  void zero_grad() {
    if (!node().grad.empty()) std::fill(node().grad.begin(), node().grad.end(), T(0));
  }

  std::uint64_t node_id() const { return node().id; }

  /// Value copy with no gradient history.
  BasicTensor detach() const { return from(shape(), node().value); }

  const std::shared_ptr<Node>& handle() const { return node_; }
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  Node& node() const {
    if (!node_) throw ContractError("use of an empty tensor");
    return *node_;
  }
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

// Ordered record of differentiable operations. Ids are issued monotonically,
// so each record's inputs precede its output.
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
    std::function<bool()> reached;  // true once the output holds a gradient
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(Record record);

  /// Seeds d(loss)/d(loss) = 1 and runs every record once, newest first.
  /// Gradients accumulate into each reachable tensor that requires them.
  template <typename T>
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

 private:
  void run_backward();
  std::vector<Record> records_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Tape installed on this thread, or nullptr.
Tape* active_tape();

// ---- operations -----------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise with numpy-style broadcasting.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

/// Normalises to zero mean and unit variance along `axis` (no affine).
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, std::size_t axis, T eps);

/// Inverted dropout; identity when !training or p == 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng& rng, bool training);

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const std::size_t> ids);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis,
                                 T eps = T(1e-8));

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, std::size_t axis, T eps = T(1e-8));

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

/// Rows of a matrix in the given order (repeats allowed).
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);

/// Copy of x with each listed row replaced by the vector `row`.
template <typename T>
BasicTensor<T> replace_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows,
                            const BasicTensor<T>& row);

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Time-major 1-D convolution: x[L, Cin], weight[Cout, Cin/groups, K],
/// optional bias[Cout] -> [Lout, Cout].
template <typename T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias, Conv1dOptions options);

/// w[:, :, k] = g[k] * v[:, :, k] / ||v[:, :, k]|| for v[Cout, Cin, K], g[K].
template <typename T>
BasicTensor<T> weight_norm(const BasicTensor<T>& v, const BasicTensor<T>& g);

struct Segment {
  std::size_t offset;
  std::size_t length;
};

/// Scaled dot-product self-attention applied independently inside each row
/// segment and head. q, k, v: [rows, d] with d divisible by n_heads.
template <typename T>
BasicTensor<T> segment_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                 const BasicTensor<T>& v, std::span<const Segment> segments,
                                 std::size_t n_heads);

/// Mean over rows of -log softmax(logits)[row, target[row]].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

}  // namespace mshubert
