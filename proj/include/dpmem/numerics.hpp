#pragma once

// Dense tensors with tape-based reverse-mode differentiation, plus the
// optimizers and loss primitives shared by the rest of the library.
//
// Every op that sees an input with requires_grad() set appends a backward
// closure to the calling thread's tape. backward(loss) replays the tape in
// reverse, accumulates gradients into the leaves and clears the tape. The
// tape is rebuilt on every forward pass; nothing persists between passes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpmem::numerics {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;

  T* ensure_grad();
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  // Product of all extents except the last.
  std::size_t rows() const;
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access, for initialisation, loading and optimizer updates.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->ensure_grad(), node_->data.size()}; }
  // Zero-fills an existing gradient buffer; a never-touched buffer stays absent.
  void zero_grad();
  void drop_grad() { node_->grad.clear(); }

  // Deep copy of data; the copy is a fresh leaf without grad.
  Tensor clone() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  template <typename U>
  friend Tensor<U> make_result(Shape shape, bool track);

  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
Tensor<T> make_result(Shape shape, bool track);

// Records backward closures for one thread. Use Tape<T>::current().
template <typename T>
class Tape {
 public:
  static Tape& current();

  void record(std::function<void()> backward_fn);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  void replay_reverse();

 private:
  std::vector<std::function<void()>> entries_;
};

// True unless a NoGradGuard is active on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Ops. Two-dimensional operands are [rows x cols]; leading dimensions of the
// left operand are flattened into rows where noted.

// a: [..., m, k], b: [k, n] -> [..., m, n]. With transpose_b, b is [n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// Elementwise sum. b may have the same shape as a, or match a's trailing
// dimensions (broadcast over a's leading dimensions).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

enum class Activation { kGelu, kTanh, kRelu };

template <typename T>
Tensor<T> activate(const Tensor<T>& a, Activation kind);

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return activate(a, Activation::kGelu);
}

inline constexpr double kLayerNormEpsilon = 1e-5;

// Normalises each row over the last dimension, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T epsilon = static_cast<T>(kLayerNormEpsilon));

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// table: [V, d]; ids index rows -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

// Concatenates two [n_i, d] tensors along the first (time) axis.
template <typename T>
Tensor<T> concat_time(const Tensor<T>& a, const Tensor<T>& b);

// Rows [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Selects columns of every row: [n, V] -> [n, columns.size()].
template <typename T>
Tensor<T> gather_columns(const Tensor<T>& x, std::span<const std::int32_t> columns);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Mean over rows of [n, d], restricted to the first valid_rows rows -> [1, d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, std::size_t valid_rows);

// Multi-head scaled dot-product attention over [n, d] projections. With
// causal set, position t attends to positions <= t. Keys at positions >=
// valid_len are masked out (padding).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t num_heads, bool causal, std::size_t valid_len);

// -log softmax(logits)[target] for a single row of V logits.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::int32_t target);

// Mean cross-entropy over the rows of [n, V] logits; targets.size() == n.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Runs the tape in reverse from a scalar loss and clears the tape.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Optimizers.

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Holds the parameters it updates plus Adam moments (only when kind=adam).
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerSettings settings, std::vector<Tensor<T>> parameters);

  void zero_grad();
  // Throws std::logic_error if any parameter has no gradient buffer.
  void step();

  const OptimizerSettings& settings() const { return settings_; }
  std::uint64_t step_count() const { return step_count_; }
  bool has_moments() const { return !first_moment_.empty(); }
  std::span<const Tensor<T>> parameters() const { return parameters_; }

 private:
  OptimizerSettings settings_;
  std::vector<Tensor<T>> parameters_;
  std::vector<std::vector<T>> first_moment_;
  std::vector<std::vector<T>> second_moment_;
  std::uint64_t step_count_ = 0;
};

}  // namespace dpmem::numerics
