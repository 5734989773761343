#include "dpmem/numerics.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dpmem::numerics {

namespace {

thread_local bool t_grad_enabled = true;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
bool tracks(const Tensor<T>& a) {
  return grad_enabled() && a.requires_grad();
}

template <typename T>
bool tracks(const Tensor<T>& a, const Tensor<T>& b) {
  return grad_enabled() && (a.requires_grad() || b.requires_grad());
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) {
    throw ShapeError(std::string(op) + ": undefined tensor operand");
  }
}

// Returns nullptr when the node does not take gradients.
template <typename T>
T* grad_target(const std::shared_ptr<TensorNode<T>>& node) {
  return node->requires_grad ? node->ensure_grad() : nullptr;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
T* TensorNode<T>::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), T{0});
  return grad.data();
}

// --- Tensor -----------------------------------------------------------------

template <typename T>
Tensor<T> make_result(Shape shape, bool track) {
  auto node = std::make_shared<TensorNode<T>>();
  node->data.assign(element_count(shape), T{0});
  node->shape = std::move(shape);
  node->requires_grad = track;
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T{0}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (shape.empty()) throw ShapeError("tensor needs at least one dimension");
  auto t = make_result<T>(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor needs at least one dimension");
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (element_count(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(element_count(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return node_->shape.size() <= 1 ? 1 : node_->data.size() / node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(shape(), node_->data, false);
}

// --- Tape -------------------------------------------------------------------

template <typename T>
Tape<T>& Tape<T>::current() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(std::function<void()> backward_fn) {
  entries_.push_back(std::move(backward_fn));
}

template <typename T>
void Tape<T>::replay_reverse() {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss was not produced by a recorded tape");
  }
  auto& tape = Tape<T>::current();
  loss.node()->ensure_grad()[0] = T{1};
  tape.replay_reverse();
  tape.clear();
}

// --- ops --------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (b.dim() != 2 || a.dim() < 1) {
    throw ShapeError("matmul: right operand must be 2-D, got " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t k = a.cols();
  const std::size_t b_inner = transpose_b ? b.extent(1) : b.extent(0);
  const std::size_t n = transpose_b ? b.extent(0) : b.extent(1);
  if (k != b_inner) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t m = a.rows();
  Shape out_shape = a.shape();
  out_shape.back() = n;
  auto out = make_result<T>(out_shape, tracks(a, b));

  ConstMatMap<T> am(a.data().data(), m, k);
  MatMap<T> cm(out.mutable_data().data(), m, n);
  if (transpose_b) {
    ConstMatMap<T> bm(b.data().data(), n, k);
    cm.noalias() = am * bm.transpose();
  } else {
    ConstMatMap<T> bm(b.data().data(), k, n);
    cm.noalias() = am * bm;
  }

  if (out.requires_grad()) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), on = out.node(), m, k, n, transpose_b] {
      if (on->grad.empty()) return;
      ConstMatMap<T> dc(on->grad.data(), m, n);
      ConstMatMap<T> am(an->data.data(), m, k);
      if (T* ga = grad_target(an)) {
        MatMap<T> da(ga, m, k);
        if (transpose_b) {
          da.noalias() += dc * ConstMatMap<T>(bn->data.data(), n, k);
        } else {
          da.noalias() += dc * ConstMatMap<T>(bn->data.data(), k, n).transpose();
        }
      }
      if (T* gb = grad_target(bn)) {
        if (transpose_b) {
          MatMap<T> db(gb, n, k);
          db.noalias() += dc.transpose() * am;
        } else {
          MatMap<T> db(gb, k, n);
          db.noalias() += am.transpose() * dc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) {
    throw ShapeError("add: cannot broadcast " + to_string(bs) + " onto " + to_string(as));
  }
  auto out = make_result<T>(as, tracks(a, b));
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) od[o * inner + i] = ad[o * inner + i] + bd[i];
  }
  if (out.requires_grad()) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), on = out.node(), outer, inner] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (T* ga = grad_target(an)) {
        for (std::size_t i = 0; i < outer * inner; ++i) ga[i] += g[i];
      }
      if (T* gb = grad_target(bn)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_defined(a, "scale");
  auto out = make_result<T>(a.shape(), tracks(a));
  auto ad = a.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * factor;
  if (out.requires_grad()) {
    Tape<T>::current().record([an = a.node(), on = out.node(), factor] {
      if (on->grad.empty()) return;
      T* ga = an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> activate(const Tensor<T>& a, Activation kind) {
  require_defined(a, "activate");
  auto out = make_result<T>(a.shape(), tracks(a));
  auto ad = a.data();
  auto od = out.mutable_data();
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  std::vector<T> cached_tanh(kind == Activation::kGelu ? ad.size() : 0);
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const T x = ad[i];
    switch (kind) {
      case Activation::kGelu:
        cached_tanh[i] = std::tanh(kC * (x + kA * x * x * x));
        od[i] = T{0.5} * x * (T{1} + cached_tanh[i]);
        break;
      case Activation::kTanh:
        od[i] = std::tanh(x);
        break;
      case Activation::kRelu:
        od[i] = x > T{0} ? x : T{0};
        break;
    }
  }
  if (out.requires_grad()) {
    Tape<T>::current().record([an = a.node(), on = out.node(), kind, cached_tanh = std::move(cached_tanh)] {
      if (on->grad.empty()) return;
      T* ga = an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T x = an->data[i];
        T d{};
        switch (kind) {
          case Activation::kGelu: {
            const T t = cached_tanh[i];
            d = T{0.5} * (T{1} + t) +
                T{0.5} * x * (T{1} - t * t) * kC * (T{1} + T{3} * kA * x * x);
            break;
          }
          case Activation::kTanh:
            d = T{1} - on->data[i] * on->data[i];
            break;
          case Activation::kRelu:
            d = x > T{0} ? T{1} : T{0};
            break;
        }
        ga[i] += on->grad[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T epsilon) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: affine terms " + to_string(gamma.shape()) + "/" +
                     to_string(beta.shape()) + " do not match width of " + to_string(x.shape()));
  }
  const std::size_t n = x.rows();
  const bool track = grad_enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto out = make_result<T>(x.shape(), track);
  std::vector<T> normalized(x.size());
  std::vector<T> inv_std(n);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xd.data() + r * d;
    T mu{0};
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + epsilon);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T xh = (row[c] - mu) * is;
      normalized[r * d + c] = xh;
      od[r * d + c] = gd[c] * xh + bd[c];
    }
  }
  if (track) {
    Tape<T>::current().record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
                               normalized = std::move(normalized), inv_std = std::move(inv_std), n, d] {
      if (on->grad.empty()) return;
      const T* dy = on->grad.data();
      T* gx = grad_target(xn);
      T* gg = grad_target(gn);
      T* gb = grad_target(bn);
      std::vector<T> dxh(d);
      for (std::size_t r = 0; r < n; ++r) {
        const T* xh = normalized.data() + r * d;
        const T* dyr = dy + r * d;
        T mean_dxh{0};
        T mean_dxh_xh{0};
        for (std::size_t c = 0; c < d; ++c) {
          if (gg) gg[c] += dyr[c] * xh[c];
          if (gb) gb[c] += dyr[c];
          dxh[c] = dyr[c] * gn->data[c];
          mean_dxh += dxh[c];
          mean_dxh_xh += dxh[c] * xh[c];
        }
        if (!gx) continue;
        mean_dxh /= static_cast<T>(d);
        mean_dxh_xh /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          gx[r * d + c] += inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_defined(x, "softmax_rows");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  auto out = make_result<T>(x.shape(), tracks(x));
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xd.data() + r * d;
    T* orow = od.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T total{0};
    for (std::size_t c = 0; c < d; ++c) {
      orow[c] = std::exp(row[c] - mx);
      total += orow[c];
    }
    for (std::size_t c = 0; c < d; ++c) orow[c] /= total;
  }
  if (out.requires_grad()) {
    Tape<T>::current().record([xn = x.node(), on = out.node(), n, d] {
      if (on->grad.empty()) return;
      T* gx = xn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        const T* y = on->data.data() + r * d;
        const T* dy = on->grad.data() + r * d;
        T dot{0};
        for (std::size_t c = 0; c < d; ++c) dot += y[c] * dy[c];
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += y[c] * (dy[c] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_defined(table, "embedding");
  if (table.dim() != 2) throw ShapeError("embedding: table must be 2-D, got " + to_string(table.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  const std::size_t vocab = table.extent(0);
  const std::size_t d = table.extent(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
  }
  auto out = make_result<T>({ids.size(), d}, tracks(table));
  auto td = table.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, od.data() + i * d);
  }
  if (out.requires_grad()) {
    Tape<T>::current().record(
        [tn = table.node(), on = out.node(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
          if (on->grad.empty()) return;
          T* gt = tn->ensure_grad();
          for (std::size_t i = 0; i < ids.size(); ++i) {
            T* dst = gt + static_cast<std::size_t>(ids[i]) * d;
            const T* src = on->grad.data() + i * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> concat_time(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "concat_time");
  require_defined(b, "concat_time");
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.cols()) {
    throw ShapeError("concat_time: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t na = a.size();
  auto out = make_result<T>({a.extent(0) + b.extent(0), a.cols()}, tracks(a, b));
  auto od = out.mutable_data();
  std::copy(a.data().begin(), a.data().end(), od.begin());
  std::copy(b.data().begin(), b.data().end(), od.begin() + static_cast<std::ptrdiff_t>(na));
  if (out.requires_grad()) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), on = out.node(), na] {
      if (on->grad.empty()) return;
      if (T* ga = grad_target(an)) {
        for (std::size_t i = 0; i < na; ++i) ga[i] += on->grad[i];
      }
      if (T* gb = grad_target(bn)) {
        for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] += on->grad[na + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_defined(x, "slice_rows");
  if (x.dim() != 2 || begin >= end || end > x.extent(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + to_string(x.shape()));
  }
  const std::size_t d = x.cols();
  auto out = make_result<T>({end - begin, d}, tracks(x));
  std::copy_n(x.data().data() + begin * d, (end - begin) * d, out.mutable_data().data());
  if (out.requires_grad()) {
    Tape<T>::current().record([xn = x.node(), on = out.node(), offset = begin * d] {
      if (on->grad.empty()) return;
      T* gx = xn->ensure_grad() + offset;
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_columns(const Tensor<T>& x, std::span<const std::int32_t> columns) {
  require_defined(x, "gather_columns");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (columns.empty()) throw ShapeError("gather_columns: no columns selected");
  for (std::int32_t c : columns) {
    if (c < 0 || static_cast<std::size_t>(c) >= d) {
      throw std::out_of_range("gather_columns: column " + std::to_string(c) + " outside width " +
                              std::to_string(d));
    }
  }
  const std::size_t m = columns.size();
  auto out = make_result<T>({n, m}, tracks(x));
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < m; ++j) od[r * m + j] = xd[r * d + static_cast<std::size_t>(columns[j])];
  }
  if (out.requires_grad()) {
    Tape<T>::current().record([xn = x.node(), on = out.node(),
                               cols = std::vector<std::int32_t>(columns.begin(), columns.end()), n, d, m] {
      if (on->grad.empty()) return;
      T* gx = xn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < m; ++j) gx[r * d + static_cast<std::size_t>(cols[j])] += on->grad[r * m + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  auto out = make_result<T>({1}, tracks(x));
  T total{0};
  for (T v : x.data()) total += v;
  out.mutable_data()[0] = total;
  if (out.requires_grad()) {
    Tape<T>::current().record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      T* gx = xn->ensure_grad();
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += on->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, std::size_t valid_rows) {
  require_defined(x, "mean_rows");
  if (x.dim() != 2 || valid_rows == 0 || valid_rows > x.extent(0)) {
    throw ShapeError("mean_rows: " + std::to_string(valid_rows) + " valid rows invalid for " +
                     to_string(x.shape()));
  }
  const std::size_t d = x.cols();
  auto out = make_result<T>({1, d}, tracks(x));
  auto xd = x.data();
  auto od = out.mutable_data();
  const T inv = T{1} / static_cast<T>(valid_rows);
  for (std::size_t r = 0; r < valid_rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) od[c] += xd[r * d + c];
  }
  for (std::size_t c = 0; c < d; ++c) od[c] *= inv;
  if (out.requires_grad()) {
    Tape<T>::current().record([xn = x.node(), on = out.node(), valid_rows, d, inv] {
      if (on->grad.empty()) return;
      T* gx = xn->ensure_grad();
      for (std::size_t r = 0; r < valid_rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += on->grad[c] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t num_heads,
                    bool causal, std::size_t valid_len) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  if (q.dim() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q/k/v shapes differ: " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  const std::size_t n = q.extent(0);
  const std::size_t d = q.extent(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  }
  if (valid_len == 0 || valid_len > n) {
    throw ShapeError("attention: valid length " + std::to_string(valid_len) + " invalid for " +
                     std::to_string(n) + " positions");
  }
  const std::size_t dh = d / num_heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  const bool track = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto out = make_result<T>({n, d}, track);

  using Stride = Eigen::OuterStride<>;
  using HeadMap = Eigen::Map<const RowMatrix<T>, 0, Stride>;
  using MutHeadMap = Eigen::Map<RowMatrix<T>, 0, Stride>;
  const auto ln = static_cast<Eigen::Index>(n);
  const auto ldh = static_cast<Eigen::Index>(dh);
  const Stride stride(static_cast<Eigen::Index>(d));

  // probs[h] is [n x n], zero where masked.
  std::vector<T> probs(num_heads * n * n);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * dh;
    HeadMap qh(q.data().data() + off, ln, ldh, stride);
    HeadMap kh(k.data().data() + off, ln, ldh, stride);
    HeadMap vh(v.data().data() + off, ln, ldh, stride);
    MatMap<T> p(probs.data() + h * n * n, ln, ln);
    p.noalias() = qh * kh.transpose();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t last = std::min(causal ? i + 1 : n, valid_len);
      T* row = p.data() + i * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < last; ++j) {
        row[j] *= inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      T total{0};
      for (std::size_t j = 0; j < last; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      const T inv_total = T{1} / total;
      for (std::size_t j = 0; j < last; ++j) row[j] *= inv_total;
      std::fill(row + last, row + n, T{0});
    }
    MutHeadMap oh(out.mutable_data().data() + off, ln, ldh, stride);
    oh.noalias() = p * vh;
  }

  if (track) {
    Tape<T>::current().record([qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(),
                               probs = std::move(probs), n, d, dh, num_heads, inv_sqrt] {
      if (on->grad.empty()) return;
      T* gq = grad_target(qn);
      T* gk = grad_target(kn);
      T* gv = grad_target(vn);
      const auto ln = static_cast<Eigen::Index>(n);
      const auto ldh = static_cast<Eigen::Index>(dh);
      const Stride stride(static_cast<Eigen::Index>(d));
      RowMatrix<T> dp(ln, ln);
      for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t off = h * dh;
        ConstMatMap<T> p(probs.data() + h * n * n, ln, ln);
        HeadMap dout(on->grad.data() + off, ln, ldh, stride);
        HeadMap vh(vn->data.data() + off, ln, ldh, stride);
        if (gv) {
          MutHeadMap gvh(gv + off, ln, ldh, stride);
          gvh.noalias() += p.transpose() * dout;
        }
        if (!gq && !gk) continue;
        dp.noalias() = dout * vh.transpose();
        // Softmax backward; masked entries have p = 0 and drop out.
        for (Eigen::Index i = 0; i < ln; ++i) {
          const T dot = p.row(i).dot(dp.row(i));
          dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot) * inv_sqrt).matrix();
        }
        if (gq) {
          HeadMap kh(kn->data.data() + off, ln, ldh, stride);
          MutHeadMap gqh(gq + off, ln, ldh, stride);
          gqh.noalias() += dp * kh;
        }
        if (gk) {
          HeadMap qh(qn->data.data() + off, ln, ldh, stride);
          MutHeadMap gkh(gk + off, ln, ldh, stride);
          gkh.noalias() += dp.transpose() * qh;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  require_defined(logits, "cross_entropy");
  const std::size_t n = logits.rows();
  const std::size_t classes = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows of " + to_string(logits.shape()));
  }
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
  auto out = make_result<T>({1}, tracks(logits));
  std::vector<T> probs(logits.size());
  auto ld = logits.data();
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = ld.data() + r * classes;
    T* prow = probs.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) {
      prow[c] = std::exp(row[c] - mx);
      z += prow[c];
    }
    for (std::size_t c = 0; c < classes; ++c) prow[c] /= z;
    const auto t = static_cast<std::size_t>(targets[r]);
    // -log softmax = logsumexp - logit
    total += (mx + std::log(z)) - row[t];
  }
  out.mutable_data()[0] = total / static_cast<T>(n);
  if (out.requires_grad()) {
    Tape<T>::current().record([ln = logits.node(), on = out.node(), probs = std::move(probs),
                               tg = std::vector<std::int32_t>(targets.begin(), targets.end()), n, classes] {
      if (on->grad.empty()) return;
      T* gl = ln->ensure_grad();
      const T g = on->grad[0] / static_cast<T>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < classes; ++c) {
          const T onehot = static_cast<std::size_t>(tg[r]) == c ? T{1} : T{0};
          gl[r * classes + c] += g * (probs[r * classes + c] - onehot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::int32_t target) {
  require_defined(logits, "cross_entropy");
  if (logits.rows() != 1) {
    throw ShapeError("cross_entropy: expected a single row of logits, got " + to_string(logits.shape()));
  }
  const std::int32_t targets[1] = {target};
  return cross_entropy_rows(logits, std::span<const std::int32_t>(targets));
}

// --- optimizers -------------------------------------------------------------

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerKind::kSgd;
  if (text == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer kind '" + text + "' (expected sgd or adam)");
}

template <typename T>
Optimizer<T>::Optimizer(OptimizerSettings settings, std::vector<Tensor<T>> parameters)
    : settings_(settings), parameters_(std::move(parameters)) {
  if (!(settings_.learning_rate >= 0.0)) {
    throw std::invalid_argument("optimizer: learning rate must be non-negative");
  }
  if (settings_.kind == OptimizerKind::kAdam) {
    for (const auto& p : parameters_) {
      first_moment_.emplace_back(p.size(), T{0});
      second_moment_.emplace_back(p.size(), T{0});
    }
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : parameters_) p.zero_grad();
}

template <typename T>
void Optimizer<T>::step() {
  for (std::size_t i = 0; i < parameters_.size(); ++i) {
    if (!parameters_[i].has_grad()) {
      throw std::logic_error("optimizer step: parameter " + std::to_string(i) + " of shape " +
                             to_string(parameters_[i].shape()) + " has no gradient");
    }
  }
  ++step_count_;
  const double lr = settings_.learning_rate;
  if (settings_.kind == OptimizerKind::kSgd) {
    for (auto& p : parameters_) {
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<T>(lr) * g[j];
    }
    return;
  }
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  const T eps = static_cast<T>(settings_.epsilon);
  for (std::size_t i = 0; i < parameters_.size(); ++i) {
    auto w = parameters_[i].mutable_data();
    auto g = parameters_[i].grad();
    auto& m = first_moment_[i];
    auto& v = second_moment_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<T>(b1) * m[j] + static_cast<T>(1.0 - b1) * g[j];
      v[j] = static_cast<T>(b2) * v[j] + static_cast<T>(1.0 - b2) * g[j] * g[j];
      const T m_hat = m[j] / static_cast<T>(c1);
      const T v_hat = v[j] / static_cast<T>(c2);
      w[j] -= static_cast<T>(lr) * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// --- instantiations ---------------------------------------------------------

#define DPMEM_INSTANTIATE(T)                                                                      \
  template struct TensorNode<T>;                                                                  \
  template class Tensor<T>;                                                                       \
  template Tensor<T> make_result<T>(Shape, bool);                                                 \
  template class Tape<T>;                                                                         \
  template class Optimizer<T>;                                                                    \
  template void backward<T>(const Tensor<T>&);                                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool);                         \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> activate<T>(const Tensor<T>&, Activation);                                   \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                           \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> concat_time<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> gather_columns<T>(const Tensor<T>&, std::span<const std::int32_t>);          \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean_rows<T>(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                  std::size_t, bool, std::size_t);                                \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::int32_t);                            \
  template Tensor<T> cross_entropy_rows<T>(const Tensor<T>&, std::span<const std::int32_t>);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::numerics
