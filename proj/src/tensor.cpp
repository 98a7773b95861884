#include "mshubert/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mshubert/rng.hpp"

namespace mshubert {

namespace {

thread_local Tape* g_active_tape = nullptr;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedConstMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
Tape* recording_tape(std::initializer_list<const BasicTensor<T>*> inputs) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs)
    if (t != nullptr && *t && t->requires_grad()) return tape;
  return nullptr;
}

template <typename T>
void check_finite([[maybe_unused]] const BasicTensor<T>& out, [[maybe_unused]] std::string_view op) {
#ifndef NDEBUG
  for (const T v : out.data())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
#endif
}

template <typename T, typename F>
void record(Tape* tape, std::string_view op, std::initializer_list<const BasicTensor<T>*> inputs,
            const BasicTensor<T>& out, F&& fn) {
  out.handle()->requires_grad = true;
  Tape::Record r;
  r.op = op;
  for (const auto* t : inputs)
    if (t != nullptr && *t) r.inputs.push_back(t->node_id());
  r.output = out.node_id();
  NodePtr<T> on = out.handle();
  r.reached = [on] { return !on->grad.empty(); };
  r.backward = std::forward<F>(fn);
  tape->push(std::move(r));
}

template <typename T>
std::vector<T>* grad_of(const NodePtr<T>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, std::string_view op) {
  if (axis >= shape.size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_matrix(const Shape& s, std::string_view op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(s));
}

// ---- broadcasting ----

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride, b_stride, out_dims;
  enum class Kind { same, b_suffix, a_suffix, general } kind = Kind::general;
  std::size_t a_n = 0, b_n = 0;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  Broadcast p;
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1)
      p.out[i] = pa[i];
    else if (pa[i] == 1)
      p.out[i] = pb[i];
    else
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                           shape_string(b));
  }
  p.a_n = shape_numel(a);
  p.b_n = shape_numel(b);
  const std::size_t on = shape_numel(p.out);
  auto is_suffix = [&](const Shape& padded, std::size_t n) {
    // padded == (1, ..., 1, out[j:]) for some j
    std::size_t j = 0;
    while (j < r && padded[j] == 1) ++j;
    for (std::size_t i = j; i < r; ++i)
      if (padded[i] != p.out[i]) return false;
    return n > 0 && on % n == 0;
  };
  if (pa == pb)
    p.kind = Broadcast::Kind::same;
  else if (pa == p.out && is_suffix(pb, p.b_n))
    p.kind = Broadcast::Kind::b_suffix;
  else if (pb == p.out && is_suffix(pa, p.a_n))
    p.kind = Broadcast::Kind::a_suffix;
  else {
    p.kind = Broadcast::Kind::general;
    p.a_stride.assign(r, 0);
    p.b_stride.assign(r, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
      p.a_stride[i] = pa[i] == 1 ? 0 : sa;
      p.b_stride[i] = pb[i] == 1 ? 0 : sb;
      sa *= pa[i];
      sb *= pb[i];
    }
  }
  return p;
}

template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t on = shape_numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t i = 0; i < on; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::b_suffix:
      for (std::size_t i = 0; i < on; i += p.b_n)
        for (std::size_t j = 0; j < p.b_n; ++j) f(i + j, i + j, j);
      return;
    case Broadcast::Kind::a_suffix:
      for (std::size_t i = 0; i < on; i += p.a_n)
        for (std::size_t j = 0; j < p.a_n; ++j) f(i + j, j, i + j);
      return;
    case Broadcast::Kind::general:
      break;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < on; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < p.out[d]) {
        ia += p.a_stride[d];
        ib += p.b_stride[d];
        break;
      }
      ia -= p.a_stride[d] * (p.out[d] - 1);
      ib -= p.b_stride[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinaryOp { add, sub, mul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp kind, std::string_view op) {
  const auto plan = plan_broadcast(a.shape(), b.shape(), op);
  std::vector<T> out(shape_numel(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  switch (kind) {
    case BinaryOp::add:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] + bv[ib]; });
      break;
    case BinaryOp::sub:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] - bv[ib]; });
      break;
    case BinaryOp::mul:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] * bv[ib]; });
      break;
  }
  auto result = BasicTensor<T>::from(plan.out, std::move(out));
  check_finite(result, op);
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    record(tape, op, {&a, &b}, result,
           [an = a.handle(), bn = b.handle(), on = result.handle(), plan, kind] {
             const T* g = on->grad.data();
             auto* gav = grad_of(an);
             auto* gbv = grad_of(bn);
             T* ga = gav ? gav->data() : nullptr;
             T* gb = gbv ? gbv->data() : nullptr;
             const T* av = an->value.data();
             const T* bv = bn->value.data();
             const T sign = kind == BinaryOp::sub ? T(-1) : T(1);
             if (kind == BinaryOp::mul) {
               if (ga) for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bv[ib]; });
               if (gb) for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * av[ia]; });
             } else {
               if (ga) for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
               if (gb) for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += sign * g[i]; });
             }
           });
  }
  return result;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

void Tape::push(Record record) {
  for (const auto in : record.inputs)
    if (in >= record.output) throw ContractError("tape: input recorded after its consumer");
  records_.push_back(std::move(record));
}

void Tape::run_backward() {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it)
    if (it->reached()) it->backward();
}

template <typename T>
void Tape::backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  if (consumed_) throw ContractError("backward: tape already consumed");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.handle()->grad_buffer()[0] += T(1);
  run_backward();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---- ops ----

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  std::vector<T> out(m * n);
  const auto ai = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k),
             ni = static_cast<Eigen::Index>(n);
  MapMat<T>(out.data(), ai, ni).noalias() =
      MapConstMat<T>(a.data().data(), ai, ki) * MapConstMat<T>(b.data().data(), ki, ni);
  auto result = BasicTensor<T>::from({m, n}, std::move(out));
  check_finite(result, "matmul");
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    record(tape, "matmul", {&a, &b}, result, [an = a.handle(), bn = b.handle(), on = result.handle(), ai, ki, ni] {
      MapConstMat<T> g(on->grad.data(), ai, ni);
      if (auto* ga = grad_of(an))
        MapMat<T>(ga->data(), ai, ki).noalias() += g * MapConstMat<T>(bn->value.data(), ki, ni).transpose();
      if (auto* gb = grad_of(bn))
        MapMat<T>(gb->data(), ki, ni).noalias() += MapConstMat<T>(an->value.data(), ai, ki).transpose() * g;
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryOp::add, "add");
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryOp::sub, "sub");
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryOp::mul, "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto result = BasicTensor<T>::from(a.shape(), std::move(out));
  if (Tape* tape = recording_tape<T>({&a})) {
    record(tape, "scale", {&a}, result, [an = a.handle(), on = result.handle(), factor] {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * on->grad[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * T(std::numbers::sqrt2 / 2)));
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  check_finite(result, "gelu");
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "gelu", {&x}, result, [xn = x.handle(), on = result.handle()] {
      auto& gx = xn->grad_buffer();
      const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = xn->value[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = xv[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      T z = 0;
      for (std::size_t j = 0; j < s.n; ++j) z += (out[base + j * s.inner] = std::exp(xv[base + j * s.inner] - mx));
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  check_finite(result, "softmax");
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "softmax", {&x}, result, [xn = x.handle(), on = result.handle(), s] {
      auto& gx = xn->grad_buffer();
      const auto& y = on->value;
      const auto& g = on->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          T dot = 0;
          for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t q = base + j * s.inner;
            gx[q] += y[q] * (g[q] - dot);
          }
        }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, std::size_t axis, T eps) {
  const auto s = split_axis(x.shape(), axis, "layer_norm");
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  std::vector<T> inv_std(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mu = 0;
      for (std::size_t j = 0; j < s.n; ++j) mu += xv[base + j * s.inner];
      mu /= T(s.n);
      T var = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const T d = xv[base + j * s.inner] - mu;
        var += d * d;
      }
      var /= T(s.n);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[o * s.inner + i] = is;
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = (xv[base + j * s.inner] - mu) * is;
    }
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  check_finite(result, "layer_norm");
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "layer_norm", {&x}, result, [xn = x.handle(), on = result.handle(), s, inv_std = std::move(inv_std)] {
      auto& gx = xn->grad_buffer();
      const auto& y = on->value;
      const auto& g = on->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          T mg = 0, mgy = 0;
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t q = base + j * s.inner;
            mg += g[q];
            mgy += g[q] * y[q];
          }
          mg /= T(s.n);
          mgy /= T(s.n);
          const T is = inv_std[o * s.inner + i];
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t q = base + j * s.inner;
            gx[q] += is * (g[q] - mg - y[q] * mgy);
          }
        }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const auto xv = x.data();
  std::vector<T> mask(xv.size());
  const T keep_scale = T(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "dropout", {&x}, result, [xn = x.handle(), on = result.handle(), mask = std::move(mask)] {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * mask[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const std::size_t> ids) {
  require_matrix(table.shape(), "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  const auto tv = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab)
      throw DimensionError("embedding_lookup: id " + std::to_string(idx[r]) + " >= table size " + std::to_string(vocab));
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto result = BasicTensor<T>::from({idx.size(), d}, std::move(out));
  if (Tape* tape = recording_tape<T>({&table})) {
    record(tape, "embedding_lookup", {&table}, result, [tn = table.handle(), on = result.handle(), idx = std::move(idx), d] {
      auto& gt = tn->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gt[idx[r] * d + c] += on->grad[r * d + c];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i)
      if (i != axis && p.dim(i) != out_shape[i])
        throw DimensionError("concat: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(out_shape));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const auto s = split_axis(out_shape, axis, "concat");
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets, lengths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    lengths.push_back(p.dim(axis));
    const std::size_t block = p.dim(axis) * s.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * s.inner + off * s.inner));
    off += p.dim(axis);
  }
  auto result = BasicTensor<T>::from(out_shape, std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape != nullptr && any) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.handle());
    result.handle()->requires_grad = true;
    Tape::Record r;
    r.op = "concat";
    for (const auto& p : parts) r.inputs.push_back(p.node_id());
    r.output = result.node_id();
    NodePtr<T> on = result.handle();
    r.reached = [on] { return !on->grad.empty(); };
    r.backward = [nodes = std::move(nodes), on, offsets = std::move(offsets), lengths = std::move(lengths), s, total] {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        auto* g = grad_of(nodes[k]);
        if (!g) continue;
        const std::size_t block = lengths[k] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t q = 0; q < block; ++q)
            (*g)[o * block + q] += on->grad[o * total * s.inner + offsets[k] * s.inner + q];
      }
    };
    tape->push(std::move(r));
  }
  return result;
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_axis(x.shape(), axis, "slice");
  if (begin > end || end > s.n)
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                         shape_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * s.inner;
  std::vector<T> out(s.outer * block);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * s.n * s.inner + begin * s.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  auto result = BasicTensor<T>::from(out_shape, std::move(out));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "slice", {&x}, result, [xn = x.handle(), on = result.handle(), s, begin, block] {
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t q = 0; q < block; ++q) gx[o * s.n * s.inner + begin * s.inner + q] += on->grad[o * block + q];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  require_matrix(x.shape(), "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  auto result = BasicTensor<T>::from({c, r}, std::move(out));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "transpose", {&x}, result, [xn = x.handle(), on = result.handle(), r, c] {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += on->grad[j * r + i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  auto result = BasicTensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "reshape", {&x}, result, [xn = x.handle(), on = result.handle()] {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis, T eps) {
  if (a.shape() != b.shape())
    throw DimensionError("cosine_similarity: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const auto s = split_axis(a.shape(), axis, "cosine_similarity");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(s.outer * s.inner), na(out.size()), nb(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T dot = 0, sa = 0, sb = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t q = base + j * s.inner;
        dot += av[q] * bv[q];
        sa += av[q] * av[q];
        sb += bv[q] * bv[q];
      }
      const std::size_t r = o * s.inner + i;
      na[r] = std::sqrt(sa);
      nb[r] = std::sqrt(sb);
      out[r] = dot / (std::max(na[r], eps) * std::max(nb[r], eps));
    }
  auto result = BasicTensor<T>::from(out_shape, std::move(out));
  check_finite(result, "cosine_similarity");
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    record(tape, "cosine_similarity", {&a, &b}, result,
           [an = a.handle(), bn = b.handle(), on = result.handle(), s, na = std::move(na), nb = std::move(nb), eps] {
             auto* ga = grad_of(an);
             auto* gb = grad_of(bn);
             for (std::size_t o = 0; o < s.outer; ++o)
               for (std::size_t i = 0; i < s.inner; ++i) {
                 const std::size_t r = o * s.inner + i;
                 const T g = on->grad[r];
                 const T c = on->value[r];
                 const T denom = std::max(na[r], eps) * std::max(nb[r], eps);
                 const T ca = na[r] > eps ? c / (na[r] * na[r]) : T(0);
                 const T cb = nb[r] > eps ? c / (nb[r] * nb[r]) : T(0);
                 const std::size_t base = o * s.n * s.inner + i;
                 for (std::size_t j = 0; j < s.n; ++j) {
                   const std::size_t q = base + j * s.inner;
                   const T x = an->value[q], y = bn->value[q];
                   if (ga) (*ga)[q] += g * (y / denom - ca * x);
                   if (gb) (*gb)[q] += g * (x / denom - cb * y);
                 }
               }
           });
  }
  return result;
}

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, std::size_t axis, T eps) {
  const auto s = split_axis(x.shape(), axis, "l2_normalize");
  const auto xv = x.data();
  std::vector<T> out(xv.size()), norms(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T ss = 0;
      for (std::size_t j = 0; j < s.n; ++j) ss += xv[base + j * s.inner] * xv[base + j * s.inner];
      const T nrm = std::sqrt(ss);
      norms[o * s.inner + i] = nrm;
      const T denom = std::max(nrm, eps);
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = xv[base + j * s.inner] / denom;
    }
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "l2_normalize", {&x}, result, [xn = x.handle(), on = result.handle(), s, norms = std::move(norms), eps] {
      auto& gx = xn->grad_buffer();
      const auto& y = on->value;
      const auto& g = on->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          const T nrm = norms[o * s.inner + i];
          const T denom = std::max(nrm, eps);
          T dot = 0;
          if (nrm > eps)
            for (std::size_t j = 0; j < s.n; ++j) dot += y[base + j * s.inner] * g[base + j * s.inner];
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t q = base + j * s.inner;
            gx[q] += (g[q] - y[q] * dot) / denom;
          }
        }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  auto result = BasicTensor<T>::from({}, {total});
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "sum", {&x}, result, [xn = x.handle(), on = result.handle()] {
      auto& gx = xn->grad_buffer();
      const T g = on->grad[0];
      for (auto& v : gx) v += g;
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  require_matrix(x.shape(), "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * d);
  const auto xv = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto result = BasicTensor<T>::from({idx.size(), d}, std::move(out));
  if (Tape* tape = recording_tape<T>({&x})) {
    record(tape, "gather_rows", {&x}, result, [xn = x.handle(), on = result.handle(), idx = std::move(idx), d] {
      auto& gx = xn->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[idx[r] * d + c] += on->grad[r * d + c];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> replace_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows, const BasicTensor<T>& row) {
  require_matrix(x.shape(), "replace_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (row.numel() != d)
    throw DimensionError("replace_rows: row of " + std::to_string(row.numel()) + " values for width " + std::to_string(d));
  std::vector<char> replaced(n, 0);
  for (const auto r : rows) {
    if (r >= n) throw DimensionError("replace_rows: row " + std::to_string(r) + " out of range");
    replaced[r] = 1;
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto rv = row.data();
  for (std::size_t r = 0; r < n; ++r)
    if (replaced[r]) std::copy(rv.begin(), rv.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
  auto result = BasicTensor<T>::from(x.shape(), std::move(out));
  if (Tape* tape = recording_tape<T>({&x, &row})) {
    record(tape, "replace_rows", {&x, &row}, result,
           [xn = x.handle(), rn = row.handle(), on = result.handle(), replaced = std::move(replaced), n, d] {
             auto* gx = grad_of(xn);
             auto* gr = grad_of(rn);
             for (std::size_t r = 0; r < n; ++r)
               for (std::size_t c = 0; c < d; ++c) {
                 const T g = on->grad[r * d + c];
                 if (replaced[r]) {
                   if (gr) (*gr)[c] += g;
                 } else if (gx) {
                   (*gx)[r * d + c] += g;
                 }
               }
           });
  }
  return result;
}

template <typename T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                      Conv1dOptions opt) {
  require_matrix(x.shape(), "conv1d");
  if (weight.rank() != 3) throw DimensionError("conv1d: weight must be [Cout, Cin/groups, K]");
  const std::size_t len = x.dim(0), cin = x.dim(1);
  const std::size_t cout = weight.dim(0), cin_g = weight.dim(1), kernel = weight.dim(2);
  const std::size_t groups = opt.groups;
  if (groups == 0 || opt.stride == 0) throw ContractError("conv1d: stride and groups must be positive");
  if (cin != cin_g * groups || cout % groups != 0)
    throw DimensionError("conv1d: channels " + std::to_string(cin) + " incompatible with weight " +
                         shape_string(weight.shape()) + " and " + std::to_string(groups) + " groups");
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != cout))
    throw DimensionError("conv1d: bias must have " + std::to_string(cout) + " entries");
  const std::size_t padded = len + 2 * opt.padding;
  if (padded < kernel)
    throw DimensionError("conv1d: input length " + std::to_string(len) + " shorter than kernel " + std::to_string(kernel));
  const std::size_t lout = (padded - kernel) / opt.stride + 1;
  const std::size_t cout_g = cout / groups, width = cin_g * kernel;
  const auto xv = x.data();

  std::vector<RowMat<T>> cols(groups);
  std::vector<T> out(lout * cout, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    auto& c = cols[g];
    c.setZero(static_cast<Eigen::Index>(lout), static_cast<Eigen::Index>(width));
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t ci = 0; ci < cin_g; ++ci)
        for (std::size_t kk = 0; kk < kernel; ++kk) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * opt.stride + kk) - static_cast<std::ptrdiff_t>(opt.padding);
          if (src >= 0 && static_cast<std::size_t>(src) < len)
            c(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(ci * kernel + kk)) =
                xv[static_cast<std::size_t>(src) * cin + g * cin_g + ci];
        }
    MapConstMat<T> w(weight.data().data() + g * cout_g * width, static_cast<Eigen::Index>(cout_g), static_cast<Eigen::Index>(width));
    StridedMat<T> o(out.data() + g * cout_g, static_cast<Eigen::Index>(lout), static_cast<Eigen::Index>(cout_g),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(cout)));
    o.noalias() = c * w.transpose();
  }
  if (bias != nullptr) {
    const auto bv = bias->data();
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t co = 0; co < cout; ++co) out[t * cout + co] += bv[co];
  }
  auto result = BasicTensor<T>::from({lout, cout}, std::move(out));
  check_finite(result, "conv1d");
  if (Tape* tape = recording_tape<T>({&x, &weight, bias})) {
    NodePtr<T> bn = bias != nullptr ? bias->handle() : nullptr;
    record(tape, "conv1d", {&x, &weight, bias}, result,
           [xn = x.handle(), wn = weight.handle(), bn, on = result.handle(), cols = std::move(cols), opt, len, cin, cout,
            cin_g, kernel, cout_g, width, lout, groups] {
             auto* gx = grad_of(xn);
             auto* gw = grad_of(wn);
             for (std::size_t g = 0; g < groups; ++g) {
               StridedConstMat<T> go(on->grad.data() + g * cout_g, static_cast<Eigen::Index>(lout),
                                     static_cast<Eigen::Index>(cout_g), Eigen::OuterStride<>(static_cast<Eigen::Index>(cout)));
               if (gw)
                 MapMat<T>(gw->data() + g * cout_g * width, static_cast<Eigen::Index>(cout_g), static_cast<Eigen::Index>(width))
                     .noalias() += go.transpose() * cols[g];
               if (gx) {
                 MapConstMat<T> w(wn->value.data() + g * cout_g * width, static_cast<Eigen::Index>(cout_g),
                                  static_cast<Eigen::Index>(width));
                 const RowMat<T> dcols = go * w;
                 for (std::size_t t = 0; t < lout; ++t)
                   for (std::size_t ci = 0; ci < cin_g; ++ci)
                     for (std::size_t kk = 0; kk < kernel; ++kk) {
                       const std::ptrdiff_t src =
                           static_cast<std::ptrdiff_t>(t * opt.stride + kk) - static_cast<std::ptrdiff_t>(opt.padding);
                       if (src >= 0 && static_cast<std::size_t>(src) < len)
                         (*gx)[static_cast<std::size_t>(src) * cin + g * cin_g + ci] +=
                             dcols(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(ci * kernel + kk));
                     }
               }
             }
             if (bn && bn->requires_grad) {
               auto& gb = bn->grad_buffer();
               for (std::size_t t = 0; t < lout; ++t)
                 for (std::size_t co = 0; co < cout; ++co) gb[co] += on->grad[t * cout + co];
             }
           });
  }
  return result;
}

template <typename T>
BasicTensor<T> weight_norm(const BasicTensor<T>& v, const BasicTensor<T>& g) {
  if (v.rank() != 3 || g.rank() != 1 || g.dim(0) != v.dim(2))
    throw DimensionError("weight_norm: v " + shape_string(v.shape()) + " and g " + shape_string(g.shape()));
  const std::size_t rows = v.dim(0) * v.dim(1), kernel = v.dim(2);
  const auto vv = v.data();
  const auto gv = g.data();
  std::vector<T> norms(kernel, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < kernel; ++k) norms[k] += vv[r * kernel + k] * vv[r * kernel + k];
  for (auto& n : norms) n = std::sqrt(n);
  std::vector<T> out(vv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < kernel; ++k) out[r * kernel + k] = gv[k] * vv[r * kernel + k] / norms[k];
  auto result = BasicTensor<T>::from(v.shape(), std::move(out));
  check_finite(result, "weight_norm");
  if (Tape* tape = recording_tape<T>({&v, &g})) {
    record(tape, "weight_norm", {&v, &g}, result,
           [vn = v.handle(), gn = g.handle(), on = result.handle(), norms = std::move(norms), rows, kernel] {
             std::vector<T> proj(kernel, T(0));  // sum(dw * v_hat) per kernel tap
             for (std::size_t r = 0; r < rows; ++r)
               for (std::size_t k = 0; k < kernel; ++k)
                 proj[k] += on->grad[r * kernel + k] * vn->value[r * kernel + k] / norms[k];
             if (auto* gg = grad_of(gn))
               for (std::size_t k = 0; k < kernel; ++k) (*gg)[k] += proj[k];
             if (auto* gv = grad_of(vn))
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t k = 0; k < kernel; ++k) {
                   const std::size_t q = r * kernel + k;
                   const T vhat = vn->value[q] / norms[k];
                   (*gv)[q] += gn->value[k] / norms[k] * (on->grad[q] - proj[k] * vhat);
                 }
           });
  }
  return result;
}

template <typename T>
BasicTensor<T> segment_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                 std::span<const Segment> segments, std::size_t n_heads) {
  require_matrix(q.shape(), "segment_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("segment_attention: q, k, v shapes differ");
  const std::size_t rows = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("segment_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  std::vector<Segment> segs(segments.begin(), segments.end());
  for (const auto& s : segs)
    if (s.offset + s.length > rows) throw DimensionError("segment_attention: segment exceeds rows");

  const auto di = static_cast<Eigen::Index>(d), dhi = static_cast<Eigen::Index>(dh);
  std::vector<T> out(rows * d, T(0));
  std::vector<RowMat<T>> probs;
  probs.reserve(segs.size() * n_heads);
  for (const auto& s : segs) {
    const auto li = static_cast<Eigen::Index>(s.length);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base = s.offset * d + h * dh;
      StridedConstMat<T> qm(q.data().data() + base, li, dhi, Eigen::OuterStride<>(di));
      StridedConstMat<T> km(k.data().data() + base, li, dhi, Eigen::OuterStride<>(di));
      StridedConstMat<T> vm(v.data().data() + base, li, dhi, Eigen::OuterStride<>(di));
      RowMat<T> p = (qm * km.transpose()) * scale_factor;
      for (Eigen::Index r = 0; r < li; ++r) {
        auto row = p.row(r);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      StridedMat<T>(out.data() + base, li, dhi, Eigen::OuterStride<>(di)).noalias() = p * vm;
      probs.push_back(std::move(p));
    }
  }
  auto result = BasicTensor<T>::from({rows, d}, std::move(out));
  check_finite(result, "segment_attention");
  if (Tape* tape = recording_tape<T>({&q, &k, &v})) {
    record(tape, "segment_attention", {&q, &k, &v}, result,
           [qn = q.handle(), kn = k.handle(), vn = v.handle(), on = result.handle(), segs = std::move(segs),
            probs = std::move(probs), n_heads, d, dh, scale_factor] {
             auto* gq = grad_of(qn);
             auto* gk = grad_of(kn);
             auto* gv = grad_of(vn);
             const auto di = static_cast<Eigen::Index>(d), dhi = static_cast<Eigen::Index>(dh);
             std::size_t pi = 0;
             for (const auto& s : segs) {
               const auto li = static_cast<Eigen::Index>(s.length);
               for (std::size_t h = 0; h < n_heads; ++h, ++pi) {
                 const std::size_t base = s.offset * d + h * dh;
                 const RowMat<T>& p = probs[pi];
                 StridedConstMat<T> go(on->grad.data() + base, li, dhi, Eigen::OuterStride<>(di));
                 StridedConstMat<T> qm(qn->value.data() + base, li, dhi, Eigen::OuterStride<>(di));
                 StridedConstMat<T> km(kn->value.data() + base, li, dhi, Eigen::OuterStride<>(di));
                 StridedConstMat<T> vm(vn->value.data() + base, li, dhi, Eigen::OuterStride<>(di));
                 if (gv) StridedMat<T>(gv->data() + base, li, dhi, Eigen::OuterStride<>(di)).noalias() += p.transpose() * go;
                 RowMat<T> dp = go * vm.transpose();
                 const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * p.array()).rowwise().sum();
                 RowMat<T> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale_factor;
                 if (gq) StridedMat<T>(gq->data() + base, li, dhi, Eigen::OuterStride<>(di)).noalias() += ds * km;
                 if (gk) StridedMat<T>(gk->data() + base, li, dhi, Eigen::OuterStride<>(di)).noalias() += ds.transpose() * qm;
               }
             }
           });
  }
  return result;
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  require_matrix(logits.shape(), "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m) throw DimensionError("softmax_cross_entropy: target count differs from rows");
  if (m == 0) throw ContractError("softmax_cross_entropy: no rows");
  const auto lv = logits.data();
  std::vector<T> probs(m * k);
  std::vector<int> tgt(targets.begin(), targets.end());
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= k)
      throw ContractError("softmax_cross_entropy: target " + std::to_string(tgt[r]) + " outside [0, " + std::to_string(k) + ")");
    const T* row = lv.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t c = 0; c < k; ++c) z += (probs[r * k + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] /= z;
    total += mx + std::log(z) - row[tgt[r]];
  }
  auto result = BasicTensor<T>::from({}, {total / T(m)});
  check_finite(result, "softmax_cross_entropy");
  if (Tape* tape = recording_tape<T>({&logits})) {
    record(tape, "softmax_cross_entropy", {&logits}, result,
           [ln = logits.handle(), on = result.handle(), probs = std::move(probs), tgt = std::move(tgt), m, k] {
             auto& gl = ln->grad_buffer();
             const T g = on->grad[0] / T(m);
             for (std::size_t r = 0; r < m; ++r)
               for (std::size_t c = 0; c < k; ++c)
                 gl[r * k + c] += g * (probs[r * k + c] - (static_cast<int>(c) == tgt[r] ? T(1) : T(0)));
           });
  }
  return result;
}

#define MSHUBERT_INSTANTIATE(T)                                                                                   \
  template void Tape::backward<T>(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                         \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                             \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, std::size_t, T);                                       \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, bool);                                      \
  template BasicTensor<T> embedding_lookup(const BasicTensor<T>&, std::span<const std::size_t>);                   \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                                 \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                   \
  template BasicTensor<T> cosine_similarity(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, T);         \
  template BasicTensor<T> l2_normalize(const BasicTensor<T>&, std::size_t, T);                                     \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);                        \
  template BasicTensor<T> replace_rows(const BasicTensor<T>&, std::span<const std::size_t>, const BasicTensor<T>&); \
  template BasicTensor<T> conv1d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*, Conv1dOptions); \
  template BasicTensor<T> weight_norm(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> segment_attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                            std::span<const Segment>, std::size_t);                                \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);

MSHUBERT_INSTANTIATE(double)
MSHUBERT_INSTANTIATE(float)

#undef MSHUBERT_INSTANTIATE

}  // namespace mshubert
