#include "deformpic/tensor.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "deformpic/chamfer_kernel.hpp"

namespace deformpic {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void check_finite(const char* op, std::span<const T> values) {
  // v - v is NaN exactly for inf and NaN; the sum stays 0 otherwise.
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> a(values.data(), static_cast<Eigen::Index>(values.size()));
  if (!values.empty() && (a - a).sum() != T(0)) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
}

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, Buffer<T> values, std::vector<NodePtr<T>> inputs,
                  std::function<void(TensorNode<T>&)> backward) {
  check_finite<T>(op, values);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<Buffer<T>>(std::move(values));
  node->op = op;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& n) { return n->requires_grad; });
  if (any && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Maps flat output indices to flat operand indices under broadcasting.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& operand, const Shape& out) {
    const std::size_t n_op = shape_numel(operand);
    const std::size_t n_out = shape_numel(out);
    if (operand == out) {
      mode_ = Mode::same;
    } else if (n_op == 1) {
      mode_ = Mode::scalar;
    } else if (is_suffix(operand, out)) {
      mode_ = Mode::suffix;
      period_ = n_op;
    } else {
      mode_ = Mode::general;
      const std::size_t r = out.size();
      const std::size_t off = r - operand.size();
      std::vector<std::size_t> strides(r, 0);
      std::size_t s = 1;
      for (std::size_t i = r; i-- > off;) {
        const std::size_t d = operand[i - off];
        strides[i] = d == 1 ? 0 : s;
        s *= d;
      }
      map_.resize(n_out);
      std::vector<std::size_t> coord(r, 0);
      for (std::size_t flat = 0; flat < n_out; ++flat) {
        std::size_t idx = 0;
        for (std::size_t i = 0; i < r; ++i) idx += coord[i] * strides[i];
        map_[flat] = idx;
        for (std::size_t i = r; i-- > 0;) {
          if (++coord[i] < out[i]) break;
          coord[i] = 0;
        }
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (mode_) {
      case Mode::same: return i;
      case Mode::scalar: return 0;
      case Mode::suffix: return i % period_;
      case Mode::general: return map_[i];
    }
    return 0;
  }

  bool scalar() const { return mode_ == Mode::scalar; }
  bool general() const { return mode_ == Mode::general; }
  /// Repeat length of a same/suffix operand (n for same).
  std::size_t period(std::size_t n) const { return mode_ == Mode::suffix ? period_ : n; }

 private:
  enum class Mode { same, scalar, suffix, general };

  static bool is_suffix(const Shape& operand, const Shape& out) {
    if (operand.size() > out.size()) return false;
    return std::equal(operand.begin(), operand.end(), out.end() - static_cast<std::ptrdiff_t>(operand.size()));
  }

  Mode mode_ = Mode::same;
  std::size_t period_ = 1;
  std::vector<std::size_t> map_;
};

template <bool AS, bool BS, typename F>
void blocked_loop(std::size_t n, std::size_t block, std::size_t pa, std::size_t pb, F f) {
  for (std::size_t o = 0; o < n; o += block) {
    const std::size_t ba = AS ? 0 : o % pa;
    const std::size_t bb = BS ? 0 : o % pb;
    for (std::size_t j = 0; j < block; ++j) f(o + j, AS ? 0 : ba + j, BS ? 0 : bb + j);
  }
}

/// Calls f(out, a, b) for every output index with the broadcast operand indices.
template <typename F>
void for_each_broadcast(const BroadcastIndex& ia, const BroadcastIndex& ib, std::size_t n, F f) {
  if (n == 0) return;
  if (ia.general() || ib.general()) {
    for (std::size_t i = 0; i < n; ++i) f(i, ia(i), ib(i));
    return;
  }
  const std::size_t pa = ia.scalar() ? n : ia.period(n);
  const std::size_t pb = ib.scalar() ? n : ib.period(n);
  const std::size_t block = std::min(pa, pb);
  if (ia.scalar() && ib.scalar()) {
    blocked_loop<true, true>(n, block, pa, pb, f);
  } else if (ia.scalar()) {
    blocked_loop<true, false>(n, block, pa, pb, f);
  } else if (ib.scalar()) {
    blocked_loop<false, true>(n, block, pa, pb, f);
  } else {
    blocked_loop<false, false>(n, block, pa, pb, f);
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  const std::size_t n = shape_numel(out_shape);
  auto ia = std::make_shared<BroadcastIndex>(a.shape(), out_shape);
  auto ib = std::make_shared<BroadcastIndex>(b.shape(), out_shape);
  const T* __restrict av = a.node()->value->data();
  const T* __restrict bv = b.node()->value->data();
  Buffer<T> out(n);
  T* __restrict ov = out.data();
  for_each_broadcast(*ia, *ib, n, [&](std::size_t i, std::size_t ja, std::size_t jb) { ov[i] = fwd(av[ja], bv[jb]); });
  return make_op<T>(op, out_shape, std::move(out), {a.node(), b.node()}, [ia, ib, n, da, db](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T* __restrict g = self.grad.data();
    const T* __restrict av = na.value->data();
    const T* __restrict bv = nb.value->data();
    if (na.requires_grad) {
      T* __restrict ga = na.ensure_grad().data();
      for_each_broadcast(*ia, *ib, n,
                         [&](std::size_t i, std::size_t ja, std::size_t jb) { ga[ja] += g[i] * da(av[ja], bv[jb]); });
    }
    if (nb.requires_grad) {
      T* __restrict gb = nb.ensure_grad().data();
      for_each_broadcast(*ia, *ib, n,
                         [&](std::size_t i, std::size_t ja, std::size_t jb) { gb[jb] += g[i] * db(av[ja], bv[jb]); });
    }
  });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = *x.node()->value;
  Buffer<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_op<T>(op, x.shape(), std::move(out), {x.node()}, [deriv](TensorNode<T>& self) {
    auto& nx = *self.inputs[0];
    auto& gx = nx.ensure_grad();
    const auto& xv = *nx.value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i]);
  });
}

/// (outer, axis length, inner) decomposition around one axis.
struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  return {prod(s, 0, axis), s[axis], prod(s, axis + 1, s.size())};
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) { return prod(shape, 0, shape.size()); }

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in " + shape_string(shape));
  }
  check_finite<T>("from_data", data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::make_shared<Buffer<T>>(data.begin(), data.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  return node_->shape[normalize_axis(axis, rank())];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->inputs.empty()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return *node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return (*node_->value)[0];
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_string(shape()));
  if (!node_->requires_grad) return;
  if (node_->backward_consumed) throw std::logic_error("backward() called twice on the same graph");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  node_->backward_consumed = true;
}

template <typename T>
Tensor<T> Tensor<T>::share_leaf() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename T>
std::vector<std::string> Tensor<T>::graph_ops() const {
  std::vector<const Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<const Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      const Node* child = n->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  std::vector<std::string> ops;
  ops.reserve(order.size());
  for (const Node* n : order) ops.push_back(std::string(n->op) + shape_string(n->shape));
  return ops;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary_op<T>(
      "add_scalar", a, [offset](T x) { return x + offset; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  static constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  const auto& xv = *x.node()->value;
  const auto n = static_cast<Eigen::Index>(xv.size());
  const Eigen::Map<const Arr> xa(xv.data(), n);
  // Phi(x) is kept for the backward pass.
  auto cdf = std::make_shared<Buffer<T>>(xv.size());
  Eigen::Map<Arr> ca(cdf->data(), n);
  ca = T(0.5) * (T(1) + (xa * inv_sqrt2).erf());
  Buffer<T> out(xv.size());
  Eigen::Map<Arr>(out.data(), n) = xa * ca;
  return make_op<T>("gelu", x.shape(), std::move(out), {x.node()}, [cdf](TensorNode<T>& self) {
    auto& nx = *self.inputs[0];
    const auto n = static_cast<Eigen::Index>(nx.value->size());
    const Eigen::Map<const Arr> xa(nx.value->data(), n);
    const Eigen::Map<const Arr> ca(cdf->data(), n);
    const Eigen::Map<const Arr> ga(self.grad.data(), n);
    Eigen::Map<Arr>(nx.ensure_grad().data(), n) += ga * (ca + xa * inv_sqrt_2pi * (T(-0.5) * xa * xa).exp());
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape out_shape = broadcast_shapes(a_batch, b_batch, "matmul");
  const std::size_t batches = shape_numel(out_shape);
  auto ia = std::make_shared<BroadcastIndex>(a_batch, out_shape);
  auto ib = std::make_shared<BroadcastIndex>(b_batch, out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);

  Buffer<T> out(batches * m * n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t bi = 0; bi < batches; ++bi) {
    MutMap<T>(out.data() + bi * m * n, m, n).noalias() =
        ConstMap<T>(av + (*ia)(bi) * m * k, m, k) * ConstMap<T>(bv + (*ib)(bi) * k * n, k, n);
  }
  return make_op<T>("matmul", out_shape, std::move(out), {a.node(), b.node()},
                    [=](TensorNode<T>& self) {
                      auto& na = *self.inputs[0];
                      auto& nb = *self.inputs[1];
                      const T* g = self.grad.data();
                      for (std::size_t bi = 0; bi < batches; ++bi) {
                        ConstMap<T> gm(g + bi * m * n, m, n);
                        const std::size_t ao = (*ia)(bi) * m * k;
                        const std::size_t bo = (*ib)(bi) * k * n;
                        if (na.requires_grad) {
                          MutMap<T>(na.ensure_grad().data() + ao, m, k).noalias() +=
                              gm * ConstMap<T>(nb.value->data() + bo, k, n).transpose();
                        }
                        if (nb.requires_grad) {
                          MutMap<T>(nb.ensure_grad().data() + bo, k, n).noalias() +=
                              ConstMap<T>(na.value->data() + ao, m, k).transpose() * gm;
                        }
                      }
                    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const std::size_t d = x.dim(-1);
  const bool affine = gamma.defined();
  if (affine && (gamma.shape() != Shape{d} || !beta.defined() || beta.shape() != Shape{d})) {
    throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  const auto& xv = *x.node()->value;
  auto xhat = std::make_shared<Buffer<T>>(xv.size());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Buffer<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>(row[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = affine ? h * gamma.data()[j] + beta.data()[j] : h;
    }
  }
  std::vector<NodePtr<T>> inputs{x.node()};
  if (affine) {
    inputs.push_back(gamma.node());
    inputs.push_back(beta.node());
  }
  return make_op<T>("layer_norm", x.shape(), std::move(out), std::move(inputs),
                    [xhat, rstd, rows, d, affine](TensorNode<T>& self) {
                      auto& nx = *self.inputs[0];
                      const T* g = self.grad.data();
                      const T* gam = affine ? self.inputs[1]->value->data() : nullptr;
                      if (affine && self.inputs[1]->requires_grad) {
                        auto& gg = self.inputs[1]->ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                      }
                      if (affine && self.inputs[2]->requires_grad) {
                        auto& gb = self.inputs[2]->ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                      }
                      if (!nx.requires_grad) return;
                      auto& gx = nx.ensure_grad();
                      Buffer<T> dh(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        T mean_dh = 0, mean_dh_h = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                          dh[j] = g[r * d + j] * (affine ? gam[j] : T(1));
                          mean_dh += dh[j];
                          mean_dh_h += dh[j] * (*xhat)[r * d + j];
                        }
                        mean_dh /= static_cast<T>(d);
                        mean_dh_h /= static_cast<T>(d);
                        const T rs = (*rstd)[r];
                        for (std::size_t j = 0; j < d; ++j) {
                          gx[r * d + j] += rs * (dh[j] - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
                        }
                      }
                    });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  const auto& xv = *x.node()->value;
  Buffer<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T* o = out.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) total += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= total;
  }
  auto y = std::make_shared<Buffer<T>>(out);
  return make_op<T>("softmax", x.shape(), std::move(out), {x.node()}, [y, rows, d](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * (*y)[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (*y)[r * d + j] * (self.grad[r * d + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank()) {
    throw ShapeError("softmax_attention: q, k, v must share rank >= 2");
  }
  const Shape batch(q.shape().begin(), q.shape().end() - 2);
  if (Shape(k.shape().begin(), k.shape().end() - 2) != batch || Shape(v.shape().begin(), v.shape().end() - 2) != batch) {
    throw ShapeError("softmax_attention: batch dimensions differ");
  }
  const std::size_t nq = q.dim(-2), d = q.dim(-1), nk = k.dim(-2), dv = v.dim(-1);
  if (k.dim(-1) != d || v.dim(-2) != nk) {
    throw ShapeError("softmax_attention: incompatible shapes " + shape_string(q.shape()) + ", " +
                     shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const std::size_t batches = shape_numel(batch);
  const T s = T(1) / std::sqrt(static_cast<T>(d));
  auto probs = std::make_shared<Buffer<T>>(batches * nq * nk);
  Buffer<T> out(batches * nq * dv);
  for (std::size_t b = 0; b < batches; ++b) {
    MutMap<T> p(probs->data() + b * nq * nk, nq, nk);
    p.noalias() = s * (ConstMap<T>(q.data().data() + b * nq * d, nq, d) *
                       ConstMap<T>(k.data().data() + b * nk * d, nk, d).transpose());
    for (std::size_t i = 0; i < nq; ++i) {
      auto row = p.row(static_cast<Eigen::Index>(i));
      row = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    MutMap<T>(out.data() + b * nq * dv, nq, dv).noalias() = p * ConstMap<T>(v.data().data() + b * nk * dv, nk, dv);
  }
  Shape out_shape = batch;
  out_shape.push_back(nq);
  out_shape.push_back(dv);
  return make_op<T>("softmax_attention", out_shape, std::move(out), {q.node(), k.node(), v.node()},
                    [=](TensorNode<T>& self) {
                      auto& nqn = *self.inputs[0];
                      auto& nkn = *self.inputs[1];
                      auto& nvn = *self.inputs[2];
                      RowMat<T> dp(nq, nk);
                      for (std::size_t b = 0; b < batches; ++b) {
                        ConstMap<T> go(self.grad.data() + b * nq * dv, nq, dv);
                        ConstMap<T> p(probs->data() + b * nq * nk, nq, nk);
                        ConstMap<T> qm(nqn.value->data() + b * nq * d, nq, d);
                        ConstMap<T> km(nkn.value->data() + b * nk * d, nk, d);
                        ConstMap<T> vm(nvn.value->data() + b * nk * dv, nk, dv);
                        if (nvn.requires_grad) {
                          MutMap<T>(nvn.ensure_grad().data() + b * nk * dv, nk, dv).noalias() += p.transpose() * go;
                        }
                        if (!nqn.requires_grad && !nkn.requires_grad) continue;
                        dp.noalias() = go * vm.transpose();
                        for (std::size_t i = 0; i < nq; ++i) {
                          const auto ii = static_cast<Eigen::Index>(i);
                          const T dot = dp.row(ii).dot(p.row(ii));
                          dp.row(ii) = (p.row(ii).array() * (dp.row(ii).array() - dot)) * s;
                        }
                        if (nqn.requires_grad) {
                          MutMap<T>(nqn.ensure_grad().data() + b * nq * d, nq, d).noalias() += dp * km;
                        }
                        if (nkn.requires_grad) {
                          MutMap<T>(nkn.ensure_grad().data() + b * nk * d, nk, d).noalias() += dp.transpose() * qm;
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = x.node()->value;
  node->op = "reshape";
  if (x.requires_grad() && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = {x.node()};
    node->backward_fn = [](TensorNode<T>& self) {
      auto& gx = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axes length differs from rank");
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> coord(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*map)[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      src += strides[i];
      if (++coord[i] < out_shape[i]) break;
      src -= strides[i] * coord[i];
      coord[i] = 0;
    }
  }
  const auto& xv = *x.node()->value;
  Buffer<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)[i]];
  return make_op<T>("permute", out_shape, std::move(out), {x.node()}, [map](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: shapes " + shape_string(parts[0].shape()) + " and " + shape_string(s) + " differ off-axis");
      }
    }
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const std::size_t outer = prod(out_shape, 0, ax);
  const std::size_t inner = prod(out_shape, ax + 1, out_shape.size());
  const std::size_t total = out_shape[ax];
  Buffer<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<NodePtr<T>> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = *parts[p].node()->value;
    const std::size_t block = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * block, block, out.data() + o * total * inner + offset * inner);
    }
    offset += lens[p];
    inputs.push_back(parts[p].node());
  }
  return make_op<T>("concat", out_shape, std::move(out), std::move(inputs), [lens, outer, inner, total](TensorNode<T>& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      auto& np = *self.inputs[p];
      const std::size_t block = lens[p] * inner;
      if (np.requires_grad) {
        auto& gp = np.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * total * inner + offset * inner;
          T* dst = gp.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += lens[p];
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_string(x.shape()));
  }
  const AxisSplit sp = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t block = (end - begin) * sp.inner;
  Buffer<T> out(sp.outer * block);
  const auto& xv = *x.node()->value;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + o * sp.len * sp.inner + begin * sp.inner, block, out.data() + o * block);
  }
  return make_op<T>("slice", out_shape, std::move(out), {x.node()}, [sp, begin, block](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = gx.data() + o * sp.len * sp.inner + begin * sp.inner;
      const T* src = self.grad.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  if (x.rank() < 1 || rows.empty()) throw ShapeError("index_select: need rank >= 1 and at least one row");
  const std::size_t n = x.shape()[0];
  const std::size_t row = x.numel() / n;
  for (std::size_t r : rows) {
    if (r >= n) throw ShapeError("index_select: row " + std::to_string(r) + " out of range " + std::to_string(n));
  }
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Buffer<T> out(rows.size() * row);
  const auto& xv = *x.node()->value;
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xv.data() + rows[i] * row, row, out.data() + i * row);
  return make_op<T>("index_select", out_shape, std::move(out), {x.node()}, [rows, row](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < row; ++j) gx[rows[i] * row + j] += self.grad[i * row + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> max_pool_axis(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto& xv = *x.node()->value;
  Buffer<T> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      std::size_t best = base;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t idx = base + l * sp.inner;
        if (xv[idx] > xv[best]) best = idx;
      }
      out[o * sp.inner + i] = xv[best];
      (*arg)[o * sp.inner + i] = best;
    }
  }
  return make_op<T>("max_pool_axis", out_shape, std::move(out), {x.node()}, [arg](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto& xv = *x.node()->value;
  Buffer<T> out(sp.outer * sp.inner, T(0));
  const T inv = T(1) / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.len; ++l) {
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
    }
  }
  for (T& v : out) v *= inv;
  return make_op<T>("mean_axis", out_shape, std::move(out), {x.node()}, [sp, inv](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t l = 0; l < sp.len; ++l) {
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& xv = *x.node()->value;
  T total = 0;
  for (T v : xv) total += v;
  return make_op<T>("sum", Shape{}, Buffer<T>{total}, {x.node()}, [](TensorNode<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (T& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> chamfer_l2(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || a.dim(-1) != 3 || b.rank() != 2 || b.dim(-1) != 3) {
    throw ShapeError("chamfer_l2: expected [N,3] and [M,3], got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  auto match = std::make_shared<detail::ChamferMatch>(detail::chamfer_match<T>(a.data(), b.data()));
  const T value = static_cast<T>(match->value);
  return make_op<T>("chamfer_l2", Shape{}, Buffer<T>{value}, {a.node(), b.node()}, [match](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& av = *na.value;
    const auto& bv = *nb.value;
    const std::size_t n = av.size() / 3, m = bv.size() / 3;
    const T g = self.grad[0];
    const T wa = g * T(2) / static_cast<T>(n);
    const T wb = g * T(2) / static_cast<T>(m);
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = match->a_to_b[i];
        for (int c = 0; c < 3; ++c) ga[3 * i + c] += wa * (av[3 * i + c] - bv[3 * j + c]);
      }
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = match->b_to_a[j];
        for (int c = 0; c < 3; ++c) ga[3 * i + c] += wb * (av[3 * i + c] - bv[3 * j + c]);
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = match->b_to_a[j];
        for (int c = 0; c < 3; ++c) gb[3 * j + c] += wb * (bv[3 * j + c] - av[3 * i + c]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = match->a_to_b[i];
        for (int c = 0; c < 3; ++c) gb[3 * j + c] += wa * (bv[3 * j + c] - av[3 * i + c]);
      }
    }
  });
}

// ---------------------------------------------------------------------------

#define DEFORMPIC_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                               \
  template Tensor<T> softmax_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                      \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                               \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                      \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                          \
  template Tensor<T> index_select(const Tensor<T>&, const std::vector<std::size_t>&);                 \
  template Tensor<T> max_pool_axis(const Tensor<T>&, int);                                            \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                          \
  template Tensor<T> chamfer_l2(const Tensor<T>&, const Tensor<T>&);

DEFORMPIC_INSTANTIATE(float)
DEFORMPIC_INSTANTIATE(double)

#undef DEFORMPIC_INSTANTIATE

}  // namespace deformpic
