#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a new Tensor whose node records its inputs and a closure
// that propagates the output gradient back into them. The tape is rebuilt on
// each forward pass; backward() walks it once in reverse topological order.
// Values are immutable after creation, so reshape shares storage and
// share_leaf() hands out per-thread views of parameters with private grads.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "deformpic/errors.hpp"

namespace deformpic {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorised kernels peel loops according to the
/// address, so a fixed alignment keeps float results independent of where the
/// allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

template <typename T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<Buffer<T>> value;
  Buffer<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool backward_consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Axis size; negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->value->size(); }

  std::span<const T> data() const { return *node_->value; }
  /// Writable view of a leaf's values (initialization, optimizer updates).
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient after backward(); empty span if nothing reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  void backward() const;

  /// A new leaf sharing this tensor's storage with its own gradient buffer.
  Tensor share_leaf() const;
  /// A constant (non-differentiable) view of the same values.
  Tensor detach() const;

  const char* op_name() const { return node_->op; }
  /// Topologically ordered "op[shape]" records of the graph ending here.
  std::vector<std::string> graph_ops() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Elementwise (numpy broadcasting)

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Linear algebra and normalization

/// a[..., m, k] x b[..., k, n] -> [..., m, n]; batch dims broadcast.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Normalizes over the last axis. gamma/beta may be undefined (no affine).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

template <typename T> Tensor<T> softmax_lastdim(const Tensor<T>& x);

/// softmax(q k^T / sqrt(d)) v over the last two axes of [..., n, d] inputs.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

// ---------------------------------------------------------------------------
// Structural

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);
/// Selects entries along axis 0.
template <typename T> Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& rows);

// ---------------------------------------------------------------------------
// Reductions

/// Max over one axis (removed). Gradient goes to the first maximal element.
template <typename T> Tensor<T> max_pool_axis(const Tensor<T>& x, int axis);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, int axis);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Chamfer-L2 between point sets a[N,3] and b[M,3]; scalar output.
template <typename T> Tensor<T> chamfer_l2(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace deformpic
