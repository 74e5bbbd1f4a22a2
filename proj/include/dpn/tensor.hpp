#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpn {

// Dense N-dimensional array of scalars plus an optional same-shape gradient
// buffer. Feature maps use the canonical N x C x H x W layout, row-major.
//
// TensorT is a shallow handle: copies share the underlying node, which is how
// the tape identifies values across ops. All extents must be positive.
template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this node
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape, T fill = T(0)) {
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->data.assign(check_shape(node_->shape), fill);
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, T value) {
    return TensorT(std::move(shape), value);
  }

  static TensorT from_values(std::vector<int> shape, std::vector<T> values) {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    const std::int64_t n = check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != n) {
      throw std::invalid_argument("tensor: value count does not match shape");
    }
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const std::vector<int>& shape() const { return node()->shape; }
  int ndim() const { return static_cast<int>(node()->shape.size()); }
  int dim(int i) const { return node()->shape.at(static_cast<std::size_t>(i)); }

  std::int64_t numel() const {
    return static_cast<std::int64_t>(node()->data.size());
  }

  std::span<T> values() { return node()->data; }
  std::span<const T> values() const { return node()->data; }

  T* data() { return node()->data.data(); }
  const T* data() const { return node()->data.data(); }

  bool has_grad() const { return defined() && !node_->grad.empty(); }

  // Allocates a zeroed gradient buffer on first use.
  std::span<T> grad() {
    auto* n = node();
    if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
    return n->grad;
  }

  std::span<const T> grad_view() const {
    if (!has_grad()) throw std::logic_error("tensor: gradient not populated");
    return node_->grad;
  }

  void clear_grad() {
    if (defined()) node_->grad.clear();
  }

  // Deep copy (fresh storage, no gradient).
  TensorT clone() const {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node()->shape;
    t.node_->data = node()->data;
    return t;
  }

  bool all_finite() const {
    for (T v : node()->data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_node(const TensorT& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  static std::int64_t check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw std::invalid_argument("tensor: extents must be positive");
      n *= e;
    }
    return n;
  }

  TensorNode<T>* node() {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return node_.get();
  }
  const TensorNode<T>* node() const {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return node_.get();
  }

  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

std::string shape_string(const std::vector<int>& shape);

// One recorded forward op. Replaying records in reverse order visits each op
// exactly once and propagates gradients from any seeded output back to the
// leaves (typically the parameters).
template <typename T>
struct OpRecord {
  const char* op;
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  std::shared_ptr<TensorNode<T>> output;
  std::function<void()> backward;  // reads output->grad, accumulates into inputs
};

// Reverse-mode tape. Ops record themselves onto the ambient tape installed by
// TapeScope; with no ambient tape, forward runs without recording (inference).
// A tape is valid for one backward per recorded forward; reuse the object by
// calling clear() and re-running the forward.
template <typename T>
class Tape {
 public:
  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  void record(OpRecord<T> rec) { records_.push_back(std::move(rec)); }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  bool produced(const TensorT<T>& t) const {
    for (const auto& r : records_) {
      if (r.output == t.node_ptr()) return true;
    }
    return false;
  }

  // Standard entry point: seed a scalar loss with gradient 1 and sweep.
  void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    backward_seeded(loss, std::vector<T>{T(1)});
  }

  // Seeds an arbitrary recorded output with the given cotangent and sweeps.
  void backward_seeded(const TensorT<T>& out, std::span<const T> seed) {
    if (!produced(out)) {
      throw std::invalid_argument("backward: tensor was not produced on this tape");
    }
    if (static_cast<std::int64_t>(seed.size()) != out.numel()) {
      throw std::invalid_argument("backward: seed shape mismatch");
    }
    TensorT<T> mutable_out = out;
    auto g = mutable_out.grad();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output->grad.empty()) it->backward();
    }
  }

 private:
  std::vector<OpRecord<T>> records_;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
    Tape<T>::current() = &tape;
  }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Backward through the ambient tape; errors if none is installed.
template <typename T>
void backward(const TensorT<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

namespace detail {

template <typename T>
void record_op(const char* name, std::vector<TensorT<T>> inputs,
               const TensorT<T>& output, std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  OpRecord<T> rec;
  rec.op = name;
  rec.inputs.reserve(inputs.size());
  for (auto& in : inputs) rec.inputs.push_back(in.node_ptr());
  rec.output = output.node_ptr();
  rec.backward = std::move(fn);
  tape->record(std::move(rec));
}

}  // namespace detail

}  // namespace dpn
