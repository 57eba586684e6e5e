#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dermfuse/errors.hpp"

namespace dermfuse {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor of T (float for training, double for the
// gradient-check mode). Copies are handles onto shared storage: the tape and
// the optimizer mutate the same buffers the model holds.
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(checked_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (static_cast<std::int64_t>(data_->size()) != checked_numel(shape_)) {
      throw ShapeError("tensor: " + std::to_string(data_->size()) + " values for shape " +
                       shape_str(shape_));
    }
    if (requires_grad) enable_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t(std::move(shape));
    if (requires_grad) t.enable_grad();
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::size_t i) const { return shape_[i]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  // Handle semantics: the reference is only as alive as some Tensor handle
  // onto the same storage, so calls on temporaries are rejected.
  std::vector<T>& values() const& { return *data_; }
  std::vector<T>& values() const&& = delete;
  T* data() const { return data_->data(); }

  bool requires_grad() const { return requires_grad_; }
  bool has_grad() const { return grad_ != nullptr; }

  std::vector<T>& grad() const& {
    if (!grad_) throw StateError("tensor has no gradient buffer");
    return *grad_;
  }
  std::vector<T>& grad() const&& = delete;

  // Marks the tensor as a gradient sink and allocates its buffer.
  void enable_grad() {
    requires_grad_ = true;
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape_));
    return (*data_)[0];
  }

  // Shares data and grad storage; gradients flow through without a tape node.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(new_shape);
    return out;
  }

  // Deep copy of the values; fresh zero grad buffer when requires_grad.
  Tensor clone() const {
    Tensor out(shape_);
    *out.data_ = *data_;
    if (requires_grad_) out.enable_grad();
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(data_->size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>((*data_)[i]);
    Tensor<U> out(shape_, std::move(v));
    if (requires_grad_) out.enable_grad();
    return out;
  }

  // Storage identity, for aliasing checks in tests.
  const void* storage_id() const { return data_.get(); }

 private:
  static std::int64_t checked_numel(const Shape& shape) {
    for (auto d : shape) {
      if (d < 0) throw ShapeError("tensor: negative extent in " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad_ = false;
};

template <typename T>
struct TapeNode {
  const char* op;
  std::function<void()> backward;
};

// Thread-local record of the forward pass. Append-only while recording;
// backward() replays it once in reverse and clears it.
template <typename T>
class Tape {
 public:
  static Tape& get() {
    thread_local Tape tape;
    return tape;
  }

  bool recording() const { return suspend_ == 0; }
  void push(const char* op, std::function<void()> fn) { nodes_.push_back({op, std::move(fn)}); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
  }

  void suspend() { ++suspend_; }
  void resume() { --suspend_; }

 private:
  std::vector<TapeNode<T>> nodes_;
  int suspend_ = 0;
};

// RAII guard: ops executed in scope are not recorded (inference mode).
template <typename T>
class NoGrad {
 public:
  NoGrad() { Tape<T>::get().suspend(); }
  ~NoGrad() { Tape<T>::get().resume(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

namespace detail {

template <typename T>
inline void ensure_finite(const std::vector<T>& xs, const char* what) {
  for (auto v : xs) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string(what) + ": non-finite value");
    }
  }
}

template <typename T>
inline bool trace(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::get().recording()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "elementwise_mul");
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::ensure_finite(ov, "elementwise_mul");
  if (detail::trace<T>({&a, &b})) {
    out.enable_grad();
    Tape<T>::get().push("mul", [a, b, out]() {
      const auto& go = out.grad();
      if (a.has_grad()) {
        auto& ga = a.grad();
        const auto& bv2 = b.values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv2[i];
        detail::ensure_finite(ga, "elementwise_mul backward");
      }
      if (b.has_grad()) {
        auto& gb = b.grad();
        const auto& av2 = a.values();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av2[i];
        detail::ensure_finite(gb, "elementwise_mul backward");
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::ensure_finite(ov, "add");
  if (detail::trace<T>({&a, &b})) {
    out.enable_grad();
    Tape<T>::get().push("add", [a, b, out]() {
      const auto& go = out.grad();
      if (a.has_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (b.has_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::ensure_finite(ov, "sub");
  if (detail::trace<T>({&a, &b})) {
    out.enable_grad();
    Tape<T>::get().push("sub", [a, b, out]() {
      const auto& go = out.grad();
      if (a.has_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (b.has_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(factor * av[i]);
  detail::ensure_finite(ov, "scale");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("scale", [a, out, factor]() {
      if (!a.has_grad()) return;
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(factor) * go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double value) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(av[i] + value);
  detail::ensure_finite(ov, "add_scalar");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("add_scalar", [a, out]() {
      if (!a.has_grad()) return;
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

// log(max(x, floor)); the derivative is zero on the clamped region.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a, double floor = 1e-12) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = static_cast<T>(std::log(std::max(static_cast<double>(av[i]), floor)));
  }
  detail::ensure_finite(ov, "log");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("log", [a, out, floor]() {
      if (!a.has_grad()) return;
      const auto& go = out.grad();
      const auto& av2 = a.values();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (static_cast<double>(av2[i]) > floor) ga[i] += go[i] / av2[i];
      }
      detail::ensure_finite(ga, "log backward");
    });
  }
  return out;
}

// Subgradient at 0 is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  detail::ensure_finite(ov, "relu");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("relu", [a, out]() {
      if (!a.has_grad()) return;
      const auto& go = out.grad();
      const auto& av2 = a.values();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (av2[i] > T(0)) ga[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double v = static_cast<double>(av[i]);
    double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    ov[i] = static_cast<T>(s);
  }
  detail::ensure_finite(ov, "sigmoid");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("sigmoid", [a, out]() {
      if (!a.has_grad()) return;
      const auto& go = out.grad();
      const auto& sv = out.values();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * sv[i] * (T(1) - sv[i]);
      detail::ensure_finite(ga, "sigmoid backward");
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  detail::ensure_finite(out.values(), "sum");
  if (detail::trace<T>({&a})) {
    out.enable_grad();
    Tape<T>::get().push("sum", [a, out]() {
      if (!a.has_grad()) return;
      const T g = out.grad()[0];
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Row-wise softmax with max subtraction. Accepts K or N x K.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  std::int64_t n, k;
  if (logits.ndim() == 1) {
    n = 1;
    k = logits.dim(0);
  } else if (logits.ndim() == 2) {
    n = logits.dim(0);
    k = logits.dim(1);
  } else {
    throw ShapeError("softmax: expected 1-D or 2-D input, got " + shape_str(logits.shape()));
  }
  if (k < 2) throw ShapeError("softmax: needs at least 2 classes, got " + std::to_string(k));

  Tensor<T> out(logits.shape());
  const auto& lv = logits.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = lv.data() + r * k;
    T* orow = ov.data() + r * k;
    double m = static_cast<double>(row[0]);
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      double e = std::exp(static_cast<double>(row[j]) - m);
      orow[j] = static_cast<T>(e);
      denom += e;
    }
    for (std::int64_t j = 0; j < k; ++j) orow[j] = static_cast<T>(static_cast<double>(orow[j]) / denom);
  }
  detail::ensure_finite(ov, "softmax");
  if (detail::trace<T>({&logits})) {
    out.enable_grad();
    Tape<T>::get().push("softmax", [logits, out, n, k]() {
      if (!logits.has_grad()) return;
      const auto& go = out.grad();
      const auto& sv = out.values();
      auto& ga = logits.grad();
      for (std::int64_t r = 0; r < n; ++r) {
        const T* g = go.data() + r * k;
        const T* s = sv.data() + r * k;
        double dot = 0.0;
        for (std::int64_t j = 0; j < k; ++j) dot += static_cast<double>(g[j]) * static_cast<double>(s[j]);
        T* gi = ga.data() + r * k;
        for (std::int64_t j = 0; j < k; ++j) {
          gi[j] += static_cast<T>(static_cast<double>(s[j]) * (static_cast<double>(g[j]) - dot));
        }
      }
      detail::ensure_finite(ga, "softmax backward");
    });
  }
  return out;
}

// Concatenation along the feature axis of two N x D tensors.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::int64_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor<T> out({n, da + db});
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < n; ++r) {
    std::copy_n(av.data() + r * da, da, ov.data() + r * (da + db));
    std::copy_n(bv.data() + r * db, db, ov.data() + r * (da + db) + da);
  }
  if (detail::trace<T>({&a, &b})) {
    out.enable_grad();
    Tape<T>::get().push("concat", [a, b, out, n, da, db]() {
      const auto& go = out.grad();
      if (a.has_grad()) {
        auto& ga = a.grad();
        for (std::int64_t r = 0; r < n; ++r)
          for (std::int64_t j = 0; j < da; ++j) ga[r * da + j] += go[r * (da + db) + j];
      }
      if (b.has_grad()) {
        auto& gb = b.grad();
        for (std::int64_t r = 0; r < n; ++r)
          for (std::int64_t j = 0; j < db; ++j) gb[r * db + j] += go[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, consuming it.
template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto& tape = Tape<T>::get();
  if (tape.empty()) throw StateError("backward: tape is empty or already consumed");
  if (!loss.has_grad()) throw StateError("backward: loss was not produced by a recorded forward pass");
  loss.grad()[0] = T(1);
  tape.run_backward();
}

}  // namespace dermfuse
