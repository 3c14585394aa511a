#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aranet {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t e : s) {
    if (e <= 0) {
      throw std::invalid_argument("tensor: shape extents must be positive, got " + shape_str(s));
    }
    n *= e;
  }
  return n;
}

// Value-semantics handle onto shared storage. Copies alias the same buffer,
// which is what lets backward closures hold onto the exact tensors an op saw.
// The gradient buffer is allocated lazily the first time something accumulates
// into it.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : st_(std::make_shared<Storage>()) {
    st_->numel = shape_numel(shape);
    st_->shape = std::move(shape);
    st_->data.assign(static_cast<std::size_t>(st_->numel), T(0));
    st_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.st_->data) v = value;
    return t;
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->numel = shape_numel(shape);
    if (t.st_->numel != static_cast<std::int64_t>(values.size())) {
      throw std::invalid_argument("tensor: value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(values);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(st_); }

  const Shape& shape() const { return check().shape; }

  std::size_t rank() const { return check().shape.size(); }

  std::int64_t dim(std::size_t axis) const {
    const Storage& s = check();
    if (axis >= s.shape.size()) {
      throw std::invalid_argument("tensor: axis " + std::to_string(axis) +
                                  " out of range for shape " + shape_str(s.shape));
    }
    return s.shape[axis];
  }

  std::int64_t numel() const { return check().numel; }

  std::span<T> data() const { return {check().data.data(), check().data.size()}; }

  T value() const {
    const Storage& s = check();
    if (s.numel != 1) {
      throw std::invalid_argument("tensor: value() needs a scalar, got shape " + shape_str(s.shape));
    }
    return s.data[0];
  }

  bool requires_grad() const { return check().requires_grad; }

  void set_requires_grad(bool v) { check().requires_grad = v; }

  bool has_grad() const { return !check().grad.empty(); }

  std::span<T> grad() const {
    Storage& s = check();
    if (s.grad.empty()) {
      throw std::logic_error("tensor: gradient not allocated; run backward first");
    }
    return {s.grad.data(), s.grad.size()};
  }

  void ensure_grad() const {
    Storage& s = check();
    if (s.grad.empty()) s.grad.assign(static_cast<std::size_t>(s.numel), T(0));
  }

  void zero_grad() const {
    Storage& s = check();
    for (auto& g : s.grad) g = T(0);
  }

  Tensor detach() const {
    const Storage& s = check();
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = s.shape;
    t.st_->numel = s.numel;
    t.st_->data = s.data;
    t.st_->requires_grad = false;
    return t;
  }

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

private:
  struct Storage {
    Shape shape;
    std::int64_t numel = 0;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;
  };

  Storage& check() const {
    if (!st_) throw std::logic_error("tensor: undefined handle");
    return *st_;
  }

  std::shared_ptr<Storage> st_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Linear record of executed ops. Each entry is a closure that pushes the
// output adjoint back onto the inputs; replaying the record once in reverse
// yields all gradients. Ops only record themselves while a tape is active on
// the current thread, so inference runs clean. A tape must stay confined to
// the thread that recorded it.
template <typename T>
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Seeds the root adjoint with 1 and replays every recorded op in reverse
  // order exactly once. Tensors the root does not depend on keep a zero (or
  // absent) gradient because their adjoints never receive a contribution.
  void backward(const Tensor<T>& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root tensor");
    if (root.numel() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.shape()));
    }
    root.ensure_grad();
    root.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  class Scope {
  public:
    explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

  private:
    Tape* prev_;
  };

  static Tape* active() { return active_; }

private:
  std::vector<std::function<void()>> nodes_;
  inline static thread_local Tape* active_ = nullptr;
};

}  // namespace aranet
