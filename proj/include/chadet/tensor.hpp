#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chadet {

// (batch, channel, height, width) extents, row-major.
struct Shape4 {
  std::array<int, 4> d{0, 0, 0, 0};

  Shape4() = default;
  Shape4(int b, int c, int h, int w) : d{b, c, h, w} {}

  int operator[](int i) const { return d[static_cast<size_t>(i)]; }
  int& operator[](int i) { return d[static_cast<size_t>(i)]; }

  std::int64_t numel() const {
    return std::int64_t(d[0]) * d[1] * d[2] * d[3];
  }
  bool operator==(const Shape4& o) const { return d == o.d; }
  bool operator!=(const Shape4& o) const { return d != o.d; }

  std::string str() const {
    std::ostringstream os;
    os << "[" << d[0] << ", " << d[1] << ", " << d[2] << ", " << d[3] << "]";
    return os.str();
  }
};

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

// Dense rank-4 tensor. Copies share storage (and the lazily allocated
// gradient buffer); clone() makes a deep copy.
template <typename T>
class Tensor {
  struct Storage {
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad()
  };

  Shape4 shape_;
  std::shared_ptr<Storage> st_;

 public:
  bool requires_grad = false;

  Tensor() : st_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape4 s, T fill = T(0)) : shape_(s) {
    st_ = std::make_shared<Storage>();
    st_->data.assign(static_cast<size_t>(s.numel()), fill);
  }

  Tensor(Shape4 s, std::vector<T> values) : shape_(s) {
    require(static_cast<std::int64_t>(values.size()) == s.numel(),
            "tensor data length " + std::to_string(values.size()) +
                " does not match shape " + s.str());
    st_ = std::make_shared<Storage>();
    st_->data = std::move(values);
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape()); }

  const Shape4& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }

  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }
  std::vector<T>& vec() { return st_->data; }
  const std::vector<T>& vec() const { return st_->data; }

  T& at(int b, int c, int y, int x) {
    return st_->data[idx(b, c, y, x)];
  }
  T at(int b, int c, int y, int x) const {
    return st_->data[idx(b, c, y, x)];
  }
  size_t idx(int b, int c, int y, int x) const {
    return ((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) *
               shape_[3] + x;
  }

  bool has_grad() const { return !st_->grad.empty(); }
  void ensure_grad() {
    if (st_->grad.empty())
      st_->grad.assign(st_->data.size(), T(0));
  }
  T* grad() { ensure_grad(); return st_->grad.data(); }
  const std::vector<T>& grad_vec() const { return st_->grad; }
  void zero_grad() {
    if (!st_->grad.empty())
      std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor c(shape_);
    c.st_->data = st_->data;
    c.requires_grad = requires_grad;
    return c;
  }

  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

  T item() const {
    require(numel() == 1, "item() on non-scalar tensor " + shape_.str());
    return st_->data[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (size_t i = 0; i < st_->data.size(); ++i)
      out.data()[i] = static_cast<U>(st_->data[i]);
    out.requires_grad = requires_grad;
    return out;
  }
};

// Dynamic tape of recorded operations. Backward closures capture tensor
// handles; replay is strictly reverse recording order. One tape per thread.
template <typename T>
class Tape {
  std::vector<std::function<void()>> nodes_;

 public:
  static Tape*& active() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  size_t size() const { return nodes_.size(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }
};

// RAII activation of a tape for the current thread.
template <typename T>
class TapeScope {
  Tape<T> tape_;
  Tape<T>* prev_;

 public:
  TapeScope() {
    prev_ = Tape<T>::active();
    Tape<T>::active() = &tape_;
  }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }
};

template <typename T>
inline bool recording(const Tensor<T>& a) {
  return Tape<T>::active() != nullptr && a.requires_grad;
}

template <typename T>
inline bool recording(const Tensor<T>& a, const Tensor<T>& b) {
  return Tape<T>::active() != nullptr &&
         (a.requires_grad || b.requires_grad);
}

}  // namespace chadet
