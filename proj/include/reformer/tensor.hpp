#pragma once

// Dense row-major tensors with a thread-confined reverse-mode gradient tape.
//
// A BasicTensor is a cheap handle to an immutable node.  Operations in
// ops.hpp produce new nodes; when a GradTape is active on the calling thread
// and any input requires a gradient, the operation is appended to that tape
// together with a closure that propagates output gradients to its inputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace reformer {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class GradTape;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::string name;
  // Identity of the tape that recorded this node (0 = leaf / constant).
  std::uint64_t tape_id = 0;
  std::size_t slot = 0;
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data);
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Only for in-place parameter updates by an optimizer holding exclusive access.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  const std::string& name() const { return node_->name; }
  BasicTensor& set_name(std::string name);

  // Deep copy with no tape linkage.
  BasicTensor clone() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    BasicTensor<U> result(node_->shape, std::move(out));
    result.set_requires_grad(node_->requires_grad);
    result.set_name(node_->name);
    return result;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Hands out gradient accumulation buffers for the inputs of one recorded op.
// Returns nullptr for inputs that do not need a gradient.
template <typename T>
class GradSink {
 public:
  virtual ~GradSink() = default;
  virtual T* operator()(std::size_t input) = 0;
};

template <typename T>
class GradTape {
 public:
  using Node = detail::Node<T>;
  using Backward = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

  // Constructing a tape makes it the recording tape of the calling thread
  // until it is destroyed; tapes nest.
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }

  void record(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> inputs,
              Backward backward);

  // d loss / d param for each param, in the given order.
  std::vector<BasicTensor<T>> grad(const BasicTensor<T>& loss,
                                   std::span<const BasicTensor<T>> params) const;

 private:
  struct Entry {
    std::vector<std::shared_ptr<Node>> inputs;
    Backward backward;
    std::size_t out_numel = 0;
  };

  std::uint64_t id_;
  GradTape* previous_;
  std::vector<Entry> entries_;
  std::unordered_set<const Node*> leaves_;
};

// Convenience wrapper over the active tape.
template <typename T>
std::vector<BasicTensor<T>> grad(const BasicTensor<T>& loss,
                                 std::span<const BasicTensor<T>> params);

}  // namespace reformer
