#include "reformer/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace reformer {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) {
  if (reformer::numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  }
  for (T v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  auto n = reformer::numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::size_t BasicTensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_name(std::string name) {
  node_->name = std::move(name);
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor out(node_->shape, node_->data);
  out.node_->requires_grad = node_->requires_grad;
  out.node_->name = node_->name;
  return out;
}

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

template <typename T>
thread_local GradTape<T>* active_tape = nullptr;

}  // namespace

template <typename T>
GradTape<T>::GradTape() : id_(next_tape_id.fetch_add(1)), previous_(active_tape<T>) {
  active_tape<T> = this;
}

template <typename T>
GradTape<T>::~GradTape() {
  active_tape<T> = previous_;
}

template <typename T>
GradTape<T>* GradTape<T>::active() {
  return active_tape<T>;
}

template <typename T>
void GradTape<T>::record(const std::shared_ptr<Node>& out,
                         std::vector<std::shared_ptr<Node>> inputs, Backward backward) {
  for (const auto& in : inputs) {
    if (in->requires_grad && in->tape_id != id_) leaves_.insert(in.get());
  }
  out->requires_grad = true;
  out->tape_id = id_;
  out->slot = entries_.size();
  entries_.push_back(Entry{std::move(inputs), std::move(backward), out->data.size()});
}

namespace {

template <typename T>
class TapeSink final : public GradSink<T> {
 public:
  using Node = detail::Node<T>;

  TapeSink(std::uint64_t tape_id, std::vector<std::vector<T>>& slots,
           std::unordered_map<const Node*, std::vector<T>>& leaves)
      : tape_id_(tape_id), slots_(slots), leaves_(leaves) {}

  void bind(const std::vector<std::shared_ptr<Node>>* inputs) { inputs_ = inputs; }

  T* operator()(std::size_t input) override {
    const Node* node = (*inputs_)[input].get();
    if (!node->requires_grad) return nullptr;
    std::vector<T>* buf = nullptr;
    if (node->tape_id == tape_id_) {
      buf = &slots_[node->slot];
    } else {
      buf = &leaves_[node];
    }
    if (buf->empty()) buf->assign(node->data.size(), T(0));
    return buf->data();
  }

 private:
  std::uint64_t tape_id_;
  std::vector<std::vector<T>>& slots_;
  std::unordered_map<const Node*, std::vector<T>>& leaves_;
  const std::vector<std::shared_ptr<Node>>* inputs_ = nullptr;
};

}  // namespace

template <typename T>
std::vector<BasicTensor<T>> GradTape<T>::grad(const BasicTensor<T>& loss,
                                              std::span<const BasicTensor<T>> params) const {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("gradient requires a scalar loss");
  }
  const Node* root = loss.node().get();
  if (root->tape_id != id_) throw TapeError("loss was not produced on this gradient tape");

  for (const auto& p : params) {
    const Node* n = p.node().get();
    const bool on_tape = n->tape_id == id_ || leaves_.count(n) > 0;
    if (!on_tape) {
      throw TapeError("parameter '" + (n->name.empty() ? std::string("<unnamed>") : n->name) +
                      "' is not on the gradient tape");
    }
  }

  std::vector<std::vector<T>> slots(entries_.size());
  std::unordered_map<const Node*, std::vector<T>> leaf_grads;
  slots[root->slot].assign(1, T(1));

  std::unordered_set<std::size_t> keep;
  for (const auto& p : params) {
    if (p.node()->tape_id == id_) keep.insert(p.node()->slot);
  }

  TapeSink<T> sink(id_, slots, leaf_grads);
  for (std::size_t i = root->slot + 1; i-- > 0;) {
    if (slots[i].empty()) continue;
    const Entry& e = entries_[i];
    sink.bind(&e.inputs);
    e.backward(std::span<const T>(slots[i]), sink);
    if (!keep.count(i)) std::vector<T>().swap(slots[i]);
  }

  std::vector<BasicTensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    const Node* n = p.node().get();
    std::vector<T> g;
    if (n->tape_id == id_) {
      g = slots[n->slot];
    } else if (auto it = leaf_grads.find(n); it != leaf_grads.end()) {
      g = it->second;
    }
    if (g.empty()) g.assign(n->data.size(), T(0));
    out.emplace_back(n->shape, std::move(g));
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> grad(const BasicTensor<T>& loss,
                                 std::span<const BasicTensor<T>> params) {
  auto* tape = GradTape<T>::active();
  if (!tape) throw TapeError("no active gradient tape");
  return tape->grad(loss, params);
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class GradTape<float>;
template class GradTape<double>;
template std::vector<BasicTensor<float>> grad(const BasicTensor<float>&,
                                              std::span<const BasicTensor<float>>);
template std::vector<BasicTensor<double>> grad(const BasicTensor<double>&,
                                               std::span<const BasicTensor<double>>);

}  // namespace reformer
