#include "magnet/tensor.hpp"

#include <atomic>
#include <sstream>

namespace magnet {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw Error("tensor dims must be positive, got " + shape_str(shape));
  }
  auto d = std::make_shared<TensorData>();
  d->shape = shape;
  d->values.assign(static_cast<size_t>(shape_numel(shape)), v);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw Error("value count " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape));
  }
  auto d = std::make_shared<TensorData>();
  d->shape = shape;
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_values({}, {v}, requires_grad);
}

int64_t Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw Error("axis " + std::to_string(axis) + " out of range for shape " +
                shape_str(shape()));
  }
  return d_->shape[static_cast<size_t>(axis)];
}

std::vector<double>& Tensor::grad() {
  return ensure_grad(*d_);
}

const std::vector<double>& Tensor::grad() const {
  return ensure_grad(*d_);
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
  return d_->values[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw Error("index rank mismatch for shape " + shape_str(shape()));
  }
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    flat = flat * d_->shape[static_cast<size_t>(i)] + v;
    ++i;
  }
  return d_->values[static_cast<size_t>(flat)];
}

Tensor Tensor::detached_copy() const {
  return from_values(shape(), values(), false);
}

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<uint64_t> g_tape_serial{1};
}  // namespace

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) {}

Tape::~Tape() = default;

Tape* Tape::current() { return g_active_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void Tape::record(const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> backward_fn) {
  for (const Tensor& in : inputs) {
    auto d = in.impl();
    if (d->requires_grad && d->tape_serial != serial_) {
      d->tape_serial = serial_;
      d->node_id = -1;  // leaf: participates but is not produced by a node
      leaves_.push_back(d);
    }
  }
  auto out = output.impl();
  out->requires_grad = true;
  out->tape_serial = serial_;
  out->node_id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(Node{std::move(backward_fn), out});
}

void Tape::backward(const Tensor& loss, double seed) {
  if (loss.numel() != 1) {
    throw Error("backward requires a scalar loss, got shape " +
                shape_str(loss.shape()));
  }
  // Node outputs are transients of this tape; reset them so replays are
  // bit-identical. Leaf grads accumulate across passes by design.
  for (auto& node : nodes_) {
    if (!node.output->grad.empty())
      std::fill(node.output->grad.begin(), node.output->grad.end(), 0.0);
  }
  for (auto& leaf : leaves_) ensure_grad(*leaf);
  auto ld = loss.impl();
  ensure_grad(*ld)[0] += seed;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

void Tape::clear() {
  nodes_.clear();
  leaves_.clear();
  serial_ = g_tape_serial.fetch_add(1);
}

}  // namespace magnet
