#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace magnet {

using Shape = std::vector<int64_t>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  int64_t node_id = -1;       // index on the tape identified by tape_serial
  uint64_t tape_serial = 0;   // 0 == not on any tape
};

// Dense row-major tensor of 64-bit floats. Copies share storage; training
// mutates parameter values in place between tape passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int axis) const;

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }
  double& operator[](int64_t i) { return d_->values[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return d_->values[static_cast<size_t>(i)]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  // Allocates a zero gradient buffer on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad();

  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  Tensor detached_copy() const;  // deep copy of values, no grad state

  std::shared_ptr<TensorData> impl() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Operations append nodes in execution order, which is a
// topological order by construction; backward replays the node list once in
// reverse. A tape and the tensors recorded on it are confined to one thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = seed and accumulates into the grad buffers of
  // every requires_grad tensor recorded on this tape. Leaves that never
  // influence the loss end up with zero grads.
  void backward(const Tensor& loss, double seed = 1.0);

  size_t size() const { return nodes_.size(); }
  void clear();

  static Tape* current();

  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  struct Node {
    std::function<void()> backward;
    std::shared_ptr<TensorData> output;
  };
  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<TensorData>> leaves_;
  uint64_t serial_;
};

inline bool grad_enabled() { return Tape::current() != nullptr; }

// Accumulation helper used by op backward closures.
inline std::vector<double>& ensure_grad(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
  return t.grad;
}

}  // namespace magnet
