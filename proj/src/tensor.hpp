// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rexmoe {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Shared handle to a dense row-major float64 array. Copying a Tensor copies
/// the handle; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(s_->shape.size()); }
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  double item() const;

  bool requires_grad() const noexcept { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const noexcept { return s_ && !s_->grad.empty(); }
  // Gradients live in the shared storage, so a const handle may still
  // accumulate into them.
  std::span<double> grad() const { return s_->grad; }
  // Allocates a zero gradient on first use.
  std::span<double> ensure_grad() const;
  void zero_grad() const;
  void clear_grad() const { s_->grad.clear(); }

  Tensor clone() const;
  bool all_finite() const;
  bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  std::shared_ptr<TensorStorage> s_;
};

/// Define-by-run record of differentiable operations. Entries are appended in
/// execution order, so reverse replay is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tensor& out)>;

  struct Entry {
    Tensor output;
    BackwardFn backward;
  };

  void record(Tensor output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays every reachable entry once.
  void backward(Tensor& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  static Tape* active() noexcept;

 private:
  friend class TapeScope;
  std::vector<Entry> entries_;
};

/// Makes `tape` the recording target for ops on this thread until destroyed.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace rexmoe
