// SPDX-License-Identifier: Apache-2.0
#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "error.hpp"

namespace rexmoe {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (auto d : shape)
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
  auto s = std::make_shared<TensorStorage>();
  s->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  auto s = std::make_shared<TensorStorage>();
  s->shape = std::move(shape);
  s->data = std::move(data);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::int64_t Tensor::dim(std::int64_t i) const {
  const auto r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw DimensionError("dimension index " + std::to_string(i) + " out of range for " +
                         shape_string(shape()));
  return s_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(shape()));
  return s_->data[0];
}

std::span<double> Tensor::ensure_grad() const {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() const {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return from(s_->shape, s_->data, s_->requires_grad);
}

bool Tensor::all_finite() const {
  return std::all_of(s_->data.begin(), s_->data.end(), [](double v) { return std::isfinite(v); });
}

void Tape::record(Tensor output, BackwardFn backward) {
  entries_.push_back(Entry{std::move(output), std::move(backward)});
}

void Tape::backward(Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw DimensionError("backward() requires a scalar loss, got " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad())
    throw DimensionError("backward() on a loss that was not recorded on the tape");
  loss.ensure_grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Entries whose output never received a gradient are unreachable from the loss.
    if (!it->output.has_grad()) continue;
    it->backward(it->output);
  }
}

Tape* Tape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace rexmoe
