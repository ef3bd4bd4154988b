#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "parec/matrix.hpp"

namespace parec {

/// Reverse-mode tape. Ops append their forward result as a value node and,
/// when the tape is recording, push a closure that propagates gradients to
/// their inputs. backward() replays the closures once, in reverse order.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }

  int push(Matrix value) {
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }

  const Matrix& val(int id) const { return values_[static_cast<std::size_t>(id)]; }

  /// Gradient buffer for a value, allocated as zeros on first access.
  Matrix& grad(int id) {
    auto idx = static_cast<std::size_t>(id);
    if (grads_.size() <= idx) grads_.resize(values_.size());
    Matrix& g = grads_[idx];
    if (g.size() == 0 && values_[idx].size() != 0)
      g = Matrix::Zero(values_[idx].rows(), values_[idx].cols());
    return g;
  }

  void record(std::function<void()> fn) {
    if (recording_) ops_.push_back(std::move(fn));
  }

  /// Seeds d(scalar)/d(scalar) = 1 and runs all recorded ops in reverse.
  /// A tape can only be walked once.
  void backward(int scalar_id) {
    require(recording_, "Tape::backward: tape was not recording");
    require(!consumed_, "Tape::backward: tape consumed twice");
    require(val(scalar_id).size() == 1, "Tape::backward: loss must be a 1x1 value");
    consumed_ = true;
    grad(scalar_id)(0, 0) = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  bool consumed() const { return consumed_; }

  std::size_t num_values() const { return values_.size(); }

 private:
  std::vector<Matrix> values_;
  std::vector<Matrix> grads_;
  std::vector<std::function<void()>> ops_;
  bool recording_;
  bool consumed_ = false;
};

}  // namespace parec
