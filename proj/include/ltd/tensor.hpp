// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major 64-bit tensors with a reverse-mode gradient tape.
//
// Ops record themselves on the GradientTape that is active on the calling
// thread, but only when at least one input requires a gradient. Without an
// active tape every op is a plain forward computation, which is what
// evaluation uses.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ltd {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::size_t id = 0;

  std::vector<double>& ensure_grad();
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  std::size_t id() const;
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writing through this span bypasses the tape; reserved for parameter
  // updates, initialization and tests.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Value copy with no gradient history.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;

  friend Tensor make_result(Shape shape, std::vector<double> values);
};

Tensor make_result(Shape shape, std::vector<double> values);

// Records operations executed on this thread while it is alive and not yet
// consumed by backward(). Tapes nest; the innermost one records.
class GradientTape {
 public:
  using BackwardFn = std::function<void()>;

  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Runs the recorded rules in reverse order. Gradients accumulate into
  // every reachable tensor that requires them. A tape supports one pass.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  bool closed() const { return closed_; }

  static GradientTape* active();

  void record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn fn);

  struct Entry {
    std::vector<std::size_t> input_ids;
    std::size_t output_id;
    detail::NodePtr output;
    BackwardFn backward;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  void deactivate();

  std::vector<Entry> entries_;
  GradientTape* previous_ = nullptr;
  bool active_ = false;
  bool closed_ = false;
};

// Non-finite outputs raise NonFiniteError when checks are on. On by default
// in debug builds only.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ for a [m×k], b [n×k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds a vector of length shape.back() to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
// Row softmax of a 2-D tensor where allowed[r * cols + c] == false forces an
// exact zero weight. Every row needs at least one allowed entry.
Tensor masked_softmax(const Tensor& x, const std::vector<bool>& allowed);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Rows of table [V×d] selected by ids.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Weighted mean over rows of -log softmax(logits)[target]. Empty weights
// means unit weights.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const double> weights = {});

// Sum of absolute differences; a scalar.
Tensor l1(const Tensor& a, const Tensor& b);

}  // namespace ltd
