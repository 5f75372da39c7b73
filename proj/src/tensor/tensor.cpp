// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kernels.hpp"

namespace ltd {

namespace {

std::atomic<std::size_t> g_next_id{1};

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

thread_local GradientTape* t_active_tape = nullptr;

void check_finite(const Tensor& t, const char* op) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite output");
  }
}

// The tape that should record an op over these inputs, or nullptr.
GradientTape* recording(std::initializer_list<const Tensor*> inputs) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

bool wants_grad(const detail::NodePtr& n) { return n->requires_grad; }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor make_result(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t = make_result(std::move(shape), std::move(values));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::id() const { return node_->id; }
const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("Tensor::dim: axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("Tensor::item: tensor " + shape_to_string(shape()) + " is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "Tensor::at");
  return node_->data[row * node_->shape[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return make_result(shape(), node_->data); }

// ---- GradientTape ----------------------------------------------------------

GradientTape::GradientTape() : previous_(t_active_tape), active_(true) { t_active_tape = this; }

GradientTape::~GradientTape() { deactivate(); }

void GradientTape::deactivate() {
  if (!active_) return;
  active_ = false;
  // Tapes are strictly nested per thread, so restoring the predecessor is
  // only valid when this tape is on top.
  if (t_active_tape == this) t_active_tape = previous_;
}

GradientTape* GradientTape::active() { return t_active_tape; }

void GradientTape::record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn fn) {
  if (closed_) throw TapeError("GradientTape: recording onto a consumed tape");
  output->requires_grad = true;
  Entry e;
  e.input_ids.reserve(inputs.size());
  for (const auto& in : inputs) e.input_ids.push_back(in->id);
  e.output_id = output->id;
  e.output = std::move(output);
  e.backward = std::move(fn);
  entries_.push_back(std::move(e));
}

void GradientTape::backward(const Tensor& loss) {
  if (closed_) throw TapeError("GradientTape: backward called twice");
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("GradientTape: backward needs a scalar loss");
  }
  deactivate();
  closed_ = true;
  if (!loss.requires_grad()) return;
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  entries_.clear();
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor result = make_result({m, n}, std::move(out));
  check_finite(result, "matmul");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on, m, k, n] {
      if (wants_grad(an)) kernels::gemm_nt(on->grad.data(), bn->data.data(), an->ensure_grad().data(), m, n, k);
      if (wants_grad(bn)) kernels::gemm_tn(an->data.data(), on->grad.data(), bn->ensure_grad().data(), m, k, n);
    });
  }
  return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor result = make_result({m, n}, std::move(out));
  check_finite(result, "matmul_nt");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on, m, k, n] {
      if (wants_grad(an)) kernels::gemm_nn(on->grad.data(), bn->data.data(), an->ensure_grad().data(), m, n, k);
      if (wants_grad(bn)) kernels::gemm_tn(on->grad.data(), an->data.data(), bn->ensure_grad().data(), m, n, k);
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  Tensor result = make_result({n, m}, std::move(out));
  if (auto* tape = recording({&a})) {
    auto an = a.node(), on = result.node();
    tape->record({an}, on, [an, on, m, n] {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += on->grad[j * m + i];
    });
  }
  return result;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  check_finite(result, "add");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on] {
      for (const auto& in : {an, bn}) {
        if (!wants_grad(in)) continue;
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  check_finite(result, "sub");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on] {
      if (wants_grad(an)) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (wants_grad(bn)) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  check_finite(result, "mul");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on] {
      if (wants_grad(an)) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->data[i];
      }
      if (wants_grad(bn)) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  Tensor result = make_result(a.shape(), std::move(out));
  check_finite(result, "scale");
  if (auto* tape = recording({&a})) {
    auto an = a.node(), on = result.node();
    tape->record({an}, on, [an, on, factor] {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * factor;
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.numel() != x.shape().back()) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match last dimension of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t d = bias.numel();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += b[j];
  Tensor result = make_result(x.shape(), std::move(out));
  check_finite(result, "add_bias");
  if (auto* tape = recording({&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), on = result.node();
    tape->record({xn, bn}, on, [xn, bn, on, rows, d] {
      if (wants_grad(xn)) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (wants_grad(bn)) {
        auto& g = bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += on->grad[r * d + j];
      }
    });
  }
  return result;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  Tensor result = make_result(x.shape(), std::move(out));
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on] {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xn->data[i] > 0.0) g[i] += on->grad[i];
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = in[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  Tensor result = make_result(x.shape(), std::move(out));
  check_finite(result, "sigmoid");
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on] {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = on->data[i];
        g[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return result;
}

// ---- normalization -----------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "softmax");
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < v.extent; ++k) mx = std::max(mx, in[base + k * v.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const double e = std::exp(in[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] /= total;
    }
  }
  Tensor result = make_result(x.shape(), std::move(out));
  check_finite(result, "softmax");
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on, v] {
      auto& g = xn->ensure_grad();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.extent * v.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < v.extent; ++k) {
            const std::size_t idx = base + k * v.inner;
            dot += on->grad[idx] * on->data[idx];
          }
          for (std::size_t k = 0; k < v.extent; ++k) {
            const std::size_t idx = base + k * v.inner;
            g[idx] += on->data[idx] * (on->grad[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor masked_softmax(const Tensor& x, const std::vector<bool>& allowed) {
  require_rank(x, 2, "masked_softmax");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (allowed.size() != rows * cols) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) + " entries for " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> out(rows * cols, 0.0);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mx = 0.0;
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed[base + c]) continue;
      mx = any ? std::max(mx, in[base + c]) : in[base + c];
      any = true;
    }
    if (!any) throw DimensionError("masked_softmax: row " + std::to_string(r) + " has no allowed entry");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed[base + c]) continue;
      const double e = std::exp(in[base + c] - mx);
      out[base + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= total;
  }
  Tensor result = make_result(x.shape(), std::move(out));
  check_finite(result, "masked_softmax");
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on, rows, cols] {
      auto& g = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += on->grad[base + c] * on->data[base + c];
        for (std::size_t c = 0; c < cols; ++c) g[base + c] += on->data[base + c] * (on->grad[base + c] - dot);
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias do not match last dimension " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  const auto in = x.data(), g = gain.data(), b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      normalized[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  Tensor result = make_result(x.shape(), std::move(out));
  check_finite(result, "layer_norm");
  if (auto* tape = recording({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node();
    tape->record({xn, gn, bn}, on,
                 [xn, gn, bn, on, rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)] {
                   const auto& dy = on->grad;
                   if (wants_grad(gn)) {
                     auto& dg = gn->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * normalized[r * d + j];
                   }
                   if (wants_grad(bn)) {
                     auto& db = bn->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
                   }
                   if (wants_grad(xn)) {
                     auto& dx = xn->ensure_grad();
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mean_dh = 0.0, mean_dh_h = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dh = dy[r * d + j] * gn->data[j];
                         mean_dh += dh;
                         mean_dh_h += dh * normalized[r * d + j];
                       }
                       mean_dh *= inv_d;
                       mean_dh_h *= inv_d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dh = dy[r * d + j] * gn->data[j];
                         dx[r * d + j] += inv_std[r] * (dh - mean_dh - normalized[r * d + j] * mean_dh_h);
                       }
                     }
                   }
                 });
  }
  return result;
}

// ---- structural ------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.shape()[i] != shape[i]) {
        throw DimensionError("concat: shape mismatch " + shape_to_string(p.shape()) + " vs " + shape_to_string(shape));
      }
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  const AxisView v = axis_view(shape, axis, "concat");
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[axis];
    const auto src = p.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ext * v.inner), ext * v.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * v.extent + offset) * v.inner));
    }
    offset += ext;
  }
  Tensor result = make_result(std::move(shape), std::move(out));
  GradientTape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (p.requires_grad()) tape = GradientTape::active();
  }
  if (tape != nullptr) {
    std::vector<detail::NodePtr> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.node());
    auto on = result.node();
    tape->record(inputs, on, [inputs, on, offsets, v, axis] {
      for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
        const auto& in = inputs[idx];
        if (!wants_grad(in)) continue;
        auto& g = in->ensure_grad();
        const std::size_t ext = in->shape[axis];
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* src = on->grad.data() + (o * v.extent + offsets[idx]) * v.inner;
          double* dst = g.data() + o * ext * v.inner;
          for (std::size_t i = 0; i < ext * v.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view(x.shape(), axis, "slice");
  if (begin > end || end > v.extent) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                         shape_to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  std::vector<double> out(v.outer * ext * v.inner);
  const auto src = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * v.extent + begin) * v.inner), ext * v.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * ext * v.inner));
  }
  Tensor result = make_result(std::move(shape), std::move(out));
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on, v, begin, ext] {
      auto& g = xn->ensure_grad();
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* src = on->grad.data() + o * ext * v.inner;
        double* dst = g.data() + (o * v.extent + begin) * v.inner;
        for (std::size_t i = 0; i < ext * v.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto src = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw LookupError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                        std::to_string(vocab) + " rows");
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Tensor result = make_result({ids.size(), d}, std::move(out));
  if (auto* tape = recording({&table})) {
    auto tn = table.node(), on = result.node();
    std::vector<int> rows(ids.begin(), ids.end());
    tape->record({tn}, on, [tn, on, rows = std::move(rows), d] {
      auto& g = tn->ensure_grad();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        double* dst = g.data() + static_cast<std::size_t>(rows[r]) * d;
        const double* src = on->grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

// ---- reductions and losses ---------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor result = make_result({}, {total});
  check_finite(result, "sum");
  if (auto* tape = recording({&x})) {
    auto xn = x.node(), on = result.node();
    tape->record({xn}, on, [xn, on] {
      auto& g = xn->ensure_grad();
      for (double& v : g) v += on->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
  if (!weights.empty() && weights.size() != rows) throw DimensionError("cross_entropy: one weight per row required");
  if (rows == 0) throw DimensionError("cross_entropy: no rows");
  std::vector<double> w(rows, 1.0);
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  const double weight_total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(weight_total > 0.0)) throw DimensionError("cross_entropy: weights must sum to a positive value");

  std::vector<double> probs(rows * classes);
  const auto z = logits.data();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw LookupError("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                        std::to_string(classes) + " classes");
    }
    const double* row = z.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(row[c] - mx);
      total += probs[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= total;
    const double lse = mx + std::log(total);
    loss += w[r] * (lse - row[targets[r]]);
  }
  loss /= weight_total;
  Tensor result = make_result({}, {loss});
  check_finite(result, "cross_entropy");
  if (auto* tape = recording({&logits})) {
    auto ln = logits.node(), on = result.node();
    std::vector<int> t(targets.begin(), targets.end());
    tape->record({ln}, on, [ln, on, rows, classes, probs = std::move(probs), t = std::move(t), w = std::move(w),
                            weight_total] {
      auto& g = ln->ensure_grad();
      const double upstream = on->grad[0] / weight_total;
      for (std::size_t r = 0; r < rows; ++r) {
        const double coef = upstream * w[r];
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = static_cast<int>(c) == t[r] ? 1.0 : 0.0;
          g[r * classes + c] += coef * (probs[r * classes + c] - onehot);
        }
      }
    });
  }
  return result;
}

Tensor l1(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l1");
  double total = 0.0;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
  Tensor result = make_result({}, {total});
  check_finite(result, "l1");
  if (auto* tape = recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    tape->record({an, bn}, on, [an, bn, on] {
      const double up = on->grad[0];
      for (std::size_t i = 0; i < an->data.size(); ++i) {
        const double diff = an->data[i] - bn->data[i];
        const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        if (wants_grad(an)) an->ensure_grad()[i] += up * s;
        if (wants_grad(bn)) bn->ensure_grad()[i] -= up * s;
      }
    });
  }
  return result;
}

}  // namespace ltd
