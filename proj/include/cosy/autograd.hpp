#pragma once

// Tape-based reverse-mode differentiation over cosy::Tensor.
//
// Operations record a node on the thread's active tape only when a tape is
// active and at least one input requires a gradient; otherwise they compute
// values and return constants. All kernels use a fixed accumulation order, so
// a row's result never depends on how many other rows share the call.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cosy/tensor.hpp"

namespace cosy::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  double item() const;
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  void zero_grad();

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  void record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }
  // Seeds d(loss)/d(loss) = 1 and propagates in reverse recording order.
  void backward(const Var& loss);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

Tape* active_tape();

class GradScope {
 public:
  explicit GradScope(Tape& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the lifetime of the guard.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Var constant(Tensor value);
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Allowed-position mask for attention: allow(i, j) != 0 lets row i read column j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  static AttentionMask full(std::size_t rows, std::size_t cols);
  bool operator()(std::size_t i, std::size_t j) const { return allow[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allow[i * cols + j] = v ? 1 : 0; }
};

// ---- arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a * s where s holds a single element.
Var scale_by(const Var& a, const Var& s);
Var add_scalar(const Var& a, double s);
// x[n x d] + v[d] broadcast over rows.
Var add_row(const Var& x, const Var& v);
// x[C x ...] + v[C] broadcast over the trailing dimensions.
Var add_channel(const Var& x, const Var& v);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
// x[n x k] * w[k x m] + b[m]; `b` may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
Var transpose(const Var& x);

// ---- activations ----
Var relu(const Var& x);
Var gelu(const Var& x);
Var silu(const Var& x);
Var exp(const Var& x);
Var log_sigmoid(const Var& x);

// ---- normalisation ----
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Throws std::domain_error when a row has zero norm.
Var l2_normalize_rows(const Var& x);

// ---- structural ----
Var embedding(const Var& table, std::span<const int> ids);
Var concat0(const std::vector<Var>& parts);
Var slice0(const Var& x, std::size_t begin, std::size_t end);
Var reshape(const Var& x, Shape shape);

// ---- reductions ----
Var sum(const Var& x);
Var mean(const Var& x);
Var mean_rows(const Var& x);
Var max_all(const Var& x);
// Per-row maximum of x[n x c] -> [n].
Var row_max(const Var& x);

// ---- attention ----
// Multi-head scaled dot-product attention. q[n x d], k/v[m x d]. Masked
// positions are skipped entirely; an empty mask allows every position.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const AttentionMask* mask);

// ---- losses ----
// Per-row negative log-likelihood of `targets` under softmax(logits). Rows
// whose target is negative yield 0 and receive no gradient.
Var token_nll(const Var& logits, std::span<const int> targets);
// Elementwise binary cross-entropy with logits.
Var bce_with_logits(const Var& logits, const Tensor& targets);
Var mse(const Var& a, const Var& b);
// Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
Var kl_standard_normal(const Var& mu, const Var& logvar);

// ---- convolution (single sample, channels-first) ----
// x[C x H x W], w[O x C x k x k], b[O].
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad);
Var upsample_nearest2x(const Var& x);

}  // namespace cosy::ad
