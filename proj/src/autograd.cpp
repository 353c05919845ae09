#include "cosy/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace cosy::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;

Tensor* grad_of(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  return (p && p->requires_grad) ? &p->ensure_grad() : nullptr;
}

const Tensor& value_of(const Node& self, std::size_t i) { return self.parents[i]->value; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

// C[n x m] += A[n x k] * B[k x m]. Each output element accumulates over k in
// ascending order regardless of n.
void gemm_nn(const double* A, const double* B, double* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* c = C + i * m;
    const double* a = A + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      const double* b = B + kk * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// dA[n x k] += dC[n x m] * B[k x m]^T
void gemm_nt(const double* dC, const double* B, double* dA, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* g = dC + i * m;
    double* da = dA + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* b = B + kk * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += g[j] * b[j];
      da[kk] += acc;
    }
  }
}

// dB[k x m] += A[n x k]^T * dC[n x m]
void gemm_tn(const double* A, const double* dC, double* dB, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    const double* g = dC + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      double* db = dB + kk * m;
      for (std::size_t j = 0; j < m; ++j) db[j] += av * g[j];
    }
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F, typename D>
Var unary(const Var& x, F f, D df) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor& xv = value_of(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (value().size() != 1) throw std::logic_error("item() on non-scalar " + shape_string(shape()));
  return value()[0];
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

void Tape::backward(const Var& loss) {
  if (!loss.requires_grad()) return;
  if (loss.value().size() != 1) throw std::logic_error("backward() needs a scalar loss");
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

Tape* active_tape() { return g_active_tape; }

GradScope::GradScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
GradScope::~GradScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Var constant(Tensor value) { return Var(std::move(value), false); }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (Tape* tape = g_active_tape) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.shared());
      node->backward = std::move(backward);
      tape->record(node);
    }
  }
  return Var(std::move(node));
}

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
  AttentionMask m;
  m.rows = rows;
  m.cols = cols;
  m.allow.assign(rows * cols, 1);
  return m;
}

// ---------------------------------------------------------------- arithmetic

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (Tensor* g = grad_of(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = value_of(self, 0);
    const Tensor& bv = value_of(self, 1);
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw std::invalid_argument("scale_by: scale must hold one element");
  const double k = s.value()[0];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * k;
  return make_result(std::move(out), {a, s}, [k](Node& self) {
    const Tensor& av = value_of(self, 0);
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * k;
    if (Tensor* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] += acc;
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + s;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var add_row(const Var& x, const Var& v) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (v.value().size() != d) throw std::invalid_argument("add_row: width mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += v.value()[j];
  return make_result(std::move(out), {x, v}, [n, d](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
  });
}

Var add_channel(const Var& x, const Var& v) {
  const std::size_t c = x.value().rows(), rest = x.value().cols();
  if (v.value().size() != c) throw std::invalid_argument("add_channel: channel mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < rest; ++j) out[i * rest + j] += v.value()[i];
  return make_result(std::move(out), {x, v}, [c, rest](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < rest; ++j) acc += self.grad[i * rest + j];
        (*g)[i] += acc;
      }
  });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) { return linear(a, b, Var()); }

Var linear(const Var& x, const Var& w, const Var& b) {
  const std::size_t n = x.value().rows(), k = x.value().cols();
  if (w.value().rank() != 2 || w.value().dim(0) != k) {
    throw std::invalid_argument("linear: input width " + std::to_string(k) + " vs weight " +
                                shape_string(w.shape()));
  }
  const std::size_t m = w.value().dim(1);
  if (b.defined() && b.value().size() != m) throw std::invalid_argument("linear: bias width mismatch");
  Tensor out({n, m});
  gemm_nn(x.value().data(), w.value().data(), out.data(), n, k, m);
  if (b.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b.value()[j];
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [n, k, m](Node& self) {
    if (Tensor* gx = grad_of(self, 0)) gemm_nt(self.grad.data(), value_of(self, 1).data(), gx->data(), n, m, k);
    if (Tensor* gw = grad_of(self, 1)) gemm_tn(value_of(self, 0).data(), self.grad.data(), gw->data(), n, k, m);
    if (self.parents.size() > 2)
      if (Tensor* gb = grad_of(self, 2))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) (*gb)[j] += self.grad[i * m + j];
  });
}

Var transpose(const Var& x) {
  const std::size_t n = x.value().rows(), m = x.value().cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x.value()[i * m + j];
  return make_result(std::move(out), {x}, [n, m](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*g)[i * m + j] += self.grad[j * n + i];
  });
}

// --------------------------------------------------------------- activations

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + 0.044715 * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v * sigmoid(v); },
      [](double v, double) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var exp(const Var& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log_sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return v < 0 ? v - std::log1p(std::exp(v)) : -std::log1p(std::exp(-v)); },
      [](double v, double) { return sigmoid(-v); });
}

// ------------------------------------------------------------- normalisation

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (gamma.value().size() != d || beta.value().size() != d)
    throw std::invalid_argument("layer_norm: parameter width mismatch");
  Tensor out({n, d});
  auto xhat = std::make_shared<Tensor>(Shape{n, d});
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [n, d, xhat, inv_std](Node& self) {
    const Tensor& gv = value_of(self, 1);
    if (Tensor* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = self.grad[i * d + j] * gv[j];
          m1 += dh;
          m2 += dh * (*xhat)[i * d + j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = self.grad[i * d + j] * gv[j];
          (*gx)[i * d + j] += (*inv_std)[i] * (dh - m1 - (*xhat)[i * d + j] * m2);
        }
      }
    }
    if (Tensor* gg = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += self.grad[i * d + j] * (*xhat)[i * d + j];
    if (Tensor* gb = grad_of(self, 2))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += self.grad[i * d + j];
  });
}

Var l2_normalize_rows(const Var& x) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  Tensor out({n, d});
  auto norms = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x.value()[i * d + j] * x.value()[i * d + j];
    const double nr = std::sqrt(s);
    if (!(nr > 0.0)) throw std::domain_error("l2_normalize_rows: zero-norm row " + std::to_string(i));
    (*norms)[i] = nr;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] / nr;
  }
  return make_result(std::move(out), {x}, [n, d, norms](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.value[i * d + j] * self.grad[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        (*gx)[i * d + j] += (self.grad[i * d + j] - self.value[i * d + j] * dot) / (*norms)[i];
    }
  });
}

// ---------------------------------------------------------------- structural

Var embedding(const Var& table, std::span<const int> ids) {
  const std::size_t vocab = table.value().rows(), d = table.value().cols();
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(idx[i]) + " outside table of " +
                              std::to_string(vocab));
    std::copy_n(table.value().data() + idx[i] * d, d, out.data() + i * d);
  }
  return make_result(std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) (*g)[idx[i] * d + j] += self.grad[i * d + j];
  });
}

Var concat0(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t total_rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw std::invalid_argument("concat0: trailing shape mismatch");
    offsets.push_back(total_rows);
    total_rows += p.shape()[0];
  }
  Shape shape{total_rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  const std::size_t w = shape_size(tail);
  for (std::size_t p = 0; p < parts.size(); ++p)
    std::copy(parts[p].value().data(), parts[p].value().data() + parts[p].value().size(),
              out.data() + offsets[p] * w);
  return make_result(std::move(out), parts, [offsets, w](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p)
      if (Tensor* g = grad_of(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[p] * w + i];
  });
}

Var slice0(const Var& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.shape()[0]) throw std::out_of_range("slice0: bad range");
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t w = x.value().cols();
  Tensor out(shape);
  std::copy(x.value().data() + begin * w, x.value().data() + end * w, out.data());
  return make_result(std::move(out), {x}, [begin, w](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * w + i] += self.grad[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().vec()) s += v;
  return make_result(Tensor::scalar(s), {x}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mean_rows(const Var& x) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  Tensor out({1, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[i * d + j];
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
  return make_result(std::move(out), {x}, [n, d](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[j] / static_cast<double>(n);
  });
}

Var max_all(const Var& x) {
  const auto& v = x.value().vec();
  if (v.empty()) throw std::invalid_argument("max_all: empty input");
  const std::size_t arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  return make_result(Tensor::scalar(v[arg]), {x}, [arg](Node& self) {
    if (Tensor* g = grad_of(self, 0)) (*g)[arg] += self.grad[0];
  });
}

Var row_max(const Var& x) {
  const std::size_t n = x.value().rows(), c = x.value().cols();
  if (n == 0 || c == 0) throw std::invalid_argument("row_max: empty input");
  Tensor out({n});
  std::vector<std::size_t> arg(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    arg[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out[r] = row[arg[r]];
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg), c](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t r = 0; r < arg.size(); ++r) (*g)[r * c + arg[r]] += self.grad[r];
  });
}

// ----------------------------------------------------------------- attention

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const AttentionMask* mask) {
  const std::size_t n = q.value().rows(), d = q.value().cols(), m = k.value().rows();
  if (k.value().cols() != d || v.value().cols() != d || v.value().rows() != m)
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (mask && (mask->rows != n || mask->cols != m)) throw std::invalid_argument("attention: mask shape mismatch");
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = q.value().data();
  const double* K = k.value().data();
  const double* V = v.value().data();

  Tensor out({n, d});
  auto probs = std::make_shared<std::vector<double>>(heads * n * m, 0.0);
  std::vector<double> scores(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double* P = probs->data() + (h * n + i) * m;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + off + c] * K[j * d + off + c];
        s *= scl;
        scores[j] = s;
        mx = std::max(mx, s);
        any = true;
      }
      if (!any) continue;
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        P[j] = std::exp(scores[j] - mx);
        total += P[j];
      }
      double* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        P[j] /= total;
        const double p = P[j];
        for (std::size_t c = 0; c < dh; ++c) o[c] += p * V[j * d + off + c];
      }
    }
  }
  auto mask_copy = mask ? std::make_shared<AttentionMask>(*mask) : nullptr;
  return make_result(std::move(out), {q, k, v}, [n, m, d, dh, heads, scl, probs, mask_copy](Node& self) {
    Tensor* gq = grad_of(self, 0);
    Tensor* gk = grad_of(self, 1);
    Tensor* gv = grad_of(self, 2);
    const double* Q = value_of(self, 0).data();
    const double* K = value_of(self, 1).data();
    const double* V = value_of(self, 2).data();
    const double* G = self.grad.data();
    std::vector<double> dP(m);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const double* P = probs->data() + (h * n + i) * m;
        double rowdot = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          if (mask_copy && !(*mask_copy)(i, j)) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += G[i * d + off + c] * V[j * d + off + c];
          dP[j] = s;
          rowdot += P[j] * s;
          if (gv)
            for (std::size_t c = 0; c < dh; ++c) (*gv)[j * d + off + c] += P[j] * G[i * d + off + c];
        }
        for (std::size_t j = 0; j < m; ++j) {
          if (mask_copy && !(*mask_copy)(i, j)) continue;
          const double ds = P[j] * (dP[j] - rowdot) * scl;
          if (gq)
            for (std::size_t c = 0; c < dh; ++c) (*gq)[i * d + off + c] += ds * K[j * d + off + c];
          if (gk)
            for (std::size_t c = 0; c < dh; ++c) (*gk)[j * d + off + c] += ds * Q[i * d + off + c];
        }
      }
    }
  });
}

// -------------------------------------------------------------------- losses

Var token_nll(const Var& logits, std::span<const int> targets) {
  const std::size_t n = logits.value().rows(), vocab = logits.value().cols();
  if (targets.size() != n) throw std::invalid_argument("token_nll: target count mismatch");
  std::vector<int> tg(targets.begin(), targets.end());
  Tensor out({n});
  const double* X = logits.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (tg[i] < 0) continue;
    if (static_cast<std::size_t>(tg[i]) >= vocab) throw std::out_of_range("token_nll: target outside vocabulary");
    const double* x = X + i * vocab;
    const double mx = *std::max_element(x, x + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(x[j] - mx);
    out[i] = std::log(s) + mx - x[tg[i]];
  }
  return make_result(std::move(out), {logits}, [tg = std::move(tg), n, vocab](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const double* X = value_of(self, 0).data();
    for (std::size_t i = 0; i < n; ++i) {
      if (tg[i] < 0) continue;
      const double* x = X + i * vocab;
      const double mx = *std::max_element(x, x + vocab);
      double s = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) s += std::exp(x[j] - mx);
      const double gi = self.grad[i];
      for (std::size_t j = 0; j < vocab; ++j) (*g)[i * vocab + j] += gi * std::exp(x[j] - mx) / s;
      (*g)[i * vocab + tg[i]] -= gi;
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  if (logits.value().size() != targets.size()) throw std::invalid_argument("bce_with_logits: size mismatch");
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = logits.value()[i];
    out[i] = std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result(std::move(out), {logits}, [targets](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const Tensor& xv = value_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (sigmoid(xv[i]) - targets[i]);
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return make_result(Tensor::scalar(s / static_cast<double>(n)), {a, b}, [n](Node& self) {
    const Tensor& av = value_of(self, 0);
    const Tensor& bv = value_of(self, 1);
    const double c = 2.0 * self.grad[0] / static_cast<double>(n);
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += c * (av[i] - bv[i]);
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] -= c * (av[i] - bv[i]);
  });
}

Var kl_standard_normal(const Var& mu, const Var& logvar) {
  require_same_shape(mu, logvar, "kl_standard_normal");
  const std::size_t n = mu.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mu.value()[i], lv = logvar.value()[i];
    s += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  return make_result(Tensor::scalar(s / static_cast<double>(n)), {mu, logvar}, [n](Node& self) {
    const double c = self.grad[0] / static_cast<double>(n);
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += c * value_of(self, 0)[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += c * 0.5 * (std::exp(value_of(self, 1)[i]) - 1.0);
  });
}

// --------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
  std::size_t C, H, W, O, K, stride, pad, Ho, Wo;
  // Output column range [lo, hi) whose input column ox*stride - pad + kx is in range.
  void valid_range(std::size_t kofs, std::size_t in_extent, std::size_t out_extent, std::size_t& lo,
                   std::size_t& hi) const {
    // need 0 <= o*stride + kofs - pad < in_extent
    const long s = static_cast<long>(stride);
    const long shift = static_cast<long>(kofs) - static_cast<long>(pad);
    long first = 0;
    if (shift < 0) first = (-shift + s - 1) / s;
    long last = (static_cast<long>(in_extent) - 1 - shift);
    last = last < 0 ? -1 : last / s;
    lo = static_cast<std::size_t>(std::max(first, 0L));
    hi = static_cast<std::size_t>(std::min(last + 1, static_cast<long>(out_extent)));
    if (hi < lo) hi = lo;
  }
};

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
  if (x.value().rank() != 3 || w.value().rank() != 4) throw std::invalid_argument("conv2d: expects CxHxW and OxCxKxK");
  ConvGeom geo{};
  geo.C = x.shape()[0];
  geo.H = x.shape()[1];
  geo.W = x.shape()[2];
  geo.O = w.shape()[0];
  geo.K = w.shape()[2];
  geo.stride = stride;
  geo.pad = pad;
  if (w.shape()[1] != geo.C || w.shape()[3] != geo.K) throw std::invalid_argument("conv2d: weight shape mismatch");
  if (b.defined() && b.value().size() != geo.O) throw std::invalid_argument("conv2d: bias size mismatch");
  if (geo.H + 2 * pad < geo.K || geo.W + 2 * pad < geo.K) throw std::invalid_argument("conv2d: kernel larger than input");
  geo.Ho = (geo.H + 2 * pad - geo.K) / stride + 1;
  geo.Wo = (geo.W + 2 * pad - geo.K) / stride + 1;

  // im2col: row (c, ky, kx) holds the input sample feeding every output position.
  const std::size_t P = geo.Ho * geo.Wo, R = geo.C * geo.K * geo.K;
  auto col = std::make_shared<std::vector<double>>(R * P, 0.0);
  const double* X = x.value().data();
  for (std::size_t c = 0; c < geo.C; ++c)
    for (std::size_t ky = 0; ky < geo.K; ++ky) {
      std::size_t ylo, yhi;
      geo.valid_range(ky, geo.H, geo.Ho, ylo, yhi);
      for (std::size_t kx = 0; kx < geo.K; ++kx) {
        std::size_t xlo, xhi;
        geo.valid_range(kx, geo.W, geo.Wo, xlo, xhi);
        double* crow = col->data() + ((c * geo.K + ky) * geo.K + kx) * P;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* src = X + (c * geo.H + (oy * stride + ky - pad)) * geo.W;
          for (std::size_t ox = xlo; ox < xhi; ++ox) crow[oy * geo.Wo + ox] = src[ox * stride + kx - pad];
        }
      }
    }

  Tensor out({geo.O, geo.Ho, geo.Wo});
  const double* Wt = w.value().data();
  for (std::size_t o = 0; o < geo.O; ++o) {
    double* dst = out.data() + o * P;
    if (b.defined())
      for (std::size_t i = 0; i < P; ++i) dst[i] = b.value()[o];
    for (std::size_t r = 0; r < R; ++r) {
      const double wv = Wt[o * R + r];
      const double* crow = col->data() + r * P;
      for (std::size_t i = 0; i < P; ++i) dst[i] += wv * crow[i];
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [geo, col, P, R](Node& self) {
    Tensor* gx = grad_of(self, 0);
    Tensor* gw = grad_of(self, 1);
    Tensor* gb = self.parents.size() > 2 ? grad_of(self, 2) : nullptr;
    const double* Wt = value_of(self, 1).data();
    const double* G = self.grad.data();
    if (gb)
      for (std::size_t o = 0; o < geo.O; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < P; ++i) acc += G[o * P + i];
        (*gb)[o] += acc;
      }
    if (gw)
      for (std::size_t o = 0; o < geo.O; ++o)
        for (std::size_t r = 0; r < R; ++r) {
          const double* crow = col->data() + r * P;
          const double* grow = G + o * P;
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) acc += grow[i] * crow[i];
          (*gw)[o * R + r] += acc;
        }
    if (!gx) return;
    std::vector<double> gcol(R * P, 0.0);
    for (std::size_t o = 0; o < geo.O; ++o)
      for (std::size_t r = 0; r < R; ++r) {
        const double wv = Wt[o * R + r];
        const double* grow = G + o * P;
        double* gc = gcol.data() + r * P;
        for (std::size_t i = 0; i < P; ++i) gc[i] += wv * grow[i];
      }
    const std::size_t stride = geo.stride, pad = geo.pad;
    for (std::size_t c = 0; c < geo.C; ++c)
      for (std::size_t ky = 0; ky < geo.K; ++ky) {
        std::size_t ylo, yhi;
        geo.valid_range(ky, geo.H, geo.Ho, ylo, yhi);
        for (std::size_t kx = 0; kx < geo.K; ++kx) {
          std::size_t xlo, xhi;
          geo.valid_range(kx, geo.W, geo.Wo, xlo, xhi);
          const double* gc = gcol.data() + ((c * geo.K + ky) * geo.K + kx) * P;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            double* gxr = gx->data() + (c * geo.H + (oy * stride + ky - pad)) * geo.W;
            for (std::size_t ox = xlo; ox < xhi; ++ox) gxr[ox * stride + kx - pad] += gc[oy * geo.Wo + ox];
          }
        }
      }
  });
}

Var upsample_nearest2x(const Var& x) {
  if (x.value().rank() != 3) throw std::invalid_argument("upsample_nearest2x: expects CxHxW");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        out[(c * 2 * H + y) * 2 * W + xx] = x.value()[(c * H + y / 2) * W + xx / 2];
  return make_result(std::move(out), {x}, [C, H, W](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xx = 0; xx < 2 * W; ++xx)
          (*g)[(c * H + y / 2) * W + xx / 2] += self.grad[(c * 2 * H + y) * 2 * W + xx];
  });
}

}  // namespace cosy::ad
