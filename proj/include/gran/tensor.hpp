#pragma once

// Dense n-dimensional tensors with reverse-mode automatic differentiation.
// Values are float by default; tests instantiate with double so that
// finite-difference gradient checks are meaningful. Tensors are immutable
// once produced by an op; only optimizer code touches mutable_data().

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gran/common.hpp"

namespace gran {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool autograd_on = true;

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;  // grad-requiring parents only
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

}  // namespace detail

// RAII guard: ops created while active record no tape (pure evaluation).
struct autograd_pause {
  bool prev;
  autograd_pause() : prev(detail::autograd_on) { detail::autograd_on = false; }
  ~autograd_pause() { detail::autograd_on = prev; }
  autograd_pause(const autograd_pause&) = delete;
  autograd_pause& operator=(const autograd_pause&) = delete;
};

template <typename S>
class Tensor {
 public:
  using Node = detail::TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor full(Shape shape, S v) {
    std::vector<S> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor from(Shape shape, std::vector<S> data) {
    const std::size_t n = shape_numel(shape);
    if (data.empty()) data.assign(n, S(0));
    if (data.size() != n) {
      throw input_error("tensor: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->data.size(); }

  std::span<const S> data() const { return {n_->data.data(), n_->data.size()}; }
  std::span<S> mutable_data() { return {n_->data.data(), n_->data.size()}; }

  S item() const {
    if (size() != 1) throw contract_error("item: tensor has " + std::to_string(size()) + " elements");
    return n_->data[0];
  }

  // Row-major element access, mostly for tests.
  S value(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw input_error("value: index rank mismatch");
    std::size_t off = 0, i = 0;
    for (std::size_t v : idx) off = off * n_->shape[i++] + v;
    return n_->data[off];
  }

  bool requires_grad() const { return n_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    n_->requires_grad = on;
    return *this;
  }

  std::span<const S> grad() const { return {n_->grad.data(), n_->grad.size()}; }
  std::span<S> mutable_grad() {
    n_->ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // grad-requiring tensor reachable through the tape.
  void backward() const {
    if (size() != 1) throw contract_error("backward: root must be a scalar tensor");
    if (!n_->requires_grad) return;
    std::vector<Node*> order;
    topo_order(order);
    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backprop) {
        node->ensure_grad();
        node->backprop(*node);
      }
    }
  }

  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  void topo_order(std::vector<Node*>& out) const {
    std::unordered_set<Node*> done;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next == 0 && done.count(node)) {
        stack.pop_back();
        continue;
      }
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (!done.count(p)) stack.emplace_back(p, 0);
      } else {
        if (done.insert(node).second) out.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> n_;
};

// Builds an op result node. `backprop` reads self.grad and accumulates into
// the parent nodes it captured; it is recorded only when some parent needs
// gradients and autograd is on, so evaluation-only passes hold no tape.
template <typename S, typename F>
Tensor<S> make_op(Shape shape, std::vector<S> data, std::initializer_list<Tensor<S>> parents,
                  F&& backprop) {
  if (data.size() != shape_numel(shape)) throw contract_error("make_op: shape/data mismatch");
  auto node = std::make_shared<detail::TensorNode<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool req = false;
  if (detail::autograd_on) {
    for (const auto& p : parents) req = req || p.requires_grad();
  }
  node->requires_grad = req;
  if (req) {
    for (const auto& p : parents) {
      if (p.requires_grad()) node->parents.push_back(p.node());
    }
    node->backprop = std::forward<F>(backprop);
  }
  return Tensor<S>::wrap(std::move(node));
}

namespace detail {

// C += A * B with row-major C[M,N], A[M,K], B[K,N]. K is blocked so the
// active B tile stays cache-resident across the M sweep; the j-loop
// vectorizes.
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t kb = std::max<std::size_t>(1, (8192 / sizeof(S) * 4) / std::max<std::size_t>(n, 1));
  for (std::size_t l0 = 0; l0 < k; l0 += kb) {
    const std::size_t l1 = std::min(k, l0 + kb);
    for (std::size_t i = 0; i < m; ++i) {
      const S* ar = a + i * k;
      S* cr = c + i * n;
      for (std::size_t l = l0; l < l1; ++l) {
        const S av = ar[l];
        const S* br = b + l * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  }
}

template <typename S>
void transpose2d(const S* a, S* at, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) at[j * rows + i] = a[i * cols + j];
}

inline void check_axis(std::size_t rank, int& axis) {
  if (axis < 0) axis += static_cast<int>(rank);
  if (axis < 0 || axis >= static_cast<int>(rank)) {
    throw input_error("axis " + std::to_string(axis) + " out of range for rank " +
                      std::to_string(rank));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::vector<S> out(a.data().begin(), a.data().end());
  if (sa == sb) {
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return make_op<S>(sa, std::move(out), {a, b}, [an = a.node(), bn = b.node()](auto& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
      }
    });
  }
  // bias case: b broadcast over the trailing dimension of a
  if (sb.size() == 1 && !sa.empty() && sa.back() == sb[0]) {
    const std::size_t n = sb[0];
    const std::size_t rows = out.size() / n;
    const auto bd = b.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
    return make_op<S>(sa, std::move(out), {a, b},
                      [an = a.node(), bn = b.node(), rows, n](auto& self) {
                        if (an->requires_grad) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            an->grad[i] += self.grad[i];
                        }
                        if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < n; ++j)
                              bn->grad[j] += self.grad[r * n + j];
                        }
                      });
  }
  throw input_error("add: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw input_error("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_op<S>(a.shape(), std::move(out), {a, b}, [an = a.node(), bn = b.node()](auto& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw input_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op<S>(a.shape(), std::move(out), {a, b}, [an = a.node(), bn = b.node()](auto& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
  return make_op<S>(a.shape(), std::move(out), {a}, [an = a.node(), c](auto& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
  });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return scale(a, c); }
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return scale(a, c); }

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = 0;
  for (S v : a.data()) acc += v;
  return make_op<S>({1}, {acc}, {a}, [an = a.node()](auto& self) {
    an->ensure_grad();
    const S g = self.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

// ---------------------------------------------------------------------------
// matmul

// a: [..., m, k] x b: [..., k, n] -> [..., m, n]. Leading dimensions must be
// equal, or absent on one side (that operand is then shared across the batch).
// No other broadcasting.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw input_error("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                      shape_str(sb));
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t k2 = sb[sb.size() - 2], n = sb.back();
  Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
  if (k != k2 || (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b))
    throw input_error("matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const Shape& lead = lead_a.empty() ? lead_b : lead_a;
  const std::size_t batch = shape_numel(lead);
  const bool a_batched = !lead_a.empty();
  const bool b_batched = !lead_b.empty();

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<S> out(batch * m * n, S(0));
  const S* ad = a.data().data();
  const S* bd = b.data().data();
  if (!b_batched) {
    // shared right operand: one flat gemm over all batch rows
    detail::gemm_acc(ad, bd, out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      detail::gemm_acc(ad + (a_batched ? t * m * k : 0), bd + t * k * n, out.data() + t * m * n,
                       m, k, n);
    }
  }
  return make_op<S>(std::move(out_shape), std::move(out), {a, b},
                    [an = a.node(), bn = b.node(), batch, m, k, n, a_batched,
                     b_batched](auto& self) {
                      std::vector<S> scratch;
                      if (an->requires_grad) {
                        an->ensure_grad();
                        scratch.resize(k * n);
                        if (!b_batched && a_batched) {
                          detail::transpose2d(bn->data.data(), scratch.data(), k, n);
                          detail::gemm_acc(self.grad.data(), scratch.data(), an->grad.data(),
                                           batch * m, n, k);
                        } else {
                          for (std::size_t t = 0; t < batch; ++t) {
                            const S* bslice = bn->data.data() + (b_batched ? t * k * n : 0);
                            detail::transpose2d(bslice, scratch.data(), k, n);
                            detail::gemm_acc(self.grad.data() + t * m * n, scratch.data(),
                                             an->grad.data() + (a_batched ? t * m * k : 0), m, n,
                                             k);
                          }
                        }
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        if (!b_batched && a_batched) {
                          // dB += A^T * dZ over the flattened batch rows
                          scratch.resize(batch * m * k);
                          detail::transpose2d(an->data.data(), scratch.data(), batch * m, k);
                          detail::gemm_acc(scratch.data(), self.grad.data(), bn->grad.data(), k,
                                           batch * m, n);
                        } else {
                          scratch.resize(m * k);
                          for (std::size_t t = 0; t < batch; ++t) {
                            const S* aslice = an->data.data() + (a_batched ? t * m * k : 0);
                            detail::transpose2d(aslice, scratch.data(), m, k);
                            detail::gemm_acc(scratch.data(), self.grad.data() + t * m * n,
                                             bn->grad.data() + (b_batched ? t * k * n : 0), k, m,
                                             n);
                          }
                        }
                      }
                    });
}

// Swaps the last two dimensions.
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  const auto& sa = a.shape();
  if (sa.size() < 2) throw input_error("transpose: rank must be >= 2, got " + shape_str(sa));
  const std::size_t r = sa[sa.size() - 2], c = sa.back();
  const std::size_t batch = a.size() / (r * c);
  Shape out_shape = sa;
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  std::vector<S> out(a.size());
  const S* ad = a.data().data();
  for (std::size_t t = 0; t < batch; ++t)
    detail::transpose2d(ad + t * r * c, out.data() + t * r * c, r, c);
  return make_op<S>(std::move(out_shape), std::move(out), {a},
                    [an = a.node(), batch, r, c](auto& self) {
                      an->ensure_grad();
                      std::vector<S> scratch(r * c);
                      for (std::size_t t = 0; t < batch; ++t) {
                        detail::transpose2d(self.grad.data() + t * r * c, scratch.data(), c, r);
                        S* g = an->grad.data() + t * r * c;
                        for (std::size_t i = 0; i < r * c; ++i) g[i] += scratch[i];
                      }
                    });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw input_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<S> out(a.data().begin(), a.data().end());
  return make_op<S>(std::move(shape), std::move(out), {a}, [an = a.node()](auto& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// nonlinearities

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  detail::check_axis(x.rank(), axis);
  const auto& sh = x.shape();
  const std::size_t n = sh[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t lines = x.size() / n;
  std::vector<S> out(x.size());
  const S* xd = x.data().data();
  for (std::size_t line = 0; line < lines; ++line) {
    const std::size_t base = (line / inner) * n * inner + (line % inner);
    S mx = xd[base];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
    S denom = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const S e = std::exp(xd[base + i * inner] - mx);
      out[base + i * inner] = e;
      denom += e;
    }
    const S inv = S(1) / denom;
    for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
  }
  return make_op<S>(sh, std::move(out), {x}, [xn = x.node(), n, inner, lines](auto& self) {
    xn->ensure_grad();
    for (std::size_t line = 0; line < lines; ++line) {
      const std::size_t base = (line / inner) * n * inner + (line % inner);
      S dot = 0;
      for (std::size_t i = 0; i < n; ++i)
        dot += self.grad[base + i * inner] * self.data[base + i * inner];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = base + i * inner;
        xn->grad[at] += self.data[at] * (self.grad[at] - dot);
      }
    }
  });
}

// x * Phi(x) with the exact normal CDF.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  std::vector<S> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S cdf = S(0.5) * std::erfc(-xd[i] * S(0.7071067811865475244));
    out[i] = xd[i] * cdf;
  }
  return make_op<S>(x.shape(), std::move(out), {x}, [xn = x.node()](auto& self) {
    xn->ensure_grad();
    constexpr S inv_sqrt2 = S(0.7071067811865475244);
    constexpr S inv_sqrt2pi = S(0.3989422804014326779);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const S v = xn->data[i];
      const S cdf = S(0.5) * std::erfc(-v * inv_sqrt2);
      const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
      xn->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// Normalizes over the trailing dimension, then applies the affine gain/bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-6)) {
  if (eps <= S(0)) throw input_error("layer_norm: eps must be positive");
  const auto& sh = x.shape();
  if (sh.empty()) throw input_error("layer_norm: rank must be >= 1");
  const std::size_t n = sh.back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
    throw input_error("layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  const std::size_t rows = x.size() / n;
  std::vector<S> out(x.size());
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto inv_sd = std::make_shared<std::vector<S>>(rows);
  const S* xd = x.data().data();
  const S* gd = gain.data().data();
  const S* bd = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = xd + r * n;
    S mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= S(n);
    S var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const S d = row[j] - mean;
      var += d * d;
    }
    var /= S(n);
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_sd)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const S h = (row[j] - mean) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gd[j] * h + bd[j];
    }
  }
  return make_op<S>(sh, std::move(out), {x, gain, bias},
                    [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat, inv_sd, rows,
                     n](auto& self) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const S* g = self.grad.data() + r * n;
                        const S* h = xhat->data() + r * n;
                        if (gn->requires_grad) {
                          gn->ensure_grad();
                          for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * h[j];
                        }
                        if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
                        }
                        if (xn->requires_grad) {
                          xn->ensure_grad();
                          // dx = (inv/n) * (n*dh - sum(dh) - h*sum(dh*h)), dh = g*gain
                          S sum_dh = 0, sum_dh_h = 0;
                          for (std::size_t j = 0; j < n; ++j) {
                            const S dh = g[j] * gn->data[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                          }
                          const S inv = (*inv_sd)[r];
                          for (std::size_t j = 0; j < n; ++j) {
                            const S dh = g[j] * gn->data[j];
                            xn->grad[r * n + j] +=
                                inv / S(n) * (S(n) * dh - sum_dh - h[j] * sum_dh_h);
                          }
                        }
                      }
                    });
}

// Training mode zeroes entries with probability `rate` and rescales survivors
// by 1/(1-rate); eval mode is the identity (the input tensor is returned).
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw input_error("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const S keep_scale = S(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<S>>(x.size());
  std::vector<S> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S m = rng.uniform() < rate ? S(0) : keep_scale;
    (*mask)[i] = m;
    out[i] = xd[i] * m;
  }
  return make_op<S>(x.shape(), std::move(out), {x}, [xn = x.node(), mask](auto& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * (*mask)[i];
  });
}

// -sum_t y_t log softmax(logits)_t for one distribution; y must sum to 1.
template <typename S>
Tensor<S> soft_cross_entropy(const Tensor<S>& logits, const Tensor<S>& y) {
  if (logits.rank() != 1 || y.shape() != logits.shape())
    throw input_error("soft_cross_entropy: expected matching rank-1 tensors, got " +
                      shape_str(logits.shape()) + " and " + shape_str(y.shape()));
  const std::size_t c = logits.size();
  const auto ld = logits.data();
  const auto yd = y.data();
  S ysum = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (yd[i] < S(-1e-6)) throw input_error("soft_cross_entropy: label entries must be nonnegative");
    ysum += yd[i];
  }
  if (std::abs(double(ysum) - 1.0) > 1e-6)
    throw input_error("soft_cross_entropy: label must sum to 1, got " + std::to_string(double(ysum)));
  S mx = ld[0];
  for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, ld[i]);
  S denom = 0;
  for (std::size_t i = 0; i < c; ++i) denom += std::exp(ld[i] - mx);
  const S lse = mx + std::log(denom);
  S loss = 0;
  for (std::size_t i = 0; i < c; ++i) loss += yd[i] * (lse - ld[i]);
  return make_op<S>({1}, {loss}, {logits, y},
                    [ln = logits.node(), yn = y.node(), lse, c](auto& self) {
                      const S g = self.grad[0];
                      if (ln->requires_grad) {
                        ln->ensure_grad();
                        for (std::size_t i = 0; i < c; ++i) {
                          const S p = std::exp(ln->data[i] - lse);
                          ln->grad[i] += g * (p - yn->data[i]);
                        }
                      }
                      if (yn->requires_grad) {
                        yn->ensure_grad();
                        for (std::size_t i = 0; i < c; ++i)
                          yn->grad[i] += g * (lse - ln->data[i]);
                      }
                    });
}

// ---------------------------------------------------------------------------
// gather / slice ops

// Gathers rows along axis 0: out[i, ...] = x[ids[i], ...].
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::shared_ptr<const std::vector<std::uint32_t>> ids) {
  if (x.rank() < 1) throw input_error("gather_rows: rank must be >= 1");
  const std::size_t v = x.shape()[0];
  const std::size_t stride = x.size() / v;
  for (auto id : *ids) {
    if (id >= v)
      throw input_error("gather_rows: index " + std::to_string(id) + " out of range " +
                        std::to_string(v));
  }
  Shape out_shape = x.shape();
  out_shape[0] = ids->size();
  std::vector<S> out(ids->size() * stride);
  const S* xd = x.data().data();
  for (std::size_t i = 0; i < ids->size(); ++i)
    std::copy_n(xd + (*ids)[i] * stride, stride, out.data() + i * stride);
  return make_op<S>(std::move(out_shape), std::move(out), {x},
                    [xn = x.node(), ids, stride](auto& self) {
                      xn->ensure_grad();
                      for (std::size_t i = 0; i < ids->size(); ++i) {
                        S* dst = xn->grad.data() + (*ids)[i] * stride;
                        const S* src = self.grad.data() + i * stride;
                        for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
                      }
                    });
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<std::uint32_t> ids) {
  return gather_rows(x, std::make_shared<const std::vector<std::uint32_t>>(std::move(ids)));
}

// Contiguous row range along axis 0.
template <typename S>
Tensor<S> row_range(const Tensor<S>& x, std::size_t begin, std::size_t count) {
  if (x.rank() < 1 || begin + count > x.shape()[0])
    throw input_error("row_range: [" + std::to_string(begin) + "," +
                      std::to_string(begin + count) + ") out of range for " +
                      shape_str(x.shape()));
  const std::size_t stride = x.size() / x.shape()[0];
  Shape out_shape = x.shape();
  out_shape[0] = count;
  std::vector<S> out(count * stride);
  std::copy_n(x.data().data() + begin * stride, out.size(), out.data());
  return make_op<S>(std::move(out_shape), std::move(out), {x},
                    [xn = x.node(), begin, stride](auto& self) {
                      xn->ensure_grad();
                      S* dst = xn->grad.data() + begin * stride;
                      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
                    });
}

// Contiguous slice along the trailing dimension.
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, std::size_t offset, std::size_t count) {
  const std::size_t n = x.shape().back();
  if (offset + count > n)
    throw input_error("slice_last: [" + std::to_string(offset) + "," +
                      std::to_string(offset + count) + ") out of range for " +
                      shape_str(x.shape()));
  const std::size_t rows = x.size() / n;
  Shape out_shape = x.shape();
  out_shape.back() = count;
  std::vector<S> out(rows * count);
  const S* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xd + r * n + offset, count, out.data() + r * count);
  return make_op<S>(std::move(out_shape), std::move(out), {x},
                    [xn = x.node(), offset, count, n, rows](auto& self) {
                      xn->ensure_grad();
                      for (std::size_t r = 0; r < rows; ++r) {
                        S* dst = xn->grad.data() + r * n + offset;
                        const S* src = self.grad.data() + r * count;
                        for (std::size_t j = 0; j < count; ++j) dst[j] += src[j];
                      }
                    });
}

// Concatenates along the trailing dimension.
template <typename S>
Tensor<S> concat_last(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw input_error("concat_last: no parts");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    const std::size_t w = pl.back();
    pl.pop_back();
    if (pl != lead) throw input_error("concat_last: leading dims differ");
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<S> out(rows * total);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const S* pd = parts[p].data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd + r * widths[p], widths[p], out.data() + r * total + off);
    off += widths[p];
  }
  // make_op takes an initializer_list; build the node by hand for n parents.
  auto node = std::make_shared<detail::TensorNode<S>>();
  node->shape = std::move(out_shape);
  node->data = std::move(out);
  bool req = false;
  if (detail::autograd_on)
    for (const auto& p : parts) req = req || p.requires_grad();
  node->requires_grad = req;
  if (req) {
    std::vector<std::shared_ptr<detail::TensorNode<S>>> pn;
    for (const auto& p : parts) {
      pn.push_back(p.node());
      if (p.requires_grad()) node->parents.push_back(p.node());
    }
    node->backprop = [pn, widths, rows, total](detail::TensorNode<S>& self) {
      std::size_t off2 = 0;
      for (std::size_t p = 0; p < pn.size(); ++p) {
        if (pn[p]->requires_grad) {
          pn[p]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const S* src = self.grad.data() + r * total + off2;
            S* dst = pn[p]->grad.data() + r * widths[p];
            for (std::size_t j = 0; j < widths[p]; ++j) dst[j] += src[j];
          }
        }
        off2 += widths[p];
      }
    };
  }
  return Tensor<S>::wrap(std::move(node));
}

// out[b, :] = x[b, pos[b], :] for x of shape [B, k, d].
template <typename S>
Tensor<S> select_positions(const Tensor<S>& x,
                           std::shared_ptr<const std::vector<std::uint32_t>> pos) {
  if (x.rank() != 3) throw input_error("select_positions: expected rank-3 input");
  const std::size_t bsz = x.shape()[0], k = x.shape()[1], d = x.shape()[2];
  if (pos->size() != bsz) throw input_error("select_positions: position count mismatch");
  std::vector<S> out(bsz * d);
  const S* xd = x.data().data();
  for (std::size_t b = 0; b < bsz; ++b) {
    if ((*pos)[b] >= k) throw input_error("select_positions: position out of range");
    std::copy_n(xd + (b * k + (*pos)[b]) * d, d, out.data() + b * d);
  }
  return make_op<S>({bsz, d}, std::move(out), {x}, [xn = x.node(), pos, k, d](auto& self) {
    xn->ensure_grad();
    for (std::size_t b = 0; b < pos->size(); ++b) {
      S* dst = xn->grad.data() + (b * k + (*pos)[b]) * d;
      const S* src = self.grad.data() + b * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.data())
    if (!std::isfinite(double(v))) return false;
  return true;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace gran
