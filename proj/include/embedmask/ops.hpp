#pragma once

// Differentiable primitives over Var<T>.
//
// Broadcasting is limited to scalar-vs-tensor (an operand with one element).
// Anything else needs an explicit reshape/gather/matmul.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "embedmask/tensor.hpp"

namespace embedmask {

/// Side of every kink (relu, max, sort order) taken by one evaluation.
/// Finite differences compare traces to stay on a single smooth piece.
struct BranchTrace {
  std::vector<std::uint64_t> decisions;
};

namespace detail {

inline thread_local BranchTrace* active_trace = nullptr;

inline void record_branch(std::uint64_t v) {
  if (active_trace) active_trace->decisions.push_back(v);
}

}  // namespace detail

/// Records branch decisions into `trace` on this thread while alive.
class BranchRecording {
 public:
  explicit BranchRecording(BranchTrace& trace) : prev_(detail::active_trace) { detail::active_trace = &trace; }
  ~BranchRecording() { detail::active_trace = prev_; }
  BranchRecording(const BranchRecording&) = delete;
  BranchRecording& operator=(const BranchRecording&) = delete;

 private:
  BranchTrace* prev_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_finite(const Var<T>& v, const char* op) {
  if constexpr (is_checking_mode_v<T>) {
    if (!v.value().all_finite()) throw NonFiniteError(std::string(op) + ": non-finite input");
  }
}

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Var<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : inputs) {
    if (!v->requires_grad()) continue;
    if (tape && v->tape() != tape) throw std::invalid_argument("operands recorded on different tapes");
    tape = v->tape();
  }
  return tape;
}

template <typename T, typename Backward>
Var<T> make_result(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
                   Backward&& backward) {
  for (const Var<T>* v : inputs) check_finite(*v, op);
  Tape<T>* tape = tape_of<T>(inputs);
  if (!tape) return Var<T>::constant(std::move(value));
  std::vector<std::shared_ptr<Node<T>>> nodes;
  nodes.reserve(inputs.size());
  for (const Var<T>* v : inputs) nodes.push_back(v->node());
  return tape->record(std::move(value), std::move(nodes), std::forward<Backward>(backward));
}

// Elementwise binary op with scalar broadcast. `fwd(a, b)` computes the value,
// `da(a, b, out)` and `db(a, b, out)` the local partials.
template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(const char* op, const Var<T>& a, const Var<T>& b, Fwd fwd, Da da, Db db) {
  const std::size_t na = a.numel(), nb = b.numel();
  const bool same = a.shape() == b.shape();
  if (!same && na != 1 && nb != 1) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Shape out_shape = (same || nb == 1) ? a.shape() : b.shape();
  const std::size_t n = std::max(na, nb);
  Tensor<T> out(out_shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[na == 1 ? 0 : i], bv[nb == 1 ? 0 : i]);
  return make_result<T>(op, std::move(out), {&a, &b}, [na, nb, n, da, db](Node<T>& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs[1];
    const auto& g = self.grad;
    const auto& x_in = an->value;
    const auto& y_in = bn->value;
    const auto& ov = self.value;
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T x = x_in[na == 1 ? 0 : i], y = y_in[nb == 1 ? 0 : i];
        ga[na == 1 ? 0 : i] += g[i] * da(x, y, ov[i]);
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T x = x_in[na == 1 ? 0 : i], y = y_in[nb == 1 ? 0 : i];
        gb[nb == 1 ? 0 : i] += g[i] * db(x, y, ov[i]);
      }
    }
  });
}

// Elementwise unary op; `d(x, out)` is the local derivative.
template <typename T, typename Fwd, typename D>
Var<T> unary(const char* op, const Var<T>& a, Fwd fwd, D d) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i]);
  return make_result<T>(op, std::move(out), {&a}, [d](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * d(in.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---- elementwise arithmetic -------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; }, [](T, T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; }, [](T, T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return detail::unary<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T out) { return out; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

/// sqrt with derivative 0 at 0 (the subgradient used by distance hinges).
template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return detail::unary<T>(
      "sqrt", a, [](T x) { detail::record_branch(x > T{0}); return std::sqrt(x); },
      [](T, T out) { return out > T{0} ? T{0.5} / out : T{0}; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { detail::record_branch(x > T{0}); return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T out) { return out * (T{1} - out); });
}

/// log(sigmoid(x)) without the underflow of composing the two.
template <typename T>
Var<T> log_sigmoid(const Var<T>& a) {
  return detail::unary<T>(
      "log_sigmoid", a,
      [](T x) { return x >= T{0} ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](T x, T) {
        // d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
        if (x >= T{0}) {
          const T e = std::exp(-x);
          return e / (T{1} + e);
        }
        return T{1} / (T{1} + std::exp(x));
      });
}

/// Elementwise max(x, c) for a scalar constant c. Derivative 1 where x > c.
template <typename T>
Var<T> max_const(const Var<T>& a, T c) {
  return detail::unary<T>(
      "max_const", a, [c](T x) { detail::record_branch(x > c); return x > c ? x : c; }, [c](T x, T) { return x > c ? T{1} : T{0}; });
}

/// Elementwise max(x, c) against a constant tensor of the same shape.
template <typename T>
Var<T> max_const(const Var<T>& a, const Tensor<T>& c) {
  if (c.shape() != a.shape()) {
    throw ShapeError("max_const: shape mismatch " + to_string(a.shape()) + " vs " + to_string(c.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    detail::record_branch(a.value()[i] > c[i]);
    out[i] = std::max(a.value()[i], c[i]);
  }
  return detail::make_result<T>("max_const", std::move(out), {&a}, [c](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) {
      if (in.value[i] > c[i]) gi[i] += self.grad[i];
    }
  });
}

/// Elementwise min(x, c) expressed through max_const.
template <typename T>
Var<T> min_const(const Var<T>& a, const Tensor<T>& c) {
  Tensor<T> negc(c.shape());
  for (std::size_t i = 0; i < c.numel(); ++i) negc[i] = -c[i];
  return neg(max_const(neg(a), negc));
}

// ---- reductions ---------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  return detail::make_result<T>("sum", Tensor<T>::scalar(s), {&a}, [](detail::Node<T>& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (auto& g : gi) g += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  const T n = static_cast<T>(a.numel());
  T s{0};
  for (T v : a.value().values()) s += v;
  return detail::make_result<T>("mean", Tensor<T>::scalar(s / n), {&a}, [n](detail::Node<T>& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (auto& g : gi) g += self.grad[0] / n;
  });
}

/// Squared Euclidean distance along the last axis: [..., D] x [..., D] -> [...].
template <typename T>
Var<T> sq_dist_last(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape() || a.shape().empty()) {
    throw ShapeError("sq_dist_last: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t d = a.shape().back();
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor<T> out(out_shape);
  const std::size_t rows = out.numel();
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = a.value()[r * d + k] - b.value()[r * d + k];
      s += diff * diff;
    }
    out[r] = s;
  }
  return detail::make_result<T>("sq_dist_last", std::move(out), {&a, &b}, [rows, d](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = self.grad[r];
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = an.value[r * d + k] - bn.value[r * d + k];
        if (an.requires_grad) an.grad_buffer()[r * d + k] += T{2} * diff * g;
        if (bn.requires_grad) bn.grad_buffer()[r * d + k] -= T{2} * diff * g;
      }
    }
  });
}

// ---- linear algebra -------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  Tensor<T> out(Shape{a.shape()[0], b.shape()[1]});
  detail::MatMap<T>(out.values().data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.value().values().data(), m, k) * detail::ConstMatMap<T>(b.value().values().data(), k, n);
  return detail::make_result<T>("matmul", std::move(out), {&a, &b}, [m, k, n](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    detail::ConstMatMap<T> g(self.grad.data(), m, n);
    if (an.requires_grad) {
      detail::MatMap<T>(an.grad_buffer().data(), m, k).noalias() +=
          g * detail::ConstMatMap<T>(bn.value.values().data(), k, n).transpose();
    }
    if (bn.requires_grad) {
      detail::MatMap<T>(bn.grad_buffer().data(), k, n).noalias() +=
          detail::ConstMatMap<T>(an.value.values().data(), m, k).transpose() * g;
    }
  });
}

/// 2-D convolution over an H x W x Cin map with a K x K x Cin x Cout kernel,
/// zero padding K/2, stride 1 or 2. Output is H' x W' x Cout.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (x.shape().size() != 3 || w.shape().size() != 4 || w.shape()[0] != w.shape()[1] || w.shape()[0] % 2 == 0 ||
      w.shape()[2] != x.shape()[2] || bias.shape() != Shape{w.shape()[3]}) {
    throw ShapeError("conv2d: incompatible input " + to_string(x.shape()) + ", kernel " + to_string(w.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  const std::size_t h = x.shape()[0], wd = x.shape()[1], cin = x.shape()[2];
  const std::size_t ks = w.shape()[0], cout = w.shape()[3];
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(ks / 2);
  const std::size_t ho = (h + 2 * (ks / 2) - ks) / stride + 1;
  const std::size_t wo = (wd + 2 * (ks / 2) - ks) / stride + 1;
  const std::size_t patch = ks * ks * cin;

  // im2col: one row per output location.
  auto cols = std::make_shared<std::vector<T>>(ho * wo * patch, T{0});
  const auto& xv = x.value();
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* row = cols->data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
          const T* src = xv.values().data() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
          std::copy(src, src + cin, row + (ky * ks + kx) * cin);
        }
      }
    }
  }
  const auto rows = static_cast<Eigen::Index>(ho * wo);
  const auto pk = static_cast<Eigen::Index>(patch);
  const auto co = static_cast<Eigen::Index>(cout);
  Tensor<T> out(Shape{ho, wo, cout});
  auto om = detail::MatMap<T>(out.values().data(), rows, co);
  om.noalias() = detail::ConstMatMap<T>(cols->data(), rows, pk) * detail::ConstMatMap<T>(w.value().values().data(), pk, co);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().values().data(), co);

  return detail::make_result<T>(
      "conv2d", std::move(out), {&x, &w, &bias},
      [cols, rows, pk, co, h, wd, cin, ks, stride, pad, ho, wo, patch](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        detail::ConstMatMap<T> g(self.grad.data(), rows, co);
        if (wn.requires_grad) {
          detail::MatMap<T>(wn.grad_buffer().data(), pk, co).noalias() +=
              detail::ConstMatMap<T>(cols->data(), rows, pk).transpose() * g;
        }
        if (bn.requires_grad) {
          // Plain row-ordered sum. Eigen's vectorized colwise() reduction picks
          // its summation order from the destination's alignment, which made
          // reruns differ with heap layout.
          std::vector<T> acc(static_cast<std::size_t>(co), T{0});
          const T* gp = self.grad.data();
          for (Eigen::Index r = 0; r < rows; ++r, gp += co)
            for (Eigen::Index c = 0; c < co; ++c) acc[static_cast<std::size_t>(c)] += gp[c];
          auto& gb = bn.grad_buffer();
          for (std::size_t c = 0; c < acc.size(); ++c) gb[c] += acc[c];
        }
        if (xn.requires_grad) {
          detail::RowMat<T> dcols = g * detail::ConstMatMap<T>(wn.value.values().data(), pk, co).transpose();
          auto& gx = xn.grad_buffer();
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T* row = dcols.data() + (oy * wo + ox) * patch;
              for (std::size_t ky = 0; ky < ks; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < ks; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  T* dst = gx.data() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
                  const T* src = row + (ky * ks + kx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        }
      });
}

// ---- structural -------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return detail::make_result<T>("reshape", std::move(out), {&a}, [](detail::Node<T>& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

/// Selects rows of an [N, D] tensor: out[r] = a[index[r]].
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> index) {
  if (a.shape().size() != 2) throw ShapeError("gather_rows: expected rank 2, got " + to_string(a.shape()));
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  Tensor<T> out(Shape{index.size(), d});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw std::out_of_range("gather_rows: index " + std::to_string(index[r]) + " out of range");
    std::copy_n(a.value().values().data() + index[r] * d, d, out.values().data() + r * d);
  }
  return detail::make_result<T>("gather_rows", std::move(out), {&a},
                                [index = std::move(index), d](detail::Node<T>& self) {
                                  auto& gi = self.inputs[0]->grad_buffer();
                                  for (std::size_t r = 0; r < index.size(); ++r) {
                                    for (std::size_t k = 0; k < d; ++k) gi[index[r] * d + k] += self.grad[r * d + k];
                                  }
                                });
}

/// Channel range [begin, end) of the last axis.
template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t begin, std::size_t end) {
  if (a.shape().empty() || begin >= end || end > a.shape().back()) {
    throw ShapeError("slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     to_string(a.shape()));
  }
  const std::size_t c = a.shape().back(), w = end - begin;
  Shape shape = a.shape();
  shape.back() = w;
  Tensor<T> out(shape);
  const std::size_t rows = out.numel() / w;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().values().data() + r * c + begin, w, out.values().data() + r * w);
  }
  return detail::make_result<T>("slice_last", std::move(out), {&a}, [rows, c, w, begin](detail::Node<T>& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < w; ++k) gi[r * c + begin + k] += self.grad[r * w + k];
    }
  });
}

// ---- operator sugar -----------------------------------------------------------

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a) { return neg(a); }
template <typename T>
Var<T> operator*(const Var<T>& a, T c) { return mul(a, Var<T>::constant(c)); }
template <typename T>
Var<T> operator*(T c, const Var<T>& a) { return mul(a, Var<T>::constant(c)); }
template <typename T>
Var<T> operator+(const Var<T>& a, T c) { return add(a, Var<T>::constant(c)); }
template <typename T>
Var<T> operator-(const Var<T>& a, T c) { return sub(a, Var<T>::constant(c)); }
template <typename T>
Var<T> operator-(T c, const Var<T>& a) { return sub(Var<T>::constant(c), a); }

}  // namespace embedmask
