#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/rng.hpp"
#include "blf/core/tensor.hpp"

namespace blf {

using TokenId = std::int32_t;

// Label value that cross_entropy skips.
inline constexpr TokenId kIgnoreLabel = -100;

namespace kernel {

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace kernel

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

template <typename T>
T gelu_value(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T x2 = x * x;
  const T u = c * (x + T(0.044715) * x2 * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3 * 0.044715) * x2);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& in : n.inputs) {
      if (auto* g = detail::grad_sink(in)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = detail::grad_sink(n.inputs[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
    if (auto* g = detail::grad_sink(n.inputs[1])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (auto* g = detail::grad_sink(n.inputs[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (auto* g = detail::grad_sink(n.inputs[1])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= s;
  return detail::make_node<T>(std::move(out), {a}, [s](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

// x[..., D] + bias[D], broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t d = x.value().cols();
  if (bias.value().rank() != 1 || bias.value().size() != d) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < d; ++j) row[j] += bv[j];
  }
  return detail::make_node<T>(std::move(out), {x, bias}, [d](Node<T>& n) {
    if (auto* g = detail::grad_sink(n.inputs[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
    if (auto* g = detail::grad_sink(n.inputs[1])) {
      for (std::size_t r = 0; r < n.grad.rows(); ++r) {
        auto row = n.grad.row(r);
        for (std::size_t j = 0; j < d; ++j) (*g)[j] += row[j];
      }
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k || a.value().dtype() != b.value().dtype()) {
    throw DimensionError("matmul: inner extents disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernel::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return detail::make_node<T>(std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    const T* dc = node.grad.data().data();
    if (auto* g = detail::grad_sink(node.inputs[0])) {
      kernel::gemm_nt(dc, node.inputs[1]->value.data().data(), g->data().data(), m, n, k);
    }
    if (auto* g = detail::grad_sink(node.inputs[1])) {
      kernel::gemm_tn(node.inputs[0]->value.data().data(), dc, g->data().data(), m, k, n);
    }
  });
}

// a[M,K] * b[N,K]^T, used for projections tied to an embedding table.
template <typename T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul_bt");
  detail::require_rank(b, 2, "matmul_bt");
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(0);
  if (b.value().dim(1) != k) {
    throw DimensionError("matmul_bt: inner extents disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  kernel::gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return detail::make_node<T>(std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    const T* dc = node.grad.data().data();
    if (auto* g = detail::grad_sink(node.inputs[0])) {
      kernel::gemm_nn(dc, node.inputs[1]->value.data().data(), g->data().data(), m, n, k);
    }
    if (auto* g = detail::grad_sink(node.inputs[1])) {
      kernel::gemm_tn(dc, node.inputs[0]->value.data().data(), g->data().data(), m, n, k);
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = detail::gelu_value(v);
  return detail::make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    const auto& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * detail::gelu_derivative(xv[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return detail::make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
  });
}

// Softmax along `axis` with max subtraction.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  Tensor<T> out = x.value();
  for (const T v : out.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      T* base = out.data().data() + o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, base[i * inner]);
      T sum{0};
      for (std::size_t i = 0; i < len; ++i) {
        base[i * inner] = std::exp(base[i * inner] - mx);
        sum += base[i * inner];
      }
      for (std::size_t i = 0; i < len; ++i) base[i * inner] /= sum;
    }
  }
  return detail::make_node<T>(std::move(out), {x}, [outer, inner, len](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t off = o * len * inner + in;
        T dot{0};
        for (std::size_t i = 0; i < len; ++i) dot += n.grad[off + i * inner] * n.value[off + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t idx = off + i * inner;
          (*g)[idx] += n.value[idx] * (n.grad[idx] - dot);
        }
      }
    }
  });
}

// Normalizes the last axis to zero mean / unit (population) variance, then
// applies gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t d = x.value().cols();
  if (x.value().rank() == 0 || d == 0) {
    throw DimensionError("layer_norm: zero-length normalized axis in " + shape_string(x.shape()));
  }
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + " do not match " +
                         shape_string(x.shape()));
  }
  if (!(eps > T{0})) throw UsageError("layer_norm: eps must be positive");
  const std::size_t rows = x.value().rows();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().size());
  std::vector<T> rstd(rows);
  const auto& g = gain.value();
  const auto& b = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = x.value().row(r);
    T mean{0};
    for (T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    auto orow = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      orow[j] = h * g[j] + b[j];
    }
  }
  return detail::make_node<T>(
      std::move(out), {x, gain, bias},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
        const auto& gv = n.inputs[1]->value;
        auto* gx = detail::grad_sink(n.inputs[0]);
        auto* gg = detail::grad_sink(n.inputs[1]);
        auto* gb = detail::grad_sink(n.inputs[2]);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          auto dy = n.grad.row(r);
          const T* h = xhat.data() + r * d;
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * h[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
          }
          if (gx) {
            T mean_d{0}, mean_dh{0};
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[j] * gv[j];
              mean_d += dxhat[j];
              mean_dh += dxhat[j] * h[j];
            }
            mean_d /= static_cast<T>(d);
            mean_dh /= static_cast<T>(d);
            auto gr = gx->row(r);
            for (std::size_t j = 0; j < d; ++j) gr[j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
          }
        }
      });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return detail::make_node<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    const T d = n.grad[0];
    for (auto& v : g->data()) v += d;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.value().size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return detail::make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

// Rows of table[V, D] selected by ids; gradient scatters back.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const TokenId> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t v = table.value().dim(0), d = table.value().dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  std::vector<TokenId> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      throw RangeError("embedding: id " + std::to_string(idx[i]) + " outside [0, " + std::to_string(v) + ")");
    }
    auto src = table.value().row(static_cast<std::size_t>(idx[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return detail::make_node<T>(std::move(out), {table}, [idx = std::move(idx)](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g->row(static_cast<std::size_t>(idx[i]));
      auto src = n.grad.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t d = x.value().dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor<T> out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.value().dim(0)) {
      throw RangeError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
    }
    auto src = x.value().row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return detail::make_node<T>(std::move(out), {x}, [idx = std::move(idx)](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g->row(idx[i]);
      auto src = n.grad.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

// Inverted dropout; identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw UsageError("dropout probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_node<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& n) {
    auto* g = detail::grad_sink(n.inputs[0]);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * mask[i];
  });
}

// Mean negative log-likelihood of targets under softmax(logits) over the
// positions whose target is not ignore_label. Zero (with zero gradient) when
// every position is ignored.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const TokenId> targets, TokenId ignore_label = kIgnoreLabel) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.value().dim(0), v = logits.value().dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::size_t count = 0;
  for (TokenId t : tg) {
    if (t == ignore_label) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw RangeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  // Softmax probabilities are kept for the backward pass.
  std::vector<T> probs(count ? n * v : 0);
  T total{0};
  if (count) {
    for (std::size_t r = 0; r < n; ++r) {
      if (tg[r] == ignore_label) continue;
      auto row = logits.value().row(r);
      T mx = -std::numeric_limits<T>::infinity();
      for (T x : row) mx = std::max(mx, x);
      T s{0};
      for (std::size_t j = 0; j < v; ++j) {
        const T e = std::exp(row[j] - mx);
        probs[r * v + j] = e;
        s += e;
      }
      for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= s;
      total += -(row[static_cast<std::size_t>(tg[r])] - mx - std::log(s));
    }
    total /= static_cast<T>(count);
  }
  return detail::make_node<T>(
      Tensor<T>::scalar(total), {logits},
      [tg = std::move(tg), probs = std::move(probs), count, v, ignore_label](Node<T>& node) {
        if (count == 0) return;
        auto* g = detail::grad_sink(node.inputs[0]);
        const T d = node.grad[0] / static_cast<T>(count);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == ignore_label) continue;
          auto gr = g->row(r);
          for (std::size_t j = 0; j < v; ++j) gr[j] += d * probs[r * v + j];
          gr[static_cast<std::size_t>(tg[r])] -= d;
        }
      });
}

// Mean over non-ignored positions of -[y log s(z) + (1-y) log(1-s(z))].
// `ignore` may be empty (nothing ignored); nonzero entries are skipped.
template <typename T>
Var<T> binary_cross_entropy_with_logits(const Var<T>& logits, std::span<const T> labels,
                                        std::span<const std::uint8_t> ignore = {}) {
  const std::size_t n = logits.value().size();
  if (labels.size() != n || (!ignore.empty() && ignore.size() != n)) {
    throw DimensionError("binary_cross_entropy_with_logits: labels/mask length does not match logits " +
                         shape_string(logits.shape()));
  }
  std::vector<T> y(labels.begin(), labels.end());
  std::vector<std::uint8_t> skip(ignore.begin(), ignore.end());
  std::size_t count = 0;
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (!skip.empty() && skip[i]) continue;
    const T z = logits.value()[i];
    total += std::max(z, T{0}) - z * y[i] + std::log1p(std::exp(-std::abs(z)));
    ++count;
  }
  if (count) total /= static_cast<T>(count);
  return detail::make_node<T>(Tensor<T>::scalar(total), {logits},
                              [y = std::move(y), skip = std::move(skip), count](Node<T>& node) {
                                if (count == 0) return;
                                auto* g = detail::grad_sink(node.inputs[0]);
                                const auto& z = node.inputs[0]->value;
                                const T d = node.grad[0] / static_cast<T>(count);
                                for (std::size_t i = 0; i < y.size(); ++i) {
                                  if (!skip.empty() && skip[i]) continue;
                                  const T s = T{1} / (T{1} + std::exp(-z[i]));
                                  (*g)[i] += d * (s - y[i]);
                                }
                              });
}

}  // namespace blf
