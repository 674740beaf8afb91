#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/ops.hpp"
#include "blf/core/tensor.hpp"

namespace blf {

// Per-token attention role. Padding tokens attend to nothing and are
// attended by nothing.
enum class TokenRole : std::uint8_t { padding = 0, local = 1, global = 2 };

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq = 0;
  std::size_t heads = 1;
};

// Number of query-key score evaluations performed on this thread by the
// attention kernels since the last reset. Used to check the linear cost of
// windowed attention without timing anything.
inline std::uint64_t& attention_score_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

// Separate projections used by global tokens.
template <typename T>
struct GlobalProjections {
  Var<T> q, k, v;
};

namespace attention_detail {

// Softmax-weighted sum over an explicit key list for one (batch, head,
// query) row, recording probabilities for the backward pass.
template <typename T>
void attend_row(const T* q, const Tensor<T>& k, const Tensor<T>& v, std::span<const std::uint32_t> keys,
                std::size_t key_row0, std::size_t col0, std::size_t hd, T scale, T* out, T* probs) {
  if (keys.empty()) return;
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const T* kr = k.data().data() + (key_row0 + keys[t]) * k.cols() + col0;
    T s{0};
    for (std::size_t d = 0; d < hd; ++d) s += q[d] * kr[d];
    s *= scale;
    probs[t] = s;
    mx = std::max(mx, s);
  }
  attention_score_counter() += keys.size();
  T z{0};
  for (std::size_t t = 0; t < keys.size(); ++t) {
    probs[t] = std::exp(probs[t] - mx);
    z += probs[t];
  }
  for (std::size_t t = 0; t < keys.size(); ++t) {
    probs[t] /= z;
    const T* vr = v.data().data() + (key_row0 + keys[t]) * v.cols() + col0;
    for (std::size_t d = 0; d < hd; ++d) out[d] += probs[t] * vr[d];
  }
}

template <typename T>
void attend_row_backward(const T* q, const Tensor<T>& k, const Tensor<T>& v, std::span<const std::uint32_t> keys,
                         std::size_t key_row0, std::size_t col0, std::size_t hd, T scale, const T* dout,
                         const T* probs, T* dq, Tensor<T>* dk, Tensor<T>* dv, std::vector<T>& scratch) {
  if (keys.empty()) return;
  scratch.resize(keys.size());
  T dot{0};
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const std::size_t r = key_row0 + keys[t];
    const T* vr = v.data().data() + r * v.cols() + col0;
    T dp{0};
    for (std::size_t d = 0; d < hd; ++d) dp += dout[d] * vr[d];
    scratch[t] = dp;
    dot += dp * probs[t];
    if (dv) {
      T* dvr = dv->data().data() + r * dv->cols() + col0;
      for (std::size_t d = 0; d < hd; ++d) dvr[d] += probs[t] * dout[d];
    }
  }
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const std::size_t r = key_row0 + keys[t];
    const T ds = probs[t] * (scratch[t] - dot) * scale;
    if (ds == T{0}) continue;
    const T* kr = k.data().data() + r * k.cols() + col0;
    if (dq) {
      for (std::size_t d = 0; d < hd; ++d) dq[d] += ds * kr[d];
    }
    if (dk) {
      T* dkr = dk->data().data() + r * dk->cols() + col0;
      for (std::size_t d = 0; d < hd; ++d) dkr[d] += ds * q[d];
    }
  }
}

template <typename T>
void check_qkv(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t q_rows, std::size_t k_rows,
               std::size_t heads, const char* op) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": q, k, v must be rank 2");
  }
  const std::size_t h = q.value().dim(1);
  if (q.value().dim(0) != q_rows || k.value().dim(0) != k_rows || v.value().dim(0) != k_rows ||
      k.value().dim(1) != h || v.value().dim(1) != h) {
    throw DimensionError(std::string(op) + ": sequence lengths disagree: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  if (heads == 0 || h % heads != 0) {
    throw ConfigError(std::string(op) + ": width " + std::to_string(h) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

}  // namespace attention_detail

// Longformer attention over rows laid out as [batch * seq, hidden], heads
// occupying consecutive column blocks.
//  - a local token i attends to non-padding j with |i - j| <= window / 2 and
//    to every global token, using q/k/v;
//  - a global token attends to every non-padding token using the separate
//    global projections;
//  - padding rows output zeros.
template <typename T>
Var<T> sliding_window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout& layout,
                                std::size_t window, std::span<const TokenRole> roles,
                                const GlobalProjections<T>* global = nullptr) {
  if (window == 0 || window % 2 != 0) {
    throw ConfigError("attention window must be a positive even integer, got " + std::to_string(window));
  }
  const std::size_t B = layout.batch, L = layout.seq, H = layout.heads;
  attention_detail::check_qkv(q, k, v, B * L, B * L, H, "sliding_window_attention");
  if (roles.size() != B * L) throw DimensionError("sliding_window_attention: roles length mismatch");
  const std::size_t hidden = q.value().dim(1), hd = hidden / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);

  bool any_global = false;
  for (auto r : roles) any_global = any_global || r == TokenRole::global;
  if (any_global) {
    if (!global) throw UsageError("sliding_window_attention: global tokens present but no global projections");
    attention_detail::check_qkv(global->q, global->k, global->v, B * L, B * L, H, "sliding_window_attention(global)");
  }

  // Key lists per query row (shared by all heads) and CSR offsets.
  std::vector<std::uint32_t> keys;
  std::vector<std::size_t> offsets{0};
  keys.reserve(B * L * (window + 1));
  for (std::size_t b = 0; b < B; ++b) {
    const TokenRole* rb = roles.data() + b * L;
    std::vector<std::uint32_t> globals;
    for (std::size_t j = 0; j < L; ++j) {
      if (rb[j] == TokenRole::global) globals.push_back(static_cast<std::uint32_t>(j));
    }
    for (std::size_t i = 0; i < L; ++i) {
      if (rb[i] == TokenRole::global) {
        for (std::size_t j = 0; j < L; ++j) {
          if (rb[j] != TokenRole::padding) keys.push_back(static_cast<std::uint32_t>(j));
        }
      } else if (rb[i] == TokenRole::local) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - half);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(L) - 1, static_cast<std::ptrdiff_t>(i) + half);
        auto g = globals.begin();
        for (; g != globals.end() && static_cast<std::ptrdiff_t>(*g) < lo; ++g) keys.push_back(*g);
        for (std::ptrdiff_t j = lo; j <= hi; ++j) {
          if (rb[j] != TokenRole::padding) keys.push_back(static_cast<std::uint32_t>(j));
        }
        for (; g != globals.end(); ++g) {
          if (static_cast<std::ptrdiff_t>(*g) > hi) keys.push_back(*g);
        }
      }
      offsets.push_back(keys.size());
    }
  }

  std::vector<T> probs(keys.size() * H);
  Tensor<T> out(Shape{B * L, hidden});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t row = b * L + i;
      const TokenRole role = roles[row];
      if (role == TokenRole::padding) continue;
      const bool g = role == TokenRole::global;
      const Tensor<T>& qs = g ? global->q.value() : q.value();
      const Tensor<T>& ks = g ? global->k.value() : k.value();
      const Tensor<T>& vs = g ? global->v.value() : v.value();
      std::span<const std::uint32_t> kl(keys.data() + offsets[row], offsets[row + 1] - offsets[row]);
      for (std::size_t h = 0; h < H; ++h) {
        attention_detail::attend_row(qs.data().data() + row * hidden + h * hd, ks, vs, kl, b * L, h * hd, hd, scale,
                                     out.data().data() + row * hidden + h * hd, probs.data() + offsets[row] * H + h * kl.size());
      }
    }
  }

  std::vector<Var<T>> inputs{q, k, v};
  if (any_global) {
    inputs.push_back(global->q);
    inputs.push_back(global->k);
    inputs.push_back(global->v);
  }
  std::vector<TokenRole> role_copy(roles.begin(), roles.end());
  return detail::make_node<T>(
      std::move(out), inputs,
      [B, L, H, hd, hidden, scale, keys = std::move(keys), offsets = std::move(offsets), probs = std::move(probs),
       role_copy = std::move(role_copy)](Node<T>& n) {
        const bool has_global = n.inputs.size() == 6;
        std::vector<T> scratch;
        for (std::size_t row = 0; row < B * L; ++row) {
          const TokenRole role = role_copy[row];
          if (role == TokenRole::padding) continue;
          const std::size_t base = (role == TokenRole::global && has_global) ? 3 : 0;
          auto& qn = n.inputs[base];
          auto& kn = n.inputs[base + 1];
          auto& vn = n.inputs[base + 2];
          Tensor<T>* dq = detail::grad_sink(qn);
          Tensor<T>* dk = detail::grad_sink(kn);
          Tensor<T>* dv = detail::grad_sink(vn);
          std::span<const std::uint32_t> kl(keys.data() + offsets[row], offsets[row + 1] - offsets[row]);
          const std::size_t b = row / L;
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = row * hidden + h * hd;
            attention_detail::attend_row_backward(qn->value.data().data() + off, kn->value, vn->value, kl, b * L, h * hd,
                                                  hd, scale, n.grad.data().data() + off,
                                                  probs.data() + offsets[row] * H + h * kl.size(),
                                                  dq ? dq->data().data() + off : nullptr, dk, dv, scratch);
          }
        }
      });
}

// Dense multi-head attention with key padding and an optional causal mask,
// over rows [batch * q_len, hidden] attending to [batch * k_len, hidden].
// Query rows with no admissible key output zeros.
template <typename T>
Var<T> masked_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t heads,
                        std::size_t q_len, std::size_t k_len, std::span<const std::uint8_t> key_valid, bool causal) {
  attention_detail::check_qkv(q, k, v, batch * q_len, batch * k_len, heads, "masked_attention");
  if (key_valid.size() != batch * k_len) throw DimensionError("masked_attention: key mask length mismatch");
  const std::size_t hidden = q.value().dim(1), hd = hidden / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));

  std::vector<std::uint32_t> keys;
  std::vector<std::size_t> offsets{0};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < q_len; ++i) {
      const std::size_t limit = causal ? std::min(k_len, i + 1) : k_len;
      for (std::size_t j = 0; j < limit; ++j) {
        if (key_valid[b * k_len + j]) keys.push_back(static_cast<std::uint32_t>(j));
      }
      offsets.push_back(keys.size());
    }
  }
  std::vector<T> probs(keys.size() * heads);
  Tensor<T> out(Shape{batch * q_len, hidden});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < q_len; ++i) {
      const std::size_t row = b * q_len + i;
      std::span<const std::uint32_t> kl(keys.data() + offsets[row], offsets[row + 1] - offsets[row]);
      for (std::size_t h = 0; h < heads; ++h) {
        attention_detail::attend_row(q.value().data().data() + row * hidden + h * hd, k.value(), v.value(), kl, b * k_len,
                                     h * hd, hd, scale, out.data().data() + row * hidden + h * hd,
                                     probs.data() + offsets[row] * heads + h * kl.size());
      }
    }
  }
  return detail::make_node<T>(
      std::move(out), {q, k, v},
      [batch, heads, q_len, k_len, hd, hidden, scale, keys = std::move(keys), offsets = std::move(offsets),
       probs = std::move(probs)](Node<T>& n) {
        Tensor<T>* dq = detail::grad_sink(n.inputs[0]);
        Tensor<T>* dk = detail::grad_sink(n.inputs[1]);
        Tensor<T>* dv = detail::grad_sink(n.inputs[2]);
        std::vector<T> scratch;
        for (std::size_t row = 0; row < batch * q_len; ++row) {
          std::span<const std::uint32_t> kl(keys.data() + offsets[row], offsets[row + 1] - offsets[row]);
          const std::size_t b = row / q_len;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = row * hidden + h * hd;
            attention_detail::attend_row_backward(n.inputs[0]->value.data().data() + off, n.inputs[1]->value,
                                                  n.inputs[2]->value, kl, b * k_len, h * hd, hd, scale,
                                                  n.grad.data().data() + off, probs.data() + offsets[row] * heads + h * kl.size(),
                                                  dq ? dq->data().data() + off : nullptr, dk, dv, scratch);
          }
        }
      });
}

// Reference full O(n^2) single-head attention with an arbitrary boolean
// mask (mask[i * n + j] != 0 admits key j for query i). Rows without any
// admissible key output zeros.
template <typename T>
Tensor<T> dense_attention_oracle(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                 std::span<const std::uint8_t> mask) {
  const std::size_t n = q.dim(0), m = k.dim(0), d = q.dim(1);
  if (mask.size() != n * m || v.dim(0) != m || k.dim(1) != d) throw DimensionError("dense_attention_oracle: shape mismatch");
  Tensor<T> out(Shape{n, v.dim(1)});
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<T> s(m);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask[i * m + j]) {
        s[j] = -std::numeric_limits<T>::infinity();
        continue;
      }
      T acc{0};
      for (std::size_t c = 0; c < d; ++c) acc += q.at(i, c) * k.at(j, c);
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T z{0};
    for (std::size_t j = 0; j < m; ++j) {
      s[j] = mask[i * m + j] ? std::exp(s[j] - mx) : T{0};
      z += s[j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (s[j] == T{0}) continue;
      for (std::size_t c = 0; c < v.dim(1); ++c) out.at(i, c) += s[j] / z * v.at(j, c);
    }
  }
  return out;
}

}  // namespace blf
