#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/tensor.hpp"

// Differentiable operations over Tensor<T>. Every op computes its forward value
// eagerly and, when recording, attaches a closure that maps the output gradient
// onto its inputs.

namespace vfetps {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

// [batch, rows, cols] view of a rank-2 or rank-3 tensor.
struct MatDims {
  std::size_t batch, rows, cols;
};

inline MatDims mat_dims(const Shape& s, const char* op) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected rank 2 or 3, got " + shape_str(s));
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

// Batched C = op(A) * op(B), accumulating when `accumulate` is set.
template <class T>
void gemm(const T* a, const T* b, T* c, const MatDims& ad, const MatDims& bd, bool ta, bool tb,
          std::size_t batch, bool accumulate) {
  const auto m = ta ? ad.cols : ad.rows;
  const auto n = tb ? bd.rows : bd.cols;
  const std::size_t a_stride = ad.batch == 1 ? 0 : ad.rows * ad.cols;
  const std::size_t b_stride = bd.batch == 1 ? 0 : bd.rows * bd.cols;
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap<T> A(a + i * a_stride, ad.rows, ad.cols);
    ConstMap<T> B(b + i * b_stride, bd.rows, bd.cols);
    MutMap<T> C(c + i * m * n, m, n);
    if (accumulate) {
      if (!ta && !tb) C.noalias() += A * B;
      else if (!ta && tb) C.noalias() += A * B.transpose();
      else if (ta && !tb) C.noalias() += A.transpose() * B;
      else C.noalias() += A.transpose() * B.transpose();
    } else {
      if (!ta && !tb) C.noalias() = A * B;
      else if (!ta && tb) C.noalias() = A * B.transpose();
      else if (ta && !tb) C.noalias() = A.transpose() * B;
      else C.noalias() = A.transpose() * B.transpose();
    }
  }
}

// Accumulates a batched product into a possibly-unbatched gradient target by
// summing over the batch when the operand was shared.
template <class T>
void gemm_into(std::vector<T>& target, const MatDims& target_dims, const T* a, const T* b,
               const MatDims& ad, const MatDims& bd, bool ta, bool tb, std::size_t batch) {
  const std::size_t out_sz = target_dims.rows * target_dims.cols;
  const std::size_t a_stride = ad.batch == 1 ? 0 : ad.rows * ad.cols;
  const std::size_t b_stride = bd.batch == 1 ? 0 : bd.rows * bd.cols;
  for (std::size_t i = 0; i < batch; ++i) {
    T* dst = target.data() + (target_dims.batch == 1 ? 0 : i * out_sz);
    gemm(a + i * a_stride, b + i * b_stride, dst, MatDims{1, ad.rows, ad.cols},
         MatDims{1, bd.rows, bd.cols}, ta, tb, 1, true);
  }
}

template <class T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  const auto ad = mat_dims(a.shape(), "matmul");
  const auto bd = mat_dims(b.shape(), "matmul");
  const auto k_b = trans_b ? bd.cols : bd.rows;
  const auto n = trans_b ? bd.rows : bd.cols;
  if (ad.cols != k_b || (ad.batch != bd.batch && ad.batch != 1 && bd.batch != 1)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (trans_b ? " (second transposed)" : ""));
  }
  if (a.rank() == 2 && b.rank() == 3) {
    throw DimensionError("matmul: unbatched left operand with batched right operand " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = std::max(ad.batch, bd.batch);
  std::vector<T> out(batch * ad.rows * n);
  gemm(a.data().data(), b.data().data(), out.data(), ad, bd, false, trans_b, batch, false);
  Shape shape = batch == 1 && a.rank() == 2 ? Shape{ad.rows, n} : Shape{batch, ad.rows, n};
  return make_result<T>(std::move(shape), std::move(out), {a, b}, trans_b ? "matmul_nt" : "matmul",
                        [a, b, ad, bd, n, batch, trans_b](const std::vector<T>& g) {
                          const MatDims gd{batch, ad.rows, n};
                          if (auto* ga = grad_target(a)) {
                            // no trans: dA = G B^T ; trans: dA = G B
                            gemm_into(*ga, ad, g.data(), b.data().data(), gd, bd, false, !trans_b, batch);
                          }
                          if (auto* gb = grad_target(b)) {
                            if (!trans_b) {
                              gemm_into(*gb, bd, a.data().data(), g.data(), ad, gd, true, false, batch);
                            } else {
                              gemm_into(*gb, bd, g.data(), a.data().data(), gd, ad, true, false, batch);
                            }
                          }
                        });
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, op, [x, deriv](const std::vector<T>& g) {
    if (auto* gx = grad_target(x)) {
      const auto xs = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv(xs[i]);
    }
  });
}

}  // namespace detail

/// Matrix product. Accepts [m,k]x[k,n] and batched [b,m,k]x[b,k,n]; a rank-2
/// right operand is shared across the batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, false);
}

/// a * b^T, with the same batching rules as matmul.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, true);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [a, b](const std::vector<T>& g) {
    if (auto* ga = grad_target(a)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = grad_target(b)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [a, b](const std::vector<T>& g) {
    if (auto* ga = grad_target(a)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = grad_target(b)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [a, b](const std::vector<T>& g) {
    if (auto* ga = grad_target(a)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
    if (auto* gb = grad_target(b)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
  });
}

/// x + b where b is tiled over x (b.numel() must divide x.numel()). Covers row
/// biases ([n] over [m,n]) and positional tables ([L,d] over [B*L,d]).
template <class T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& b) {
  const auto period = b.numel();
  if (period == 0 || x.numel() % period != 0) {
    throw DimensionError("add_broadcast: cannot tile " + shape_str(b.shape()) + " over " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  const T* xs = x.data().data();
  const T* bs = b.data().data();
  for (std::size_t base = 0; base < out.size(); base += period)
    for (std::size_t j = 0; j < period; ++j) out[base + j] = xs[base + j] + bs[j];
  return make_result<T>(x.shape(), std::move(out), {x, b}, "add_broadcast",
                        [x, b, period](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x)) {
                            T* dst = gx->data();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                          }
                          if (auto* gb = grad_target(b)) {
                            T* dst = gb->data();
                            for (std::size_t base = 0; base < g.size(); base += period)
                              for (std::size_t j = 0; j < period; ++j) dst[j] += g[base + j];
                          }
                        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(x, "scale", [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>(x, "add_scalar", [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>(x, "log", [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const auto xs = x.data();
  const bool keep = grad_enabled() && x.requires_grad();
  std::vector<T> out(xs.size()), deriv(keep ? xs.size() : 0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T v = xs[i];
    const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
    out[i] = v * cdf;
    if (keep) deriv[i] = cdf + v * std::exp(T(-0.5) * v * v) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "gelu", [x, deriv = std::move(deriv)](const std::vector<T>& g) {
    if (auto* gx = grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv[i];
  });
}

/// Neumaier-compensated sum of all elements.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0, carry = 0;
  for (auto v : x.data()) {
    const T t = acc + v;
    carry += std::abs(acc) >= std::abs(v) ? (acc - t) + v : (v - t) + acc;
    acc = t;
  }
  acc += carry;
  return make_result<T>(Shape{1}, {acc}, {x}, "sum", [x](const std::vector<T>& g) {
    if (auto* gx = grad_target(x)) for (auto& v : *gx) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum of absolute values.
template <class T>
Tensor<T> l1_norm(const Tensor<T>& x) {
  return sum(abs(x));
}

/// Euclidean norm of all entries; gradient at the origin is taken as zero.
template <class T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v * v;
  const T n = std::sqrt(acc);
  return make_result<T>(Shape{1}, {n}, {x}, "l2_norm", [x, n](const std::vector<T>& g) {
    if (auto* gx = grad_target(x)) {
      if (n == T(0)) return;
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0] * x[i] / n;
    }
  });
}

/// Swaps the last two dimensions.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  const auto d = detail::mat_dims(x.shape(), "transpose");
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t r = 0; r < d.rows; ++r)
      for (std::size_t c = 0; c < d.cols; ++c)
        out[b * d.rows * d.cols + c * d.rows + r] = x[b * d.rows * d.cols + r * d.cols + c];
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  return make_result<T>(std::move(s), std::move(out), {x}, "transpose", [x, d](const std::vector<T>& g) {
    if (auto* gx = grad_target(x)) {
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t r = 0; r < d.rows; ++r)
          for (std::size_t c = 0; c < d.cols; ++c)
            (*gx)[b * d.rows * d.cols + r * d.cols + c] += g[b * d.rows * d.cols + c * d.rows + r];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.values(), {x}, "reshape", [x](const std::vector<T>& g) {
    if (auto* gx = grad_target(x)) for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// General axis permutation: output dim i is input dim perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& in = x.shape();
  const auto r = in.size();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(in));
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r) throw DimensionError("permute: axis out of range");
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // Source offset for every output position.
  std::vector<std::size_t> index(x.numel());
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < index.size(); ++o) {
    index[o] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[index[o]];
  return make_result<T>(std::move(out_shape), std::move(out), {x}, "permute",
                        [x, index = std::move(index)](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x))
                            for (std::size_t o = 0; o < g.size(); ++o) (*gx)[index[o]] += g[o];
                        });
}

/// Rows of a rank-2 tensor selected by index (repeats allowed).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expected rank 2, got " + shape_str(x.shape()));
  const auto n = x.dim(1);
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.data().begin() + rows[i] * n, n, out.begin() + i * n);
  }
  Shape s{rows.size(), n};
  return make_result<T>(std::move(s), std::move(out), {x}, "gather_rows",
                        [x, rows = std::move(rows), n](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x))
                            for (std::size_t i = 0; i < rows.size(); ++i)
                              for (std::size_t c = 0; c < n; ++c) (*gx)[rows[i] * n + c] += g[i * n + c];
                        });
}

/// Flat-indexed element gather; result is rank 1.
template <class T>
Tensor<T> gather_elements(const Tensor<T>& x, std::vector<std::size_t> idx) {
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel()) throw DimensionError("gather_elements: index out of range");
    out[i] = x[idx[i]];
  }
  Shape s{idx.size()};
  return make_result<T>(std::move(s), std::move(out), {x}, "gather_elements",
                        [x, idx = std::move(idx)](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x))
                            for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += g[i];
                        });
}

/// Stacks rank-2 tensors with equal column counts.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto n = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != n) throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result_list<T>(Shape{rows, n}, std::move(out), parts, "concat_rows",
                             [parts](const std::vector<T>& g) {
                               std::size_t offset = 0;
                               for (const auto& p : parts) {
                                 if (auto* gp = grad_target(p))
                                   for (std::size_t i = 0; i < p.numel(); ++i) (*gp)[i] += g[offset + i];
                                 offset += p.numel();
                               }
                             });
}

/// Softmax along `axis` with per-slice max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const auto ax = detail::normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const auto len = s[ax];
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  auto y = out;
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax",
                        [x, y = std::move(y), outer, inner, len](const std::vector<T>& g) {
                          auto* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              T dot = 0;
                              for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                              for (std::size_t k = 0; k < len; ++k) {
                                const auto i = base + k * inner;
                                (*gx)[i] += y[i] * (g[i] - dot);
                              }
                            }
                          }
                        });
}

/// log(softmax(x)) computed as x - max - log(sum(exp(x - max))).
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, long axis = -1) {
  const auto ax = detail::normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const auto len = s[ax];
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = 0;
      for (std::size_t k = 0; k < len; ++k) z += std::exp(x[base + k * inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = x[base + k * inner] - lse;
    }
  }
  auto y = out;
  return make_result<T>(x.shape(), std::move(out), {x}, "log_softmax",
                        [x, y = std::move(y), outer, inner, len](const std::vector<T>& g) {
                          auto* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              T gs = 0;
                              for (std::size_t k = 0; k < len; ++k) gs += g[base + k * inner];
                              for (std::size_t k = 0; k < len; ++k) {
                                const auto i = base + k * inner;
                                (*gx)[i] += g[i] - std::exp(y[i]) * gs;
                              }
                            }
                          }
                        });
}

/// Layer normalization over the last dimension with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine size mismatch for " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gamma[c] + beta[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](const std::vector<T>& g) {
        auto* gx = grad_target(x);
        auto* gg = grad_target(gamma);
        auto* gb = grad_target(beta);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (gg) for (std::size_t c = 0; c < d; ++c) (*gg)[c] += gr[c] * xh[c];
          if (gb) for (std::size_t c = 0; c < d; ++c) (*gb)[c] += gr[c];
          if (!gx) continue;
          T m1 = 0, m2 = 0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = gr[c] * gamma[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) (*gx)[r * d + c] += inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
        }
      });
}

/// Divides each row of a rank-2 tensor by max(||row||, floor).
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x, T floor = T(1e-12)) {
  if (x.rank() != 2) throw DimensionError("normalize_rows: expected rank 2, got " + shape_str(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += x[r * cols + c] * x[r * cols + c];
    norms[r] = std::max(std::sqrt(acc), floor);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / norms[r];
  }
  auto y = out;
  return make_result<T>(x.shape(), std::move(out), {x}, "normalize_rows",
                        [x, y = std::move(y), norms = std::move(norms), rows, cols, floor](const std::vector<T>& g) {
                          auto* gx = grad_target(x);
                          if (!gx) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const bool floored = norms[r] <= floor;
                            T dot = 0;
                            if (!floored)
                              for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                            for (std::size_t c = 0; c < cols; ++c) {
                              const auto i = r * cols + c;
                              (*gx)[i] += (g[i] - y[i] * dot) / norms[r];
                            }
                          }
                        });
}

/// Pairwise cosine similarities between the rows of a [m,d] and b [n,d].
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-12)) {
  return matmul_nt(normalize_rows(a, floor), normalize_rows(b, floor));
}

/// Rearranges [B*gh*gw, C*r*r] grid cells into images [B, C, gh*r, gw*r].
/// Output pixel (ch, y*r+i, x*r+j) of cell (y, x) reads channel ch*r*r + i*r + j.
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t batch, std::size_t grid_h, std::size_t grid_w,
                        std::size_t channels, std::size_t r) {
  const std::size_t cell = channels * r * r;
  if (x.rank() != 2 || x.dim(0) != batch * grid_h * grid_w || x.dim(1) != cell) {
    throw DimensionError("pixel_shuffle: expected [" + std::to_string(batch * grid_h * grid_w) + "x" +
                         std::to_string(cell) + "], got " + shape_str(x.shape()));
  }
  const std::size_t H = grid_h * r, W = grid_w * r;
  std::vector<std::size_t> index(x.numel());  // output -> input
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t row = b * grid_h * grid_w + (yy / r) * grid_w + xx / r;
          const std::size_t col = ch * r * r + (yy % r) * r + xx % r;
          index[((b * channels + ch) * H + yy) * W + xx] = row * cell + col;
        }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[index[o]];
  return make_result<T>(Shape{batch, channels, H, W}, std::move(out), {x}, "pixel_shuffle",
                        [x, index = std::move(index)](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x))
                            for (std::size_t o = 0; o < g.size(); ++o) (*gx)[index[o]] += g[o];
                        });
}

/// Exact inverse of pixel_shuffle: [B, C, H, W] -> [B*(H/r)*(W/r), C*r*r].
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw DimensionError("pixel_unshuffle: shape " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), gh = x.dim(2) / r, gw = x.dim(3) / r;
  const std::size_t H = x.dim(2), W = x.dim(3), cell = C * r * r;
  std::vector<std::size_t> index(x.numel());  // output -> input
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t row = b * gh * gw + (yy / r) * gw + xx / r;
          const std::size_t col = ch * r * r + (yy % r) * r + xx % r;
          index[row * cell + col] = ((b * C + ch) * H + yy) * W + xx;
        }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[index[o]];
  return make_result<T>(Shape{B * gh * gw, cell}, std::move(out), {x}, "pixel_unshuffle",
                        [x, index = std::move(index)](const std::vector<T>& g) {
                          if (auto* gx = grad_target(x))
                            for (std::size_t o = 0; o < g.size(); ++o) (*gx)[index[o]] += g[o];
                        });
}

}  // namespace vfetps
