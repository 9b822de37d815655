#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfusion/tensor.hpp"

namespace xfusion {

// ---------------------------------------------------------------------------
// raw kernels (row-major, accumulate into C)
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void k_gemm_nn(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<size_t>(i) * n;
        const T* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T s = ai[p];
            const T* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += s * bp[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename T>
void k_gemm_nt(T* c, const T* a, const T* b, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<size_t>(i) * n;
        T* ci = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T* bp = b + static_cast<size_t>(p) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void k_gemm_tn(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<size_t>(i) * k;
        const T* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T s = ai[p];
            if (s == T(0)) continue;
            T* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += s * bi[j];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto an = a.node(), bn = b.node();
    auto out = make_op<T>(
        a.shape(), {an, bn}, [an, bn](TensorNode<T>& o) {
            if (wants_grad(*an))
                for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            if (wants_grad(*bn))
                for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
        });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto an = a.node(), bn = b.node();
    auto out = make_op<T>(
        a.shape(), {an, bn}, [an, bn](TensorNode<T>& o) {
            if (wants_grad(*an))
                for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * (*bn->value)[i];
            if (wants_grad(*bn))
                for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * (*an->value)[i];
        });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    return out;
}

// y = mul*x + add, with constant coefficients
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T mul_c, T add_c) {
    auto xn = x.node();
    auto out = make_op<T>(
        x.shape(), {xn}, [xn, mul_c](TensorNode<T>& o) {
            if (wants_grad(*xn))
                for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += mul_c * o.grad[i];
        });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = mul_c * xv[i] + add_c;
    return out;
}

// y = s * x where s is a learnable scalar tensor
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be scalar, got " + shape_str(s.shape()));
    auto xn = x.node(), sn = s.node();
    auto out = make_op<T>(
        x.shape(), {xn, sn}, [xn, sn](TensorNode<T>& o) {
            const T sv = (*sn->value)[0];
            if (wants_grad(*xn))
                for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += sv * o.grad[i];
            if (wants_grad(*sn)) {
                T acc = 0;
                for (size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * (*xn->value)[i];
                sn->grad[0] += acc;
            }
        });
    const T sv = s.item();
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = sv * xv[i];
    return out;
}

// broadcast add of a [n] vector over the rows of x [..., n]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.shape().empty() || v.shape().size() != 1 || x.shape().back() != v.extent(0))
        throw std::invalid_argument("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const int n = v.extent(0);
    auto xn = x.node(), vn = v.node();
    auto out = make_op<T>(
        x.shape(), {xn, vn}, [xn, vn, n](TensorNode<T>& o) {
            const size_t rows = o.grad.size() / n;
            if (wants_grad(*xn))
                for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
            if (wants_grad(*vn))
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) vn->grad[j] += o.grad[r * n + j];
        });
    const auto& xv = x.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    const size_t rows = ov.size() / n;
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + vv[j];
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    auto xn = x.node();
    auto out = make_op<T>(
        x.shape(), {xn}, [xn](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            for (size_t i = 0; i < o.grad.size(); ++i) {
                const T xv = (*xn->value)[i];
                const T sg = T(1) / (T(1) + std::exp(-xv));
                xn->grad[i] += o.grad[i] * sg * (T(1) + xv * (T(1) - sg));
            }
        });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] / (T(1) + std::exp(-xv[i]));
    return out;
}

template <typename T>
Tensor<T> tanh_t(const Tensor<T>& x) {
    auto xn = x.node();
    auto out = make_op<T>(
        x.shape(), {xn}, [xn](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            for (size_t i = 0; i < o.grad.size(); ++i) {
                const T y = std::tanh((*xn->value)[i]);
                xn->grad[i] += o.grad[i] * (T(1) - y * y);
            }
        });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.extent(1) != b.extent(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    auto an = a.node(), bn = b.node();
    auto out = make_op<T>(
        {m, n}, {an, bn}, [an, bn, m, k, n](TensorNode<T>& o) {
            if (wants_grad(*an)) k_gemm_nt(an->grad.data(), o.grad.data(), bn->value->data(), m, n, k);
            if (wants_grad(*bn)) k_gemm_tn(bn->grad.data(), an->value->data(), o.grad.data(), m, k, n);
        });
    k_gemm_nn(out.data().data(), a.data().data(), b.data().data(), m, k, n);
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

inline constexpr double kRmsEps = 1e-5;

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain) {
    if (x.shape().empty() || gain.shape().size() != 1 || x.shape().back() != gain.extent(0))
        throw std::invalid_argument("rmsnorm: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()));
    const int d = gain.extent(0);
    auto xn = x.node(), gn = gain.node();
    auto out = make_op<T>(
        x.shape(), {xn, gn}, [xn, gn, d](TensorNode<T>& o) {
            const size_t rows = o.grad.size() / d;
            const bool gx = wants_grad(*xn), gg = wants_grad(*gn);
            if (!gx && !gg) return;
            for (size_t r = 0; r < rows; ++r) {
                const T* xr = xn->value->data() + r * d;
                const T* gr = gn->value->data();
                const T* dy = o.grad.data() + r * d;
                T ms = 0;
                for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
                const T rms = std::sqrt(ms / d + T(kRmsEps));
                if (gg)
                    for (int j = 0; j < d; ++j) gn->grad[j] += dy[j] * xr[j] / rms;
                if (gx) {
                    T dot = 0;
                    for (int j = 0; j < d; ++j) dot += gr[j] * dy[j] * xr[j];
                    const T c = dot / (d * rms * rms * rms);
                    T* dx = xn->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) dx[j] += gr[j] * dy[j] / rms - xr[j] * c;
                }
            }
        });
    const auto& xv = x.data();
    const auto& gv = gain.data();
    auto& ov = out.data();
    const size_t rows = ov.size() / d;
    for (size_t r = 0; r < rows; ++r) {
        T ms = 0;
        for (int j = 0; j < d; ++j) ms += xv[r * d + j] * xv[r * d + j];
        const T inv = T(1) / std::sqrt(ms / d + T(kRmsEps));
        for (int j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * inv * gv[j];
    }
    return out;
}

// rows of the trailing axis sum to one; max-subtracted for stability
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.shape().empty() || x.shape().back() < 1)
        throw std::invalid_argument("softmax_rows: bad shape " + shape_str(x.shape()));
    const int n = x.shape().back();
    auto xn = x.node();
    auto out = make_op<T>(
        x.shape(), {xn}, [xn, n](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            const size_t rows = o.grad.size() / n;
            for (size_t r = 0; r < rows; ++r) {
                const T* y = o.value->data() + r * n;
                const T* dy = o.grad.data() + r * n;
                T dot = 0;
                for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
                T* dx = xn->grad.data() + r * n;
                for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    const auto& xv = x.data();
    auto& ov = out.data();
    const size_t rows = ov.size() / n;
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T mx = xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        T sum = 0;
        for (int j = 0; j < n; ++j) {
            const T e = std::exp(xr[j] - mx);
            ov[r * n + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < n; ++j) ov[r * n + j] *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// gather / scatter
// ---------------------------------------------------------------------------

// rows of x selected by idx; also serves as the embedding lookup
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: need 2-d input");
    const int rows = x.extent(0), d = x.extent(1);
    for (int i : idx)
        if (i < 0 || i >= rows) throw std::out_of_range("gather_rows: index " + std::to_string(i));
    auto xn = x.node();
    const int n = static_cast<int>(idx.size());
    auto out = make_op<T>(
        {n, d}, {xn}, [xn, idx, d](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            for (size_t i = 0; i < idx.size(); ++i) {
                T* dst = xn->grad.data() + static_cast<size_t>(idx[i]) * d;
                const T* src = o.grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    auto& ov = out.data();
    const auto& xv = x.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) ov[static_cast<size_t>(i) * d + j] = xv[static_cast<size_t>(idx[i]) * d + j];
    return out;
}

// full-length sequence built from two row sources living at given positions;
// every position must be covered by exactly one source (b may be empty)
template <typename T>
Tensor<T> assemble_rows(int length, const std::vector<int>& idx_a, const Tensor<T>& a,
                        const std::vector<int>& idx_b, const Tensor<T>& b) {
    if (static_cast<int>(idx_a.size()) != a.extent(0) || static_cast<int>(idx_b.size()) != b.extent(0))
        throw std::invalid_argument("assemble_rows: index count does not match row count");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.extent(1) != b.extent(1))
        throw std::invalid_argument("assemble_rows: row width mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int d = a.extent(1);
    std::vector<char> covered(length, 0);
    for (int i : idx_a) covered.at(i)++;
    for (int i : idx_b) covered.at(i)++;
    for (int p = 0; p < length; ++p)
        if (covered[p] != 1) throw std::invalid_argument("assemble_rows: position " + std::to_string(p) +
                                                         " covered " + std::to_string(covered[p]) + " times");
    auto an = a.node(), bn = b.node();
    auto out = make_op<T>(
        {length, d}, {an, bn}, [an, bn, idx_a, idx_b, d](TensorNode<T>& o) {
            if (wants_grad(*an))
                for (size_t i = 0; i < idx_a.size(); ++i) {
                    const T* src = o.grad.data() + static_cast<size_t>(idx_a[i]) * d;
                    T* dst = an->grad.data() + i * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            if (wants_grad(*bn))
                for (size_t i = 0; i < idx_b.size(); ++i) {
                    const T* src = o.grad.data() + static_cast<size_t>(idx_b[i]) * d;
                    T* dst = bn->grad.data() + i * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
        });
    auto& ov = out.data();
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < idx_a.size(); ++i)
        std::copy_n(av.data() + i * d, d, ov.data() + static_cast<size_t>(idx_a[i]) * d);
    for (size_t i = 0; i < idx_b.size(); ++i)
        std::copy_n(bv.data() + i * d, d, ov.data() + static_cast<size_t>(idx_b[i]) * d);
    return out;
}

// ---------------------------------------------------------------------------
// fused multi-head attention
// ---------------------------------------------------------------------------

// Boolean mask rows: allowed[i*lk + j] says query row i may attend to key j.
// q is [nq, d], k/v are [lk, d]; output [nq, d]. Probabilities are kept for
// the backward pass.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                              const std::vector<char>& allowed) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw std::invalid_argument("multihead_attention: need 2-d q/k/v");
    const int nq = q.extent(0), d = q.extent(1), lk = k.extent(0);
    if (k.extent(1) != d || v.extent(1) != d || v.extent(0) != lk)
        throw std::invalid_argument("multihead_attention: q/k/v shape mismatch");
    if (heads <= 0 || d % heads != 0)
        throw std::invalid_argument("multihead_attention: head count " + std::to_string(heads) +
                                    " does not divide dim " + std::to_string(d));
    if (allowed.size() != static_cast<size_t>(nq) * lk)
        throw std::invalid_argument("multihead_attention: mask size mismatch");
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(heads) * nq * lk, T(0));
    // forward: per-head scores -> masked softmax -> context
    {
        const T* qd = q.data().data();
        const T* kd = k.data().data();
        for (int a = 0; a < heads; ++a) {
            const int off = a * dh;
            for (int i = 0; i < nq; ++i) {
                T* pr = probs->data() + (static_cast<size_t>(a) * nq + i) * lk;
                const T* qi = qd + static_cast<size_t>(i) * d + off;
                const char* mrow = allowed.data() + static_cast<size_t>(i) * lk;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < lk; ++j) {
                    if (!mrow[j]) continue;
                    const T* kj = kd + static_cast<size_t>(j) * d + off;
                    T s = 0;
                    for (int u = 0; u < dh; ++u) s += qi[u] * kj[u];
                    s *= scale;
                    pr[j] = s;
                    mx = std::max(mx, s);
                }
                if (mx == -std::numeric_limits<T>::infinity())
                    throw std::logic_error("multihead_attention: query row " + std::to_string(i) +
                                           " has no allowed keys");
                T sum = 0;
                for (int j = 0; j < lk; ++j) {
                    if (!mrow[j]) {
                        pr[j] = 0;
                        continue;
                    }
                    pr[j] = std::exp(pr[j] - mx);
                    sum += pr[j];
                }
                const T inv = T(1) / sum;
                for (int j = 0; j < lk; ++j) pr[j] *= inv;
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node();
    auto out = make_op<T>(
        {nq, d}, {qn, kn, vn},
        [qn, kn, vn, probs, heads, nq, lk, d, dh, scale](TensorNode<T>& o) {
            const bool gq = wants_grad(*qn), gk = wants_grad(*kn), gv = wants_grad(*vn);
            if (!gq && !gk && !gv) return;
            std::vector<T> ds(lk);  // per-row score gradient
            for (int a = 0; a < heads; ++a) {
                const int off = a * dh;
                for (int i = 0; i < nq; ++i) {
                    const T* pr = probs->data() + (static_cast<size_t>(a) * nq + i) * lk;
                    const T* dctx = o.grad.data() + static_cast<size_t>(i) * d + off;
                    if (gv) {
                        for (int j = 0; j < lk; ++j) {
                            const T p = pr[j];
                            if (p == T(0)) continue;
                            T* dvj = vn->grad.data() + static_cast<size_t>(j) * d + off;
                            for (int u = 0; u < dh; ++u) dvj[u] += p * dctx[u];
                        }
                    }
                    if (!gq && !gk) continue;
                    // dP[j] = <dctx, V_j>, dS = P*(dP - sum(P*dP))
                    T dot = 0;
                    for (int j = 0; j < lk; ++j) {
                        const T p = pr[j];
                        if (p == T(0)) {
                            ds[j] = 0;
                            continue;
                        }
                        const T* vj = vn->value->data() + static_cast<size_t>(j) * d + off;
                        T dp = 0;
                        for (int u = 0; u < dh; ++u) dp += dctx[u] * vj[u];
                        ds[j] = p * dp;
                        dot += ds[j];
                    }
                    const T* qi = qn->value->data() + static_cast<size_t>(i) * d + off;
                    T* dqi = gq ? qn->grad.data() + static_cast<size_t>(i) * d + off : nullptr;
                    for (int j = 0; j < lk; ++j) {
                        const T p = pr[j];
                        if (p == T(0)) continue;
                        const T dsj = (ds[j] - p * dot) * scale;
                        const T* kj = kn->value->data() + static_cast<size_t>(j) * d + off;
                        if (gq)
                            for (int u = 0; u < dh; ++u) dqi[u] += dsj * kj[u];
                        if (gk) {
                            T* dkj = kn->grad.data() + static_cast<size_t>(j) * d + off;
                            for (int u = 0; u < dh; ++u) dkj[u] += dsj * qi[u];
                        }
                    }
                }
            }
        });

    // context = probs @ v, per head
    {
        auto& ov = out.data();
        const T* vd = v.data().data();
        for (int a = 0; a < heads; ++a) {
            const int off = a * dh;
            for (int i = 0; i < nq; ++i) {
                const T* pr = probs->data() + (static_cast<size_t>(a) * nq + i) * lk;
                T* oi = ov.data() + static_cast<size_t>(i) * d + off;
                for (int j = 0; j < lk; ++j) {
                    const T p = pr[j];
                    if (p == T(0)) continue;
                    const T* vj = vd + static_cast<size_t>(j) * d + off;
                    for (int u = 0; u < dh; ++u) oi[u] += p * vj[u];
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses and reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto xn = x.node();
    auto out = make_op<T>(
        {1}, {xn}, [xn](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            const T g = o.grad[0];
            for (auto& v : xn->grad) v += g;
        });
    T acc = 0;
    for (T v : x.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return affine(sum_all(x), T(1) / static_cast<T>(x.numel()), T(0));
}

// mean negative log-likelihood of target ids under row-wise softmax
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2 || logits.extent(0) != static_cast<int>(targets.size()))
        throw std::invalid_argument("cross_entropy_rows: logits " + shape_str(logits.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
    if (targets.empty()) throw std::invalid_argument("cross_entropy_rows: no targets");
    const int n = logits.extent(0), vsz = logits.extent(1);
    for (int t : targets)
        if (t < 0 || t >= vsz) throw std::out_of_range("cross_entropy_rows: target id " + std::to_string(t));
    auto ln = logits.node();
    auto out = make_op<T>(
        {1}, {ln}, [ln, targets, n, vsz](TensorNode<T>& o) {
            if (!wants_grad(*ln)) return;
            const T g = o.grad[0] / static_cast<T>(n);
            for (int r = 0; r < n; ++r) {
                const T* lr = ln->value->data() + static_cast<size_t>(r) * vsz;
                T mx = lr[0];
                for (int c = 1; c < vsz; ++c) mx = std::max(mx, lr[c]);
                T sum = 0;
                for (int c = 0; c < vsz; ++c) sum += std::exp(lr[c] - mx);
                const T inv = T(1) / sum;
                T* dr = ln->grad.data() + static_cast<size_t>(r) * vsz;
                for (int c = 0; c < vsz; ++c) {
                    T p = std::exp(lr[c] - mx) * inv;
                    if (c == targets[r]) p -= T(1);
                    dr[c] += g * p;
                }
            }
        });
    const auto& lv = logits.data();
    T total = 0;
    for (int r = 0; r < n; ++r) {
        const T* lr = lv.data() + static_cast<size_t>(r) * vsz;
        T mx = lr[0];
        for (int c = 1; c < vsz; ++c) mx = std::max(mx, lr[c]);
        T sum = 0;
        for (int c = 0; c < vsz; ++c) sum += std::exp(lr[c] - mx);
        total += std::log(sum) + mx - lr[targets[r]];
    }
    out.data()[0] = total / static_cast<T>(n);
    return out;
}

// mean squared error against a constant target
template <typename T>
Tensor<T> mse_const(const Tensor<T>& x, const std::vector<T>& target) {
    if (x.numel() != target.size())
        throw std::invalid_argument("mse_const: size mismatch " + std::to_string(x.numel()) + " vs " +
                                    std::to_string(target.size()));
    if (target.empty()) throw std::invalid_argument("mse_const: empty target");
    auto xn = x.node();
    const size_t n = target.size();
    auto out = make_op<T>(
        {1}, {xn}, [xn, target, n](TensorNode<T>& o) {
            if (!wants_grad(*xn)) return;
            const T g = o.grad[0] * T(2) / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i) xn->grad[i] += g * ((*xn->value)[i] - target[i]);
        });
    T acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const T dlt = x.data()[i] - target[i];
        acc += dlt * dlt;
    }
    out.data()[0] = acc / static_cast<T>(n);
    return out;
}

inline constexpr double kCosineEps = 1e-8;

// mean over rows of cosine similarity against constant rows; zero-norm rows
// fall back to similarity 0 through the epsilon guard
template <typename T>
Tensor<T> mean_cosine_rows(const Tensor<T>& a, const std::vector<T>& b) {
    if (a.shape().size() != 2 || a.numel() != b.size())
        throw std::invalid_argument("mean_cosine_rows: shape mismatch");
    const int n = a.extent(0), d = a.extent(1);
    auto an = a.node();
    auto out = make_op<T>(
        {1}, {an}, [an, b, n, d](TensorNode<T>& o) {
            if (!wants_grad(*an)) return;
            const T g = o.grad[0] / static_cast<T>(n);
            for (int r = 0; r < n; ++r) {
                const T* ar = an->value->data() + static_cast<size_t>(r) * d;
                const T* br = b.data() + static_cast<size_t>(r) * d;
                T dot = 0, na2 = 0, nb2 = 0;
                for (int j = 0; j < d; ++j) {
                    dot += ar[j] * br[j];
                    na2 += ar[j] * ar[j];
                    nb2 += br[j] * br[j];
                }
                const T na = std::sqrt(na2), nb = std::sqrt(nb2);
                const T den = std::max(na * nb, T(kCosineEps));
                const T c = dot / den;
                T* da = an->grad.data() + static_cast<size_t>(r) * d;
                const T inv_na2 = na2 > T(0) ? T(1) / na2 : T(0);
                for (int j = 0; j < d; ++j) da[j] += g * (br[j] / den - c * ar[j] * inv_na2);
            }
        });
    T acc = 0;
    for (int r = 0; r < n; ++r) {
        const T* ar = a.data().data() + static_cast<size_t>(r) * d;
        const T* br = b.data() + static_cast<size_t>(r) * d;
        T dot = 0, na2 = 0, nb2 = 0;
        for (int j = 0; j < d; ++j) {
            dot += ar[j] * br[j];
            na2 += ar[j] * ar[j];
            nb2 += br[j] * br[j];
        }
        acc += dot / std::max(std::sqrt(na2) * std::sqrt(nb2), T(kCosineEps));
    }
    out.data()[0] = acc / static_cast<T>(n);
    return out;
}

// ---------------------------------------------------------------------------
// attention with a declared query subset
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionWeights {
    Tensor<T> wq, wk, wv, wo;
    int heads = 1;
};

// Multi-head self-attention where queries are computed only for the declared
// positions; keys/values cover the whole input. Output rows correspond to
// query_positions in order and equal the same rows of full attention.
template <typename T>
Tensor<T> attention_query_subset(const Tensor<T>& x, const std::vector<int>& query_positions,
                                 const std::vector<char>& allowed_full, const AttentionWeights<T>& w) {
    const int L = x.extent(0);
    if (allowed_full.size() != static_cast<size_t>(L) * L)
        throw std::invalid_argument("attention_query_subset: mask must be LxL");
    for (int p : query_positions)
        if (p < 0 || p >= L) throw std::out_of_range("attention_query_subset: query position " + std::to_string(p));
    Tensor<T> k = matmul(x, w.wk);
    Tensor<T> v = matmul(x, w.wv);
    Tensor<T> qin = gather_rows(x, query_positions);
    Tensor<T> q = matmul(qin, w.wq);
    std::vector<char> rows(query_positions.size() * L);
    for (size_t i = 0; i < query_positions.size(); ++i)
        std::copy_n(allowed_full.data() + static_cast<size_t>(query_positions[i]) * L, L,
                    rows.data() + i * L);
    Tensor<T> ctx = multihead_attention(q, k, v, w.heads, rows);
    return matmul(ctx, w.wo);
}

}  // namespace xfusion
