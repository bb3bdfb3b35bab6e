#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nisqa/common.hpp"
#include "nisqa/tensor.hpp"

// Reverse-mode autodiff over small dense tensors. A forward pass builds a
// dynamic graph of shared_ptr nodes; backward() topologically sorts it and
// runs each node's pullback. Inner GEMMs (linear, matmul, conv2d) go through
// Eigen; independent nested-loop oracles live in the test suite.

namespace nisqa::ad {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated during backward
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> pullback;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.dims != value.dims) {
            grad = Tensor<T>(value.dims);
        }
    }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return leaf<T>(std::move(value), false);
}

namespace detail {

template <typename T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> pb) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool req = false;
    for (auto& p : parents) req = req || p->requires_grad;
    n->requires_grad = req;
    if (req) {
        n->parents = std::move(parents);
        n->pullback = std::move(pb);
    }
    return n;
}

template <typename T>
void accum(Var<T>& p, const Tensor<T>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    if (!a->value.same_shape(b->value)) throw InternalError("add: shape mismatch");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        detail::accum(n.parents[0], n.grad);
        detail::accum(n.parents[1], n.grad);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    if (!a->value.same_shape(b->value)) throw InternalError("sub: shape mismatch");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        detail::accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) n.parents[1]->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (!a->value.same_shape(b->value)) throw InternalError("mul: shape mismatch");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v *= c;
    return detail::make<T>(std::move(out), {a}, [c](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += c * n.grad[i];
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i)
            if (a->value[i] > T(0)) a->grad[i] += n.grad[i];
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {a}, [saved](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            T s = saved[i];
            a->grad[i] += n.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v = std::tanh(v);
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {a}, [saved](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            T t = saved[i];
            a->grad[i] += n.grad[i] * (T(1) - t * t);
        }
    });
}

// Inverted dropout; rng drives the mask so training runs stay seeded.
template <typename T>
Var<T> dropout(Var<T> a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    Tensor<T> mask(a->value.dims);
    T keep = T(1.0 / (1.0 - rate));
    for (auto& m : mask.data) m = rng.uniform() < rate ? T(0) : keep;
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return detail::make<T>(std::move(out), {a}, [mask](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Var<T> reshape(Var<T> a, std::vector<std::size_t> dims) {
    Tensor<T> out = a->value.reshaped(dims);
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

template <typename T>
Var<T> transpose2d(Var<T> a) {
    if (a->value.rank() != 2) throw InternalError("transpose2d: rank != 2");
    std::size_t r = a->value.dim(0), c = a->value.dim(1);
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a->value.at(i, j);
    return detail::make<T>(std::move(out), {a}, [r, c](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a->grad[i * c + j] += n.grad[j * r + i];
    });
}

// single row of a 2-D tensor as [1, d]
template <typename T>
Var<T> row(Var<T> a, std::size_t i) {
    std::size_t d = a->value.dim(1);
    Tensor<T> out({1, d});
    for (std::size_t j = 0; j < d; ++j) out[j] = a->value.at(i, j);
    return detail::make<T>(std::move(out), {a}, [i, d](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) a->grad[i * d + j] += n.grad[j];
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& rows) {
    if (rows.empty()) throw InternalError("concat_rows: empty");
    std::size_t d = rows[0]->value.dim(1);
    Tensor<T> out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = rows[i]->value[j];
    return detail::make<T>(std::move(out), rows, [d](Node<T>& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            auto& p = n.parents[i];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) p->grad[j] += n.grad[i * d + j];
        }
    });
}

// [N,a] ++ [N,b] -> [N,a+b]
template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
    std::size_t n0 = a->value.dim(0), da = a->value.dim(1), db = b->value.dim(1);
    if (b->value.dim(0) != n0) throw InternalError("concat_cols: row mismatch");
    Tensor<T> out({n0, da + db});
    for (std::size_t i = 0; i < n0; ++i) {
        for (std::size_t j = 0; j < da; ++j) out.at(i, j) = a->value.at(i, j);
        for (std::size_t j = 0; j < db; ++j) out.at(i, da + j) = b->value.at(i, j);
    }
    return detail::make<T>(std::move(out), {a, b}, [n0, da, db](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        for (std::size_t i = 0; i < n0; ++i) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t j = 0; j < da; ++j) a->grad[i * da + j] += n.grad[i * (da + db) + j];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t j = 0; j < db; ++j) b->grad[i * db + j] += n.grad[i * (da + db) + da + j];
            }
        }
    });
}

// columns [lo, hi) of a 2-D tensor
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t lo, std::size_t hi) {
    std::size_t n0 = a->value.dim(0), d = a->value.dim(1), w = hi - lo;
    Tensor<T> out({n0, w});
    for (std::size_t i = 0; i < n0; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a->value.at(i, lo + j);
    return detail::make<T>(std::move(out), {a}, [n0, d, lo, w](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < n0; ++i)
            for (std::size_t j = 0; j < w; ++j) a->grad[i * d + lo + j] += n.grad[i * w + j];
    });
}

// ---------------------------------------------------------------------------
// dense linear algebra

// y[N,Dout] = x[N,Din] * W[Dout,Din]^T + b[Dout]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    if (x->value.rank() != 2 || w->value.rank() != 2) throw InternalError("linear: rank");
    std::size_t n0 = x->value.dim(0), din = x->value.dim(1);
    std::size_t dout = w->value.dim(0);
    if (w->value.dim(1) != din) throw InternalError("linear: dim mismatch");
    if (b->value.numel() != dout) throw InternalError("linear: bias mismatch");
    Tensor<T> out({n0, dout});
    {
        CMatMap<T> X(x->value.data.data(), n0, din);
        CMatMap<T> W(w->value.data.data(), dout, din);
        MatMap<T> Y(out.data.data(), n0, dout);
        Y.noalias() = X * W.transpose();
        for (std::size_t i = 0; i < n0; ++i)
            for (std::size_t j = 0; j < dout; ++j) out.at(i, j) += b->value[j];
    }
    return detail::make<T>(std::move(out), {x, w, b}, [n0, din, dout](Node<T>& n) {
        auto& x = n.parents[0];
        auto& w = n.parents[1];
        auto& b = n.parents[2];
        CMatMap<T> dY(n.grad.data.data(), n0, dout);
        if (x->requires_grad) {
            x->ensure_grad();
            MatMap<T> dX(x->grad.data.data(), n0, din);
            CMatMap<T> W(w->value.data.data(), dout, din);
            dX.noalias() += dY * W;
        }
        if (w->requires_grad) {
            w->ensure_grad();
            MatMap<T> dW(w->grad.data.data(), dout, din);
            CMatMap<T> X(x->value.data.data(), n0, din);
            dW.noalias() += dY.transpose() * X;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < n0; ++i)
                for (std::size_t j = 0; j < dout; ++j) b->grad[j] += n.grad[i * dout + j];
        }
    });
}

// C[M,N] = A[M,K] * B[K,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    std::size_t m = a->value.dim(0), k = a->value.dim(1), n2 = b->value.dim(1);
    if (b->value.dim(0) != k) throw InternalError("matmul: inner dim mismatch");
    Tensor<T> out({m, n2});
    {
        CMatMap<T> A(a->value.data.data(), m, k);
        CMatMap<T> B(b->value.data.data(), k, n2);
        MatMap<T> C(out.data.data(), m, n2);
        C.noalias() = A * B;
    }
    return detail::make<T>(std::move(out), {a, b}, [m, k, n2](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        CMatMap<T> dC(n.grad.data.data(), m, n2);
        if (a->requires_grad) {
            a->ensure_grad();
            MatMap<T> dA(a->grad.data.data(), m, k);
            CMatMap<T> B(b->value.data.data(), k, n2);
            dA.noalias() += dC * B.transpose();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            MatMap<T> dB(b->grad.data.data(), k, n2);
            CMatMap<T> A(a->value.data.data(), m, k);
            dB.noalias() += A.transpose() * dC;
        }
    });
}

// ---------------------------------------------------------------------------
// conv / pool

namespace detail {

// col[Cin*kh*kw, Ho*Wo] for one sample
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t ph, std::size_t pw, std::size_t ho, std::size_t wo, T* col) {
    std::size_t idx = 0;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t di = 0; di < kh; ++di)
            for (std::size_t dj = 0; dj < kw; ++dj)
                for (std::size_t oi = 0; oi < ho; ++oi)
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        std::ptrdiff_t ii = std::ptrdiff_t(oi + di) - std::ptrdiff_t(ph);
                        std::ptrdiff_t jj = std::ptrdiff_t(oj + dj) - std::ptrdiff_t(pw);
                        col[idx++] = (ii >= 0 && ii < std::ptrdiff_t(h) && jj >= 0 && jj < std::ptrdiff_t(w))
                                         ? x[(c * h + std::size_t(ii)) * w + std::size_t(jj)]
                                         : T(0);
                    }
}

template <typename T>
void col2im_add(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t ph, std::size_t pw, std::size_t ho, std::size_t wo, T* dx) {
    std::size_t idx = 0;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t di = 0; di < kh; ++di)
            for (std::size_t dj = 0; dj < kw; ++dj)
                for (std::size_t oi = 0; oi < ho; ++oi)
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        std::ptrdiff_t ii = std::ptrdiff_t(oi + di) - std::ptrdiff_t(ph);
                        std::ptrdiff_t jj = std::ptrdiff_t(oj + dj) - std::ptrdiff_t(pw);
                        T v = col[idx++];
                        if (ii >= 0 && ii < std::ptrdiff_t(h) && jj >= 0 && jj < std::ptrdiff_t(w))
                            dx[(c * h + std::size_t(ii)) * w + std::size_t(jj)] += v;
                    }
}

}  // namespace detail

// x[N,Cin,H,W], w[Cout,Cin,kH,kW], b[Cout] -> y[N,Cout,H',W']
// Cross-correlation; H' = H + 2*pad_h - kH + 1. The im2col buffer is
// recomputed in the pullback instead of captured, to bound graph memory.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t pad_h, std::size_t pad_w) {
    if (x->value.rank() != 4 || w->value.rank() != 4) throw InternalError("conv2d: rank");
    std::size_t n0 = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), wdt = x->value.dim(3);
    std::size_t cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != cin) throw InternalError("conv2d: channel mismatch");
    if (b->value.numel() != cout) throw InternalError("conv2d: bias mismatch");
    if (h + 2 * pad_h < kh || wdt + 2 * pad_w < kw) throw InternalError("conv2d: kernel larger than padded input");
    std::size_t ho = h + 2 * pad_h - kh + 1, wo = wdt + 2 * pad_w - kw + 1;
    std::size_t kdim = cin * kh * kw, area = ho * wo;

    Tensor<T> out({n0, cout, ho, wo});
    std::vector<T> col(kdim * area);
    CMatMap<T> W(w->value.data.data(), cout, kdim);
    for (std::size_t s = 0; s < n0; ++s) {
        detail::im2col(x->value.data.data() + s * cin * h * wdt, cin, h, wdt, kh, kw, pad_h, pad_w, ho, wo,
                       col.data());
        CMatMap<T> C(col.data(), kdim, area);
        MatMap<T> Y(out.data.data() + s * cout * area, cout, area);
        Y.noalias() = W * C;
        for (std::size_t c = 0; c < cout; ++c)
            Y.row(Eigen::Index(c)).array() += b->value[c];
    }

    auto dims = std::array<std::size_t, 10>{n0, cin, h, wdt, cout, kh, kw, pad_h, pad_w, area};
    return detail::make<T>(std::move(out), {x, w, b}, [dims, ho, wo, kdim](Node<T>& n) {
        auto [n0, cin, h, wdt, cout, kh, kw, ph, pw, area] = dims;
        auto& x = n.parents[0];
        auto& w = n.parents[1];
        auto& b = n.parents[2];
        std::vector<T> col(kdim * area);
        std::vector<T> dcol(kdim * area);
        CMatMap<T> W(w->value.data.data(), cout, kdim);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        for (std::size_t s = 0; s < n0; ++s) {
            CMatMap<T> dY(n.grad.data.data() + s * cout * area, cout, area);
            if (w->requires_grad || x->requires_grad)
                detail::im2col(x->value.data.data() + s * cin * h * wdt, cin, h, wdt, kh, kw, ph, pw, ho, wo,
                               col.data());
            if (w->requires_grad) {
                MatMap<T> dW(w->grad.data.data(), cout, kdim);
                CMatMap<T> C(col.data(), kdim, area);
                dW.noalias() += dY * C.transpose();
            }
            if (b->requires_grad) {
                // plain sequential accumulation: Eigen's vectorized .sum() order
                // depends on the map's heap alignment, breaking bit determinism
                const T* dy = n.grad.data.data() + s * cout * area;
                for (std::size_t c = 0; c < cout; ++c) {
                    T acc = T(0);
                    for (std::size_t k = 0; k < area; ++k) acc += dy[c * area + k];
                    b->grad[c] += acc;
                }
            }
            if (x->requires_grad) {
                MatMap<T> dC(dcol.data(), kdim, area);
                dC.noalias() = W.transpose() * dY;
                detail::col2im_add(dcol.data(), cin, h, wdt, kh, kw, ph, pw, ho, wo,
                                   x->grad.data.data() + s * cin * h * wdt);
            }
        }
    });
}

// x[N,C,H,W] -> y[N,C,H',W']; gradient routes to the first (row-major) argmax.
template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw) {
    std::size_t n0 = x->value.dim(0), c0 = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    if (kh > h || kw > w) throw InternalError("maxpool2d: kernel larger than input");
    std::size_t ho = (h - kh) / sh + 1, wo = (w - kw) / sw + 1;
    Tensor<T> out({n0, c0, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    std::size_t oi_flat = 0;
    for (std::size_t s = 0; s < n0; ++s)
        for (std::size_t c = 0; c < c0; ++c) {
            const T* plane = x->value.data.data() + (s * c0 + c) * h * w;
            for (std::size_t oi = 0; oi < ho; ++oi)
                for (std::size_t oj = 0; oj < wo; ++oj) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t bidx = 0;
                    for (std::size_t di = 0; di < kh; ++di)
                        for (std::size_t dj = 0; dj < kw; ++dj) {
                            std::size_t idx = (oi * sh + di) * w + (oj * sw + dj);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                bidx = (s * c0 + c) * h * w + idx;
                            }
                        }
                    out[oi_flat] = best;
                    (*argmax)[oi_flat] = bidx;
                    ++oi_flat;
                }
        }
    return detail::make<T>(std::move(out), {x}, [argmax](Node<T>& n) {
        auto& x = n.parents[0];
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) x->grad[(*argmax)[i]] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// softmax / normalization / pooling over masked rows

namespace detail {

// softmax over `len` entries with boolean mask; masked outputs are exactly 0.
template <typename T>
void masked_softmax_1d(const T* s, const unsigned char* mask, std::size_t len, T* out) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i)
        if (mask[i] && s[i] > mx) mx = s[i];
    T sum = 0;
    for (std::size_t i = 0; i < len; ++i) {
        out[i] = mask[i] ? std::exp(s[i] - mx) : T(0);
        sum += out[i];
    }
    for (std::size_t i = 0; i < len; ++i) out[i] /= sum;
}

template <typename T>
void masked_softmax_grad_1d(const T* y, const T* dy, const unsigned char* mask, std::size_t len, T* ds) {
    T dot = 0;
    for (std::size_t i = 0; i < len; ++i)
        if (mask[i]) dot += dy[i] * y[i];
    for (std::size_t i = 0; i < len; ++i) ds[i] += mask[i] ? y[i] * (dy[i] - dot) : T(0);
}

inline std::shared_ptr<std::vector<unsigned char>> pack_mask(const std::vector<bool>& mask) {
    auto m = std::make_shared<std::vector<unsigned char>>(mask.size());
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        (*m)[i] = mask[i] ? 1 : 0;
        any = any || mask[i];
    }
    if (!any) throw DataError("masked softmax: all entries masked");
    return m;
}

}  // namespace detail

// scores[L] with mask[L]; at least one entry must be unmasked.
template <typename T>
Var<T> masked_softmax(Var<T> scores, const std::vector<bool>& mask) {
    std::size_t len = scores->value.numel();
    if (mask.size() != len) throw InternalError("masked_softmax: mask length mismatch");
    auto m = detail::pack_mask(mask);
    Tensor<T> out(scores->value.dims);
    detail::masked_softmax_1d(scores->value.data.data(), m->data(), len, out.data.data());
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {scores}, [m, saved, len](Node<T>& n) {
        auto& s = n.parents[0];
        if (!s->requires_grad) return;
        s->ensure_grad();
        detail::masked_softmax_grad_1d(saved.data.data(), n.grad.data.data(), m->data(), len,
                                       s->grad.data.data());
    });
}

// row-wise softmax of S[L,L] masking key columns
template <typename T>
Var<T> softmax_rows_masked(Var<T> s, const std::vector<bool>& key_mask) {
    std::size_t r = s->value.dim(0), c = s->value.dim(1);
    if (key_mask.size() != c) throw InternalError("softmax_rows_masked: mask length mismatch");
    auto m = detail::pack_mask(key_mask);
    Tensor<T> out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        detail::masked_softmax_1d(s->value.data.data() + i * c, m->data(), c, out.data.data() + i * c);
    Tensor<T> saved = out;
    return detail::make<T>(std::move(out), {s}, [m, saved, r, c](Node<T>& n) {
        auto& s = n.parents[0];
        if (!s->requires_grad) return;
        s->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            detail::masked_softmax_grad_1d(saved.data.data() + i * c, n.grad.data.data() + i * c, m->data(), c,
                                           s->grad.data.data() + i * c);
    });
}

// softmax(Q K^T / sqrt(d)) V with key masking
template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v, const std::vector<bool>& key_mask) {
    std::size_t d = q->value.dim(1);
    auto scores = scale(matmul(q, transpose2d(k)), T(1.0 / std::sqrt(double(d))));
    auto weights = softmax_rows_masked(scores, key_mask);
    return matmul(weights, v);
}

// per-row layer norm of x[N,d]; gain[d], shift[d]; eps 1e-5
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift) {
    const T eps = T(1e-5);
    std::size_t n0 = x->value.dim(0), d = x->value.dim(1);
    Tensor<T> out({n0, d});
    Tensor<T> xhat({n0, d});
    std::vector<T> inv_std(n0);
    for (std::size_t i = 0; i < n0; ++i) {
        const T* xr = x->value.data.data() + i * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= T(d);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat.at(i, j) = (xr[j] - mean) * is;
            out.at(i, j) = xhat.at(i, j) * gain->value[j] + shift->value[j];
        }
    }
    auto saved_xhat = std::make_shared<Tensor<T>>(std::move(xhat));
    auto saved_is = std::make_shared<std::vector<T>>(std::move(inv_std));
    return detail::make<T>(std::move(out), {x, gain, shift}, [saved_xhat, saved_is, n0, d](Node<T>& n) {
        auto& x = n.parents[0];
        auto& gain = n.parents[1];
        auto& shift = n.parents[2];
        for (std::size_t i = 0; i < n0; ++i) {
            const T* dy = n.grad.data.data() + i * d;
            const T* xh = saved_xhat->data.data() + i * d;
            if (gain->requires_grad) {
                gain->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) gain->grad[j] += dy[j] * xh[j];
            }
            if (shift->requires_grad) {
                shift->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) shift->grad[j] += dy[j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    T dxh = dy[j] * gain->value[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[j];
                }
                T is = (*saved_is)[i];
                for (std::size_t j = 0; j < d; ++j) {
                    T dxh = dy[j] * gain->value[j];
                    x->grad[i * d + j] +=
                        is * (dxh - sum_dxhat / T(d) - xh[j] * sum_dxhat_xhat / T(d));
                }
            }
        }
    });
}

// mean over valid rows of y[L,d] -> [1,d]
template <typename T>
Var<T> mean_rows_masked(Var<T> y, const std::vector<bool>& mask) {
    std::size_t l = y->value.dim(0), d = y->value.dim(1);
    if (mask.size() != l) throw InternalError("mean_rows_masked: mask length mismatch");
    std::size_t nvalid = 0;
    for (bool b : mask) nvalid += b ? 1 : 0;
    if (nvalid == 0) throw DataError("mean_rows_masked: all rows masked");
    Tensor<T> out({1, d});
    for (std::size_t i = 0; i < l; ++i)
        if (mask[i])
            for (std::size_t j = 0; j < d; ++j) out[j] += y->value.at(i, j);
    for (std::size_t j = 0; j < d; ++j) out[j] /= T(nvalid);
    auto m = detail::pack_mask(mask);
    return detail::make<T>(std::move(out), {y}, [m, l, d, nvalid](Node<T>& n) {
        auto& y = n.parents[0];
        if (!y->requires_grad) return;
        y->ensure_grad();
        for (std::size_t i = 0; i < l; ++i)
            if ((*m)[i])
                for (std::size_t j = 0; j < d; ++j) y->grad[i * d + j] += n.grad[j] / T(nvalid);
    });
}

// elementwise max over valid rows of y[L,d] -> [1,d]; first argmax on ties
template <typename T>
Var<T> max_rows_masked(Var<T> y, const std::vector<bool>& mask) {
    std::size_t l = y->value.dim(0), d = y->value.dim(1);
    if (mask.size() != l) throw InternalError("max_rows_masked: mask length mismatch");
    Tensor<T> out({1, d});
    auto argmax = std::make_shared<std::vector<std::size_t>>(d);
    bool any = false;
    out.fill(-std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < l; ++i) {
        if (!mask[i]) continue;
        any = true;
        for (std::size_t j = 0; j < d; ++j)
            if (y->value.at(i, j) > out[j]) {
                out[j] = y->value.at(i, j);
                (*argmax)[j] = i;
            }
    }
    if (!any) throw DataError("max_rows_masked: all rows masked");
    return detail::make<T>(std::move(out), {y}, [argmax, d](Node<T>& n) {
        auto& y = n.parents[0];
        if (!y->requires_grad) return;
        y->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) y->grad[(*argmax)[j] * y->value.dim(1) + j] += n.grad[j];
    });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Var<T> sum(Var<T> a) {
    T s = 0;
    for (T v : a->value.data) s += v;
    Tensor<T> out({1});
    out[0] = s;
    return detail::make<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n.grad[0];
    });
}

// mean((a-b)^2) as a graph op; used for micro-model gradient checks
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    auto d = sub(a, b);
    return scale(sum(mul(d, d)), T(1.0 / double(a->value.numel())));
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const Var<T>& loss) {
    if (loss->value.numel() != 1) throw InternalError("backward: loss must be scalar");
    if (!loss->requires_grad && loss->parents.empty())
        throw InternalError("backward: no recorded graph reaches this node");
    // iterative DFS topological order
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* n : order) {
        n->ensure_grad();
        n->grad.fill(T(0));
    }
    loss->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->pullback) (*it)->pullback(**it);
    }
}

// ---------------------------------------------------------------------------
// parameters + Adam

template <typename T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    std::size_t size() const { return names.size(); }

    std::ptrdiff_t find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return std::ptrdiff_t(i);
        return -1;
    }

    Tensor<T>& at(const std::string& name) {
        auto i = find(name);
        if (i < 0) throw InternalError("parameter not found: " + name);
        return tensors[std::size_t(i)];
    }
    const Tensor<T>& at(const std::string& name) const {
        auto i = find(name);
        if (i < 0) throw InternalError("parameter not found: " + name);
        return tensors[std::size_t(i)];
    }
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    long step = 0;
};

// Standard Adam with bias correction. Defaults: lr 1e-3, beta1 0.9,
// beta2 0.999, eps 1e-8.
template <typename T>
void adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (grads.size() != params.size()) throw InternalError("adam_step: grad count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i] = Tensor<T>(params.tensors[i].dims);
            state.v[i] = Tensor<T>(params.tensors[i].dims);
        }
    }
    state.step += 1;
    double bc1 = 1.0 - std::pow(beta1, double(state.step));
    double bc2 = 1.0 - std::pow(beta2, double(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.tensors[i];
        auto& g = grads[i];
        if (!p.same_shape(g)) throw InternalError("adam_step: shape mismatch on " + params.names[i]);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            m[j] = T(beta1) * m[j] + T(1.0 - beta1) * g[j];
            v[j] = T(beta2) * v[j] + T(1.0 - beta2) * g[j] * g[j];
            double mhat = double(m[j]) / bc1;
            double vhat = double(v[j]) / bc2;
            p[j] -= T(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

}  // namespace nisqa::ad
