#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "hgm/ndarray.hpp"

namespace hgm {

/// Handle to a node on a Tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Append-only record of a differentiable computation. Nodes are pushed in
/// execution order, so every node's inputs precede it and the backward pass
/// is a single reverse sweep that visits each node exactly once.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::int32_t)>;

    Var leaf(NdArray<T> value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, nullptr);
    }

    Var constant(NdArray<T> value) { return leaf(std::move(value), false); }

    Var push(NdArray<T> value, bool requires_grad, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn)});
        grads_.emplace_back();
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const NdArray<T>& val(Var v) const { return nodes_[check(v)].value; }

    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. May be called once per tape.
    void backward(Var loss) {
        std::size_t li = check(loss);
        if (nodes_[li].value.numel() != 1)
            throw ValueError("backward: loss must be scalar, got shape " +
                             shape_str(nodes_[li].value.shape()));
        if (ran_backward_) throw ValueError("backward: already ran on this tape");
        ran_backward_ = true;
        grads_[li] = NdArray<T>::ones(nodes_[li].value.shape());
        for (std::int32_t i = static_cast<std::int32_t>(li); i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward || grads_[static_cast<std::size_t>(i)].empty()) continue;
            n.backward(*this, i);
        }
    }

    /// Gradient of the loss w.r.t. node v; zeros if the loss does not depend on it.
    const NdArray<T>& grad(Var v) {
        std::size_t i = check(v);
        if (grads_[i].empty()) grads_[i] = NdArray<T>::zeros(nodes_[i].value.shape());
        return grads_[i];
    }

    /// Gradient accumulation buffer for node id, zero-initialized on first use.
    /// Returns nullptr when the node does not require gradients.
    NdArray<T>* accum_buffer(std::int32_t id) {
        std::size_t i = static_cast<std::size_t>(id);
        if (!nodes_[i].requires_grad) return nullptr;
        if (grads_[i].empty()) grads_[i] = NdArray<T>::zeros(nodes_[i].value.shape());
        return &grads_[i];
    }

    void accum(std::int32_t id, const NdArray<T>& g) {
        NdArray<T>* buf = accum_buffer(id);
        if (!buf) return;
        require_same_shape(*buf, g, "grad accum");
        T* pd = buf->data();
        const T* ps = g.data();
        for (Index i = 0; i < g.numel(); ++i) pd[i] += ps[i];
    }

private:
    struct Node {
        NdArray<T> value;
        bool requires_grad;
        BackwardFn backward;
    };

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ValueError("invalid tape variable");
        return static_cast<std::size_t>(v.id);
    }

    std::vector<Node> nodes_;
    std::vector<NdArray<T>> grads_;
    bool ran_backward_ = false;
};

namespace detail {
template <typename T>
bool any_requires(const Tape<T>& t, std::initializer_list<Var> vs) {
    for (Var v : vs)
        if (t.requires_grad(v)) return true;
    return false;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    NdArray<T> y = add(t.val(a), t.val(b));
    bool rg = detail::any_requires(t, {a, b});
    auto ia = a.id, ib = b.id;
    return t.push(std::move(y), rg, [ia, ib](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        tp.accum(ia, g);
        tp.accum(ib, g);
    });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
    NdArray<T> y = sub(t.val(a), t.val(b));
    bool rg = detail::any_requires(t, {a, b});
    auto ia = a.id, ib = b.id;
    return t.push(std::move(y), rg, [ia, ib](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        tp.accum(ia, g);
        tp.accum(ib, scale(g, T(-1)));
    });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
    NdArray<T> y = hadamard(t.val(a), t.val(b));
    bool rg = detail::any_requires(t, {a, b});
    auto ia = a.id, ib = b.id;
    return t.push(std::move(y), rg, [ia, ib](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        tp.accum(ia, hadamard(g, tp.val(Var{ib})));
        tp.accum(ib, hadamard(g, tp.val(Var{ia})));
    });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T c) {
    NdArray<T> y = scale(t.val(a), c);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, c](Tape<T>& tp, std::int32_t self) {
        tp.accum(ia, scale(tp.grad(Var{self}), c));
    });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
    NdArray<T> y = relu(t.val(a));
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& x = tp.val(Var{ia});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        for (Index i = 0; i < g.numel(); ++i)
            if (x[i] > T(0)) (*buf)[i] += g[i];
    });
}

template <typename T>
Var gelu(Tape<T>& t, Var a) {
    NdArray<T> y = gelu(t.val(a));
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& x = tp.val(Var{ia});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        for (Index i = 0; i < g.numel(); ++i) (*buf)[i] += g[i] * gelu_grad_scalar(x[i]);
    });
}

template <typename T>
Var softplus(Tape<T>& t, Var a) {
    NdArray<T> y = softplus(t.val(a));
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& x = tp.val(Var{ia});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        for (Index i = 0; i < g.numel(); ++i) (*buf)[i] += g[i] * sigmoid_scalar(x[i]);
    });
}

template <typename T>
Var exp(Tape<T>& t, Var a) {
    NdArray<T> y = map(t.val(a), [](T x) { return exp_scalar(x); });
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& y = tp.val(Var{self});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        for (Index i = 0; i < g.numel(); ++i) (*buf)[i] += g[i] * y[i];
    });
}

// ---------------------------------------------------------------------------
// matmul; gradients flow to both operands, with a batch reduction when one
// side was broadcast.
// ---------------------------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
    NdArray<T> y = matmul(t.val(a), t.val(b));
    bool rg = detail::any_requires(t, {a, b});
    auto ia = a.id, ib = b.id;
    return t.push(std::move(y), rg, [ia, ib](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& av = tp.val(Var{ia});
        const NdArray<T>& bv = tp.val(Var{ib});
        Shape os;
        Index batch, m, k, n;
        bool bc_a, bc_b;
        detail::matmul_shapes(av.shape(), bv.shape(), os, batch, m, k, n, bc_a, bc_b);
        const T* pg = g.data();
        const T* pa = av.data();
        const T* pb = bv.data();
        if (NdArray<T>* ga = tp.accum_buffer(ia)) {
            T* pga = ga->data();
            for (Index bi = 0; bi < batch; ++bi) {
                // dA = dY * B^T
                detail::gemm_acc(pg + bi * m * n, bc_b ? pb : pb + bi * k * n,
                                 bc_a ? pga : pga + bi * m * k, m, n, k, false, true, true);
            }
        }
        if (NdArray<T>* gb = tp.accum_buffer(ib)) {
            T* pgb = gb->data();
            for (Index bi = 0; bi < batch; ++bi) {
                // dB = A^T * dY
                detail::gemm_acc(bc_a ? pa : pa + bi * m * k, pg + bi * m * n,
                                 bc_b ? pgb : pgb + bi * k * n, k, m, n, true, false, true);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax / layernorm / batchnorm
// ---------------------------------------------------------------------------

template <typename T>
Var softmax(Tape<T>& t, Var a, Index axis) {
    NdArray<T> y = softmax(t.val(a), axis);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, axis](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& y = tp.val(Var{self});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        auto sp = detail::axis_split(y.shape(), axis);
        T* pd = buf->data();
        const T* pg = g.data();
        const T* py = y.data();
        for (Index o = 0; o < sp.outer; ++o)
            for (Index in = 0; in < sp.inner; ++in) {
                const Index base = o * sp.size * sp.inner + in;
                T dot = T(0);
                for (Index s = 0; s < sp.size; ++s) {
                    Index ix = base + s * sp.inner;
                    dot += pg[ix] * py[ix];
                }
                for (Index s = 0; s < sp.size; ++s) {
                    Index ix = base + s * sp.inner;
                    pd[ix] += py[ix] * (pg[ix] - dot);
                }
            }
    });
}

template <typename T>
Var layernorm(Tape<T>& t, Var x, Var gain, Var bias) {
    NdArray<T> mean, rstd;
    NdArray<T> y = layernorm_stats(t.val(x), t.val(gain), t.val(bias), &mean, &rstd);
    bool rg = detail::any_requires(t, {x, gain, bias});
    auto ix = x.id, ig = gain.id, ib = bias.id;
    return t.push(std::move(y), rg,
                  [ix, ig, ib, mean = std::move(mean), rstd = std::move(rstd)](
                      Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& xv = tp.val(Var{ix});
        const NdArray<T>& gv = tp.val(Var{ig});
        const Index d = xv.dim(xv.ndim() - 1);
        const Index outer = xv.numel() / d;
        NdArray<T>* bx = tp.accum_buffer(ix);
        NdArray<T>* bg = tp.accum_buffer(ig);
        NdArray<T>* bb = tp.accum_buffer(ib);
        const T* px = xv.data();
        const T* pg = g.data();
        for (Index o = 0; o < outer; ++o) {
            const T mu = mean[o], rs = rstd[o];
            const T* xr = px + o * d;
            const T* gr = pg + o * d;
            if (bg || bb) {
                for (Index j = 0; j < d; ++j) {
                    T xh = (xr[j] - mu) * rs;
                    if (bg) (*bg)[j] += gr[j] * xh;
                    if (bb) (*bb)[j] += gr[j];
                }
            }
            if (bx) {
                T mean_dxh = T(0), mean_dxh_xh = T(0);
                for (Index j = 0; j < d; ++j) {
                    T xh = (xr[j] - mu) * rs;
                    T dxh = gr[j] * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                mean_dxh /= T(d);
                mean_dxh_xh /= T(d);
                T* br = bx->data() + o * d;
                for (Index j = 0; j < d; ++j) {
                    T xh = (xr[j] - mu) * rs;
                    T dxh = gr[j] * gv[j];
                    br[j] += rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                }
            }
        }
    });
}

/// Batch normalization over the feature (last) axis. Running stats are plain
/// arrays owned by the caller, not tape variables; in train mode the computed
/// batch statistics are exposed through `stats_out` (mean then unbiased var)
/// so the caller can fold them into its running estimates.
template <typename T>
Var batchnorm(Tape<T>& t, Var x, Var gain, Var bias, const NdArray<T>& running_mean,
              const NdArray<T>& running_var, bool train,
              std::pair<NdArray<T>, NdArray<T>>* stats_out = nullptr) {
    BatchNormResult<T> r =
        batchnorm_features(t.val(x), running_mean, running_var, t.val(gain), t.val(bias), train);
    if (train && stats_out) *stats_out = {r.batch_mean, r.batch_var_unb};
    bool rg = detail::any_requires(t, {x, gain, bias});
    auto ix = x.id, ig = gain.id, ib = bias.id;
    if (train) {
        return t.push(std::move(r.y), rg,
                      [ix, ig, ib, mean = std::move(r.batch_mean), var = std::move(r.batch_var)](
                          Tape<T>& tp, std::int32_t self) {
            const T eps = T(1e-5);
            const NdArray<T>& g = tp.grad(Var{self});
            const NdArray<T>& xv = tp.val(Var{ix});
            const NdArray<T>& gv = tp.val(Var{ig});
            const Index d = xv.dim(xv.ndim() - 1);
            const Index m = xv.numel() / d;
            NdArray<T>* bx = tp.accum_buffer(ix);
            NdArray<T>* bg = tp.accum_buffer(ig);
            NdArray<T>* bb = tp.accum_buffer(ib);
            const T* px = xv.data();
            const T* pg = g.data();
            for (Index j = 0; j < d; ++j) {
                const T mu = mean[j];
                const T rs = T(1) / std::sqrt(var[j] + eps);
                T sum_g = T(0), sum_gx = T(0);
                for (Index i = 0; i < m; ++i) {
                    T xh = (px[i * d + j] - mu) * rs;
                    sum_g += pg[i * d + j];
                    sum_gx += pg[i * d + j] * xh;
                }
                if (bg) (*bg)[j] += sum_gx;
                if (bb) (*bb)[j] += sum_g;
                if (bx) {
                    const T gj = gv[j];
                    const T mean_dxh = gj * sum_g / T(m);
                    const T mean_dxh_xh = gj * sum_gx / T(m);
                    for (Index i = 0; i < m; ++i) {
                        T xh = (px[i * d + j] - mu) * rs;
                        T dxh = pg[i * d + j] * gj;
                        (*bx)[i * d + j] += rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        });
    }
    return t.push(std::move(r.y), rg,
                  [ix, ig, ib, rm = running_mean, rv = running_var](Tape<T>& tp,
                                                                    std::int32_t self) {
        const T eps = T(1e-5);
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& xv = tp.val(Var{ix});
        const NdArray<T>& gv = tp.val(Var{ig});
        const Index d = xv.dim(xv.ndim() - 1);
        const Index m = xv.numel() / d;
        NdArray<T>* bx = tp.accum_buffer(ix);
        NdArray<T>* bg = tp.accum_buffer(ig);
        NdArray<T>* bb = tp.accum_buffer(ib);
        const T* px = xv.data();
        const T* pg = g.data();
        for (Index j = 0; j < d; ++j) {
            const T rs = T(1) / std::sqrt(rv[j] + eps);
            for (Index i = 0; i < m; ++i) {
                T gij = pg[i * d + j];
                if (bx) (*bx)[i * d + j] += gij * gv[j] * rs;
                if (bg) (*bg)[j] += gij * (px[i * d + j] - rm[j]) * rs;
                if (bb) (*bb)[j] += gij;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename T>
Var flip(Tape<T>& t, Var a, Index axis) {
    NdArray<T> y = flip(t.val(a), axis);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, axis](Tape<T>& tp, std::int32_t self) {
        tp.accum(ia, flip(tp.grad(Var{self}), axis));
    });
}

template <typename T>
Var gather(Tape<T>& t, Var a, Index axis, std::vector<Index> idx) {
    NdArray<T> y = gather(t.val(a), axis, idx);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a),
                  [ia, axis, idx = std::move(idx)](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        auto sp = detail::axis_split(buf->shape(), axis);
        const Index k = static_cast<Index>(idx.size());
        const T* pg = g.data();
        T* pd = buf->data();
        for (Index o = 0; o < sp.outer; ++o)
            for (Index s = 0; s < k; ++s) {
                const T* src = pg + (o * k + s) * sp.inner;
                T* dst = pd + (o * sp.size + idx[static_cast<std::size_t>(s)]) * sp.inner;
                for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
    });
}

/// Per-batch-element index gather along `axis` (axis > 0; axis 0 is the batch).
/// idx has one index list per batch element.
template <typename T>
Var gather_batched(Tape<T>& t, Var a, Index axis, std::vector<std::vector<Index>> idx) {
    const NdArray<T>& x = t.val(a);
    if (axis <= 0 || axis >= x.ndim()) throw ShapeError("gather_batched: axis must be in [1, rank)");
    const Index bdim = x.dim(0);
    if (static_cast<Index>(idx.size()) != bdim)
        throw ShapeError("gather_batched: need one index list per batch element");
    auto sp = detail::axis_split(x.shape(), axis);
    const Index per_b = x.numel() / bdim;
    const Index outer_b = sp.outer / bdim;  // outer dims between batch and axis
    const Index k = static_cast<Index>(idx[0].size());
    for (const auto& v : idx) {
        if (static_cast<Index>(v.size()) != k)
            throw ShapeError("gather_batched: ragged index lists");
        for (Index i : v)
            if (i < 0 || i >= sp.size)
                throw ShapeError("gather_batched: index " + std::to_string(i) + " out of range");
    }
    Shape os = x.shape();
    os[static_cast<std::size_t>(axis)] = k;
    NdArray<T> y(os);
    const T* px = x.data();
    T* py = y.data();
    const Index per_b_out = outer_b * k * sp.inner;
    for (Index b = 0; b < bdim; ++b)
        for (Index o = 0; o < outer_b; ++o)
            for (Index s = 0; s < k; ++s) {
                const T* src = px + b * per_b + (o * sp.size + idx[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)]) * sp.inner;
                T* dst = py + b * per_b_out + (o * k + s) * sp.inner;
                std::copy(src, src + sp.inner, dst);
            }
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a),
                  [ia, axis, idx = std::move(idx)](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        auto sp = detail::axis_split(buf->shape(), axis);
        const Index bdim = buf->dim(0);
        const Index per_b = buf->numel() / bdim;
        const Index outer_b = sp.outer / bdim;
        const Index k = static_cast<Index>(idx[0].size());
        const Index per_b_out = outer_b * k * sp.inner;
        const T* pg = g.data();
        T* pd = buf->data();
        for (Index b = 0; b < bdim; ++b)
            for (Index o = 0; o < outer_b; ++o)
                for (Index s = 0; s < k; ++s) {
                    const T* src = pg + b * per_b_out + (o * k + s) * sp.inner;
                    T* dst = pd + b * per_b + (o * sp.size + idx[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)]) * sp.inner;
                    for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
                }
    });
}

template <typename T>
Var concat(Tape<T>& t, Var a, Var b, Index axis) {
    NdArray<T> y = concat(t.val(a), t.val(b), axis);
    bool rg = detail::any_requires(t, {a, b});
    auto ia = a.id, ib = b.id;
    const Index na = t.val(a).dim(axis);
    const Index nb = t.val(b).dim(axis);
    return t.push(std::move(y), rg, [ia, ib, axis, na, nb](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        tp.accum(ia, slice(g, axis, 0, na));
        tp.accum(ib, slice(g, axis, na, nb));
    });
}

template <typename T>
Var slice(Tape<T>& t, Var a, Index axis, Index start, Index len) {
    NdArray<T> y = slice(t.val(a), axis, start, len);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a),
                  [ia, axis, start, len](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        auto sp = detail::axis_split(buf->shape(), axis);
        const T* pg = g.data();
        T* pd = buf->data();
        for (Index o = 0; o < sp.outer; ++o)
            for (Index s = 0; s < len; ++s) {
                const T* src = pg + (o * len + s) * sp.inner;
                T* dst = pd + (o * sp.size + start + s) * sp.inner;
                for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
    });
}

template <typename T>
Var transpose(Tape<T>& t, Var a, std::vector<Index> perm) {
    NdArray<T> y = transpose(t.val(a), perm);
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a),
                  [ia, inv = argsort_perm(perm)](Tape<T>& tp, std::int32_t self) {
        tp.accum(ia, transpose(tp.grad(Var{self}), inv));
    });
}

template <typename T>
Var reshape(Tape<T>& t, Var a, Shape shape) {
    NdArray<T> y = t.val(a).reshaped(std::move(shape));
    auto ia = a.id;
    Shape orig = t.val(a).shape();
    return t.push(std::move(y), t.requires_grad(a),
                  [ia, orig = std::move(orig)](Tape<T>& tp, std::int32_t self) {
        tp.accum(ia, tp.grad(Var{self}).reshaped(orig));
    });
}

// ---------------------------------------------------------------------------
// Broadcast helpers: bias over leading axes, per-row scale over the last axis.
// ---------------------------------------------------------------------------

template <typename T>
Var add_bias(Tape<T>& t, Var x, Var bias) {
    const NdArray<T>& xv = t.val(x);
    const NdArray<T>& bv = t.val(bias);
    const Index d = bv.numel();
    if (xv.numel() % d != 0 || xv.dim(xv.ndim() - 1) != d)
        throw ShapeError("add_bias: bias length " + std::to_string(d) + " must equal last dim of " +
                         shape_str(xv.shape()));
    NdArray<T> y(xv.shape());
    const Index rows = xv.numel() / d;
    for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] + bv[j];
    bool rg = detail::any_requires(t, {x, bias});
    auto ix = x.id, ib = bias.id;
    return t.push(std::move(y), rg, [ix, ib, d](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        tp.accum(ix, g);
        if (NdArray<T>* bb = tp.accum_buffer(ib)) {
            const Index rows = g.numel() / d;
            for (Index r = 0; r < rows; ++r)
                for (Index j = 0; j < d; ++j) (*bb)[j] += g[r * d + j];
        }
    });
}

template <typename T>
Var mul_bias(Tape<T>& t, Var x, Var bias) {
    const NdArray<T>& xv = t.val(x);
    const NdArray<T>& bv = t.val(bias);
    const Index d = bv.numel();
    if (xv.dim(xv.ndim() - 1) != d)
        throw ShapeError("mul_bias: vector length " + std::to_string(d) +
                         " must equal last dim of " + shape_str(xv.shape()));
    NdArray<T> y(xv.shape());
    const Index rows = xv.numel() / d;
    for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] * bv[j];
    bool rg = detail::any_requires(t, {x, bias});
    auto ix = x.id, ib = bias.id;
    return t.push(std::move(y), rg, [ix, ib, d](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& xv = tp.val(Var{ix});
        const NdArray<T>& bv = tp.val(Var{ib});
        const Index rows = g.numel() / d;
        if (NdArray<T>* bx = tp.accum_buffer(ix)) {
            for (Index r = 0; r < rows; ++r)
                for (Index j = 0; j < d; ++j) (*bx)[r * d + j] += g[r * d + j] * bv[j];
        }
        if (NdArray<T>* bb = tp.accum_buffer(ib)) {
            for (Index r = 0; r < rows; ++r)
                for (Index j = 0; j < d; ++j) (*bb)[j] += g[r * d + j] * xv[r * d + j];
        }
    });
}

/// x: [..., D] scaled by s: [..., 1] with matching leading dims.
template <typename T>
Var scale_last(Tape<T>& t, Var x, Var s) {
    const NdArray<T>& xv = t.val(x);
    const NdArray<T>& sv = t.val(s);
    const Index d = xv.dim(xv.ndim() - 1);
    const Index rows = xv.numel() / d;
    if (sv.numel() != rows || sv.dim(sv.ndim() - 1) != 1)
        throw ShapeError("scale_last: scale shape " + shape_str(sv.shape()) +
                         " does not broadcast over " + shape_str(xv.shape()));
    NdArray<T> y(xv.shape());
    for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] * sv[r];
    bool rg = detail::any_requires(t, {x, s});
    auto ix = x.id, is = s.id;
    return t.push(std::move(y), rg, [ix, is, d](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& xv = tp.val(Var{ix});
        const NdArray<T>& sv = tp.val(Var{is});
        const Index rows = g.numel() / d;
        if (NdArray<T>* bx = tp.accum_buffer(ix)) {
            for (Index r = 0; r < rows; ++r)
                for (Index j = 0; j < d; ++j) (*bx)[r * d + j] += g[r * d + j] * sv[r];
        }
        if (NdArray<T>* bs = tp.accum_buffer(is)) {
            for (Index r = 0; r < rows; ++r) {
                T acc = T(0);
                for (Index j = 0; j < d; ++j) acc += g[r * d + j] * xv[r * d + j];
                (*bs)[r] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var sum_all(Tape<T>& t, Var a) {
    NdArray<T> y = NdArray<T>::scalar(sum_all(t.val(a)));
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia](Tape<T>& tp, std::int32_t self) {
        const T g = tp.grad(Var{self})[0];
        if (NdArray<T>* buf = tp.accum_buffer(ia))
            for (Index i = 0; i < buf->numel(); ++i) (*buf)[i] += g;
    });
}

/// Euclidean norm over the last axis: [..., k] -> [...]. The zero vector gets
/// a zero subgradient.
template <typename T>
Var norm_last(Tape<T>& t, Var a) {
    const NdArray<T>& x = t.val(a);
    const Index k = x.dim(x.ndim() - 1);
    const Index rows = x.numel() / k;
    Shape os(x.shape().begin(), x.shape().end() - 1);
    if (os.empty()) os = {1};
    NdArray<T> y(os);
    for (Index r = 0; r < rows; ++r) {
        T s = T(0);
        for (Index j = 0; j < k; ++j) {
            T v = x[r * k + j];
            s += v * v;
        }
        y[r] = std::sqrt(s);
    }
    auto ia = a.id;
    return t.push(std::move(y), t.requires_grad(a), [ia, k](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& y = tp.val(Var{self});
        const NdArray<T>& x = tp.val(Var{ia});
        NdArray<T>* buf = tp.accum_buffer(ia);
        if (!buf) return;
        const Index rows = y.numel();
        for (Index r = 0; r < rows; ++r) {
            if (y[r] <= T(0)) continue;
            const T f = g[r] / y[r];
            for (Index j = 0; j < k; ++j) (*buf)[r * k + j] += f * x[r * k + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Differentiable causal convolution (1-D, equal lengths).
// ---------------------------------------------------------------------------

template <typename T>
Var rfft_conv(Tape<T>& t, Var signal, Var kernel) {
    NdArray<T> y = rfft_conv(t.val(signal), t.val(kernel));
    bool rg = detail::any_requires(t, {signal, kernel});
    auto is = signal.id, ik = kernel.id;
    return t.push(std::move(y), rg, [is, ik](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& x = tp.val(Var{is});
        const NdArray<T>& k = tp.val(Var{ik});
        const Index L = x.numel();
        if (NdArray<T>* bx = tp.accum_buffer(is)) {
            for (Index s = 0; s < L; ++s) {
                T acc = T(0);
                for (Index u = s; u < L; ++u) acc += g[u] * k[u - s];
                (*bx)[s] += acc;
            }
        }
        if (NdArray<T>* bk = tp.accum_buffer(ik)) {
            for (Index m = 0; m < L; ++m) {
                T acc = T(0);
                for (Index u = m; u < L; ++u) acc += g[u] * x[u - m];
                (*bk)[m] += acc;
            }
        }
    });
}

}  // namespace hgm
