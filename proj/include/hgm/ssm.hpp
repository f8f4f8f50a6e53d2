#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "hgm/ndarray.hpp"
#include "hgm/optim.hpp"
#include "hgm/tape.hpp"

namespace hgm {

// ---------------------------------------------------------------------------
// Zero-order-hold discretization.
//
//   Abar = exp(delta * A)
//   Bbar = (delta*A)^-1 (exp(delta*A) - 1) * delta * B = delta * phi(delta*A) * B
//
// with phi(z) = (e^z - 1)/z evaluated through its series near zero, so the
// A -> 0 limit Bbar = delta * B falls out without a division.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T zoh_phi(T z) {
    if (std::abs(z) < T(1e-4))
        return T(1) + z / T(2) + z * z / T(6) + z * z * z / T(24);
    return (std::exp(z) - T(1)) / z;
}

template <typename T>
T zoh_phi_grad(T z) {
    if (std::abs(z) < T(1e-4))
        return T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30);
    return (std::exp(z) * (z - T(1)) + T(1)) / (z * z);
}

}  // namespace detail

/// Diagonal per-channel discretization: A, B are [D, N], delta is [D].
/// Returns (Abar, Bbar), both [D, N].
template <typename T>
std::pair<NdArray<T>, NdArray<T>> discretize(const NdArray<T>& a, const NdArray<T>& b,
                                             const NdArray<T>& delta) {
    if (a.ndim() != 2 || !a.same_shape(b))
        throw ShapeError("discretize: A and B must both be [channels, state], got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const Index d = a.dim(0), n = a.dim(1);
    if (delta.numel() != d)
        throw ShapeError("discretize: delta length " + std::to_string(delta.numel()) +
                         " != channel count " + std::to_string(d));
    for (Index i = 0; i < d; ++i)
        if (!(delta[i] > T(0)))
            throw ValueError("discretize: step size must be > 0, got " +
                             std::to_string(static_cast<double>(delta[i])) + " at channel " +
                             std::to_string(i));
    NdArray<T> abar({d, n}), bbar({d, n});
    for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < n; ++j) {
            const T z = delta[i] * a[i * n + j];
            abar[i * n + j] = std::exp(z);
            bbar[i * n + j] = delta[i] * detail::zoh_phi(z) * b[i * n + j];
        }
    return {std::move(abar), std::move(bbar)};
}

// ---------------------------------------------------------------------------
// Recurrence y_t = C h_t, h_t = Abar h_{t-1} + Bbar x_t, h_{-1} = 0.
//
// LTI form: Abar, Bbar, C all [D, N] constant along the sequence.
// Selective form: Abar, Bbar [L, D, N] and C [L, N] vary per position.
// ---------------------------------------------------------------------------

template <typename T>
NdArray<T> scan_recurrent(const NdArray<T>& abar, const NdArray<T>& bbar, const NdArray<T>& c,
                          const NdArray<T>& x, NdArray<T>* states_out = nullptr) {
    if (x.ndim() != 2) throw ShapeError("scan_recurrent: x must be [length, channels]");
    const Index len = x.dim(0), d = x.dim(1);
    const bool selective = abar.ndim() == 3;
    if (selective) {
        if (abar.shape() != Shape{len, d, abar.dim(2)} || !abar.same_shape(bbar))
            throw ShapeError("scan_recurrent: selective Abar/Bbar must be [length, channels, state]");
    } else {
        if (abar.ndim() != 2 || abar.dim(0) != d || !abar.same_shape(bbar))
            throw ShapeError("scan_recurrent: LTI Abar/Bbar must be [channels, state]");
    }
    const Index n = abar.dim(abar.ndim() - 1);
    const bool c_per_pos = c.ndim() == 2 && selective;
    if (c_per_pos) {
        if (c.shape() != Shape{len, n})
            throw ShapeError("scan_recurrent: per-position C must be [length, state]");
    } else if (c.shape() != Shape{d, n}) {
        throw ShapeError("scan_recurrent: C must be [channels, state], got " + shape_str(c.shape()));
    }
    NdArray<T> y({len, d});
    NdArray<T> h({d, n});
    if (states_out) *states_out = NdArray<T>({len, d, n});
    for (Index t = 0; t < len; ++t) {
        const T* pa = selective ? abar.data() + t * d * n : abar.data();
        const T* pb = selective ? bbar.data() + t * d * n : bbar.data();
        for (Index i = 0; i < d; ++i) {
            const T xv = x[t * d + i];
            T acc = T(0);
            for (Index j = 0; j < n; ++j) {
                T hv = pa[i * n + j] * h[i * n + j] + pb[i * n + j] * xv;
                h[i * n + j] = hv;
                acc += (c_per_pos ? c[t * n + j] : c[i * n + j]) * hv;
            }
            y[t * d + i] = acc;
            if (states_out)
                for (Index j = 0; j < n; ++j) (*states_out)[(t * d + i) * n + j] = h[i * n + j];
        }
    }
    return y;
}

/// Impulse-response kernel of the LTI system: K[d, t] = C Abar^t Bbar.
/// Requires constant (2-D) parameters; position-varying parameters have no
/// convolutional form.
template <typename T>
NdArray<T> kernel_lti(const NdArray<T>& abar, const NdArray<T>& bbar, const NdArray<T>& c,
                      Index len) {
    if (abar.ndim() != 2 || bbar.ndim() != 2 || c.ndim() != 2)
        throw ValueError("kernel_lti: convolutional form requires LTI (constant) parameters");
    if (!abar.same_shape(bbar) || !abar.same_shape(c))
        throw ShapeError("kernel_lti: Abar/Bbar/C shapes disagree");
    if (len < 1) throw ValueError("kernel_lti: length must be >= 1");
    const Index d = abar.dim(0), n = abar.dim(1);
    NdArray<T> k({d, len});
    std::vector<T> pw(static_cast<std::size_t>(n));
    for (Index i = 0; i < d; ++i) {
        for (Index j = 0; j < n; ++j) pw[static_cast<std::size_t>(j)] = bbar[i * n + j];
        for (Index t = 0; t < len; ++t) {
            T acc = T(0);
            for (Index j = 0; j < n; ++j) acc += c[i * n + j] * pw[static_cast<std::size_t>(j)];
            k[i * len + t] = acc;
            for (Index j = 0; j < n; ++j) pw[static_cast<std::size_t>(j)] *= abar[i * n + j];
        }
    }
    return k;
}

/// Convolutional evaluation of an LTI system via the FFT path, channel by
/// channel. x: [length, channels], k: [channels, length].
template <typename T>
NdArray<T> conv_apply(const NdArray<T>& x, const NdArray<T>& k) {
    const Index len = x.dim(0), d = x.dim(1);
    if (k.ndim() != 2 || k.dim(0) != d || k.dim(1) != len)
        throw ShapeError("conv_apply: kernel must be [channels, length]");
    NdArray<T> y({len, d});
    NdArray<T> xs({len}), ks({len});
    for (Index i = 0; i < d; ++i) {
        for (Index t = 0; t < len; ++t) {
            xs[t] = x[t * d + i];
            ks[t] = k[i * len + t];
        }
        NdArray<T> yc = rfft_conv(xs, ks);
        for (Index t = 0; t < len; ++t) y[t * d + i] = yc[t];
    }
    return y;
}

/// Recurrent scan processed in fixed-size chunks along the sequence with the
/// state carried across chunk boundaries; arithmetic is identical to the
/// unchunked sweep.
template <typename T>
NdArray<T> scan_recurrent_chunked(const NdArray<T>& abar, const NdArray<T>& bbar,
                                  const NdArray<T>& c, const NdArray<T>& x, Index chunk = 64) {
    if (abar.ndim() != 2) throw ShapeError("scan_recurrent_chunked: LTI parameters required");
    const Index len = x.dim(0), d = x.dim(1), n = abar.dim(1);
    NdArray<T> y({len, d});
    NdArray<T> h({d, n});
    for (Index t0 = 0; t0 < len; t0 += chunk) {
        const Index t1 = std::min(len, t0 + chunk);
        for (Index t = t0; t < t1; ++t)
            for (Index i = 0; i < d; ++i) {
                const T xv = x[t * d + i];
                T acc = T(0);
                for (Index j = 0; j < n; ++j) {
                    T hv = abar[i * n + j] * h[i * n + j] + bbar[i * n + j] * xv;
                    h[i * n + j] = hv;
                    acc += c[i * n + j] * hv;
                }
                y[t * d + i] = acc;
            }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Fused selective scan (tape op).
//
// Inputs on the tape:
//   u     [B, L, D]  sequence entering the state space
//   a     [D, N]     per-channel diagonal evolution (negative entries)
//   bt    [B, L, N]  input-dependent B
//   ct    [B, L, N]  input-dependent C
//   delta [B, L, D]  positive step sizes
//
// Per position: Abar = exp(delta*a), Bbar = delta*phi(delta*a)*bt, then the
// recurrence of the discrete system with y_t = <ct, h_t>. The backward pass
// is the hand-derived adjoint recurrence over the saved states.
// ---------------------------------------------------------------------------

template <typename T>
Var selective_scan(Tape<T>& t, Var u, Var a, Var bt, Var ct, Var delta) {
    const NdArray<T>& uv = t.val(u);
    const NdArray<T>& av = t.val(a);
    const NdArray<T>& btv = t.val(bt);
    const NdArray<T>& ctv = t.val(ct);
    const NdArray<T>& dv = t.val(delta);
    if (uv.ndim() != 3) throw ShapeError("selective_scan: u must be [batch, length, channels]");
    const Index bsz = uv.dim(0), len = uv.dim(1), d = uv.dim(2);
    if (av.ndim() != 2 || av.dim(0) != d)
        throw ShapeError("selective_scan: A must be [channels, state]");
    const Index n = av.dim(1);
    if (btv.shape() != Shape{bsz, len, n} || ctv.shape() != Shape{bsz, len, n})
        throw ShapeError("selective_scan: B/C must be [batch, length, state]");
    if (!dv.same_shape(uv)) throw ShapeError("selective_scan: delta must match u");

    NdArray<T> y({bsz, len, d});
    // saved states and exp(delta*A) per position; raw buffers skip the
    // zero-fill, and the saved exponentials keep the backward recurrence free
    // of transcendental calls
    const std::size_t saved_n = static_cast<std::size_t>(bsz * len * d * n);
    std::shared_ptr<T[]> h(new T[saved_n]);
    std::shared_ptr<T[]> abar_saved(new T[saved_n]);
    {
        const T* pu = uv.data();
        const T* pa = av.data();
        const T* pb = btv.data();
        const T* pc = ctv.data();
        const T* pd = dv.data();
        T* py = y.data();
        T* ph = h.get();
        T* pe = abar_saved.get();
        for (Index b = 0; b < bsz; ++b) {
            for (Index l = 0; l < len; ++l) {
                const Index base = (b * len + l) * d;
                const T* bt_l = pb + (b * len + l) * n;
                const T* ct_l = pc + (b * len + l) * n;
                for (Index i = 0; i < d; ++i) {
                    const T uval = pu[base + i];
                    const T dl = pd[base + i];
                    const T* hprev = l > 0 ? ph + ((b * len + l - 1) * d + i) * n : nullptr;
                    T* hcur = ph + ((b * len + l) * d + i) * n;
                    T* ecur = pe + ((b * len + l) * d + i) * n;
                    T acc = T(0);
                    for (Index j = 0; j < n; ++j) {
                        const T z = dl * pa[i * n + j];
                        T abar, binc;  // binc = delta * phi(z) * B = (abar - 1) / A
                        if (std::abs(z) < T(1e-4)) {
                            const T phi = T(1) + z / T(2) + z * z / T(6) + z * z * z / T(24);
                            abar = T(1) + z * phi;
                            binc = dl * phi;
                        } else {
                            abar = exp_scalar(z);
                            binc = (abar - T(1)) / pa[i * n + j];
                        }
                        const T hv = abar * (hprev ? hprev[j] : T(0)) + binc * bt_l[j] * uval;
                        hcur[j] = hv;
                        ecur[j] = abar;
                        acc += ct_l[j] * hv;
                    }
                    py[base + i] = acc;
                }
            }
        }
    }

    bool rg = detail::any_requires(t, {u, a, bt, ct, delta});
    auto iu = u.id, ia = a.id, ib = bt.id, ic = ct.id, idl = delta.id;
    return t.push(std::move(y), rg,
                  [iu, ia, ib, ic, idl, h, abar_saved](Tape<T>& tp, std::int32_t self) {
        const NdArray<T>& g = tp.grad(Var{self});
        const NdArray<T>& uv = tp.val(Var{iu});
        const NdArray<T>& av = tp.val(Var{ia});
        const NdArray<T>& btv = tp.val(Var{ib});
        const NdArray<T>& ctv = tp.val(Var{ic});
        const NdArray<T>& dv = tp.val(Var{idl});
        const Index bsz = uv.dim(0), len = uv.dim(1), d = uv.dim(2), n = av.dim(1);
        NdArray<T>* gu = tp.accum_buffer(iu);
        NdArray<T>* ga = tp.accum_buffer(ia);
        NdArray<T>* gb = tp.accum_buffer(ib);
        NdArray<T>* gc = tp.accum_buffer(ic);
        NdArray<T>* gd = tp.accum_buffer(idl);
        const T* pu = uv.data();
        const T* pa = av.data();
        const T* pb = btv.data();
        const T* pc = ctv.data();
        const T* pd = dv.data();
        const T* pg = g.data();
        const T* ph = h.get();
        const T* pe = abar_saved.get();
        std::vector<T> hhat(static_cast<std::size_t>(d * n));
        for (Index b = 0; b < bsz; ++b) {
            std::fill(hhat.begin(), hhat.end(), T(0));  // adjoint carried from l+1
            for (Index l = len - 1; l >= 0; --l) {
                const Index base = (b * len + l) * d;
                const T* bt_l = pb + (b * len + l) * n;
                const T* ct_l = pc + (b * len + l) * n;
                const T* hcur = ph + ((b * len + l) * d) * n;
                const T* hprev = l > 0 ? ph + ((b * len + l - 1) * d) * n : nullptr;
                const T* ecur = pe + ((b * len + l) * d) * n;
                for (Index i = 0; i < d; ++i) {
                    const T gy = pg[base + i];
                    const T uval = pu[base + i];
                    const T dl = pd[base + i];
                    T* hh = hhat.data() + i * n;
                    T gd_acc = T(0), gu_acc = T(0);
                    for (Index j = 0; j < n; ++j) {
                        const T cj = ct_l[j];
                        if (gc) (*gc)[(b * len + l) * n + j] += gy * hcur[i * n + j];
                        // total adjoint of h_l[i, j]
                        const T hj = hh[j] + gy * cj;
                        const T aij = pa[i * n + j];
                        const T z = dl * aij;
                        const T abar = ecur[i * n + j];
                        T phi, phd;
                        if (std::abs(z) < T(1e-4)) {
                            phi = T(1) + z / T(2) + z * z / T(6) + z * z * z / T(24);
                            phd = T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30);
                        } else {
                            phi = (abar - T(1)) / z;
                            phd = (abar * (z - T(1)) + T(1)) / (z * z);
                        }
                        const T hp = hprev ? hprev[i * n + j] : T(0);
                        const T bj = bt_l[j];
                        if (ga)
                            (*ga)[i * n + j] += hj * dl * (hp * abar + uval * bj * dl * phd);
                        gd_acc += hj * (hp * abar * aij + uval * bj * (phi + dl * phd * aij));
                        if (gb) (*gb)[(b * len + l) * n + j] += hj * dl * phi * uval;
                        gu_acc += hj * dl * phi * bj;
                        hh[j] = hj * abar;  // carried to l-1
                    }
                    if (gd) (*gd)[base + i] += gd_acc;
                    if (gu) (*gu)[base + i] += gu_acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Selective SSM module: projections producing B, C, delta from the input,
// then the fused scan. The evolution matrix is stored as log(-A) so its
// entries stay strictly negative under training.
// ---------------------------------------------------------------------------

template <typename T>
struct SsmParamIds {
    Index a_log;     // [D, N]
    Index b_w;       // [D, N]
    Index b_b;       // [N]
    Index c_w;       // [D, N]
    Index c_b;       // [N]
    Index dt_w;      // [D, 1] rank-1 step-size projection
    Index dt_bias;   // [D]  per-channel offset inside the softplus
};

template <typename T>
SsmParamIds<T> register_ssm(ParamStore<T>& store, const std::string& prefix, Index d, Index n,
                            Rng& rng) {
    SsmParamIds<T> p;
    NdArray<T> a_log({d, n});
    for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < n; ++j) a_log[i * n + j] = static_cast<T>(std::log(double(j + 1)));
    p.a_log = store.add(prefix + ".a_log", std::move(a_log));
    auto lin = [&](Index rows, Index cols) {
        NdArray<T> w({rows, cols});
        double bound = 1.0 / std::sqrt(double(rows));
        rng.fill_uniform(w, -bound, bound);
        return w;
    };
    p.b_w = store.add(prefix + ".b_w", lin(d, n));
    p.b_b = store.add(prefix + ".b_b", NdArray<T>::zeros({n}));
    p.c_w = store.add(prefix + ".c_w", lin(d, n));
    p.c_b = store.add(prefix + ".c_b", NdArray<T>::zeros({n}));
    p.dt_w = store.add(prefix + ".dt_w", lin(d, 1));
    // softplus(dt_bias) spread across [1e-3, 0.1]
    NdArray<T> dtb({d});
    for (Index i = 0; i < d; ++i) {
        double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
        dtb[i] = static_cast<T>(std::log(std::expm1(dt)));
    }
    p.dt_bias = store.add(prefix + ".dt_bias", std::move(dtb));
    return p;
}

/// u: [B, L, D_inner] -> [B, L, D_inner].
template <typename T>
Var ssm_forward(TapeBind<T>& bind, const SsmParamIds<T>& p, Var u) {
    Tape<T>& t = bind.tape();
    const Index bsz = t.val(u).dim(0), len = t.val(u).dim(1);
    Var a = scale(t, exp(t, bind[p.a_log]), T(-1));
    Var bt = add_bias(t, matmul(t, u, bind[p.b_w]), bind[p.b_b]);
    Var ct = add_bias(t, matmul(t, u, bind[p.c_w]), bind[p.c_b]);
    // delta = softplus(bias_d + Linear_1(u)) broadcast over channels
    Var s = matmul(t, u, bind[p.dt_w]);  // [B, L, 1]
    const Index d = t.val(bind[p.dt_bias]).numel();
    Var ones_row = t.constant(NdArray<T>::ones({1, d}));
    Var s_bcast = matmul(t, s, ones_row);  // [B, L, D]
    Var delta = softplus(t, add_bias(t, s_bcast, bind[p.dt_bias]));
    (void)bsz;
    (void)len;
    return selective_scan(t, u, a, bt, ct, delta);
}

// ---------------------------------------------------------------------------
// Mamba block: identity, forward-scan and backward-scan pathways merged by
// multiplicative gating, with a residual connection.
//
//   X_id = gelu(layernorm(X W_id))
//   X_f  = SSM_f(gelu(X W_f1) W_f2)
//   X_b  = flip(SSM_b(gelu(flip(X) W_b1) W_b2))
//   out  = X + (X_id . X_f + X_id . X_b) W_out
// ---------------------------------------------------------------------------

template <typename T>
struct MambaBlockIds {
    Index w_id, b_id;        // D -> nD
    Index ln_gain, ln_bias;  // nD
    Index w_f1, b_f1;        // D -> nD
    Index w_f2, b_f2;        // nD -> nD
    Index w_b1, b_b1;        // D -> nD
    Index w_b2, b_b2;        // nD -> nD
    Index w_out, b_out;      // nD -> D
    SsmParamIds<T> ssm_f;
    SsmParamIds<T> ssm_b;
};

template <typename T>
MambaBlockIds<T> register_mamba_block(ParamStore<T>& store, const std::string& prefix, Index d,
                                      Index expand, Index n_state, Rng& rng) {
    const Index nd = d * expand;
    auto lin = [&](Index rows, Index cols) {
        NdArray<T> w({rows, cols});
        double bound = 1.0 / std::sqrt(double(rows));
        rng.fill_uniform(w, -bound, bound);
        return w;
    };
    MambaBlockIds<T> m;
    m.w_id = store.add(prefix + ".w_id", lin(d, nd));
    m.b_id = store.add(prefix + ".b_id", NdArray<T>::zeros({nd}));
    m.ln_gain = store.add(prefix + ".ln_gain", NdArray<T>::ones({nd}));
    m.ln_bias = store.add(prefix + ".ln_bias", NdArray<T>::zeros({nd}));
    m.w_f1 = store.add(prefix + ".w_f1", lin(d, nd));
    m.b_f1 = store.add(prefix + ".b_f1", NdArray<T>::zeros({nd}));
    m.w_f2 = store.add(prefix + ".w_f2", lin(nd, nd));
    m.b_f2 = store.add(prefix + ".b_f2", NdArray<T>::zeros({nd}));
    m.w_b1 = store.add(prefix + ".w_b1", lin(d, nd));
    m.b_b1 = store.add(prefix + ".b_b1", NdArray<T>::zeros({nd}));
    m.w_b2 = store.add(prefix + ".w_b2", lin(nd, nd));
    m.b_b2 = store.add(prefix + ".b_b2", NdArray<T>::zeros({nd}));
    m.w_out = store.add(prefix + ".w_out", lin(nd, d));
    m.b_out = store.add(prefix + ".b_out", NdArray<T>::zeros({d}));
    m.ssm_f = register_ssm(store, prefix + ".ssm_f", nd, n_state, rng);
    m.ssm_b = register_ssm(store, prefix + ".ssm_b", nd, n_state, rng);
    return m;
}

/// x: [B, L, D] -> [B, L, D]. The flip pathway reverses the sequence axis.
template <typename T>
Var mamba_block(TapeBind<T>& bind, const MambaBlockIds<T>& m, Var x) {
    Tape<T>& t = bind.tape();
    if (t.val(x).ndim() != 3) throw ShapeError("mamba_block: input must be [batch, length, channels]");
    Var x_id = gelu(t, layernorm(t, add_bias(t, matmul(t, x, bind[m.w_id]), bind[m.b_id]),
                                 bind[m.ln_gain], bind[m.ln_bias]));
    Var uf = add_bias(t, matmul(t, gelu(t, add_bias(t, matmul(t, x, bind[m.w_f1]), bind[m.b_f1])),
                                bind[m.w_f2]), bind[m.b_f2]);
    Var x_f = ssm_forward(bind, m.ssm_f, uf);
    Var xr = flip(t, x, Index(1));
    Var ub = add_bias(t, matmul(t, gelu(t, add_bias(t, matmul(t, xr, bind[m.w_b1]), bind[m.b_b1])),
                                bind[m.w_b2]), bind[m.b_b2]);
    Var x_b = flip(t, ssm_forward(bind, m.ssm_b, ub), Index(1));
    Var gated = add(t, mul(t, x_id, x_f), mul(t, x_id, x_b));
    return add(t, x, add_bias(t, matmul(t, gated, bind[m.w_out]), bind[m.b_out]));
}

}  // namespace hgm
