#pragma once

#include <string>
#include <vector>

#include "hgm/hypergraph.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/optim.hpp"
#include "hgm/rng.hpp"
#include "hgm/tape.hpp"

namespace hgm {

// ---------------------------------------------------------------------------
// Batch normalization module state (running stats live in the store as
// non-trainable entries).
// ---------------------------------------------------------------------------

struct BatchNormIds {
    Index gain, bias;
    Index run_mean, run_var;
};

template <typename T>
BatchNormIds register_batchnorm(ParamStore<T>& store, const std::string& prefix, Index d) {
    BatchNormIds b;
    b.gain = store.add(prefix + ".gain", NdArray<T>::ones({d}));
    b.bias = store.add(prefix + ".bias", NdArray<T>::zeros({d}));
    b.run_mean = store.add(prefix + ".run_mean", NdArray<T>::zeros({d}), /*trainable=*/false);
    b.run_var = store.add(prefix + ".run_var", NdArray<T>::ones({d}), /*trainable=*/false);
    return b;
}

/// Train mode normalizes by batch statistics; when update_running is set the
/// store's running stats absorb them with momentum 0.1.
template <typename T>
Var apply_batchnorm(TapeBind<T>& bind, const BatchNormIds& bn, Var x, bool train,
                    bool update_running) {
    Tape<T>& t = bind.tape();
    ParamStore<T>& store = bind.store();
    std::pair<NdArray<T>, NdArray<T>> stats;
    Var y = batchnorm(t, x, bind[bn.gain], bind[bn.bias], store.entry(bn.run_mean).value,
                      store.entry(bn.run_var).value, train, &stats);
    if (train && update_running) {
        const T momentum = T(0.1);
        NdArray<T>& rm = store.entry(bn.run_mean).value;
        NdArray<T>& rv = store.entry(bn.run_var).value;
        for (Index j = 0; j < rm.numel(); ++j) {
            rm[j] = (T(1) - momentum) * rm[j] + momentum * stats.first[j];
            rv[j] = (T(1) - momentum) * rv[j] + momentum * stats.second[j];
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Spatial hypergraph convolution: mixes joints through the kernel built from
// learnable hyperedge weights, then a per-joint channel map, batchnorm, relu.
// ---------------------------------------------------------------------------

template <typename T>
struct HyperScaleIds {
    Index m;        // hyperedge weights, one per edge
    Index w, b;     // D -> D
    BatchNormIds bn;
    NdArray<T> p, q;  // fixed kernel factors
};

template <typename T>
HyperScaleIds<T> register_hyper_scale(ParamStore<T>& store, const std::string& prefix,
                                      const Hypergraph& hg, Index d, Rng& rng) {
    HyperScaleIds<T> s;
    // hyperedge weights start at the identity (equal weights)
    s.m = store.add(prefix + ".m", NdArray<T>::ones({hg.num_edges()}));
    NdArray<T> w({d, d});
    double bound = 1.0 / std::sqrt(double(d));
    rng.fill_uniform(w, -bound, bound);
    s.w = store.add(prefix + ".w", std::move(w));
    s.b = store.add(prefix + ".b", NdArray<T>::zeros({d}));
    s.bn = register_batchnorm(store, prefix + ".bn", d);
    HypergraphFactors<T> f = hypergraph_factors<T>(hg);
    s.p = std::move(f.p);
    s.q = std::move(f.q);
    return s;
}

/// x: [B, T, J, D] -> [B, T, J, D] for one hypergraph scale.
template <typename T>
Var spatial_hypergcn_scale(TapeBind<T>& bind, const HyperScaleIds<T>& s, Var x, bool train,
                           bool update_running) {
    Tape<T>& t = bind.tape();
    const NdArray<T>& xv = t.val(x);
    if (xv.ndim() != 4) throw ShapeError("spatial_hypergcn: input must be [B, T, J, D]");
    const Index j = xv.dim(2);
    if (j != s.p.dim(0))
        throw ShapeError("spatial_hypergcn: input has " + std::to_string(j) +
                         " joints, kernel expects " + std::to_string(s.p.dim(0)));
    // kernel = P diag(m) Q, differentiable in the hyperedge weights
    Var kernel = matmul(t, mul_bias(t, t.constant(s.p), bind[s.m]), t.constant(s.q));
    // mix joints: kernel is symmetric, so right-multiplying the joint axis works
    Var xt = transpose(t, x, {0, 1, 3, 2});           // [B, T, D, J]
    Var mixed = transpose(t, matmul(t, xt, kernel), {0, 1, 3, 2});
    Var lin = add_bias(t, matmul(t, mixed, bind[s.w]), bind[s.b]);
    return relu(t, apply_batchnorm(bind, s.bn, lin, train, update_running));
}

// ---------------------------------------------------------------------------
// Temporal KNN graph over frames.
// ---------------------------------------------------------------------------

/// Binary temporal adjacency from frame-feature similarity: per batch element,
/// each row keeps its k most similar frames (self excluded, re-added later by
/// the +I of the graph kernel). Ties break toward the lower frame index; k is
/// clamped to T-1.
template <typename T>
NdArray<T> temporal_knn_adjacency(const NdArray<T>& x_frames, Index k = 2) {
    if (x_frames.ndim() != 3)
        throw ShapeError("temporal_knn_adjacency: input must be [B, T, features]");
    const Index bsz = x_frames.dim(0), tdim = x_frames.dim(1), f = x_frames.dim(2);
    const Index keff = std::min(k, tdim - 1);
    NdArray<T> adj({bsz, tdim, tdim});
    std::vector<T> sim(static_cast<std::size_t>(tdim));
    std::vector<Index> order(static_cast<std::size_t>(tdim));
    for (Index b = 0; b < bsz; ++b) {
        const T* xb = x_frames.data() + b * tdim * f;
        for (Index r = 0; r < tdim; ++r) {
            for (Index c = 0; c < tdim; ++c) {
                T s = T(0);
                for (Index i = 0; i < f; ++i) s += xb[r * f + i] * xb[c * f + i];
                sim[static_cast<std::size_t>(c)] = s;
            }
            for (Index c = 0; c < tdim; ++c) order[static_cast<std::size_t>(c)] = c;
            // stable sort by similarity descending keeps lower indices first on ties
            std::stable_sort(order.begin(), order.end(),
                             [&](Index a, Index c) { return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(c)]; });
            Index taken = 0;
            for (Index c = 0; c < tdim && taken < keff; ++c) {
                Index cand = order[static_cast<std::size_t>(c)];
                if (cand == r) continue;
                adj[(b * tdim + r) * tdim + cand] = T(1);
                ++taken;
            }
        }
    }
    return adj;
}

template <typename T>
struct TemporalGcnIds {
    Index w, b;  // D -> D
    BatchNormIds bn;
};

template <typename T>
TemporalGcnIds<T> register_temporal_gcn(ParamStore<T>& store, const std::string& prefix, Index d,
                                        Rng& rng) {
    TemporalGcnIds<T> s;
    NdArray<T> w({d, d});
    double bound = 1.0 / std::sqrt(double(d));
    rng.fill_uniform(w, -bound, bound);
    s.w = store.add(prefix + ".w", std::move(w));
    s.b = store.add(prefix + ".b", NdArray<T>::zeros({d}));
    s.bn = register_batchnorm(store, prefix + ".bn", d);
    return s;
}

/// Frame mixing through the normalized kernel of A_tp + I, then channel map,
/// batchnorm, relu. The adjacency is data-dependent but enters as a constant
/// of the forward pass (the selection is not differentiable).
template <typename T>
Var temporal_gcn(TapeBind<T>& bind, const TemporalGcnIds<T>& s, Var x, const NdArray<T>& a_tp,
                 bool train, bool update_running) {
    Tape<T>& t = bind.tape();
    const NdArray<T>& xv = t.val(x);
    const Index bsz = xv.dim(0), tdim = xv.dim(1), j = xv.dim(2), d = xv.dim(3);
    if (a_tp.shape() != Shape{bsz, tdim, tdim})
        throw ShapeError("temporal_gcn: adjacency must be [B, T, T]");
    NdArray<T> kernels({bsz, tdim, tdim});
    for (Index b = 0; b < bsz; ++b) {
        NdArray<T> ab({tdim, tdim});
        std::copy(a_tp.data() + b * tdim * tdim, a_tp.data() + (b + 1) * tdim * tdim, ab.data());
        NdArray<T> g = graph_kernel(ab);
        std::copy(g.data(), g.data() + tdim * tdim, kernels.data() + b * tdim * tdim);
    }
    Var xflat = reshape(t, x, {bsz, tdim, j * d});
    Var mixed = reshape(t, matmul(t, t.constant(std::move(kernels)), xflat), {bsz, tdim, j, d});
    Var lin = add_bias(t, matmul(t, mixed, bind[s.w]), bind[s.b]);
    return relu(t, apply_batchnorm(bind, s.bn, lin, train, update_running));
}

// ---------------------------------------------------------------------------
// Full stream: part + body spatial hypergraph convolutions fused by summation,
// then the temporal KNN graph convolution.
// ---------------------------------------------------------------------------

template <typename T>
struct HyperGcnStreamIds {
    HyperScaleIds<T> part;
    HyperScaleIds<T> body;
    TemporalGcnIds<T> temporal;
    Index knn_k = 2;
};

template <typename T>
HyperGcnStreamIds<T> register_hypergcn_stream(ParamStore<T>& store, const std::string& prefix,
                                              const SkeletonSpec& skel, Index d, Rng& rng) {
    HyperGcnStreamIds<T> s;
    s.part = register_hyper_scale(store, prefix + ".part", skel.part, d, rng);
    s.body = register_hyper_scale(store, prefix + ".body", skel.body, d, rng);
    s.temporal = register_temporal_gcn(store, prefix + ".temporal", d, rng);
    return s;
}

template <typename T>
Var hypergcn_stream(TapeBind<T>& bind, const HyperGcnStreamIds<T>& s, Var x, bool train,
                    bool update_running) {
    Tape<T>& t = bind.tape();
    Var x_part = spatial_hypergcn_scale(bind, s.part, x, train, update_running);
    Var x_body = spatial_hypergcn_scale(bind, s.body, x, train, update_running);
    Var x_spatial = add(t, x_part, x_body);
    const NdArray<T>& sv = t.val(x_spatial);
    const Index bsz = sv.dim(0), tdim = sv.dim(1);
    NdArray<T> a_tp =
        temporal_knn_adjacency(sv.reshaped({bsz, tdim, sv.numel() / (bsz * tdim)}), s.knn_k);
    return temporal_gcn(bind, s.temporal, x_spatial, a_tp, train, update_running);
}

}  // namespace hgm
