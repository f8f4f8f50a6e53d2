#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hgm/hypergcn.hpp"
#include "hgm/hypergraph.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/optim.hpp"
#include "hgm/rng.hpp"
#include "hgm/ssm.hpp"
#include "hgm/tape.hpp"

#include "json.hpp"

namespace hgm {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    Index blocks = 2;        // stacked dual-stream blocks
    Index channels = 32;     // base feature width D
    Index frames = 9;        // input clip length T
    Index joints = 17;
    Index expand = 2;        // inner width multiplier of the scan pathways
    Index state_dim = 16;    // SSM state size per channel
    Index head_dim = 512;    // regression hidden width
    Index mlp_ratio = 4;     // per-stream feed-forward expansion
    double shuffle_pn = 0.5; // deepest-layer shuffle probability
    double velocity_weight = 20.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (blocks < 1) throw ValueError("config: blocks must be >= 1");
        if (channels < 8 || channels % 2 != 0)
            throw ValueError("config: channels must be even and >= 8");
        if (frames < 1) throw ValueError("config: frames must be >= 1");
        if (joints != 17) throw ValueError("config: only the 17-joint skeleton is supported");
        if (shuffle_pn < 0.0 || shuffle_pn > 1.0)
            throw ValueError("config: shuffle_pn must be in [0, 1]");
        if (velocity_weight < 0.0) throw ValueError("config: velocity_weight must be >= 0");
        if (expand < 1 || state_dim < 1 || head_dim < 1 || mlp_ratio < 1)
            throw ValueError("config: expand/state_dim/head_dim/mlp_ratio must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"blocks", blocks},
                              {"channels", channels},
                              {"frames", frames},
                              {"joints", joints},
                              {"expand", expand},
                              {"state_dim", state_dim},
                              {"head_dim", head_dim},
                              {"mlp_ratio", mlp_ratio},
                              {"shuffle_pn", shuffle_pn},
                              {"velocity_weight", velocity_weight},
                              {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.blocks = j.value("blocks", c.blocks);
        c.channels = j.value("channels", c.channels);
        c.frames = j.value("frames", c.frames);
        c.joints = j.value("joints", c.joints);
        c.expand = j.value("expand", c.expand);
        c.state_dim = j.value("state_dim", c.state_dim);
        c.head_dim = j.value("head_dim", c.head_dim);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.shuffle_pn = j.value("shuffle_pn", c.shuffle_pn);
        c.velocity_weight = j.value("velocity_weight", c.velocity_weight);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    }

    /// tiny is a toy preset for desk-scale runs; xs/s/b mirror the published
    /// variant table (N, D, T).
    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "tiny") {
            c.blocks = 2;
            c.channels = 32;
            c.frames = 9;
            c.state_dim = 8;
            c.mlp_ratio = 2;
            c.shuffle_pn = 0.0;  // memorization preset, no shuffle regularization
        } else if (name == "xs") {
            c.blocks = 12;
            c.channels = 64;
            c.frames = 27;
        } else if (name == "s") {
            c.blocks = 26;
            c.channels = 64;
            c.frames = 81;
        } else if (name == "b") {
            c.blocks = 16;
            c.channels = 128;
            c.frames = 243;
        } else {
            throw ValueError("unknown preset '" + name + "' (expected tiny|xs|s|b)");
        }
        return c;
    }
};

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

template <typename T>
struct FfnIds {
    Index ln_gain, ln_bias;
    Index w1, b1;  // D -> r*D
    Index w2, b2;  // r*D -> D
};

template <typename T>
FfnIds<T> register_ffn(ParamStore<T>& store, const std::string& prefix, Index d, Index ratio,
                       Rng& rng) {
    FfnIds<T> f;
    f.ln_gain = store.add(prefix + ".ln_gain", NdArray<T>::ones({d}));
    f.ln_bias = store.add(prefix + ".ln_bias", NdArray<T>::zeros({d}));
    auto lin = [&](Index rows, Index cols) {
        NdArray<T> w({rows, cols});
        double bound = 1.0 / std::sqrt(double(rows));
        rng.fill_uniform(w, -bound, bound);
        return w;
    };
    f.w1 = store.add(prefix + ".w1", lin(d, d * ratio));
    f.b1 = store.add(prefix + ".b1", NdArray<T>::zeros({d * ratio}));
    f.w2 = store.add(prefix + ".w2", lin(d * ratio, d));
    f.b2 = store.add(prefix + ".b2", NdArray<T>::zeros({d}));
    return f;
}

template <typename T>
Var ffn_sublayer(TapeBind<T>& bind, const FfnIds<T>& f, Var x) {
    Tape<T>& t = bind.tape();
    Var h = layernorm(t, x, bind[f.ln_gain], bind[f.ln_bias]);
    h = gelu(t, add_bias(t, matmul(t, h, bind[f.w1]), bind[f.b1]));
    h = add_bias(t, matmul(t, h, bind[f.w2]), bind[f.b2]);
    return add(t, x, h);
}

template <typename T>
struct HgmBlockIds {
    MambaBlockIds<T> st;  // frame-major scan order
    MambaBlockIds<T> ts;  // joint-major scan order
    HyperGcnStreamIds<T> hg;
    FfnIds<T> ffn_m;
    FfnIds<T> ffn_hg;
    Index fuse_w, fuse_b;  // 2D -> 2 gate logits
};

template <typename T>
struct ModelIds {
    Index embed_w, embed_b;  // 2 -> D
    Index p_pos;             // [T, J, D]
    std::vector<HgmBlockIds<T>> blocks;
    Index head1_w, head1_b;  // D -> head_dim
    Index head2_w, head2_b;  // head_dim -> 3
};

template <typename T>
ModelIds<T> register_model(ParamStore<T>& store, const ModelConfig& cfg, const SkeletonSpec& skel,
                           Rng& rng) {
    cfg.validate();
    const Index d = cfg.channels;
    auto lin = [&](Index rows, Index cols) {
        NdArray<T> w({rows, cols});
        double bound = 1.0 / std::sqrt(double(rows));
        rng.fill_uniform(w, -bound, bound);
        return w;
    };
    ModelIds<T> m;
    m.embed_w = store.add("embed.w", lin(2, d));
    m.embed_b = store.add("embed.b", NdArray<T>::zeros({d}));
    NdArray<T> pos({cfg.frames, cfg.joints, d});
    rng.fill_normal(pos, 0.0, 0.02);
    m.p_pos = store.add("embed.p_pos", std::move(pos));
    for (Index i = 0; i < cfg.blocks; ++i) {
        std::string p = "blocks." + std::to_string(i);
        HgmBlockIds<T> b;
        b.st = register_mamba_block(store, p + ".mamba_st", d, cfg.expand, cfg.state_dim, rng);
        b.ts = register_mamba_block(store, p + ".mamba_ts", d, cfg.expand, cfg.state_dim, rng);
        b.hg = register_hypergcn_stream(store, p + ".hypergcn", skel, d, rng);
        b.ffn_m = register_ffn(store, p + ".ffn_m", d, cfg.mlp_ratio, rng);
        b.ffn_hg = register_ffn(store, p + ".ffn_hg", d, cfg.mlp_ratio, rng);
        b.fuse_w = store.add(p + ".fuse.w", lin(2 * d, 2));
        b.fuse_b = store.add(p + ".fuse.b", NdArray<T>::zeros({2}));
        m.blocks.push_back(std::move(b));
    }
    m.head1_w = store.add("head.w1", lin(d, cfg.head_dim));
    m.head1_b = store.add("head.b1", NdArray<T>::zeros({cfg.head_dim}));
    m.head2_w = store.add("head.w2", lin(cfg.head_dim, 3));
    m.head2_b = store.add("head.b2", NdArray<T>::zeros({3}));
    return m;
}

// ---------------------------------------------------------------------------
// Joint positional embedding
// ---------------------------------------------------------------------------

/// p2d: [B, T, J, 2] -> [B, T, J, D]. The clip length must equal the
/// configured frame count; there is no interpolation.
template <typename T>
Var embed(TapeBind<T>& bind, const ModelIds<T>& ids, const ModelConfig& cfg, Var p2d) {
    Tape<T>& t = bind.tape();
    const NdArray<T>& xv = t.val(p2d);
    if (xv.ndim() != 4 || xv.dim(3) != 2)
        throw ShapeError("embed: input must be [B, T, J, 2], got " + shape_str(xv.shape()));
    if (xv.dim(1) != cfg.frames)
        throw ValueError("embed: clip has " + std::to_string(xv.dim(1)) +
                         " frames but the model is configured for " + std::to_string(cfg.frames));
    if (xv.dim(2) != cfg.joints)
        throw ShapeError("embed: expected " + std::to_string(cfg.joints) + " joints");
    const Index bsz = xv.dim(0);
    Var x = add_bias(t, matmul(t, p2d, bind[ids.embed_w]), bind[ids.embed_b]);
    const Index flat = cfg.frames * cfg.joints * cfg.channels;
    Var pos_flat = reshape(t, bind[ids.p_pos], {flat});
    Var xf = add_bias(t, reshape(t, x, {bsz, flat}), pos_flat);
    return reshape(t, xf, {bsz, cfg.frames, cfg.joints, cfg.channels});
}

// ---------------------------------------------------------------------------
// Shuffled scan stream (one directional variant)
// ---------------------------------------------------------------------------

struct ShuffleCtx {
    bool training = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    Index batch_offset = 0;  // global index of this shard's first element
};

enum class ScanOrder { kSpatialFirst, kTemporalFirst };

/// Depth-scaled shuffle probability p_l = (l / N) * P_N.
inline double shuffle_probability(Index layer, Index blocks, double pn) {
    return (double(layer) / double(blocks)) * pn;
}

/// One variant of the shuffled scan around an arbitrary sequence layer: with
/// probability (layer/N)*P_N in training mode, joints are permuted per batch
/// element, the layer runs on the flattened sequence, and the permutation is
/// undone afterwards. Inference always takes the unshuffled path.
template <typename T, typename LayerFn>
Var shuffled_scan_apply(Tape<T>& t, Var x, ScanOrder order, Index layer, Index blocks, double pn,
                        const ShuffleCtx& ctx, LayerFn&& sublayer) {
    const NdArray<T>& xv = t.val(x);
    const Index bsz = xv.dim(0), tt = xv.dim(1), jj = xv.dim(2), d = xv.dim(3);
    const double p_l = shuffle_probability(layer, blocks, pn);
    const std::uint64_t variant_tag = order == ScanOrder::kSpatialFirst ? 1 : 2;
    bool do_shuffle = false;
    if (ctx.training) {
        Rng gate = Rng::derive({ctx.seed, ctx.step, static_cast<std::uint64_t>(layer), variant_tag});
        do_shuffle = gate.bernoulli(p_l);
    }
    Var xs = x;
    std::vector<std::vector<Index>> restore;
    if (do_shuffle) {
        std::vector<std::vector<Index>> perms(static_cast<std::size_t>(bsz));
        restore.resize(static_cast<std::size_t>(bsz));
        for (Index b = 0; b < bsz; ++b) {
            Rng r = Rng::derive({ctx.seed, ctx.step, static_cast<std::uint64_t>(layer), variant_tag,
                                 static_cast<std::uint64_t>(ctx.batch_offset + b) + 10});
            perms[static_cast<std::size_t>(b)] = r.randperm(jj);
            restore[static_cast<std::size_t>(b)] = argsort_perm(perms[static_cast<std::size_t>(b)]);
        }
        xs = gather_batched(t, x, Index(2), std::move(perms));
    }
    Var y;
    if (order == ScanOrder::kSpatialFirst) {
        Var seq = reshape(t, xs, {bsz, tt * jj, d});
        y = reshape(t, sublayer(seq), {bsz, tt, jj, d});
    } else {
        Var seq = reshape(t, transpose(t, xs, {0, 2, 1, 3}), {bsz, jj * tt, d});
        y = transpose(t, reshape(t, sublayer(seq), {bsz, jj, tt, d}), {0, 2, 1, 3});
    }
    if (do_shuffle) y = gather_batched(t, y, Index(2), std::move(restore));
    return y;
}

template <typename T>
Var shuffled_scan_variant(TapeBind<T>& bind, const MambaBlockIds<T>& m, Var x, ScanOrder order,
                          Index layer, const ModelConfig& cfg, const ShuffleCtx& ctx) {
    return shuffled_scan_apply(bind.tape(), x, order, layer, cfg.blocks, cfg.shuffle_pn, ctx,
                               [&](Var seq) { return mamba_block(bind, m, seq); });
}

/// Both directional variants run on the same input; their outputs are averaged.
template <typename T>
Var shuffled_mamba_stream(TapeBind<T>& bind, const HgmBlockIds<T>& blk, Var x, Index layer,
                          const ModelConfig& cfg, const ShuffleCtx& ctx) {
    Tape<T>& t = bind.tape();
    Var st = shuffled_scan_variant(bind, blk.st, x, ScanOrder::kSpatialFirst, layer, cfg, ctx);
    Var ts = shuffled_scan_variant(bind, blk.ts, x, ScanOrder::kTemporalFirst, layer, cfg, ctx);
    return scale(t, add(t, st, ts), T(0.5));
}

// ---------------------------------------------------------------------------
// Dual-stream block with adaptive fusion
// ---------------------------------------------------------------------------

/// Softmax-gated convex combination of the two stream outputs. The gate
/// logits come from a linear map of the concatenated features, so the two
/// gates sum to one at every position.
template <typename T>
Var adaptive_fusion(TapeBind<T>& bind, Index fuse_w, Index fuse_b, Var xm, Var xhg,
                    Var* alpha_out = nullptr) {
    Tape<T>& t = bind.tape();
    const Index last = t.val(xm).ndim() - 1;
    Var cat = concat(t, xm, xhg, last);
    Var logits = add_bias(t, matmul(t, cat, bind[fuse_w]), bind[fuse_b]);
    Var alpha = softmax(t, logits, last);
    if (alpha_out) *alpha_out = alpha;
    Var a_m = slice(t, alpha, last, Index(0), Index(1));
    Var a_hg = slice(t, alpha, last, Index(1), Index(1));
    return add(t, scale_last(t, xm, a_m), scale_last(t, xhg, a_hg));
}

template <typename T>
Var hgm_block(TapeBind<T>& bind, const HgmBlockIds<T>& blk, Var x, Index layer,
              const ModelConfig& cfg, const ShuffleCtx& ctx, bool update_running) {
    Var xm = shuffled_mamba_stream(bind, blk, x, layer, cfg, ctx);
    xm = ffn_sublayer(bind, blk.ffn_m, xm);
    Var xhg = hypergcn_stream(bind, blk.hg, x, ctx.training, update_running);
    xhg = ffn_sublayer(bind, blk.ffn_hg, xhg);
    return adaptive_fusion(bind, blk.fuse_w, blk.fuse_b, xm, xhg);
}

// ---------------------------------------------------------------------------
// End-to-end forward and loss
// ---------------------------------------------------------------------------

/// p2d [B, T, J, 2] -> predicted 3-D coordinates [B, T, J, 3]. Deterministic
/// whenever ctx.training is false.
template <typename T>
Var model_forward(TapeBind<T>& bind, const ModelIds<T>& ids, const ModelConfig& cfg, Var p2d,
                  const ShuffleCtx& ctx, bool update_running = false) {
    Tape<T>& t = bind.tape();
    Var x = embed(bind, ids, cfg, p2d);
    for (Index i = 0; i < cfg.blocks; ++i) {
        try {
            x = hgm_block(bind, ids.blocks[static_cast<std::size_t>(i)], x, i + 1, cfg, ctx,
                          update_running);
        } catch (const NumericError& e) {
            throw NumericError("block " + std::to_string(i + 1) + ": " + e.what());
        }
        if (!all_finite(t.val(x)))
            throw NumericError("non-finite activations after block " + std::to_string(i + 1));
    }
    Var h = add_bias(t, matmul(t, x, bind[ids.head1_w]), bind[ids.head1_b]);
    return add_bias(t, matmul(t, h, bind[ids.head2_w]), bind[ids.head2_b]);
}

/// Position loss plus weighted velocity loss; per-joint Euclidean norms summed
/// over frames and joints, averaged over the batch. The velocity term is empty
/// for single-frame clips. `denom` overrides the averaging denominator so that
/// batch shards can normalize by the global batch size.
template <typename T>
Var pose_loss(Tape<T>& t, Var pred, Var target, T velocity_weight, Index denom = -1) {
    const NdArray<T>& pv = t.val(pred);
    if (!pv.same_shape(t.val(target)))
        throw ShapeError("pose_loss: prediction shape " + shape_str(pv.shape()) +
                         " != target shape " + shape_str(t.val(target).shape()));
    if (pv.ndim() != 4) throw ShapeError("pose_loss: inputs must be [B, T, J, 3]");
    const Index bsz = denom > 0 ? denom : pv.dim(0);
    const Index tt = pv.dim(1);
    Var diff = sub(t, pred, target);
    Var total = sum_all(t, norm_last(t, diff));
    if (tt > 1 && velocity_weight != T(0)) {
        Var dp = sub(t, slice(t, pred, Index(1), Index(1), tt - 1),
                     slice(t, pred, Index(1), Index(0), tt - 1));
        Var dg = sub(t, slice(t, target, Index(1), Index(1), tt - 1),
                     slice(t, target, Index(1), Index(0), tt - 1));
        Var vel = sum_all(t, norm_last(t, sub(t, dp, dg)));
        total = add(t, total, scale(t, vel, velocity_weight));
    }
    return scale(t, total, T(1) / T(bsz));
}

// ---------------------------------------------------------------------------
// Horizontal flip
// ---------------------------------------------------------------------------

/// Mirrors a pose about the vertical line through the root joint's x and swaps
/// left/right joints. Works for [T, J, C] and [B, T, J, C] with C in {2, 3};
/// an involution.
template <typename T>
NdArray<T> horizontal_flip(const NdArray<T>& pose, const SkeletonSpec& skel) {
    if (pose.ndim() < 3) throw ShapeError("horizontal_flip: pose must be [..., J, coords]");
    const Index c = pose.dim(pose.ndim() - 1);
    const Index j = pose.dim(pose.ndim() - 2);
    if (j != skel.num_joints())
        throw ShapeError("horizontal_flip: pose has " + std::to_string(j) + " joints, skeleton " +
                         std::to_string(skel.num_joints()));
    std::vector<Index> remap(static_cast<std::size_t>(j));
    for (Index i = 0; i < j; ++i) remap[static_cast<std::size_t>(i)] = i;
    for (auto [r, l] : skel.lr_pairs) {
        remap[static_cast<std::size_t>(r)] = l;
        remap[static_cast<std::size_t>(l)] = r;
    }
    NdArray<T> out(pose.shape());
    const Index frames = pose.numel() / (j * c);
    for (Index f = 0; f < frames; ++f) {
        const T* src = pose.data() + f * j * c;
        T* dst = out.data() + f * j * c;
        const T root_x = src[skel.root * c + 0];
        for (Index q = 0; q < j; ++q) {
            const T* sj = src + remap[static_cast<std::size_t>(q)] * c;
            T* dj = dst + q * c;
            dj[0] = T(2) * root_x - sj[0];
            for (Index k = 1; k < c; ++k) dj[k] = sj[k];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

template <typename T>
std::map<std::string, Index> param_counts_by_module(const ParamStore<T>& store) {
    std::map<std::string, Index> counts;
    for (Index i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(i);
        if (!e.trainable) continue;
        std::string top = e.name.substr(0, e.name.find('.'));
        if (top == "blocks") {
            // group by blocks.<i>.<stream>
            std::size_t p1 = e.name.find('.', 7);
            std::size_t p2 = e.name.find('.', p1 + 1);
            top = e.name.substr(0, p2);
        }
        counts[top] += e.value.numel();
    }
    return counts;
}

}  // namespace hgm
