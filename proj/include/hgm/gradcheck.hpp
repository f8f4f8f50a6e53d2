#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hgm/model.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/rng.hpp"
#include "hgm/ssm.hpp"
#include "hgm/tape.hpp"

namespace hgm {

/// Central finite-difference check of reverse-mode gradients, 64-bit only.
/// `build` must construct the same computation from fresh leaves each call and
/// return the scalar loss node.
struct GradCheckReport {
    double max_err = 0;            // worst |analytic - numeric| / max(|a|, |n|, floor)
    Index checked = 0;
    Index failures = 0;
    double worst_analytic = 0;
    double worst_numeric = 0;
    std::string worst_coord;
};

using BuildFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline GradCheckReport grad_check(const BuildFn& build, std::vector<NdArray<double>> inputs,
                                  Index coords_per_input = 100, double h = 1e-5,
                                  double tol = 1e-4, std::uint64_t seed = 0) {
    GradCheckReport rep;
    // analytic gradients once
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (auto& a : inputs) leaves.push_back(tape.leaf(a));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<NdArray<double>> analytic;
    analytic.reserve(leaves.size());
    for (Var v : leaves) analytic.push_back(tape.grad(v));

    auto eval_loss = [&](const std::vector<NdArray<double>>& vals) {
        Tape<double> t2;
        std::vector<Var> l2;
        l2.reserve(vals.size());
        for (const auto& a : vals) l2.push_back(t2.leaf(a, false));
        return t2.val(build(t2, l2))[0];
    };

    Rng rng(seed ^ 0x9d2c5680ULL);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Index n = inputs[i].numel();
        const Index m = std::min(coords_per_input, n);
        std::vector<Index> picks;
        if (m == n) {
            picks.resize(static_cast<std::size_t>(n));
            for (Index k = 0; k < n; ++k) picks[static_cast<std::size_t>(k)] = k;
        } else {
            auto perm = rng.randperm(n);
            picks.assign(perm.begin(), perm.begin() + m);
        }
        for (Index k : picks) {
            const double orig = inputs[i][k];
            inputs[i][k] = orig + h;
            const double fp = eval_loss(inputs);
            inputs[i][k] = orig - h;
            const double fm = eval_loss(inputs);
            inputs[i][k] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i][k];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
            ++rep.checked;
            if (err > rep.max_err) {
                rep.max_err = err;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
                rep.worst_coord = "input " + std::to_string(i) + "[" + std::to_string(k) + "]";
            }
            if (err > tol) ++rep.failures;
        }
    }
    return rep;
}

/// Same check, but with a total coordinate budget sampled across all inputs
/// (weighted by size). Suits whole-model checks where per-tensor exhaustion
/// would be wasteful.
inline GradCheckReport grad_check_sampled(const BuildFn& build,
                                          std::vector<NdArray<double>> inputs, Index total_coords,
                                          double h = 1e-5, double tol = 1e-4,
                                          std::uint64_t seed = 0) {
    GradCheckReport rep;
    Tape<double> tape;
    std::vector<Var> leaves;
    for (auto& a : inputs) leaves.push_back(tape.leaf(a));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<NdArray<double>> analytic;
    for (Var v : leaves) analytic.push_back(tape.grad(v));

    auto eval_loss = [&](const std::vector<NdArray<double>>& vals) {
        Tape<double> t2;
        std::vector<Var> l2;
        for (const auto& a : vals) l2.push_back(t2.leaf(a, false));
        return t2.val(build(t2, l2))[0];
    };

    Index total = 0;
    for (const auto& a : inputs) total += a.numel();
    Rng rng(seed ^ 0x51ed2701ULL);
    for (Index c = 0; c < total_coords; ++c) {
        Index flat = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(total)));
        std::size_t i = 0;
        while (flat >= inputs[i].numel()) {
            flat -= inputs[i].numel();
            ++i;
        }
        const double orig = inputs[i][flat];
        inputs[i][flat] = orig + h;
        const double fp = eval_loss(inputs);
        inputs[i][flat] = orig - h;
        const double fm = eval_loss(inputs);
        inputs[i][flat] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i][flat];
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
        ++rep.checked;
        if (err > rep.max_err) {
            rep.max_err = err;
            rep.worst_analytic = a;
            rep.worst_numeric = numeric;
            rep.worst_coord = "input " + std::to_string(i) + "[" + std::to_string(flat) + "]";
        }
        if (err > tol) ++rep.failures;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Named suite: one finite-difference check per differentiable operation plus
// the composed model. Shared by the gradcheck CLI command and the acceptance
// run.
// ---------------------------------------------------------------------------

struct NamedGradCheck {
    std::string name;
    GradCheckReport report;
};

inline std::vector<NamedGradCheck> gradcheck_suite(std::uint64_t seed = 0,
                                                   Index coords_per_op = 100) {
    std::vector<NamedGradCheck> out;
    Rng gen(seed ^ 0xabcdef12ULL);
    auto randn = [&](Shape shape, double std = 1.0, double mean = 0.0) {
        NdArray<double> a(std::move(shape));
        gen.fill_normal(a, mean, std);
        return a;
    };
    auto away_from_zero = [&](Shape shape) {
        NdArray<double> a(std::move(shape));
        for (Index i = 0; i < a.numel(); ++i) {
            double v = gen.uniform(0.2, 1.0);
            a[i] = gen.bernoulli(0.5) ? v : -v;
        }
        return a;
    };
    auto run = [&](const std::string& name, const BuildFn& fn,
                   std::vector<NdArray<double>> inputs) {
        out.push_back({name, grad_check(fn, std::move(inputs), coords_per_op, 1e-5, 1e-4, seed)});
    };
    auto sq_sum = [](Tape<double>& t, Var y) { return sum_all(t, mul(t, y, y)); };

    run("add", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, add(t, in[0], in[1]));
    }, {randn({4, 5}), randn({4, 5})});
    run("sub", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, sub(t, in[0], in[1]));
    }, {randn({4, 5}), randn({4, 5})});
    run("hadamard", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, mul(t, in[0], in[1]));
    }, {randn({4, 5}), randn({4, 5})});
    run("scale", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, scale(t, in[0], -2.3));
    }, {randn({4, 5})});
    run("matmul", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, matmul(t, in[0], in[1]));
    }, {randn({2, 3, 4}), randn({4, 5})});
    run("relu", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, relu(t, in[0]));
    }, {away_from_zero({5, 5})});
    run("gelu", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, gelu(t, in[0]));
    }, {randn({5, 5})});
    run("softplus", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, softplus(t, in[0]));
    }, {randn({5, 5})});
    run("exp", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, exp(t, in[0]));
    }, {randn({5, 5}, 0.5)});
    run("softmax", [&](Tape<double>& t, const std::vector<Var>& in) {
        Var y = softmax(t, in[0], 1);
        return sum_all(t, mul(t, y, mul(t, y, y)));
    }, {randn({4, 6})});
    run("layernorm", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, layernorm(t, in[0], in[1], in[2]));
    }, {randn({5, 6}), randn({6}, 0.5, 1.0), randn({6}, 0.5)});
    {
        NdArray<double> rm = randn({4}, 0.3), rv = randn({4}, 0.1, 1.5);
        run("batchnorm_train", [rm, rv](Tape<double>& t, const std::vector<Var>& in) {
            Var y = batchnorm(t, in[0], in[1], in[2], rm, rv, true);
            return sum_all(t, mul(t, y, y));
        }, {randn({7, 4}), randn({4}, 0.5, 1.0), randn({4}, 0.5)});
        run("batchnorm_eval", [rm, rv](Tape<double>& t, const std::vector<Var>& in) {
            Var y = batchnorm(t, in[0], in[1], in[2], rm, rv, false);
            return sum_all(t, mul(t, y, y));
        }, {randn({7, 4}), randn({4}, 0.5, 1.0), randn({4}, 0.5)});
    }
    run("flip", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, flip(t, in[0], 1));
    }, {randn({3, 4, 2})});
    run("gather", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, gather(t, in[0], Index(1), {3, 0, 3, 1}));
    }, {randn({3, 4, 2})});
    run("gather_batched", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, gather_batched(t, in[0], Index(2), {{2, 0, 1}, {1, 1, 2}}));
    }, {randn({2, 2, 3, 2})});
    run("concat", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, concat(t, in[0], in[1], Index(1)));
    }, {randn({3, 2}), randn({3, 4})});
    run("slice", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, slice(t, in[0], Index(1), 1, 2));
    }, {randn({3, 5})});
    run("transpose", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, transpose(t, in[0], {2, 0, 1}));
    }, {randn({3, 4, 2})});
    run("reshape", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, reshape(t, in[0], {6, 4}));
    }, {randn({3, 4, 2})});
    run("add_bias", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, add_bias(t, in[0], in[1]));
    }, {randn({3, 2, 4}), randn({4})});
    run("mul_bias", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, mul_bias(t, in[0], in[1]));
    }, {randn({3, 2, 4}), randn({4}, 0.5, 1.0)});
    run("scale_last", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, scale_last(t, in[0], in[1]));
    }, {randn({3, 2, 4}), randn({3, 2, 1})});
    run("sum_all", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sum_all(t, mul(t, in[0], in[0]));
    }, {randn({4, 4})});
    run("norm_last", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sum_all(t, norm_last(t, in[0]));
    }, {away_from_zero({4, 5, 3})});
    run("rfft_conv", [&](Tape<double>& t, const std::vector<Var>& in) {
        return sq_sum(t, rfft_conv(t, in[0], in[1]));
    }, {randn({12}), randn({12})});
    {
        NdArray<double> a = randn({3, 4}, 0.4, -0.8);
        for (Index i = 0; i < a.numel(); ++i) a[i] = -std::abs(a[i]) - 0.05;
        NdArray<double> delta = randn({2, 5, 3}, 0.2, 0.6);
        for (Index i = 0; i < delta.numel(); ++i) delta[i] = std::abs(delta[i]) + 0.05;
        run("selective_scan", [](Tape<double>& t, const std::vector<Var>& in) {
            Var y = selective_scan(t, in[0], in[1], in[2], in[3], in[4]);
            return sum_all(t, mul(t, y, y));
        }, {randn({2, 5, 3}), a, randn({2, 5, 4}), randn({2, 5, 4}), delta});
    }
    run("pose_loss", [&](Tape<double>& t, const std::vector<Var>& in) {
        return pose_loss(t, in[0], in[1], 2.0);
    }, {randn({2, 3, 4, 3}), randn({2, 3, 4, 3})});
    return out;
}

/// Full-model finite-difference check at a tiny reference size (2 blocks, 16
/// channels, 4 frames, 17 joints), with the coordinate budget sampled across
/// every parameter.
inline NamedGradCheck gradcheck_full_model(std::uint64_t seed = 0, Index total_coords = 100) {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.channels = 16;
    cfg.frames = 4;
    cfg.expand = 2;
    cfg.state_dim = 16;
    cfg.head_dim = 32;
    cfg.mlp_ratio = 2;
    cfg.seed = seed;
    SkeletonSpec skel = human17_skeleton();
    ParamStore<double> store;
    Rng rng(cfg.seed);
    ModelIds<double> ids = register_model(store, cfg, skel, rng);
    Rng data_rng(seed ^ 0x7070ULL);
    NdArray<double> input({1, cfg.frames, 17, 2});
    data_rng.fill_normal(input, 0, 0.5);
    NdArray<double> target({1, cfg.frames, 17, 3});
    data_rng.fill_normal(target, 0, 0.5);

    std::vector<NdArray<double>> values;
    for (Index i = 0; i < store.size(); ++i) values.push_back(store.entry(i).value);
    auto build = [&, cfg](Tape<double>& t, const std::vector<Var>& in) {
        ParamStore<double> local;
        Rng r2(cfg.seed);
        ModelIds<double> lids = register_model(local, cfg, skel, r2);
        TapeBind<double> bind(t, local);
        for (Index i = 0; i < local.size(); ++i) bind.preset(i, in[static_cast<std::size_t>(i)]);
        ShuffleCtx ctx;
        Var pred = model_forward(bind, lids, cfg, t.constant(input), ctx, false);
        return pose_loss(t, pred, t.constant(target), 2.0);
    };
    return {"full_model_tiny", grad_check_sampled(build, values, total_coords, 1e-5, 1e-4, seed)};
}

}  // namespace hgm
