#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "hgm/ndarray.hpp"

#include "json.hpp"

namespace hgm {

/// Vertex/hyperedge incidence structure over skeleton joints. H is 0/1 with
/// every vertex covered and every hyperedge nonempty.
struct Hypergraph {
    Index num_vertices = 0;
    std::vector<std::vector<Index>> edges;  // vertex lists per hyperedge

    Index num_edges() const { return static_cast<Index>(edges.size()); }

    void validate() const {
        if (edges.empty()) throw ValueError("hypergraph: no hyperedges");
        std::vector<Index> deg(static_cast<std::size_t>(num_vertices), 0);
        for (std::size_t e = 0; e < edges.size(); ++e) {
            if (edges[e].empty())
                throw ValueError("hypergraph: hyperedge " + std::to_string(e) + " is empty");
            for (Index v : edges[e]) {
                if (v < 0 || v >= num_vertices)
                    throw ValueError("hypergraph: vertex " + std::to_string(v) + " out of range");
                ++deg[static_cast<std::size_t>(v)];
            }
        }
        for (Index v = 0; v < num_vertices; ++v)
            if (deg[static_cast<std::size_t>(v)] == 0)
                throw ValueError("hypergraph: vertex " + std::to_string(v) +
                                 " belongs to no hyperedge");
    }

    template <typename T>
    NdArray<T> incidence() const {
        NdArray<T> h({num_vertices, num_edges()});
        for (Index e = 0; e < num_edges(); ++e)
            for (Index v : edges[static_cast<std::size_t>(e)]) h[v * num_edges() + e] = T(1);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Symmetric-normalized graph kernel G = Dt^-1/2 (A + I) Dt^-1/2 with degrees
/// from row sums of A + I. Adding the self-loop keeps every degree >= 1.
template <typename T>
NdArray<T> graph_kernel(const NdArray<T>& adjacency) {
    if (adjacency.ndim() != 2 || adjacency.dim(0) != adjacency.dim(1))
        throw ShapeError("graph_kernel: square adjacency required, got " +
                         shape_str(adjacency.shape()));
    const Index n = adjacency.dim(0);
    NdArray<T> at(adjacency);
    for (Index i = 0; i < n; ++i) at[i * n + i] += T(1);
    std::vector<T> dinv(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        T s = T(0);
        for (Index j = 0; j < n; ++j) {
            if (at[i * n + j] < T(0))
                throw ValueError("graph_kernel: adjacency entries must be nonnegative");
            s += at[i * n + j];
        }
        dinv[static_cast<std::size_t>(i)] = T(1) / std::sqrt(s);
    }
    NdArray<T> g({n, n});
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            g[i * n + j] = dinv[static_cast<std::size_t>(i)] * at[i * n + j] * dinv[static_cast<std::size_t>(j)];
    return g;
}

/// Factor pair for the hypergraph kernel: with P = Dv^-1/2 H and
/// Q = De^-1 H^T Dv^-1/2, the kernel is P diag(M) Q. Splitting it this way
/// keeps the learnable hyperedge weights M a plain vector on the tape.
template <typename T>
struct HypergraphFactors {
    NdArray<T> p;  // [J, E]
    NdArray<T> q;  // [E, J]
};

template <typename T>
HypergraphFactors<T> hypergraph_factors(const Hypergraph& hg) {
    hg.validate();
    const Index j = hg.num_vertices, e = hg.num_edges();
    NdArray<T> h = hg.incidence<T>();
    std::vector<T> dv(static_cast<std::size_t>(j), T(0)), de(static_cast<std::size_t>(e), T(0));
    for (Index v = 0; v < j; ++v)
        for (Index k = 0; k < e; ++k) dv[static_cast<std::size_t>(v)] += h[v * e + k];
    for (Index k = 0; k < e; ++k)
        for (Index v = 0; v < j; ++v) de[static_cast<std::size_t>(k)] += h[v * e + k];
    HypergraphFactors<T> f;
    f.p = NdArray<T>({j, e});
    f.q = NdArray<T>({e, j});
    for (Index v = 0; v < j; ++v)
        for (Index k = 0; k < e; ++k) {
            T rs = T(1) / std::sqrt(dv[static_cast<std::size_t>(v)]);
            f.p[v * e + k] = rs * h[v * e + k];
            f.q[k * j + v] = h[v * e + k] / de[static_cast<std::size_t>(k)] * rs;
        }
    return f;
}

/// Full J x J hypergraph kernel Dv^-1/2 H M De^-1 H^T Dv^-1/2 for a given
/// diagonal weight vector m (one entry per hyperedge).
template <typename T>
NdArray<T> hypergraph_kernel(const Hypergraph& hg, const NdArray<T>& m) {
    if (m.numel() != hg.num_edges())
        throw ShapeError("hypergraph_kernel: weight count " + std::to_string(m.numel()) +
                         " != hyperedge count " + std::to_string(hg.num_edges()));
    HypergraphFactors<T> f = hypergraph_factors<T>(hg);
    const Index j = hg.num_vertices, e = hg.num_edges();
    NdArray<T> k({j, j});
    for (Index a = 0; a < j; ++a)
        for (Index b = 0; b < j; ++b) {
            T acc = T(0);
            for (Index c = 0; c < e; ++c) acc += f.p[a * e + c] * m[c] * f.q[c * j + b];
            k[a * j + b] = acc;
        }
    return k;
}

template <typename T>
std::vector<T> vertex_degrees(const Hypergraph& hg) {
    NdArray<T> h = hg.incidence<T>();
    std::vector<T> dv(static_cast<std::size_t>(hg.num_vertices), T(0));
    for (Index v = 0; v < hg.num_vertices; ++v)
        for (Index k = 0; k < hg.num_edges(); ++k) dv[static_cast<std::size_t>(v)] += h[v * hg.num_edges() + k];
    return dv;
}

// ---------------------------------------------------------------------------
// 17-joint skeleton. Index layout: torso chain first, then right leg, left
// leg, right arm, left arm triples.
// ---------------------------------------------------------------------------

struct SkeletonSpec {
    std::vector<std::string> joint_names;
    std::vector<Index> parents;                    // -1 for the root
    std::vector<std::pair<Index, Index>> lr_pairs; // (right, left) mirrored joints
    Hypergraph body;                               // 5 hyperedges: torso + 4 limbs
    Hypergraph part;                               // 10 hyperedges refining the body edges
    Index root = 0;

    Index num_joints() const { return static_cast<Index>(joint_names.size()); }

    /// Body-scale edges must be exactly the unions of their part-scale
    /// refinements, and each scale must cover every joint.
    void validate() const {
        body.validate();
        part.validate();
        if (body.num_edges() != 5) throw ValueError("skeleton: expected 5 body-scale hyperedges");
        if (part.num_edges() != 10) throw ValueError("skeleton: expected 10 part-scale hyperedges");
        for (const auto& pe : part.edges) {
            int containing = 0;
            for (const auto& be : body.edges) {
                std::set<Index> bs(be.begin(), be.end());
                bool subset = true;
                for (Index v : pe)
                    if (!bs.count(v)) subset = false;
                if (subset) ++containing;
            }
            if (containing != 1)
                throw ValueError("skeleton: each part-scale hyperedge must refine exactly one "
                                 "body-scale hyperedge");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["joints"] = joint_names;
        j["parents"] = parents;
        nlohmann::json pairs = nlohmann::json::array();
        for (auto [r, l] : lr_pairs) pairs.push_back({r, l});
        j["lr_pairs"] = pairs;
        j["body_hyperedges"] = body.edges;
        j["part_hyperedges"] = part.edges;
        j["root"] = root;
        return j;
    }

    static SkeletonSpec from_json(const nlohmann::json& j) {
        SkeletonSpec s;
        s.joint_names = j.at("joints").get<std::vector<std::string>>();
        s.parents = j.at("parents").get<std::vector<Index>>();
        for (const auto& p : j.at("lr_pairs")) s.lr_pairs.emplace_back(p[0].get<Index>(), p[1].get<Index>());
        s.body.num_vertices = s.num_joints();
        s.body.edges = j.at("body_hyperedges").get<std::vector<std::vector<Index>>>();
        s.part.num_vertices = s.num_joints();
        s.part.edges = j.at("part_hyperedges").get<std::vector<std::vector<Index>>>();
        s.root = j.at("root").get<Index>();
        s.validate();
        return s;
    }
};

enum Joint : Index {
    kHip = 0,
    kSpine = 1,
    kThorax = 2,
    kNeck = 3,
    kHead = 4,
    kRightHip = 5,
    kRightKnee = 6,
    kRightFoot = 7,
    kLeftHip = 8,
    kLeftKnee = 9,
    kLeftFoot = 10,
    kRightShoulder = 11,
    kRightElbow = 12,
    kRightWrist = 13,
    kLeftShoulder = 14,
    kLeftElbow = 15,
    kLeftWrist = 16,
};

inline SkeletonSpec human17_skeleton() {
    SkeletonSpec s;
    s.joint_names = {"hip",        "spine",      "thorax",        "neck",          "head",
                     "right_hip",  "right_knee", "right_foot",    "left_hip",      "left_knee",
                     "left_foot",  "right_shoulder", "right_elbow", "right_wrist",
                     "left_shoulder", "left_elbow", "left_wrist"};
    s.parents = {-1, kHip, kSpine, kThorax, kNeck,
                 kHip, kRightHip, kRightKnee,
                 kHip, kLeftHip, kLeftKnee,
                 kThorax, kRightShoulder, kRightElbow,
                 kThorax, kLeftShoulder, kLeftElbow};
    s.lr_pairs = {{kRightHip, kLeftHip},       {kRightKnee, kLeftKnee},
                  {kRightFoot, kLeftFoot},     {kRightShoulder, kLeftShoulder},
                  {kRightElbow, kLeftElbow},   {kRightWrist, kLeftWrist}};
    s.body.num_vertices = 17;
    s.body.edges = {
        {kHip, kSpine, kThorax, kNeck, kHead},
        {kRightHip, kRightKnee, kRightFoot},
        {kLeftHip, kLeftKnee, kLeftFoot},
        {kRightShoulder, kRightElbow, kRightWrist},
        {kLeftShoulder, kLeftElbow, kLeftWrist},
    };
    s.part.num_vertices = 17;
    s.part.edges = {
        {kHip, kSpine, kThorax, kNeck},
        {kHead},
        {kRightHip, kRightKnee},
        {kRightFoot},
        {kLeftHip, kLeftKnee},
        {kLeftFoot},
        {kRightShoulder, kRightElbow},
        {kRightWrist},
        {kLeftShoulder, kLeftElbow},
        {kLeftWrist},
    };
    s.root = kHip;
    s.validate();
    return s;
}

}  // namespace hgm
