#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hgm/hypergraph.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/optim.hpp"
#include "hgm/rng.hpp"

#include "json.hpp"

namespace hgm {

template <typename T>
struct PoseSequence {
    NdArray<T> p2d;  // [T, J, 2] normalized image coordinates; empty if absent
    NdArray<T> p3d;  // [T, J, 3] millimeters; empty if absent
};

template <typename T>
struct PoseDataset {
    SkeletonSpec skeleton;
    std::vector<PoseSequence<T>> sequences;
    Index window_stride = 0;  // stride used when windowed; 0 = native sequences
    std::string split = "train";

    Index num_sequences() const { return static_cast<Index>(sequences.size()); }
};

// ---------------------------------------------------------------------------
// Pinhole projection. Camera looks down +z; coordinates are normalized by the
// focal term directly, so outputs land in roughly [-1, 1].
// ---------------------------------------------------------------------------

struct Camera {
    double focal = 2.0;
    double cx = 0.0;
    double cy = 0.0;
};

template <typename T>
NdArray<T> project_2d(const NdArray<T>& p3d, const Camera& cam) {
    if (p3d.ndim() != 3 || p3d.dim(2) != 3)
        throw ShapeError("project_2d: input must be [frames, joints, 3]");
    const Index f = p3d.dim(0), j = p3d.dim(1);
    NdArray<T> out({f, j, 2});
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q) {
            const double z = double(p3d[(t * j + q) * 3 + 2]);
            if (z <= 0)
                throw ValueError("project_2d: joint behind camera (frame " + std::to_string(t) +
                                 ", joint " + std::to_string(q) + ", z=" + std::to_string(z) + ")");
            out[(t * j + q) * 2 + 0] =
                static_cast<T>(cam.focal * double(p3d[(t * j + q) * 3 + 0]) / z + cam.cx);
            out[(t * j + q) * 2 + 1] =
                static_cast<T>(cam.focal * double(p3d[(t * j + q) * 3 + 1]) / z + cam.cy);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic kinematic-chain walker. Joint positions come from fixed-length
// segments with sinusoidal joint angles, so limb lengths are exactly constant
// and every draw is a pure function of the seed.
// ---------------------------------------------------------------------------

namespace detail {

struct WalkerParams {
    double freq, phase, yaw;
    double a_hip, a_knee, a_arm, a_elbow;
    double sway_mm, bob_mm, lean;
    double x0, y0, z0;
};

inline WalkerParams draw_walker(Rng& rng) {
    WalkerParams w;
    w.freq = rng.uniform(0.7, 1.4);
    w.phase = rng.uniform(0.0, 2.0 * M_PI);
    w.yaw = rng.uniform(-0.6, 0.6);
    w.a_hip = rng.uniform(0.3, 0.6);
    w.a_knee = rng.uniform(0.4, 0.8);
    w.a_arm = rng.uniform(0.25, 0.55);
    w.a_elbow = rng.uniform(0.15, 0.4);
    w.sway_mm = rng.uniform(10.0, 30.0);
    w.bob_mm = rng.uniform(10.0, 30.0);
    w.lean = rng.uniform(0.02, 0.08);
    w.x0 = rng.uniform(-300.0, 300.0);
    w.y0 = rng.uniform(-150.0, 150.0);
    w.z0 = rng.uniform(3600.0, 4400.0);
    return w;
}

struct Vec3 {
    double x, y, z;
};
inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline Vec3 normalize(Vec3 a) {
    double n = std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z);
    return {a.x / n, a.y / n, a.z / n};
}
inline Vec3 yaw_rot(double psi, Vec3 v) {
    double c = std::cos(psi), s = std::sin(psi);
    return {c * v.x + s * v.z, v.y, -s * v.x + c * v.z};
}

}  // namespace detail

template <typename T>
NdArray<T> generate_walker_sequence(Rng& rng, Index frames, const SkeletonSpec& skel) {
    using detail::Vec3;
    const detail::WalkerParams w = detail::draw_walker(rng);
    const double dt = 0.02;  // 50 fps
    // segment lengths, millimeters
    const double len_spine = 230, len_thorax = 240, len_neck = 115, len_head = 115;
    const double len_thigh = 450, len_shank = 440;
    const double len_upper = 280, len_fore = 250;
    const Vec3 hip_off_r{130, -40, 0}, hip_off_l{-130, -40, 0};
    const Vec3 sho_off_r{170, -25, 0}, sho_off_l{-170, -25, 0};

    const Index j = skel.num_joints();
    NdArray<T> out({frames, j, 3});
    for (Index f = 0; f < frames; ++f) {
        const double tsec = double(f) * dt;
        const double ph = 2.0 * M_PI * w.freq * tsec + w.phase;
        const double yaw = w.yaw + 0.06 * std::sin(0.5 * ph);
        Vec3 pos[17];
        Vec3 root{w.x0 + w.sway_mm * std::sin(ph), w.y0 + w.bob_mm * std::sin(2.0 * ph),
                  w.z0 + 0.4 * w.sway_mm * std::cos(ph)};
        pos[kHip] = root;
        auto dir = [&](Vec3 v) { return detail::yaw_rot(yaw, detail::normalize(v)); };
        pos[kSpine] = pos[kHip] + len_spine * dir({w.lean * std::sin(ph), 1, w.lean * std::sin(ph + 1.1)});
        pos[kThorax] = pos[kSpine] + len_thorax * dir({w.lean * std::sin(ph + 0.4), 1, w.lean * std::sin(ph + 1.7)});
        pos[kNeck] = pos[kThorax] + len_neck * dir({0.5 * w.lean * std::sin(ph + 0.9), 1, 0.5 * w.lean * std::cos(ph)});
        pos[kHead] = pos[kNeck] + len_head * dir({0.3 * w.lean * std::sin(ph + 1.3), 1, 0.3 * w.lean * std::sin(ph + 2.0)});

        auto leg = [&](double phase_leg, const Vec3& off, Index hip_j, Index knee_j, Index foot_j) {
            pos[hip_j] = pos[kHip] + detail::yaw_rot(yaw, off);
            const double swing = w.a_hip * std::sin(phase_leg);
            const double bend = w.a_knee * (0.5 + 0.5 * std::sin(phase_leg - 0.9));
            pos[knee_j] = pos[hip_j] + len_thigh * dir({0, -std::cos(swing), std::sin(swing)});
            const double shank_ang = swing - bend;
            pos[foot_j] = pos[knee_j] + len_shank * dir({0, -std::cos(shank_ang), std::sin(shank_ang)});
        };
        leg(ph, hip_off_r, kRightHip, kRightKnee, kRightFoot);
        leg(ph + M_PI, hip_off_l, kLeftHip, kLeftKnee, kLeftFoot);

        auto arm = [&](double phase_arm, const Vec3& off, double side, Index sho_j, Index elb_j,
                       Index wri_j) {
            pos[sho_j] = pos[kThorax] + detail::yaw_rot(yaw, off);
            const double swing = w.a_arm * std::sin(phase_arm);
            const double bend = w.a_elbow * (0.5 + 0.5 * std::sin(phase_arm + 0.7));
            pos[elb_j] = pos[sho_j] + len_upper * dir({0.12 * side, -std::cos(swing), std::sin(swing)});
            pos[wri_j] = pos[elb_j] + len_fore * dir({0.08 * side, -std::cos(swing + bend), std::sin(swing + bend)});
        };
        arm(ph + M_PI, sho_off_r, 1.0, kRightShoulder, kRightElbow, kRightWrist);
        arm(ph, sho_off_l, -1.0, kLeftShoulder, kLeftElbow, kLeftWrist);

        for (Index q = 0; q < j; ++q) {
            out[(f * j + q) * 3 + 0] = static_cast<T>(pos[q].x);
            out[(f * j + q) * 3 + 1] = static_cast<T>(pos[q].y);
            out[(f * j + q) * 3 + 2] = static_cast<T>(pos[q].z);
        }
    }
    return out;
}

template <typename T>
PoseDataset<T> generate_synthetic(std::uint64_t seed, Index num_sequences, Index frames,
                                  const Camera& cam = Camera{}) {
    if (frames < 2) throw ValueError("generate_synthetic: need at least 2 frames");
    PoseDataset<T> ds;
    ds.skeleton = human17_skeleton();
    for (Index s = 0; s < num_sequences; ++s) {
        Rng rng = Rng::derive({seed, 0x5eedULL, static_cast<std::uint64_t>(s)});
        PoseSequence<T> seq;
        seq.p3d = generate_walker_sequence<T>(rng, frames, ds.skeleton);
        seq.p2d = project_2d(seq.p3d, cam);
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Detector-style corruption: Gaussian jitter plus uniform joint replacement.
// ---------------------------------------------------------------------------

template <typename T>
NdArray<T> add_noise(const NdArray<T>& p2d, double sigma, double outlier_rate,
                     std::uint64_t seed) {
    if (sigma < 0 || outlier_rate < 0 || outlier_rate > 1)
        throw ValueError("add_noise: sigma must be >= 0 and outlier_rate in [0, 1]");
    if (p2d.ndim() != 3 || p2d.dim(2) != 2)
        throw ShapeError("add_noise: input must be [frames, joints, 2]");
    Rng rng = Rng::derive({seed, 0x4015eULL, 7});
    NdArray<T> out(p2d);
    const Index f = p2d.dim(0), j = p2d.dim(1);
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q) {
            if (rng.uniform() < outlier_rate) {
                out[(t * j + q) * 2 + 0] = static_cast<T>(rng.uniform(-1.0, 1.0));
                out[(t * j + q) * 2 + 1] = static_cast<T>(rng.uniform(-1.0, 1.0));
            } else if (sigma > 0) {
                out[(t * j + q) * 2 + 0] += static_cast<T>(sigma * rng.normal());
                out[(t * j + q) * 2 + 1] += static_cast<T>(sigma * rng.normal());
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Windowing: length-T clips covering every frame at least once. The last
// window is pulled back to end on the final frame.
// ---------------------------------------------------------------------------

template <typename T>
PoseDataset<T> window_dataset(const PoseDataset<T>& ds, Index clip_len, Index stride) {
    if (stride < 1 || stride > clip_len)
        throw ValueError("window_dataset: stride must be in [1, clip_len]");
    PoseDataset<T> out;
    out.skeleton = ds.skeleton;
    out.split = ds.split;
    out.window_stride = stride;
    for (const auto& seq : ds.sequences) {
        const Index f = seq.p3d.empty() ? seq.p2d.dim(0) : seq.p3d.dim(0);
        if (f < clip_len)
            throw ValueError("window_dataset: sequence has " + std::to_string(f) +
                             " frames, need >= " + std::to_string(clip_len));
        std::vector<Index> starts;
        for (Index s = 0; s + clip_len <= f; s += stride) starts.push_back(s);
        if (starts.empty() || starts.back() + clip_len < f) starts.push_back(f - clip_len);
        for (Index s : starts) {
            PoseSequence<T> clip;
            if (!seq.p2d.empty()) clip.p2d = slice(seq.p2d, Index(0), s, clip_len);
            if (!seq.p3d.empty()) clip.p3d = slice(seq.p3d, Index(0), s, clip_len);
            out.sequences.push_back(std::move(clip));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2-D input normalization: per-frame root centering, per-clip bounding-box
// scale. Both are returned so the transform inverts exactly.
// ---------------------------------------------------------------------------

template <typename T>
struct Normalized2d {
    NdArray<T> coords;   // [T, J, 2]
    NdArray<T> root_xy;  // [T, 2]
    T scale;
};

template <typename T>
Normalized2d<T> normalize_2d(const NdArray<T>& p2d, Index root = 0) {
    if (p2d.ndim() != 3 || p2d.dim(2) != 2)
        throw ShapeError("normalize_2d: input must be [frames, joints, 2]");
    const Index f = p2d.dim(0), j = p2d.dim(1);
    Normalized2d<T> r;
    r.coords = NdArray<T>({f, j, 2});
    r.root_xy = NdArray<T>({f, 2});
    T extent = T(0);
    for (Index t = 0; t < f; ++t) {
        r.root_xy[t * 2 + 0] = p2d[(t * j + root) * 2 + 0];
        r.root_xy[t * 2 + 1] = p2d[(t * j + root) * 2 + 1];
        for (Index q = 0; q < j; ++q)
            for (Index c = 0; c < 2; ++c) {
                T v = p2d[(t * j + q) * 2 + c] - r.root_xy[t * 2 + c];
                r.coords[(t * j + q) * 2 + c] = v;
                extent = std::max(extent, std::abs(v));
            }
    }
    r.scale = std::max(extent, T(1e-6));
    for (Index i = 0; i < r.coords.numel(); ++i) r.coords[i] /= r.scale;
    return r;
}

template <typename T>
NdArray<T> denormalize_2d(const Normalized2d<T>& n) {
    const Index f = n.coords.dim(0), j = n.coords.dim(1);
    NdArray<T> out({f, j, 2});
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q)
            for (Index c = 0; c < 2; ++c)
                out[(t * j + q) * 2 + c] = n.coords[(t * j + q) * 2 + c] * n.scale + n.root_xy[t * 2 + c];
    return out;
}

// ---------------------------------------------------------------------------
// HGPOSE1 container: 16-byte magic+version block, JSON header, then raw
// little-endian float32 frame-major data (all 2-D blocks, then all 3-D).
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kPoseMagic[8] = {'H', 'G', 'P', 'O', 'S', 'E', '1', '\0'};
constexpr std::uint32_t kPoseVersion = 1;
}  // namespace detail

template <typename T>
void save_dataset(const PoseDataset<T>& ds, std::ostream& os) {
    bool has_2d = false, has_3d = false;
    std::vector<Index> frames;
    for (const auto& s : ds.sequences) {
        if (!s.p2d.empty()) has_2d = true;
        if (!s.p3d.empty()) has_3d = true;
        frames.push_back(s.p3d.empty() ? s.p2d.dim(0) : s.p3d.dim(0));
    }
    for (const auto& s : ds.sequences) {
        if (has_2d == s.p2d.empty() || has_3d == s.p3d.empty())
            throw ValueError("save_dataset: sequences must uniformly carry the same blocks");
        if (!s.p2d.empty() && !s.p3d.empty() && s.p2d.dim(0) != s.p3d.dim(0))
            throw ValueError("save_dataset: 2D and 3D frame counts differ within a sequence");
    }
    nlohmann::json header{{"skeleton", ds.skeleton.to_json()},
                          {"num_sequences", ds.num_sequences()},
                          {"frames", frames},
                          {"joints", ds.skeleton.num_joints()},
                          {"dtype", "f32"},
                          {"units", {{"p2d", "normalized"}, {"p3d", "mm"}}},
                          {"stride", ds.window_stride},
                          {"split", ds.split},
                          {"has_2d", has_2d},
                          {"has_3d", has_3d}};
    std::string hjson = header.dump();
    os.write(detail::kPoseMagic, 8);
    detail::write_u32(os, detail::kPoseVersion);
    detail::write_u32(os, 0u);  // reserved
    detail::write_u32(os, static_cast<std::uint32_t>(hjson.size()));
    os.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
    std::vector<float> buf;
    auto write_block = [&](const NdArray<T>& a) {
        buf.resize(static_cast<std::size_t>(a.numel()));
        for (Index i = 0; i < a.numel(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(a[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    };
    if (has_2d)
        for (const auto& s : ds.sequences) write_block(s.p2d);
    if (has_3d)
        for (const auto& s : ds.sequences) write_block(s.p3d);
    if (!os) throw ValueError("save_dataset: write failed");
}

template <typename T>
void save_dataset(const PoseDataset<T>& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open for writing: " + path);
    save_dataset(ds, os);
}

template <typename T>
PoseDataset<T> load_dataset(std::istream& is) {
    detail::ByteReader r(is);
    char magic[8];
    r.read(magic, 8, "magic");
    if (!std::equal(magic, magic + 8, detail::kPoseMagic))
        throw ParseError("bad pose file magic", 0);
    std::uint32_t version = r.u32("version");
    if (version != detail::kPoseVersion)
        throw ParseError("unsupported pose file version " + std::to_string(version), 8);
    r.u32("reserved");
    std::uint32_t hlen = r.u32("header length");
    std::string hjson = r.str(hlen, "header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hjson);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad header JSON: ") + e.what(), 16);
    }
    PoseDataset<T> ds;
    try {
        ds.skeleton = SkeletonSpec::from_json(header.at("skeleton"));
        ds.window_stride = header.value("stride", 0);
        ds.split = header.value("split", "train");
        const Index j = header.at("joints").get<Index>();
        if (j != ds.skeleton.num_joints())
            throw ParseError("joint count disagrees with skeleton", r.offset);
        auto frames = header.at("frames").get<std::vector<Index>>();
        const bool has_2d = header.at("has_2d").get<bool>();
        const bool has_3d = header.at("has_3d").get<bool>();
        if (!has_2d && !has_3d) throw ParseError("file carries neither 2D nor 3D data", r.offset);
        ds.sequences.resize(frames.size());
        std::vector<float> buf;
        auto read_block = [&](NdArray<T>& dst, Index f, Index coords, const char* what) {
            dst = NdArray<T>({f, j, coords});
            buf.resize(static_cast<std::size_t>(dst.numel()));
            r.read(buf.data(), buf.size() * sizeof(float), what);
            for (Index i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(buf[static_cast<std::size_t>(i)]);
        };
        if (has_2d)
            for (std::size_t s = 0; s < frames.size(); ++s)
                read_block(ds.sequences[s].p2d, frames[s], 2, "2D block");
        if (has_3d)
            for (std::size_t s = 0; s < frames.size(); ++s)
                read_block(ds.sequences[s].p3d, frames[s], 3, "3D block");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad header field: ") + e.what(), 16);
    }
    return ds;
}

template <typename T>
PoseDataset<T> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open: " + path);
    return load_dataset<T>(is);
}

template <typename T>
nlohmann::json dataset_to_json(const PoseDataset<T>& ds) {
    nlohmann::json j;
    j["skeleton"] = ds.skeleton.to_json();
    j["stride"] = ds.window_stride;
    j["split"] = ds.split;
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : ds.sequences) {
        nlohmann::json e;
        if (!s.p2d.empty()) e["p2d"] = std::vector<double>(s.p2d.data(), s.p2d.data() + s.p2d.numel());
        if (!s.p3d.empty()) e["p3d"] = std::vector<double>(s.p3d.data(), s.p3d.data() + s.p3d.numel());
        e["frames"] = s.p3d.empty() ? s.p2d.dim(0) : s.p3d.dim(0);
        seqs.push_back(std::move(e));
    }
    j["sequences"] = std::move(seqs);
    return j;
}

/// FNV-1a over the serialized file bytes; stable across platforms.
template <typename T>
std::string dataset_hash(const PoseDataset<T>& ds) {
    std::ostringstream os(std::ios::binary);
    save_dataset(ds, os);
    std::string bytes = os.str();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

/// Sequence-level split; frames of one sequence never cross the boundary.
template <typename T>
std::pair<PoseDataset<T>, PoseDataset<T>> split_dataset(const PoseDataset<T>& ds,
                                                        double val_fraction, std::uint64_t seed) {
    if (val_fraction < 0 || val_fraction > 1)
        throw ValueError("split_dataset: val_fraction must be in [0, 1]");
    Rng rng = Rng::derive({seed, 0x5b117ULL});
    auto order = rng.randperm(ds.num_sequences());
    Index n_val = static_cast<Index>(std::llround(val_fraction * double(ds.num_sequences())));
    PoseDataset<T> train = ds, val = ds;
    train.sequences.clear();
    val.sequences.clear();
    val.split = "val";
    for (Index i = 0; i < ds.num_sequences(); ++i) {
        const auto& s = ds.sequences[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        if (i < n_val)
            val.sequences.push_back(s);
        else
            train.sequences.push_back(s);
    }
    return {std::move(train), std::move(val)};
}

}  // namespace hgm
