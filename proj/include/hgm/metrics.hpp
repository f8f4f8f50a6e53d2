#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "hgm/hypergraph.hpp"
#include "hgm/ndarray.hpp"

#include "json.hpp"

namespace hgm {

namespace detail {

inline double det3(const double m[9]) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

struct Svd3 {
    double u[9];  // row-major
    double s[3];  // descending
    double v[9];
};

/// One-sided Jacobi SVD of a 3x3 matrix: rotates column pairs of B = A V until
/// they are mutually orthogonal, then U = B / ||cols||. Rank-deficient inputs
/// get their null columns completed by cross products.
inline Svd3 svd3(const double a[9]) {
    double b[9], v[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::copy(a, a + 9, b);
    auto col_dot = [&](const double* m, int p, int q) {
        return m[p] * m[q] + m[3 + p] * m[3 + q] + m[6 + p] * m[6 + q];
    };
    auto rot_cols = [](double* m, int p, int q, double cs, double sn) {
        for (int r = 0; r < 3; ++r) {
            double mp = m[r * 3 + p], mq = m[r * 3 + q];
            m[r * 3 + p] = cs * mp - sn * mq;
            m[r * 3 + q] = sn * mp + cs * mq;
        }
    };
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                double app = col_dot(b, p, p), aqq = col_dot(b, q, q), apq = col_dot(b, p, q);
                off = std::max(off, std::abs(apq) / (std::sqrt(app * aqq) + 1e-300));
                if (std::abs(apq) < 1e-30) continue;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                rot_cols(b, p, q, cs, sn);
                rot_cols(v, p, q, cs, sn);
            }
        if (off < 1e-15) break;
    }
    Svd3 out;
    double norms[3];
    for (int c = 0; c < 3; ++c)
        norms[c] = std::sqrt(col_dot(b, c, c));
    int order[3] = {0, 1, 2};
    std::sort(order, order + 3, [&](int x, int y) { return norms[x] > norms[y]; });
    for (int c = 0; c < 3; ++c) {
        int src = order[c];
        out.s[c] = norms[src];
        for (int r = 0; r < 3; ++r) {
            out.v[r * 3 + c] = v[r * 3 + src];
            out.u[r * 3 + c] = norms[src] > 1e-150 ? b[r * 3 + src] / norms[src] : 0.0;
        }
    }
    // complete U to an orthonormal basis if columns vanished
    auto cross_into = [&](int dst, int c0, int c1) {
        double x0 = out.u[c0], y0 = out.u[3 + c0], z0 = out.u[6 + c0];
        double x1 = out.u[c1], y1 = out.u[3 + c1], z1 = out.u[6 + c1];
        double cx = y0 * z1 - z0 * y1, cy = z0 * x1 - x0 * z1, cz = x0 * y1 - y0 * x1;
        double n = std::sqrt(cx * cx + cy * cy + cz * cz);
        if (n < 1e-150) {
            cx = 1;
            cy = cz = 0;
            n = 1;
        }
        out.u[dst] = cx / n;
        out.u[3 + dst] = cy / n;
        out.u[6 + dst] = cz / n;
    };
    if (out.s[2] <= 1e-150) cross_into(2, 0, 1);
    if (out.s[1] <= 1e-150) cross_into(1, 2, 0);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Protocol 1: mean per-joint position error after aligning roots. Joint means
// exclude the root: its error is pinned to zero by the alignment, so keeping
// it would only rescale every score by (J-1)/J.
// ---------------------------------------------------------------------------

template <typename T>
void require_pose_pair(const NdArray<T>& pred, const NdArray<T>& gt) {
    if (!pred.same_shape(gt) || pred.ndim() != 3 || pred.dim(2) != 3)
        throw ShapeError("pose metrics: inputs must both be [frames, joints, 3], got " +
                         shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
    if (pred.dim(1) < 2) throw ShapeError("pose metrics: need at least 2 joints");
}

template <typename T>
double mpjpe(const NdArray<T>& pred, const NdArray<T>& gt, Index root = 0) {
    require_pose_pair(pred, gt);
    const Index f = pred.dim(0), j = pred.dim(1);
    double total = 0;
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q) {
            if (q == root) continue;
            double d2 = 0;
            for (Index c = 0; c < 3; ++c) {
                double dp = double(pred[(t * j + q) * 3 + c]) - double(pred[(t * j + root) * 3 + c]);
                double dg = double(gt[(t * j + q) * 3 + c]) - double(gt[(t * j + root) * 3 + c]);
                double d = dp - dg;
                d2 += d * d;
            }
            total += std::sqrt(d2);
        }
    return total / double(f * (j - 1));
}

// ---------------------------------------------------------------------------
// Protocol 2: per-frame similarity alignment (rotation + translation + uniform
// scale unless with_scale is false), then MPJPE. Frames whose joints are all
// coincident cannot be aligned; they are excluded with a warning.
// ---------------------------------------------------------------------------

template <typename T>
double p_mpjpe(const NdArray<T>& pred, const NdArray<T>& gt, bool with_scale = true,
               Index* degenerate_frames = nullptr, Index root = 0) {
    require_pose_pair(pred, gt);
    const Index f = pred.dim(0), j = pred.dim(1);
    if (j < 3) throw ValueError("p_mpjpe: need at least 3 joints");
    double total = 0;
    Index used = 0, skipped = 0;
    std::vector<double> pc(static_cast<std::size_t>(j * 3)), gc(static_cast<std::size_t>(j * 3));
    for (Index t = 0; t < f; ++t) {
        double mp[3] = {0, 0, 0}, mg[3] = {0, 0, 0};
        for (Index q = 0; q < j; ++q)
            for (Index c = 0; c < 3; ++c) {
                mp[c] += double(pred[(t * j + q) * 3 + c]);
                mg[c] += double(gt[(t * j + q) * 3 + c]);
            }
        for (int c = 0; c < 3; ++c) {
            mp[c] /= double(j);
            mg[c] /= double(j);
        }
        double varp = 0;
        for (Index q = 0; q < j; ++q)
            for (Index c = 0; c < 3; ++c) {
                pc[static_cast<std::size_t>(q * 3 + c)] = double(pred[(t * j + q) * 3 + c]) - mp[c];
                gc[static_cast<std::size_t>(q * 3 + c)] = double(gt[(t * j + q) * 3 + c]) - mg[c];
                varp += pc[static_cast<std::size_t>(q * 3 + c)] * pc[static_cast<std::size_t>(q * 3 + c)];
            }
        if (varp < 1e-18) {
            std::cerr << "p_mpjpe: frame " << t << " is degenerate (all joints coincide), excluded\n";
            ++skipped;
            continue;
        }
        // cross covariance H = sum_i p_i g_i^T
        double h[9] = {0};
        for (Index q = 0; q < j; ++q)
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    h[r * 3 + c] += pc[static_cast<std::size_t>(q * 3 + r)] * gc[static_cast<std::size_t>(q * 3 + c)];
        detail::Svd3 svd = detail::svd3(h);
        double sign = detail::det3(svd.u) * detail::det3(svd.v) < 0 ? -1.0 : 1.0;
        // R = V diag(1,1,sign) U^T, the proper rotation maximizing tr(R H)
        double r[9];
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                double acc = 0;
                for (int c = 0; c < 3; ++c) {
                    double d = c == 2 ? sign : 1.0;
                    acc += svd.v[a * 3 + c] * d * svd.u[b * 3 + c];
                }
                r[a * 3 + b] = acc;
            }
        double s = 1.0;
        if (with_scale) s = (svd.s[0] + svd.s[1] + sign * svd.s[2]) / varp;
        double frame_err = 0;
        for (Index q = 0; q < j; ++q) {
            if (q == root) continue;  // alignment fits all joints, the mean skips the root
            double e2 = 0;
            for (int a = 0; a < 3; ++a) {
                double rp = r[a * 3 + 0] * pc[static_cast<std::size_t>(q * 3 + 0)] +
                            r[a * 3 + 1] * pc[static_cast<std::size_t>(q * 3 + 1)] +
                            r[a * 3 + 2] * pc[static_cast<std::size_t>(q * 3 + 2)];
                double d = s * rp - gc[static_cast<std::size_t>(q * 3 + a)];
                e2 += d * d;
            }
            frame_err += std::sqrt(e2);
        }
        total += frame_err / double(j - 1);
        ++used;
    }
    if (degenerate_frames) *degenerate_frames = skipped;
    if (used == 0) throw ValueError("p_mpjpe: no alignable frames");
    return total / double(used);
}

// ---------------------------------------------------------------------------
// PCK and AUC. Errors are root-centered like protocol 1; a joint counts as
// correct when its error is strictly below the threshold. AUC averages PCK
// over the 31-point grid 0, 5, ..., 150 mm.
// ---------------------------------------------------------------------------

template <typename T>
double pck(const NdArray<T>& pred, const NdArray<T>& gt, double threshold_mm = 150.0,
           Index root = 0) {
    require_pose_pair(pred, gt);
    const Index f = pred.dim(0), j = pred.dim(1);
    Index correct = 0;
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q) {
            if (q == root) continue;
            double d2 = 0;
            for (Index c = 0; c < 3; ++c) {
                double dp = double(pred[(t * j + q) * 3 + c]) - double(pred[(t * j + root) * 3 + c]);
                double dg = double(gt[(t * j + q) * 3 + c]) - double(gt[(t * j + root) * 3 + c]);
                double d = dp - dg;
                d2 += d * d;
            }
            if (std::sqrt(d2) < threshold_mm) ++correct;
        }
    return double(correct) / double(f * (j - 1));
}

template <typename T>
double auc(const NdArray<T>& pred, const NdArray<T>& gt, Index root = 0) {
    double acc = 0;
    int count = 0;
    for (int th = 0; th <= 150; th += 5) {
        acc += pck(pred, gt, double(th), root);
        ++count;
    }
    return acc / double(count);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
    double mpjpe_mm = 0;
    double p_mpjpe_mm = 0;
    double pck_150 = 0;
    double auc = 0;
    Index frames = 0;
    Index degenerate_frames = 0;
    std::map<std::string, double> per_action_mpjpe;

    void validate() const {
        if (pck_150 < 0 || pck_150 > 1 || auc < 0 || auc > 1)
            throw ValueError("eval report: PCK/AUC must lie in [0, 1]");
        if (p_mpjpe_mm > mpjpe_mm + 1e-9)
            throw NumericError("eval report: alignment increased the error (p_mpjpe " +
                               std::to_string(p_mpjpe_mm) + " > mpjpe " + std::to_string(mpjpe_mm) +
                               ")");
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"mpjpe_mm", mpjpe_mm}, {"p_mpjpe_mm", p_mpjpe_mm},
                         {"pck_150", pck_150},   {"auc", auc},
                         {"frames", frames},     {"degenerate_frames", degenerate_frames}};
        if (!per_action_mpjpe.empty()) j["per_action_mpjpe"] = per_action_mpjpe;
        return j;
    }
};

template <typename T>
EvalReport evaluate_poses(const NdArray<T>& pred, const NdArray<T>& gt, bool strict_rigid = false,
                          Index root = 0) {
    EvalReport r;
    r.frames = pred.dim(0);
    r.mpjpe_mm = mpjpe(pred, gt, root);
    r.p_mpjpe_mm = p_mpjpe(pred, gt, !strict_rigid, &r.degenerate_frames, root);
    r.pck_150 = pck(pred, gt, 150.0, root);
    r.auc = auc(pred, gt, root);
    r.validate();
    return r;
}

}  // namespace hgm
