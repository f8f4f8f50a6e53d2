#include <gtest/gtest.h>

#include <cmath>

#include "hgm/metrics.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/rng.hpp"

using namespace hgm;

namespace {

NdArray<double> random_pose(Index frames, Index joints, std::uint64_t seed, double scale = 400.0) {
    NdArray<double> p({frames, joints, 3});
    Rng rng(seed);
    rng.fill_normal(p, 0, scale);
    return p;
}

struct Rot3 {
    double m[9];
};

Rot3 random_rotation(Rng& rng) {
    // quaternion from four normals, normalized
    double q[4];
    double n = 0;
    for (double& v : q) {
        v = rng.normal();
    }
    for (double v : q) n += v * v;
    n = std::sqrt(n);
    for (double& v : q) v /= n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Rot3 r;
    r.m[0] = 1 - 2 * (y * y + z * z);
    r.m[1] = 2 * (x * y - w * z);
    r.m[2] = 2 * (x * z + w * y);
    r.m[3] = 2 * (x * y + w * z);
    r.m[4] = 1 - 2 * (x * x + z * z);
    r.m[5] = 2 * (y * z - w * x);
    r.m[6] = 2 * (x * z - w * y);
    r.m[7] = 2 * (y * z + w * x);
    r.m[8] = 1 - 2 * (x * x + y * y);
    return r;
}

NdArray<double> apply_similarity(const NdArray<double>& pose, const Rot3& r, double s,
                                 const double t[3]) {
    NdArray<double> out(pose.shape());
    const Index n = pose.numel() / 3;
    for (Index i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            double acc = 0;
            for (int b = 0; b < 3; ++b) acc += r.m[a * 3 + b] * pose[i * 3 + b];
            out[i * 3 + a] = s * acc + t[a];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Independent P2 oracle via Horn's quaternion method: the optimal proper
// rotation is the dominant eigenvector of the 4x4 N matrix, found by shifted
// power iteration. Completely separate from the Jacobi-SVD implementation.
// ---------------------------------------------------------------------------

double p_mpjpe_oracle(const NdArray<double>& pred, const NdArray<double>& gt, bool with_scale,
                      Index root) {
    const Index f = pred.dim(0), j = pred.dim(1);
    double total = 0;
    for (Index t = 0; t < f; ++t) {
        double mp[3] = {0, 0, 0}, mg[3] = {0, 0, 0};
        for (Index q = 0; q < j; ++q)
            for (int c = 0; c < 3; ++c) {
                mp[c] += pred[(t * j + q) * 3 + c];
                mg[c] += gt[(t * j + q) * 3 + c];
            }
        for (int c = 0; c < 3; ++c) {
            mp[c] /= double(j);
            mg[c] /= double(j);
        }
        double s_mat[9] = {0};
        double varp = 0;
        for (Index q = 0; q < j; ++q) {
            double p[3], g[3];
            for (int c = 0; c < 3; ++c) {
                p[c] = pred[(t * j + q) * 3 + c] - mp[c];
                g[c] = gt[(t * j + q) * 3 + c] - mg[c];
                varp += p[c] * p[c];
            }
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) s_mat[a * 3 + b] += p[a] * g[b];
        }
        const double sxx = s_mat[0], sxy = s_mat[1], sxz = s_mat[2];
        const double syx = s_mat[3], syy = s_mat[4], syz = s_mat[5];
        const double szx = s_mat[6], szy = s_mat[7], szz = s_mat[8];
        double nmat[16] = {
            sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
            syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
            szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz};
        // cyclic Jacobi on the symmetric 4x4; the top eigenvector is the
        // optimal rotation quaternion
        double evec[16] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
        for (int sweep = 0; sweep < 50; ++sweep) {
            double off = 0;
            for (int p2 = 0; p2 < 3; ++p2)
                for (int r2 = p2 + 1; r2 < 4; ++r2) {
                    double apq = nmat[p2 * 4 + r2];
                    off = std::max(off, std::abs(apq));
                    if (std::abs(apq) < 1e-300) continue;
                    double theta = (nmat[r2 * 4 + r2] - nmat[p2 * 4 + p2]) / (2.0 * apq);
                    double t2 = (theta >= 0 ? 1.0 : -1.0) /
                                (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                    double cs = 1.0 / std::sqrt(1.0 + t2 * t2);
                    double sn = cs * t2;
                    for (int k = 0; k < 4; ++k) {
                        double akp = nmat[k * 4 + p2], akq = nmat[k * 4 + r2];
                        nmat[k * 4 + p2] = cs * akp - sn * akq;
                        nmat[k * 4 + r2] = sn * akp + cs * akq;
                    }
                    for (int k = 0; k < 4; ++k) {
                        double apk = nmat[p2 * 4 + k], aqk = nmat[r2 * 4 + k];
                        nmat[p2 * 4 + k] = cs * apk - sn * aqk;
                        nmat[r2 * 4 + k] = sn * apk + cs * aqk;
                    }
                    for (int k = 0; k < 4; ++k) {
                        double vkp = evec[k * 4 + p2], vkq = evec[k * 4 + r2];
                        evec[k * 4 + p2] = cs * vkp - sn * vkq;
                        evec[k * 4 + r2] = sn * vkp + cs * vkq;
                    }
                }
            if (off < 1e-15) break;
        }
        int best = 0;
        for (int k = 1; k < 4; ++k)
            if (nmat[k * 4 + k] > nmat[best * 4 + best]) best = k;
        double q[4] = {evec[0 * 4 + best], evec[1 * 4 + best], evec[2 * 4 + best],
                       evec[3 * 4 + best]};
        const double w = q[0], x = q[1], y = q[2], z = q[3];
        double r[9] = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                       2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                       2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
        // (the quaternion rotates pred onto gt)
        double trace_rs = 0;
        for (Index q2 = 0; q2 < j; ++q2) {
            double p[3], g[3];
            for (int c = 0; c < 3; ++c) {
                p[c] = pred[(t * j + q2) * 3 + c] - mp[c];
                g[c] = gt[(t * j + q2) * 3 + c] - mg[c];
            }
            for (int a = 0; a < 3; ++a) {
                double rp = r[a * 3 + 0] * p[0] + r[a * 3 + 1] * p[1] + r[a * 3 + 2] * p[2];
                trace_rs += rp * g[a];
            }
        }
        double scale = with_scale ? trace_rs / varp : 1.0;
        double frame_err = 0;
        for (Index q2 = 0; q2 < j; ++q2) {
            if (q2 == root) continue;
            double p[3], g[3];
            for (int c = 0; c < 3; ++c) {
                p[c] = pred[(t * j + q2) * 3 + c] - mp[c];
                g[c] = gt[(t * j + q2) * 3 + c] - mg[c];
            }
            double e2 = 0;
            for (int a = 0; a < 3; ++a) {
                double rp = r[a * 3 + 0] * p[0] + r[a * 3 + 1] * p[1] + r[a * 3 + 2] * p[2];
                double d = scale * rp - g[a];
                e2 += d * d;
            }
            frame_err += std::sqrt(e2);
        }
        total += frame_err / double(j - 1);
    }
    return total / double(f);
}

double mpjpe_oracle(const NdArray<double>& pred, const NdArray<double>& gt, Index root) {
    const Index f = pred.dim(0), j = pred.dim(1);
    double acc = 0;
    for (Index t = 0; t < f; ++t)
        for (Index q = 0; q < j; ++q) {
            if (q == root) continue;
            double e2 = 0;
            for (int c = 0; c < 3; ++c) {
                double d = (pred[(t * j + q) * 3 + c] - pred[(t * j + root) * 3 + c]) -
                           (gt[(t * j + q) * 3 + c] - gt[(t * j + root) * 3 + c]);
                e2 += d * d;
            }
            acc += std::sqrt(e2);
        }
    return acc / double(f * (j - 1));
}

}  // namespace

TEST(Mpjpe, ZeroForPerfectPrediction) {
    NdArray<double> p = random_pose(3, 17, 1);
    EXPECT_DOUBLE_EQ(mpjpe(p, p), 0.0);
}

TEST(Mpjpe, HandComputedOffset) {
    // root + two joints; both non-root joints offset by (3, 0, 4) -> 5 mm
    NdArray<double> gt = random_pose(1, 3, 2);
    NdArray<double> pred = gt;
    for (Index q = 1; q < 3; ++q) {
        pred[(0 * 3 + q) * 3 + 0] += 3.0;
        pred[(0 * 3 + q) * 3 + 2] += 4.0;
    }
    EXPECT_NEAR(mpjpe(pred, gt), 5.0, 1e-12);
}

TEST(Mpjpe, InvariantToGlobalTranslationOfPrediction) {
    NdArray<double> gt = random_pose(4, 17, 3);
    NdArray<double> pred = random_pose(4, 17, 4);
    double base = mpjpe(pred, gt);
    for (Index i = 0; i < pred.numel(); i += 3) {
        pred[i] += 123.0;
        pred[i + 1] -= 55.0;
        pred[i + 2] += 9.0;
    }
    EXPECT_NEAR(mpjpe(pred, gt), base, 1e-9);
}

TEST(PMpjpe, ExactAlignabilityUnderRigidTransform) {
    Rng rng(5);
    NdArray<double> gt = random_pose(3, 17, 6);
    Rot3 r = random_rotation(rng);
    double t[3] = {100, -50, 30};
    NdArray<double> pred = apply_similarity(gt, r, 1.0, t);
    EXPECT_LT(p_mpjpe(pred, gt), 1e-6);
}

TEST(PMpjpe, ScaleAbsorbed) {
    NdArray<double> gt = random_pose(2, 17, 7);
    NdArray<double> pred = scale(gt, 2.0);
    EXPECT_LT(p_mpjpe(pred, gt), 1e-6);
    // the strict-rigid variant must NOT absorb the doubling
    EXPECT_GT(p_mpjpe(pred, gt, /*with_scale=*/false), 1.0);
}

TEST(PMpjpe, NeverWorseThanRootAlignment) {
    for (int rep = 0; rep < 30; ++rep) {
        NdArray<double> gt = random_pose(2, 17, 100 + rep);
        NdArray<double> noise = random_pose(2, 17, 200 + rep, 30.0);
        NdArray<double> pred = add(gt, noise);
        EXPECT_LE(p_mpjpe(pred, gt), mpjpe(pred, gt) + 1e-9) << "rep " << rep;
    }
}

TEST(PMpjpe, DegenerateFrameExcludedWithWarning) {
    NdArray<double> gt = random_pose(2, 5, 8);
    NdArray<double> pred = gt;
    for (Index q = 0; q < 5; ++q)
        for (Index c = 0; c < 3; ++c) pred[(0 * 5 + q) * 3 + c] = 1.0;  // frame 0 collapsed
    Index degenerate = 0;
    double v = p_mpjpe(pred, gt, true, &degenerate);
    EXPECT_EQ(degenerate, 1);
    EXPECT_LT(v, 1e-6);  // remaining frame is exact
}

TEST(Pck, AllAtHundredMillimeters) {
    // every non-root joint exactly 100 mm off after root alignment;
    // integer-valued coordinates keep the 100 exact under double arithmetic
    NdArray<double> gt({2, 17, 3});
    Rng rng(9);
    for (Index i = 0; i < gt.numel(); ++i) gt[i] = double(Index(rng.uniform_int(1000)) - 500);
    NdArray<double> pred = gt;
    for (Index t = 0; t < 2; ++t)
        for (Index q = 1; q < 17; ++q) pred[(t * 17 + q) * 3 + 1] += 100.0;
    EXPECT_DOUBLE_EQ(pck(pred, gt, 150.0), 1.0);
    // thresholds 105..150 succeed: 10 of the 31 grid points
    EXPECT_NEAR(auc(pred, gt), 10.0 / 31.0, 1e-12);
}

TEST(Pck, PerfectPredictionMissesOnlyTheZeroThreshold) {
    NdArray<double> p = random_pose(3, 17, 10);
    EXPECT_DOUBLE_EQ(pck(p, p, 150.0), 1.0);
    EXPECT_NEAR(auc(p, p), 30.0 / 31.0, 1e-12);  // strict < excludes threshold 0
}

TEST(Metrics, InvariantToSimultaneousRigidTransform) {
    Rng rng(11);
    NdArray<double> gt = random_pose(2, 17, 12);
    NdArray<double> pred = add(gt, random_pose(2, 17, 13, 40.0));
    Rot3 r = random_rotation(rng);
    double t[3] = {10, 20, -5};
    NdArray<double> gt2 = apply_similarity(gt, r, 1.0, t);
    NdArray<double> pred2 = apply_similarity(pred, r, 1.0, t);
    EXPECT_NEAR(mpjpe(pred2, gt2), mpjpe(pred, gt), 1e-8);
    EXPECT_NEAR(p_mpjpe(pred2, gt2), p_mpjpe(pred, gt), 1e-8);
    EXPECT_NEAR(pck(pred2, gt2), pck(pred, gt), 1e-12);
    EXPECT_NEAR(auc(pred2, gt2), auc(pred, gt), 1e-12);
}

TEST(Metrics, MatchBruteForceOraclesOnRandomInstances) {
    for (int rep = 0; rep < 50; ++rep) {
        const Index f = 1 + (rep % 3), j = 5 + (rep % 7);
        NdArray<double> gt = random_pose(f, j, 300 + rep);
        NdArray<double> pred = add(gt, random_pose(f, j, 400 + rep, 50.0));
        ASSERT_NEAR(mpjpe(pred, gt), mpjpe_oracle(pred, gt, 0), 1e-9);
        ASSERT_NEAR(p_mpjpe(pred, gt), p_mpjpe_oracle(pred, gt, true, 0), 1e-9);
        double th = 20.0 * (1 + rep % 8);
        double got = pck(pred, gt, th);
        Index correct = 0;
        for (Index t = 0; t < f; ++t)
            for (Index q = 1; q < j; ++q) {
                double e2 = 0;
                for (int c = 0; c < 3; ++c) {
                    double d = (pred[(t * j + q) * 3 + c] - pred[(t * j) * 3 + c]) -
                               (gt[(t * j + q) * 3 + c] - gt[(t * j) * 3 + c]);
                    e2 += d * d;
                }
                if (std::sqrt(e2) < th) ++correct;
            }
        ASSERT_NEAR(got, double(correct) / double(f * (j - 1)), 1e-12);
    }
}

TEST(EvalReport, ValidatesRangesAndOrdering) {
    EvalReport r;
    r.mpjpe_mm = 50;
    r.p_mpjpe_mm = 40;
    r.pck_150 = 0.9;
    r.auc = 0.5;
    r.validate();
    r.p_mpjpe_mm = 51;
    EXPECT_THROW(r.validate(), NumericError);
    r.p_mpjpe_mm = 40;
    r.pck_150 = 1.5;
    EXPECT_THROW(r.validate(), ValueError);
    nlohmann::json j = EvalReport{}.to_json();
    EXPECT_TRUE(j.contains("mpjpe_mm"));
}

TEST(EvalReport, EndToEndOnSyntheticNoise) {
    NdArray<double> gt = random_pose(4, 17, 500);
    NdArray<double> pred = add(gt, random_pose(4, 17, 501, 20.0));
    EvalReport r = evaluate_poses(pred, gt);
    EXPECT_GT(r.mpjpe_mm, 0);
    EXPECT_LE(r.p_mpjpe_mm, r.mpjpe_mm + 1e-9);
    EXPECT_GT(r.pck_150, 0.5);
    EXPECT_EQ(r.frames, 4);
}
