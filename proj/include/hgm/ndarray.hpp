#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hgm/errors.hpp"

namespace hgm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

/// Dense row-major array of real scalars. Immutable by convention once built:
/// operations return fresh arrays, mutation happens only through explicit
/// element writes before the value is shared.
template <typename T>
class NdArray {
public:
    NdArray() = default;

    explicit NdArray(Shape shape) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
    }

    NdArray(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (shape_numel(shape_) != static_cast<Index>(data_.size()))
            throw ShapeError("data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static NdArray zeros(Shape shape) { return NdArray(std::move(shape)); }

    static NdArray full(Shape shape, T v) {
        NdArray a(std::move(shape));
        std::fill(a.data_.begin(), a.data_.end(), v);
        return a;
    }

    static NdArray ones(Shape shape) { return full(std::move(shape), T(1)); }

    static NdArray scalar(T v) { return NdArray({1}, {v}); }

    Index ndim() const { return static_cast<Index>(shape_.size()); }
    const Shape& shape() const { return shape_; }
    Index dim(Index axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    Index numel() const { return static_cast<Index>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    // Row-major strides, derived from the shape.
    Shape strides() const {
        Shape st(shape_.size(), 1);
        for (Index i = ndim() - 2; i >= 0; --i)
            st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * shape_[static_cast<std::size_t>(i + 1)];
        return st;
    }

    T& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
    const T& operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

    // Bounds-checked element access; out-of-range indices are an error, never wraparound.
    template <typename... Ix>
    T& at(Ix... idx) {
        return data_[checked_offset({static_cast<Index>(idx)...})];
    }
    template <typename... Ix>
    const T& at(Ix... idx) const {
        return data_[checked_offset({static_cast<Index>(idx)...})];
    }

    bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }

    NdArray reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
        NdArray r;
        r.shape_ = std::move(new_shape);
        r.data_ = data_;
        r.check_dims();
        return r;
    }

private:
    void check_dims() const {
        for (Index d : shape_)
            if (d < 1) throw ShapeError("dimension sizes must be >= 1, got " + shape_str(shape_));
    }

    std::size_t checked_offset(std::initializer_list<Index> idx) const {
        if (static_cast<Index>(idx.size()) != ndim())
            throw ShapeError("expected " + std::to_string(ndim()) + " indices, got " +
                             std::to_string(idx.size()));
        std::size_t off = 0;
        std::size_t ax = 0;
        for (Index i : idx) {
            Index d = shape_[ax];
            if (i < 0 || i >= d)
                throw ShapeError("index " + std::to_string(i) + " out of range for axis " +
                                 std::to_string(ax) + " with size " + std::to_string(d));
            off = off * static_cast<std::size_t>(d) + static_cast<std::size_t>(i);
            ++ax;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Elementwise helpers
// ---------------------------------------------------------------------------

template <typename T>
void require_same_shape(const NdArray<T>& a, const NdArray<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T, typename F>
NdArray<T> map(const NdArray<T>& a, F f) {
    NdArray<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (Index i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Scalar transcendentals. The float instantiations use branch-light polynomial
// approximations (~1e-7 relative, below float epsilon); the double path keeps
// libm so the 64-bit verification and gradient-check suites see full accuracy.
// ---------------------------------------------------------------------------

namespace detail {

inline float fast_expf(float x) {
    if (x > 88.0f) x = 88.0f;
    if (x < -87.0f) return 0.0f;
    const float log2e = 1.44269504089f;
    const float ln2_hi = 0.693359375f;
    const float ln2_lo = -2.12194440e-4f;
    const float kf = std::floor(x * log2e + 0.5f);
    const float r = (x - kf * ln2_hi) - kf * ln2_lo;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    float y = p * r * r + r + 1.0f;
    std::int32_t bits;
    std::memcpy(&bits, &y, 4);
    bits += static_cast<std::int32_t>(kf) << 23;
    std::memcpy(&y, &bits, 4);
    return y;
}

}  // namespace detail

template <typename T>
T exp_scalar(T x) {
    return std::exp(x);
}
template <>
inline float exp_scalar<float>(float x) {
    return detail::fast_expf(x);
}

template <typename T>
T tanh_scalar(T x) {
    return std::tanh(x);
}
template <>
inline float tanh_scalar<float>(float x) {
    if (x > 9.0f) return 1.0f;
    if (x < -9.0f) return -1.0f;
    const float e = detail::fast_expf(2.0f * x);
    return (e - 1.0f) / (e + 1.0f);
}

template <typename T, typename F>
NdArray<T> zip(const NdArray<T>& a, const NdArray<T>& b, F f, const char* op) {
    require_same_shape(a, b, op);
    NdArray<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (Index i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
}

template <typename T>
NdArray<T> add(const NdArray<T>& a, const NdArray<T>& b) {
    return zip(a, b, [](T x, T y) { return x + y; }, "add");
}
template <typename T>
NdArray<T> sub(const NdArray<T>& a, const NdArray<T>& b) {
    return zip(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <typename T>
NdArray<T> hadamard(const NdArray<T>& a, const NdArray<T>& b) {
    return zip(a, b, [](T x, T y) { return x * y; }, "hadamard");
}
template <typename T>
NdArray<T> scale(const NdArray<T>& a, T c) {
    return map(a, [c](T x) { return x * c; });
}

template <typename T>
NdArray<T> relu(const NdArray<T>& a) {
    return map(a, [](T x) { return x > T(0) ? x : T(0); });
}

// tanh-approximation GeLU; fixed form so gradients are reproducible.
template <typename T>
T gelu_scalar(T x) {
    const T k = T(0.7978845608028654);  // sqrt(2/pi)
    T inner = k * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + tanh_scalar(inner));
}

template <typename T>
T gelu_grad_scalar(T x) {
    const T k = T(0.7978845608028654);
    T x3 = x * x * x;
    T inner = k * (x + T(0.044715) * x3);
    T th = tanh_scalar(inner);
    T sech2 = T(1) - th * th;
    T dinner = k * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * dinner;
}

template <typename T>
NdArray<T> gelu(const NdArray<T>& a) {
    return map(a, [](T x) { return gelu_scalar(x); });
}

template <typename T>
T softplus_scalar(T x) {
    // log(1+e^x) without overflow for large |x|
    if (x > T(30)) return x;
    if (x < T(-30)) return exp_scalar(x);
    return std::log1p(exp_scalar(x));
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        T e = exp_scalar(-x);
        return T(1) / (T(1) + e);
    }
    T e = exp_scalar(x);
    return e / (T(1) + e);
}

template <typename T>
NdArray<T> softplus(const NdArray<T>& a) {
    return map(a, [](T x) { return softplus_scalar(x); });
}

template <typename T>
bool all_finite(const NdArray<T>& a) {
    for (Index i = 0; i < a.numel(); ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

template <typename T>
T max_abs(const NdArray<T>& a) {
    T m = T(0);
    for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <typename T>
T max_abs_diff(const NdArray<T>& a, const NdArray<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    T m = T(0);
    for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
T sum_all(const NdArray<T>& a) {
    T s = T(0);
    for (Index i = 0; i < a.numel(); ++i) s += a[i];
    return s;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply
//
// a: [...,m,k] x b: [...,k,n] -> [...,m,n]. Leading batch dims must either
// match exactly or be absent on one side (the 2-D operand is broadcast).
// ---------------------------------------------------------------------------

namespace detail {

inline void matmul_shapes(const Shape& sa, const Shape& sb, Shape& out, Index& batch, Index& m,
                          Index& k, Index& n, bool& broadcast_a, bool& broadcast_b) {
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: operands must have >= 2 dims, got " + shape_str(sa) + " x " +
                         shape_str(sb));
    m = sa[sa.size() - 2];
    k = sa[sa.size() - 1];
    Index kb = sb[sb.size() - 2];
    n = sb[sb.size() - 1];
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(sa) + " x " +
                         shape_str(sb));
    Shape batch_a(sa.begin(), sa.end() - 2);
    Shape batch_b(sb.begin(), sb.end() - 2);
    broadcast_a = broadcast_b = false;
    Shape batch_dims;
    if (batch_a == batch_b) {
        batch_dims = batch_a;
    } else if (batch_b.empty()) {
        batch_dims = batch_a;
        broadcast_b = true;
    } else if (batch_a.empty()) {
        batch_dims = batch_b;
        broadcast_a = true;
    } else {
        throw ShapeError("matmul: batch dimensions disagree, " + shape_str(sa) + " x " +
                         shape_str(sb));
    }
    batch = shape_numel(batch_dims);
    out = batch_dims;
    out.push_back(m);
    out.push_back(n);
}

// C[m,n] (+)= A[m,k] * B[k,n], optionally transposing either input view.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, Index m, Index k, Index n, bool ta, bool tb,
              bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    if (!ta && !tb) {
        for (Index i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (Index p = 0; p < k; ++p) {
                T av = arow[p];
                if (av == T(0)) continue;
                const T* brow = b + p * n;
                for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (ta && !tb) {
        // a is stored [k,m]
        for (Index p = 0; p < k; ++p) {
            const T* arow = a + p * m;
            const T* brow = b + p * n;
            for (Index i = 0; i < m; ++i) {
                T av = arow[i];
                if (av == T(0)) continue;
                T* crow = c + i * n;
                for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        // b is stored [n,k]
        for (Index i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (Index j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T s = T(0);
                for (Index p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += s;
            }
        }
    } else {
        for (Index i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (Index j = 0; j < n; ++j) {
                T s = T(0);
                for (Index p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                crow[j] += s;
            }
        }
    }
}

}  // namespace detail

template <typename T>
NdArray<T> matmul(const NdArray<T>& a, const NdArray<T>& b) {
    Shape out_shape;
    Index batch, m, k, n;
    bool bc_a, bc_b;
    detail::matmul_shapes(a.shape(), b.shape(), out_shape, batch, m, k, n, bc_a, bc_b);
    NdArray<T> out(out_shape);
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = out.data();
    for (Index bi = 0; bi < batch; ++bi) {
        const T* ca = bc_a ? pa : pa + bi * m * k;
        const T* cb = bc_b ? pb : pb + bi * k * n;
        detail::gemm_acc(ca, cb, pc + bi * m * n, m, k, n, false, false, false);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Axis metadata: split a shape into (outer, axis size, inner) around one axis.
// ---------------------------------------------------------------------------

namespace detail {
struct AxisSplit {
    Index outer, size, inner;
};

inline AxisSplit axis_split(const Shape& s, Index axis) {
    if (axis < 0 || axis >= static_cast<Index>(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    AxisSplit sp{1, s[static_cast<std::size_t>(axis)], 1};
    for (Index i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
    for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) sp.inner *= s[static_cast<std::size_t>(i)];
    return sp;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// softmax over one axis, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <typename T>
NdArray<T> softmax(const NdArray<T>& x, Index axis) {
    if (!all_finite(x)) throw NumericError("softmax: non-finite input");
    auto sp = detail::axis_split(x.shape(), axis);
    NdArray<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (Index o = 0; o < sp.outer; ++o) {
        for (Index in = 0; in < sp.inner; ++in) {
            const Index base = o * sp.size * sp.inner + in;
            T mx = px[base];
            for (Index s = 1; s < sp.size; ++s) mx = std::max(mx, px[base + s * sp.inner]);
            T denom = T(0);
            for (Index s = 0; s < sp.size; ++s) {
                T e = std::exp(px[base + s * sp.inner] - mx);
                po[base + s * sp.inner] = e;
                denom += e;
            }
            for (Index s = 0; s < sp.size; ++s) po[base + s * sp.inner] /= denom;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// layernorm over the last axis, epsilon 1e-5. Also exposes (mean, rstd) for
// callers that need the statistics.
// ---------------------------------------------------------------------------

template <typename T>
NdArray<T> layernorm_stats(const NdArray<T>& x, const NdArray<T>& gain, const NdArray<T>& bias,
                           NdArray<T>* mean_out, NdArray<T>* rstd_out) {
    const T eps = T(1e-5);
    Index d = x.dim(x.ndim() - 1);
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layernorm: gain/bias length " + std::to_string(gain.numel()) + "/" +
                         std::to_string(bias.numel()) + " != last dim " + std::to_string(d));
    Index outer = x.numel() / d;
    NdArray<T> out(x.shape());
    NdArray<T> mean({std::max<Index>(outer, 1)});
    NdArray<T> rstd({std::max<Index>(outer, 1)});
    const T* px = x.data();
    const T* pg = gain.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (Index o = 0; o < outer; ++o) {
        const T* row = px + o * d;
        T mu = T(0);
        for (Index j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = T(0);
        for (Index j = 0; j < d; ++j) {
            T c = row[j] - mu;
            var += c * c;
        }
        var /= T(d);
        T rs = T(1) / std::sqrt(var + eps);
        mean[o] = mu;
        rstd[o] = rs;
        T* orow = po + o * d;
        for (Index j = 0; j < d; ++j) orow[j] = (row[j] - mu) * rs * pg[j] + pb[j];
    }
    if (mean_out) *mean_out = std::move(mean);
    if (rstd_out) *rstd_out = std::move(rstd);
    return out;
}

template <typename T>
NdArray<T> layernorm(const NdArray<T>& x, const NdArray<T>& gain, const NdArray<T>& bias) {
    return layernorm_stats<T>(x, gain, bias, nullptr, nullptr);
}

// ---------------------------------------------------------------------------
// Batch normalization over the last (feature) axis; all leading axes are the
// batch. Train mode normalizes by batch statistics and reports them so the
// caller can fold them into running stats (momentum 0.1); eval mode applies
// the provided running stats. Fresh running stats (mean 0, var 1) make eval
// an identity affine.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormResult {
    NdArray<T> y;
    NdArray<T> batch_mean;      // per feature (train mode)
    NdArray<T> batch_var;       // biased, per feature (train mode)
    NdArray<T> batch_var_unb;   // unbiased, for the running update
};

template <typename T>
BatchNormResult<T> batchnorm_features(const NdArray<T>& x, const NdArray<T>& running_mean,
                                      const NdArray<T>& running_var, const NdArray<T>& gain,
                                      const NdArray<T>& bias, bool train) {
    const T eps = T(1e-5);
    Index d = x.dim(x.ndim() - 1);
    if (running_mean.numel() != d || running_var.numel() != d || gain.numel() != d ||
        bias.numel() != d)
        throw ShapeError("batchnorm: stats/affine length must equal feature dim " +
                         std::to_string(d));
    Index m = x.numel() / d;
    BatchNormResult<T> r;
    r.y = NdArray<T>(x.shape());
    const T* px = x.data();
    T* po = r.y.data();
    if (train) {
        r.batch_mean = NdArray<T>({d});
        r.batch_var = NdArray<T>({d});
        r.batch_var_unb = NdArray<T>({d});
        for (Index j = 0; j < d; ++j) {
            T mu = T(0);
            for (Index i = 0; i < m; ++i) mu += px[i * d + j];
            mu /= T(m);
            T var = T(0);
            for (Index i = 0; i < m; ++i) {
                T c = px[i * d + j] - mu;
                var += c * c;
            }
            r.batch_mean[j] = mu;
            r.batch_var[j] = var / T(m);
            r.batch_var_unb[j] = m > 1 ? var / T(m - 1) : T(1);
        }
        for (Index j = 0; j < d; ++j) {
            T rs = T(1) / std::sqrt(r.batch_var[j] + eps);
            T g = gain[j], b = bias[j], mu = r.batch_mean[j];
            for (Index i = 0; i < m; ++i) po[i * d + j] = (px[i * d + j] - mu) * rs * g + b;
        }
    } else {
        for (Index j = 0; j < d; ++j) {
            T rs = T(1) / std::sqrt(running_var[j] + eps);
            T g = gain[j], b = bias[j], mu = running_mean[j];
            for (Index i = 0; i < m; ++i) po[i * d + j] = (px[i * d + j] - mu) * rs * g + b;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Structure ops: flip, gather, concat, slice, transpose.
// ---------------------------------------------------------------------------

template <typename T>
NdArray<T> flip(const NdArray<T>& x, Index axis) {
    auto sp = detail::axis_split(x.shape(), axis);
    NdArray<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (Index o = 0; o < sp.outer; ++o)
        for (Index s = 0; s < sp.size; ++s) {
            const T* src = px + (o * sp.size + s) * sp.inner;
            T* dst = po + (o * sp.size + (sp.size - 1 - s)) * sp.inner;
            std::copy(src, src + sp.inner, dst);
        }
    return out;
}

template <typename T>
NdArray<T> gather(const NdArray<T>& x, Index axis, const std::vector<Index>& idx) {
    auto sp = detail::axis_split(x.shape(), axis);
    for (Index i : idx)
        if (i < 0 || i >= sp.size)
            throw ShapeError("gather: index " + std::to_string(i) + " out of range for axis size " +
                             std::to_string(sp.size));
    Shape os = x.shape();
    os[static_cast<std::size_t>(axis)] = static_cast<Index>(idx.size());
    NdArray<T> out(os);
    const T* px = x.data();
    T* po = out.data();
    const Index k = static_cast<Index>(idx.size());
    for (Index o = 0; o < sp.outer; ++o)
        for (Index s = 0; s < k; ++s) {
            const T* src = px + (o * sp.size + idx[static_cast<std::size_t>(s)]) * sp.inner;
            T* dst = po + (o * k + s) * sp.inner;
            std::copy(src, src + sp.inner, dst);
        }
    return out;
}

template <typename T>
NdArray<T> concat(const NdArray<T>& a, const NdArray<T>& b, Index axis) {
    if (a.ndim() != b.ndim())
        throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    for (Index i = 0; i < a.ndim(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ off axis " + std::to_string(axis));
    auto spa = detail::axis_split(a.shape(), axis);
    auto spb = detail::axis_split(b.shape(), axis);
    Shape os = a.shape();
    os[static_cast<std::size_t>(axis)] = spa.size + spb.size;
    NdArray<T> out(os);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const Index block_a = spa.size * spa.inner;
    const Index block_b = spb.size * spb.inner;
    for (Index o = 0; o < spa.outer; ++o) {
        std::copy(pa + o * block_a, pa + (o + 1) * block_a, po + o * (block_a + block_b));
        std::copy(pb + o * block_b, pb + (o + 1) * block_b,
                  po + o * (block_a + block_b) + block_a);
    }
    return out;
}

template <typename T>
NdArray<T> slice(const NdArray<T>& x, Index axis, Index start, Index len) {
    auto sp = detail::axis_split(x.shape(), axis);
    if (start < 0 || len < 1 || start + len > sp.size)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for axis size " +
                         std::to_string(sp.size));
    Shape os = x.shape();
    os[static_cast<std::size_t>(axis)] = len;
    NdArray<T> out(os);
    const T* px = x.data();
    T* po = out.data();
    for (Index o = 0; o < sp.outer; ++o)
        std::copy(px + (o * sp.size + start) * sp.inner, px + (o * sp.size + start + len) * sp.inner,
                  po + o * len * sp.inner);
    return out;
}

template <typename T>
NdArray<T> transpose(const NdArray<T>& x, const std::vector<Index>& perm) {
    const Index nd = x.ndim();
    if (static_cast<Index>(perm.size()) != nd)
        throw ShapeError("transpose: perm size must equal rank " + std::to_string(nd));
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (Index p : perm) {
        if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)])
            throw ShapeError("transpose: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape os(static_cast<std::size_t>(nd));
    for (Index i = 0; i < nd; ++i) os[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    NdArray<T> out(os);
    Shape in_st = x.strides();
    Shape out_st = out.strides();
    // walk the output linearly, computing source offsets incrementally
    std::vector<Index> src_stride(static_cast<std::size_t>(nd));
    for (Index i = 0; i < nd; ++i)
        src_stride[static_cast<std::size_t>(i)] = in_st[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const T* px = x.data();
    T* po = out.data();
    std::vector<Index> counter(static_cast<std::size_t>(nd), 0);
    Index src = 0;
    for (Index flat = 0;; ++flat) {
        po[flat] = px[src];
        Index ax = nd - 1;
        for (; ax >= 0; --ax) {
            std::size_t a = static_cast<std::size_t>(ax);
            ++counter[a];
            src += src_stride[a];
            if (counter[a] < os[a]) break;
            counter[a] = 0;
            src -= src_stride[a] * os[a];
        }
        if (ax < 0) break;
    }
    return out;
}

template <typename T>
std::vector<Index> argsort(const T* v, Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index(0));
    std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return v[a] < v[b]; });
    return idx;
}

inline std::vector<Index> argsort_perm(const std::vector<Index>& perm) {
    std::vector<Index> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
    return inv;
}

// ---------------------------------------------------------------------------
// FFT-based causal convolution. Both inputs length L; output t depends only
// on inputs 0..t. Zero-pads to a power of two >= 2L-1, multiplies spectra,
// truncates back to L.
// ---------------------------------------------------------------------------

namespace detail {

// plain value pair; std::complex multiplies route through __muldc3 and are an
// order of magnitude slower in this loop
struct Cpx {
    double re = 0, im = 0;
};

inline void fft_pow2(std::vector<Cpx>& a, bool invert) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / double(len) * (invert ? 1.0 : -1.0);
        const double wl_re = std::cos(ang), wl_im = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double w_re = 1.0, w_im = 0.0;
            for (std::size_t j = 0; j < len / 2; ++j) {
                Cpx& u = a[i + j];
                Cpx& v = a[i + j + len / 2];
                const double vr = v.re * w_re - v.im * w_im;
                const double vi = v.re * w_im + v.im * w_re;
                v.re = u.re - vr;
                v.im = u.im - vi;
                u.re += vr;
                u.im += vi;
                const double nw_re = w_re * wl_re - w_im * wl_im;
                w_im = w_re * wl_im + w_im * wl_re;
                w_re = nw_re;
            }
        }
    }
    if (invert) {
        const double inv = 1.0 / double(n);
        for (auto& x : a) {
            x.re *= inv;
            x.im *= inv;
        }
    }
}

}  // namespace detail

// FFT arithmetic runs in double regardless of the array scalar type; the
// float32 contract (1e-5 against the direct oracle) does not survive float
// twiddle accumulation.
template <typename T>
NdArray<T> rfft_conv(const NdArray<T>& signal, const NdArray<T>& kernel) {
    if (signal.ndim() != 1 || kernel.ndim() != 1)
        throw ShapeError("rfft_conv: 1-D inputs required");
    const Index L = signal.numel();
    if (L == 0 || kernel.numel() != L)
        throw ShapeError("rfft_conv: lengths must match and be > 0, got " +
                         std::to_string(L) + " and " + std::to_string(kernel.numel()));
    std::size_t n = 1;
    while (n < static_cast<std::size_t>(2 * L - 1)) n <<= 1;
    std::vector<detail::Cpx> fa(n), fb(n);
    for (Index i = 0; i < L; ++i) {
        fa[static_cast<std::size_t>(i)].re = static_cast<double>(signal[i]);
        fb[static_cast<std::size_t>(i)].re = static_cast<double>(kernel[i]);
    }
    detail::fft_pow2(fa, false);
    detail::fft_pow2(fb, false);
    for (std::size_t i = 0; i < n; ++i) {
        const double re = fa[i].re * fb[i].re - fa[i].im * fb[i].im;
        fa[i].im = fa[i].re * fb[i].im + fa[i].im * fb[i].re;
        fa[i].re = re;
    }
    detail::fft_pow2(fa, true);
    NdArray<T> out({L});
    for (Index i = 0; i < L; ++i) out[i] = static_cast<T>(fa[static_cast<std::size_t>(i)].re);
    return out;
}

}  // namespace hgm
