#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hgm/ndarray.hpp"
#include "hgm/tape.hpp"

namespace hgm {

template <typename T>
T lr_schedule(T initial, T decay, Index epoch) {
    if (epoch < 0) throw ValueError("lr_schedule: epoch must be >= 0");
    return initial * static_cast<T>(std::pow(static_cast<double>(decay), static_cast<double>(epoch)));
}

struct AdamwConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Named parameter registry: values, gradient accumulators, AdamW moments and
/// the shared step counter. Non-trainable entries (e.g. batchnorm running
/// stats) live here too so checkpoints capture the whole model state.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        NdArray<T> value;
        NdArray<T> grad;
        NdArray<T> m;
        NdArray<T> v;
        bool trainable;
    };

    Index add(std::string name, NdArray<T> init, bool trainable = true) {
        if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
        Entry e;
        e.name = std::move(name);
        e.grad = NdArray<T>::zeros(init.shape());
        if (trainable) {
            e.m = NdArray<T>::zeros(init.shape());
            e.v = NdArray<T>::zeros(init.shape());
        }
        e.value = std::move(init);
        e.trainable = trainable;
        entries_.push_back(std::move(e));
        index_[entries_.back().name] = entries_.size() - 1;
        return static_cast<Index>(entries_.size() - 1);
    }

    Index size() const { return static_cast<Index>(entries_.size()); }
    Entry& entry(Index i) { return entries_[static_cast<std::size_t>(i)]; }
    const Entry& entry(Index i) const { return entries_[static_cast<std::size_t>(i)]; }

    Index find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValueError("unknown parameter: " + name);
        return static_cast<Index>(it->second);
    }

    std::int64_t step() const { return step_; }

    Index trainable_scalar_count() const {
        Index n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.vec().begin(), e.grad.vec().end(), T(0));
    }

    void accumulate_grad(Index i, const NdArray<T>& g) {
        Entry& e = entry(i);
        require_same_shape(e.grad, g, "accumulate_grad");
        for (Index j = 0; j < g.numel(); ++j) e.grad[j] += g[j];
    }

    /// One decoupled-weight-decay Adam step over all trainable entries.
    /// Aborts before touching any value if a gradient is non-finite; gradients
    /// are zeroed and the step counter advances on success.
    void adamw_step(const AdamwConfig& cfg) {
        for (const auto& e : entries_) {
            if (!e.trainable) continue;
            if (!all_finite(e.grad))
                throw NumericError("adamw_step: non-finite gradient for parameter " + e.name);
        }
        const std::int64_t t = step_ + 1;
        const T b1 = static_cast<T>(cfg.beta1);
        const T b2 = static_cast<T>(cfg.beta2);
        const T corr1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(t)));
        const T corr2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(t)));
        const T lr = static_cast<T>(cfg.lr);
        const T eps = static_cast<T>(cfg.eps);
        const T wd = static_cast<T>(cfg.weight_decay);
        for (auto& e : entries_) {
            if (!e.trainable) continue;
            for (Index j = 0; j < e.value.numel(); ++j) {
                const T g = e.grad[j];
                e.m[j] = b1 * e.m[j] + (T(1) - b1) * g;
                e.v[j] = b2 * e.v[j] + (T(1) - b2) * g * g;
                const T mhat = e.m[j] / corr1;
                const T vhat = e.v[j] / corr2;
                e.value[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * e.value[j]);
            }
        }
        zero_grads();
        step_ = t;
    }

    void set_step(std::int64_t s) { step_ = s; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::int64_t step_ = 0;
};

/// Lazily binds store parameters onto a tape as tracked leaves, and writes
/// tape gradients back after the backward pass.
template <typename T>
class TapeBind {
public:
    TapeBind(Tape<T>& tape, ParamStore<T>& store)
        : tape_(&tape), store_(&store), vars_(static_cast<std::size_t>(store.size())) {}

    Var operator[](Index param_idx) {
        Var& v = vars_[static_cast<std::size_t>(param_idx)];
        if (!v.valid()) v = tape_->leaf(store_->entry(param_idx).value, true);
        return v;
    }

    /// Aliases a parameter to an existing tape node (used by gradient checks
    /// that own the leaves themselves).
    void preset(Index param_idx, Var v) { vars_[static_cast<std::size_t>(param_idx)] = v; }

    /// Accumulates d(loss)/d(param) into the store for every bound parameter.
    void writeback_grads() {
        for (std::size_t i = 0; i < vars_.size(); ++i)
            if (vars_[i].valid())
                store_->accumulate_grad(static_cast<Index>(i), tape_->grad(vars_[i]));
    }

    /// Thread-safe alternative: copies gradients out so the caller can reduce
    /// shards into the store in a fixed order.
    std::vector<std::pair<Index, NdArray<T>>> collect_grads() {
        std::vector<std::pair<Index, NdArray<T>>> out;
        for (std::size_t i = 0; i < vars_.size(); ++i)
            if (vars_[i].valid()) out.emplace_back(static_cast<Index>(i), tape_->grad(vars_[i]));
        return out;
    }

    ParamStore<T>& store() { return *store_; }
    Tape<T>& tape() { return *tape_; }

private:
    Tape<T>* tape_;
    ParamStore<T>* store_;
    std::vector<Var> vars_;
};

// ---------------------------------------------------------------------------
// Checkpoint file, magic "HGM1". Little-endian throughout: a JSON metadata
// blob (opaque to this layer), then named entries with raw float32 values and
// AdamW moments for trainable entries.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and pose file formats assume a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

struct ByteReader {
    explicit ByteReader(std::istream& is) : is_(&is) {}
    std::size_t offset = 0;

    void read(void* dst, std::size_t n, const char* what) {
        is_->read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_->gcount()) != n)
            throw ParseError(std::string("unexpected end of file while reading ") + what, offset);
        offset += n;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        read(&v, 4, what);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        read(&v, 8, what);
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        std::string s(n, '\0');
        read(s.data(), n, what);
        return s;
    }

private:
    std::istream* is_;
};

}  // namespace detail

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path,
                     const std::string& meta_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open checkpoint for writing: " + path);
    os.write("HGM1", 4);
    detail::write_u32(os, 1u);  // format version
    detail::write_u32(os, static_cast<std::uint32_t>(meta_json.size()));
    os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    detail::write_u64(os, static_cast<std::uint64_t>(store.step()));
    detail::write_u32(os, static_cast<std::uint32_t>(store.size()));
    std::vector<float> buf;
    auto write_array = [&](const NdArray<T>& a) {
        buf.resize(static_cast<std::size_t>(a.numel()));
        for (Index i = 0; i < a.numel(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(a[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    };
    for (Index i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(i);
        detail::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(e.trainable ? 1 : 0);
        detail::write_u32(os, static_cast<std::uint32_t>(e.value.ndim()));
        for (Index d : e.value.shape()) detail::write_u64(os, static_cast<std::uint64_t>(d));
        write_array(e.value);
        if (e.trainable) {
            write_array(e.m);
            write_array(e.v);
        }
    }
    if (!os) throw ValueError("checkpoint write failed: " + path);
}

/// Loads entries into an existing store built from the same config; shapes and
/// names must line up. Returns the stored metadata JSON.
template <typename T>
std::string load_checkpoint(ParamStore<T>& store, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open checkpoint: " + path);
    detail::ByteReader r(is);
    std::string magic = r.str(4, "magic");
    if (magic != "HGM1") throw ParseError("bad checkpoint magic '" + magic + "'", 0);
    std::uint32_t version = r.u32("version");
    if (version != 1) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
    std::uint32_t meta_len = r.u32("metadata length");
    std::string meta = r.str(meta_len, "metadata");
    std::int64_t step = static_cast<std::int64_t>(r.u64("step counter"));
    std::uint32_t count = r.u32("entry count");
    if (static_cast<Index>(count) != store.size())
        throw ParseError("checkpoint has " + std::to_string(count) + " entries, model expects " +
                         std::to_string(store.size()), r.offset);
    std::vector<float> buf;
    auto read_array = [&](NdArray<T>& a, const char* what) {
        buf.resize(static_cast<std::size_t>(a.numel()));
        r.read(buf.data(), buf.size() * sizeof(float), what);
        for (Index i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(buf[static_cast<std::size_t>(i)]);
    };
    for (Index i = 0; i < store.size(); ++i) {
        auto& e = store.entry(i);
        std::uint32_t name_len = r.u32("name length");
        std::string name = r.str(name_len, "name");
        if (name != e.name)
            throw ParseError("checkpoint entry '" + name + "' does not match model parameter '" +
                             e.name + "'", r.offset);
        char trainable;
        r.read(&trainable, 1, "trainable flag");
        std::uint32_t ndim = r.u32("rank");
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<Index>(r.u64("dim"));
        if (shape != e.value.shape())
            throw ParseError("checkpoint entry '" + name + "' shape " + shape_str(shape) +
                             " does not match model shape " + shape_str(e.value.shape()), r.offset);
        read_array(e.value, "values");
        if (trainable) {
            read_array(e.m, "adam m");
            read_array(e.v, "adam v");
        }
    }
    store.set_step(step);
    return meta;
}

}  // namespace hgm
