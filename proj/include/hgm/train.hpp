#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "hgm/data.hpp"
#include "hgm/metrics.hpp"
#include "hgm/model.hpp"
#include "hgm/optim.hpp"

#include "json.hpp"

namespace hgm {

// ---------------------------------------------------------------------------
// Clip preparation: normalized 2-D inputs, root-relative 3-D targets. Targets
// are held in meters internally; metrics convert back to millimeters.
// ---------------------------------------------------------------------------

template <typename T>
struct Clip {
    NdArray<T> input;      // [T, J, 2] normalized
    NdArray<T> target_m;   // [T, J, 3] root-relative meters (empty if no 3D)
};

template <typename T>
std::vector<Clip<T>> make_clips(const PoseDataset<T>& ds, Index clip_len) {
    std::vector<Clip<T>> clips;
    const Index root = ds.skeleton.root;
    for (const auto& seq : ds.sequences) {
        const Index f = seq.p2d.empty() ? seq.p3d.dim(0) : seq.p2d.dim(0);
        if (f != clip_len)
            throw ValueError("make_clips: sequence length " + std::to_string(f) +
                             " != clip length " + std::to_string(clip_len) +
                             "; window the dataset first");
        Clip<T> c;
        if (seq.p2d.empty()) throw ValueError("make_clips: dataset has no 2D inputs");
        c.input = normalize_2d(seq.p2d, root).coords;
        if (!seq.p3d.empty()) {
            const Index j = seq.p3d.dim(1);
            c.target_m = NdArray<T>({f, j, 3});
            for (Index t = 0; t < f; ++t)
                for (Index q = 0; q < j; ++q)
                    for (Index k = 0; k < 3; ++k)
                        c.target_m[(t * j + q) * 3 + k] =
                            (seq.p3d[(t * j + q) * 3 + k] - seq.p3d[(t * j + root) * 3 + k]) /
                            T(1000);
        }
        clips.push_back(std::move(c));
    }
    return clips;
}

template <typename T>
NdArray<T> stack_clips(const std::vector<const NdArray<T>*>& arrays) {
    Shape s = arrays.front()->shape();
    s.insert(s.begin(), static_cast<Index>(arrays.size()));
    NdArray<T> out(s);
    const Index per = arrays.front()->numel();
    for (std::size_t i = 0; i < arrays.size(); ++i)
        std::copy(arrays[i]->data(), arrays[i]->data() + per, out.data() + static_cast<Index>(i) * per);
    return out;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

/// Batched inference. Returns [B, T, J, 3] in millimeters, root-relative.
/// With flip averaging, the prediction is the mean of the plain pass and the
/// unflipped prediction of the mirrored input.
template <typename T>
NdArray<T> predict_batch(ParamStore<T>& store, const ModelIds<T>& ids, const ModelConfig& cfg,
                         const SkeletonSpec& skel, const NdArray<T>& input, bool flip_average) {
    auto run = [&](const NdArray<T>& in) {
        Tape<T> tape;
        TapeBind<T> bind(tape, store);
        Var x = tape.constant(in);
        ShuffleCtx ctx;  // inference
        Var y = model_forward(bind, ids, cfg, x, ctx, false);
        return tape.val(y);
    };
    NdArray<T> pred = run(input);
    if (flip_average) {
        NdArray<T> flipped = horizontal_flip(input, skel);
        NdArray<T> pred_f = horizontal_flip(run(flipped), skel);
        for (Index i = 0; i < pred.numel(); ++i) pred[i] = T(0.5) * (pred[i] + pred_f[i]);
    }
    for (Index i = 0; i < pred.numel(); ++i) pred[i] *= T(1000);  // meters -> mm
    return pred;
}

/// Concatenated (pred, gt) frames in millimeters over a clip list.
template <typename T>
std::pair<NdArray<T>, NdArray<T>> predict_clips(ParamStore<T>& store, const ModelIds<T>& ids,
                                                const ModelConfig& cfg, const SkeletonSpec& skel,
                                                const std::vector<Clip<T>>& clips, Index batch,
                                                bool flip_average) {
    const Index j = cfg.joints, tt = cfg.frames;
    const Index total_frames = static_cast<Index>(clips.size()) * tt;
    NdArray<T> pred_all({total_frames, j, 3}), gt_all({total_frames, j, 3});
    Index frame = 0;
    for (std::size_t c0 = 0; c0 < clips.size(); c0 += static_cast<std::size_t>(batch)) {
        const std::size_t c1 = std::min(clips.size(), c0 + static_cast<std::size_t>(batch));
        std::vector<const NdArray<T>*> ins;
        for (std::size_t c = c0; c < c1; ++c) ins.push_back(&clips[c].input);
        NdArray<T> pred = predict_batch(store, ids, cfg, skel, stack_clips(ins), flip_average);
        for (std::size_t c = c0; c < c1; ++c) {
            const NdArray<T>& gt = clips[c].target_m;
            if (gt.empty()) throw ValueError("predict_clips: clip has no 3D ground truth");
            for (Index t = 0; t < tt; ++t)
                for (Index q = 0; q < j; ++q)
                    for (Index k = 0; k < 3; ++k) {
                        pred_all[((frame + t) * j + q) * 3 + k] =
                            pred[(((static_cast<Index>(c - c0)) * tt + t) * j + q) * 3 + k];
                        gt_all[((frame + t) * j + q) * 3 + k] = gt[(t * j + q) * 3 + k] * T(1000);
                    }
            frame += tt;
        }
    }
    return {std::move(pred_all), std::move(gt_all)};
}

template <typename T>
double train_mpjpe(ParamStore<T>& store, const ModelIds<T>& ids, const ModelConfig& cfg,
                   const SkeletonSpec& skel, const std::vector<Clip<T>>& clips, Index batch) {
    auto [pred, gt] = predict_clips(store, ids, cfg, skel, clips, batch, false);
    return mpjpe(pred, gt, skel.root);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
    Index batch = 16;
    Index epochs = 90;
    double lr = 5e-4;
    double lr_decay = 0.99;
    double weight_decay = 0.01;
    Index workers = 1;
    bool flip_augment = true;
    std::int64_t max_steps = -1;   // stop after this many optimizer steps; -1 = no cap
    double target_mpjpe = -1;      // early stop once train MPJPE (mm) drops below; -1 = off
    Index eval_every = 10;         // epochs between train-MPJPE evaluations
    std::string run_dir;           // empty disables checkpoint/manifest output
    std::string resume_from;       // checkpoint path

    nlohmann::json to_json() const {
        return nlohmann::json{{"batch", batch},
                              {"epochs", epochs},
                              {"lr", lr},
                              {"lr_decay", lr_decay},
                              {"weight_decay", weight_decay},
                              {"workers", workers},
                              {"flip_augment", flip_augment},
                              {"max_steps", max_steps},
                              {"target_mpjpe", target_mpjpe},
                              {"eval_every", eval_every}};
    }
};

struct EpochStat {
    Index epoch = 0;
    double mean_loss = 0;
    double lr = 0;
    double mpjpe_mm = -1;  // -1 when not evaluated this epoch
};

template <typename T>
struct TrainResult {
    std::vector<EpochStat> history;
    std::vector<double> step_losses;
    double final_loss = 0;
    double final_mpjpe = -1;
    std::int64_t steps = 0;
    std::string checkpoint_path;
    std::string manifest_path;
    std::string manifest_hash;
};

inline std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

template <typename T>
class Trainer {
public:
    Trainer(ModelConfig cfg, TrainOptions opts, PoseDataset<T> dataset)
        : cfg_(std::move(cfg)), opts_(std::move(opts)), skel_(dataset.skeleton) {
        cfg_.validate();
        dataset_hash_ = dataset_hash(dataset);
        clips_ = make_clips(dataset, cfg_.frames);
        if (clips_.empty()) throw ValueError("trainer: empty dataset");
        for (const auto& c : clips_)
            if (c.target_m.empty()) throw ValueError("trainer: dataset lacks 3D ground truth");
        Rng init_rng(cfg_.seed);
        ids_ = register_model(store_, cfg_, skel_, init_rng);
        manifest_hash_ = fnv1a_hex(cfg_.to_json().dump() + std::to_string(cfg_.seed) +
                                   dataset_hash_ + opts_.to_json().dump());
    }

    ParamStore<T>& store() { return store_; }
    const ModelIds<T>& ids() const { return ids_; }
    const ModelConfig& config() const { return cfg_; }
    const SkeletonSpec& skeleton() const { return skel_; }
    const std::vector<Clip<T>>& clips() const { return clips_; }
    const std::string& manifest_hash() const { return manifest_hash_; }

    TrainResult<T> run(bool verbose = false) {
        namespace fs = std::filesystem;
        TrainResult<T> res;
        res.manifest_hash = manifest_hash_;
        Index start_epoch = 0;
        if (!opts_.resume_from.empty()) {
            std::string meta = load_checkpoint(store_, opts_.resume_from);
            start_epoch = nlohmann::json::parse(meta).value("epoch", 0);
        }
        std::ofstream step_log;
        if (!opts_.run_dir.empty()) {
            fs::create_directories(opts_.run_dir);
            res.checkpoint_path = (fs::path(opts_.run_dir) / "checkpoint.hgm1").string();
            res.manifest_path = (fs::path(opts_.run_dir) / "manifest.json").string();
            step_log.open((fs::path(opts_.run_dir) / "train_log.csv").string(),
                          start_epoch > 0 ? std::ios::app : std::ios::trunc);
            if (start_epoch == 0) step_log << "step,epoch,lr,loss\n";
        }
        const auto t_start = std::chrono::steady_clock::now();
        std::int64_t step = store_.step();
        bool stop = false;
        for (Index epoch = start_epoch; epoch < opts_.epochs && !stop; ++epoch) {
            const double lr = lr_schedule(opts_.lr, opts_.lr_decay, epoch);
            Rng order_rng = Rng::derive({cfg_.seed, 0x0e90c4ULL, static_cast<std::uint64_t>(epoch)});
            auto order = order_rng.randperm(static_cast<Index>(clips_.size()));
            double epoch_loss = 0;
            Index epoch_batches = 0;
            for (std::size_t b0 = 0; b0 < order.size() && !stop;
                 b0 += static_cast<std::size_t>(opts_.batch)) {
                const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(opts_.batch));
                std::vector<Index> batch_clip_ids(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                                  order.begin() + static_cast<std::ptrdiff_t>(b1));
                double loss;
                try {
                    loss = train_step(batch_clip_ids, lr, step);
                } catch (const NumericError& e) {
                    throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                                       (res.checkpoint_path.empty() ? "<none>" : res.checkpoint_path));
                }
                if (!std::isfinite(loss)) {
                    throw NumericError("training diverged (non-finite loss at step " +
                                       std::to_string(step) + "); last good checkpoint: " +
                                       (res.checkpoint_path.empty() ? "<none>" : res.checkpoint_path));
                }
                ++step;
                res.step_losses.push_back(loss);
                epoch_loss += loss;
                ++epoch_batches;
                if (step_log.is_open())
                    step_log << step << "," << epoch << "," << lr << "," << loss << "\n";
                if (opts_.max_steps > 0 && step >= opts_.max_steps) stop = true;
            }
            EpochStat st;
            st.epoch = epoch;
            st.lr = lr;
            st.mean_loss = epoch_batches ? epoch_loss / double(epoch_batches) : 0.0;
            const bool eval_now = opts_.target_mpjpe > 0 &&
                                  ((epoch + 1) % opts_.eval_every == 0 || epoch + 1 == opts_.epochs || stop);
            if (eval_now) {
                st.mpjpe_mm = train_mpjpe(store_, ids_, cfg_, skel_, clips_, opts_.batch);
                if (st.mpjpe_mm < opts_.target_mpjpe) stop = true;
            }
            res.history.push_back(st);
            res.final_loss = st.mean_loss;
            if (verbose) {
                std::cerr << "epoch " << epoch << " loss " << st.mean_loss << " lr " << lr;
                if (st.mpjpe_mm >= 0) std::cerr << " train-mpjpe " << st.mpjpe_mm << " mm";
                std::cerr << "\n";
            }
            if (!opts_.run_dir.empty()) {
                nlohmann::json meta{{"config", cfg_.to_json()},
                                    {"epoch", epoch + 1},
                                    {"global_step", step},
                                    {"manifest_hash", manifest_hash_}};
                save_checkpoint(store_, res.checkpoint_path, meta.dump());
                write_manifest(res, t_start);
            }
        }
        res.steps = step;
        res.final_mpjpe = train_mpjpe(store_, ids_, cfg_, skel_, clips_, opts_.batch);
        if (!opts_.run_dir.empty()) write_manifest(res, t_start);
        return res;
    }

private:
    double train_step(const std::vector<Index>& clip_ids, double lr, std::int64_t step) {
        const Index bsz = static_cast<Index>(clip_ids.size());
        // per-clip flip augmentation, keyed so the draw is shard-independent
        std::vector<NdArray<T>> inputs, targets;
        inputs.reserve(clip_ids.size());
        targets.reserve(clip_ids.size());
        for (std::size_t i = 0; i < clip_ids.size(); ++i) {
            const Clip<T>& c = clips_[static_cast<std::size_t>(clip_ids[i])];
            bool do_flip = false;
            if (opts_.flip_augment) {
                Rng r = Rng::derive({cfg_.seed, 0xf11bULL, static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(i)});
                do_flip = r.bernoulli(0.5);
            }
            if (do_flip) {
                inputs.push_back(horizontal_flip(c.input, skel_));
                targets.push_back(horizontal_flip(c.target_m, skel_));
            } else {
                inputs.push_back(c.input);
                targets.push_back(c.target_m);
            }
        }
        const Index workers = std::max<Index>(1, std::min<Index>(opts_.workers, bsz));
        std::vector<double> shard_loss(static_cast<std::size_t>(workers), 0.0);
        std::vector<std::vector<std::pair<Index, NdArray<T>>>> shard_grads(
            static_cast<std::size_t>(workers));
        auto run_shard = [&](Index w, Index lo, Index hi) {
            std::vector<const NdArray<T>*> in_ptrs, tg_ptrs;
            for (Index i = lo; i < hi; ++i) {
                in_ptrs.push_back(&inputs[static_cast<std::size_t>(i)]);
                tg_ptrs.push_back(&targets[static_cast<std::size_t>(i)]);
            }
            Tape<T> tape;
            TapeBind<T> bind(tape, store_);
            Var x = tape.constant(stack_clips(in_ptrs));
            Var gt = tape.constant(stack_clips(tg_ptrs));
            ShuffleCtx ctx;
            ctx.training = true;
            ctx.seed = cfg_.seed;
            ctx.step = static_cast<std::uint64_t>(step);
            ctx.batch_offset = lo;
            Var pred = model_forward(bind, ids_, cfg_, x, ctx, /*update_running=*/w == 0);
            Var loss = pose_loss(tape, pred, gt, static_cast<T>(cfg_.velocity_weight), bsz);
            shard_loss[static_cast<std::size_t>(w)] = double(tape.val(loss)[0]);
            tape.backward(loss);
            shard_grads[static_cast<std::size_t>(w)] = bind.collect_grads();
        };
        if (workers == 1) {
            run_shard(0, 0, bsz);
        } else {
            std::vector<std::thread> threads;
            const Index per = (bsz + workers - 1) / workers;
            for (Index w = 0; w < workers; ++w) {
                const Index lo = w * per, hi = std::min(bsz, lo + per);
                if (lo >= hi) break;
                threads.emplace_back(run_shard, w, lo, hi);
            }
            for (auto& th : threads) th.join();
        }
        double loss = 0;
        for (Index w = 0; w < workers; ++w) loss += shard_loss[static_cast<std::size_t>(w)];
        if (!std::isfinite(loss)) return loss;  // caller aborts; no step applied
        for (Index w = 0; w < workers; ++w)
            for (auto& [idx, g] : shard_grads[static_cast<std::size_t>(w)])
                store_.accumulate_grad(idx, g);
        AdamwConfig acfg;
        acfg.lr = lr;
        acfg.weight_decay = opts_.weight_decay;
        store_.adamw_step(acfg);
        return loss;
    }

    void write_manifest(const TrainResult<T>& res,
                        std::chrono::steady_clock::time_point t_start) const {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& st : res.history) {
            nlohmann::json e{{"epoch", st.epoch}, {"loss", st.mean_loss}, {"lr", st.lr}};
            if (st.mpjpe_mm >= 0) e["train_mpjpe_mm"] = st.mpjpe_mm;
            hist.push_back(std::move(e));
        }
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        nlohmann::json m{{"manifest_hash", manifest_hash_},
                         {"config", cfg_.to_json()},
                         {"train", opts_.to_json()},
                         {"seed", cfg_.seed},
                         {"dataset_hash", dataset_hash_},
                         {"checkpoint", res.checkpoint_path},
                         {"history", std::move(hist)},
                         {"wall_clock_sec", wall}};
        std::ofstream os(res.manifest_path);
        os << m.dump(2) << "\n";
    }

    ModelConfig cfg_;
    TrainOptions opts_;
    SkeletonSpec skel_;
    std::vector<Clip<T>> clips_;
    ParamStore<T> store_;
    ModelIds<T> ids_;
    std::string dataset_hash_;
    std::string manifest_hash_;
};

// ---------------------------------------------------------------------------
// Checkpoint-driven evaluation and inference
// ---------------------------------------------------------------------------

template <typename T>
struct LoadedModel {
    ModelConfig cfg;
    ParamStore<T> store;
    ModelIds<T> ids;
    SkeletonSpec skel;
    nlohmann::json meta;
};

template <typename T>
LoadedModel<T> load_model(const std::string& checkpoint_path) {
    // peek the metadata first to learn the architecture
    std::ifstream is(checkpoint_path, std::ios::binary);
    if (!is) throw ValueError("cannot open checkpoint: " + checkpoint_path);
    detail::ByteReader r(is);
    std::string magic = r.str(4, "magic");
    if (magic != "HGM1") throw ParseError("bad checkpoint magic '" + magic + "'", 0);
    r.u32("version");
    std::uint32_t meta_len = r.u32("metadata length");
    nlohmann::json meta = nlohmann::json::parse(r.str(meta_len, "metadata"));
    is.close();

    LoadedModel<T> m;
    m.meta = meta;
    m.cfg = ModelConfig::from_json(meta.at("config"));
    m.skel = human17_skeleton();
    Rng rng(m.cfg.seed);
    m.ids = register_model(m.store, m.cfg, m.skel, rng);
    load_checkpoint(m.store, checkpoint_path);
    return m;
}

template <typename T>
EvalReport evaluate_model(LoadedModel<T>& m, const PoseDataset<T>& ds, Index batch,
                          bool flip_test, bool strict_rigid) {
    PoseDataset<T> windowed = ds;
    bool needs_window = false;
    for (const auto& s : windowed.sequences)
        if ((s.p2d.empty() ? s.p3d.dim(0) : s.p2d.dim(0)) != m.cfg.frames) needs_window = true;
    if (needs_window) windowed = window_dataset(ds, m.cfg.frames, m.cfg.frames);
    auto clips = make_clips(windowed, m.cfg.frames);
    auto [pred, gt] = predict_clips(m.store, m.ids, m.cfg, m.skel, clips, batch, flip_test);
    return evaluate_poses(pred, gt, strict_rigid, m.skel.root);
}

/// Lifts a 2-D pose file to root-relative 3-D (millimeters). Sequences longer
/// than the clip length are windowed with stride T; the tail window overlaps
/// and overwrites so every frame is covered.
template <typename T>
PoseDataset<T> infer_dataset(LoadedModel<T>& m, const PoseDataset<T>& ds, Index batch,
                             bool flip_test) {
    PoseDataset<T> out;
    out.skeleton = ds.skeleton;
    out.split = ds.split;
    const Index tt = m.cfg.frames, j = m.cfg.joints;
    for (const auto& seq : ds.sequences) {
        if (seq.p2d.empty()) throw ValueError("infer: sequence has no 2D input");
        const Index f = seq.p2d.dim(0);
        if (f < tt)
            throw ValueError("infer: sequence has " + std::to_string(f) + " frames, model needs " +
                             std::to_string(tt));
        std::vector<Index> starts;
        for (Index s = 0; s + tt <= f; s += tt) starts.push_back(s);
        if (starts.back() + tt < f) starts.push_back(f - tt);
        PoseSequence<T> res;
        res.p3d = NdArray<T>({f, j, 3});
        for (std::size_t w0 = 0; w0 < starts.size(); w0 += static_cast<std::size_t>(batch)) {
            const std::size_t w1 = std::min(starts.size(), w0 + static_cast<std::size_t>(batch));
            std::vector<NdArray<T>> ins;
            std::vector<const NdArray<T>*> ptrs;
            for (std::size_t w = w0; w < w1; ++w) {
                NdArray<T> window = slice(seq.p2d, Index(0), starts[w], tt);
                ins.push_back(normalize_2d(window, ds.skeleton.root).coords);
            }
            for (const auto& a : ins) ptrs.push_back(&a);
            NdArray<T> pred = predict_batch(m.store, m.ids, m.cfg, m.skel, stack_clips(ptrs),
                                            flip_test);
            for (std::size_t w = w0; w < w1; ++w) {
                const Index s = starts[w];
                for (Index t = 0; t < tt; ++t)
                    for (Index q = 0; q < j; ++q)
                        for (Index k = 0; k < 3; ++k)
                            res.p3d[((s + t) * j + q) * 3 + k] =
                                pred[(((static_cast<Index>(w - w0)) * tt + t) * j + q) * 3 + k];
            }
        }
        out.sequences.push_back(std::move(res));
    }
    return out;
}

}  // namespace hgm
