#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

#include "captrack/estimator.hpp"
#include "captrack/parallel.hpp"

// Supervision targets, the four-term loss, the training loop with the
// sequence-length curriculum, test-time augmentation, and checkpoints.

namespace captrack {

// ---------------------------------------------------------------------------
// Ground truth and training samples
// ---------------------------------------------------------------------------

/// One supervised frame: the network input plus derived targets. Raw joint
/// coordinates are not part of the sample, so the flip augmentation below is
/// a pure permutation of array entries.
struct TrainFrame {
    Tensor input;     // [2, rows, cols]
    Tensor heat_gt;   // [42, rows, cols], per-joint Gaussians (peak 1)
    Tensor depth_gt;  // [42, bins], one-hot rows (absent-hand rows zero)
    Tensor bones_gt;  // [2, 20] mm
    std::array<double, 2> exist_gt{0.0, 0.0};
    std::array<bool, 2> present{false, false};
};

using TrainSequence = std::vector<TrainFrame>;

inline TrainFrame make_train_frame(const NormFrame& frame, const GroundTruthFrame& gt,
                                   const EstimatorConfig& cfg, const ScreenGeometry& geom) {
    TrainFrame s;
    s.input = norm_to_tensor(frame);
    s.heat_gt = Tensor({kHeatChannels, cfg.rows, cfg.cols});
    s.depth_gt = Tensor({kHeatChannels, cfg.depth_bins});
    s.bones_gt = Tensor({2, kNumBones});
    s.present = gt.present;
    const double sigma = cfg.heatmap_sigma_px;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const int win = static_cast<int>(std::ceil(6.0 * sigma));  // e^-18 tail is negligible
    for (int hd = 0; hd < 2; ++hd) {
        if (!gt.present[static_cast<size_t>(hd)]) continue;
        s.exist_gt[static_cast<size_t>(hd)] = 1.0;
        for (int j = 0; j < kNumJoints; ++j) {
            const Vec3& p = gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)];
            int ch = hd * kNumJoints + j;
            double pc = geom.mm_to_pixel_x(p.x());
            double pr = geom.mm_to_pixel_y(p.y());
            int r0 = std::max(0, static_cast<int>(std::floor(pr)) - win);
            int r1 = std::min(cfg.rows - 1, static_cast<int>(std::ceil(pr)) + win);
            int c0 = std::max(0, static_cast<int>(std::floor(pc)) - win);
            int c1 = std::min(cfg.cols - 1, static_cast<int>(std::ceil(pc)) + win);
            for (int r = r0; r <= r1; ++r)
                for (int c = c0; c <= c1; ++c) {
                    double d2 = (c - pc) * (c - pc) + (r - pr) * (r - pr);
                    s.heat_gt(ch, r, c) = std::exp(-d2 * inv2s2);
                }
            double z = std::clamp(p.z(), cfg.depth_min_mm, cfg.depth_max_mm);
            int k = static_cast<int>(std::lround((z - cfg.bin_center(0)) / cfg.bin_width()));
            k = std::clamp(k, 0, cfg.depth_bins - 1);
            s.depth_gt(ch, k) = 1.0;
        }
        for (int b = 0; b < kNumBones; ++b) {
            const Vec3& c = gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(bone_child(b))];
            const Vec3& q = gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(bone_parent(b))];
            s.bones_gt(hd, b) = (c - q).norm();
        }
    }
    return s;
}

namespace detail {

inline void flip_w(Tensor& t) {
    const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < H; ++r) {
            double* row = t.data.data() + (static_cast<size_t>(c) * H + r) * W;
            std::reverse(row, row + W);
        }
}

inline void swap_hand_channels(Tensor& t) {
    const size_t half = t.data.size() / 2;
    for (size_t i = 0; i < half; ++i) std::swap(t.data[i], t.data[half + i]);
}

}  // namespace detail

/// Horizontal flip + left/right swap. A pure permutation of the sample's
/// arrays, hence an exact involution.
inline TrainFrame flip_train_frame(const TrainFrame& f) {
    TrainFrame g = f;
    detail::flip_w(g.input);
    detail::flip_w(g.heat_gt);
    detail::swap_hand_channels(g.heat_gt);
    detail::swap_hand_channels(g.depth_gt);
    detail::swap_hand_channels(g.bones_gt);
    std::swap(g.exist_gt[0], g.exist_gt[1]);
    std::swap(g.present[0], g.present[1]);
    return g;
}

inline Tensor hflip_input(const Tensor& x) {
    Tensor y = x;
    detail::flip_w(y);
    return y;
}

/// Mirrors an estimator output back to the unflipped frame: heatmaps flip
/// horizontally and swap hand groups, depth rows and existence swap.
inline EstimatorOutput unflip_output(const EstimatorOutput& o) {
    EstimatorOutput u = o;
    detail::flip_w(u.heat);
    detail::swap_hand_channels(u.heat);
    detail::swap_hand_channels(u.depth);
    std::swap(u.exist.data[0], u.exist.data[1]);
    return u;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double heat = 0.0, depth = 0.0, bone = 0.0, exist = 0.0, total = 0.0;
};

struct LossTrace {
    // spatial softmax per present joint channel, plus the soft positions
    std::array<Tensor, kHeatChannels> soft;      // [rows*cols] each (present only)
    std::array<Vec3, kHeatChannels> soft_pos;    // mm
    std::array<double, 2> hand_norm{};           // unused slot kept zero
    double lh = 0.0, ld = 0.0, lb = 0.0;
    Tensor bones_pred;  // [2,20]
};

inline constexpr double kBceClamp = 1e-7;

/// L = lh*||H-Hgt|| + ld*||d-dgt|| + lb*||l-lgt|| + le*BCE(E,Egt). Depth and
/// bone terms cover present hands only; absent-hand heatmap targets are zero.
/// Bone lengths derive from spatial soft-argmax plus the depth expectation,
/// which keeps the term differentiable.
inline LossBreakdown loss_forward(const EstimatorOutput& out, const TrainFrame& gt,
                                  const EstimatorConfig& cfg, const ScreenGeometry& geom,
                                  LossTrace* tr = nullptr) {
    LossBreakdown lb;
    // Heatmap term over every channel.
    double sh = 0.0;
    for (size_t i = 0; i < out.heat.data.size(); ++i) {
        double d = out.heat.data[i] - gt.heat_gt.data[i];
        sh += d * d;
    }
    lb.heat = std::sqrt(sh);

    // Depth term over present-hand rows.
    double sd = 0.0;
    for (int hd = 0; hd < 2; ++hd) {
        if (!gt.present[static_cast<size_t>(hd)]) continue;
        for (int j = 0; j < kNumJoints; ++j) {
            int ch = hd * kNumJoints + j;
            for (int k = 0; k < cfg.depth_bins; ++k) {
                double d = out.depth(ch, k) - gt.depth_gt(ch, k);
                sd += d * d;
            }
        }
    }
    lb.depth = std::sqrt(sd);

    // Bone term from soft-argmax joints.
    Tensor bones_pred({2, kNumBones});
    std::array<Tensor, kHeatChannels> soft;
    std::array<Vec3, kHeatChannels> soft_pos;
    const int hw = cfg.rows * cfg.cols;
    double sb = 0.0;
    for (int hd = 0; hd < 2; ++hd) {
        if (!gt.present[static_cast<size_t>(hd)]) continue;
        for (int j = 0; j < kNumJoints; ++j) {
            int ch = hd * kNumJoints + j;
            Tensor p({hw});
            const double* h = out.heat.data.data() + static_cast<size_t>(ch) * hw;
            double mx = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < hw; ++i) mx = std::max(mx, h[i]);
            double s = 0.0;
            for (int i = 0; i < hw; ++i) {
                p(i) = std::exp(h[i] - mx);
                s += p(i);
            }
            double x = 0.0, y = 0.0;
            for (int r = 0; r < cfg.rows; ++r)
                for (int c = 0; c < cfg.cols; ++c) {
                    double w = p(r * cfg.cols + c) / s;
                    p(r * cfg.cols + c) = w;
                    x += w * geom.pixel_to_mm_x(c);
                    y += w * geom.pixel_to_mm_y(r);
                }
            double z = 0.0;
            for (int k = 0; k < cfg.depth_bins; ++k) z += out.depth(ch, k) * cfg.bin_center(k);
            soft_pos[static_cast<size_t>(ch)] = Vec3(x, y, z);
            soft[static_cast<size_t>(ch)] = std::move(p);
        }
        for (int b = 0; b < kNumBones; ++b) {
            int cch = hd * kNumJoints + bone_child(b);
            int pch = hd * kNumJoints + bone_parent(b);
            double l = (soft_pos[static_cast<size_t>(cch)] - soft_pos[static_cast<size_t>(pch)]).norm();
            bones_pred(hd, b) = l;
            double d = l - gt.bones_gt(hd, b);
            sb += d * d;
        }
    }
    lb.bone = std::sqrt(sb);

    // Existence term: mean BCE over the two hands, inputs clamped.
    double se = 0.0;
    for (int hd = 0; hd < 2; ++hd) {
        double e = std::clamp(out.exist(hd), kBceClamp, 1.0 - kBceClamp);
        double t = gt.exist_gt[static_cast<size_t>(hd)];
        se += -(t * std::log(e) + (1.0 - t) * std::log(1.0 - e));
    }
    lb.exist = se / 2.0;

    lb.total = cfg.lambda_h * lb.heat + cfg.lambda_d * lb.depth + cfg.lambda_b * lb.bone +
               cfg.lambda_e * lb.exist;
    if (tr) {
        tr->soft = std::move(soft);
        tr->soft_pos = soft_pos;
        tr->lh = lb.heat;
        tr->ld = lb.depth;
        tr->lb = lb.bone;
        tr->bones_pred = std::move(bones_pred);
    }
    return lb;
}

/// Gradients of the total loss w.r.t. the estimator output fields.
inline OutputGrads loss_backward(const EstimatorOutput& out, const TrainFrame& gt,
                                 const EstimatorConfig& cfg, const ScreenGeometry& geom,
                                 const LossTrace& tr) {
    OutputGrads g;
    g.heat = Tensor(out.heat.shape);
    g.depth = Tensor(out.depth.shape);
    g.exist = Tensor(out.exist.shape);

    if (tr.lh > 0.0) {
        double inv = cfg.lambda_h / tr.lh;
        for (size_t i = 0; i < out.heat.data.size(); ++i)
            g.heat.data[i] = inv * (out.heat.data[i] - gt.heat_gt.data[i]);
    }
    if (tr.ld > 0.0) {
        double inv = cfg.lambda_d / tr.ld;
        for (int hd = 0; hd < 2; ++hd) {
            if (!gt.present[static_cast<size_t>(hd)]) continue;
            for (int j = 0; j < kNumJoints; ++j) {
                int ch = hd * kNumJoints + j;
                for (int k = 0; k < cfg.depth_bins; ++k)
                    g.depth(ch, k) += inv * (out.depth(ch, k) - gt.depth_gt(ch, k));
            }
        }
    }
    if (tr.lb > 0.0) {
        const int hw = cfg.rows * cfg.cols;
        // d total / d soft position, accumulated over the two bones meeting
        // at each joint.
        std::array<Vec3, kHeatChannels> gpos;
        gpos.fill(Vec3::Zero());
        for (int hd = 0; hd < 2; ++hd) {
            if (!gt.present[static_cast<size_t>(hd)]) continue;
            for (int b = 0; b < kNumBones; ++b) {
                int cch = hd * kNumJoints + bone_child(b);
                int pch = hd * kNumJoints + bone_parent(b);
                double l = tr.bones_pred(hd, b);
                if (l <= 1e-12) continue;
                double dl = cfg.lambda_b * (l - gt.bones_gt(hd, b)) / tr.lb;
                Vec3 u = (tr.soft_pos[static_cast<size_t>(cch)] - tr.soft_pos[static_cast<size_t>(pch)]) / l;
                gpos[static_cast<size_t>(cch)] += dl * u;
                gpos[static_cast<size_t>(pch)] -= dl * u;
            }
            for (int j = 0; j < kNumJoints; ++j) {
                int ch = hd * kNumJoints + j;
                const Vec3& gp = gpos[static_cast<size_t>(ch)];
                // z path: expectation over already-normalized depth rows.
                for (int k = 0; k < cfg.depth_bins; ++k)
                    g.depth(ch, k) += gp.z() * cfg.bin_center(k);
                if (gp.x() == 0.0 && gp.y() == 0.0) continue;
                // xy path: through the spatial softmax. dphi/dp_i =
                // gx*xc_i + gy*yc_i =: q_i, then dphi/dh = p .* (q - <q,p>).
                const Tensor& p = tr.soft[static_cast<size_t>(ch)];
                double qdot = 0.0;
                std::vector<double> q(static_cast<size_t>(hw));
                for (int r = 0; r < cfg.rows; ++r)
                    for (int c = 0; c < cfg.cols; ++c) {
                        int i = r * cfg.cols + c;
                        q[static_cast<size_t>(i)] =
                            gp.x() * geom.pixel_to_mm_x(c) + gp.y() * geom.pixel_to_mm_y(r);
                        qdot += q[static_cast<size_t>(i)] * p(i);
                    }
                double* gh = g.heat.data.data() + static_cast<size_t>(ch) * hw;
                for (int i = 0; i < hw; ++i)
                    gh[i] += p(i) * (q[static_cast<size_t>(i)] - qdot);
            }
        }
    }
    for (int hd = 0; hd < 2; ++hd) {
        double e = out.exist(hd);
        if (e > kBceClamp && e < 1.0 - kBceClamp) {
            double t = gt.exist_gt[static_cast<size_t>(hd)];
            g.exist(hd) = cfg.lambda_e * 0.5 * (-t / e + (1.0 - t) / (1.0 - e));
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 1000;
    int batch_size = 8;
    double lr0 = 1e-3;
    double lr_decay = 0.999;
    int n_start = 2;
    int n_step_epochs = 20;
    int n_max = 30;
    int fixed_n = 0;  // > 0: override the curriculum (short smoke runs)
    double flip_prob = 0.5;
    uint64_t seed = 0;
    int threads = 2;
    int max_steps = 0;  // > 0: stop after this many optimizer steps
    AdamConfig adam;
};

/// Window length: starts at n_start, +1 every n_step_epochs, capped at n_max.
inline int schedule_n(int epoch, const TrainConfig& c) {
    if (c.fixed_n > 0) return c.fixed_n;
    return std::min(c.n_start + epoch / c.n_step_epochs, c.n_max);
}

inline double schedule_lr(int epoch, const TrainConfig& c) {
    return c.lr0 * std::pow(c.lr_decay, epoch);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossCurveRow {
    int epoch = 0;
    int step = 0;
    LossBreakdown loss;
};

struct TrainResult {
    EstimatorParams params;
    std::vector<LossCurveRow> curve;
    int steps = 0;
};

inline void write_loss_curve_csv(const std::string& path, const std::vector<LossCurveRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write loss curve: " + path);
    out << "epoch,step,heat,depth,bone,exist,total\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step,
                      r.loss.heat, r.loss.depth, r.loss.bone, r.loss.exist, r.loss.total);
        out << buf;
    }
}

namespace detail {

struct WindowResult {
    EstimatorParams grads;          // zeroed_like clone, accumulated
    LossBreakdown loss;             // summed over the window frames
    std::vector<FrameBnStats> bn;   // per frame, forward order
    int frames = 0;
};

/// Forward+backward over one window of consecutive frames (truncated BPTT:
/// state starts at zero, gradients stop at the window boundary).
inline WindowResult run_window(const TrainSequence& seq, int start, int n, bool flip,
                               EstimatorParams& params, const ScreenGeometry& geom) {
    const EstimatorConfig& cfg = params.cfg;
    WindowResult res;
    res.grads = zeroed_like(params);
    std::vector<EstimatorTrace> traces(static_cast<size_t>(n));
    std::vector<EstimatorOutput> outs(static_cast<size_t>(n));
    std::vector<TrainFrame> frames(static_cast<size_t>(n));
    RecurrentState state = make_state(cfg);
    for (int t = 0; t < n; ++t) {
        frames[static_cast<size_t>(t)] = flip ? flip_train_frame(seq[static_cast<size_t>(start + t)])
                                              : seq[static_cast<size_t>(start + t)];
        RecurrentState next = make_state(cfg);
        FrameBnStats stats;
        outs[static_cast<size_t>(t)] =
            estimator_forward(frames[static_cast<size_t>(t)].input, state, params, next,
                              &traces[static_cast<size_t>(t)], true, false, &stats);
        res.bn.push_back(std::move(stats));
        state = std::move(next);
    }
    std::array<Tensor, 5> gstate;
    for (int k = 0; k < 5; ++k)
        gstate[static_cast<size_t>(k)] = Tensor(make_state(cfg).h[static_cast<size_t>(k)].shape);
    for (int t = n - 1; t >= 0; --t) {
        LossTrace ltr;
        LossBreakdown lb = loss_forward(outs[static_cast<size_t>(t)], frames[static_cast<size_t>(t)],
                                        cfg, geom, &ltr);
        res.loss.heat += lb.heat;
        res.loss.depth += lb.depth;
        res.loss.bone += lb.bone;
        res.loss.exist += lb.exist;
        res.loss.total += lb.total;
        OutputGrads og = loss_backward(outs[static_cast<size_t>(t)], frames[static_cast<size_t>(t)],
                                       cfg, geom, ltr);
        estimator_backward(traces[static_cast<size_t>(t)], params, res.grads, og, gstate);
        traces[static_cast<size_t>(t)] = EstimatorTrace{};  // free memory early
    }
    res.frames = n;
    return res;
}

inline void apply_bn_stats(EstimatorParams& params, const FrameBnStats& stats) {
    size_t idx = 0;
    auto fold = [&](BnParams& bn) {
        require(idx < stats.size(), "bn stats: record/layer count mismatch");
        const BnLayerStats& st = stats[idx++];
        for (size_t c = 0; c < st.mean.size(); ++c) {
            bn.run_mean(static_cast<int>(c)) = params.cfg.bn_momentum * bn.run_mean(static_cast<int>(c)) +
                                               (1.0 - params.cfg.bn_momentum) * st.mean[c];
            bn.run_var(static_cast<int>(c)) = params.cfg.bn_momentum * bn.run_var(static_cast<int>(c)) +
                                              (1.0 - params.cfg.bn_momentum) * st.var[c];
        }
    };
    for (auto& d : params.down) fold(d.bn);
    for (auto& u : params.up) fold(u.bn);
    fold(params.depth_head.feat.bn);
    fold(params.depth_head.lat.bn);
    fold(params.exist_head.feat.bn);
    fold(params.exist_head.lat.bn);
}

}  // namespace detail

/// Trains on the given sequences. Deterministic for a fixed config: window
/// starts and flips are drawn sequentially from one RNG before dispatch, and
/// worker gradients merge in sequence order.
inline TrainResult train(const std::vector<TrainSequence>& dataset, const EstimatorConfig& cfg,
                         const TrainConfig& tc, const ScreenGeometry& geom = {},
                         const std::function<void(int, const LossBreakdown&)>& on_epoch = {}) {
    require(!dataset.empty(), "train: empty dataset");
    for (const auto& s : dataset) require(!s.empty(), "train: empty sequence in dataset");
    tune_malloc_for_tensors();

    TrainResult res;
    res.params = init_estimator_params(cfg, tc.seed);
    Rng rng(tc.seed + 0x9e3779b97f4a7c15ull);

    // Adam state per trainable tensor.
    std::vector<std::pair<Tensor*, AdamState>> opt;
    std::vector<Tensor*> grad_ptrs;  // same enumeration order on the grads clone
    for_each_param(res.params, [&](const std::string&, Tensor& t, bool trainable) {
        if (trainable) opt.emplace_back(&t, AdamState(t.shape));
    });

    int64_t adam_t = 0;
    ThreadPool pool(std::max(1, tc.threads));
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const int n = schedule_n(epoch, tc);
        AdamConfig acfg = tc.adam;
        acfg.lr = schedule_lr(epoch, tc);

        std::vector<int> order(dataset.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);

        LossBreakdown epoch_loss;
        int epoch_frames = 0;
        for (size_t chunk = 0; chunk < order.size(); chunk += static_cast<size_t>(tc.batch_size)) {
            size_t count = std::min(static_cast<size_t>(tc.batch_size), order.size() - chunk);
            struct Job {
                const TrainSequence* seq;
                int start, n;
                bool flip;
            };
            std::vector<Job> jobs;
            for (size_t i = 0; i < count; ++i) {
                const TrainSequence& seq = dataset[static_cast<size_t>(order[chunk + i])];
                int len = static_cast<int>(seq.size());
                int wn = std::min(n, len);  // short sequences fall back to full length
                int start = len == wn ? 0 : rng.uniform_int(len - wn + 1);
                bool flip = rng.uniform() < tc.flip_prob;
                jobs.push_back({&seq, start, wn, flip});
            }
            std::vector<detail::WindowResult> results(jobs.size());
            pool.run(static_cast<int>(jobs.size()), [&](int i) {
                results[static_cast<size_t>(i)] =
                    detail::run_window(*jobs[static_cast<size_t>(i)].seq,
                                       jobs[static_cast<size_t>(i)].start,
                                       jobs[static_cast<size_t>(i)].n,
                                       jobs[static_cast<size_t>(i)].flip, res.params, geom);
            });

            // Merge in job order: deterministic regardless of thread timing.
            EstimatorParams grads = zeroed_like(res.params);
            std::vector<Tensor*> acc;
            for_each_param(grads, [&](const std::string&, Tensor& t, bool trainable) {
                if (trainable) acc.push_back(&t);
            });
            int total_frames = 0;
            for (auto& r : results) {
                std::vector<Tensor*> part;
                for_each_param(r.grads, [&](const std::string&, Tensor& t, bool trainable) {
                    if (trainable) part.push_back(&t);
                });
                for (size_t i = 0; i < acc.size(); ++i) *acc[i] += *part[i];
                epoch_loss.heat += r.loss.heat;
                epoch_loss.depth += r.loss.depth;
                epoch_loss.bone += r.loss.bone;
                epoch_loss.exist += r.loss.exist;
                epoch_loss.total += r.loss.total;
                total_frames += r.frames;
                epoch_frames += r.frames;
            }
            double inv = 1.0 / std::max(1, static_cast<int>(results.size()));
            for (Tensor* t : acc) *t *= inv;

            ++adam_t;
            for (size_t i = 0; i < opt.size(); ++i)
                adam_step(*opt[i].first, *acc[i], opt[i].second, adam_t, acfg);
            (void)grad_ptrs;

            for (auto& r : results)
                for (auto& fs : r.bn) detail::apply_bn_stats(res.params, fs);

            res.steps = static_cast<int>(adam_t);
            if (tc.max_steps > 0 && adam_t >= tc.max_steps) break;
        }
        if (epoch_frames > 0) {
            double inv = 1.0 / epoch_frames;
            epoch_loss.heat *= inv;
            epoch_loss.depth *= inv;
            epoch_loss.bone *= inv;
            epoch_loss.exist *= inv;
            epoch_loss.total *= inv;
        }
        res.curve.push_back({epoch, static_cast<int>(adam_t), epoch_loss});
        if (on_epoch) on_epoch(epoch, epoch_loss);
        if (tc.max_steps > 0 && adam_t >= tc.max_steps) break;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Test-time augmentation
// ---------------------------------------------------------------------------

struct TtaState {
    RecurrentState orig, flipped;
};

inline TtaState make_tta_state(const EstimatorConfig& cfg) {
    return TtaState{make_state(cfg), make_state(cfg)};
}

/// Elementwise average of the straight output and the un-mirrored flipped
/// output; depth rows are renormalized after averaging.
inline EstimatorOutput combine_tta(const EstimatorOutput& a, const EstimatorOutput& b_flipped) {
    EstimatorOutput u = unflip_output(b_flipped);
    EstimatorOutput out;
    out.heat = Tensor(a.heat.shape);
    out.depth = Tensor(a.depth.shape);
    out.exist = Tensor(a.exist.shape);
    for (size_t i = 0; i < a.heat.data.size(); ++i)
        out.heat.data[i] = (a.heat.data[i] + u.heat.data[i]) / 2.0;
    for (size_t i = 0; i < a.exist.data.size(); ++i)
        out.exist.data[i] = (a.exist.data[i] + u.exist.data[i]) / 2.0;
    for (int ch = 0; ch < a.depth.dim(0); ++ch) {
        double s = 0.0;
        for (int k = 0; k < a.depth.dim(1); ++k) {
            double v = (a.depth(ch, k) + u.depth(ch, k)) / 2.0;
            out.depth(ch, k) = v;
            s += v;
        }
        for (int k = 0; k < a.depth.dim(1); ++k) out.depth(ch, k) /= s;
    }
    return out;
}

/// Runs the frame and its mirror through the network, each with its own
/// recurrent state, and averages the aligned outputs.
inline EstimatorOutput infer_tta(const Tensor& x0, TtaState& state, EstimatorParams& params) {
    RecurrentState next_orig = make_state(params.cfg);
    RecurrentState next_flip = make_state(params.cfg);
    EstimatorOutput a = estimator_forward(x0, state.orig, params, next_orig);
    EstimatorOutput b = estimator_forward(hflip_input(x0), state.flipped, params, next_flip);
    state.orig = std::move(next_orig);
    state.flipped = std::move(next_flip);
    return combine_tta(a, b);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    EstimatorParams params;
    int epoch = 0;
    int step = 0;
};

inline void save_checkpoint(const std::string& manifest_path, const std::string& blob_path,
                            EstimatorParams& params, int epoch, int step,
                            const std::vector<std::pair<Tensor*, AdamState>>* opt = nullptr) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    std::vector<std::pair<std::string, Tensor>> adam_storage;
    for_each_param(params, [&](const std::string& name, Tensor& t, bool) {
        entries.emplace_back(name, &t);
    });
    if (opt) {
        size_t i = 0;
        for_each_param(params, [&](const std::string& name, Tensor& t, bool trainable) {
            if (!trainable) return;
            require(i < opt->size() && (*opt)[i].first == &t, "checkpoint: optimizer order mismatch");
            adam_storage.emplace_back("adam.m:" + name, (*opt)[i].second.m);
            adam_storage.emplace_back("adam.v:" + name, (*opt)[i].second.v);
            ++i;
        });
        for (auto& [n, t] : adam_storage) entries.emplace_back(n, &t);
    }
    nlohmann::json meta;
    meta["epoch"] = epoch;
    meta["step"] = step;
    meta["config"] = estimator_config_to_json(params.cfg);
    save_weights(manifest_path, blob_path, entries, meta);
}

inline Checkpoint load_checkpoint(const std::string& manifest_path) {
    WeightFile wf = load_weights(manifest_path);
    require(wf.meta.contains("config"), "checkpoint: missing config in manifest meta");
    Checkpoint ck;
    EstimatorConfig cfg = estimator_config_from_json(wf.meta["config"]);
    ck.params = init_estimator_params(cfg, 0);
    for_each_param(ck.params, [&](const std::string& name, Tensor& t, bool) {
        auto it = wf.tensors.find(name);
        require(it != wf.tensors.end(), "checkpoint: missing tensor " + name);
        require(it->second.shape == t.shape, "checkpoint: shape mismatch for " + name);
        t = it->second;
    });
    ck.epoch = wf.meta.value("epoch", 0);
    ck.step = wf.meta.value("step", 0);
    return ck;
}

}  // namespace captrack
