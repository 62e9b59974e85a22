#pragma once

#include <Eigen/Core>
#include <array>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <vector>

#include "captrack/adam.hpp"
#include "captrack/frames.hpp"
#include "captrack/joints.hpp"
#include "captrack/layers.hpp"
#include "captrack/weights.hpp"

// Recurrent U-Net joint estimator: five stride-2 down blocks to a 4x3
// bottleneck, SE refinement, five up blocks with skip connections, a ConvGRU
// after every up block carrying state across frames, a 1x1 conv emitting 42
// heatmaps, and two pooled heads for per-joint depth distributions and hand
// existence.

namespace captrack {

using Vec3 = Eigen::Vector3d;

inline constexpr int kHeatChannels = 2 * kNumJoints;  // left 0-20, right 21-41

struct EstimatorConfig {
    int input_channels = 2;
    int rows = 96, cols = 128;
    std::array<int, 5> encoder_widths = {32, 64, 128, 256, 512};
    std::array<int, 5> decoder_widths = {256, 128, 64, 32, 32};
    int depth_bins = 48;
    double depth_min_mm = -10.0, depth_max_mm = 110.0;
    int head_width = 128;
    double lambda_h = 10.0, lambda_d = 2.0, lambda_b = 1.0, lambda_e = 0.2;
    double heatmap_sigma_px = 2.0;
    double leaky_slope = 0.01;
    int se_reduction = 8;
    double bn_momentum = 0.9;

    double bin_width() const { return (depth_max_mm - depth_min_mm) / depth_bins; }
    double bin_center(int k) const { return depth_min_mm + bin_width() * (k + 0.5); }

    /// Desk-scale variant: encoder at 1/8 width (4x3x64 bottleneck), heads
    /// unchanged. The decoder tapers to 24 channels so 21 per-joint heatmaps
    /// stay representable by the final 1x1 conv.
    static EstimatorConfig desk_scale() {
        EstimatorConfig c;
        c.encoder_widths = {4, 8, 16, 32, 64};
        c.decoder_widths = {32, 16, 8, 8, 24};
        return c;
    }
};

inline nlohmann::json estimator_config_to_json(const EstimatorConfig& c) {
    nlohmann::json j;
    j["input_channels"] = c.input_channels;
    j["rows"] = c.rows;
    j["cols"] = c.cols;
    j["encoder_widths"] = c.encoder_widths;
    j["decoder_widths"] = c.decoder_widths;
    j["depth_bins"] = c.depth_bins;
    j["depth_range_mm"] = {c.depth_min_mm, c.depth_max_mm};
    j["head_width"] = c.head_width;
    j["loss_weights"] = {{"heat", c.lambda_h}, {"depth", c.lambda_d}, {"bone", c.lambda_b},
                         {"exist", c.lambda_e}};
    j["heatmap_sigma_px"] = c.heatmap_sigma_px;
    j["leaky_slope"] = c.leaky_slope;
    j["se_reduction"] = c.se_reduction;
    j["bn_momentum"] = c.bn_momentum;
    return j;
}

inline EstimatorConfig estimator_config_from_json(const nlohmann::json& j) {
    EstimatorConfig c;
    c.input_channels = j.value("input_channels", c.input_channels);
    c.rows = j.value("rows", c.rows);
    c.cols = j.value("cols", c.cols);
    if (j.contains("encoder_widths"))
        for (int i = 0; i < 5; ++i) c.encoder_widths[i] = j["encoder_widths"][i];
    if (j.contains("decoder_widths"))
        for (int i = 0; i < 5; ++i) c.decoder_widths[i] = j["decoder_widths"][i];
    c.depth_bins = j.value("depth_bins", c.depth_bins);
    if (j.contains("depth_range_mm")) {
        c.depth_min_mm = j["depth_range_mm"][0];
        c.depth_max_mm = j["depth_range_mm"][1];
    }
    c.head_width = j.value("head_width", c.head_width);
    if (j.contains("loss_weights")) {
        c.lambda_h = j["loss_weights"].value("heat", c.lambda_h);
        c.lambda_d = j["loss_weights"].value("depth", c.lambda_d);
        c.lambda_b = j["loss_weights"].value("bone", c.lambda_b);
        c.lambda_e = j["loss_weights"].value("exist", c.lambda_e);
    }
    c.heatmap_sigma_px = j.value("heatmap_sigma_px", c.heatmap_sigma_px);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    return c;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ConvBnParams {
    Tensor w, b;
    BnParams bn;
};

struct HeadParams {
    ConvBnParams feat;  // on the final GRU output
    ConvBnParams lat;   // on the SE-refined bottleneck
    Tensor fc_w, fc_b;
};

struct EstimatorParams {
    EstimatorConfig cfg;
    std::array<ConvBnParams, 5> down;
    SeParams se;
    std::array<ConvBnParams, 5> up;
    std::array<GruParams, 5> gru;
    Tensor out_w, out_b;
    HeadParams depth_head, exist_head;
};

namespace detail {

inline ConvBnParams make_conv_bn(int cout, int cin, int k, Rng& rng) {
    ConvBnParams p;
    double std = std::sqrt(2.0 / (cin * k * k));
    p.w = Tensor::randn({cout, cin, k, k}, rng, std);
    p.b = Tensor::zeros({cout});
    p.bn = BnParams(cout);
    return p;
}

inline ConvBnParams make_upconv_bn(int cin, int cout, int k, Rng& rng) {
    ConvBnParams p;
    double std = std::sqrt(2.0 / (cin * k * k));
    p.w = Tensor::randn({cin, cout, k, k}, rng, std);
    p.b = Tensor::zeros({cout});
    p.bn = BnParams(cout);
    return p;
}

inline GruParams make_gru(int ch, int cx, Rng& rng) {
    double std = std::sqrt(1.0 / ((ch + cx) * 9));
    GruParams p;
    p.wz = Tensor::randn({ch, ch + cx, 3, 3}, rng, std);
    p.bz = Tensor::zeros({ch});
    p.wr = Tensor::randn({ch, ch + cx, 3, 3}, rng, std);
    p.br = Tensor::zeros({ch});
    p.wc = Tensor::randn({ch, ch + cx, 3, 3}, rng, std);
    p.bc = Tensor::zeros({ch});
    return p;
}

/// Channels of the skip feature concatenated after up block k.
inline int skip_channels(const EstimatorConfig& c, int k) {
    return k < 4 ? c.encoder_widths[static_cast<size_t>(3 - k)] : c.input_channels;
}

}  // namespace detail

inline EstimatorParams init_estimator_params(const EstimatorConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    EstimatorParams p;
    p.cfg = cfg;
    int cin = cfg.input_channels;
    for (int k = 0; k < 5; ++k) {
        p.down[static_cast<size_t>(k)] = detail::make_conv_bn(cfg.encoder_widths[static_cast<size_t>(k)], cin, 3, rng);
        cin = cfg.encoder_widths[static_cast<size_t>(k)];
    }
    int bott = cfg.encoder_widths[4];
    int se_hidden = std::max(1, bott / cfg.se_reduction);
    double se_std = std::sqrt(2.0 / bott);
    p.se.w1 = Tensor::randn({se_hidden, bott}, rng, se_std);
    p.se.b1 = Tensor::zeros({se_hidden});
    p.se.w2 = Tensor::randn({bott, se_hidden}, rng, std::sqrt(2.0 / se_hidden));
    p.se.b2 = Tensor::zeros({bott});
    int prev = bott;
    for (int k = 0; k < 5; ++k) {
        int cout = cfg.decoder_widths[static_cast<size_t>(k)];
        p.up[static_cast<size_t>(k)] = detail::make_upconv_bn(prev, cout, 3, rng);
        p.gru[static_cast<size_t>(k)] = detail::make_gru(cout, cout + detail::skip_channels(cfg, k), rng);
        prev = cout;
    }
    p.out_w = Tensor::randn({kHeatChannels, prev, 1, 1}, rng, std::sqrt(2.0 / prev));
    p.out_b = Tensor::zeros({kHeatChannels});
    auto make_head = [&](int fc_out) {
        HeadParams h;
        h.feat = detail::make_conv_bn(cfg.head_width, prev, 1, rng);
        h.lat = detail::make_conv_bn(cfg.head_width, bott, 1, rng);
        h.fc_w = Tensor::randn({fc_out, 2 * cfg.head_width}, rng,
                               std::sqrt(1.0 / (2.0 * cfg.head_width)));
        h.fc_b = Tensor::zeros({fc_out});
        return h;
    };
    p.depth_head = make_head(kHeatChannels * cfg.depth_bins);
    p.exist_head = make_head(2);
    return p;
}

/// Enumerates every parameter tensor with a stable name. Running batch-norm
/// statistics are enumerated with trainable=false (saved, never Adam-stepped).
inline void for_each_param(EstimatorParams& p,
                           const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    auto conv_bn = [&](const std::string& base, ConvBnParams& c) {
        fn(base + ".w", c.w, true);
        fn(base + ".b", c.b, true);
        fn(base + ".bn.gamma", c.bn.gamma, true);
        fn(base + ".bn.beta", c.bn.beta, true);
        fn(base + ".bn.run_mean", c.bn.run_mean, false);
        fn(base + ".bn.run_var", c.bn.run_var, false);
    };
    for (int k = 0; k < 5; ++k) conv_bn("down" + std::to_string(k), p.down[static_cast<size_t>(k)]);
    fn("se.w1", p.se.w1, true);
    fn("se.b1", p.se.b1, true);
    fn("se.w2", p.se.w2, true);
    fn("se.b2", p.se.b2, true);
    for (int k = 0; k < 5; ++k) {
        conv_bn("up" + std::to_string(k), p.up[static_cast<size_t>(k)]);
        auto& g = p.gru[static_cast<size_t>(k)];
        std::string base = "gru" + std::to_string(k);
        fn(base + ".wz", g.wz, true);
        fn(base + ".bz", g.bz, true);
        fn(base + ".wr", g.wr, true);
        fn(base + ".br", g.br, true);
        fn(base + ".wc", g.wc, true);
        fn(base + ".bc", g.bc, true);
    }
    fn("out.w", p.out_w, true);
    fn("out.b", p.out_b, true);
    auto head = [&](const std::string& base, HeadParams& h) {
        conv_bn(base + ".feat", h.feat);
        conv_bn(base + ".lat", h.lat);
        fn(base + ".fc.w", h.fc_w, true);
        fn(base + ".fc.b", h.fc_b, true);
    };
    head("depth_head", p.depth_head);
    head("exist_head", p.exist_head);
}

inline EstimatorParams zeroed_like(const EstimatorParams& p) {
    EstimatorParams g = p;
    for_each_param(g, [](const std::string&, Tensor& t, bool) { t.zero(); });
    return g;
}

// ---------------------------------------------------------------------------
// Recurrent state and outputs
// ---------------------------------------------------------------------------

struct RecurrentState {
    std::array<Tensor, 5> h;
    int64_t frame_index = 0;
};

inline RecurrentState make_state(const EstimatorConfig& cfg) {
    RecurrentState s;
    int rows = cfg.rows, cols = cfg.cols;
    std::array<int, 5> hs = {rows / 16, rows / 8, rows / 4, rows / 2, rows};
    std::array<int, 5> ws = {cols / 16, cols / 8, cols / 4, cols / 2, cols};
    for (int k = 0; k < 5; ++k)
        s.h[static_cast<size_t>(k)] =
            Tensor({cfg.decoder_widths[static_cast<size_t>(k)], hs[static_cast<size_t>(k)], ws[static_cast<size_t>(k)]});
    return s;
}

struct EstimatorOutput {
    Tensor heat;   // [42, rows, cols]
    Tensor depth;  // [42, bins], rows softmax-normalized
    Tensor exist;  // [2] in (0,1)
};

/// Per-frame supervision source: joint positions in screen-frame mm with
/// presence flags (absent hands keep zeroed sentinel joints).
struct GroundTruthFrame {
    std::array<std::array<Vec3, kNumJoints>, 2> joints;  // [hand][joint]
    std::array<bool, 2> present{false, false};

    GroundTruthFrame() {  // Eigen vectors do not zero themselves
        for (auto& hand : joints) hand.fill(Vec3::Zero());
    }
};

inline Tensor norm_to_tensor(const NormFrame& f) {
    Tensor t({2, f.rows, f.cols});
    std::memcpy(t.data.data(), f.values.data(), f.values.size() * sizeof(double));
    std::memcpy(t.data.data() + f.values.size(), f.validity.data(),
                f.validity.size() * sizeof(double));
    return t;
}

// ---------------------------------------------------------------------------
// Forward pass (with optional trace for backprop)
// ---------------------------------------------------------------------------

struct ConvBnTrace {
    Tensor in;  // conv input
    BnCache bn; // xhat + invstd; the leaky-relu mask is recomputed from these
};

struct UpLevelTrace {
    ConvBnTrace block;
    GruCache gru;  // holds [h, x] so nothing else needs keeping
};

struct HeadTrace {
    ConvBnTrace feat, lat;
    Tensor fcat;
    Tensor out;  // post softmax / sigmoid
};

struct EstimatorTrace {
    Tensor x0;
    std::array<ConvBnTrace, 5> down;
    Tensor se_in;
    SeCache se;
    Tensor se_out;
    std::array<UpLevelTrace, 5> up;
    Tensor final_in;  // h of the last GRU
    HeadTrace depth_head, exist_head;
};

/// Per-frame batch-norm statistics, recorded so a training driver can fold
/// them into the running stats deterministically outside worker threads.
using BnLayerStats = BnBatchStats;
using FrameBnStats = std::vector<BnLayerStats>;  // canonical forward order

namespace detail {

inline Tensor bn_lrelu(Tensor pre, ConvBnParams& p, bool train, double momentum, double slope,
                       ConvBnTrace* tr, bool update_running, FrameBnStats* stats) {
    BnBatchStats* st = nullptr;
    if (stats && train) {
        stats->emplace_back();
        st = &stats->back();
    }
    Tensor bn_out = batch_norm(pre, p.bn, train, momentum, 1e-5, tr ? &tr->bn : nullptr,
                               update_running, st);
    return leaky_relu(bn_out, slope);
}

inline Tensor conv_bn_lrelu(const Tensor& x, ConvBnParams& p, int stride, int pad, bool train,
                            double momentum, double slope, ConvBnTrace* tr, bool update_running,
                            FrameBnStats* stats) {
    Tensor pre = conv2d(x, p.w, p.b, stride, pad);
    if (tr) tr->in = x;
    return bn_lrelu(std::move(pre), p, train, momentum, slope, tr, update_running, stats);
}

inline Tensor upconv_bn_lrelu(const Tensor& x, ConvBnParams& p, bool train, double momentum,
                              double slope, ConvBnTrace* tr, bool update_running,
                              FrameBnStats* stats) {
    Tensor pre = upconv2d(x, p.w, p.b, 2, 1, 1);
    if (tr) tr->in = x;
    return bn_lrelu(std::move(pre), p, train, momentum, slope, tr, update_running, stats);
}

/// Gradient of leaky_relu(bn_out) w.r.t. bn_out, with the activation sign
/// reconstructed from the cached normalized values.
inline Tensor lrelu_bwd_from_bn(const ConvBnParams& p, const BnCache& cache, double slope,
                                const Tensor& gact) {
    const int C = gact.dim(0);
    const size_t n = gact.numel() / static_cast<size_t>(C);
    Tensor gbn = Tensor::uninit(gact.shape);
    for (int c = 0; c < C; ++c) {
        const double* xh = cache.xhat.data.data() + c * n;
        const double* ga = gact.data.data() + c * n;
        double* gb = gbn.data.data() + c * n;
        double g = p.bn.gamma(c), b = p.bn.beta(c);
        for (size_t i = 0; i < n; ++i)
            gb[i] = (g * xh[i] + b > 0.0) ? ga[i] : slope * ga[i];
    }
    return gbn;
}

/// conv1x1 + BN + leaky ReLU + global average pool, with the normalization,
/// activation, and pooling fused into one pass over the conv output.
///
/// The heads always normalize with the running statistics, in training too:
/// per-frame statistics would zero-mean every channel before the pooling and
/// strip exactly the level information these heads read. Batch statistics
/// are still recorded so the training driver keeps the running estimates
/// moving.
inline Tensor head_branch(const Tensor& x, ConvBnParams& p, bool train, double momentum,
                          double slope, ConvBnTrace* tr, bool update_running,
                          FrameBnStats* stats) {
    Tensor pre = conv2d(x, p.w, p.b, 1, 0);
    if (tr) tr->in = x;
    const int C = pre.dim(0);
    const size_t n = pre.numel() / static_cast<size_t>(C);
    BnBatchStats* st = nullptr;
    if (stats && train) {
        stats->emplace_back();
        st = &stats->back();
        st->mean.assign(static_cast<size_t>(C), 0.0);
        st->var.assign(static_cast<size_t>(C), 0.0);
    }
    if (tr) {
        tr->bn.xhat = Tensor::uninit(pre.shape);
        tr->bn.invstd.assign(static_cast<size_t>(C), 0.0);
        tr->bn.train = false;  // stats are constants for the backward pass
    }
    Tensor out = Tensor::uninit({C});
    for (int c = 0; c < C; ++c) {
        const double* xc = pre.data.data() + c * n;
        if (train && (st || update_running)) {
            double s = 0.0;
            for (size_t i = 0; i < n; ++i) s += xc[i];
            double bmean = s / static_cast<double>(n);
            double sv = 0.0;
            for (size_t i = 0; i < n; ++i) sv += (xc[i] - bmean) * (xc[i] - bmean);
            double bvar = sv / static_cast<double>(n);
            if (update_running) {
                p.bn.run_mean(c) = momentum * p.bn.run_mean(c) + (1.0 - momentum) * bmean;
                p.bn.run_var(c) = momentum * p.bn.run_var(c) + (1.0 - momentum) * bvar;
            }
            if (st) {
                st->mean[static_cast<size_t>(c)] = bmean;
                st->var[static_cast<size_t>(c)] = bvar;
            }
        }
        const double mean = p.bn.run_mean(c);
        const double var = p.bn.run_var(c);
        const double invstd = 1.0 / std::sqrt(var + 1e-5);
        const double g = p.bn.gamma(c), b = p.bn.beta(c);
        double acc = 0.0;
        if (tr) {
            double* xh = tr->bn.xhat.data.data() + c * n;
            tr->bn.invstd[static_cast<size_t>(c)] = invstd;
            for (size_t i = 0; i < n; ++i) {
                double h = (xc[i] - mean) * invstd;
                xh[i] = h;
                double a = g * h + b;
                acc += a > 0.0 ? a : slope * a;
            }
        } else {
            for (size_t i = 0; i < n; ++i) {
                double a = g * ((xc[i] - mean) * invstd) + b;
                acc += a > 0.0 ? a : slope * a;
            }
        }
        out(c) = acc / static_cast<double>(n);
    }
    return out;
}

}  // namespace detail

inline EstimatorOutput estimator_forward(const Tensor& x0, const RecurrentState& state,
                                         EstimatorParams& P, RecurrentState& state_out,
                                         EstimatorTrace* tr = nullptr, bool train = false,
                                         bool update_running = false,
                                         FrameBnStats* stats = nullptr) {
    const EstimatorConfig& cfg = P.cfg;
    require(x0.rank() == 3 && x0.dim(0) == cfg.input_channels && x0.dim(1) == cfg.rows &&
                x0.dim(2) == cfg.cols,
            "estimator_forward: input must be [" + std::to_string(cfg.input_channels) + "," +
                std::to_string(cfg.rows) + "," + std::to_string(cfg.cols) + "]");
    if (tr) tr->x0 = x0;

    // Encoder.
    std::array<Tensor, 5> enc;
    const Tensor* cur = &x0;
    for (int k = 0; k < 5; ++k) {
        enc[static_cast<size_t>(k)] = detail::conv_bn_lrelu(
            *cur, P.down[static_cast<size_t>(k)], 2, 1, train, cfg.bn_momentum, cfg.leaky_slope,
            tr ? &tr->down[static_cast<size_t>(k)] : nullptr, update_running, stats);
        cur = &enc[static_cast<size_t>(k)];
    }
    if (tr) tr->se_in = enc[4];
    Tensor lat = se_block(enc[4], P.se, tr ? &tr->se : nullptr);
    if (tr) tr->se_out = lat;

    // Decoder with skips and per-level ConvGRU.
    Tensor d = lat;
    for (int k = 0; k < 5; ++k) {
        UpLevelTrace* ut = tr ? &tr->up[static_cast<size_t>(k)] : nullptr;
        Tensor u = detail::upconv_bn_lrelu(d, P.up[static_cast<size_t>(k)], train, cfg.bn_momentum,
                                           cfg.leaky_slope, ut ? &ut->block : nullptr,
                                           update_running, stats);
        const Tensor& skip = k < 4 ? enc[static_cast<size_t>(3 - k)] : x0;
        Tensor cat = concat_channels(u, skip);
        Tensor h_new = conv_gru_step(state.h[static_cast<size_t>(k)], cat,
                                     P.gru[static_cast<size_t>(k)], ut ? &ut->gru : nullptr);
        state_out.h[static_cast<size_t>(k)] = h_new;
        d = std::move(h_new);
    }
    state_out.frame_index = state.frame_index + 1;
    if (tr) tr->final_in = d;

    EstimatorOutput out;
    out.heat = conv2d(d, P.out_w, P.out_b, 1, 0);

    auto run_head = [&](HeadParams& h, HeadTrace* ht, int fc_rows, int fc_cols, bool is_softmax) {
        Tensor f1 = detail::head_branch(d, h.feat, train, cfg.bn_momentum, cfg.leaky_slope,
                                        ht ? &ht->feat : nullptr, update_running, stats);
        Tensor f2 = detail::head_branch(lat, h.lat, train, cfg.bn_momentum, cfg.leaky_slope,
                                        ht ? &ht->lat : nullptr, update_running, stats);
        Tensor fcat({f1.dim(0) + f2.dim(0)});
        std::memcpy(fcat.data.data(), f1.data.data(), f1.data.size() * sizeof(double));
        std::memcpy(fcat.data.data() + f1.data.size(), f2.data.data(),
                    f2.data.size() * sizeof(double));
        Tensor logits = fully_connected(fcat, h.fc_w, h.fc_b);
        Tensor shaped = fc_cols > 1 ? Tensor({fc_rows, fc_cols}, std::move(logits.data)) : logits;
        Tensor outp = is_softmax ? softmax(shaped, 1) : sigmoid(shaped);
        if (ht) {
            ht->fcat = std::move(fcat);
            ht->out = outp;
        }
        return outp;
    };
    out.depth = run_head(P.depth_head, tr ? &tr->depth_head : nullptr, kHeatChannels,
                         cfg.depth_bins, true);
    out.exist = run_head(P.exist_head, tr ? &tr->exist_head : nullptr, 2, 1, false);
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass through one frame
// ---------------------------------------------------------------------------

struct OutputGrads {
    Tensor heat, depth, exist;
};

/// Backpropagates one frame. `gstate` carries gradients w.r.t. this frame's
/// *output* state on entry and gradients w.r.t. the *input* state on exit.
inline void estimator_backward(const EstimatorTrace& tr, EstimatorParams& P,
                               EstimatorParams& grads, const OutputGrads& go,
                               std::array<Tensor, 5>& gstate) {
    const EstimatorConfig& cfg = P.cfg;

    auto conv_bn_bwd = [&](const ConvBnTrace& t, ConvBnParams& p, ConvBnParams& gp, int stride,
                           int pad, const Tensor& gact) {
        Tensor gbn = detail::lrelu_bwd_from_bn(p, t.bn, cfg.leaky_slope, gact);
        Tensor gpre = batch_norm_backward(p.bn, t.bn, gbn, gp.bn.gamma, gp.bn.beta);
        return conv2d_backward(t.in, p.w, stride, pad, gpre, gp.w, gp.b);
    };
    auto upconv_bn_bwd = [&](const ConvBnTrace& t, ConvBnParams& p, ConvBnParams& gp,
                             const Tensor& gact) {
        Tensor gbn = detail::lrelu_bwd_from_bn(p, t.bn, cfg.leaky_slope, gact);
        Tensor gpre = batch_norm_backward(p.bn, t.bn, gbn, gp.bn.gamma, gp.bn.beta);
        return upconv2d_backward(t.in, p.w, 2, 1, 1, gpre, gp.w, gp.b);
    };

    Tensor gfinal(tr.final_in.shape);
    Tensor gse_out(tr.se_out.shape);

    auto head_bwd = [&](const HeadTrace& ht, HeadParams& h, HeadParams& gh, const Tensor& gout,
                        bool is_softmax) {
        Tensor gshaped = is_softmax ? softmax_backward(ht.out, 1, gout)
                                    : sigmoid_backward(ht.out, gout);
        const int n_logits = static_cast<int>(gshaped.numel());
        Tensor glogits({n_logits}, std::move(gshaped.data));
        Tensor gfcat = fully_connected_backward(ht.fcat, h.fc_w, glogits, gh.fc_w, gh.fc_b);
        Tensor gf1({cfg.head_width}), gf2({cfg.head_width});
        std::memcpy(gf1.data.data(), gfcat.data.data(), gf1.data.size() * sizeof(double));
        std::memcpy(gf2.data.data(), gfcat.data.data() + gf1.data.size(),
                    gf2.data.size() * sizeof(double));
        // feat branch: gap -> lrelu -> bn -> conv, into the final GRU output
        Tensor gact1 = global_avg_pool_backward(
            {cfg.head_width, tr.final_in.dim(1), tr.final_in.dim(2)}, gf1);
        gfinal += conv_bn_bwd(ht.feat, h.feat, gh.feat, 1, 0, gact1);
        Tensor gact2 = global_avg_pool_backward(
            {cfg.head_width, tr.se_out.dim(1), tr.se_out.dim(2)}, gf2);
        gse_out += conv_bn_bwd(ht.lat, h.lat, gh.lat, 1, 0, gact2);
    };

    head_bwd(tr.depth_head, P.depth_head, grads.depth_head, go.depth, true);
    head_bwd(tr.exist_head, P.exist_head, grads.exist_head, go.exist, false);
    gfinal += conv2d_backward(tr.final_in, P.out_w, 1, 0, go.heat, grads.out_w, grads.out_b);

    // Decoder in reverse. At each level the gradient w.r.t. the GRU output is
    // the sum of what arrives from above (heads + heatmap conv at the top,
    // otherwise the next up block's input gradient) and the next frame's
    // state gradient. gstate[k] is consumed before being replaced by the
    // gradient w.r.t. this frame's input state.
    Tensor gx0(tr.x0.shape);
    std::array<Tensor, 5> genc;
    for (int k = 0; k < 5; ++k)
        genc[static_cast<size_t>(k)] = Tensor(tr.down[static_cast<size_t>(k)].bn.xhat.shape);

    Tensor gfrom_above = std::move(gfinal);
    for (int k = 4; k >= 0; --k) {
        Tensor gh_new = std::move(gfrom_above);
        gh_new += gstate[static_cast<size_t>(k)];
        const UpLevelTrace& ut = tr.up[static_cast<size_t>(k)];
        int up_ch_k = cfg.decoder_widths[static_cast<size_t>(k)];
        int x_channels = ut.gru.cat1.dim(0) - up_ch_k;
        GruStepGrads sg = conv_gru_backward(P.gru[static_cast<size_t>(k)], ut.gru, x_channels,
                                            gh_new, grads.gru[static_cast<size_t>(k)]);
        gstate[static_cast<size_t>(k)] = std::move(sg.gh);
        Tensor gup({up_ch_k, sg.gx.dim(1), sg.gx.dim(2)});
        Tensor gskip({sg.gx.dim(0) - up_ch_k, sg.gx.dim(1), sg.gx.dim(2)});
        split_channels(sg.gx, gup, gskip);
        if (k < 4)
            genc[static_cast<size_t>(3 - k)] += gskip;
        else
            gx0 += gskip;
        Tensor gin = upconv_bn_bwd(ut.block, P.up[static_cast<size_t>(k)],
                                   grads.up[static_cast<size_t>(k)], gup);
        if (k == 0)
            gse_out += gin;
        else
            gfrom_above = std::move(gin);
    }

    genc[4] += se_block_backward(tr.se_in, P.se, tr.se, gse_out, grads.se);
    for (int k = 4; k >= 0; --k) {
        Tensor gin = conv_bn_bwd(tr.down[static_cast<size_t>(k)], P.down[static_cast<size_t>(k)],
                                 grads.down[static_cast<size_t>(k)], 2, 1,
                                 genc[static_cast<size_t>(k)]);
        if (k > 0)
            genc[static_cast<size_t>(k - 1)] += gin;
        else
            gx0 += gin;
    }
    // gx0 is not propagated further; inputs are data.
    (void)gx0;
}

}  // namespace captrack
