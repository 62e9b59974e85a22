#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "captrack/training.hpp"

using namespace captrack;

namespace {

/// Tiny network for gradient and determinism tests.
EstimatorConfig tiny_config() {
    EstimatorConfig c;
    c.encoder_widths = {2, 4, 8, 8, 16};
    c.decoder_widths = {8, 8, 8, 8, 12};
    c.head_width = 16;
    return c;
}

Tensor random_input(Rng& rng, const EstimatorConfig& cfg) {
    Tensor x({2, cfg.rows, cfg.cols});
    for (double& v : x.data) v = rng.uniform() < 0.9 ? 0.0 : rng.uniform(0.61, 1.0);
    for (size_t i = x.data.size() / 2; i < x.data.size(); ++i) x.data[i] = 1.0;
    return x;
}

GroundTruthFrame random_gt(Rng& rng, bool left, bool right) {
    GroundTruthFrame gt;
    gt.present = {left, right};
    for (int hd = 0; hd < 2; ++hd)
        for (int j = 0; j < kNumJoints; ++j)
            gt.joints[hd][j] = Vec3(rng.uniform(20.0, 320.0), rng.uniform(10.0, 180.0),
                                    rng.uniform(-5.0, 100.0));
    return gt;
}

}  // namespace

TEST_CASE("forward emits the contracted shapes at full scale") {
    EstimatorConfig cfg;  // full widths
    EstimatorParams P = init_estimator_params(cfg, 1);
    RecurrentState s0 = make_state(cfg), s1 = make_state(cfg);
    Rng rng(2);
    Tensor x = random_input(rng, cfg);
    EstimatorTrace tr;
    EstimatorOutput out = estimator_forward(x, s0, P, s1, &tr);
    CHECK(out.heat.shape == std::vector<int>{42, 96, 128});
    CHECK(out.depth.shape == std::vector<int>{42, 48});
    CHECK(out.exist.shape == std::vector<int>{2});
    // 4x3x512 bottleneck, refined by SE
    CHECK(tr.se_out.shape == std::vector<int>{512, 3, 4});
    for (int ch = 0; ch < 42; ++ch) {
        double s = 0.0;
        for (int k = 0; k < 48; ++k) s += out.depth(ch, k);
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    for (int i = 0; i < 2; ++i) {
        CHECK(out.exist(i) > 0.0);
        CHECK(out.exist(i) < 1.0);
    }
}

TEST_CASE("desk-scale config keeps head shapes and shrinks the bottleneck") {
    EstimatorConfig cfg = EstimatorConfig::desk_scale();
    EstimatorParams P = init_estimator_params(cfg, 1);
    RecurrentState s0 = make_state(cfg), s1 = make_state(cfg);
    Rng rng(3);
    Tensor x = random_input(rng, cfg);
    EstimatorTrace tr;
    EstimatorOutput out = estimator_forward(x, s0, P, s1, &tr);
    CHECK(tr.se_out.shape == std::vector<int>{64, 3, 4});
    CHECK(out.heat.shape == std::vector<int>{42, 96, 128});
    CHECK(out.depth.shape == std::vector<int>{42, 48});
    CHECK(out.exist.shape == std::vector<int>{2});
}

TEST_CASE("forward is deterministic and threads state") {
    EstimatorConfig cfg = tiny_config();
    EstimatorParams P = init_estimator_params(cfg, 7);
    Rng rng(8);
    Tensor x = random_input(rng, cfg);

    RecurrentState a0 = make_state(cfg), a1 = make_state(cfg);
    EstimatorOutput o1 = estimator_forward(x, a0, P, a1);
    RecurrentState b0 = make_state(cfg), b1 = make_state(cfg);
    EstimatorOutput o2 = estimator_forward(x, b0, P, b1);
    CHECK(o1.heat.data == o2.heat.data);
    CHECK(o1.depth.data == o2.depth.data);
    CHECK(o1.exist.data == o2.exist.data);

    // Same frame again with the updated state differs only through the state.
    RecurrentState a2 = make_state(cfg);
    EstimatorOutput o3 = estimator_forward(x, a1, P, a2);
    CHECK(o3.heat.data != o1.heat.data);

    // Re-running the two-step unroll reproduces it bit-identically.
    RecurrentState c0 = make_state(cfg), c1 = make_state(cfg), c2 = make_state(cfg);
    estimator_forward(x, c0, P, c1);
    EstimatorOutput o3b = estimator_forward(x, c1, P, c2);
    CHECK(o3b.heat.data == o3.heat.data);
    for (int k = 0; k < 5; ++k) CHECK(c2.h[k].data == a2.h[k].data);
}

TEST_CASE("flip augmentation is an exact involution") {
    EstimatorConfig cfg = tiny_config();
    Rng rng(11);
    GroundTruthFrame gt = random_gt(rng, true, true);
    NormFrame nf = preprocess(make_cap_frame());
    Rng rng2(12);
    for (double& v : nf.values) v = rng2.uniform() < 0.9 ? 0.0 : rng2.uniform(0.61, 1.0);
    TrainFrame f = make_train_frame(nf, gt, cfg, ScreenGeometry{});
    TrainFrame ff = flip_train_frame(flip_train_frame(f));
    CHECK(ff.input.data == f.input.data);
    CHECK(ff.heat_gt.data == f.heat_gt.data);
    CHECK(ff.depth_gt.data == f.depth_gt.data);
    CHECK(ff.bones_gt.data == f.bones_gt.data);
    CHECK(ff.exist_gt == f.exist_gt);
    CHECK(ff.present == f.present);
    // and the flip actually moves things
    TrainFrame once = flip_train_frame(f);
    CHECK(once.heat_gt.data != f.heat_gt.data);
}

TEST_CASE("ground-truth targets peak at the projected pixel with one-hot depth") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    GroundTruthFrame gt;
    gt.present = {false, true};
    for (int j = 0; j < kNumJoints; ++j) gt.joints[1][j] = Vec3(100.0, 60.0, 0.0);
    gt.joints[1][8] = Vec3(geom.pixel_to_mm_x(50), geom.pixel_to_mm_y(40), 2.0);
    TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
    int ch = kNumJoints + 8;
    CHECK(f.heat_gt(ch, 40, 50) == doctest::Approx(1.0));
    CHECK(f.heat_gt(ch, 40, 52) == doctest::Approx(std::exp(-4.0 / 8.0)));
    // z=2 -> nearest bin center 1.25 (k=4)
    CHECK(f.depth_gt(ch, 4) == 1.0);
    double s = 0.0;
    for (int k = 0; k < 48; ++k) s += f.depth_gt(ch, k);
    CHECK(s == 1.0);
    // absent hand rows are all zero
    for (int k = 0; k < 48; ++k) CHECK(f.depth_gt(8, k) == 0.0);
    CHECK(f.exist_gt[0] == 0.0);
    CHECK(f.exist_gt[1] == 1.0);
}

TEST_CASE("loss is zero for a perfect prediction") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(13);
    GroundTruthFrame gt = random_gt(rng, true, true);
    TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
    EstimatorOutput out;
    out.heat = f.heat_gt;
    out.depth = f.depth_gt;
    out.exist = Tensor({2}, {1.0, 1.0});
    LossTrace tr;
    LossBreakdown lb = loss_forward(out, f, cfg, geom, &tr);
    CHECK(lb.heat == 0.0);
    CHECK(lb.depth == 0.0);
    // soft-argmax bones cannot exactly reproduce gt bones, so the bone term
    // is checked separately below; with matching outputs it is small but not
    // zero. Verify the spec-exact parts:
    CHECK(lb.exist < 1e-6);
}

TEST_CASE("doubling lambda_h exactly doubles the heat contribution") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(17);
    GroundTruthFrame gt = random_gt(rng, true, false);
    TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
    EstimatorOutput out;
    out.heat = Tensor::randn({42, cfg.rows, cfg.cols}, rng, 0.1);
    out.depth = softmax(Tensor::randn({42, 48}, rng), 1);
    out.exist = sigmoid(Tensor::randn({2}, rng));
    LossBreakdown a = loss_forward(out, f, cfg, geom);
    EstimatorConfig cfg2 = cfg;
    cfg2.lambda_h *= 2.0;
    LossBreakdown b = loss_forward(out, f, cfg2, geom);
    CHECK(b.total - b.heat * 0.0 == doctest::Approx(a.total + cfg.lambda_h * a.heat).epsilon(1e-12));
    CHECK(a.heat == b.heat);  // the raw term itself is weight-free
}

TEST_CASE("loss matches a naive summation oracle") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(19);
    GroundTruthFrame gt = random_gt(rng, true, true);
    TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
    EstimatorOutput out;
    out.heat = Tensor::randn({42, cfg.rows, cfg.cols}, rng, 0.3);
    out.depth = softmax(Tensor::randn({42, 48}, rng), 1);
    out.exist = Tensor({2}, {0.3, 0.8});
    LossBreakdown lb = loss_forward(out, f, cfg, geom);

    // Independent naive recomputation.
    double sh = 0.0;
    for (size_t i = 0; i < out.heat.data.size(); ++i) {
        double d = out.heat.data[i] - f.heat_gt.data[i];
        sh += d * d;
    }
    double sd = 0.0;
    for (int ch = 0; ch < 42; ++ch)
        for (int k = 0; k < 48; ++k) {
            double d = out.depth(ch, k) - f.depth_gt(ch, k);
            sd += d * d;
        }
    // soft-argmax joints, recomputed naively
    double sb = 0.0;
    for (int hd = 0; hd < 2; ++hd) {
        std::array<Vec3, kNumJoints> pos;
        for (int j = 0; j < kNumJoints; ++j) {
            int ch = hd * kNumJoints + j;
            double mx = out.heat(ch, 0, 0);
            for (int r = 0; r < cfg.rows; ++r)
                for (int c = 0; c < cfg.cols; ++c) mx = std::max(mx, out.heat(ch, r, c));
            double den = 0.0, x = 0.0, y = 0.0;
            for (int r = 0; r < cfg.rows; ++r)
                for (int c = 0; c < cfg.cols; ++c) den += std::exp(out.heat(ch, r, c) - mx);
            for (int r = 0; r < cfg.rows; ++r)
                for (int c = 0; c < cfg.cols; ++c) {
                    double w = std::exp(out.heat(ch, r, c) - mx) / den;
                    x += w * geom.pixel_to_mm_x(c);
                    y += w * geom.pixel_to_mm_y(r);
                }
            double z = 0.0;
            for (int k = 0; k < 48; ++k) z += out.depth(ch, k) * cfg.bin_center(k);
            pos[j] = Vec3(x, y, z);
        }
        for (int b = 0; b < kNumBones; ++b) {
            double l = (pos[bone_child(b)] - pos[bone_parent(b)]).norm();
            double d = l - f.bones_gt(hd, b);
            sb += d * d;
        }
    }
    double be = 0.0;
    for (int hd = 0; hd < 2; ++hd) {
        double e = std::clamp(out.exist(hd), 1e-7, 1.0 - 1e-7);
        double t = f.exist_gt[hd];
        be += -(t * std::log(e) + (1 - t) * std::log(1 - e));
    }
    double want = cfg.lambda_h * std::sqrt(sh) + cfg.lambda_d * std::sqrt(sd) +
                  cfg.lambda_b * std::sqrt(sb) + cfg.lambda_e * (be / 2.0);
    CHECK(std::fabs(lb.total - want) < 1e-10);
}

TEST_CASE("loss gradients w.r.t. outputs match finite differences") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(23);
    GroundTruthFrame gt = random_gt(rng, true, true);
    TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
    EstimatorOutput out;
    out.heat = Tensor::randn({42, cfg.rows, cfg.cols}, rng, 0.3);
    out.depth = softmax(Tensor::randn({42, 48}, rng), 1);
    out.exist = Tensor({2}, {0.4, 0.7});
    LossTrace tr;
    loss_forward(out, f, cfg, geom, &tr);
    OutputGrads g = loss_backward(out, f, cfg, geom, tr);

    auto eval = [&] { return loss_forward(out, f, cfg, geom).total; };
    const double h = 1e-6;
    double num = 0.0, den = 0.0;
    auto probe = [&](Tensor& t, const Tensor& gt_grad, int idx) {
        double orig = t.data[idx];
        t.data[idx] = orig + h;
        double fp = eval();
        t.data[idx] = orig - h;
        double fm = eval();
        t.data[idx] = orig;
        double fd = (fp - fm) / (2 * h);
        num += (gt_grad.data[idx] - fd) * (gt_grad.data[idx] - fd);
        den += fd * fd;
    };
    for (int i = 0; i < 20; ++i)
        probe(out.heat, g.heat, rng.uniform_int(static_cast<int>(out.heat.numel())));
    for (int i = 0; i < 20; ++i)
        probe(out.depth, g.depth, rng.uniform_int(static_cast<int>(out.depth.numel())));
    probe(out.exist, g.exist, 0);
    probe(out.exist, g.exist, 1);
    double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-9);
    INFO("relative error ", rel);
    CHECK(rel < 1e-4);
}

TEST_CASE("end-to-end loss gradient through the network matches finite differences") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(29);
    GroundTruthFrame gt0 = random_gt(rng, true, false);
    GroundTruthFrame gt1 = random_gt(rng, true, true);
    NormFrame nf = preprocess(make_cap_frame());
    TrainSequence seq;
    seq.push_back(make_train_frame(nf, gt0, cfg, geom));
    seq.push_back(make_train_frame(nf, gt1, cfg, geom));
    Rng rin(31);
    seq[0].input = random_input(rin, cfg);
    seq[1].input = random_input(rin, cfg);

    EstimatorParams P = init_estimator_params(cfg, 37);
    auto total_loss = [&] {
        RecurrentState state = make_state(cfg);
        double total = 0.0;
        for (const TrainFrame& f : seq) {
            RecurrentState next = make_state(cfg);
            EstimatorOutput out = estimator_forward(f.input, state, P, next, nullptr, true, false);
            total += loss_forward(out, f, cfg, geom).total;
            state = std::move(next);
        }
        return total;
    };
    // Analytic gradient via a full BPTT window.
    auto res = detail::run_window(seq, 0, 2, false, P, geom);

    // Probe 10 random trainable parameter entries.
    std::vector<std::pair<Tensor*, Tensor*>> pairs;
    std::vector<Tensor*> ps, gs;
    for_each_param(P, [&](const std::string&, Tensor& t, bool tr) {
        if (tr) ps.push_back(&t);
    });
    for_each_param(res.grads, [&](const std::string&, Tensor& t, bool tr) {
        if (tr) gs.push_back(&t);
    });
    REQUIRE(ps.size() == gs.size());
    Rng pick(41);
    double num = 0.0, den = 0.0;
    for (int probe = 0; probe < 10; ++probe) {
        int which = pick.uniform_int(static_cast<int>(ps.size()));
        int idx = pick.uniform_int(static_cast<int>(ps[which]->numel()));
        double orig = ps[which]->data[idx];
        const double h = 1e-5;
        ps[which]->data[idx] = orig + h;
        double fp = total_loss();
        ps[which]->data[idx] = orig - h;
        double fm = total_loss();
        ps[which]->data[idx] = orig;
        double fd = (fp - fm) / (2 * h);
        double an = gs[which]->data[idx];
        num += (an - fd) * (an - fd);
        den += fd * fd;
    }
    double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-9);
    INFO("relative error ", rel);
    CHECK(rel < 1e-3);
}

TEST_CASE("schedule matches the closed forms") {
    TrainConfig tc;
    CHECK(schedule_n(0, tc) == 2);
    CHECK(schedule_n(19, tc) == 2);
    CHECK(schedule_n(20, tc) == 3);
    CHECK(schedule_n(40, tc) == 4);
    CHECK(schedule_n(559, tc) == 29);
    CHECK(schedule_n(560, tc) == 30);
    CHECK(schedule_n(600, tc) == 30);
    CHECK(schedule_n(100000, tc) == 30);
    CHECK(schedule_lr(0, tc) == 1e-3);
    CHECK(std::fabs(schedule_lr(100, tc) - 1e-3 * std::pow(0.999, 100)) < 1e-15);
    CHECK(schedule_lr(100, tc) == doctest::Approx(9.048e-4).epsilon(5e-5));
}

TEST_CASE("tta of a flip-symmetric output equals the single pass bit-exactly") {
    EstimatorConfig cfg = tiny_config();
    Rng rng(43);
    EstimatorOutput o;
    o.heat = Tensor({42, cfg.rows, cfg.cols});
    // Build a flip-symmetric output: right-hand channels are the mirrored
    // left-hand channels.
    for (int j = 0; j < kNumJoints; ++j)
        for (int r = 0; r < cfg.rows; ++r)
            for (int c = 0; c < cfg.cols; ++c) {
                double v = rng.uniform();
                o.heat(j, r, c) = v;
            }
    for (int j = 0; j < kNumJoints; ++j)
        for (int r = 0; r < cfg.rows; ++r)
            for (int c = 0; c < cfg.cols; ++c)
                o.heat(kNumJoints + j, r, c) = o.heat(j, r, cfg.cols - 1 - c);
    o.depth = Tensor({42, 48});
    for (int j = 0; j < kNumJoints; ++j) {
        int k = rng.uniform_int(48);
        o.depth(j, k) = 1.0;  // one-hot rows sum to exactly 1
        o.depth(kNumJoints + j, k) = 1.0;
    }
    o.exist = Tensor({2}, {0.75, 0.75});

    EstimatorOutput mirrored = unflip_output(o);  // what the flipped stream would emit
    EstimatorOutput combined = combine_tta(o, mirrored);
    CHECK(combined.heat.data == o.heat.data);
    CHECK(combined.depth.data == o.depth.data);
    CHECK(combined.exist.data == o.exist.data);
}

TEST_CASE("tta depth rows stay normalized for asymmetric outputs") {
    EstimatorConfig cfg = tiny_config();
    Rng rng(47);
    EstimatorOutput a, b;
    a.heat = Tensor::randn({42, cfg.rows, cfg.cols}, rng, 0.1);
    b.heat = Tensor::randn({42, cfg.rows, cfg.cols}, rng, 0.1);
    a.depth = softmax(Tensor::randn({42, 48}, rng), 1);
    b.depth = softmax(Tensor::randn({42, 48}, rng), 1);
    a.exist = sigmoid(Tensor::randn({2}, rng));
    b.exist = sigmoid(Tensor::randn({2}, rng));
    EstimatorOutput c = combine_tta(a, b);
    for (int ch = 0; ch < 42; ++ch) {
        double s = 0.0;
        for (int k = 0; k < 48; ++k) s += c.depth(ch, k);
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    // hand computation of the averaging
    EstimatorOutput u = unflip_output(b);
    for (int i = 0; i < 10; ++i) {
        int idx = rng.uniform_int(static_cast<int>(a.heat.numel()));
        CHECK(c.heat.data[idx] == doctest::Approx((a.heat.data[idx] + u.heat.data[idx]) / 2.0));
    }
}

TEST_CASE("training is bit-deterministic across thread counts") {
    EstimatorConfig cfg = tiny_config();
    ScreenGeometry geom;
    Rng rng(53);
    std::vector<TrainSequence> data;
    for (int s = 0; s < 2; ++s) {
        TrainSequence seq;
        for (int t = 0; t < 3; ++t) {
            GroundTruthFrame gt = random_gt(rng, s == 0, true);
            TrainFrame f = make_train_frame(preprocess(make_cap_frame()), gt, cfg, geom);
            Rng rin(100 + s * 10 + t);
            f.input = random_input(rin, cfg);
            seq.push_back(std::move(f));
        }
        data.push_back(std::move(seq));
    }
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.fixed_n = 2;
    tc.seed = 5;
    tc.threads = 1;
    TrainResult r1 = train(data, cfg, tc, geom);
    tc.threads = 2;
    TrainResult r2 = train(data, cfg, tc, geom);
    bool same = true;
    std::vector<Tensor*> t1, t2;
    for_each_param(r1.params, [&](const std::string&, Tensor& t, bool) { t1.push_back(&t); });
    for_each_param(r2.params, [&](const std::string&, Tensor& t, bool) { t2.push_back(&t); });
    for (size_t i = 0; i < t1.size(); ++i)
        if (t1[i]->data != t2[i]->data) same = false;
    CHECK(same);
    REQUIRE(r1.curve.size() == r2.curve.size());
    CHECK(r1.curve.back().loss.total == r2.curve.back().loss.total);
}

TEST_CASE("checkpoint round trip preserves parameters and outputs") {
    EstimatorConfig cfg = tiny_config();
    EstimatorParams P = init_estimator_params(cfg, 59);
    auto dir = std::filesystem::temp_directory_path() / "captrack_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / "model.json").string(), (dir / "model.bin").string(), P, 7, 123);
    Checkpoint ck = load_checkpoint((dir / "model.json").string());
    CHECK(ck.epoch == 7);
    CHECK(ck.step == 123);
    bool same = true;
    std::vector<Tensor*> t1, t2;
    for_each_param(P, [&](const std::string&, Tensor& t, bool) { t1.push_back(&t); });
    for_each_param(ck.params, [&](const std::string&, Tensor& t, bool) { t2.push_back(&t); });
    REQUIRE(t1.size() == t2.size());
    for (size_t i = 0; i < t1.size(); ++i)
        if (t1[i]->data != t2[i]->data) same = false;
    CHECK(same);
    Rng rng(61);
    Tensor x = random_input(rng, cfg);
    RecurrentState a0 = make_state(cfg), a1 = make_state(cfg);
    RecurrentState b0 = make_state(cfg), b1 = make_state(cfg);
    EstimatorOutput oa = estimator_forward(x, a0, P, a1);
    EstimatorOutput ob = estimator_forward(x, b0, ck.params, b1);
    CHECK(oa.heat.data == ob.heat.data);
    std::filesystem::remove_all(dir);
}
