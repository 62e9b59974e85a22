#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "captrack/adam.hpp"
#include "captrack/gradcheck.hpp"
#include "captrack/layers.hpp"

using namespace captrack;

namespace {

// Straightforward nested-loop cross-correlation, independent of the
// im2col/GEMM path under test.
Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor y({cout, oh, ow});
    for (int co = 0; co < cout; ++co)
        for (int r = 0; r < oh; ++r)
            for (int q = 0; q < ow; ++q) {
                double s = b(co);
                for (int ci = 0; ci < cin; ++ci)
                    for (int kr = 0; kr < kh; ++kr)
                        for (int kc = 0; kc < kw; ++kc) {
                            int ir = r * stride - pad + kr;
                            int ic = q * stride - pad + kc;
                            if (ir >= 0 && ir < h && ic >= 0 && ic < wd)
                                s += x(ci, ir, ic) * w(co, ci, kr, kc);
                        }
                y(co, r, q) = s;
            }
    return y;
}

}  // namespace

TEST_CASE("conv2d scalar case") {
    Tensor x({1, 1, 1}, {5.0});
    Tensor w({1, 1, 1, 1}, {2.0});
    Tensor b({1}, {0.0});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.data == dvec{10.0});
}

TEST_CASE("conv2d 4x4 ones with 3x3 ones kernel stride 2 pad 1") {
    Tensor x = Tensor::full({1, 4, 4}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor b({1});
    Tensor y = conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape == std::vector<int>{1, 2, 2});
    CHECK(y.data == dvec{4.0, 6.0, 6.0, 9.0});
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        int cin = 1 + rng.uniform_int(3), cout = 1 + rng.uniform_int(3);
        int h = 2 + rng.uniform_int(6), wd = 2 + rng.uniform_int(6);
        int k = 1 + rng.uniform_int(2) * 2;  // 1 or 3
        int stride = 1 + rng.uniform_int(2), pad = rng.uniform_int(2);
        if (h + 2 * pad < k || wd + 2 * pad < k) continue;
        Tensor x = Tensor::randn({cin, h, wd}, rng);
        Tensor w = Tensor::randn({cout, cin, k, k}, rng);
        Tensor b = Tensor::randn({cout}, rng);
        Tensor got = conv2d(x, w, b, stride, pad);
        Tensor want = conv2d_oracle(x, w, b, stride, pad);
        REQUIRE(got.shape == want.shape);
        CHECK(max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("direct 3x3 conv path matches the im2col path exactly enough") {
    Rng rng(77);
    for (int trial = 0; trial < 12; ++trial) {
        int cin = 1 + rng.uniform_int(5), cout = 1 + rng.uniform_int(5);
        int h = 3 + rng.uniform_int(9), wd = 3 + rng.uniform_int(12);
        Tensor x = Tensor::randn({cin, h, wd}, rng);
        Tensor w = Tensor::randn({cout, cin, 3, 3}, rng);
        Tensor b = Tensor::randn({cout}, rng);
        Tensor want = conv2d(x, w, b, 1, 1);
        Tensor got = Tensor::uninit({cout, h, wd});
        detail::conv3x3_fwd(x, w, b, got);
        REQUIRE(got.shape == want.shape);
        CHECK(max_abs_diff(got, want) < 1e-12);

        // backward cross-check against the generic path
        Tensor gy = Tensor::randn({cout, h, wd}, rng);
        Tensor gw1({cout, cin, 3, 3}), gb1({cout});
        Tensor gx1 = conv2d_backward(x, w, 1, 1, gy, gw1, gb1);
        Tensor gw2({cout, cin, 3, 3}), gb2({cout});
        detail::conv3x3_bwd_weight(x, gy, gw2, gb2);
        Tensor gx2({cin, h, wd});
        detail::conv3x3_bwd_input(gy, w, gx2);
        CHECK(max_abs_diff(gx1, gx2) < 1e-12);
        CHECK(max_abs_diff(gw1, gw2) < 1e-12);
        CHECK(max_abs_diff(gb1, gb2) < 1e-12);
    }
}

TEST_CASE("conv2d rejects shape mismatch") {
    Tensor x({2, 4, 4});
    Tensor w({1, 3, 3, 3});  // expects 3 input channels
    Tensor b({1});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), Error);
}

TEST_CASE("upconv2d broadcast of one source") {
    Tensor x({1, 1, 1}, {3.0});
    Tensor w = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor b({1});
    Tensor y = upconv2d(x, w, b, 2);
    REQUIRE(y.shape == std::vector<int>{1, 2, 2});
    CHECK(y.data == dvec{3.0, 3.0, 3.0, 3.0});
}

TEST_CASE("upconv2d then conv2d restores spatial dims") {
    Rng rng(1);
    Tensor x = Tensor::randn({2, 3, 4}, rng);  // H=3, W=4
    Tensor wu = Tensor::randn({2, 3, 3, 3}, rng);
    Tensor bu({3});
    Tensor up = upconv2d(x, wu, bu, 2, 1, 1);
    REQUIRE(up.shape == std::vector<int>{3, 6, 8});
    Tensor wd = Tensor::randn({2, 3, 3, 3}, rng);
    Tensor bd({2});
    Tensor down = conv2d(up, wd, bd, 2, 1);
    CHECK(down.shape == std::vector<int>{2, 3, 4});
}

TEST_CASE("upconv2d is the adjoint of conv2d") {
    // <conv(x), y> == <x, upconv(y)> for the same kernel tensor: conv reads
    // it as [Cout,Cin,k,k], upconv as [Cin_up=Cout, Cout_up=Cin, k, k].
    Rng rng(9);
    Tensor x = Tensor::randn({2, 7, 7}, rng);
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
    Tensor bc({3}), bu({2});
    Tensor cx = conv2d(x, w, bc, 2, 1);  // [3, 4, 4]
    Tensor y = Tensor::randn(cx.shape, rng);
    Tensor uy = upconv2d(y, w, bu, 2, 1, 0);  // back to [2, 7, 7]
    REQUIRE(uy.shape == x.shape);
    CHECK(dot(cx, y) == doctest::Approx(dot(x, uy)).epsilon(1e-10));
}

TEST_CASE("softmax uniform on constant input") {
    Tensor x({1, 4});
    Tensor y = softmax(x, 1);
    for (double v : y.data) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("softmax rows sum to one and rejects empty axis") {
    Rng rng(2);
    Tensor x = Tensor::randn({5, 9}, rng, 3.0);
    Tensor y = softmax(x, 1);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) {
            s += y(i, j);
            CHECK(y(i, j) > 0.0);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    Tensor e({3, 0});
    CHECK_THROWS_AS(softmax(e, 1), Error);
}

TEST_CASE("leaky relu and pooling basics") {
    Tensor x({1, 1, 1}, {-1.0});
    CHECK(leaky_relu(x, 0.01).data[0] == doctest::Approx(-0.01));
    Tensor m = Tensor::full({1, 4, 3}, 7.0);
    CHECK(global_avg_pool(m)(0) == doctest::Approx(7.0));
}

TEST_CASE("sigmoid outputs stay in (0,1)") {
    Rng rng(3);
    Tensor x = Tensor::randn({64}, rng, 5.0);
    Tensor y = sigmoid(x);
    for (double v : y.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("gru with zero parameters halves the state") {
    Rng rng(4);
    Tensor h = Tensor::randn({2, 3, 3}, rng);
    Tensor x = Tensor::randn({1, 3, 3}, rng);
    GruParams p{Tensor({2, 3, 3, 3}), Tensor({2}), Tensor({2, 3, 3, 3}),
                Tensor({2}), Tensor({2, 3, 3, 3}), Tensor({2})};
    Tensor h2 = conv_gru_step(h, x, p);
    for (size_t i = 0; i < h.data.size(); ++i)
        CHECK(h2.data[i] == doctest::Approx(0.5 * h.data[i]).epsilon(1e-12));
}

TEST_CASE("gru with very negative update bias keeps the state") {
    Rng rng(5);
    Tensor h = Tensor::randn({2, 3, 3}, rng);
    Tensor x = Tensor::randn({1, 3, 3}, rng);
    GruParams p{Tensor::randn({2, 3, 3, 3}, rng, 0.1), Tensor::full({2}, -50.0),
                Tensor::randn({2, 3, 3, 3}, rng, 0.1), Tensor({2}),
                Tensor::randn({2, 3, 3, 3}, rng, 0.1), Tensor({2})};
    Tensor h2 = conv_gru_step(h, x, p);
    CHECK(max_abs_diff(h, h2) < 1e-8);
}

TEST_CASE("gru with underflowed update gate is bit-identical") {
    Rng rng(6);
    Tensor h = Tensor::randn({2, 2, 2}, rng);
    Tensor x = Tensor::randn({1, 2, 2}, rng);
    GruParams p{Tensor({2, 3, 3, 3}), Tensor::full({2}, -1000.0),
                Tensor::randn({2, 3, 3, 3}, rng, 0.1), Tensor({2}),
                Tensor::randn({2, 3, 3, 3}, rng, 0.1), Tensor({2})};
    Tensor h2 = conv_gru_step(h, x, p);
    CHECK(h2.data == h.data);
}

TEST_CASE("se block identity and annihilation gating") {
    Rng rng(7);
    Tensor x = Tensor::randn({3, 4, 4}, rng);
    // Large positive bias saturates the excitation at 1 -> identity.
    SeParams p{Tensor({2, 3}), Tensor({2}), Tensor({3, 2}), Tensor::full({3}, 1000.0)};
    Tensor y = se_block(x, p);
    CHECK(y.data == x.data);
    // Large negative bias on channel 1 zeroes it.
    p.b2(1) = -1000.0;
    y = se_block(x, p);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(y(1, r, c) == 0.0);
}

TEST_CASE("adam zero gradient leaves params unchanged") {
    Tensor p({4}, {1.0, -2.0, 3.0, 0.5});
    Tensor g({4});
    AdamState st(p.shape);
    Tensor before = p;
    for (int i = 1; i <= 10; ++i) adam_step(p, g, st, i, AdamConfig{});
    CHECK(p.data == before.data);
}

TEST_CASE("adam first step from zero state moves by lr*g/(|g|+eps)") {
    AdamConfig cfg;
    cfg.lr = 0.01;
    Tensor p({3}, {1.0, 2.0, -3.0});
    Tensor g({3}, {0.4, -0.02, 7.0});
    AdamState st(p.shape);
    Tensor before = p;
    adam_step(p, g, st, 1, cfg);
    for (int i = 0; i < 3; ++i) {
        double want = before(i) - cfg.lr * g(i) / (std::fabs(g(i)) + cfg.eps);
        CHECK(p(i) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("adam step size approaches lr under constant gradient") {
    AdamConfig cfg;
    cfg.lr = 0.01;
    Tensor p({1}, {0.0});
    Tensor g({1}, {0.3});
    AdamState st(p.shape);
    double prev = p(0);
    double step = 0.0;
    for (int i = 1; i <= 2000; ++i) {
        adam_step(p, g, st, i, cfg);
        step = prev - p(0);
        prev = p(0);
    }
    CHECK(step == doctest::Approx(cfg.lr).epsilon(1e-3));
}

TEST_CASE("gradient suite passes at 1e-4 over 100 seeds") {
    auto results = run_gradcheck_suite(100, 1e-4);
    for (const auto& r : results) {
        INFO(r.name, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
}
