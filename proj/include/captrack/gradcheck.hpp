#pragma once

#include <functional>
#include <string>
#include <vector>

#include "captrack/layers.hpp"

// Central finite-difference verification of every layer's analytic gradient.
// The checks evaluate the forward path only, so they stay independent of the
// backward implementations they validate.

namespace captrack {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace detail {

/// Central finite differences of `eval` w.r.t. every element of `target`,
/// compared against `analytic` via relative L2 error.
inline double fd_rel_error(Tensor& target, const Tensor& analytic,
                           const std::function<double()>& eval, double h = 1e-4) {
    Tensor fd(target.shape);
    for (size_t i = 0; i < target.data.size(); ++i) {
        double orig = target.data[i];
        target.data[i] = orig + h;
        double fp = eval();
        target.data[i] = orig - h;
        double fm = eval();
        target.data[i] = orig;
        fd.data[i] = (fp - fm) / (2.0 * h);
    }
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < fd.data.size(); ++i) {
        double d = analytic.data[i] - fd.data[i];
        num += d * d;
        den += fd.data[i] * fd.data[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace detail

/// Runs every op's gradient check over `seeds` random draws; an op passes if
/// its worst relative error stays below `tol`.
inline std::vector<GradCheckResult> run_gradcheck_suite(int seeds = 100, double tol = 1e-4) {
    std::vector<GradCheckResult> results;

    auto check = [&](const std::string& name,
                     const std::function<double(Rng&)>& one_seed) {
        GradCheckResult res{name, 0.0, false};
        for (int s = 0; s < seeds; ++s) {
            Rng rng(1000 + static_cast<uint64_t>(s));
            res.max_rel_err = std::max(res.max_rel_err, one_seed(rng));
        }
        res.pass = res.max_rel_err < tol;
        results.push_back(res);
        return res;
    };

    check("conv2d", [](Rng& rng) {
        Tensor x = Tensor::randn({3, 5, 4}, rng);
        Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 0.5);
        Tensor b = Tensor::randn({4}, rng, 0.2);
        Tensor c = Tensor::randn({4, 3, 2}, rng);
        auto eval = [&] { return dot(conv2d(x, w, b, 2, 1), c); };
        Tensor gw(w.shape), gb(b.shape);
        Tensor gx = conv2d_backward(x, w, 2, 1, c, gw, gb);
        double e = detail::fd_rel_error(x, gx, eval);
        e = std::max(e, detail::fd_rel_error(w, gw, eval));
        e = std::max(e, detail::fd_rel_error(b, gb, eval));
        return e;
    });

    check("upconv2d", [](Rng& rng) {
        Tensor x = Tensor::randn({3, 3, 2}, rng);
        Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.5);
        Tensor b = Tensor::randn({2}, rng, 0.2);
        Tensor c = Tensor::randn({2, 6, 4}, rng);
        auto eval = [&] { return dot(upconv2d(x, w, b, 2, 1, 1), c); };
        Tensor gw(w.shape), gb(b.shape);
        Tensor gx = upconv2d_backward(x, w, 2, 1, 1, c, gw, gb);
        double e = detail::fd_rel_error(x, gx, eval);
        e = std::max(e, detail::fd_rel_error(w, gw, eval));
        e = std::max(e, detail::fd_rel_error(b, gb, eval));
        return e;
    });

    check("batch_norm", [](Rng& rng) {
        Tensor x = Tensor::randn({3, 4, 5}, rng);
        BnParams p(3);
        for (int c = 0; c < 3; ++c) {
            p.gamma(c) = 1.0 + 0.3 * rng.normal();
            p.beta(c) = 0.2 * rng.normal();
        }
        Tensor c = Tensor::randn({3, 4, 5}, rng);
        auto eval = [&] {
            return dot(batch_norm(x, p, true, 0.9, 1e-5, nullptr, false), c);
        };
        BnCache cache;
        batch_norm(x, p, true, 0.9, 1e-5, &cache, false);
        Tensor gg(p.gamma.shape), gb(p.beta.shape);
        Tensor gx = batch_norm_backward(p, cache, c, gg, gb);
        double e = detail::fd_rel_error(x, gx, eval);
        e = std::max(e, detail::fd_rel_error(p.gamma, gg, eval));
        e = std::max(e, detail::fd_rel_error(p.beta, gb, eval));
        return e;
    });

    check("leaky_relu", [](Rng& rng) {
        Tensor x = Tensor::randn({3, 4, 2}, rng);
        Tensor c = Tensor::randn({3, 4, 2}, rng);
        auto eval = [&] { return dot(leaky_relu(x, 0.01), c); };
        Tensor gx = leaky_relu_backward(x, 0.01, c);
        return detail::fd_rel_error(x, gx, eval);
    });

    check("sigmoid", [](Rng& rng) {
        Tensor x = Tensor::randn({10}, rng);
        Tensor c = Tensor::randn({10}, rng);
        auto eval = [&] { return dot(sigmoid(x), c); };
        Tensor gx = sigmoid_backward(sigmoid(x), c);
        return detail::fd_rel_error(x, gx, eval);
    });

    check("tanh", [](Rng& rng) {
        Tensor x = Tensor::randn({10}, rng);
        Tensor c = Tensor::randn({10}, rng);
        auto eval = [&] { return dot(tanh_op(x), c); };
        Tensor gx = tanh_backward(tanh_op(x), c);
        return detail::fd_rel_error(x, gx, eval);
    });

    check("softmax", [](Rng& rng) {
        Tensor x = Tensor::randn({4, 6}, rng);
        Tensor c = Tensor::randn({4, 6}, rng);
        auto eval = [&] { return dot(softmax(x, 1), c); };
        Tensor gx = softmax_backward(softmax(x, 1), 1, c);
        return detail::fd_rel_error(x, gx, eval);
    });

    check("fully_connected", [](Rng& rng) {
        Tensor x = Tensor::randn({6}, rng);
        Tensor w = Tensor::randn({4, 6}, rng, 0.5);
        Tensor b = Tensor::randn({4}, rng, 0.2);
        Tensor c = Tensor::randn({4}, rng);
        auto eval = [&] { return dot(fully_connected(x, w, b), c); };
        Tensor gw(w.shape), gb(b.shape);
        Tensor gx = fully_connected_backward(x, w, c, gw, gb);
        double e = detail::fd_rel_error(x, gx, eval);
        e = std::max(e, detail::fd_rel_error(w, gw, eval));
        e = std::max(e, detail::fd_rel_error(b, gb, eval));
        return e;
    });

    check("global_avg_pool", [](Rng& rng) {
        Tensor x = Tensor::randn({3, 4, 3}, rng);
        Tensor c = Tensor::randn({3}, rng);
        auto eval = [&] { return dot(global_avg_pool(x), c); };
        Tensor gx = global_avg_pool_backward(x.shape, c);
        return detail::fd_rel_error(x, gx, eval);
    });

    check("se_block", [](Rng& rng) {
        Tensor x = Tensor::randn({4, 3, 3}, rng);
        SeParams p{Tensor::randn({2, 4}, rng, 0.5), Tensor::randn({2}, rng, 0.2),
                   Tensor::randn({4, 2}, rng, 0.5), Tensor::randn({4}, rng, 0.2)};
        Tensor c = Tensor::randn({4, 3, 3}, rng);
        auto eval = [&] { return dot(se_block(x, p), c); };
        SeCache cache;
        se_block(x, p, &cache);
        SeGrads g{Tensor(p.w1.shape), Tensor(p.b1.shape), Tensor(p.w2.shape),
                  Tensor(p.b2.shape)};
        Tensor gx = se_block_backward(x, p, cache, c, g);
        double e = detail::fd_rel_error(x, gx, eval);
        e = std::max(e, detail::fd_rel_error(p.w1, g.w1, eval));
        e = std::max(e, detail::fd_rel_error(p.b1, g.b1, eval));
        e = std::max(e, detail::fd_rel_error(p.w2, g.w2, eval));
        e = std::max(e, detail::fd_rel_error(p.b2, g.b2, eval));
        return e;
    });

    check("conv_gru_step", [](Rng& rng) {
        Tensor h = Tensor::randn({2, 2, 2}, rng);
        Tensor x = Tensor::randn({3, 2, 2}, rng);
        GruParams p{Tensor::randn({2, 5, 3, 3}, rng, 0.3), Tensor::randn({2}, rng, 0.1),
                    Tensor::randn({2, 5, 3, 3}, rng, 0.3), Tensor::randn({2}, rng, 0.1),
                    Tensor::randn({2, 5, 3, 3}, rng, 0.3), Tensor::randn({2}, rng, 0.1)};
        Tensor c = Tensor::randn({2, 2, 2}, rng);
        auto eval = [&] { return dot(conv_gru_step(h, x, p), c); };
        GruCache cache;
        conv_gru_step(h, x, p, &cache);
        GruGrads g{Tensor(p.wz.shape), Tensor(p.bz.shape), Tensor(p.wr.shape),
                   Tensor(p.br.shape), Tensor(p.wc.shape), Tensor(p.bc.shape)};
        GruStepGrads sg = conv_gru_backward(p, cache, 3, c, g);
        double e = detail::fd_rel_error(h, sg.gh, eval);
        e = std::max(e, detail::fd_rel_error(x, sg.gx, eval));
        e = std::max(e, detail::fd_rel_error(p.wz, g.wz, eval));
        e = std::max(e, detail::fd_rel_error(p.bz, g.bz, eval));
        e = std::max(e, detail::fd_rel_error(p.wr, g.wr, eval));
        e = std::max(e, detail::fd_rel_error(p.br, g.br, eval));
        e = std::max(e, detail::fd_rel_error(p.wc, g.wc, eval));
        e = std::max(e, detail::fd_rel_error(p.bc, g.bc, eval));
        return e;
    });

    return results;
}

}  // namespace captrack
