#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "faun/common.hpp"
#include "faun/model.hpp"
#include "faun/tensor.hpp"

namespace testutil {

// All-positive weights normalised to sum 0.5 per output channel keep every
// relu input strictly positive, so the network is exactly linear inside a
// small probe window and finite differences resolve the true slope. Used by
// the end-to-end gradient checks, where mixed-sign weights at practical
// depths put thousands of relu arguments inside any usable window.
inline void positive_probe_weights(faun::ModelWeights& w, faun::Rng& rng) {
    for (auto& [name, t] : w.params) {
        if (t->n == 1 && t->h == 1 && t->w == 1) {  // bias (1,c,1,1)
            std::fill(t->data.begin(), t->data.end(), 0.0f);
            continue;
        }
        const std::int64_t per = t->numel() / t->n;
        for (int o = 0; o < t->n; ++o) {
            float* row = t->data.data() + std::size_t(o) * per;
            double s = 0;
            for (std::int64_t i = 0; i < per; ++i) {
                row[i] = float(rng.uniform(0.05, 1.0));
                s += row[i];
            }
            const float inv = float(0.5 / s);
            for (std::int64_t i = 0; i < per; ++i) row[i] *= inv;
        }
    }
}

inline faun::TensorPtr random_tensor(faun::Rng& rng, int n, int c, int h, int w, float lo,
                                     float hi, bool requires_grad = true) {
    auto t = faun::Tensor::create(n, c, h, w, requires_grad);
    for (auto& v : t->data) v = float(rng.uniform(lo, hi));
    return t;
}

// Central finite differences against the recorded backward pass. The forward
// evaluations run with f64 accumulation so the numeric oracle is trustworthy
// even when reductions are long. Returns the worst relative error seen.
inline double max_rel_grad_err(const std::function<faun::TensorPtr(faun::Graph&)>& build,
                               const std::vector<faun::TensorPtr>& params,
                               int max_probes_per_tensor = 64, double eps = 5e-3,
                               double rel_floor = 1e-2) {
    faun::set_accumulate_f64(true);
    for (const auto& p : params) p->zero_grad();
    faun::Graph g;
    auto loss = build(g);
    REQUIRE(loss->numel() == 1);
    faun::backward(g, loss);

    std::vector<std::vector<float>> analytic;
    for (const auto& p : params) {
        REQUIRE(p->requires_grad);
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    auto eval = [&]() {
        faun::Graph g2;
        return double(build(g2)->data[0]);
    };

    faun::Rng probe_rng(0x9d5f);
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        const std::int64_t n = p.numel();
        std::vector<std::int64_t> idx;
        if (n <= max_probes_per_tensor) {
            for (std::int64_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < max_probes_per_tensor; ++i)
                idx.push_back(std::int64_t(probe_rng.uniform_int(n)));
        }
        for (std::int64_t i : idx) {
            const float saved = p.data[i];
            p.data[i] = float(saved + eps);
            const float hi_v = p.data[i];
            const double lp = eval();
            p.data[i] = float(saved - eps);
            const float lo_v = p.data[i];
            const double lm = eval();
            p.data[i] = saved;
            const double h = double(hi_v) - double(lo_v);
            const double fd = (lp - lm) / h;
            const double an = analytic[pi][i];
            const double err = std::fabs(an - fd) / std::max(std::fabs(an) + std::fabs(fd), rel_floor);
            if (err > worst) worst = err;
        }
    }
    faun::set_accumulate_f64(false);
    return worst;
}

// Directional finite differences: perturb a whole tensor along random +-1
// directions and compare the loss slope against dot(grad, dir). Summing over
// the tensor keeps the signal far above the float quantisation of the loss
// and averages out the slope mixing that per-element probes suffer when a
// relu argument crosses zero inside the probe window, so this stays reliable
// even through deep graphs. Returns the worst relative error seen.
inline double max_dir_grad_err(const std::function<faun::TensorPtr(faun::Graph&)>& build,
                               const std::vector<faun::TensorPtr>& params, int dirs_per_tensor = 4,
                               double eps = 2e-3, double rel_floor = 1e-2) {
    faun::set_accumulate_f64(true);
    for (const auto& p : params) p->zero_grad();
    faun::Graph g;
    auto loss = build(g);
    REQUIRE(loss->numel() == 1);
    faun::backward(g, loss);

    std::vector<std::vector<float>> analytic;
    for (const auto& p : params) {
        REQUIRE(p->requires_grad);
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    auto eval = [&]() {
        faun::Graph g2;
        return double(build(g2)->data[0]);
    };

    faun::Rng dir_rng(0x51ab);
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        const std::int64_t n = p.numel();
        std::vector<float> saved = p.data;
        std::vector<float> dir(static_cast<std::size_t>(n));
        for (int trial = 0; trial < dirs_per_tensor; ++trial) {
            double an = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                dir[i] = dir_rng.uniform(0.0, 1.0) < 0.5 ? -1.0f : 1.0f;
                an += double(analytic[pi][i]) * dir[i];
            }
            for (std::int64_t i = 0; i < n; ++i) p.data[i] = float(saved[i] + eps * dir[i]);
            const double lp = eval();
            for (std::int64_t i = 0; i < n; ++i) p.data[i] = float(saved[i] - eps * dir[i]);
            const double lm = eval();
            p.data = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double err = std::fabs(an - fd) / std::max(std::fabs(an) + std::fabs(fd), rel_floor);
            if (err > worst) worst = err;
        }
    }
    faun::set_accumulate_f64(false);
    return worst;
}

}  // namespace testutil
