#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "faun/losses.hpp"
#include "faun/model.hpp"
#include "helpers.hpp"

using namespace faun;
using testutil::random_tensor;

namespace {

ModelConfig tiny_teacher_config() {
    ModelConfig cfg;
    cfg.scales = 2;
    cfg.base_width = 8;
    cfg.expansion = 2;
    cfg.groups = 4;
    cfg.skip_shrink_channels = 4;
    cfg.fa_hidden = 8;
    cfg.feature_align = false;  // plain U-Net flavor
    return cfg;
}

Teacher make_teacher(std::uint64_t seed, bool positive = false) {
    Teacher t;
    t.cfg = tiny_teacher_config();
    Rng rng(seed);
    t.weights = init_weights(t.cfg, rng);
    if (positive) testutil::positive_probe_weights(t.weights, rng);
    freeze_weights(t.weights);
    return t;
}

double weights_checksum(const ModelWeights& w) {
    double s = 0;
    for (const auto& [name, t] : w.params)
        for (std::size_t i = 0; i < t->data.size(); ++i) s += double(t->data[i]) * double(i % 97 + 1);
    return s;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("charbonnier closed forms") {
    Rng rng(3);
    auto gt = random_tensor(rng, 1, 4, 6, 6, 0.1f, 0.9f, false);

    SUBCASE("equal inputs floor at c") {
        Graph g;
        auto v = charbonnier(g, gt, gt, 1e-6);
        CHECK(double(v->data[0]) == doctest::Approx(1e-6).epsilon(1e-5));
    }
    SUBCASE("uniform difference") {
        Graph g;
        auto pred = affine(g, gt, 1.0f, 3e-4f);
        auto v = charbonnier(g, pred, gt, 1e-6);
        CHECK(double(v->data[0]) == doctest::Approx(3.000016666620371e-4).epsilon(1e-5));
    }
    SUBCASE("never below the floor") {
        Graph g;
        auto pred = random_tensor(rng, 1, 4, 6, 6, 0.0f, 1.0f, false);
        auto v = charbonnier(g, pred, gt, 1e-6);
        CHECK(double(v->data[0]) >= 1e-6);
    }
    SUBCASE("bad arguments") {
        Graph g;
        auto other = random_tensor(rng, 1, 4, 6, 5, 0.f, 1.f, false);
        CHECK_THROWS_AS((void)charbonnier(g, gt, other, 1e-6), ShapeError);
        CHECK_THROWS_AS((void)charbonnier(g, gt, gt, 0.0), ConfigError);
        CHECK_THROWS_AS((void)charbonnier(g, gt, gt, -1e-6), ConfigError);
    }
    SUBCASE("gradient matches finite differences") {
        auto pred = random_tensor(rng, 1, 4, 6, 6, 0.0f, 1.0f, true);
        const double err = testutil::max_rel_grad_err(
            [&](Graph& g) { return charbonnier(g, pred, gt, 1e-3); }, {pred}, 40, 1e-4);
        CHECK(err < 1e-2);
    }
}

TEST_CASE("simple kd closed forms") {
    Rng rng(5);
    SUBCASE("equal inputs give exactly zero") {
        Graph g;
        auto a = random_tensor(rng, 2, 4, 5, 5, -1.f, 1.f, false);
        CHECK(simple_kd(g, a, a)->data[0] == 0.0f);
    }
    SUBCASE("uniform offset") {
        Graph g;
        auto a = random_tensor(rng, 2, 4, 5, 5, -1.f, 1.f, false);
        auto b = affine(g, a, 1.0f, 0.25f);
        CHECK(simple_kd(g, a, b)->data[0] == doctest::Approx(0.25f).epsilon(1e-6));
    }
    SUBCASE("random pair against scalar loop") {
        Graph g;
        auto a = random_tensor(rng, 1, 3, 7, 7, -1.f, 1.f, false);
        auto b = random_tensor(rng, 1, 3, 7, 7, -1.f, 1.f, false);
        double want = 0;
        for (std::int64_t i = 0; i < a->numel(); ++i)
            want += std::fabs(double(a->data[i]) - double(b->data[i]));
        want /= double(a->numel());
        CHECK(double(simple_kd(g, a, b)->data[0]) == doctest::Approx(want).epsilon(1e-5));
    }
    SUBCASE("gradient away from ties matches finite differences") {
        // keep |pred - gt| >= 0.1 so the probe window never crosses the
        // absolute-value kink
        auto pred = random_tensor(rng, 1, 3, 6, 6, 0.0f, 1.0f, true);
        auto gt = Tensor::create(1, 3, 6, 6, false);
        for (std::int64_t i = 0; i < gt->numel(); ++i)
            gt->data[i] = pred->data[i] + (i % 2 ? 0.1f : -0.1f) * float(rng.uniform(1.0, 3.0));
        const double err = testutil::max_rel_grad_err(
            [&](Graph& g) { return simple_kd(g, pred, gt); }, {pred}, 40, 1e-3);
        CHECK(err < 1e-2);
    }
}

TEST_CASE("feature matching contracts") {
    auto teacher = make_teacher(11, true);
    Rng rng(7);
    auto gt = random_tensor(rng, 1, 4, 8, 8, 0.05f, 0.45f, false);

    SUBCASE("identical inputs give exactly zero") {
        Graph g;
        auto v = feature_matching(g, teacher, gt, gt, default_layer_set(teacher.cfg));
        CHECK(v->data[0] == 0.0f);
    }
    SUBCASE("single layer with zero style weight reduces to the activation L1") {
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.55f, 0.95f, false);
        Graph g;
        ForwardTaps ta, tb;
        forward(g, teacher.cfg, teacher.weights, x, &ta);
        forward(g, teacher.cfg, teacher.weights, gt, &tb);
        TensorPtr want;
        for (std::size_t i = 0; i < ta.size(); ++i)
            if (ta[i].first == "enc1") want = simple_kd(g, ta[i].second, tb[i].second);
        REQUIRE(want);
        auto got = feature_matching(g, teacher, x, gt, {"enc1"}, 1.0, 0.0);
        CHECK(got->data[0] == want->data[0]);
    }
    SUBCASE("all-zero teacher reduces to image-domain L1") {
        Teacher zero;
        zero.cfg = tiny_teacher_config();
        Rng zr(1);
        zero.weights = init_weights(zero.cfg, zr);
        for (auto& [name, t] : zero.weights.params)
            std::fill(t->data.begin(), t->data.end(), 0.0f);
        freeze_weights(zero.weights);
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.55f, 0.95f, false);
        Graph g;
        auto fm = feature_matching(g, zero, x, gt, {"out"}, 1.0, 0.0);
        auto kd = simple_kd(g, x, gt);
        CHECK(fm->data[0] == kd->data[0]);
    }
    SUBCASE("unfrozen teacher is rejected") {
        Teacher hot;
        hot.cfg = tiny_teacher_config();
        Rng hr(2);
        hot.weights = init_weights(hot.cfg, hr);
        Graph g;
        CHECK_THROWS_AS(
            (void)feature_matching(g, hot, gt, gt, default_layer_set(hot.cfg)), UsageError);
    }
    SUBCASE("empty or unknown layer set is rejected") {
        Graph g;
        CHECK_THROWS_AS((void)feature_matching(g, teacher, gt, gt, {}), ConfigError);
        CHECK_THROWS_AS((void)feature_matching(g, teacher, gt, gt, {"enc9"}), ConfigError);
    }
    SUBCASE("evaluation never mutates the teacher") {
        const double before = weights_checksum(teacher.weights);
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.55f, 0.95f, true);
        for (int it = 0; it < 2; ++it) {
            Graph g;
            auto v = feature_matching(g, teacher, x, gt, default_layer_set(teacher.cfg));
            backward(g, v);
        }
        CHECK(weights_checksum(teacher.weights) == before);
        for (const auto& [name, t] : teacher.weights.params) CHECK(t->grad.empty());
        CHECK_FALSE(x->grad.empty());
    }
    SUBCASE("gradient w.r.t. the student output matches finite differences") {
        // elementwise-separated inputs keep every |A_s - A_g| away from its
        // kink under the monotone positive-weight teacher
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.55f, 0.95f, true);
        const double err_pc = testutil::max_rel_grad_err(
            [&](Graph& g) {
                return feature_matching(g, teacher, x, gt, default_layer_set(teacher.cfg), 1.0,
                                        0.1);
            },
            {x}, 24, 1e-3);
        CHECK(err_pc < 1e-2);
        const double err_dir = testutil::max_dir_grad_err(
            [&](Graph& g) {
                return feature_matching(g, teacher, x, gt, default_layer_set(teacher.cfg), 1.0,
                                        0.1);
            },
            {x}, 2, 1e-3);
        CHECK(err_dir < 1e-2);
    }
}

TEST_CASE("rgb perceptual loss") {
    auto teacher = make_teacher(13, true);
    Rng rng(9);
    auto gt = random_tensor(rng, 1, 4, 8, 8, 0.1f, 0.45f, false);

    IspParams plain;  // unit gains, identity CCM, gamma off
    plain.wb = {1.0, 1.0, 1.0};
    plain.ccm = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    plain.srgb_gamma = false;

    SUBCASE("identical inputs give zero") {
        Graph g;
        auto v = rgb_perceptual(g, teacher, gt, gt, plain, default_layer_set(teacher.cfg));
        CHECK(v->data[0] == 0.0f);
    }
    SUBCASE("pass-through pipeline equals feature matching") {
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.55f, 0.9f, false);
        Graph g;
        auto via_isp =
            rgb_perceptual(g, teacher, x, gt, plain, default_layer_set(teacher.cfg), 1.0, 0.1);
        auto direct =
            feature_matching(g, teacher, x, gt, default_layer_set(teacher.cfg), 1.0, 0.1);
        CHECK(double(via_isp->data[0]) ==
              doctest::Approx(double(direct->data[0])).epsilon(1e-5));
    }
    SUBCASE("full pipeline stays finite and differentiable") {
        IspParams vivid;  // defaults: wb gains, identity ccm, srgb on
        auto x = random_tensor(rng, 1, 4, 8, 8, 0.1f, 0.9f, true);
        Graph g;
        auto scaled_x = affine(g, x, 1.3f, 0.0f);
        auto scaled_gt = affine(g, gt, 1.3f, 0.0f);
        auto v = rgb_perceptual(g, teacher, scaled_x, scaled_gt, vivid,
                                default_layer_set(teacher.cfg));
        REQUIRE(std::isfinite(double(v->data[0])));
        backward(g, v);
        bool any = false;
        for (float gv : x->grad) {
            REQUIRE(std::isfinite(double(gv)));
            any = any || gv != 0.0f;
        }
        CHECK(any);
    }
}

TEST_CASE("loss config validation and dispatch") {
    SUBCASE("mode names round trip") {
        for (LossMode m : {LossMode::Charbonnier, LossMode::RgbPerceptual, LossMode::SimpleKd,
                           LossMode::FeatureMatching})
            CHECK(loss_mode_from_name(loss_mode_name(m)) == m);
        CHECK_THROWS_AS(loss_mode_from_name("l2"), ConfigError);
    }
    SUBCASE("published default weights") {
        CHECK(default_loss_weight(LossMode::Charbonnier) == 393.5);
        CHECK(default_loss_weight(LossMode::FeatureMatching) == 78.7);
    }
    SUBCASE("invalid configs are rejected") {
        LossConfig c;
        c.charb_c = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.weight = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.mode = LossMode::SimpleKd;  // no teacher path
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c.teacher_checkpoint = "somewhere";
        CHECK_NOTHROW(c.validate());
    }
    SUBCASE("dispatch applies the composition weight") {
        Rng rng(21);
        auto gt = random_tensor(rng, 1, 4, 8, 8, 0.1f, 0.9f, false);
        Graph g;
        auto pred = affine(g, gt, 1.0f, 0.25f);
        LossConfig cfg;  // charbonnier, weight 393.5
        auto v = composed_loss(g, cfg, nullptr, pred, gt, pred);
        auto raw = charbonnier(g, pred, gt, cfg.charb_c);
        CHECK(double(v->data[0]) ==
              doctest::Approx(393.5 * double(raw->data[0])).epsilon(1e-6));
    }
    SUBCASE("distillation dispatch runs the teacher on the network input") {
        auto teacher = make_teacher(23);
        Rng rng(25);
        auto noisy = random_tensor(rng, 1, 4, 8, 8, 0.1f, 0.9f, false);
        auto gt = random_tensor(rng, 1, 4, 8, 8, 0.1f, 0.9f, false);
        Graph g;
        auto pred = affine(g, noisy, 1.0f, 0.01f);
        LossConfig cfg;
        cfg.mode = LossMode::SimpleKd;
        cfg.weight = default_loss_weight(cfg.mode);
        cfg.teacher_checkpoint = "in-memory";
        auto v = composed_loss(g, cfg, &teacher, pred, gt, noisy);
        auto teacher_out = forward(g, teacher.cfg, teacher.weights, noisy);
        auto want = simple_kd(g, pred, teacher_out);
        CHECK(v->data[0] == want->data[0]);
        CHECK_THROWS_AS((void)composed_loss(g, cfg, nullptr, pred, gt, noisy), UsageError);
    }
}

}  // TEST_SUITE
