#include "doctest.h"

#include <cmath>

#include "faun/noise.hpp"
#include "faun/pair_align.hpp"
#include "helpers.hpp"

using namespace faun;

namespace {

// Smooth analytic texture so a shifted resample is the exact same scene.
double scene_value(int c, double x, double y) {
    return 0.45 + 0.16 * std::sin(0.26 * x + 0.1 * c) * std::sin(0.31 * y + 0.2) +
           0.12 * std::sin(0.15 * x + 0.22 * y + 1.7) +
           0.10 * std::sin(0.12 * y - 0.19 * x + 0.5 * c);
}

RgbImage textured_rgb(int h, int w, double ox, double oy) {
    auto img = RgbImage::create(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) img.at(c, y, x) = float(scene_value(c, x + ox, y + oy));
    return img;
}

GrayImage analytic_gray(int h, int w, double ox, double oy) {
    auto g = GrayImage::create(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) g.at(y, x) = float(scene_value(1, x + ox, y + oy));
    return g;
}

BayerImage scene_bayer(int h, int w, double ox, double oy) {
    return simple_unprocess(textured_rgb(h, w, ox, oy), {2.0, 1.0, 1.6});
}

}  // namespace

TEST_SUITE("align") {

TEST_CASE("green proxy averages the two green sites") {
    auto img = BayerImage::create(6, 8);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x) img.at(y, x) = float(y * 10 + x) / 100.0f;
    auto g = green_proxy(img);
    CHECK(g.h == 3);
    CHECK(g.w == 4);
    CHECK(g.at(0, 0) == 0.5f * (img.at(0, 1) + img.at(1, 0)));
    CHECK(g.at(2, 3) == 0.5f * (img.at(4, 7) + img.at(5, 6)));

    auto grbg = BayerImage::create(6, 8, BayerPattern::GRBG);
    CHECK_THROWS_AS(green_proxy(grbg), UsageError);
    auto odd = BayerImage::create(5, 8);
    CHECK_THROWS_AS(green_proxy(odd), ShapeError);
}

TEST_CASE("corner detection finds corner structure") {
    SUBCASE("featureless image yields nothing") {
        auto flat = GrayImage::create(32, 32);
        std::fill(flat.data.begin(), flat.data.end(), 0.37f);
        CHECK(detect_corners(flat).empty());
    }
    SUBCASE("white square on black gives its four corners") {
        auto img = GrayImage::create(32, 32);
        for (int y = 10; y < 22; ++y)
            for (int x = 10; x < 22; ++x) img.at(y, x) = 1.0f;
        auto pts = detect_corners(img, 10, 0.1, 4.0);
        REQUIRE(pts.size() == 4);
        const double cx[4] = {9.5, 21.5, 9.5, 21.5};
        const double cy[4] = {9.5, 9.5, 21.5, 21.5};
        for (int k = 0; k < 4; ++k) {
            double best = 1e9;
            for (const auto& p : pts)
                best = std::min(best, std::hypot(p[0] - cx[k], p[1] - cy[k]));
            CHECK(best < 3.0);
        }
    }
    SUBCASE("suppression distance and cap are respected") {
        auto img = analytic_gray(64, 64, 0, 0);
        auto pts = detect_corners(img, 200, 0.01, 7.0);
        CHECK(pts.size() >= 8);
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (std::size_t j = i + 1; j < pts.size(); ++j)
                CHECK(std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]) >= 7.0);
        auto few = detect_corners(img, 5, 0.01, 7.0);
        CHECK(few.size() == 5);
    }
    SUBCASE("bad inputs") {
        auto tiny = GrayImage::create(8, 8);
        CHECK_THROWS_AS(detect_corners(tiny), ShapeError);
        auto img = analytic_gray(32, 32, 0, 0);
        CHECK_THROWS_AS(detect_corners(img, 0), ConfigError);
        CHECK_THROWS_AS(detect_corners(img, 10, 0.0), ConfigError);
        CHECK_THROWS_AS(detect_corners(img, 10, 1.5), ConfigError);
    }
}

TEST_CASE("lucas-kanade recovers synthetic translations") {
    const auto prev = analytic_gray(64, 64, 0, 0);
    const auto corners = detect_corners(prev, 60, 0.02, 7.0);
    REQUIRE(corners.size() >= 8);

    SUBCASE("identical frames give exactly zero flow") {
        auto tracked = lucas_kanade(prev, prev, corners);
        int nvalid = 0;
        for (const auto& t : tracked) {
            if (!t.valid) continue;
            ++nvalid;
            CHECK(t.dx == 0.0);
            CHECK(t.dy == 0.0);
        }
        CHECK(nvalid >= 8);
    }
    SUBCASE("integer shift comes back within a quarter pixel") {
        const auto next = analytic_gray(64, 64, -2, 0);  // content moved +2 in x
        auto tracked = lucas_kanade(prev, next, corners);
        int nvalid = 0;
        for (const auto& t : tracked) {
            if (!t.valid) continue;
            ++nvalid;
            CHECK(std::abs(t.dx - 2.0) < 0.25);
            CHECK(std::abs(t.dy) < 0.25);
        }
        CHECK(nvalid >= 8);
    }
    SUBCASE("half-pixel shift comes back within 0.15") {
        const auto next = analytic_gray(64, 64, -0.5, 0);
        auto tracked = lucas_kanade(prev, next, corners);
        int nvalid = 0;
        for (const auto& t : tracked) {
            if (!t.valid) continue;
            ++nvalid;
            CHECK(std::abs(t.dx - 0.5) < 0.15);
            CHECK(std::abs(t.dy) < 0.15);
        }
        CHECK(nvalid >= 8);
    }
    SUBCASE("flat windows are dropped as singular") {
        auto flat = GrayImage::create(64, 64);
        std::fill(flat.data.begin(), flat.data.end(), 0.5f);
        auto tracked = lucas_kanade(flat, flat, {{32.0, 32.0}});
        REQUIRE(tracked.size() == 1);
        CHECK_FALSE(tracked[0].valid);
    }
    SUBCASE("bad inputs") {
        auto small = GrayImage::create(32, 32);
        CHECK_THROWS_AS(lucas_kanade(prev, small, corners), ShapeError);
        CHECK_THROWS_AS(lucas_kanade(prev, prev, corners, 8), ConfigError);
        CHECK_THROWS_AS(lucas_kanade(prev, prev, corners, 21, 0), ConfigError);
    }
}

TEST_CASE("align_pair recovers global translations") {
    const auto clean = scene_bayer(128, 128, 0, 0);

    struct Case {
        double sx, sy;
        int ax, ay;  // expected even-rounded applied shift
    };
    const Case cases[] = {{0, 0, 0, 0}, {2, 0, 2, 0}, {4, -2, 4, -2}, {0.5, 0, 0, 0}};

    for (const auto& c : cases) {
        CAPTURE(c.sx);
        CAPTURE(c.sy);
        auto shifted = scene_bayer(128, 128, c.sx, c.sy);
        auto noisy = sample_noise(shifted, {1e-4, 1e-8}, 42);
        auto res = align_pair(noisy, clean);

        CHECK(std::abs(res.flow.dx - c.sx) < 0.25);
        CHECK(std::abs(res.flow.dy - c.sy) < 0.25);
        CHECK(res.shift_x == c.ax);
        CHECK(res.shift_y == c.ay);
        CHECK(std::abs(c.sx - res.shift_x) <= 0.5);
        CHECK(std::abs(c.sy - res.shift_y) <= 0.5);
        CHECK(res.flow.points.size() == res.flow.flows.size());
        CHECK(res.flow.points.size() >= 8);
        CHECK(res.noisy.h == res.clean.h);
        CHECK(res.noisy.w == res.clean.w);
        CHECK(res.noisy.h % 2 == 0);
        CHECK(res.noisy.w % 2 == 0);
        CHECK(res.noisy.h == 128 - std::abs(c.ay));
        CHECK(res.noisy.w == 128 - std::abs(c.ax));
    }
}

TEST_CASE("align_pair preserves mosaic phase and content") {
    const auto clean = scene_bayer(128, 128, 0, 0);

    SUBCASE("even integer shift aligns the planes exactly") {
        const auto shifted = scene_bayer(128, 128, 4, -2);  // no noise
        auto res = align_pair(shifted, clean);
        REQUIRE(res.shift_x == 4);
        REQUIRE(res.shift_y == -2);
        CHECK(res.clean.plane == res.noisy.plane);
        CHECK(res.clean.pattern == BayerPattern::RGGB);
    }
    SUBCASE("already aligned pair is returned untouched") {
        auto res = align_pair(clean, clean);
        CHECK(res.shift_x == 0);
        CHECK(res.shift_y == 0);
        CHECK(res.noisy.plane == clean.plane);
        CHECK(res.clean.plane == clean.plane);
        CHECK(res.flow.dx == 0.0);
        CHECK(res.flow.dy == 0.0);
    }
    SUBCASE("estimate is anti-symmetric under swapping") {
        const auto shifted = scene_bayer(128, 128, 2, 0);
        auto fwd = align_pair(shifted, clean);
        auto bwd = align_pair(clean, shifted);
        CHECK(std::abs(fwd.flow.dx + bwd.flow.dx) < 0.1);
        CHECK(std::abs(fwd.flow.dy + bwd.flow.dy) < 0.1);
    }
    SUBCASE("brightness mismatch is gain-matched away") {
        auto bright = scene_bayer(128, 128, 2, 0);
        for (auto& v : bright.plane) v *= 1.3f;
        auto res = align_pair(bright, clean);
        CHECK(std::abs(res.flow.dx - 2.0) < 0.25);
        CHECK(res.shift_x == 2);
    }
    SUBCASE("featureless frames cannot be aligned") {
        auto flat = BayerImage::create(64, 64);
        std::fill(flat.plane.begin(), flat.plane.end(), 0.4f);
        CHECK_THROWS_AS(align_pair(flat, flat), AlignError);
    }
    SUBCASE("shape and pattern mismatches fail") {
        auto small = BayerImage::create(64, 64);
        CHECK_THROWS_AS(align_pair(clean, small), ShapeError);
        auto grbg = BayerImage::create(128, 128, BayerPattern::GRBG);
        CHECK_THROWS_AS(align_pair(clean, grbg), ShapeError);
    }
}

}  // TEST_SUITE
