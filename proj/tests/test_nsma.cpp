#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "faun/nsma.hpp"
#include "helpers.hpp"

using namespace faun;

TEST_SUITE("nsma") {

TEST_CASE("partition computes log-uniform bounds") {
    SUBCASE("n=1 keeps the full range") {
        auto p = partition(1e-4, 1e-2, 1);
        REQUIRE(p.bounds.size() == 2);
        CHECK(p.bounds[0] == 1e-4);
        CHECK(p.bounds[1] == 1e-2);
    }
    SUBCASE("n=2 splits at the geometric midpoint") {
        auto p = partition(1e-4, 1e-2, 2);
        REQUIRE(p.bounds.size() == 3);
        CHECK(p.bounds[0] == 1e-4);
        CHECK(p.bounds[1] == doctest::Approx(1e-3).epsilon(1e-12));
        CHECK(p.bounds[2] == 1e-2);
    }
    SUBCASE("n=4 lands on half-decades") {
        auto p = partition(1e-4, 1e-2, 4);
        const double want[5] = {1e-4, 3.1622776601683794e-4, 1e-3,
                                3.1622776601683794e-3, 1e-2};
        REQUIRE(p.bounds.size() == 5);
        for (int i = 0; i <= 4; ++i)
            CHECK(p.bounds[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
    SUBCASE("consecutive ratios are constant") {
        auto p = partition(3e-5, 0.7, 7);
        const double r0 = p.bounds[1] / p.bounds[0];
        for (int i = 1; i < 7; ++i) {
            const double r = p.bounds[i + 1] / p.bounds[i];
            CHECK(std::abs(r - r0) / r0 < 1e-12);
        }
    }
    SUBCASE("invalid ranges are rejected") {
        CHECK_THROWS_AS(partition(0.0, 1e-2, 2), ConfigError);
        CHECK_THROWS_AS(partition(-1e-4, 1e-2, 2), ConfigError);
        CHECK_THROWS_AS(partition(1e-2, 1e-4, 2), ConfigError);
        CHECK_THROWS_AS(partition(1e-3, 1e-3, 2), ConfigError);
        CHECK_THROWS_AS(partition(1e-4, 1e-2, 0), ConfigError);
    }
}

TEST_CASE("select_model routes by annotated noise level") {
    auto p = partition(1e-4, 1e-2, 4);

    SUBCASE("endpoints") {
        auto lo = select_model(p.a_min, p);
        CHECK(lo.index == 0);
        CHECK_FALSE(lo.clamped);
        auto hi = select_model(p.a_max, p);
        CHECK(hi.index == 3);
        CHECK_FALSE(hi.clamped);
    }
    SUBCASE("interior boundaries belong to the interval on their right") {
        for (int i = 1; i < 4; ++i) {
            auto at = select_model(p.bounds[i], p);
            CHECK(at.index == i);
            CHECK_FALSE(at.clamped);
            auto below = select_model(p.bounds[i] * (1.0 - 1e-9), p);
            CHECK(below.index == i - 1);
            CHECK_FALSE(below.clamped);
        }
    }
    SUBCASE("n=2 geometric midpoint routes right") {
        auto p2 = partition(1e-4, 1e-2, 2);
        CHECK(select_model(p2.bounds[1], p2).index == 1);
    }
    SUBCASE("out-of-range values clamp with a flag") {
        auto lo = select_model(5e-5, p);
        CHECK(lo.index == 0);
        CHECK(lo.clamped);
        auto hi = select_model(2e-2, p);
        CHECK(hi.index == 3);
        CHECK(hi.clamped);
        auto tiny = select_model(1e-300, p);
        CHECK(tiny.index == 0);
        CHECK(tiny.clamped);
    }
    SUBCASE("monotone over a log sweep") {
        int prev = 0;
        for (int k = 0; k <= 200; ++k) {
            const double a = 5e-5 * std::pow(10.0, 3.0 * k / 200.0);  // 5e-5..5e-2
            auto c = select_model(a, p);
            CHECK(c.index >= prev);
            prev = c.index;
        }
        CHECK(prev == 3);
    }
}

TEST_CASE("array manifest round trips through json") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "faun_array.json").string();

    auto p = partition(2e-4, 8e-3, 3);
    p.checkpoints = {"a/model0", "a/model1", "a/model2"};
    save_array_manifest(path, p);

    auto q = load_array_manifest(path);
    CHECK(q.a_min == p.a_min);
    CHECK(q.a_max == p.a_max);
    CHECK(q.n == 3);
    REQUIRE(q.bounds.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(q.bounds[i] == p.bounds[i]);
    REQUIRE(q.checkpoints.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(q.checkpoints[i] == p.checkpoints[i]);

    SUBCASE("missing and malformed files") {
        CHECK_THROWS_AS(load_array_manifest("/nonexistent/array.json"), IoError);
        std::ofstream(path) << "{not json";
        CHECK_THROWS_AS(load_array_manifest(path), IoError);
    }
    SUBCASE("structurally invalid manifests") {
        p.checkpoints.pop_back();
        CHECK_THROWS_AS(save_array_manifest(path, p), ConfigError);
        p.checkpoints = {"x", "y", "z"};
        p.bounds[1] = p.bounds[2];  // not strictly increasing
        CHECK_THROWS_AS(save_array_manifest(path, p), ConfigError);
    }
    fs::remove(path);
}

}  // TEST_SUITE
