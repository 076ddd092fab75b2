#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "faun/noise.hpp"
#include "helpers.hpp"

using namespace faun;

namespace {

BayerImage constant_image(int h, int w, float v) {
    auto img = BayerImage::create(h, w, BayerPattern::RGGB);
    std::fill(img.plane.begin(), img.plane.end(), v);
    return img;
}

PatchStack synth_stack(double mean, int count, const NoiseParams& p, std::uint64_t seed) {
    const int w = 1000, h = (count + w - 1) / w;
    auto noisy = sample_noise(constant_image(h, w, float(mean)), p, seed);
    PatchStack s;
    s.samples.assign(noisy.plane.begin(), noisy.plane.begin() + count);
    s.mean = mean;
    return s;
}

double sample_variance(const std::vector<float>& v) {
    double m = 0;
    for (float x : v) m += x;
    m /= double(v.size());
    double ss = 0;
    for (float x : v) ss += (x - m) * (x - m);
    return ss / double(v.size() - 1);
}

}  // namespace

TEST_SUITE("noise") {

TEST_CASE("parameter validation") {
    CHECK_THROWS_AS(check_noise_params({0.0, 1e-5}), ConfigError);
    CHECK_THROWS_AS(check_noise_params({-1e-3, 1e-5}), ConfigError);
    CHECK_THROWS_AS(check_noise_params({1e-3, -1e-5}), ConfigError);
    CHECK_NOTHROW(check_noise_params({1e-3, 0.0}));
    SensorNoiseModel m;
    CHECK_NOTHROW(m.validate());
    m.log_a_min = -1.0;  // above log_a_max
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("sample_noise basics") {
    auto clean = constant_image(32, 32, 0.5f);
    SUBCASE("vanishing variance is a near-identity") {
        auto out = sample_noise(clean, {1e-12, 0.0}, 7);
        for (std::size_t i = 0; i < out.plane.size(); ++i)
            CHECK(std::abs(out.plane[i] - clean.plane[i]) < 1e-4f);
    }
    SUBCASE("deterministic per seed") {
        auto a = sample_noise(clean, {1e-3, 1e-5}, 42);
        auto b = sample_noise(clean, {1e-3, 1e-5}, 42);
        auto c = sample_noise(clean, {1e-3, 1e-5}, 43);
        CHECK(a.plane == b.plane);
        CHECK(a.plane != c.plane);
        CHECK(a.meta.noise->a == 1e-3);
    }
    SUBCASE("clipping keeps the range") {
        auto bright = sample_noise(constant_image(64, 64, 1.0f), {1e-3, 0.04}, 3);
        auto dark = sample_noise(constant_image(64, 64, 0.0f), {1e-3, 0.04}, 4);
        for (float v : bright.plane) CHECK(v <= 1.0f);
        for (float v : dark.plane) CHECK(v >= 0.0f);
    }
}

TEST_CASE("sample_noise matches the variance law") {
    auto noisy = sample_noise(constant_image(1000, 1000, 0.5f), {1e-3, 1e-5}, 0xfeed);
    const double var = sample_variance(noisy.plane);
    CHECK(var == doctest::Approx(5.1e-4).epsilon(0.02));
}

TEST_CASE("noise field is spatially uncorrelated") {
    const int n = 512;
    auto noisy = sample_noise(constant_image(n, n, 0.5f), {1e-3, 1e-5}, 0xc0de);
    double m = 0;
    for (float v : noisy.plane) m += v;
    m /= double(noisy.plane.size());
    auto corr = [&](int dy, int dx) {
        double num = 0, den = 0;
        for (int y = 0; y < n - dy; ++y)
            for (int x = 0; x < n - dx; ++x) {
                const double u = noisy.at(y, x) - m, v = noisy.at(y + dy, x + dx) - m;
                num += u * v;
                den += u * u;
            }
        return num / den;
    };
    CHECK(std::abs(corr(0, 1)) < 0.01);
    CHECK(std::abs(corr(1, 0)) < 0.01);
}

TEST_CASE("fit recovers synthetic parameters") {
    const NoiseParams truth{1e-3, 1e-5};
    std::vector<PatchStack> stacks;
    int i = 0;
    for (double mean : {0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85})
        stacks.push_back(synth_stack(mean, 1'000'000, truth, 0x5eed + i++));
    const auto fit = fit_noise_params(stacks);
    CHECK(fit.a == doctest::Approx(truth.a).epsilon(0.05));
    CHECK(fit.b == doctest::Approx(truth.b).epsilon(0.20));
}

TEST_CASE("fit maps two exact stacks onto the line") {
    // hand-built stacks: mean 0.2 var 0.01, mean 0.8 var 0.04
    const float d = std::sqrt(0.005f), e = std::sqrt(0.02f);
    std::vector<PatchStack> stacks = {
        {{0.2f - d, 0.2f + d}, 0.2},
        {{0.8f - e, 0.8f + e}, 0.8},
    };
    const auto fit = fit_noise_params(stacks);
    CHECK(fit.a == doctest::Approx(0.05).epsilon(1e-4));
    CHECK(fit.b == doctest::Approx(1e-12));  // intercept 0 hits the floor
}

TEST_CASE("fit rejects degenerate data") {
    SUBCASE("identical variances at different means") {
        // float-exact values so both variances are bit-identical
        std::vector<PatchStack> stacks = {
            {{0.25f, 0.375f}, 0.3125},
            {{0.625f, 0.75f}, 0.6875},
        };
        CHECK_THROWS_AS(fit_noise_params(stacks), CalibError);
    }
    SUBCASE("noiseless stacks") {
        std::vector<PatchStack> stacks = {
            {{0.3f, 0.3f, 0.3f}, 0.3},
            {{0.7f, 0.7f, 0.7f}, 0.7},
        };
        CHECK_THROWS_AS(fit_noise_params(stacks), CalibError);
    }
    SUBCASE("not enough usable stacks") {
        std::vector<PatchStack> stacks = {
            {{0.01f, 0.05f}, 0.03},  // below the usable band
            {{0.94f, 0.98f}, 0.96},  // above it
            {{0.4f, 0.6f}, 0.5},
        };
        CHECK_THROWS_AS(fit_noise_params(stacks), CalibError);
    }
    SUBCASE("identical means") {
        std::vector<PatchStack> stacks = {
            {{0.45f, 0.55f}, 0.5},
            {{0.4f, 0.6f}, 0.5},
        };
        CHECK_THROWS_AS(fit_noise_params(stacks), CalibError);
    }
}

TEST_CASE("training parameter sampling") {
    SensorNoiseModel m;  // log10 a in [-4, -2], log10 b = 2 log10 a + 1
    Rng rng(0xabcd);
    SUBCASE("stays in range and follows the line") {
        for (int i = 0; i < 1000; ++i) {
            const auto p = sample_training_params(m, rng);
            const double la = std::log10(p.a);
            CHECK(la >= m.log_a_min - 1e-12);
            CHECK(la <= m.log_a_max + 1e-12);
            CHECK(p.b == doctest::Approx(std::pow(10.0, 2.0 * la + 1.0)).epsilon(1e-9));
        }
    }
    SUBCASE("degenerate range collapses to a point") {
        m.log_a_max = m.log_a_min;
        for (int i = 0; i < 10; ++i)
            CHECK(sample_training_params(m, rng).a == doctest::Approx(1e-4).epsilon(1e-12));
    }
    SUBCASE("log a is uniform (chi-squared, 20 bins, 1% level)") {
        const int draws = 100'000, bins = 20;
        std::vector<int> hist(bins, 0);
        for (int i = 0; i < draws; ++i) {
            const auto p = sample_training_params(m, rng);
            const double u = (std::log10(p.a) - m.log_a_min) / (m.log_a_max - m.log_a_min);
            ++hist[std::min(int(u * bins), bins - 1)];
        }
        const double expect = double(draws) / bins;
        double chi2 = 0;
        for (int c : hist) chi2 += (c - expect) * (c - expect) / expect;
        CHECK(chi2 < 36.191);  // df = 19
    }
}

TEST_CASE("gain regressions") {
    SensorNoiseModel m;
    m.gain_to_a = {0.0, 5e-5};
    m.gain_to_b = {1e-9, 2e-9, 3e-9};
    SUBCASE("linear and quadratic evaluation") {
        const auto p = gain_to_params(m, 4.0);
        CHECK(p.a == doctest::Approx(2e-4).epsilon(1e-12));
        CHECK(p.b == doctest::Approx(1e-9 + 8e-9 + 48e-9).epsilon(1e-12));
    }
    SUBCASE("gain below one is rejected") {
        CHECK_THROWS_AS(gain_to_params(m, 0.5), ConfigError);
    }
    SUBCASE("extrapolation is flagged") {
        bool flag = true;
        gain_to_params(m, 8.0, &flag);
        CHECK(!flag);
        gain_to_params(m, 32.0, &flag);
        CHECK(flag);
    }
    SUBCASE("negative predictions clamp to the floor") {
        m.gain_to_a = {-1.0, 1e-6};
        m.gain_to_b = {-1.0, 0.0, 0.0};
        const auto p = gain_to_params(m, 2.0);
        CHECK(p.a == 1e-12);
        CHECK(p.b == 1e-12);
    }
    SUBCASE("a is monotone in gain") {
        double prev = 0;
        for (double g = 1; g <= 16; g += 0.5) {
            const double a = gain_to_params(m, g).a;
            CHECK(a >= prev);
            prev = a;
        }
    }
}

TEST_CASE("variance-stabilizing transform") {
    SUBCASE("a=1, b=0 is the identity") {
        auto img = constant_image(4, 4, 0.37f);
        auto t = ksigma(img, {1.0, 0.0});
        CHECK(t.plane == img.plane);
    }
    SUBCASE("round trip across the calibrated range") {
        Rng rng(0x99);
        auto img = BayerImage::create(32, 32);
        for (float& v : img.plane) v = float(rng.uniform());
        for (double a : {1e-4, 3.16e-4, 1e-3, 3.16e-3, 1e-2}) {
            const NoiseParams p{a, std::pow(10.0, 2.0 * std::log10(a) + 1.0)};
            auto back = ksigma_inv(ksigma(img, p), p);
            for (std::size_t i = 0; i < img.plane.size(); ++i)
                CHECK(std::abs(back.plane[i] - img.plane[i]) < 1e-6f);
        }
    }
    SUBCASE("tensor and image paths agree") {
        Rng rng(0x17);
        auto img = BayerImage::create(8, 8);
        for (float& v : img.plane) v = float(rng.uniform());
        const NoiseParams p{1e-3, 1e-5};
        Graph g;
        auto plane = Tensor::create(1, 1, 8, 8);
        plane->data = img.plane;
        auto t = ksigma(g, plane, p);
        auto ref = ksigma(img, p);
        for (std::size_t i = 0; i < ref.plane.size(); ++i) CHECK(t->data[i] == ref.plane[i]);
        auto back = ksigma_inv(g, t, p);
        for (std::size_t i = 0; i < ref.plane.size(); ++i)
            CHECK(std::abs(back->data[i] - img.plane[i]) < 1e-6f);
    }
    SUBCASE("transformed noise has variance equal to mean") {
        const NoiseParams p{1e-3, 1e-5};
        auto noisy = sample_noise(constant_image(1000, 1000, 0.5f), p, 0xd00d);
        auto t = ksigma(noisy, p);
        double m = 0;
        for (float v : t.plane) m += v;
        m /= double(t.plane.size());
        const double var = sample_variance(t.plane);
        CHECK(var == doctest::Approx(m).epsilon(0.02));
    }
    SUBCASE("a=0 is rejected") {
        CHECK_THROWS_AS(ksigma(constant_image(4, 4, 0.5f), {0.0, 1e-5}), ConfigError);
    }
}

TEST_CASE("calibration pipeline fits gain curves from stack files") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "faun_calib";
    fs::create_directories(dir);

    std::string manifest = "{\n  \"stacks\": [\n";
    bool first = true;
    int idx = 0;
    for (double gain : {1.0, 2.0, 4.0, 8.0, 16.0}) {
        const NoiseParams truth{1e-4 * gain, 1e-6 * gain * gain};
        for (double mean : {0.2, 0.4, 0.6, 0.8}) {
            const auto stack = synth_stack(mean, 1'000'000, truth, 0x40 + idx);
            const std::string name = "stack" + std::to_string(idx++) + ".fdt";
            auto t = Tensor::create(1, 1, 1000, int(stack.samples.size()) / 1000);
            t->data = stack.samples;
            std::ofstream os(dir / name, std::ios::binary);
            save_tensor(os, *t);
            if (!first) manifest += ",\n";
            first = false;
            manifest += "    {\"file\": \"" + name + "\", \"gain\": " + std::to_string(gain) +
                        ", \"mean\": " + std::to_string(mean) + "}";
        }
    }
    manifest += "\n  ]\n}\n";
    std::ofstream(dir / "manifest.json") << manifest;

    const auto m = calibrate_noise_model(dir.string());
    CHECK(m.gain_to_a[1] == doctest::Approx(1e-4).epsilon(0.05));
    CHECK(std::abs(m.gain_to_a[0]) < 2e-5);
    CHECK(m.gain_to_b[2] == doctest::Approx(1e-6).epsilon(0.15));
    CHECK(m.logb_line.slope == doctest::Approx(2.0).epsilon(0.1));
    CHECK(m.log_a_min == doctest::Approx(-4.0).epsilon(0.01));
    CHECK(m.log_a_max == doctest::Approx(std::log10(1.6e-3)).epsilon(0.01));
    CHECK(m.gain_min == 1.0);
    CHECK(m.gain_max == 16.0);

    SUBCASE("json round trip") {
        const auto path = (dir / "model.json").string();
        save_noise_model(path, m);
        const auto back = load_noise_model(path);
        CHECK(back.gain_to_a == m.gain_to_a);
        CHECK(back.gain_to_b == m.gain_to_b);
        CHECK(back.logb_line.slope == m.logb_line.slope);
        CHECK(back.log_a_min == m.log_a_min);
    }
    SUBCASE("bad inputs") {
        CHECK_THROWS_AS(calibrate_noise_model((dir / "nope").string()), IoError);
        CHECK_THROWS_AS(noise_model_from_json("not json"), IoError);
    }
}

}  // TEST_SUITE
