#include "faun/noise.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>

namespace faun {

namespace {

using json = nlohmann::json;

constexpr double kBFloor = 1e-12;  // keeps log10(b) defined

struct LineFit {
    double slope, intercept;
};

// OLS y = slope*x + intercept; throws if x has no spread.
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx <= 0) throw CalibError("regression needs distinct abscissae");
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

// Least-squares quadratic y = c0 + c1*x + c2*x^2 via 3x3 normal equations.
std::array<double, 3> fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
    double m[3][4] = {};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double p[3] = {1.0, x[i], x[i] * x[i]};
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) m[r][c] += p[r] * p[c];
            m[r][3] += p[r] * y[i];
        }
    }
    for (int col = 0; col < 3; ++col) {  // gaussian elimination, partial pivot
        int piv = col;
        for (int r = col + 1; r < 3; ++r)
            if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        std::swap(m[col], m[piv]);
        if (std::abs(m[col][col]) < 1e-30) throw CalibError("quadratic fit is degenerate");
        for (int r = 0; r < 3; ++r) {
            if (r == col) continue;
            const double f = m[r][col] / m[col][col];
            for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
        }
    }
    return {m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]};
}

}  // namespace

void check_noise_params(const NoiseParams& p) {
    if (!std::isfinite(p.a) || !std::isfinite(p.b))
        throw ConfigError("noise params must be finite");
    if (!(p.a > 0)) throw ConfigError("noise coefficient a must be positive");
    if (p.b < 0) throw ConfigError("noise floor b must be nonnegative");
}

void SensorNoiseModel::validate() const {
    const double vals[] = {log_a_min,    log_a_max,    logb_line.slope, logb_line.intercept,
                           gain_to_a[0], gain_to_a[1], gain_to_b[0],    gain_to_b[1],
                           gain_to_b[2], gain_min,     gain_max};
    for (double v : vals)
        if (!std::isfinite(v)) throw ConfigError("noise model has non-finite fields");
    if (log_a_min > log_a_max) throw ConfigError("noise model: log_a_min > log_a_max");
    if (!(gain_min >= 1.0) || gain_min > gain_max)
        throw ConfigError("noise model: bad gain range");
}

BayerImage sample_noise(const BayerImage& clean, const NoiseParams& p, std::uint64_t seed) {
    check_noise_params(p);
    Rng rng(seed);
    BayerImage out = clean;
    out.meta.noise = p;
    for (float& v : out.plane) {
        const double var = p.a * double(v) + p.b;
        const double y = double(v) + std::sqrt(var) * rng.normal();
        v = float(std::clamp(y, 0.0, 1.0));
    }
    return out;
}

NoiseParams fit_noise_params(const std::vector<PatchStack>& stacks) {
    std::vector<double> means, vars;
    for (const auto& s : stacks) {
        if (s.mean < 0.1 || s.mean > 0.9 || s.samples.size() < 2) continue;
        double m = 0;
        for (float v : s.samples) m += v;
        m /= double(s.samples.size());
        double ss = 0;
        for (float v : s.samples) ss += (v - m) * (v - m);
        means.push_back(s.mean);
        vars.push_back(ss / double(s.samples.size() - 1));
    }
    if (means.size() < 2)
        throw CalibError("need at least 2 stacks with mean in [0.1, 0.9], got " +
                         std::to_string(means.size()));
    const LineFit fit = fit_line(means, vars);
    if (!(fit.slope > 0))
        throw CalibError("fitted signal-dependent coefficient is not positive (slope " +
                         std::to_string(fit.slope) + ")");
    return {fit.slope, std::max(fit.intercept, kBFloor)};
}

NoiseParams sample_training_params(const SensorNoiseModel& m, Rng& rng) {
    m.validate();
    const double la = m.log_a_min == m.log_a_max ? m.log_a_min
                                                 : rng.uniform(m.log_a_min, m.log_a_max);
    const double lb = m.logb_line.slope * la + m.logb_line.intercept;
    return {std::pow(10.0, la), std::max(std::pow(10.0, lb), kBFloor)};
}

NoiseParams gain_to_params(const SensorNoiseModel& m, double gain, bool* extrapolated) {
    m.validate();
    if (!(gain >= 1.0)) throw ConfigError("gain must be >= 1");
    if (extrapolated) *extrapolated = gain < m.gain_min || gain > m.gain_max;
    const double a = m.gain_to_a[0] + m.gain_to_a[1] * gain;
    const double b = m.gain_to_b[0] + m.gain_to_b[1] * gain + m.gain_to_b[2] * gain * gain;
    return {std::max(a, kBFloor), std::max(b, kBFloor)};
}

BayerImage ksigma(const BayerImage& x, const NoiseParams& p) {
    check_noise_params(p);
    const float s = float(1.0 / p.a), t = float(p.b / (p.a * p.a));
    BayerImage out = x;
    for (float& v : out.plane) v = v * s + t;
    return out;
}

BayerImage ksigma_inv(const BayerImage& z, const NoiseParams& p) {
    check_noise_params(p);
    const float s = float(p.a), t = float(-p.b / p.a);
    BayerImage out = z;
    for (float& v : out.plane) v = v * s + t;
    return out;
}

TensorPtr ksigma(Graph& g, const TensorPtr& x, const NoiseParams& p) {
    check_noise_params(p);
    return affine(g, x, float(1.0 / p.a), float(p.b / (p.a * p.a)));
}

TensorPtr ksigma_inv(Graph& g, const TensorPtr& z, const NoiseParams& p) {
    check_noise_params(p);
    return affine(g, z, float(p.a), float(-p.b / p.a));
}

SensorNoiseModel calibrate_noise_model(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw IoError("calibration manifest not found: " + (root / "manifest.json").string());
    json j;
    mf >> j;
    if (!j.contains("stacks") || !j["stacks"].is_array() || j["stacks"].empty())
        throw CalibError("manifest has no stacks");

    std::map<double, std::vector<PatchStack>> by_gain;
    for (const auto& e : j["stacks"]) {
        const auto file = e.at("file").get<std::string>();
        std::ifstream is(root / file, std::ios::binary);
        if (!is) throw IoError("missing stack file: " + file);
        const auto t = load_tensor(is);
        PatchStack s;
        s.samples = t->data;
        if (e.contains("mean")) {
            s.mean = e["mean"].get<double>();
        } else {
            double m = 0;
            for (float v : s.samples) m += v;
            s.mean = m / double(std::max<std::size_t>(s.samples.size(), 1));
        }
        by_gain[e.at("gain").get<double>()].push_back(std::move(s));
    }
    if (by_gain.size() < 3)
        throw CalibError("need stacks at >= 3 distinct gains, got " +
                         std::to_string(by_gain.size()));

    std::vector<double> gains, as, bs, log_as, log_bs;
    for (const auto& [gain, stacks] : by_gain) {
        const NoiseParams p = fit_noise_params(stacks);
        gains.push_back(gain);
        as.push_back(p.a);
        bs.push_back(p.b);
        log_as.push_back(std::log10(p.a));
        log_bs.push_back(std::log10(p.b));
    }

    SensorNoiseModel m;
    const LineFit a_fit = fit_line(gains, as);
    m.gain_to_a = {a_fit.intercept, a_fit.slope};
    m.gain_to_b = fit_quadratic(gains, bs);
    const LineFit lb_fit = fit_line(log_as, log_bs);
    m.logb_line = {lb_fit.slope, lb_fit.intercept};
    m.log_a_min = *std::min_element(log_as.begin(), log_as.end());
    m.log_a_max = *std::max_element(log_as.begin(), log_as.end());
    m.gain_min = gains.front();
    m.gain_max = gains.back();
    m.validate();
    return m;
}

std::string noise_model_to_json(const SensorNoiseModel& m) {
    json j;
    j["log10_a_min"] = m.log_a_min;
    j["log10_a_max"] = m.log_a_max;
    j["logb_line"] = {{"slope", m.logb_line.slope}, {"intercept", m.logb_line.intercept}};
    j["gain_to_a"] = m.gain_to_a;
    j["gain_to_b"] = m.gain_to_b;
    j["gain_min"] = m.gain_min;
    j["gain_max"] = m.gain_max;
    return j.dump(2);
}

SensorNoiseModel noise_model_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("bad noise model JSON: ") + e.what());
    }
    SensorNoiseModel m;
    m.log_a_min = j.at("log10_a_min").get<double>();
    m.log_a_max = j.at("log10_a_max").get<double>();
    m.logb_line.slope = j.at("logb_line").at("slope").get<double>();
    m.logb_line.intercept = j.at("logb_line").at("intercept").get<double>();
    m.gain_to_a = j.at("gain_to_a").get<std::array<double, 2>>();
    m.gain_to_b = j.at("gain_to_b").get<std::array<double, 3>>();
    m.gain_min = j.at("gain_min").get<double>();
    m.gain_max = j.at("gain_max").get<double>();
    m.validate();
    return m;
}

void save_noise_model(const std::string& path, const SensorNoiseModel& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << noise_model_to_json(m) << "\n";
}

SensorNoiseModel load_noise_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return noise_model_from_json(text);
}

}  // namespace faun
