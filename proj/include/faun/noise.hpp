#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "faun/bayer.hpp"
#include "faun/common.hpp"
#include "faun/tensor.hpp"

namespace faun {

// log10 b = slope * log10 a + intercept
struct LogbLine {
    double slope = 2.0;
    double intercept = 1.0;
};

/// Per-sensor calibration: where (a, b) live, how they track each other, and
/// how they track analog gain. Defaults describe a generic desk-scale sensor.
struct SensorNoiseModel {
    double log_a_min = -4.0;  // log10 of a
    double log_a_max = -2.0;
    LogbLine logb_line;
    std::array<double, 2> gain_to_a = {0.0, 1e-4};       // a = c0 + c1*g
    std::array<double, 3> gain_to_b = {0.0, 0.0, 1e-8};  // b = c0 + c1*g + c2*g^2
    double gain_min = 1.0;
    double gain_max = 16.0;

    void validate() const;  // throws ConfigError
};

void check_noise_params(const NoiseParams& p);  // a > 0, b >= 0, finite

/// y = clip(x + n, 0, 1), n ~ N(0, a*x + b) independent per site.
BayerImage sample_noise(const BayerImage& clean, const NoiseParams& p, std::uint64_t seed);

/// One intensity level observed many times (e.g. a flat patch across a burst).
struct PatchStack {
    std::vector<float> samples;
    double mean = 0.0;
};

/// Least-squares line var = a*mean + b over stacks with mean in [0.1, 0.9],
/// where clipping bias is negligible. Throws CalibError when fewer than two
/// stacks are usable, means are not distinct, or the fitted slope is <= 0.
NoiseParams fit_noise_params(const std::vector<PatchStack>& stacks);

/// log10 a ~ Uniform(log_a_min, log_a_max); b follows the model's line.
NoiseParams sample_training_params(const SensorNoiseModel& m, Rng& rng);

/// Regress (a, b) from analog gain; values clamp positive. Gains outside the
/// calibrated range extrapolate and set *extrapolated.
NoiseParams gain_to_params(const SensorNoiseModel& m, double gain, bool* extrapolated = nullptr);

/// Variance-stabilizing transform T(x) = x/a + b/a^2 and its inverse.
/// Transformed planes leave the nominal [0,1] range by design.
BayerImage ksigma(const BayerImage& x, const NoiseParams& p);
BayerImage ksigma_inv(const BayerImage& z, const NoiseParams& p);
TensorPtr ksigma(Graph& g, const TensorPtr& x, const NoiseParams& p);
TensorPtr ksigma_inv(Graph& g, const TensorPtr& z, const NoiseParams& p);

/// Fit a SensorNoiseModel from a directory of flat-patch stacks. Expects
/// `manifest.json` with entries {"file", "gain", "mean"(optional)}; each file
/// is a tensor whose elements are the stack samples. Needs >= 3 distinct
/// gains (quadratic fit); per-gain fits follow fit_noise_params.
SensorNoiseModel calibrate_noise_model(const std::string& dir);

std::string noise_model_to_json(const SensorNoiseModel& m);
SensorNoiseModel noise_model_from_json(const std::string& text);
void save_noise_model(const std::string& path, const SensorNoiseModel& m);
SensorNoiseModel load_noise_model(const std::string& path);

}  // namespace faun
