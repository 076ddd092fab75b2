#pragma once

#include <string>
#include <vector>

#include "faun/bayer.hpp"
#include "faun/common.hpp"
#include "faun/model.hpp"
#include "faun/noise.hpp"

namespace faun {

/// 10*log10(peak^2 / MSE), accumulated in double. Identical buffers return
/// +infinity as the sentinel for "no error".
double psnr(const BayerImage& a, const BayerImage& b, double peak = 1.0);
double psnr(const RgbImage& a, const RgbImage& b, double peak = 1.0);

/// Gaussian-windowed mean SSIM (Wang et al. formulation, valid windows only,
/// no sample-covariance correction). Throws ShapeError when either dimension
/// is smaller than the window. RGB images average the per-channel means.
double ssim(const BayerImage& a, const BayerImage& b, int window = 11, double sigma = 1.5,
            double k1 = 0.01, double k2 = 0.03, double peak = 1.0);
double ssim(const RgbImage& a, const RgbImage& b, int window = 11, double sigma = 1.5,
            double k1 = 0.01, double k2 = 0.03, double peak = 1.0);

/// One aligned test pair. The noisy frame's meta must carry either explicit
/// NoiseParams or an analog gain a SensorNoiseModel can translate.
struct EvalPair {
    std::string name;
    BayerImage noisy;
    BayerImage clean;
};

struct ImageMetrics {
    std::string name;
    double raw_psnr = 0.0, raw_ssim = 0.0;
    double rgb_psnr = 0.0, rgb_ssim = 0.0;
    int model_index = 0;
    bool routing_clamped = false;
};

struct MetricReport {
    double raw_psnr = 0.0, raw_ssim = 0.0;  // dataset means (inf propagates)
    double rgb_psnr = 0.0, rgb_ssim = 0.0;
    double gmacs_per_mp = 0.0;
    std::vector<ImageMetrics> rows;  // input order
};

/// Variance-stabilize, pack, run the network, unpack, undo the transform,
/// clip to [0,1]. The raw plane feeds RAW metrics directly; the ISP runs on
/// top for the RGB ones.
BayerImage denoise_image(const ModelConfig& cfg, const ModelWeights& w, const BayerImage& noisy,
                         const NoiseParams& p);

/// `model_path` is either a checkpoint directory or an array manifest JSON
/// (relative checkpoint entries resolve against the manifest's directory;
/// routing picks the subrange by each pair's annotated `a`). Pairs without
/// noise annotations fall back to gain via `gain_model` or fail. Rows are
/// independent of each other; means are arithmetic over rows. MACs come from
/// the first model's architecture (array entries share one config).
MetricReport evaluate(const std::string& model_path, const std::vector<EvalPair>& pairs,
                      const IspParams& isp_params, const SensorNoiseModel* gain_model = nullptr);

/// Infinite PSNR serializes as null plus an `*_identical: true` flag.
std::string report_to_json(const MetricReport& r);
/// name,raw_psnr,raw_ssim,rgb_psnr,rgb_ssim,gmacs_per_mp; final row "mean".
std::string report_to_csv(const MetricReport& r);
void save_report(const std::string& json_path, const MetricReport& r);

}  // namespace faun
