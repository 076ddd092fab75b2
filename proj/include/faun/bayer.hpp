#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "faun/tensor.hpp"

namespace faun {

enum class BayerPattern { RGGB, GRBG, GBRG, BGGR };

std::string pattern_name(BayerPattern p);
BayerPattern pattern_from_name(const std::string& s);

struct NoiseParams {
    double a = 0.0;  // signal-dependent variance coefficient
    double b = 0.0;  // signal-independent variance
};

struct BayerMeta {
    double gain = 1.0;
    std::optional<NoiseParams> noise;
    std::array<double, 3> wb = {2.0, 1.0, 1.6};
    double black_level = 0.0;
    double white_level = 65535.0;
};

// Single-plane mosaiced frame, values in [0,1].
struct BayerImage {
    int h = 0, w = 0;
    BayerPattern pattern = BayerPattern::RGGB;
    std::vector<float> plane;
    BayerMeta meta;

    static BayerImage create(int h, int w, BayerPattern p = BayerPattern::RGGB);
    float& at(int y, int x) { return plane[std::size_t(y) * w + x]; }
    float at(int y, int x) const { return plane[std::size_t(y) * w + x]; }
    // 0 = R, 1 = G, 2 = B at the given site under this pattern
    int color_at(int y, int x) const;
};

// Planar 3xHxW, values in [0,1].
struct RgbImage {
    int h = 0, w = 0;
    std::vector<float> data;

    static RgbImage create(int h, int w);
    float& at(int c, int y, int x) { return data[(std::size_t(c) * h + y) * w + x]; }
    float at(int c, int y, int x) const { return data[(std::size_t(c) * h + y) * w + x]; }
};

struct IspParams {
    std::array<double, 3> wb = {2.0, 1.0, 1.6};
    std::array<double, 9> ccm = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, applied to (r,g,b)
    bool srgb_gamma = true;
};

// Crop at most one leading row/column (then trailing to keep dims even) so the
// mosaic reads RGGB.
BayerImage unify_bayer(const BayerImage& img);

// flip_h, then flip_v, then transpose; output re-unified to RGGB.
BayerImage augment_bayer(const BayerImage& img, bool flip_h, bool flip_v, bool transpose);

// Even offsets and dims only, so the mosaic phase is preserved.
BayerImage crop_bayer(const BayerImage& img, int y0, int x0, int h, int w);

// (1,4,H/2,W/2) channel order R, Gr, Gb, B.
TensorPtr pack(const BayerImage& img);
BayerImage unpack(const Tensor& t, const BayerMeta& meta = {});

RgbImage isp(const BayerImage& raw, const IspParams& p);
BayerImage simple_unprocess(const RgbImage& rgb, const std::array<double, 3>& wb,
                            std::uint64_t seed = 0);

float srgb_encode_value(float linear);
float srgb_decode_value(float encoded);

// Differentiable ISP on packed tensors, mirroring isp(): white balance +
// clip, mask-normalized bilinear demosaic, CCM, optional sRGB transfer.
TensorPtr isp_tensor(Graph& g, const TensorPtr& packed, const IspParams& p);
// Sample the RGB tensor back onto RGGB sites and repack to 4 channels.
TensorPtr mosaic_tensor(Graph& g, const TensorPtr& rgb);

// 16-bit PGM plus sidecar JSON at `pgm_path + ".json"`.
void save_bayer(const std::string& pgm_path, const BayerImage& img);
BayerImage load_bayer(const std::string& pgm_path);

void save_ppm(const std::string& path, const RgbImage& img, int bits = 8);
RgbImage load_ppm(const std::string& path);

}  // namespace faun
