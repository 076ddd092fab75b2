#pragma once

#include <array>
#include <vector>

#include "faun/bayer.hpp"
#include "faun/common.hpp"

namespace faun {

struct GrayImage {
    int h = 0, w = 0;
    std::vector<float> data;

    static GrayImage create(int h, int w);
    float& at(int y, int x) { return data[std::size_t(y) * w + x]; }
    float at(int y, int x) const { return data[std::size_t(y) * w + x]; }
};

/// Half-resolution mean of the two green channels — the luminance proxy the
/// alignment runs on. Input must read RGGB.
GrayImage green_proxy(const BayerImage& img);

/// Shi-Tomasi corners: local maxima of the structure tensor's smaller
/// eigenvalue, kept when above quality * (global max score) and at least
/// min_dist apart, strongest first, at most max_points. A featureless image
/// yields an empty list. Needs at least 16x16 pixels.
std::vector<std::array<double, 2>> detect_corners(const GrayImage& g, int max_points = 200,
                                                  double quality = 0.01, double min_dist = 7.0);

struct TrackedPoint {
    double x = 0.0, y = 0.0;    // where tracking started (prev frame)
    double dx = 0.0, dy = 0.0;  // displacement: next(p + d) matches prev(p)
    bool valid = false;         // false: singular tensor or window left the image
};

/// Iterative Lucas-Kanade on image gradients of `prev`, bilinear sampling,
/// uniform window weights. Content shifted by +s between frames comes back
/// as flow ~ +s.
std::vector<TrackedPoint> lucas_kanade(const GrayImage& prev, const GrayImage& next,
                                       const std::vector<std::array<double, 2>>& points,
                                       int window = 21, int iters = 10);

struct FlowEstimate {
    std::vector<std::array<double, 2>> points;  // full-res coords, noisy frame
    std::vector<std::array<double, 2>> flows;   // full-res displacements
    double dx = 0.0, dy = 0.0;  // mean translation, full-res pixels
    double residual_px = 0.0;   // rms scatter of flows about the mean
};

struct AlignedPair {
    BayerImage noisy, clean;  // cropped to the common region
    FlowEstimate flow;
    int shift_x = 0, shift_y = 0;  // even-pixel shift applied to clean
};

/// Estimates the global translation between the frames on gain-matched green
/// proxies, shifts the clean frame by the estimate rounded to even pixels
/// (anything finer would break the mosaic phase), and crops both to the
/// common region. Throws AlignError with fewer than 8 valid flow points.
AlignedPair align_pair(const BayerImage& noisy, const BayerImage& clean);

}  // namespace faun
