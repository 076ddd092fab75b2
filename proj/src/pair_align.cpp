#include "faun/pair_align.hpp"

#include <algorithm>
#include <cmath>

namespace faun {

namespace {

constexpr int kSobelMargin = 2;  // gradient (1) + block window (1)

struct Candidate {
    double score;
    int y, x;
};

// Bilinear sample; caller guarantees 0 <= x <= w-1, 0 <= y <= h-1.
double sample(const std::vector<double>& img, int h, int w, double x, double y) {
    (void)h;
    const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    const int x1 = std::min(x0 + 1, w - 1);
    const double fx = x - x0, fy = y - y0;
    const std::size_t row0 = std::size_t(y0) * w, row1 = row0 + ((y0 + 1 < h) ? w : 0);
    const double top = img[row0 + x0] * (1.0 - fx) + img[row0 + x1] * fx;
    const double bot = img[row1 + x0] * (1.0 - fx) + img[row1 + x1] * fx;
    return top * (1.0 - fy) + bot * fy;
}

bool in_bounds(double x, double y, int h, int w) {
    return x >= 0.0 && y >= 0.0 && x <= double(w - 1) && y <= double(h - 1);
}

// Central-difference gradients, zero on the border.
void gradients(const GrayImage& g, std::vector<double>& gx, std::vector<double>& gy) {
    const int h = g.h, w = g.w;
    gx.assign(std::size_t(h) * w, 0.0);
    gy.assign(std::size_t(h) * w, 0.0);
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            gx[i] = 0.5 * (double(g.at(y, x + 1)) - double(g.at(y, x - 1)));
            gy[i] = 0.5 * (double(g.at(y + 1, x)) - double(g.at(y - 1, x)));
        }
}

float median_ratio(const GrayImage& num, const GrayImage& den) {
    std::vector<float> r;
    r.reserve(num.data.size());
    for (std::size_t i = 0; i < num.data.size(); ++i)
        if (den.data[i] > 1e-4f) r.push_back(num.data[i] / den.data[i]);
    if (r.size() < 16) return 1.0f;
    auto mid = r.begin() + std::ptrdiff_t(r.size() / 2);
    std::nth_element(r.begin(), mid, r.end());
    return *mid;
}

}  // namespace

GrayImage GrayImage::create(int h, int w) {
    GrayImage g;
    g.h = h;
    g.w = w;
    g.data.assign(std::size_t(h) * w, 0.0f);
    return g;
}

GrayImage green_proxy(const BayerImage& img) {
    if (img.pattern != BayerPattern::RGGB)
        throw UsageError("green_proxy: expects an RGGB frame (unify first)");
    if (img.h % 2 || img.w % 2) throw ShapeError("green_proxy: dimensions must be even");
    auto g = GrayImage::create(img.h / 2, img.w / 2);
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            g.at(y, x) = 0.5f * (img.at(2 * y, 2 * x + 1) + img.at(2 * y + 1, 2 * x));
    return g;
}

std::vector<std::array<double, 2>> detect_corners(const GrayImage& g, int max_points,
                                                  double quality, double min_dist) {
    if (g.h < 16 || g.w < 16)
        throw ShapeError("detect_corners: image must be at least 16x16, got " +
                         std::to_string(g.h) + "x" + std::to_string(g.w));
    if (max_points < 1 || quality <= 0.0 || quality > 1.0 || min_dist < 0.0)
        throw ConfigError("detect_corners: bad parameters");

    const int h = g.h, w = g.w;
    std::vector<double> gx, gy;
    gradients(g, gx, gy);

    // Smaller eigenvalue of the 3x3-summed structure tensor.
    std::vector<double> score(std::size_t(h) * w, 0.0);
    double best = 0.0;
    for (int y = kSobelMargin; y < h - kSobelMargin; ++y)
        for (int x = kSobelMargin; x < w - kSobelMargin; ++x) {
            double sxx = 0.0, sxy = 0.0, syy = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const std::size_t i = std::size_t(y + dy) * w + (x + dx);
                    sxx += gx[i] * gx[i];
                    sxy += gx[i] * gy[i];
                    syy += gy[i] * gy[i];
                }
            const double half_tr = 0.5 * (sxx + syy);
            const double d = 0.5 * std::sqrt((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy);
            const double s = half_tr - d;
            score[std::size_t(y) * w + x] = s;
            best = std::max(best, s);
        }
    if (best <= 0.0) return {};

    const double thr = quality * best;
    std::vector<Candidate> cands;
    for (int y = kSobelMargin; y < h - kSobelMargin; ++y)
        for (int x = kSobelMargin; x < w - kSobelMargin; ++x) {
            const double s = score[std::size_t(y) * w + x];
            if (s < thr) continue;
            bool peak = true;  // 8-neighbour local maximum, ties broken by scan order
            for (int dy = -1; dy <= 1 && peak; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dy && !dx) continue;
                    const double o = score[std::size_t(y + dy) * w + (x + dx)];
                    if (o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0)))) {
                        peak = false;
                        break;
                    }
                }
            if (peak) cands.push_back({s, y, x});
        }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });

    std::vector<std::array<double, 2>> out;
    const double d2 = min_dist * min_dist;
    for (const auto& c : cands) {
        bool ok = true;
        for (const auto& p : out) {
            const double ddx = p[0] - c.x, ddy = p[1] - c.y;
            if (ddx * ddx + ddy * ddy < d2) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        out.push_back({double(c.x), double(c.y)});
        if (int(out.size()) >= max_points) break;
    }
    return out;
}

std::vector<TrackedPoint> lucas_kanade(const GrayImage& prev, const GrayImage& next,
                                       const std::vector<std::array<double, 2>>& points,
                                       int window, int iters) {
    if (prev.h != next.h || prev.w != next.w)
        throw ShapeError("lucas_kanade: frame shapes differ");
    if (window < 3 || window % 2 == 0) throw ConfigError("lucas_kanade: window must be odd >= 3");
    if (iters < 1) throw ConfigError("lucas_kanade: iters must be >= 1");

    const int h = prev.h, w = prev.w, r = window / 2;
    std::vector<double> ip(prev.data.begin(), prev.data.end());
    std::vector<double> jp(next.data.begin(), next.data.end());
    std::vector<double> gx, gy;
    gradients(prev, gx, gy);

    std::vector<TrackedPoint> out;
    out.reserve(points.size());
    for (const auto& p : points) {
        TrackedPoint t;
        t.x = p[0];
        t.y = p[1];
        out.push_back(t);
        TrackedPoint& tp = out.back();

        if (!in_bounds(p[0] - r, p[1] - r, h, w) || !in_bounds(p[0] + r, p[1] + r, h, w))
            continue;  // window outside the frame

        double gxx = 0.0, gxy = 0.0, gyy = 0.0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const double sx = sample(gx, h, w, p[0] + dx, p[1] + dy);
                const double sy = sample(gy, h, w, p[0] + dx, p[1] + dy);
                gxx += sx * sx;
                gxy += sx * sy;
                gyy += sy * sy;
            }
        const double det = gxx * gyy - gxy * gxy;
        const double tr = gxx + gyy;
        if (det <= 1e-12 || det <= 1e-9 * tr * tr) continue;  // singular: drop

        double vx = 0.0, vy = 0.0;
        bool ok = true;
        for (int k = 0; k < iters && ok; ++k) {
            double bx = 0.0, by = 0.0;
            for (int dy = -r; dy <= r && ok; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const double xs = p[0] + dx, ys = p[1] + dy;
                    if (!in_bounds(xs + vx, ys + vy, h, w)) {
                        ok = false;
                        break;
                    }
                    const double di =
                        sample(ip, h, w, xs, ys) - sample(jp, h, w, xs + vx, ys + vy);
                    bx += di * sample(gx, h, w, xs, ys);
                    by += di * sample(gy, h, w, xs, ys);
                }
            if (!ok) break;
            const double ux = (gyy * bx - gxy * by) / det;
            const double uy = (gxx * by - gxy * bx) / det;
            vx += ux;
            vy += uy;
            if (ux * ux + uy * uy < 1e-6) break;
        }
        if (!ok) continue;
        tp.dx = vx;
        tp.dy = vy;
        tp.valid = true;
    }
    return out;
}

AlignedPair align_pair(const BayerImage& noisy, const BayerImage& clean) {
    if (noisy.h != clean.h || noisy.w != clean.w)
        throw ShapeError("align_pair: frame shapes differ");
    if (noisy.pattern != clean.pattern) throw ShapeError("align_pair: mosaic patterns differ");
    const BayerImage nu = unify_bayer(noisy);
    const BayerImage cu = unify_bayer(clean);

    const GrayImage pn = green_proxy(nu);
    GrayImage pc = green_proxy(cu);
    const float gain = median_ratio(pn, pc);
    for (auto& v : pc.data) v *= gain;

    const auto corners = detect_corners(pn);
    const auto tracked = lucas_kanade(pn, pc, corners);

    AlignedPair res;
    double mx = 0.0, my = 0.0;
    int nvalid = 0;
    for (const auto& t : tracked) {
        if (!t.valid) continue;
        res.flow.points.push_back({2.0 * t.x, 2.0 * t.y});
        res.flow.flows.push_back({2.0 * t.dx, 2.0 * t.dy});
        mx += t.dx;
        my += t.dy;
        ++nvalid;
    }
    if (nvalid < 8)
        throw AlignError("align_pair: only " + std::to_string(nvalid) +
                         " valid flow points (need 8)");
    mx /= nvalid;
    my /= nvalid;
    res.flow.dx = 2.0 * mx;
    res.flow.dy = 2.0 * my;
    double rss = 0.0;
    for (const auto& f : res.flow.flows) {
        const double ex = f[0] - res.flow.dx, ey = f[1] - res.flow.dy;
        rss += ex * ex + ey * ey;
    }
    res.flow.residual_px = std::sqrt(rss / nvalid);

    // Rounding the half-res flow to whole proxy pixels lands on even full-res
    // pixels, keeping the RGGB phase intact.
    res.shift_x = 2 * int(std::lround(mx));
    res.shift_y = 2 * int(std::lround(my));

    const int h = nu.h, w = nu.w;
    const int x0 = std::max(0, -res.shift_x), x1 = std::min(w, w - res.shift_x);
    const int y0 = std::max(0, -res.shift_y), y1 = std::min(h, h - res.shift_y);
    if (x1 - x0 < 16 || y1 - y0 < 16)
        throw AlignError("align_pair: estimated shift leaves no usable overlap");
    res.noisy = crop_bayer(nu, y0, x0, y1 - y0, x1 - x0);
    res.clean = crop_bayer(cu, y0 + res.shift_y, x0 + res.shift_x, y1 - y0, x1 - x0);
    return res;
}

}  // namespace faun
