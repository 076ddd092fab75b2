#include "faun/bayer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "faun/common.hpp"

namespace faun {

namespace {

using json = nlohmann::json;

// Parity of the R site within the 2x2 tile.
void r_site(BayerPattern p, int& ry, int& rx) {
    switch (p) {
        case BayerPattern::RGGB: ry = 0; rx = 0; return;
        case BayerPattern::GRBG: ry = 0; rx = 1; return;
        case BayerPattern::GBRG: ry = 1; rx = 0; return;
        case BayerPattern::BGGR: ry = 1; rx = 1; return;
    }
    throw ConfigError("bad bayer pattern");
}

BayerPattern pattern_from_r_site(int ry, int rx) {
    if (ry == 0 && rx == 0) return BayerPattern::RGGB;
    if (ry == 0 && rx == 1) return BayerPattern::GRBG;
    if (ry == 1 && rx == 0) return BayerPattern::GBRG;
    return BayerPattern::BGGR;
}

constexpr float kWbClipLo = 0.0f, kWbClipHi = 1.0f;

void check_wb(const std::array<double, 3>& wb) {
    for (double v : wb)
        if (!(v > 0)) throw ConfigError("white balance gains must be positive");
}

// Bilinear demosaic stencils; weights normalized by the local mask response
// so sample sites reproduce exactly and borders stay unbiased.
constexpr int kKernG[3][3] = {{0, 1, 0}, {1, 4, 1}, {0, 1, 0}};
constexpr int kKernRB[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};

}  // namespace

std::string pattern_name(BayerPattern p) {
    switch (p) {
        case BayerPattern::RGGB: return "RGGB";
        case BayerPattern::GRBG: return "GRBG";
        case BayerPattern::GBRG: return "GBRG";
        case BayerPattern::BGGR: return "BGGR";
    }
    throw ConfigError("bad bayer pattern");
}

BayerPattern pattern_from_name(const std::string& s) {
    if (s == "RGGB") return BayerPattern::RGGB;
    if (s == "GRBG") return BayerPattern::GRBG;
    if (s == "GBRG") return BayerPattern::GBRG;
    if (s == "BGGR") return BayerPattern::BGGR;
    throw ConfigError("unknown bayer pattern: " + s);
}

BayerImage BayerImage::create(int h, int w, BayerPattern p) {
    if (h < 2 || w < 2) throw ShapeError("bayer image must be at least 2x2");
    BayerImage img;
    img.h = h;
    img.w = w;
    img.pattern = p;
    img.plane.assign(std::size_t(h) * w, 0.0f);
    return img;
}

int BayerImage::color_at(int y, int x) const {
    int ry, rx;
    r_site(pattern, ry, rx);
    const int py = y & 1, px = x & 1;
    if (py == ry && px == rx) return 0;
    if (py == (1 - ry) && px == (1 - rx)) return 2;
    return 1;
}

RgbImage RgbImage::create(int h, int w) {
    RgbImage img;
    img.h = h;
    img.w = w;
    img.data.assign(std::size_t(3) * h * w, 0.0f);
    return img;
}

BayerImage unify_bayer(const BayerImage& img) {
    if (img.h < 2 || img.w < 2) throw ShapeError("unify_bayer: image smaller than 2x2");
    int ry, rx;
    r_site(img.pattern, ry, rx);
    const int oy = ry, ox = rx;  // crop leading row/col so R lands at (0,0)
    int nh = img.h - oy, nw = img.w - ox;
    nh -= nh % 2;
    nw -= nw % 2;
    if (nh < 2 || nw < 2) throw ShapeError("unify_bayer: nothing left after phase crop");
    BayerImage out = BayerImage::create(nh, nw, BayerPattern::RGGB);
    out.meta = img.meta;
    for (int y = 0; y < nh; ++y)
        std::copy_n(&img.plane[std::size_t(y + oy) * img.w + ox], nw, &out.plane[std::size_t(y) * nw]);
    return out;
}

BayerImage augment_bayer(const BayerImage& img, bool flip_h, bool flip_v, bool transpose) {
    if (img.pattern != BayerPattern::RGGB)
        throw ConfigError("augment_bayer: input must be RGGB (unify first)");
    BayerImage t = img;
    if (flip_h) {
        for (int y = 0; y < t.h; ++y)
            std::reverse(t.plane.begin() + std::size_t(y) * t.w,
                         t.plane.begin() + std::size_t(y + 1) * t.w);
    }
    if (flip_v) {
        for (int y = 0; y < t.h / 2; ++y)
            std::swap_ranges(t.plane.begin() + std::size_t(y) * t.w,
                             t.plane.begin() + std::size_t(y + 1) * t.w,
                             t.plane.begin() + std::size_t(t.h - 1 - y) * t.w);
    }
    if (transpose) {
        BayerImage tr = BayerImage::create(t.w, t.h, t.pattern);
        tr.meta = t.meta;
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) tr.at(x, y) = t.at(y, x);
        t = std::move(tr);
    }
    // track where the R site ended up
    int ry = 0, rx = 0;
    if (flip_h) rx = (img.w - 1) % 2;
    if (flip_v) ry = (img.h - 1) % 2;
    if (transpose) std::swap(ry, rx);
    t.pattern = pattern_from_r_site(ry, rx);
    return unify_bayer(t);
}

BayerImage crop_bayer(const BayerImage& img, int y0, int x0, int h, int w) {
    if (y0 % 2 != 0 || x0 % 2 != 0 || h % 2 != 0 || w % 2 != 0)
        throw UsageError("crop_bayer: offsets and dims must be even");
    if (h <= 0 || w <= 0 || y0 < 0 || x0 < 0 || y0 + h > img.h || x0 + w > img.w)
        throw ShapeError("crop_bayer: window out of bounds");
    BayerImage out = BayerImage::create(h, w, img.pattern);
    out.meta = img.meta;
    for (int y = 0; y < h; ++y)
        std::copy_n(img.plane.begin() + std::size_t(y0 + y) * img.w + x0, w,
                    out.plane.begin() + std::size_t(y) * w);
    return out;
}

TensorPtr pack(const BayerImage& img) {
    if (img.pattern != BayerPattern::RGGB) throw ConfigError("pack: image must be RGGB");
    if (img.h % 2 != 0 || img.w % 2 != 0) throw ShapeError("pack: dims must be even");
    auto t = Tensor::create(1, 4, img.h / 2, img.w / 2);
    const int hh = img.h / 2, hw = img.w / 2;
    for (int s = 0; s < 4; ++s) {
        const int oy = s / 2, ox = s % 2;
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < hw; ++x) t->at(0, s, y, x) = img.at(2 * y + oy, 2 * x + ox);
    }
    return t;
}

BayerImage unpack(const Tensor& t, const BayerMeta& meta) {
    if (t.n != 1 || t.c != 4) throw ShapeError("unpack: expected (1,4,h,w), got " + t.shape_str());
    BayerImage img = BayerImage::create(t.h * 2, t.w * 2, BayerPattern::RGGB);
    img.meta = meta;
    for (int s = 0; s < 4; ++s) {
        const int oy = s / 2, ox = s % 2;
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) img.at(2 * y + oy, 2 * x + ox) = t.at(0, s, y, x);
    }
    return img;
}

float srgb_encode_value(float v) {
    return v <= 0.0031308f ? 12.92f * v : 1.055f * std::pow(v, 1.0f / 2.4f) - 0.055f;
}

float srgb_decode_value(float e) {
    return e <= 0.04045f ? e / 12.92f : std::pow((e + 0.055f) / 1.055f, 2.4f);
}

RgbImage isp(const BayerImage& raw, const IspParams& p) {
    if (raw.pattern != BayerPattern::RGGB) throw ConfigError("isp: input must be RGGB");
    check_wb(p.wb);
    const int h = raw.h, w = raw.w;

    std::vector<float> wbp(std::size_t(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float v = raw.at(y, x) * float(p.wb[raw.color_at(y, x)]);
            wbp[std::size_t(y) * w + x] = std::clamp(v, kWbClipLo, kWbClipHi);
        }

    RgbImage out = RgbImage::create(h, w);
    for (int c = 0; c < 3; ++c) {
        const auto& k = (c == 1) ? kKernG : kKernRB;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float num = 0, den = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= h) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= w) continue;
                        if (raw.color_at(yy, xx) != c) continue;
                        const float wgt = float(k[dy + 1][dx + 1]);
                        num += wgt * wbp[std::size_t(yy) * w + xx];
                        den += wgt;
                    }
                }
                out.at(c, y, x) = num / den;
            }
    }

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float r = out.at(0, y, x), g = out.at(1, y, x), b = out.at(2, y, x);
            for (int c = 0; c < 3; ++c) {
                float v = float(p.ccm[c * 3 + 0]) * r + float(p.ccm[c * 3 + 1]) * g +
                          float(p.ccm[c * 3 + 2]) * b;
                v = std::clamp(v, 0.0f, 1.0f);
                if (p.srgb_gamma) v = srgb_encode_value(v);
                out.at(c, y, x) = v;
            }
        }
    return out;
}

BayerImage simple_unprocess(const RgbImage& rgb, const std::array<double, 3>& wb,
                            std::uint64_t seed) {
    (void)seed;  // reproducibility hook; the transform itself is deterministic
    check_wb(wb);
    const int h = rgb.h - rgb.h % 2, w = rgb.w - rgb.w % 2;
    BayerImage out = BayerImage::create(h, w, BayerPattern::RGGB);
    out.meta.wb = wb;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int c = out.color_at(y, x);
            const float lin = srgb_decode_value(rgb.at(c, y, x));
            out.at(y, x) = std::clamp(lin / float(wb[c]), 0.0f, 1.0f);
        }
    return out;
}

// ---- differentiable ISP ------------------------------------------------------

namespace {

// constant (requires_grad=false) site masks and normalization for RGGB
TensorPtr site_gain_tensor(int n, int h, int w, const std::array<double, 3>& wb) {
    auto t = Tensor::create(n, 1, h, w);
    BayerImage proto = BayerImage::create(2, 2, BayerPattern::RGGB);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float v = float(wb[proto.color_at(y, x)]);
            for (int nn = 0; nn < n; ++nn) t->at(nn, 0, y, x) = v;
        }
    return t;
}

TensorPtr color_mask_tensor(int n, int h, int w, int color) {
    auto t = Tensor::create(n, 1, h, w);
    BayerImage proto = BayerImage::create(2, 2, BayerPattern::RGGB);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float v = proto.color_at(y, x) == color ? 1.0f : 0.0f;
            for (int nn = 0; nn < n; ++nn) t->at(nn, 0, y, x) = v;
        }
    return t;
}

TensorPtr inv_norm_tensor(int n, int h, int w, int color) {
    const auto& k = (color == 1) ? kKernG : kKernRB;
    BayerImage proto = BayerImage::create(2, 2, BayerPattern::RGGB);
    auto t = Tensor::create(n, 1, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float den = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    if (proto.color_at(yy, xx) == color) den += float(k[dy + 1][dx + 1]);
                }
            const float v = 1.0f / den;
            for (int nn = 0; nn < n; ++nn) t->at(nn, 0, y, x) = v;
        }
    return t;
}

TensorPtr demosaic_kernel(int color) {
    const auto& k = (color == 1) ? kKernG : kKernRB;
    auto t = Tensor::create(1, 1, 3, 3);
    for (int i = 0; i < 9; ++i) t->data[i] = float(k[i / 3][i % 3]);
    return t;
}

}  // namespace

TensorPtr isp_tensor(Graph& g, const TensorPtr& packed, const IspParams& p) {
    if (packed->c != 4) throw ShapeError("isp_tensor: expected packed 4-channel input");
    check_wb(p.wb);
    auto plane = bayer_unpack(g, packed);
    const int n = plane->n, h = plane->h, w = plane->w;
    plane = clamp01(g, mul(g, plane, site_gain_tensor(n, h, w, p.wb)));

    TensorPtr chans[3];
    for (int c = 0; c < 3; ++c) {
        auto masked = mul(g, plane, color_mask_tensor(n, h, w, c));
        auto num = conv2d(g, masked, demosaic_kernel(c), nullptr, {.stride = 1, .pad = 1});
        chans[c] = mul(g, num, inv_norm_tensor(n, h, w, c));
    }
    auto rgb = concat_channels(g, concat_channels(g, chans[0], chans[1]), chans[2]);

    auto ccm_w = Tensor::create(3, 3, 1, 1);
    for (int i = 0; i < 9; ++i) ccm_w->data[i] = float(p.ccm[i]);
    rgb = clamp01(g, conv2d(g, rgb, ccm_w, nullptr, {}));
    if (p.srgb_gamma) rgb = srgb_encode(g, rgb);
    return rgb;
}

TensorPtr mosaic_tensor(Graph& g, const TensorPtr& rgb) {
    if (rgb->c != 3) throw ShapeError("mosaic_tensor: expected 3-channel input");
    const int n = rgb->n, h = rgb->h, w = rgb->w;
    auto mask = Tensor::create(n, 3, h, w);
    BayerImage proto = BayerImage::create(2, 2, BayerPattern::RGGB);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int c = proto.color_at(y, x);
            for (int nn = 0; nn < n; ++nn) mask->at(nn, c, y, x) = 1.0f;
        }
    auto selected = mul(g, rgb, mask);
    auto sum_w = Tensor::from(1, 3, 1, 1, {1, 1, 1});
    auto plane = conv2d(g, selected, sum_w, nullptr, {});
    return bayer_pack(g, plane);
}

// ---- file formats ------------------------------------------------------------

namespace {

void skip_pnm_space(std::istream& is) {
    for (;;) {
        int ch = is.peek();
        if (ch == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(ch)) {
            is.get();
        } else {
            return;
        }
    }
}

int read_pnm_int(std::istream& is) {
    skip_pnm_space(is);
    int v;
    if (!(is >> v)) throw IoError("malformed PNM header");
    return v;
}

}  // namespace

void save_bayer(const std::string& pgm_path, const BayerImage& img) {
    std::ofstream os(pgm_path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + pgm_path);
    os << "P5\n" << img.w << " " << img.h << "\n65535\n";
    const double lo = img.meta.black_level, hi = img.meta.white_level;
    for (float v : img.plane) {
        const double dn = std::clamp(std::round(double(v) * (hi - lo) + lo), 0.0, 65535.0);
        const auto u = std::uint16_t(dn);
        os.put(char(u >> 8));
        os.put(char(u & 0xff));
    }
    if (!os) throw IoError("write failed: " + pgm_path);

    json j;
    j["pattern"] = pattern_name(img.pattern);
    j["gain"] = img.meta.gain;
    j["wb"] = img.meta.wb;
    j["black_level"] = img.meta.black_level;
    j["white_level"] = img.meta.white_level;
    if (img.meta.noise) {
        j["a"] = img.meta.noise->a;
        j["b"] = img.meta.noise->b;
    }
    std::ofstream js(pgm_path + ".json");
    if (!js) throw IoError("cannot open for writing: " + pgm_path + ".json");
    js << j.dump(2) << "\n";
}

BayerImage load_bayer(const std::string& pgm_path) {
    std::ifstream is(pgm_path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + pgm_path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw IoError("not a binary PGM: " + pgm_path);
    const int w = read_pnm_int(is);
    const int h = read_pnm_int(is);
    const int maxval = read_pnm_int(is);
    if (maxval != 65535) throw IoError("expected 16-bit PGM, maxval " + std::to_string(maxval));
    is.get();  // single whitespace after header

    BayerMeta meta;
    BayerPattern pat = BayerPattern::RGGB;
    std::ifstream js(pgm_path + ".json");
    if (js) {
        json j;
        js >> j;
        if (j.contains("pattern")) pat = pattern_from_name(j["pattern"].get<std::string>());
        if (j.contains("gain")) meta.gain = j["gain"].get<double>();
        if (j.contains("wb")) meta.wb = j["wb"].get<std::array<double, 3>>();
        if (j.contains("black_level")) meta.black_level = j["black_level"].get<double>();
        if (j.contains("white_level")) meta.white_level = j["white_level"].get<double>();
        if (j.contains("a") && j.contains("b"))
            meta.noise = NoiseParams{j["a"].get<double>(), j["b"].get<double>()};
    }

    BayerImage img = BayerImage::create(h, w, pat);
    img.meta = meta;
    const double lo = meta.black_level, hi = meta.white_level;
    std::vector<char> buf(std::size_t(h) * w * 2);
    is.read(buf.data(), std::streamsize(buf.size()));
    if (!is) throw IoError("truncated PGM: " + pgm_path);
    for (std::size_t i = 0; i < img.plane.size(); ++i) {
        const int dn = (std::uint8_t(buf[2 * i]) << 8) | std::uint8_t(buf[2 * i + 1]);
        img.plane[i] = float(std::clamp((dn - lo) / (hi - lo), 0.0, 1.0));
    }
    return img;
}

void save_ppm(const std::string& path, const RgbImage& img, int bits) {
    if (bits != 8 && bits != 16) throw ConfigError("save_ppm: bits must be 8 or 16");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    const int maxval = bits == 8 ? 255 : 65535;
    os << "P6\n" << img.w << " " << img.h << "\n" << maxval << "\n";
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int dn = int(std::clamp(std::round(double(img.at(c, y, x)) * maxval), 0.0,
                                              double(maxval)));
                if (bits == 16) os.put(char(dn >> 8));
                os.put(char(dn & 0xff));
            }
    if (!os) throw IoError("write failed: " + path);
}

RgbImage load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw IoError("not a binary PPM: " + path);
    const int w = read_pnm_int(is);
    const int h = read_pnm_int(is);
    const int maxval = read_pnm_int(is);
    if (maxval != 255 && maxval != 65535) throw IoError("unsupported PPM depth");
    is.get();
    const int bytes = maxval == 255 ? 1 : 2;
    std::vector<char> buf(std::size_t(h) * w * 3 * bytes);
    is.read(buf.data(), std::streamsize(buf.size()));
    if (!is) throw IoError("truncated PPM: " + path);
    RgbImage img = RgbImage::create(h, w);
    std::size_t o = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                int dn = std::uint8_t(buf[o++]);
                if (bytes == 2) dn = (dn << 8) | std::uint8_t(buf[o++]);
                img.at(c, y, x) = float(dn) / float(maxval);
            }
    return img;
}

}  // namespace faun
