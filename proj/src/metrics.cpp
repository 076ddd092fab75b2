#include "faun/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "faun/nsma.hpp"

namespace faun {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

double psnr_buffers(const float* a, const float* b, std::size_t n, double peak) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(a[i]) - double(b[i]);
        s += d * d;
    }
    const double mse = s / double(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(window));
    const double c = (window - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < window; ++i) {
        const double t = (i - c) / sigma;
        k[std::size_t(i)] = std::exp(-0.5 * t * t);
        sum += k[std::size_t(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Separable valid-mode filtering of `plane` (h x w) with the 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w,
                                 const std::vector<double>& k) {
    const int win = int(k.size());
    const int wo = w - win + 1, ho = h - win + 1;
    std::vector<double> rows(std::size_t(h) * wo);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < wo; ++x) {
            double s = 0.0;
            for (int i = 0; i < win; ++i) s += k[std::size_t(i)] * plane[std::size_t(y) * w + x + i];
            rows[std::size_t(y) * wo + x] = s;
        }
    std::vector<double> out(std::size_t(ho) * wo);
    for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
            double s = 0.0;
            for (int i = 0; i < win; ++i) s += k[std::size_t(i)] * rows[std::size_t(y + i) * wo + x];
            out[std::size_t(y) * wo + x] = s;
        }
    return out;
}

double ssim_plane(const float* a, const float* b, int h, int w, int window, double sigma,
                  double k1, double k2, double peak) {
    if (window < 3 || window % 2 == 0) throw ConfigError("ssim: window must be odd and >= 3");
    if (!(sigma > 0.0)) throw ConfigError("ssim: sigma must be positive");
    if (h < window || w < window)
        throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than window " + std::to_string(window));

    const std::size_t n = std::size_t(h) * w;
    std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a[i], y = b[i];
        pa[i] = x;
        pb[i] = y;
        paa[i] = x * x;
        pbb[i] = y * y;
        pab[i] = x * y;
    }
    const auto k = gaussian_kernel(window, sigma);
    const auto mu1 = filter_valid(pa, h, w, k);
    const auto mu2 = filter_valid(pb, h, w, k);
    const auto m11 = filter_valid(paa, h, w, k);
    const auto m22 = filter_valid(pbb, h, w, k);
    const auto m12 = filter_valid(pab, h, w, k);

    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);
    double sum = 0.0;
    for (std::size_t i = 0; i < mu1.size(); ++i) {
        // Products go through named locals so fma contraction cannot make the
        // result depend on argument order.
        const double q1 = mu1[i] * mu1[i];
        const double q2 = mu2[i] * mu2[i];
        const double cross = mu1[i] * mu2[i];
        const double s11 = m11[i] - q1;
        const double s22 = m22[i] - q2;
        const double s12 = m12[i] - cross;
        const double num = (2.0 * cross + c1) * (2.0 * s12 + c2);
        const double den = ((q1 + q2) + c1) * ((s11 + s22) + c2);
        sum += num / den;
    }
    return sum / double(mu1.size());
}

void require_same_shape(int ha, int wa, int hb, int wb, const char* what) {
    if (ha != hb || wa != wb)
        throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(ha) + "x" +
                         std::to_string(wa) + " vs " + std::to_string(hb) + "x" +
                         std::to_string(wb));
}

json psnr_field(double v) { return std::isinf(v) ? json(nullptr) : json(v); }

void append_metric_fields(json& j, const char* raw_key, double raw_v, const char* rgb_key,
                          double rgb_v) {
    j[raw_key] = psnr_field(raw_v);
    if (std::isinf(raw_v)) j["raw_identical"] = true;
    j[rgb_key] = psnr_field(rgb_v);
    if (std::isinf(rgb_v)) j["rgb_identical"] = true;
}

std::string csv_num(double v) {
    if (std::isinf(v)) return "inf";
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

double psnr(const BayerImage& a, const BayerImage& b, double peak) {
    require_same_shape(a.h, a.w, b.h, b.w, "psnr");
    if (a.pattern != b.pattern) throw ShapeError("psnr: mosaic patterns differ");
    return psnr_buffers(a.plane.data(), b.plane.data(), a.plane.size(), peak);
}

double psnr(const RgbImage& a, const RgbImage& b, double peak) {
    require_same_shape(a.h, a.w, b.h, b.w, "psnr");
    return psnr_buffers(a.data.data(), b.data.data(), a.data.size(), peak);
}

double ssim(const BayerImage& a, const BayerImage& b, int window, double sigma, double k1,
            double k2, double peak) {
    require_same_shape(a.h, a.w, b.h, b.w, "ssim");
    if (a.pattern != b.pattern) throw ShapeError("ssim: mosaic patterns differ");
    return ssim_plane(a.plane.data(), b.plane.data(), a.h, a.w, window, sigma, k1, k2, peak);
}

double ssim(const RgbImage& a, const RgbImage& b, int window, double sigma, double k1, double k2,
            double peak) {
    require_same_shape(a.h, a.w, b.h, b.w, "ssim");
    const std::size_t hw = std::size_t(a.h) * a.w;
    double s = 0.0;
    for (int c = 0; c < 3; ++c)
        s += ssim_plane(a.data.data() + std::size_t(c) * hw, b.data.data() + std::size_t(c) * hw,
                        a.h, a.w, window, sigma, k1, k2, peak);
    return s / 3.0;
}

BayerImage denoise_image(const ModelConfig& cfg, const ModelWeights& w, const BayerImage& noisy,
                         const NoiseParams& p) {
    check_noise_params(p);
    const BayerImage z = ksigma(noisy, p);
    Graph g;
    const TensorPtr out = forward(g, cfg, w, pack(z));
    BayerImage den = ksigma_inv(unpack(*out, noisy.meta), p);
    for (auto& v : den.plane) v = std::clamp(v, 0.0f, 1.0f);
    return den;
}

MetricReport evaluate(const std::string& model_path, const std::vector<EvalPair>& pairs,
                      const IspParams& isp_params, const SensorNoiseModel* gain_model) {
    if (pairs.empty()) throw ConfigError("evaluate: empty pair set");

    std::vector<std::pair<ModelConfig, ModelWeights>> models;
    SubrangePartition routing;
    bool routed = false;
    if (fs::is_directory(model_path)) {
        models.push_back(load_checkpoint(model_path));
    } else {
        routing = load_array_manifest(model_path);
        if (routing.checkpoints.empty())
            throw ConfigError("evaluate: array manifest has no checkpoints: " + model_path);
        routed = true;
        const fs::path base = fs::path(model_path).parent_path();
        for (const auto& cp : routing.checkpoints) {
            fs::path dir(cp);
            if (dir.is_relative()) dir = base / dir;
            models.push_back(load_checkpoint(dir.string()));
        }
    }

    MetricReport rep;
    // Each row depends only on its own pair; this loop is safe to parallelize.
    for (const auto& pair : pairs) {
        require_same_shape(pair.noisy.h, pair.noisy.w, pair.clean.h, pair.clean.w, "evaluate");

        NoiseParams p;
        if (pair.noisy.meta.noise) {
            p = *pair.noisy.meta.noise;
        } else if (gain_model) {
            p = gain_to_params(*gain_model, pair.noisy.meta.gain);
        } else {
            throw ConfigError("evaluate: pair '" + pair.name +
                              "' has no noise annotation and no gain model was given");
        }

        ImageMetrics row;
        row.name = pair.name;
        if (routed) {
            const ModelChoice c = select_model(p.a, routing);
            row.model_index = c.index;
            row.routing_clamped = c.clamped;
        }
        const auto& [cfg, weights] = models[std::size_t(row.model_index)];
        const BayerImage den = denoise_image(cfg, weights, pair.noisy, p);

        row.raw_psnr = psnr(den, pair.clean);
        row.raw_ssim = ssim(den, pair.clean);
        const RgbImage den_rgb = isp(den, isp_params);
        const RgbImage clean_rgb = isp(pair.clean, isp_params);
        row.rgb_psnr = psnr(den_rgb, clean_rgb);
        row.rgb_ssim = ssim(den_rgb, clean_rgb);
        rep.rows.push_back(std::move(row));
    }

    for (const auto& r : rep.rows) {
        rep.raw_psnr += r.raw_psnr;
        rep.raw_ssim += r.raw_ssim;
        rep.rgb_psnr += r.rgb_psnr;
        rep.rgb_ssim += r.rgb_ssim;
    }
    const double n = double(rep.rows.size());
    rep.raw_psnr /= n;
    rep.raw_ssim /= n;
    rep.rgb_psnr /= n;
    rep.rgb_ssim /= n;
    rep.gmacs_per_mp = count_macs(models[0].first, pairs[0].noisy.h, pairs[0].noisy.w);
    return rep;
}

std::string report_to_json(const MetricReport& r) {
    json j;
    append_metric_fields(j, "raw_psnr", r.raw_psnr, "rgb_psnr", r.rgb_psnr);
    j["raw_ssim"] = r.raw_ssim;
    j["rgb_ssim"] = r.rgb_ssim;
    j["gmacs_per_mp"] = r.gmacs_per_mp;
    j["images"] = json::array();
    for (const auto& row : r.rows) {
        json jr;
        jr["name"] = row.name;
        append_metric_fields(jr, "raw_psnr", row.raw_psnr, "rgb_psnr", row.rgb_psnr);
        jr["raw_ssim"] = row.raw_ssim;
        jr["rgb_ssim"] = row.rgb_ssim;
        jr["model_index"] = row.model_index;
        jr["routing_clamped"] = row.routing_clamped;
        j["images"].push_back(std::move(jr));
    }
    return j.dump(2);
}

std::string report_to_csv(const MetricReport& r) {
    std::ostringstream os;
    os << "name,raw_psnr,raw_ssim,rgb_psnr,rgb_ssim,gmacs_per_mp\n";
    for (const auto& row : r.rows)
        os << row.name << ',' << csv_num(row.raw_psnr) << ',' << csv_num(row.raw_ssim) << ','
           << csv_num(row.rgb_psnr) << ',' << csv_num(row.rgb_ssim) << ','
           << csv_num(r.gmacs_per_mp) << '\n';
    os << "mean," << csv_num(r.raw_psnr) << ',' << csv_num(r.raw_ssim) << ','
       << csv_num(r.rgb_psnr) << ',' << csv_num(r.rgb_ssim) << ',' << csv_num(r.gmacs_per_mp)
       << '\n';
    return os.str();
}

void save_report(const std::string& json_path, const MetricReport& r) {
    std::ofstream f(json_path);
    if (!f) throw IoError("cannot open for writing: " + json_path);
    f << report_to_json(r) << "\n";
}

}  // namespace faun
