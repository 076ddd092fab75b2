#include "faun/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

namespace faun {

namespace {

using json = nlohmann::json;

constexpr int kSpatialK = 3;

std::string wkey(const std::string& prefix, const char* leaf) { return prefix + "." + leaf; }

// One conv parameter pair (kernel + bias) under `prefix`. out_scale is the
// resolution level (packed dims >> out_scale) the conv's output lives at.
struct ConvSpec {
    std::string prefix;
    int cin, cout, k, groups, stride, out_scale;
    bool zero_init = false;
};

// Every conv of the network in forward order. Shared by init, forward
// accounting, and the MAC model so they cannot drift apart.
std::vector<ConvSpec> conv_plan(const ModelConfig& cfg) {
    std::vector<ConvSpec> plan;
    auto block = [&](const std::string& p, int cin, int cout, int stride, int in_scale) {
        const int mid = cin * cfg.expansion;
        const int out_scale = in_scale + (stride == 2 ? 1 : 0);
        plan.push_back({p + ".expand", cin, mid, 1, 1, 1, in_scale});
        plan.push_back({p + ".spatial", mid, mid, kSpatialK, cfg.groups, stride, out_scale});
        plan.push_back({p + ".project", mid, cout, 1, 1, 1, out_scale});
    };
    auto fa = [&](const std::string& p, int c, int scale) {
        if (!cfg.feature_align) return;
        plan.push_back({p + ".trunk", 4, cfg.fa_hidden, kSpatialK, 1, 1, scale});
        plan.push_back({p + ".gamma", cfg.fa_hidden, c, 1, 1, 1, scale, true});
        plan.push_back({p + ".beta", cfg.fa_hidden, c, 1, 1, 1, scale, true});
    };

    plan.push_back({"stem", 4, cfg.width(0), kSpatialK, 1, 1, 0});
    for (int s = 0; s < cfg.scales; ++s) {
        const std::string n = std::to_string(s);
        block("enc" + n, cfg.width(s), cfg.width(s), 1, s);
        fa("fa.enc" + n, cfg.width(s), s);
        plan.push_back({"skip" + n, cfg.width(s), cfg.skip_shrink_channels, 1, 1, 1, s});
        block("down" + n, cfg.width(s), cfg.width(s + 1), 2, s);
    }
    block("mid", cfg.width(cfg.scales), cfg.width(cfg.scales), 1, cfg.scales);
    fa("fa.mid", cfg.width(cfg.scales), cfg.scales);
    for (int s = cfg.scales - 1; s >= 0; --s) {
        const std::string n = std::to_string(s);
        plan.push_back({"up" + n + ".reduce", cfg.width(s + 1), cfg.width(s), 1, 1, 1, s});
        block("dec" + n, cfg.width(s), cfg.width(s), 1, s);
        fa("fa.dec" + n, cfg.width(s), s);
    }
    plan.push_back({"head", cfg.width(0), 4, kSpatialK, 1, 1, 0});
    return plan;
}

TensorPtr conv(Graph& g, const ModelWeights& w, const std::string& prefix, const TensorPtr& x,
               int stride = 1, int groups = 1) {
    const auto& kernel = w.at(wkey(prefix, "w"));
    const int pad = kernel->h / 2;
    return conv2d(g, x, kernel, w.at(wkey(prefix, "b")), {stride, pad, groups});
}

}  // namespace

void ModelConfig::validate() const {
    if (scales < 2) throw ConfigError("model: scales must be >= 2");
    if (base_width < 1 || expansion < 1 || groups < 1 || skip_shrink_channels < 1 ||
        fa_hidden < 1)
        throw ConfigError("model: widths, expansion, and groups must be positive");
    if (base_width % groups != 0)
        throw ConfigError("model: base_width must be divisible by groups");
}

std::string model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["scales"] = cfg.scales;
    j["base_width"] = cfg.base_width;
    j["expansion"] = cfg.expansion;
    j["groups"] = cfg.groups;
    j["skip_shrink_channels"] = cfg.skip_shrink_channels;
    j["fa_hidden"] = cfg.fa_hidden;
    j["feature_align"] = cfg.feature_align;
    return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("bad model config JSON: ") + e.what());
    }
    ModelConfig cfg;
    cfg.scales = j.value("scales", cfg.scales);
    cfg.base_width = j.value("base_width", cfg.base_width);
    cfg.expansion = j.value("expansion", cfg.expansion);
    cfg.groups = j.value("groups", cfg.groups);
    cfg.skip_shrink_channels = j.value("skip_shrink_channels", cfg.skip_shrink_channels);
    cfg.fa_hidden = j.value("fa_hidden", cfg.fa_hidden);
    cfg.feature_align = j.value("feature_align", cfg.feature_align);
    cfg.validate();
    return cfg;
}

const TensorPtr& ModelWeights::at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing model parameter: " + name);
    return it->second;
}

std::vector<TensorPtr> ModelWeights::all() const {
    std::vector<TensorPtr> out;
    out.reserve(params.size());
    for (const auto& [_, t] : params) out.push_back(t);
    return out;
}

bool ModelWeights::all_finite() const {
    for (const auto& [_, t] : params)
        if (!t->all_finite()) return false;
    return true;
}

ModelWeights init_weights(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelWeights w;
    for (const auto& spec : conv_plan(cfg)) {
        auto kernel = Tensor::create(spec.cout, spec.cin / spec.groups, spec.k, spec.k, true);
        if (!spec.zero_init) {
            const float stddev = std::sqrt(2.0f / float(spec.cin / spec.groups * spec.k * spec.k));
            for (auto& v : kernel->data) v = float(rng.normal()) * stddev;
        }
        w.params[wkey(spec.prefix, "w")] = kernel;
        w.params[wkey(spec.prefix, "b")] = Tensor::create(1, spec.cout, 1, 1, true);
    }
    return w;
}

void freeze_weights(ModelWeights& w) {
    for (auto& [name, t] : w.params) t->requires_grad = false;
}

TensorPtr arnet_block(Graph& g, const ModelWeights& w, const std::string& prefix,
                      const TensorPtr& x, int groups, int stride) {
    auto h = relu(g, conv(g, w, prefix + ".expand", x));
    h = relu(g, conv(g, w, prefix + ".spatial", h, stride, groups));
    h = conv(g, w, prefix + ".project", h);
    if (stride == 1 && h->c == x->c) h = add(g, h, x);
    return h;
}

TensorPtr feature_align(Graph& g, const ModelWeights& w, const std::string& prefix,
                        const TensorPtr& f, const TensorPtr& noisy_at_res) {
    if (noisy_at_res->h != f->h || noisy_at_res->w != f->w || noisy_at_res->n != f->n)
        throw ShapeError("feature_align: control input " + noisy_at_res->shape_str() +
                         " does not match features " + f->shape_str());
    auto trunk = relu(g, conv(g, w, prefix + ".trunk", noisy_at_res));
    auto gamma = conv(g, w, prefix + ".gamma", trunk);
    auto beta = conv(g, w, prefix + ".beta", trunk);
    return add(g, mul(g, affine(g, gamma, 1.0f, 1.0f), f), beta);
}

TensorPtr shrink_skip(Graph& g, const ModelWeights& w, const std::string& prefix,
                      const TensorPtr& enc_feat) {
    return conv(g, w, prefix, enc_feat);
}

TensorPtr expand_skip(Graph& g, const TensorPtr& shrunk, int target_channels) {
    return tile_channels(g, shrunk, target_channels);
}

TensorPtr forward(Graph& g, const ModelConfig& cfg, const ModelWeights& w, const TensorPtr& x,
                  ForwardTaps* taps) {
    cfg.validate();
    if (x->c != 4) throw ShapeError("forward: expected packed 4-channel input, got " + x->shape_str());
    const int gran = 1 << cfg.scales;
    if (x->h % gran != 0 || x->w % gran != 0)
        throw ShapeError("forward: packed dims must be divisible by " + std::to_string(gran) +
                         ", got " + x->shape_str());

    std::vector<TensorPtr> pyr = {x};
    for (int s = 1; s <= cfg.scales; ++s) pyr.push_back(avg_pool2d(g, pyr.back(), 2));

    auto tap = [&](const std::string& name, const TensorPtr& t) {
        if (taps) taps->emplace_back(name, t);
    };

    auto t = conv(g, w, "stem", x);
    std::vector<TensorPtr> skips(cfg.scales);
    for (int s = 0; s < cfg.scales; ++s) {
        const std::string n = std::to_string(s);
        t = arnet_block(g, w, "enc" + n, t, cfg.groups, 1);
        if (cfg.feature_align) t = feature_align(g, w, "fa.enc" + n, t, pyr[s]);
        tap("enc" + n, t);
        skips[s] = shrink_skip(g, w, "skip" + n, t);
        t = arnet_block(g, w, "down" + n, t, cfg.groups, 2);
    }
    t = arnet_block(g, w, "mid", t, cfg.groups, 1);
    if (cfg.feature_align) t = feature_align(g, w, "fa.mid", t, pyr[cfg.scales]);
    tap("mid", t);
    for (int s = cfg.scales - 1; s >= 0; --s) {
        const std::string n = std::to_string(s);
        t = conv(g, w, "up" + n + ".reduce", upsample_nearest(g, t, 2));
        t = add(g, t, expand_skip(g, skips[s], cfg.width(s)));
        t = arnet_block(g, w, "dec" + n, t, cfg.groups, 1);
        if (cfg.feature_align) t = feature_align(g, w, "fa.dec" + n, t, pyr[s]);
        tap("dec" + n, t);
    }
    auto out = add(g, x, conv(g, w, "head", t));
    tap("out", out);
    return out;
}

std::int64_t mac_count_conv(int cin, int cout, int k, int groups, int out_h, int out_w) {
    return std::int64_t(cin / groups) * cout * k * k * out_h * out_w;
}

std::int64_t count_macs_forward(const ModelConfig& cfg, int packed_h, int packed_w) {
    cfg.validate();
    const int gran = 1 << cfg.scales;
    if (packed_h % gran != 0 || packed_w % gran != 0)
        throw ShapeError("count_macs: packed dims must be divisible by " + std::to_string(gran));

    std::int64_t total = 0;
    for (const auto& spec : conv_plan(cfg))
        total += mac_count_conv(spec.cin, spec.cout, spec.k, spec.groups,
                                packed_h >> spec.out_scale, packed_w >> spec.out_scale);
    return total;
}

double count_macs(const ModelConfig& cfg, int bayer_h, int bayer_w) {
    if (bayer_h % 2 != 0 || bayer_w % 2 != 0)
        throw ShapeError("count_macs: mosaic dims must be even");
    const auto total = count_macs_forward(cfg, bayer_h / 2, bayer_w / 2);
    const double mp = double(bayer_h) * bayer_w / 1e6;
    return double(total) / 1e9 / mp;
}

void save_checkpoint(const std::string& dir, const ModelConfig& cfg, const ModelWeights& w) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "weights");
    std::ofstream cf(fs::path(dir) / "config.json");
    if (!cf) throw IoError("cannot write checkpoint config: " + dir);
    cf << model_config_to_json(cfg) << "\n";
    for (const auto& [name, t] : w.params) {
        std::ofstream os(fs::path(dir) / "weights" / (name + ".fdt"), std::ios::binary);
        if (!os) throw IoError("cannot write checkpoint tensor: " + name);
        save_tensor(os, *t);
    }
}

std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream cf(fs::path(dir) / "config.json");
    if (!cf) throw IoError("checkpoint config not found in " + dir);
    std::string text((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());
    const ModelConfig cfg = model_config_from_json(text);

    ModelWeights w;
    std::set<std::string> expected;
    for (const auto& spec : conv_plan(cfg)) {
        expected.insert(wkey(spec.prefix, "w"));
        expected.insert(wkey(spec.prefix, "b"));
    }
    std::set<std::string> found;
    for (const auto& entry : fs::directory_iterator(fs::path(dir) / "weights")) {
        if (entry.path().extension() != ".fdt") continue;
        found.insert(entry.path().stem().string());
    }
    if (found != expected) throw IoError("checkpoint weights do not match the config layout");

    Rng rng(0);  // shapes only; values are overwritten
    ModelWeights ref = init_weights(cfg, rng);
    for (const auto& name : expected) {
        std::ifstream is(fs::path(dir) / "weights" / (name + ".fdt"), std::ios::binary);
        auto t = load_tensor(is);
        if (!t->same_shape(*ref.at(name)))
            throw IoError("checkpoint tensor " + name + " has shape " + t->shape_str() +
                          ", expected " + ref.at(name)->shape_str());
        if (!t->all_finite()) throw IoError("checkpoint tensor " + name + " is not finite");
        t->requires_grad = true;
        w.params[name] = t;
    }
    return {cfg, w};
}

}  // namespace faun
