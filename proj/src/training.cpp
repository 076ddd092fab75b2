#include "faun/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numbers>

#include "faun/metrics.hpp"

namespace faun {

namespace fs = std::filesystem;

namespace {

using json = nlohmann::json;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Per-(iteration, slot) stream; decorrelates the two indices so reordering a
// batch or resuming at an iteration cannot alias another draw.
Rng example_rng(std::uint64_t seed, int iter, int slot) {
    const std::uint64_t a = 0x9e3779b97f4a7c15ull * std::uint64_t(iter + 1);
    const std::uint64_t b = 0xbf58476d1ce4e5b9ull * std::uint64_t(slot + 1);
    return Rng(seed ^ a ^ b);
}

json loss_config_to_json(const LossConfig& c) {
    json j;
    j["mode"] = loss_mode_name(c.mode);
    j["charb_c"] = c.charb_c;
    j["weight"] = c.weight;
    j["teacher_checkpoint"] = c.teacher_checkpoint;
    j["content_weight"] = c.content_weight;
    j["style_weight"] = c.style_weight;
    return j;
}

LossConfig loss_config_from_json(const json& j) {
    LossConfig c;
    if (j.contains("mode")) c.mode = loss_mode_from_name(j.at("mode").get<std::string>());
    c.charb_c = j.value("charb_c", c.charb_c);
    c.weight = j.value("weight", default_loss_weight(c.mode));
    c.teacher_checkpoint = j.value("teacher_checkpoint", c.teacher_checkpoint);
    c.content_weight = j.value("content_weight", c.content_weight);
    c.style_weight = j.value("style_weight", c.style_weight);
    return c;
}

struct Dataset {
    std::vector<std::string> train_files, holdout_files;  // sorted basenames
    std::vector<BayerImage> train, holdout;
};

Dataset load_dataset(const TrainConfig& cfg) {
    if (!fs::is_directory(cfg.data_dir))
        throw IoError("train: data_dir is not a directory: " + cfg.data_dir);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(cfg.data_dir))
        if (entry.path().extension() == ".pgm") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("train: no .pgm images in " + cfg.data_dir);

    Dataset ds;
    for (const auto& name : names) {
        BayerImage img = load_bayer((fs::path(cfg.data_dir) / name).string());
        if (is_holdout(name, cfg.holdout_fraction)) {
            ds.holdout_files.push_back(name);
            ds.holdout.push_back(std::move(img));
        } else {
            ds.train_files.push_back(name);
            ds.train.push_back(std::move(img));
        }
    }
    if (ds.train.empty()) throw IoError("train: every image fell into the held-out split");
    return ds;
}

struct HoldoutEval {
    double psnr_denoised = std::numeric_limits<double>::quiet_NaN();
    double psnr_noisy = std::numeric_limits<double>::quiet_NaN();
    int count = 0;
};

// Noise draws depend only on the filename, so evals are comparable across
// iterations, seeds, and runs.
HoldoutEval eval_holdout(const TrainConfig& cfg, const ModelWeights& w, const Dataset& ds) {
    HoldoutEval ev;
    if (ds.holdout.empty()) return ev;
    const int gran = 2 << cfg.model.scales;  // mosaic-domain granularity
    double sum_den = 0.0, sum_noisy = 0.0;
    int used = 0;
    for (std::size_t i = 0; i < ds.holdout.size(); ++i) {
        BayerImage clean = unify_bayer(ds.holdout[i]);
        const int h = clean.h / gran * gran, w2 = clean.w / gran * gran;
        if (h < gran || w2 < gran) continue;
        clean = crop_bayer(clean, (clean.h - h) / 2 / 2 * 2, (clean.w - w2) / 2 / 2 * 2, h, w2);
        Rng er(0x5eedfacedull ^ fnv1a(ds.holdout_files[i]));
        const NoiseParams p = sample_training_params(cfg.noise, er);
        const BayerImage noisy = sample_noise(clean, p, er.next_u64());
        const BayerImage den = denoise_image(cfg.model, w, noisy, p);
        sum_den += psnr(den, clean);
        sum_noisy += psnr(noisy, clean);
        ++used;
    }
    if (used == 0) return ev;
    ev.psnr_denoised = sum_den / used;
    ev.psnr_noisy = sum_noisy / used;
    ev.count = used;
    return ev;
}

void log_line(std::ostream& os, const json& j) { os << j.dump() << "\n" << std::flush; }

}  // namespace

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    noise.validate();
    const int gran = 2 << model.scales;
    if (patch <= 0 || patch % gran != 0)
        throw ConfigError("train: patch must be a positive multiple of " + std::to_string(gran));
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (iterations < 0) throw ConfigError("train: iterations must be >= 0");
    if (!(max_lr > 0.0) || !std::isfinite(max_lr))
        throw ConfigError("train: max_lr must be positive");
    if (!(clip_norm > 0.0) || !std::isfinite(clip_norm))
        throw ConfigError("train: clip_norm must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
        throw ConfigError("train: holdout_fraction must be in [0, 1)");
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["data_dir"] = cfg.data_dir;
    j["out_dir"] = cfg.out_dir;
    j["model"] = json::parse(model_config_to_json(cfg.model));
    j["loss"] = loss_config_to_json(cfg.loss);
    j["noise"] = json::parse(noise_model_to_json(cfg.noise));
    j["patch"] = cfg.patch;
    j["batch"] = cfg.batch;
    j["iterations"] = cfg.iterations;
    j["max_lr"] = cfg.max_lr;
    j["clip_norm"] = cfg.clip_norm;
    j["holdout_fraction"] = cfg.holdout_fraction;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["eval_every"] = cfg.eval_every;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("bad train config JSON: ") + e.what());
    }
    static const std::vector<std::string> known = {
        "data_dir",  "out_dir", "model",     "loss",             "noise",
        "patch",     "batch",   "iterations", "max_lr",          "clip_norm",
        "holdout_fraction",     "checkpoint_every", "eval_every", "seed"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("train config: unknown key '" + key + "'");

    TrainConfig cfg;
    try {
        cfg.data_dir = j.value("data_dir", cfg.data_dir);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
        if (j.contains("model")) cfg.model = model_config_from_json(j.at("model").dump());
        if (j.contains("loss")) cfg.loss = loss_config_from_json(j.at("loss"));
        if (j.contains("noise")) {
            // The sensor parser wants every key; fill gaps from the defaults.
            json full = json::parse(noise_model_to_json(cfg.noise));
            full.merge_patch(j.at("noise"));
            cfg.noise = noise_model_from_json(full.dump());
        }
        cfg.patch = j.value("patch", cfg.patch);
        cfg.batch = j.value("batch", cfg.batch);
        cfg.iterations = j.value("iterations", cfg.iterations);
        cfg.max_lr = j.value("max_lr", cfg.max_lr);
        cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
        cfg.holdout_fraction = j.value("holdout_fraction", cfg.holdout_fraction);
        cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
        cfg.eval_every = j.value("eval_every", cfg.eval_every);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open train config: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return train_config_from_json(text);
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write train config: " + path);
    os << train_config_to_json(cfg) << "\n";
}

TrainExample make_example(const BayerImage& clean, const TrainConfig& cfg, std::uint64_t seed) {
    const BayerImage u = unify_bayer(clean);
    if (u.h < cfg.patch || u.w < cfg.patch)
        throw ShapeError("make_example: image " + std::to_string(u.h) + "x" + std::to_string(u.w) +
                         " is smaller than the patch " + std::to_string(cfg.patch));
    Rng rng(seed);
    const int y0 = 2 * int(rng.uniform_int(std::uint64_t((u.h - cfg.patch) / 2 + 1)));
    const int x0 = 2 * int(rng.uniform_int(std::uint64_t((u.w - cfg.patch) / 2 + 1)));
    const bool fh = rng.coin(), fv = rng.coin(), tr = rng.coin();
    const BayerImage aug = augment_bayer(crop_bayer(u, y0, x0, cfg.patch, cfg.patch), fh, fv, tr);

    TrainExample ex;
    ex.params = sample_training_params(cfg.noise, rng);
    const std::uint64_t noise_seed = rng.next_u64();
    ex.input = pack(ksigma(sample_noise(aug, ex.params, noise_seed), ex.params));
    ex.target = pack(ksigma(aug, ex.params));
    return ex;
}

void adam_step(ModelWeights& w, AdamState& st, double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adam_step: bad learning rate");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
    for (auto& [name, t] : w.params) {
        if (!t->requires_grad) continue;
        auto& slot = st.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(t->data.size(), 0.0f);
            slot.v.assign(t->data.size(), 0.0f);
        }
        if (slot.m.size() != t->data.size())
            throw ShapeError("adam_step: state for " + name + " does not match the tensor");
        const bool has_grad = t->grad.size() == t->data.size();
        for (std::size_t i = 0; i < t->data.size(); ++i) {
            const double g = has_grad ? double(t->grad[i]) : 0.0;
            const double m = st.beta1 * double(slot.m[i]) + (1.0 - st.beta1) * g;
            const double v = st.beta2 * double(slot.v[i]) + (1.0 - st.beta2) * g * g;
            slot.m[i] = float(m);
            slot.v[i] = float(v);
            t->data[i] = float(double(t->data[i]) -
                               lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps));
        }
    }
}

double clip_global_norm(ModelWeights& w, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, t] : w.params) {
        if (!t->requires_grad || t->grad.empty()) continue;
        for (float g : t->grad) sq += double(g) * double(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const float scale = float(max_norm / norm);
        for (auto& [name, t] : w.params) {
            if (!t->requires_grad || t->grad.empty()) continue;
            for (float& g : t->grad) g *= scale;
        }
    }
    return norm;
}

double cosine_lr(int iter, int total, double max_lr) {
    if (total <= 0) throw ConfigError("cosine_lr: total must be positive");
    if (iter < 0 || iter > total) throw UsageError("cosine_lr: iter must lie in [0, total]");
    return max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(iter) / double(total)));
}

bool is_holdout(const std::string& filename, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw ConfigError("is_holdout: fraction must be in [0, 1)");
    const std::string base = fs::path(filename).filename().string();
    return double(fnv1a(base) % 1000) < std::llround(fraction * 1000.0);
}

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");
    fs::create_directories(cfg.out_dir);
    std::ofstream log(fs::path(cfg.out_dir) / "train_log.jsonl");
    if (!log) throw IoError("train: cannot write log in " + cfg.out_dir);

    const Dataset ds = load_dataset(cfg);
    log_line(log, {{"event", "config"},
                   {"config", json::parse(train_config_to_json(cfg))},
                   {"train_images", ds.train.size()},
                   {"holdout_images", ds.holdout.size()}});

    Teacher teacher_store;
    const Teacher* teacher = nullptr;
    if (cfg.loss.mode != LossMode::Charbonnier) {
        teacher_store = load_teacher(cfg.loss.teacher_checkpoint);
        teacher = &teacher_store;
    }

    Rng init_rng(cfg.seed);
    ModelWeights weights = init_weights(cfg.model, init_rng);
    AdamState opt;

    const int ph = cfg.patch / 2, pw = cfg.patch / 2;
    double last_loss = std::numeric_limits<double>::quiet_NaN();

    auto abort_run = [&](int iter, const std::string& reason) {
        const std::string dir = (fs::path(cfg.out_dir) / "checkpoint_partial").string();
        save_checkpoint(dir, cfg.model, weights);
        log_line(log, {{"event", "abort"}, {"iter", iter}, {"reason", reason},
                       {"checkpoint", dir}});
        throw TrainError("train: aborted at iteration " + std::to_string(iter) + ": " + reason);
    };

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        Graph g;
        auto input = Tensor::create(cfg.batch, 4, ph, pw);
        auto target = Tensor::create(cfg.batch, 4, ph, pw);
        const std::size_t slice = std::size_t(4) * ph * pw;
        for (int k = 0; k < cfg.batch; ++k) {
            Rng mix = example_rng(cfg.seed, iter, k);
            const std::size_t idx = std::size_t(mix.uniform_int(ds.train.size()));
            const TrainExample ex = make_example(ds.train[idx], cfg, mix.next_u64());
            std::copy(ex.input->data.begin(), ex.input->data.end(),
                      input->data.begin() + std::size_t(k) * slice);
            std::copy(ex.target->data.begin(), ex.target->data.end(),
                      target->data.begin() + std::size_t(k) * slice);
        }

        const TensorPtr pred = forward(g, cfg.model, weights, input);
        const TensorPtr loss = composed_loss(g, cfg.loss, teacher, pred, target, input);
        last_loss = loss->data[0];
        if (!std::isfinite(last_loss))
            abort_run(iter, "non-finite loss");

        for (const auto& t : weights.all())
            if (t->requires_grad) t->zero_grad();
        backward(g, loss);
        const double grad_norm = clip_global_norm(weights, cfg.clip_norm);
        const double lr = cosine_lr(iter, cfg.iterations, cfg.max_lr);
        adam_step(weights, opt, lr);
        if (!weights.all_finite())
            abort_run(iter, "non-finite parameter after update");

        log_line(log, {{"event", "step"}, {"iter", iter}, {"lr", lr}, {"loss", last_loss},
                       {"grad_norm", grad_norm}});

        const int done = iter + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.iterations)
            save_checkpoint((fs::path(cfg.out_dir) / ("ckpt_" + std::to_string(done))).string(),
                            cfg.model, weights);
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.iterations) {
            const HoldoutEval ev = eval_holdout(cfg, weights, ds);
            log_line(log, {{"event", "eval"}, {"iter", done}, {"count", ev.count},
                           {"holdout_psnr", ev.count ? json(ev.psnr_denoised) : json()},
                           {"holdout_noisy_psnr", ev.count ? json(ev.psnr_noisy) : json()}});
        }
    }

    TrainResult res;
    res.checkpoint_dir = (fs::path(cfg.out_dir) / "checkpoint").string();
    save_checkpoint(res.checkpoint_dir, cfg.model, weights);
    res.iterations_run = cfg.iterations;
    res.final_loss = last_loss;
    const HoldoutEval ev = eval_holdout(cfg, weights, ds);
    res.holdout_psnr = ev.psnr_denoised;
    res.holdout_noisy_psnr = ev.psnr_noisy;
    res.holdout_count = ev.count;
    log_line(log, {{"event", "final"}, {"iterations", cfg.iterations},
                   {"loss", std::isfinite(last_loss) ? json(last_loss) : json()},
                   {"checkpoint", res.checkpoint_dir}, {"count", ev.count},
                   {"holdout_psnr", ev.count ? json(ev.psnr_denoised) : json()},
                   {"holdout_noisy_psnr", ev.count ? json(ev.psnr_noisy) : json()}});
    return res;
}

ModelConfig teacher_config() {
    ModelConfig cfg;
    cfg.scales = 4;
    cfg.base_width = 64;
    cfg.groups = 1;
    cfg.feature_align = false;
    return cfg;
}

TrainResult train_teacher(const TrainConfig& cfg) {
    TrainConfig tc = cfg;
    tc.model = teacher_config();
    TrainResult res = train(tc);

    // Identity probe: clean frames through the trained denoiser at mid-range
    // noise; a usable teacher changes them very little.
    auto [mcfg, weights] = load_checkpoint(res.checkpoint_dir);
    const Dataset ds = load_dataset(tc);
    const auto& images = ds.holdout.empty() ? ds.train : ds.holdout;
    const double la = 0.5 * (tc.noise.log_a_min + tc.noise.log_a_max);
    NoiseParams p;
    p.a = std::pow(10.0, la);
    p.b = std::pow(10.0, tc.noise.logb_line.slope * la + tc.noise.logb_line.intercept);
    const int gran = 2 << mcfg.scales;
    double sum = 0.0;
    int used = 0;
    for (const auto& img : images) {
        BayerImage clean = unify_bayer(img);
        const int h = clean.h / gran * gran, w2 = clean.w / gran * gran;
        if (h < gran || w2 < gran) continue;
        clean = crop_bayer(clean, (clean.h - h) / 2 / 2 * 2, (clean.w - w2) / 2 / 2 * 2, h, w2);
        sum += psnr(denoise_image(mcfg, weights, clean, p), clean);
        ++used;
    }
    res.teacher_identity_psnr = used ? sum / used : std::numeric_limits<double>::quiet_NaN();
    std::ofstream log(fs::path(tc.out_dir) / "train_log.jsonl", std::ios::app);
    log_line(log, {{"event", "teacher_identity"}, {"count", used},
                   {"psnr", used ? json(res.teacher_identity_psnr) : json()}});
    return res;
}

SubrangePartition train_array(const TrainConfig& cfg, const SubrangePartition& p) {
    p.validate();
    if (cfg.out_dir.empty()) throw ConfigError("train_array: out_dir is required");
    SubrangePartition out = p;
    out.checkpoints.clear();
    for (int i = 0; i < p.n; ++i) {
        TrainConfig sub = cfg;
        sub.out_dir = (fs::path(cfg.out_dir) / ("sub" + std::to_string(i))).string();
        sub.noise.log_a_min = std::log10(p.bounds[std::size_t(i)]);
        sub.noise.log_a_max = std::log10(p.bounds[std::size_t(i) + 1]);
        train(sub);
        out.checkpoints.push_back("sub" + std::to_string(i) + "/checkpoint");
    }
    save_array_manifest((fs::path(cfg.out_dir) / "array.json").string(), out);
    return out;
}

}  // namespace faun
