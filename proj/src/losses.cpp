#include "faun/losses.hpp"

#include "faun/common.hpp"

namespace faun {

std::string loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::Charbonnier: return "charbonnier";
        case LossMode::RgbPerceptual: return "rgb_perceptual";
        case LossMode::SimpleKd: return "simple_kd";
        case LossMode::FeatureMatching: return "feature_matching";
    }
    throw ConfigError("unknown loss mode");
}

LossMode loss_mode_from_name(const std::string& s) {
    if (s == "charbonnier") return LossMode::Charbonnier;
    if (s == "rgb_perceptual") return LossMode::RgbPerceptual;
    if (s == "simple_kd") return LossMode::SimpleKd;
    if (s == "feature_matching") return LossMode::FeatureMatching;
    throw ConfigError("unknown loss mode '" + s + "'");
}

double default_loss_weight(LossMode m) {
    switch (m) {
        case LossMode::Charbonnier: return 393.5;
        case LossMode::FeatureMatching: return 78.7;
        default: return 1.0;
    }
}

void LossConfig::validate() const {
    if (!(charb_c > 0)) throw ConfigError("loss: charb_c must be positive");
    if (!(weight > 0)) throw ConfigError("loss: weight must be positive");
    if (!(content_weight >= 0) || !(style_weight >= 0))
        throw ConfigError("loss: content/style weights must be non-negative");
    if (mode != LossMode::Charbonnier && teacher_checkpoint.empty())
        throw ConfigError("loss mode '" + loss_mode_name(mode) + "' requires a teacher checkpoint");
}

Teacher load_teacher(const std::string& checkpoint_dir) {
    auto [cfg, w] = load_checkpoint(checkpoint_dir);
    freeze_weights(w);
    return {cfg, std::move(w)};
}

TensorPtr charbonnier(Graph& g, const TensorPtr& pred, const TensorPtr& gt, double c) {
    if (!(c > 0)) throw ConfigError("charbonnier: c must be positive");
    auto d = sub(g, pred, gt);
    return mean(g, sqrt(g, affine(g, mul(g, d, d), 1.0f, float(c * c))));
}

TensorPtr simple_kd(Graph& g, const TensorPtr& student_out, const TensorPtr& teacher_out) {
    return mean(g, abs(g, sub(g, student_out, teacher_out)));
}

std::vector<std::string> default_layer_set(const ModelConfig& teacher_cfg) {
    std::vector<std::string> names;
    for (int s = 0; s < teacher_cfg.scales; ++s) names.push_back("enc" + std::to_string(s));
    return names;
}

namespace {

void require_frozen(const Teacher& t) {
    for (const auto& [name, p] : t.weights.params)
        if (p->requires_grad)
            throw UsageError("teacher must be frozen (parameter '" + name +
                             "' still requires gradients)");
}

TensorPtr tap_named(const ForwardTaps& taps, const std::string& name) {
    for (const auto& [n, t] : taps)
        if (n == name) return t;
    throw ConfigError("unknown teacher activation '" + name + "'");
}

}  // namespace

TensorPtr feature_matching(Graph& g, const Teacher& teacher, const TensorPtr& student_out,
                           const TensorPtr& gt, const std::vector<std::string>& layer_set,
                           double content_weight, double style_weight) {
    require_frozen(teacher);
    if (layer_set.empty()) throw ConfigError("feature_matching: layer set is empty");

    ForwardTaps taps_s, taps_g;
    forward(g, teacher.cfg, teacher.weights, student_out, &taps_s);
    forward(g, teacher.cfg, teacher.weights, gt, &taps_g);

    TensorPtr total;
    auto accumulate = [&](const TensorPtr& term, double w) {
        if (w == 0.0) return;
        auto scaled = affine(g, term, float(w), 0.0f);
        total = total ? add(g, total, scaled) : scaled;
    };
    for (const auto& name : layer_set) {
        auto as = tap_named(taps_s, name);
        auto ag = tap_named(taps_g, name);
        accumulate(mean(g, abs(g, sub(g, as, ag))), content_weight);
        accumulate(mean(g, abs(g, sub(g, gram(g, as), gram(g, ag)))), style_weight);
    }
    if (!total) throw ConfigError("feature_matching: both term weights are zero");
    return total;
}

TensorPtr rgb_perceptual(Graph& g, const Teacher& teacher, const TensorPtr& pred_raw,
                         const TensorPtr& gt_raw, const IspParams& isp_params,
                         const std::vector<std::string>& layer_set, double content_weight,
                         double style_weight) {
    auto pred_in = mosaic_tensor(g, isp_tensor(g, pred_raw, isp_params));
    auto gt_in = mosaic_tensor(g, isp_tensor(g, gt_raw, isp_params));
    return feature_matching(g, teacher, pred_in, gt_in, layer_set, content_weight, style_weight);
}

TensorPtr composed_loss(Graph& g, const LossConfig& cfg, const Teacher* teacher,
                        const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& noisy,
                        const IspParams& isp_params) {
    cfg.validate();
    if (cfg.mode != LossMode::Charbonnier && !teacher)
        throw UsageError("loss mode '" + loss_mode_name(cfg.mode) + "' needs a loaded teacher");
    TensorPtr raw;
    switch (cfg.mode) {
        case LossMode::Charbonnier: raw = charbonnier(g, pred, gt, cfg.charb_c); break;
        case LossMode::SimpleKd: {
            auto teacher_out = forward(g, teacher->cfg, teacher->weights, noisy);
            raw = simple_kd(g, pred, teacher_out);
            break;
        }
        case LossMode::FeatureMatching:
            raw = feature_matching(g, *teacher, pred, gt, default_layer_set(teacher->cfg),
                                   cfg.content_weight, cfg.style_weight);
            break;
        case LossMode::RgbPerceptual:
            raw = rgb_perceptual(g, *teacher, pred, gt, isp_params,
                                 default_layer_set(teacher->cfg), cfg.content_weight,
                                 cfg.style_weight);
            break;
    }
    return affine(g, raw, float(cfg.weight), 0.0f);
}

}  // namespace faun
