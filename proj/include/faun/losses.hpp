#pragma once

#include <string>
#include <vector>

#include "faun/bayer.hpp"
#include "faun/model.hpp"
#include "faun/tensor.hpp"

namespace faun {

enum class LossMode { Charbonnier, RgbPerceptual, SimpleKd, FeatureMatching };

std::string loss_mode_name(LossMode m);
LossMode loss_mode_from_name(const std::string& s);

/// Published composition weights: 393.5 for charbonnier, 78.7 for feature
/// matching; the other modes default to 1.
double default_loss_weight(LossMode m);

struct LossConfig {
    LossMode mode = LossMode::Charbonnier;
    double charb_c = 1e-6;
    double weight = 393.5;
    std::string teacher_checkpoint;  // required for the teacher-based modes
    double content_weight = 1.0;
    double style_weight = 0.1;

    void validate() const;  // throws ConfigError
};

/// Frozen denoiser used as distillation target and feature extractor.
struct Teacher {
    ModelConfig cfg;
    ModelWeights weights;
};

/// Loads a checkpoint and clears requires_grad on every parameter.
Teacher load_teacher(const std::string& checkpoint_dir);

/// mean(sqrt((pred - gt)^2 + c^2)); smooth everywhere, floor c at pred == gt.
TensorPtr charbonnier(Graph& g, const TensorPtr& pred, const TensorPtr& gt, double c = 1e-6);

/// Mean absolute difference between the two predictions.
TensorPtr simple_kd(Graph& g, const TensorPtr& student_out, const TensorPtr& teacher_out);

/// Activation names tapped for the perceptual terms: one per encoder scale.
std::vector<std::string> default_layer_set(const ModelConfig& teacher_cfg);

/// Runs the frozen teacher on both images and sums, over the named taps,
/// content_weight * mean|A_s - A_g| + style_weight * mean|G(A_s) - G(A_g)|.
/// Gradients flow into student_out only.
TensorPtr feature_matching(Graph& g, const Teacher& teacher, const TensorPtr& student_out,
                           const TensorPtr& gt, const std::vector<std::string>& layer_set,
                           double content_weight = 1.0, double style_weight = 0.1);

/// feature_matching on ISP-processed images sampled back onto the mosaic so
/// they live in the teacher's packed input domain.
TensorPtr rgb_perceptual(Graph& g, const Teacher& teacher, const TensorPtr& pred_raw,
                         const TensorPtr& gt_raw, const IspParams& isp_params,
                         const std::vector<std::string>& layer_set, double content_weight = 1.0,
                         double style_weight = 0.1);

/// Mode dispatch used by the trainer: weight * loss(mode). `noisy` is the
/// network input (the distillation target runs the teacher on it); teacher
/// may be null for charbonnier.
TensorPtr composed_loss(Graph& g, const LossConfig& cfg, const Teacher* teacher,
                        const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& noisy,
                        const IspParams& isp_params = {});

}  // namespace faun
