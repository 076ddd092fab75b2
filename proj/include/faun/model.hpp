#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "faun/common.hpp"
#include "faun/tensor.hpp"

namespace faun {

/// U-Net shape knobs. Channel width doubles per scale starting at base_width;
/// one residual block per encoder/decoder stage plus a bottleneck block.
struct ModelConfig {
    int scales = 3;               // number of stride-2 descents
    int base_width = 16;          // channels at full (packed) resolution
    int expansion = 2;            // block-internal channel multiplier
    int groups = 4;               // group count of the spatial 3x3 convs
    int skip_shrink_channels = 4; // skip connections squeeze to this width
    int fa_hidden = 16;           // hidden width of the modulation heads
    bool feature_align = true;    // false = plain U-Net (teacher flavor)

    void validate() const;  // throws ConfigError
    int width(int scale) const { return base_width << scale; }
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Parameters keyed by layer path, e.g. "enc0.spatial.w", "fa.mid.gamma.b".
struct ModelWeights {
    std::map<std::string, TensorPtr> params;

    const TensorPtr& at(const std::string& name) const;
    std::vector<TensorPtr> all() const;
    bool all_finite() const;
};

/// Kaiming-normal conv kernels, zero biases; modulation heads start at zero
/// so every feature-align site is an exact identity at initialization.
ModelWeights init_weights(const ModelConfig& cfg, Rng& rng);

/// Clears requires_grad on every parameter (frozen feature extractor use).
void freeze_weights(ModelWeights& w);

/// Activations captured during forward, in order: enc0..enc{S-1}, mid,
/// dec{S-1}..dec0, out.
using ForwardTaps = std::vector<std::pair<std::string, TensorPtr>>;

/// expand (pw, relu) -> 3x3 group conv (stride, relu) -> project (pw, linear),
/// with a residual add when stride is 1 and widths match. Weights live under
/// `prefix` + {.expand,.spatial,.project}.
TensorPtr arnet_block(Graph& g, const ModelWeights& w, const std::string& prefix,
                      const TensorPtr& x, int groups, int stride);

/// G = (1 + gamma) * f + beta, both maps predicted per element from the
/// noise-bearing input at matching resolution.
TensorPtr feature_align(Graph& g, const ModelWeights& w, const std::string& prefix,
                        const TensorPtr& f, const TensorPtr& noisy_at_res);

TensorPtr shrink_skip(Graph& g, const ModelWeights& w, const std::string& prefix,
                      const TensorPtr& enc_feat);
/// Cyclic channel replication up to target_channels (fusion is the caller's add).
TensorPtr expand_skip(Graph& g, const TensorPtr& shrunk, int target_channels);

/// Residual denoiser on k-sigma packed input: output = input + delta.
/// Packed dims must be divisible by 2^scales.
TensorPtr forward(Graph& g, const ModelConfig& cfg, const ModelWeights& w, const TensorPtr& x,
                  ForwardTaps* taps = nullptr);

/// MACs of one conv layer: cin/groups * cout * k^2 * out_h * out_w.
std::int64_t mac_count_conv(int cin, int cout, int k, int groups, int out_h, int out_w);
/// Exact multiply-accumulate total of forward() on a packed h x w input.
std::int64_t count_macs_forward(const ModelConfig& cfg, int packed_h, int packed_w);
/// GMACs per megapixel of mosaic input (resolution-invariant for valid dims).
double count_macs(const ModelConfig& cfg, int bayer_h, int bayer_w);

/// Checkpoint directory: config.json + weights/<param>.fdt per parameter.
void save_checkpoint(const std::string& dir, const ModelConfig& cfg, const ModelWeights& w);
std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::string& dir);

}  // namespace faun
