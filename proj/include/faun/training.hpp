#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "faun/bayer.hpp"
#include "faun/common.hpp"
#include "faun/losses.hpp"
#include "faun/model.hpp"
#include "faun/noise.hpp"
#include "faun/nsma.hpp"
#include "faun/tensor.hpp"

namespace faun {

struct TrainConfig {
    std::string data_dir;  // directory of clean mosaic .pgm files
    std::string out_dir;   // checkpoints + train_log.jsonl land here
    ModelConfig model;
    LossConfig loss;
    SensorNoiseModel noise;
    int patch = 128;  // mosaic pixels per crop side; divisible by 2^(scales+1)
    int batch = 16;
    int iterations = 5000;
    double max_lr = 1e-4;
    double clip_norm = 1.0;  // global gradient-norm ceiling
    double holdout_fraction = 0.10;
    int checkpoint_every = 1000;  // <= 0: final checkpoint only
    int eval_every = 500;         // <= 0: held-out eval only at the end
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

/// Top-level keys are checked strictly (typos fail loud); nested model /
/// loss / noise objects fill unset fields from the defaults above.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);
void save_train_config(const std::string& path, const TrainConfig& cfg);

/// One synthetic pair, both sides k-sigma transformed and packed.
struct TrainExample {
    TensorPtr input;   // (1, 4, patch/2, patch/2), noisy
    TensorPtr target;  // same shape, clean
    NoiseParams params;
};

/// unify -> phase-preserving random crop -> flips/transpose -> draw (a, b)
/// -> shot/read noise on the input copy -> k-sigma both -> pack. Fixed draw
/// order off `seed`: crop y, crop x, flip_h, flip_v, transpose, (a, b),
/// noise seed. Throws ShapeError when the image is smaller than the patch.
TrainExample make_example(const BayerImage& clean, const TrainConfig& cfg, std::uint64_t seed);

/// Moment buffers keyed like the weights; created lazily at zero.
struct AdamState {
    struct Slot {
        std::vector<float> m, v;
    };
    std::map<std::string, Slot> slots;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over every parameter with requires_grad; a parameter
/// with no grad buffer counts as zero gradient. Throws ShapeError when a
/// stored slot no longer matches its tensor.
void adam_step(ModelWeights& w, AdamState& st, double lr);

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// pre-clip norm.
double clip_global_norm(ModelWeights& w, double max_norm);

/// max_lr * 0.5 * (1 + cos(pi * iter / total)); spans [0, max_lr] and is
/// nonincreasing in iter. total must be positive, iter within [0, total].
double cosine_lr(int iter, int total, double max_lr);

/// Deterministic, config-free split: bare-filename hash, lowest `fraction`
/// of the hash space held out.
bool is_holdout(const std::string& filename, double fraction);

struct TrainResult {
    std::string checkpoint_dir;
    int iterations_run = 0;
    double final_loss = 0.0;           // NaN when no step ran
    double holdout_psnr = 0.0;         // mean mosaic-domain PSNR, denoised
    double holdout_noisy_psnr = 0.0;   // same images, noisy baseline
    int holdout_count = 0;
    double teacher_identity_psnr = 0.0;  // set by train_teacher only
};

/// Runs the loop (example batches -> forward -> loss -> backward -> clip ->
/// Adam), logging line-delimited JSON to out_dir/train_log.jsonl and writing
/// ckpt_<iter>/ snapshots plus a final checkpoint/. A non-finite loss or
/// parameter aborts with TrainError after saving checkpoint_partial/.
/// Identical configs (seed included) reproduce checkpoints bit for bit.
TrainResult train(const TrainConfig& cfg);

/// Plain U-Net an order of magnitude above the default student's MACs.
ModelConfig teacher_config();

/// train() with the teacher architecture; afterwards feeds clean held-out
/// frames through the denoiser and logs their identity PSNR (a good teacher
/// leaves clean input nearly untouched).
TrainResult train_teacher(const TrainConfig& cfg);

/// One run per noise subrange: slot i samples log10(a) inside
/// [bounds[i], bounds[i+1]] and writes out_dir/sub<i>/. Returns the partition
/// with checkpoint paths filled in, saved to out_dir/array.json.
SubrangePartition train_array(const TrainConfig& cfg, const SubrangePartition& p);

}  // namespace faun
