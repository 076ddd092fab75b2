#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "faun/common.hpp"

namespace faun {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Rank-4 (batch, channels, height, width) dense float tensor.
/// Leaves are created with `Tensor::create`; everything else is produced by
/// the ops below, which record their backward closures on a Graph.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;
    std::vector<float> grad;      // allocated on demand, same length as data
    bool requires_grad = false;   // grad wanted here or upstream of here
    bool produced = false;        // true if some op record created this tensor

    Tensor() = default;
    Tensor(const Tensor&) = default;
    Tensor& operator=(const Tensor&) = default;
    ~Tensor();

    static TensorPtr create(int n, int c, int h, int w, bool requires_grad = false);
    static TensorPtr full(int n, int c, int h, int w, float value, bool requires_grad = false);
    static TensorPtr from(int n, int c, int h, int w, std::vector<float> values,
                          bool requires_grad = false);

    std::int64_t numel() const { return std::int64_t(n) * c * h * w; }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const;

    float& at(int in, int ic, int iy, int ix) {
        return data[((std::int64_t(in) * c + ic) * h + iy) * w + ix];
    }
    float at(int in, int ic, int iy, int ix) const {
        return data[((std::int64_t(in) * c + ic) * h + iy) * w + ix];
    }

    void ensure_grad();            // allocate zeros if missing
    void zero_grad();              // allocate + fill with zeros
    TensorPtr clone(bool keep_requires_grad = true) const;
    bool all_finite() const;
};

/// Tape of op records in execution (= topological) order. Holding the graph
/// keeps every tensor of the pass alive; drop it to free the activations.
class Graph {
public:
    struct Record {
        const char* op;
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> backward;
    };

    void record(const char* op, std::vector<TensorPtr> inputs, TensorPtr output,
                std::function<void()> backward);
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

private:
    std::vector<Record> records_;
};

/// Reverse-mode sweep. `loss` must be scalar (numel == 1). Grad buffers of
/// tensors produced inside `g` are reset first; leaf grads accumulate, so
/// calling twice without zeroing doubles them.
void backward(Graph& g, const TensorPtr& loss);

/// When true, reductions (conv inner products, pools, mean/sum, gram)
/// accumulate in double. Used by the finite-difference oracles; the normal
/// path accumulates in float.
void set_accumulate_f64(bool on);
bool accumulate_f64();

/// Optional MAC counter: when enabled, conv2d adds its multiply-accumulate
/// count here. Lets tests reconcile analytic MAC formulas with what the
/// forward pass actually executes.
void reset_mac_counter(bool enabled);
std::int64_t mac_counter();

// ---- ops ----------------------------------------------------------------

struct Conv2dOpts {
    int stride = 1;
    int pad = 0;
    int groups = 1;
};

TensorPtr conv2d(Graph& g, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 const Conv2dOpts& opts);
TensorPtr relu(Graph& g, const TensorPtr& x);
TensorPtr leaky_relu(Graph& g, const TensorPtr& x, float slope);
TensorPtr avg_pool2d(Graph& g, const TensorPtr& x, int k);
TensorPtr upsample_nearest(Graph& g, const TensorPtr& x, int factor);
TensorPtr concat_channels(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b);
/// y = scale * x + shift (scalars applied elementwise).
TensorPtr affine(Graph& g, const TensorPtr& x, float scale, float shift);
/// Per-sample scalars: y[n] = scale[n] * x[n] + shift[n].
TensorPtr affine_per_sample(Graph& g, const TensorPtr& x, const std::vector<float>& scale,
                            const std::vector<float>& shift);
TensorPtr abs(Graph& g, const TensorPtr& x);
TensorPtr sqrt(Graph& g, const TensorPtr& x);
TensorPtr clamp01(Graph& g, const TensorPtr& x);
/// sRGB transfer curve (linear -> display).
TensorPtr srgb_encode(Graph& g, const TensorPtr& x);
TensorPtr mean(Graph& g, const TensorPtr& x);
TensorPtr sum(Graph& g, const TensorPtr& x);
/// out[:, c] = x[:, c % x.c] for c in [0, target_c).
TensorPtr tile_channels(Graph& g, const TensorPtr& x, int target_c);
/// (N,1,H,W) Bayer plane -> (N,4,H/2,W/2) packed as (R, Gr, Gb, B) for RGGB.
TensorPtr bayer_pack(Graph& g, const TensorPtr& x);
TensorPtr bayer_unpack(Graph& g, const TensorPtr& x);
/// Per-sample Gram matrix of the channel unfolding: (N,C,H,W) -> (N,C,C,1),
/// G = A A^T / (C*H*W).
TensorPtr gram(Graph& g, const TensorPtr& x);

// ---- tensor file format -------------------------------------------------

/// "FDT1" | u32 rank | rank x u32 dims | little-endian f32 payload.
void save_tensor(std::ostream& os, const Tensor& t);
void save_tensor(const std::string& path, const Tensor& t);
TensorPtr load_tensor(std::istream& is);
TensorPtr load_tensor(const std::string& path);

}  // namespace faun
