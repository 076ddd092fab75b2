#include "faun/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#if defined(__AVX512F__)
#include <immintrin.h>
#define FAUN_AVX512 1
#endif

namespace faun {

namespace {

bool g_accum_f64 = false;
bool g_count_macs = false;
std::int64_t g_macs = 0;

// Recycles data buffers between graph iterations; the training loop allocates
// the same shapes every step and fresh pages (fault + kernel zeroing) would
// otherwise dominate the small-conv layers. Buffers come back with stale
// contents; callers that need zeros fill explicitly.
class BufferPool {
  public:
    std::vector<float> acquire(std::size_t n) {
        auto it = free_.find(n);
        if (it != free_.end() && !it->second.empty()) {
            std::vector<float> v = std::move(it->second.back());
            it->second.pop_back();
            held_ -= n;
            return v;
        }
        return std::vector<float>(n);
    }
    void release(std::vector<float>&& v) {
        const std::size_t n = v.size();
        if (n == 0 || held_ + n > kMaxHeld) return;
        held_ += n;
        free_[n].push_back(std::move(v));
    }

  private:
    static constexpr std::size_t kMaxHeld = std::size_t(128) << 20;  // floats
    std::unordered_map<std::size_t, std::vector<std::vector<float>>> free_;
    std::size_t held_ = 0;
};

BufferPool& pool() {
    static thread_local BufferPool p;
    return p;
}

#if FAUN_AVX512

// Register-tiled microkernel: C[r][jt..jt+64) += A_r . B for MR rows.
// Beta0 treats C as write-only (starts from zero), skipping the initial load.
template <int MR, bool Beta0>
void gemm_tile_full(const float* A, const float* B, float* C, int K, int N, int jt) {
    __m512 acc[MR][4];
    for (int r = 0; r < MR; ++r)
        for (int v = 0; v < 4; ++v)
            acc[r][v] = Beta0 ? _mm512_setzero_ps()
                              : _mm512_loadu_ps(C + std::size_t(r) * N + jt + 16 * v);
    for (int k = 0; k < K; ++k) {
        const float* b = B + std::size_t(k) * N + jt;
        const __m512 b0 = _mm512_loadu_ps(b);
        const __m512 b1 = _mm512_loadu_ps(b + 16);
        const __m512 b2 = _mm512_loadu_ps(b + 32);
        const __m512 b3 = _mm512_loadu_ps(b + 48);
        for (int r = 0; r < MR; ++r) {
            const __m512 a = _mm512_set1_ps(A[std::size_t(r) * K + k]);
            acc[r][0] = _mm512_fmadd_ps(a, b0, acc[r][0]);
            acc[r][1] = _mm512_fmadd_ps(a, b1, acc[r][1]);
            acc[r][2] = _mm512_fmadd_ps(a, b2, acc[r][2]);
            acc[r][3] = _mm512_fmadd_ps(a, b3, acc[r][3]);
        }
    }
    for (int r = 0; r < MR; ++r)
        for (int v = 0; v < 4; ++v) _mm512_storeu_ps(C + std::size_t(r) * N + jt + 16 * v, acc[r][v]);
}

// Trailing columns (nt < 64), masked.
template <int MR, bool Beta0>
void gemm_tile_edge(const float* A, const float* B, float* C, int K, int N, int jt, int nt) {
    const int nv = nt / 16;
    const int rem = nt % 16;
    const __mmask16 tm = rem ? __mmask16((1u << rem) - 1) : __mmask16(0);
    __m512 acc[MR][5];
    for (int r = 0; r < MR; ++r) {
        for (int v = 0; v < nv; ++v)
            acc[r][v] = Beta0 ? _mm512_setzero_ps()
                              : _mm512_loadu_ps(C + std::size_t(r) * N + jt + 16 * v);
        if (rem)
            acc[r][nv] = Beta0 ? _mm512_setzero_ps()
                               : _mm512_maskz_loadu_ps(tm, C + std::size_t(r) * N + jt + 16 * nv);
    }
    for (int k = 0; k < K; ++k) {
        const float* b = B + std::size_t(k) * N + jt;
        for (int r = 0; r < MR; ++r) {
            const __m512 a = _mm512_set1_ps(A[std::size_t(r) * K + k]);
            for (int v = 0; v < nv; ++v)
                acc[r][v] = _mm512_fmadd_ps(a, _mm512_loadu_ps(b + 16 * v), acc[r][v]);
            if (rem)
                acc[r][nv] = _mm512_fmadd_ps(a, _mm512_maskz_loadu_ps(tm, b + 16 * nv), acc[r][nv]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        for (int v = 0; v < nv; ++v) _mm512_storeu_ps(C + std::size_t(r) * N + jt + 16 * v, acc[r][v]);
        if (rem) _mm512_mask_storeu_ps(C + std::size_t(r) * N + jt + 16 * nv, tm, acc[r][nv]);
    }
}

#endif  // FAUN_AVX512

// C(MxN) += A(MxK) * B(KxN). Fixed accumulation order per output element, so
// results are bitwise reproducible run to run. beta0 marks C as known-zero.
void gemm_f32(const float* A, const float* B, float* C, int M, int K, int N, bool beta0 = false) {
#if FAUN_AVX512
    auto run = [&](auto beta_tag) {
        constexpr bool B0 = decltype(beta_tag)::value;
        int jt = 0;
        for (; jt + 64 <= N; jt += 64) {
            int i = 0;
            for (; i + 4 <= M; i += 4)
                gemm_tile_full<4, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt);
            switch (M - i) {
                case 3: gemm_tile_full<3, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt); break;
                case 2: gemm_tile_full<2, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt); break;
                case 1: gemm_tile_full<1, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt); break;
                default: break;
            }
        }
        if (jt < N) {
            const int nt = N - jt;
            int i = 0;
            for (; i + 4 <= M; i += 4)
                gemm_tile_edge<4, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt, nt);
            switch (M - i) {
                case 3: gemm_tile_edge<3, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt, nt); break;
                case 2: gemm_tile_edge<2, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt, nt); break;
                case 1: gemm_tile_edge<1, B0>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N, jt, nt); break;
                default: break;
            }
        }
    };
    if (beta0)
        run(std::true_type{});
    else
        run(std::false_type{});
#else
    (void)beta0;
    int i = 0;
    for (; i + 4 <= M; i += 4) {
        const float* a0 = A + std::size_t(i) * K;
        const float* a1 = a0 + K;
        const float* a2 = a1 + K;
        const float* a3 = a2 + K;
        float* c0 = C + std::size_t(i) * N;
        float* c1 = c0 + N;
        float* c2 = c1 + N;
        float* c3 = c2 + N;
        for (int k = 0; k < K; ++k) {
            const float* b = B + std::size_t(k) * N;
            const float v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            for (int j = 0; j < N; ++j) {
                c0[j] += v0 * b[j];
                c1[j] += v1 * b[j];
                c2[j] += v2 * b[j];
                c3[j] += v3 * b[j];
            }
        }
    }
    for (; i < M; ++i) {
        float* c = C + std::size_t(i) * N;
        const float* a = A + std::size_t(i) * K;
        for (int k = 0; k < K; ++k) {
            const float v = a[k];
            const float* b = B + std::size_t(k) * N;
            for (int j = 0; j < N; ++j) c[j] += v * b[j];
        }
    }
#endif
}

// Same contract with double accumulators; the finite-difference oracles run
// the forward pass through this.
void gemm_f64(const float* A, const float* B, float* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const float* a = A + std::size_t(i) * K;
        for (int j = 0; j < N; ++j) {
            double acc = C[std::size_t(i) * N + j];
            for (int k = 0; k < K; ++k) acc += double(a[k]) * B[std::size_t(k) * N + j];
            C[std::size_t(i) * N + j] = float(acc);
        }
    }
}

void gemm(const float* A, const float* B, float* C, int M, int K, int N, bool beta0 = false) {
    if (g_accum_f64) {
        if (beta0) std::fill(C, C + std::size_t(M) * N, 0.0f);
        gemm_f64(A, B, C, M, K, N);
    } else {
        gemm_f32(A, B, C, M, K, N, beta0);
    }
}

#if FAUN_AVX512

// MR x NR block of dot products over the long K axis, vector accumulators.
template <int MR, int NR>
void dot_block(const float* A, const float* B, float* C, int K, int N) {
    __m512 acc[MR][NR];
    for (int r = 0; r < MR; ++r)
        for (int c = 0; c < NR; ++c) acc[r][c] = _mm512_setzero_ps();
    int k = 0;
    for (; k + 16 <= K; k += 16) {
        __m512 av[MR];
        for (int r = 0; r < MR; ++r) av[r] = _mm512_loadu_ps(A + std::size_t(r) * K + k);
        for (int c = 0; c < NR; ++c) {
            const __m512 bv = _mm512_loadu_ps(B + std::size_t(c) * K + k);
            for (int r = 0; r < MR; ++r) acc[r][c] = _mm512_fmadd_ps(av[r], bv, acc[r][c]);
        }
    }
    if (k < K) {
        const __mmask16 tm = __mmask16((1u << (K - k)) - 1);
        __m512 av[MR];
        for (int r = 0; r < MR; ++r) av[r] = _mm512_maskz_loadu_ps(tm, A + std::size_t(r) * K + k);
        for (int c = 0; c < NR; ++c) {
            const __m512 bv = _mm512_maskz_loadu_ps(tm, B + std::size_t(c) * K + k);
            for (int r = 0; r < MR; ++r) acc[r][c] = _mm512_fmadd_ps(av[r], bv, acc[r][c]);
        }
    }
    for (int r = 0; r < MR; ++r)
        for (int c = 0; c < NR; ++c)
            C[std::size_t(r) * N + c] += _mm512_reduce_add_ps(acc[r][c]);
}

template <int MR>
void dot_rows(const float* A, const float* B, float* C, int K, int N) {
    int j = 0;
    for (; j + 4 <= N; j += 4) dot_block<MR, 4>(A, B + std::size_t(j) * K, C + j, K, N);
    for (; j < N; ++j) dot_block<MR, 1>(A, B + std::size_t(j) * K, C + j, K, N);
}

#endif  // FAUN_AVX512

// C(MxN) += A(MxK) * B(NxK)^T, i.e. C[i][j] += dot(A_i, B_j).
void gemm_abT(const float* A, const float* B, float* C, int M, int K, int N) {
#if FAUN_AVX512
    int i = 0;
    for (; i + 4 <= M; i += 4) dot_rows<4>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N);
    switch (M - i) {
        case 3: dot_rows<3>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N); break;
        case 2: dot_rows<2>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N); break;
        case 1: dot_rows<1>(A + std::size_t(i) * K, B, C + std::size_t(i) * N, K, N); break;
        default: break;
    }
#else
    for (int i = 0; i < M; ++i) {
        const float* a = A + std::size_t(i) * K;
        for (int j = 0; j < N; ++j) {
            const float* b = B + std::size_t(j) * K;
            float s = 0;
            for (int k = 0; k < K; ++k) s += a[k] * b[k];
            C[std::size_t(i) * N + j] += s;
        }
    }
#endif
}

// C(KxN) += A(MxK)^T * B(MxN): transpose A (small) and reuse the tiled kernel.
void gemm_aTb(const float* A, const float* B, float* C, int M, int K, int N, bool beta0 = false) {
    static thread_local std::vector<float> at;
    at.resize(std::size_t(K) * M);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) at[std::size_t(k) * M + i] = A[std::size_t(i) * K + k];
    gemm_f32(at.data(), B, C, K, M, N, beta0);
}

struct ConvDims {
    int cin_g, cout_g, k, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Conv2dOpts& o) {
    if (w.h != w.w) throw ShapeError("conv2d: kernel must be square, got " + w.shape_str());
    const int k = w.h;
    if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
    if (o.stride != 1 && o.stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
    if (o.groups < 1) throw ConfigError("conv2d: groups must be >= 1");
    if (x.c % o.groups != 0 || w.n % o.groups != 0)
        throw ConfigError("conv2d: channels not divisible by groups");
    if (w.c != x.c / o.groups)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.c * o.groups) +
                         " input channels, got " + std::to_string(x.c));
    const int ho = (x.h + 2 * o.pad - k) / o.stride + 1;
    const int wo = (x.w + 2 * o.pad - k) / o.stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty for input " + x.shape_str());
    return {x.c / o.groups, w.n / o.groups, k, ho, wo};
}

// Unfold one group of one sample into (cin_g*k*k) x (ho*wo).
void im2col(const float* x, int h, int w, int cin_g, int k, int stride, int pad, int ho, int wo,
            float* col) {
    for (int c = 0; c < cin_g; ++c) {
        const float* xc = x + std::size_t(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + (std::size_t(c) * k * k + std::size_t(ky) * k + kx) *
                                       (std::size_t(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* dst = row + std::size_t(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst, 0, sizeof(float) * wo);
                        continue;
                    }
                    const float* src = xc + std::size_t(iy) * w;
                    if (stride == 1) {
                        // valid ox range where ix = ox - pad + kx is in [0, w)
                        const int lo = std::max(0, pad - kx);
                        const int hi = std::min(wo, w + pad - kx);
                        if (lo > 0) std::memset(dst, 0, sizeof(float) * lo);
                        if (hi > lo) std::memcpy(dst + lo, src + lo - pad + kx, sizeof(float) * (hi - lo));
                        if (hi < wo) std::memset(dst + hi, 0, sizeof(float) * (wo - hi));
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of the unfolded gradient back onto the input gradient.
void col2im_add(const float* col, int h, int w, int cin_g, int k, int stride, int pad, int ho,
                int wo, float* gx) {
    for (int c = 0; c < cin_g; ++c) {
        float* gc = gx + std::size_t(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + (std::size_t(c) * k * k + std::size_t(ky) * k + kx) *
                                             (std::size_t(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const float* src = row + std::size_t(oy) * wo;
                    float* dst = gc + std::size_t(iy) * w;
                    if (stride == 1) {
                        const int lo = std::max(0, pad - kx);
                        const int hi = std::min(wo, w + pad - kx);
                        float* d = dst - pad + kx;
                        for (int ox = lo; ox < hi; ++ox) d[ox] += src[ox];
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < w) dst[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

// Op outputs are fully overwritten by every op, so they skip the zero fill.
TensorPtr make_output(int n, int c, int h, int w, std::initializer_list<TensorPtr> ins) {
    auto out = std::make_shared<Tensor>();
    out->n = n;
    out->c = c;
    out->h = h;
    out->w = w;
    out->data = pool().acquire(std::size_t(out->numel()));
    out->produced = true;
    for (const auto& t : ins)
        if (t && t->requires_grad) out->requires_grad = true;
    return out;
}

// Elementwise unary op scaffold: fwd(x) -> y, dfdx(x, y) -> local derivative.
template <typename Fwd, typename Dfdx>
TensorPtr unary_op(Graph& g, const char* name, const TensorPtr& x, Fwd fwd, Dfdx dfdx) {
    auto out = make_output(x->n, x->c, x->h, x->w, {x});
    const std::int64_t n = x->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(x->data[i]);
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record(name, {x}, out, [xi, o, dfdx, n]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                xi->grad[i] += o->grad[i] * dfdx(xi->data[i], o->data[i]);
        });
    }
    return out;
}

}  // namespace

// ---- Tensor / Graph -------------------------------------------------------

Tensor::~Tensor() {
    pool().release(std::move(data));
    pool().release(std::move(grad));
}

TensorPtr Tensor::create(int n, int c, int h, int w, bool requires_grad) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
        throw ShapeError("tensor dims must be positive, got (" + std::to_string(n) + "," +
                         std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")");
    auto t = std::make_shared<Tensor>();
    t->n = n;
    t->c = c;
    t->h = h;
    t->w = w;
    t->data = pool().acquire(std::size_t(t->numel()));
    std::fill(t->data.begin(), t->data.end(), 0.0f);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::full(int n, int c, int h, int w, float value, bool requires_grad) {
    auto t = create(n, c, h, w, requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::from(int n, int c, int h, int w, std::vector<float> values, bool requires_grad) {
    auto t = create(n, c, h, w, requires_grad);
    if (std::int64_t(values.size()) != t->numel())
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match dims " + t->shape_str());
    t->data = std::move(values);
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) {
        grad = pool().acquire(data.size());
        std::fill(grad.begin(), grad.end(), 0.0f);
    }
}

void Tensor::zero_grad() {
    ensure_grad();
    std::fill(grad.begin(), grad.end(), 0.0f);
}

TensorPtr Tensor::clone(bool keep_requires_grad) const {
    auto t = std::make_shared<Tensor>();
    t->n = n;
    t->c = c;
    t->h = h;
    t->w = w;
    t->data = data;
    t->requires_grad = keep_requires_grad && requires_grad;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Graph::record(const char* op, std::vector<TensorPtr> inputs, TensorPtr output,
                   std::function<void()> backward) {
    records_.push_back({op, std::move(inputs), std::move(output), std::move(backward)});
}

void backward(Graph& g, const TensorPtr& loss) {
    if (loss->numel() != 1) throw UsageError("backward: loss must be a scalar tensor");
    for (const auto& r : g.records()) {
        r.output->ensure_grad();
        std::fill(r.output->grad.begin(), r.output->grad.end(), 0.0f);
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0f;
    const auto& recs = g.records();
    for (auto it = recs.rbegin(); it != recs.rend(); ++it) it->backward();
}

void set_accumulate_f64(bool on) { g_accum_f64 = on; }
bool accumulate_f64() { return g_accum_f64; }

void reset_mac_counter(bool enabled) {
    g_count_macs = enabled;
    g_macs = 0;
}
std::int64_t mac_counter() { return g_macs; }

// ---- conv2d ---------------------------------------------------------------

TensorPtr conv2d(Graph& g, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 const Conv2dOpts& o) {
    const ConvDims d = conv_dims(*x, *w, o);
    if (b && (b->n != 1 || b->c != w->n || b->h != 1 || b->w != 1))
        throw ShapeError("conv2d: bias must be (1," + std::to_string(w->n) + ",1,1), got " +
                         b->shape_str());
    auto out = make_output(x->n, w->n, d.ho, d.wo, {x, w, b});

    const int ck = d.cin_g * d.k * d.k;
    const std::int64_t hw_out = std::int64_t(d.ho) * d.wo;
    const bool pointwise = (d.k == 1 && o.stride == 1 && o.pad == 0);
    const std::size_t col_elems = std::size_t(ck) * hw_out;
    static thread_local std::vector<float> scratch;
    if (!pointwise && scratch.size() < col_elems) scratch.resize(col_elems);

    for (int n = 0; n < x->n; ++n) {
        for (int grp = 0; grp < o.groups; ++grp) {
            const float* xs = x->data.data() + (std::size_t(n) * x->c + std::size_t(grp) * d.cin_g) *
                                                   x->h * x->w;
            const float* B;
            if (pointwise) {
                B = xs;
            } else {
                im2col(xs, x->h, x->w, d.cin_g, d.k, o.stride, o.pad, d.ho, d.wo, scratch.data());
                B = scratch.data();
            }
            const float* A = w->data.data() + std::size_t(grp) * d.cout_g * ck;
            float* C = out->data.data() +
                       (std::size_t(n) * out->c + std::size_t(grp) * d.cout_g) * hw_out;
            gemm(A, B, C, d.cout_g, ck, int(hw_out), true);
        }
    }
    if (b) {
        for (int n = 0; n < out->n; ++n)
            for (int c = 0; c < out->c; ++c) {
                const float bv = b->data[c];
                float* p = out->data.data() + (std::size_t(n) * out->c + c) * hw_out;
                for (std::int64_t i = 0; i < hw_out; ++i) p[i] += bv;
            }
    }
    if (g_count_macs) g_macs += std::int64_t(x->n) * o.groups * d.cout_g * ck * hw_out;

    if (out->requires_grad) {
        TensorPtr xi = x, wi = w, bi = b, oi = out;
        Conv2dOpts opts = o;
        g.record("conv2d", {x, w, b}, out, [xi, wi, bi, oi, opts, d, col_elems]() {
            const int ck = d.cin_g * d.k * d.k;
            const std::int64_t hw_out = std::int64_t(d.ho) * d.wo;
            const std::int64_t hw_in = std::int64_t(xi->h) * xi->w;
            const bool pointwise = (d.k == 1 && opts.stride == 1 && opts.pad == 0);
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (int n = 0; n < oi->n; ++n)
                    for (int c = 0; c < oi->c; ++c) {
                        const float* p = oi->grad.data() + (std::size_t(n) * oi->c + c) * hw_out;
                        float s = 0;
                        for (std::int64_t i = 0; i < hw_out; ++i) s += p[i];
                        bi->grad[c] += s;
                    }
            }
            const bool need_x = xi->requires_grad;
            const bool need_w = wi->requires_grad;
            if (!need_x && !need_w) return;
            if (need_x) xi->ensure_grad();
            if (need_w) wi->ensure_grad();
            static thread_local std::vector<float> col, gcol;
            if (!pointwise) {
                if (col.size() < col_elems) col.resize(col_elems);
                if (need_x && gcol.size() < col_elems) gcol.resize(col_elems);
            }
            for (int n = 0; n < xi->n; ++n) {
                for (int grp = 0; grp < opts.groups; ++grp) {
                    const float* xs = xi->data.data() +
                                      (std::size_t(n) * xi->c + std::size_t(grp) * d.cin_g) * hw_in;
                    const float* go = oi->grad.data() +
                                      (std::size_t(n) * oi->c + std::size_t(grp) * d.cout_g) * hw_out;
                    const float* B;
                    if (pointwise) {
                        B = xs;
                    } else {
                        im2col(xs, xi->h, xi->w, d.cin_g, d.k, opts.stride, opts.pad, d.ho, d.wo,
                               col.data());
                        B = col.data();
                    }
                    if (need_w) {
                        float* gw = wi->grad.data() + std::size_t(grp) * d.cout_g * ck;
                        gemm_abT(go, B, gw, d.cout_g, int(hw_out), ck);
                    }
                    if (need_x) {
                        const float* A = wi->data.data() + std::size_t(grp) * d.cout_g * ck;
                        float* gx = xi->grad.data() +
                                    (std::size_t(n) * xi->c + std::size_t(grp) * d.cin_g) * hw_in;
                        if (pointwise) {
                            gemm_aTb(A, go, gx, d.cout_g, ck, int(hw_out));
                        } else {
                            gemm_aTb(A, go, gcol.data(), d.cout_g, ck, int(hw_out), true);
                            col2im_add(gcol.data(), xi->h, xi->w, d.cin_g, d.k, opts.stride,
                                       opts.pad, d.ho, d.wo, gx);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- elementwise and structural ops ----------------------------------------

TensorPtr relu(Graph& g, const TensorPtr& x) {
    return unary_op(
        g, "relu", x, [](float v) { return v > 0 ? v : 0.0f; },
        [](float v, float) { return v > 0 ? 1.0f : 0.0f; });
}

TensorPtr leaky_relu(Graph& g, const TensorPtr& x, float slope) {
    return unary_op(
        g, "leaky_relu", x, [slope](float v) { return v > 0 ? v : slope * v; },
        [slope](float v, float) { return v > 0 ? 1.0f : slope; });
}

TensorPtr abs(Graph& g, const TensorPtr& x) {
    return unary_op(
        g, "abs", x, [](float v) { return std::fabs(v); },
        [](float v, float) { return v > 0 ? 1.0f : (v < 0 ? -1.0f : 0.0f); });
}

TensorPtr sqrt(Graph& g, const TensorPtr& x) {
    return unary_op(
        g, "sqrt", x, [](float v) { return std::sqrt(v); },
        [](float, float y) { return 0.5f / std::max(y, 1e-20f); });
}

TensorPtr clamp01(Graph& g, const TensorPtr& x) {
    return unary_op(
        g, "clamp01", x, [](float v) { return std::min(std::max(v, 0.0f), 1.0f); },
        [](float v, float) { return (v > 0.0f && v < 1.0f) ? 1.0f : 0.0f; });
}

TensorPtr srgb_encode(Graph& g, const TensorPtr& x) {
    constexpr float kKnee = 0.0031308f;
    return unary_op(
        g, "srgb_encode", x,
        [](float v) {
            return v <= kKnee ? 12.92f * v : 1.055f * std::pow(v, 1.0f / 2.4f) - 0.055f;
        },
        [](float v, float) {
            return v <= kKnee ? 12.92f : (1.055f / 2.4f) * std::pow(v, 1.0f / 2.4f - 1.0f);
        });
}

TensorPtr affine(Graph& g, const TensorPtr& x, float scale, float shift) {
    auto out = make_output(x->n, x->c, x->h, x->w, {x});
    const std::int64_t n = x->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = scale * x->data[i] + shift;
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("affine", {x}, out, [xi, o, scale, n]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) xi->grad[i] += scale * o->grad[i];
        });
    }
    return out;
}

TensorPtr affine_per_sample(Graph& g, const TensorPtr& x, const std::vector<float>& scale,
                            const std::vector<float>& shift) {
    if (int(scale.size()) != x->n || int(shift.size()) != x->n)
        throw ShapeError("affine_per_sample: need one scale/shift per sample");
    auto out = make_output(x->n, x->c, x->h, x->w, {x});
    const std::int64_t per = x->numel() / x->n;
    for (int n = 0; n < x->n; ++n) {
        const float s = scale[n], t = shift[n];
        const float* src = x->data.data() + n * per;
        float* dst = out->data.data() + n * per;
        for (std::int64_t i = 0; i < per; ++i) dst[i] = s * src[i] + t;
    }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        std::vector<float> sc = scale;
        g.record("affine_per_sample", {x}, out, [xi, o, sc, per]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < xi->n; ++n) {
                const float s = sc[n];
                const float* go = o->grad.data() + n * per;
                float* gx = xi->grad.data() + n * per;
                for (std::int64_t i = 0; i < per; ++i) gx[i] += s * go[i];
            }
        });
    }
    return out;
}

namespace {

template <int Sign>
TensorPtr add_like(Graph& g, const char* name, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(name, *a, *b);
    auto out = make_output(a->n, a->c, a->h, a->w, {a, b});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + Sign * b->data[i];
    if (out->requires_grad) {
        TensorPtr ai = a, bi = b, o = out;
        g.record(name, {a, b}, out, [ai, bi, o, n]() {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) ai->grad[i] += o->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bi->grad[i] += Sign * o->grad[i];
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) { return add_like<1>(g, "add", a, b); }
TensorPtr sub(Graph& g, const TensorPtr& a, const TensorPtr& b) { return add_like<-1>(g, "sub", a, b); }

TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("mul", *a, *b);
    auto out = make_output(a->n, a->c, a->h, a->w, {a, b});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad) {
        TensorPtr ai = a, bi = b, o = out;
        g.record("mul", {a, b}, out, [ai, bi, o, n]() {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) ai->grad[i] += o->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bi->grad[i] += o->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

TensorPtr avg_pool2d(Graph& g, const TensorPtr& x, int k) {
    if (k < 1) throw ConfigError("avg_pool2d: k must be >= 1");
    if (x->h % k != 0 || x->w % k != 0)
        throw ShapeError("avg_pool2d: dims " + x->shape_str() + " not divisible by " +
                         std::to_string(k));
    const int ho = x->h / k, wo = x->w / k;
    auto out = make_output(x->n, x->c, ho, wo, {x});
    const float inv = 1.0f / float(k * k);
    for (int n = 0; n < x->n; ++n)
        for (int c = 0; c < x->c; ++c)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    if (g_accum_f64) {
                        double s = 0;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                s += x->at(n, c, oy * k + dy, ox * k + dx);
                        out->at(n, c, oy, ox) = float(s * inv);
                    } else {
                        float s = 0;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                s += x->at(n, c, oy * k + dy, ox * k + dx);
                        out->at(n, c, oy, ox) = s * inv;
                    }
                }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("avg_pool2d", {x}, out, [xi, o, k, inv]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < o->n; ++n)
                for (int c = 0; c < o->c; ++c)
                    for (int oy = 0; oy < o->h; ++oy)
                        for (int ox = 0; ox < o->w; ++ox) {
                            const float gv = o->grad[((std::int64_t(n) * o->c + c) * o->h + oy) * o->w + ox] * inv;
                            for (int dy = 0; dy < k; ++dy)
                                for (int dx = 0; dx < k; ++dx)
                                    xi->grad[((std::int64_t(n) * xi->c + c) * xi->h + oy * k + dy) * xi->w +
                                             ox * k + dx] += gv;
                        }
        });
    }
    return out;
}

TensorPtr upsample_nearest(Graph& g, const TensorPtr& x, int factor) {
    if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
    const int ho = x->h * factor, wo = x->w * factor;
    auto out = make_output(x->n, x->c, ho, wo, {x});
    for (int n = 0; n < x->n; ++n)
        for (int c = 0; c < x->c; ++c)
            for (int oy = 0; oy < ho; ++oy) {
                const float* src = &x->at(n, c, oy / factor, 0);
                float* dst = &out->at(n, c, oy, 0);
                for (int ox = 0; ox < wo; ++ox) dst[ox] = src[ox / factor];
            }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("upsample_nearest", {x}, out, [xi, o, factor]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < o->n; ++n)
                for (int c = 0; c < o->c; ++c)
                    for (int oy = 0; oy < o->h; ++oy)
                        for (int ox = 0; ox < o->w; ++ox)
                            xi->grad[((std::int64_t(n) * xi->c + c) * xi->h + oy / factor) * xi->w +
                                     ox / factor] +=
                                o->grad[((std::int64_t(n) * o->c + c) * o->h + oy) * o->w + ox];
        });
    }
    return out;
}

TensorPtr concat_channels(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    if (a->n != b->n || a->h != b->h || a->w != b->w)
        throw ShapeError("concat_channels: spatial/batch mismatch " + a->shape_str() + " vs " +
                         b->shape_str());
    auto out = make_output(a->n, a->c + b->c, a->h, a->w, {a, b});
    const std::int64_t hw = std::int64_t(a->h) * a->w;
    for (int n = 0; n < a->n; ++n) {
        std::memcpy(out->data.data() + std::size_t(n) * out->c * hw, a->data.data() + std::size_t(n) * a->c * hw,
                    sizeof(float) * a->c * hw);
        std::memcpy(out->data.data() + (std::size_t(n) * out->c + a->c) * hw,
                    b->data.data() + std::size_t(n) * b->c * hw, sizeof(float) * b->c * hw);
    }
    if (out->requires_grad) {
        TensorPtr ai = a, bi = b, o = out;
        g.record("concat_channels", {a, b}, out, [ai, bi, o, hw]() {
            for (int n = 0; n < o->n; ++n) {
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    const float* go = o->grad.data() + std::size_t(n) * o->c * hw;
                    float* ga = ai->grad.data() + std::size_t(n) * ai->c * hw;
                    for (std::int64_t i = 0; i < std::int64_t(ai->c) * hw; ++i) ga[i] += go[i];
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    const float* go = o->grad.data() + (std::size_t(n) * o->c + ai->c) * hw;
                    float* gb = bi->grad.data() + std::size_t(n) * bi->c * hw;
                    for (std::int64_t i = 0; i < std::int64_t(bi->c) * hw; ++i) gb[i] += go[i];
                }
            }
        });
    }
    return out;
}

namespace {

TensorPtr reduce_op(Graph& g, const char* name, const TensorPtr& x, bool take_mean) {
    auto out = make_output(1, 1, 1, 1, {x});
    const std::int64_t n = x->numel();
    const float scale = take_mean ? 1.0f / float(n) : 1.0f;
    if (g_accum_f64) {
        double s = 0;
        for (std::int64_t i = 0; i < n; ++i) s += x->data[i];
        out->data[0] = float(s * scale);
    } else {
        float s = 0;
        for (std::int64_t i = 0; i < n; ++i) s += x->data[i];
        out->data[0] = s * scale;
    }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record(name, {x}, out, [xi, o, scale, n]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const float gv = o->grad[0] * scale;
            for (std::int64_t i = 0; i < n; ++i) xi->grad[i] += gv;
        });
    }
    return out;
}

}  // namespace

TensorPtr mean(Graph& g, const TensorPtr& x) { return reduce_op(g, "mean", x, true); }
TensorPtr sum(Graph& g, const TensorPtr& x) { return reduce_op(g, "sum", x, false); }

TensorPtr tile_channels(Graph& g, const TensorPtr& x, int target_c) {
    if (target_c < 1) throw ConfigError("tile_channels: target_c must be >= 1");
    auto out = make_output(x->n, target_c, x->h, x->w, {x});
    const std::int64_t hw = std::int64_t(x->h) * x->w;
    for (int n = 0; n < x->n; ++n)
        for (int c = 0; c < target_c; ++c)
            std::memcpy(out->data.data() + (std::size_t(n) * target_c + c) * hw,
                        x->data.data() + (std::size_t(n) * x->c + c % x->c) * hw, sizeof(float) * hw);
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("tile_channels", {x}, out, [xi, o, hw]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < o->n; ++n)
                for (int c = 0; c < o->c; ++c) {
                    const float* go = o->grad.data() + (std::size_t(n) * o->c + c) * hw;
                    float* gx = xi->grad.data() + (std::size_t(n) * xi->c + c % xi->c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) gx[i] += go[i];
                }
        });
    }
    return out;
}

namespace {

// site: 0 = (0,0), 1 = (0,1), 2 = (1,0), 3 = (1,1) within each 2x2 tile
inline std::int64_t plane_idx(int n, int h, int w, int y, int x) {
    return (std::int64_t(n) * h + y) * w + x;
}

}  // namespace

TensorPtr bayer_pack(Graph& g, const TensorPtr& x) {
    if (x->c != 1) throw ShapeError("bayer_pack: expected single-channel input, got " + x->shape_str());
    if (x->h % 2 != 0 || x->w % 2 != 0)
        throw ShapeError("bayer_pack: dims must be even, got " + x->shape_str());
    const int hh = x->h / 2, hw2 = x->w / 2;
    auto out = make_output(x->n, 4, hh, hw2, {x});
    for (int n = 0; n < x->n; ++n)
        for (int s = 0; s < 4; ++s) {
            const int oy = s / 2, ox = s % 2;
            for (int y = 0; y < hh; ++y)
                for (int xx = 0; xx < hw2; ++xx)
                    out->at(n, s, y, xx) = x->data[plane_idx(n, x->h, x->w, 2 * y + oy, 2 * xx + ox)];
        }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("bayer_pack", {x}, out, [xi, o]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < o->n; ++n)
                for (int s = 0; s < 4; ++s) {
                    const int oy = s / 2, ox = s % 2;
                    for (int y = 0; y < o->h; ++y)
                        for (int xx = 0; xx < o->w; ++xx)
                            xi->grad[plane_idx(n, xi->h, xi->w, 2 * y + oy, 2 * xx + ox)] +=
                                o->grad[((std::int64_t(n) * 4 + s) * o->h + y) * o->w + xx];
                }
        });
    }
    return out;
}

TensorPtr bayer_unpack(Graph& g, const TensorPtr& x) {
    if (x->c != 4) throw ShapeError("bayer_unpack: expected 4-channel input, got " + x->shape_str());
    auto out = make_output(x->n, 1, x->h * 2, x->w * 2, {x});
    for (int n = 0; n < x->n; ++n)
        for (int s = 0; s < 4; ++s) {
            const int oy = s / 2, ox = s % 2;
            for (int y = 0; y < x->h; ++y)
                for (int xx = 0; xx < x->w; ++xx)
                    out->data[plane_idx(n, out->h, out->w, 2 * y + oy, 2 * xx + ox)] =
                        x->at(n, s, y, xx);
        }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("bayer_unpack", {x}, out, [xi, o]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int n = 0; n < xi->n; ++n)
                for (int s = 0; s < 4; ++s) {
                    const int oy = s / 2, ox = s % 2;
                    for (int y = 0; y < xi->h; ++y)
                        for (int xx = 0; xx < xi->w; ++xx)
                            xi->grad[((std::int64_t(n) * 4 + s) * xi->h + y) * xi->w + xx] +=
                                o->grad[plane_idx(n, o->h, o->w, 2 * y + oy, 2 * xx + ox)];
                }
        });
    }
    return out;
}

TensorPtr gram(Graph& g, const TensorPtr& x) {
    const int C = x->c;
    const std::int64_t hw = std::int64_t(x->h) * x->w;
    const float inv = 1.0f / (float(C) * float(hw));
    auto out = make_output(x->n, C, C, 1, {x});
    for (int n = 0; n < x->n; ++n) {
        const float* A = x->data.data() + std::size_t(n) * C * hw;
        float* G = out->data.data() + std::size_t(n) * C * C;
        if (g_accum_f64) {
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < C; ++j) {
                    double s = 0;
                    for (std::int64_t t = 0; t < hw; ++t) s += double(A[i * hw + t]) * A[j * hw + t];
                    G[i * C + j] = float(s * inv);
                }
        } else {
            std::fill(G, G + std::size_t(C) * C, 0.0f);
            gemm_abT(A, A, G, C, int(hw), C);
            for (int i = 0; i < C * C; ++i) G[i] *= inv;
        }
    }
    if (out->requires_grad) {
        TensorPtr xi = x, o = out;
        g.record("gram", {x}, out, [xi, o, inv, hw]() {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const int C = xi->c;
            std::vector<float> gsym(std::size_t(C) * C);
            for (int n = 0; n < xi->n; ++n) {
                const float* gG = o->grad.data() + std::size_t(n) * C * C;
                for (int i = 0; i < C; ++i)
                    for (int j = 0; j < C; ++j)
                        gsym[std::size_t(i) * C + j] = (gG[i * C + j] + gG[j * C + i]) * inv;
                const float* A = xi->data.data() + std::size_t(n) * C * hw;
                float* gA = xi->grad.data() + std::size_t(n) * C * hw;
                gemm_f32(gsym.data(), A, gA, C, C, int(hw));
            }
        });
    }
    return out;
}

// ---- tensor file format -----------------------------------------------------

void save_tensor(std::ostream& os, const Tensor& t) {
    os.write("FDT1", 4);
    write_u32le(os, 4);
    write_u32le(os, std::uint32_t(t.n));
    write_u32le(os, std::uint32_t(t.c));
    write_u32le(os, std::uint32_t(t.h));
    write_u32le(os, std::uint32_t(t.w));
    for (float v : t.data) write_f32le(os, v);
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    save_tensor(os, t);
    if (!os) throw IoError("write failed: " + path);
}

TensorPtr load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FDT1", 4) != 0) throw IoError("bad tensor file magic");
    const std::uint32_t rank = read_u32le(is);
    if (rank < 1 || rank > 4) throw IoError("unsupported tensor rank " + std::to_string(rank));
    std::uint32_t dims[4] = {1, 1, 1, 1};
    for (std::uint32_t i = 0; i < rank; ++i) dims[4 - rank + i] = read_u32le(is);
    auto t = Tensor::create(int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3]));
    for (auto& v : t->data) v = read_f32le(is);
    return t;
}

TensorPtr load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open tensor file: " + path);
    return load_tensor(is);
}

}  // namespace faun
