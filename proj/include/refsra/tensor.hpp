#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "refsra/errors.hpp"

namespace refsra {

using Buf = std::shared_ptr<const std::vector<double>>;

inline Buf make_buf(std::vector<double> v) {
    return std::make_shared<const std::vector<double>>(std::move(v));
}

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Differentiable primitives. Leaf marks interned constants/variables.
enum class OpKind {
    Leaf,
    Add,
    Sub,
    MulElementwise,
    ScalarMul,
    Relu,
    Conv2d,
    BilinearResize,
    BicubicResize,
    UnfoldPatches,
    FoldPatchesAvg,
    Matmul,
    SoftmaxRows,
    L2NormalizeRows,
    ReduceSum,
    ReduceMean,
    Square,
    Abs,
    ConcatChannels,
    Clamp01,
    SqrtEps,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::MulElementwise: return "mul_elementwise";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Relu: return "relu";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::BilinearResize: return "bilinear_resize";
        case OpKind::BicubicResize: return "bicubic_resize";
        case OpKind::UnfoldPatches: return "unfold_patches";
        case OpKind::FoldPatchesAvg: return "fold_patches_overlap_average";
        case OpKind::Matmul: return "matmul";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::L2NormalizeRows: return "l2_normalize_rows";
        case OpKind::ReduceSum: return "reduce_sum";
        case OpKind::ReduceMean: return "reduce_mean";
        case OpKind::Square: return "square";
        case OpKind::Abs: return "abs";
        case OpKind::ConcatChannels: return "concat_channels";
        case OpKind::Clamp01: return "clamp01";
        case OpKind::SqrtEps: return "sqrt_eps";
    }
    return "?";
}

/// Per-op attribute blob. Each op reads only the fields it documents.
struct OpAttrs {
    int pad = 0;
    int stride = 1;
    int patch = 0;
    int out_h = 0;
    int out_w = 0;
    double scalar = 0.0;
    double temperature = 1.0;
    double eps = 0.0;
    bool transpose_b = false;
};

class Tape;

/// Dense row-major tensor of doubles. Values are immutable; node >= 0 marks
/// attachment to a Tape, which enables reverse-mode gradients.
struct Tensor {
    std::vector<int> shape;
    Buf data;
    Tape* tape = nullptr;
    int node = -1;
    uint64_t epoch = 0;

    Tensor() = default;
    Tensor(std::vector<int> s, Buf d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor from(std::vector<int> shape, std::vector<double> values) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        return Tensor(std::move(shape), make_buf(std::move(values)));
    }
    static Tensor zeros(std::vector<int> shape) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
        return Tensor(std::move(shape), make_buf(std::move(v)));
    }
    static Tensor full(std::vector<int> shape, double value) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
        return Tensor(std::move(shape), make_buf(std::move(v)));
    }
    static Tensor scalar_value(double v) { return from({1}, {v}); }

    int64_t numel() const { return shape_numel(shape); }
    const std::vector<double>& values() const { return *data; }
    double at(int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
    bool attached() const { return tape != nullptr && node >= 0; }
    Tensor detached() const { return Tensor(shape, data); }

    double scalar() const {
        if (numel() != 1) throw ShapeError("scalar: tensor has shape " + shape_str(shape));
        return (*data)[0];
    }
};

namespace detail {

// ----- matmul kernels ------------------------------------------------------
// Row-major throughout. Loops are arranged so the innermost dimension is
// contiguous and the compiler can vectorize; rows are processed in blocks of
// four to reuse streamed operands.

/// C[M,N] = A[M,K] * B[K,N]
inline void mm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
    std::fill(C, C + static_cast<size_t>(M) * N, 0.0);
    int m = 0;
    for (; m + 4 <= M; m += 4) {
        double* c0 = C + static_cast<size_t>(m) * N;
        double* c1 = c0 + N;
        double* c2 = c1 + N;
        double* c3 = c2 + N;
        const double* a = A + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const double* b = B + static_cast<size_t>(k) * N;
            const double a0 = a[k], a1 = a[K + k], a2 = a[2 * K + k], a3 = a[3 * K + k];
            for (int n = 0; n < N; ++n) {
                const double bn = b[n];
                c0[n] += a0 * bn;
                c1[n] += a1 * bn;
                c2[n] += a2 * bn;
                c3[n] += a3 * bn;
            }
        }
    }
    for (; m < M; ++m) {
        double* c = C + static_cast<size_t>(m) * N;
        const double* a = A + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const double ak = a[k];
            const double* b = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += ak * b[n];
        }
    }
}

/// C[M,N] = A[M,K] * B[N,K]^T  (rows of A dotted with rows of B)
inline void mm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* a = A + static_cast<size_t>(m) * K;
        double* c = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* b = B + static_cast<size_t>(n) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[n] = acc;
        }
    }
}

/// C[K,N] = A[M,K]^T * B[M,N]  (contraction over M)
inline void mm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
    std::fill(C, C + static_cast<size_t>(K) * N, 0.0);
    for (int m = 0; m < M; ++m) {
        const double* a = A + static_cast<size_t>(m) * K;
        const double* b = B + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const double ak = a[k];
            double* c = C + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += ak * b[n];
        }
    }
}

// ----- resize taps ---------------------------------------------------------

/// Catmull-Rom cubic kernel (a = -0.5).
inline double catmull_rom(double t) {
    t = std::abs(t);
    if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

struct AxisTaps {
    int support = 0;
    std::vector<int> idx;     // out_size * support clamped source indices
    std::vector<double> w;    // matching weights, normalized per output sample
};

/// Pixel-center sampling with edge clamp: src = (dst + 0.5) * in/out - 0.5.
inline AxisTaps make_taps(int in_size, int out_size, bool cubic) {
    AxisTaps taps;
    taps.support = cubic ? 4 : 2;
    taps.idx.resize(static_cast<size_t>(out_size) * taps.support);
    taps.w.resize(static_cast<size_t>(out_size) * taps.support);
    const double scale = static_cast<double>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
        const double sx = (o + 0.5) * scale - 0.5;
        const int x0 = static_cast<int>(std::floor(sx));
        const double t = sx - x0;
        double* w = taps.w.data() + static_cast<size_t>(o) * taps.support;
        int* id = taps.idx.data() + static_cast<size_t>(o) * taps.support;
        if (cubic) {
            w[0] = catmull_rom(t + 1.0);
            w[1] = catmull_rom(t);
            w[2] = catmull_rom(t - 1.0);
            w[3] = catmull_rom(t - 2.0);
            for (int j = 0; j < 4; ++j) id[j] = std::clamp(x0 - 1 + j, 0, in_size - 1);
        } else {
            w[0] = 1.0 - t;
            w[1] = t;
            id[0] = std::clamp(x0, 0, in_size - 1);
            id[1] = std::clamp(x0 + 1, 0, in_size - 1);
        }
        double sum = 0.0;
        for (int j = 0; j < taps.support; ++j) sum += w[j];
        for (int j = 0; j < taps.support; ++j) w[j] /= sum;
    }
    return taps;
}

// ----- unfold/fold geometry --------------------------------------------------

inline int grid_size(int size, int patch, int stride, int pad, const char* op) {
    const int span = size + 2 * pad - patch;
    if (span < 0)
        throw ShapeError(std::string(op) + ": patch " + std::to_string(patch) +
                         " exceeds padded extent " + std::to_string(size + 2 * pad));
    return span / stride + 1;
}

}  // namespace detail

/// Append-only record of executed primitives; enables reverse-mode gradients.
/// Confined to a single thread. Clearing invalidates all node handles.
class Tape {
public:
    Tensor leaf(const Tensor& t) {
        if (t.attached()) {
            if (t.tape != this || t.epoch != epoch_)
                throw Error("leaf: tensor belongs to another record");
            return t;
        }
        Node n;
        n.kind = OpKind::Leaf;
        n.shape = t.shape;
        n.value = t.data;
        nodes_.push_back(std::move(n));
        Tensor out = t;
        out.tape = this;
        out.node = static_cast<int>(nodes_.size()) - 1;
        out.epoch = epoch_;
        return out;
    }

    Tensor record(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs);

    /// Gradients of a scalar root w.r.t. every recorded node, indexed by
    /// node id. Nodes unreachable from the root get zero gradients.
    std::vector<Tensor> backward(const Tensor& root) const;

    void clear() {
        nodes_.clear();
        ++epoch_;
    }
    size_t size() const { return nodes_.size(); }
    uint64_t epoch() const { return epoch_; }

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<int> shape;
        Buf value;
        std::array<int, 3> in{-1, -1, -1};
        int n_in = 0;
        OpAttrs attrs;
    };
    std::vector<Node> nodes_;
    uint64_t epoch_ = 0;

    void backward_node(const Node& node, const std::vector<double>& gout,
                       std::vector<std::vector<double>>& grads) const;
    friend struct TapeEval;
};

namespace detail {

struct TView {
    const std::vector<int>* shape;
    const std::vector<double>* data;
    int dim(int i) const { return (*shape)[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape->size()); }
    const double* ptr() const { return data->data(); }
    int64_t numel() const { return shape_numel(*shape); }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

inline void require_same_shape(const TView& a, const TView& b, const char* op) {
    require(*a.shape == *b.shape, std::string(op) + ": shape mismatch " + shape_str(*a.shape) +
                                      " vs " + shape_str(*b.shape));
}

/// Forward evaluation of a primitive; validates shapes and computes values.
inline std::pair<std::vector<int>, std::vector<double>> eval(OpKind kind,
                                                             const std::vector<TView>& in,
                                                             const OpAttrs& attrs) {
    auto arity = [&](int lo, int hi) {
        require(static_cast<int>(in.size()) >= lo && static_cast<int>(in.size()) <= hi,
                std::string(op_name(kind)) + ": wrong number of inputs (" +
                    std::to_string(in.size()) + ")");
    };
    switch (kind) {
        case OpKind::Leaf:
            throw Error("leaf is not an executable primitive");

        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::MulElementwise: {
            arity(2, 2);
            require_same_shape(in[0], in[1], op_name(kind));
            const auto& a = *in[0].data;
            const auto& b = *in[1].data;
            std::vector<double> out(a.size());
            if (kind == OpKind::Add)
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
            else if (kind == OpKind::Sub)
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
            else
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::ScalarMul: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = attrs.scalar * a[i];
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::Relu: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::Square: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * a[i];
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::Abs: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]);
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::Clamp01: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = std::clamp(a[i], 0.0, 1.0);
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::SqrtEps: {
            arity(1, 1);
            const auto& a = *in[0].data;
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = std::sqrt(a[i] + attrs.eps);
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::ReduceSum:
        case OpKind::ReduceMean: {
            arity(1, 1);
            const auto& a = *in[0].data;
            double acc = 0.0;
            for (double v : a) acc += v;
            if (kind == OpKind::ReduceMean) acc /= static_cast<double>(a.size());
            return {{1}, {acc}};
        }

        case OpKind::Conv2d: {
            arity(2, 3);
            require(in[0].ndim() == 3, "conv2d: input must be HxWxC, got " + shape_str(*in[0].shape));
            require(in[1].ndim() == 4, "conv2d: kernel must be kxkxCinxCout, got " + shape_str(*in[1].shape));
            const int H = in[0].dim(0), W = in[0].dim(1), Ci = in[0].dim(2);
            const int k = in[1].dim(0), Ci2 = in[1].dim(2), Co = in[1].dim(3);
            require(in[1].dim(1) == k, "conv2d: kernel must be square, got " + shape_str(*in[1].shape));
            require(Ci == Ci2, "conv2d: input channels " + std::to_string(Ci) +
                                   " != kernel channels " + std::to_string(Ci2));
            if (in.size() == 3)
                require(in[2].ndim() == 1 && in[2].dim(0) == Co,
                        "conv2d: bias must be [Cout], got " + shape_str(*in[2].shape));
            const int p = attrs.pad;
            const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
            require(Ho >= 1 && Wo >= 1, "conv2d: kernel " + std::to_string(k) +
                                            " too large for input " + shape_str(*in[0].shape));
            const int KC = k * k * Ci;
            const int R = Ho * Wo;
            // im2col: row per output pixel, columns ordered (ky, kx, ci).
            std::vector<double> col(static_cast<size_t>(R) * KC, 0.0);
            const double* x = in[0].ptr();
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    double* row = col.data() + (static_cast<size_t>(oy) * Wo + ox) * KC;
                    for (int ky = 0; ky < k; ++ky) {
                        const int y = oy + ky - p;
                        if (y < 0 || y >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xx = ox + kx - p;
                            if (xx < 0 || xx >= W) continue;
                            const double* src = x + (static_cast<size_t>(y) * W + xx) * Ci;
                            double* dst = row + (static_cast<size_t>(ky) * k + kx) * Ci;
                            for (int c = 0; c < Ci; ++c) dst[c] = src[c];
                        }
                    }
                }
            }
            std::vector<double> out(static_cast<size_t>(R) * Co);
            mm_nn(col.data(), in[1].ptr(), out.data(), R, KC, Co);
            if (in.size() == 3) {
                const double* b = in[2].ptr();
                for (int r = 0; r < R; ++r) {
                    double* o = out.data() + static_cast<size_t>(r) * Co;
                    for (int c = 0; c < Co; ++c) o[c] += b[c];
                }
            }
            return {{Ho, Wo, Co}, std::move(out)};
        }

        case OpKind::BilinearResize:
        case OpKind::BicubicResize: {
            arity(1, 1);
            require(in[0].ndim() == 3, std::string(op_name(kind)) + ": input must be HxWxC, got " +
                                           shape_str(*in[0].shape));
            require(attrs.out_h >= 1 && attrs.out_w >= 1,
                    std::string(op_name(kind)) + ": non-positive output size " +
                        std::to_string(attrs.out_h) + "x" + std::to_string(attrs.out_w));
            const int H = in[0].dim(0), W = in[0].dim(1), C = in[0].dim(2);
            const bool cubic = kind == OpKind::BicubicResize;
            const AxisTaps ty = make_taps(H, attrs.out_h, cubic);
            const AxisTaps tx = make_taps(W, attrs.out_w, cubic);
            const int S = ty.support;
            std::vector<double> out(static_cast<size_t>(attrs.out_h) * attrs.out_w * C, 0.0);
            const double* x = in[0].ptr();
            // Horizontal taps are accumulated in the inner loop so that per-row
            // cancellation is bit-exact before vertical weighting.
            for (int oy = 0; oy < attrs.out_h; ++oy) {
                const int* yi = ty.idx.data() + static_cast<size_t>(oy) * S;
                const double* wy = ty.w.data() + static_cast<size_t>(oy) * S;
                for (int ox = 0; ox < attrs.out_w; ++ox) {
                    const int* xi = tx.idx.data() + static_cast<size_t>(ox) * S;
                    const double* wx = tx.w.data() + static_cast<size_t>(ox) * S;
                    double* o = out.data() + (static_cast<size_t>(oy) * attrs.out_w + ox) * C;
                    for (int c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (int j = 0; j < S; ++j) {
                            const double* row = x + (static_cast<size_t>(yi[j]) * W) * C;
                            double h = 0.0;
                            for (int i = 0; i < S; ++i) h += wx[i] * row[static_cast<size_t>(xi[i]) * C + c];
                            acc += wy[j] * h;
                        }
                        o[c] = acc;
                    }
                }
            }
            return {{attrs.out_h, attrs.out_w, C}, std::move(out)};
        }

        case OpKind::UnfoldPatches: {
            arity(1, 1);
            require(in[0].ndim() == 3, "unfold_patches: input must be HxWxC, got " + shape_str(*in[0].shape));
            const int H = in[0].dim(0), W = in[0].dim(1), C = in[0].dim(2);
            const int p = attrs.patch, s = attrs.stride, pad = attrs.pad;
            const int Gh = grid_size(H, p, s, pad, "unfold_patches");
            const int Gw = grid_size(W, p, s, pad, "unfold_patches");
            const int D = p * p * C;
            std::vector<double> out(static_cast<size_t>(Gh) * Gw * D, 0.0);
            const double* x = in[0].ptr();
            for (int gy = 0; gy < Gh; ++gy) {
                const int ty0 = gy * s - pad;
                for (int gx = 0; gx < Gw; ++gx) {
                    const int tx0 = gx * s - pad;
                    double* row = out.data() + (static_cast<size_t>(gy) * Gw + gx) * D;
                    for (int py = 0; py < p; ++py) {
                        const int y = ty0 + py;
                        if (y < 0 || y >= H) continue;
                        for (int px = 0; px < p; ++px) {
                            const int xx = tx0 + px;
                            if (xx < 0 || xx >= W) continue;
                            const double* src = x + (static_cast<size_t>(y) * W + xx) * C;
                            double* dst = row + (static_cast<size_t>(py) * p + px) * C;
                            for (int c = 0; c < C; ++c) dst[c] = src[c];
                        }
                    }
                }
            }
            return {{Gh * Gw, D}, std::move(out)};
        }

        case OpKind::FoldPatchesAvg: {
            arity(1, 1);
            require(in[0].ndim() == 2, "fold_patches_overlap_average: input must be [patches, p*p*C], got " +
                                           shape_str(*in[0].shape));
            const int p = attrs.patch, s = attrs.stride, pad = attrs.pad;
            const int Ho = attrs.out_h, Wo = attrs.out_w;
            const int D = in[0].dim(1);
            require(D % (p * p) == 0, "fold_patches_overlap_average: row size " + std::to_string(D) +
                                          " not divisible by patch area " + std::to_string(p * p));
            const int C = D / (p * p);
            const int Gh = grid_size(Ho, p, s, pad, "fold_patches_overlap_average");
            const int Gw = grid_size(Wo, p, s, pad, "fold_patches_overlap_average");
            require(Gh * Gw == in[0].dim(0),
                    "fold_patches_overlap_average: grid " + std::to_string(Gh) + "x" + std::to_string(Gw) +
                        " does not match " + std::to_string(in[0].dim(0)) + " patches");
            std::vector<double> out(static_cast<size_t>(Ho) * Wo * C, 0.0);
            std::vector<int> count(static_cast<size_t>(Ho) * Wo, 0);
            const double* v = in[0].ptr();
            for (int gy = 0; gy < Gh; ++gy) {
                const int ty0 = gy * s - pad;
                for (int gx = 0; gx < Gw; ++gx) {
                    const int tx0 = gx * s - pad;
                    const double* row = v + (static_cast<size_t>(gy) * Gw + gx) * D;
                    for (int py = 0; py < p; ++py) {
                        const int y = ty0 + py;
                        if (y < 0 || y >= Ho) continue;
                        for (int px = 0; px < p; ++px) {
                            const int xx = tx0 + px;
                            if (xx < 0 || xx >= Wo) continue;
                            ++count[static_cast<size_t>(y) * Wo + xx];
                            double* dst = out.data() + (static_cast<size_t>(y) * Wo + xx) * C;
                            const double* src = row + (static_cast<size_t>(py) * p + px) * C;
                            for (int c = 0; c < C; ++c) dst[c] += src[c];
                        }
                    }
                }
            }
            for (int i = 0; i < Ho * Wo; ++i) {
                if (count[i] > 1) {
                    const double inv = 1.0 / count[i];
                    double* dst = out.data() + static_cast<size_t>(i) * C;
                    for (int c = 0; c < C; ++c) dst[c] *= inv;
                }
            }
            return {{Ho, Wo, C}, std::move(out)};
        }

        case OpKind::Matmul: {
            arity(2, 2);
            require(in[0].ndim() == 2 && in[1].ndim() == 2,
                    "matmul: inputs must be matrices, got " + shape_str(*in[0].shape) + " and " +
                        shape_str(*in[1].shape));
            const int M = in[0].dim(0), K = in[0].dim(1);
            if (attrs.transpose_b) {
                const int N = in[1].dim(0);
                require(in[1].dim(1) == K, "matmul: inner dims " + std::to_string(K) + " vs " +
                                               std::to_string(in[1].dim(1)) + " (transposed)");
                std::vector<double> out(static_cast<size_t>(M) * N);
                mm_nt(in[0].ptr(), in[1].ptr(), out.data(), M, K, N);
                return {{M, N}, std::move(out)};
            }
            const int N = in[1].dim(1);
            require(in[1].dim(0) == K, "matmul: inner dims " + std::to_string(K) + " vs " +
                                           std::to_string(in[1].dim(0)));
            std::vector<double> out(static_cast<size_t>(M) * N);
            mm_nn(in[0].ptr(), in[1].ptr(), out.data(), M, K, N);
            return {{M, N}, std::move(out)};
        }

        case OpKind::SoftmaxRows: {
            arity(1, 1);
            require(in[0].ndim() == 2, "softmax_rows: input must be a matrix, got " + shape_str(*in[0].shape));
            require(attrs.temperature > 0.0, "softmax_rows: temperature must be positive");
            const int R = in[0].dim(0), D = in[0].dim(1);
            const double invt = 1.0 / attrs.temperature;
            std::vector<double> out(static_cast<size_t>(R) * D);
            const double* x = in[0].ptr();
            for (int r = 0; r < R; ++r) {
                const double* xr = x + static_cast<size_t>(r) * D;
                double* yr = out.data() + static_cast<size_t>(r) * D;
                double mx = xr[0];
                for (int d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
                double sum = 0.0;
                for (int d = 0; d < D; ++d) {
                    yr[d] = std::exp((xr[d] - mx) * invt);
                    sum += yr[d];
                }
                const double inv = 1.0 / sum;
                for (int d = 0; d < D; ++d) yr[d] *= inv;
            }
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::L2NormalizeRows: {
            arity(1, 1);
            require(in[0].ndim() == 2, "l2_normalize_rows: input must be a matrix, got " + shape_str(*in[0].shape));
            const int R = in[0].dim(0), D = in[0].dim(1);
            std::vector<double> out(static_cast<size_t>(R) * D);
            const double* x = in[0].ptr();
            for (int r = 0; r < R; ++r) {
                const double* xr = x + static_cast<size_t>(r) * D;
                double* yr = out.data() + static_cast<size_t>(r) * D;
                double s = 0.0;
                for (int d = 0; d < D; ++d) s += xr[d] * xr[d];
                const double inv = 1.0 / std::sqrt(s + attrs.eps);
                for (int d = 0; d < D; ++d) yr[d] = xr[d] * inv;
            }
            return {*in[0].shape, std::move(out)};
        }

        case OpKind::ConcatChannels: {
            arity(2, 2);
            require(in[0].ndim() == 3 && in[1].ndim() == 3,
                    "concat_channels: inputs must be HxWxC, got " + shape_str(*in[0].shape) + " and " +
                        shape_str(*in[1].shape));
            const int H = in[0].dim(0), W = in[0].dim(1), C1 = in[0].dim(2), C2 = in[1].dim(2);
            require(in[1].dim(0) == H && in[1].dim(1) == W,
                    "concat_channels: spatial mismatch " + shape_str(*in[0].shape) + " vs " +
                        shape_str(*in[1].shape));
            std::vector<double> out(static_cast<size_t>(H) * W * (C1 + C2));
            const double* a = in[0].ptr();
            const double* b = in[1].ptr();
            for (int i = 0; i < H * W; ++i) {
                double* o = out.data() + static_cast<size_t>(i) * (C1 + C2);
                const double* pa = a + static_cast<size_t>(i) * C1;
                const double* pb = b + static_cast<size_t>(i) * C2;
                for (int c = 0; c < C1; ++c) o[c] = pa[c];
                for (int c = 0; c < C2; ++c) o[C1 + c] = pb[c];
            }
            return {{H, W, C1 + C2}, std::move(out)};
        }
    }
    throw Error("unknown op");
}

}  // namespace detail

inline Tensor Tape::record(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    std::vector<Tensor> interned;
    interned.reserve(inputs.size());
    for (const auto& t : inputs) interned.push_back(leaf(t));
    std::vector<detail::TView> views;
    views.reserve(interned.size());
    for (const auto& t : interned) views.push_back({&t.shape, t.data.get()});
    auto [shape, values] = detail::eval(kind, views, attrs);

    Node n;
    n.kind = kind;
    n.shape = shape;
    n.value = make_buf(std::move(values));
    n.n_in = static_cast<int>(interned.size());
    for (int i = 0; i < n.n_in; ++i) n.in[static_cast<size_t>(i)] = interned[static_cast<size_t>(i)].node;
    n.attrs = attrs;
    nodes_.push_back(std::move(n));

    Tensor out;
    out.shape = std::move(shape);
    out.data = nodes_.back().value;
    out.tape = this;
    out.node = static_cast<int>(nodes_.size()) - 1;
    out.epoch = epoch_;
    return out;
}

/// Executes one primitive. Appends to the record of any attached input;
/// otherwise computes a detached value. Pure: identical inputs and attrs
/// produce bit-identical outputs.
inline Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs,
                                const OpAttrs& attrs = {}) {
    Tape* tape = nullptr;
    for (const auto& t : inputs) {
        if (t.attached()) {
            if (tape && tape != t.tape) throw Error("forward_primitive: inputs from different records");
            tape = t.tape;
        }
    }
    if (tape) return tape->record(kind, inputs, attrs);
    std::vector<detail::TView> views;
    views.reserve(inputs.size());
    for (const auto& t : inputs) views.push_back({&t.shape, t.data.get()});
    auto [shape, values] = detail::eval(kind, views, attrs);
    return Tensor(std::move(shape), make_buf(std::move(values)));
}

// ----- named wrappers --------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) { return forward_primitive(OpKind::Add, {a, b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return forward_primitive(OpKind::Sub, {a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return forward_primitive(OpKind::MulElementwise, {a, b});
}
inline Tensor scalar_mul(const Tensor& a, double s) {
    OpAttrs at;
    at.scalar = s;
    return forward_primitive(OpKind::ScalarMul, {a}, at);
}
inline Tensor relu(const Tensor& a) { return forward_primitive(OpKind::Relu, {a}); }
inline Tensor square(const Tensor& a) { return forward_primitive(OpKind::Square, {a}); }
inline Tensor abs_op(const Tensor& a) { return forward_primitive(OpKind::Abs, {a}); }
inline Tensor clamp01(const Tensor& a) { return forward_primitive(OpKind::Clamp01, {a}); }
inline Tensor sqrt_eps(const Tensor& a, double eps = 1e-12) {
    OpAttrs at;
    at.eps = eps;
    return forward_primitive(OpKind::SqrtEps, {a}, at);
}
inline Tensor reduce_sum(const Tensor& a) { return forward_primitive(OpKind::ReduceSum, {a}); }
inline Tensor reduce_mean(const Tensor& a) { return forward_primitive(OpKind::ReduceMean, {a}); }
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
    OpAttrs at;
    at.pad = pad;
    return forward_primitive(OpKind::Conv2d, {x, w, b}, at);
}
inline Tensor conv2d(const Tensor& x, const Tensor& w, int pad) {
    OpAttrs at;
    at.pad = pad;
    return forward_primitive(OpKind::Conv2d, {x, w}, at);
}
inline Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    OpAttrs at;
    at.out_h = out_h;
    at.out_w = out_w;
    return forward_primitive(OpKind::BilinearResize, {x}, at);
}
inline Tensor bicubic_resize_op(const Tensor& x, int out_h, int out_w) {
    OpAttrs at;
    at.out_h = out_h;
    at.out_w = out_w;
    return forward_primitive(OpKind::BicubicResize, {x}, at);
}
inline Tensor unfold_patches(const Tensor& x, int patch, int stride, int pad) {
    OpAttrs at;
    at.patch = patch;
    at.stride = stride;
    at.pad = pad;
    return forward_primitive(OpKind::UnfoldPatches, {x}, at);
}
inline Tensor fold_patches_overlap_average(const Tensor& x, int out_h, int out_w, int patch,
                                           int stride, int pad) {
    OpAttrs at;
    at.out_h = out_h;
    at.out_w = out_w;
    at.patch = patch;
    at.stride = stride;
    at.pad = pad;
    return forward_primitive(OpKind::FoldPatchesAvg, {x}, at);
}
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    OpAttrs at;
    at.transpose_b = transpose_b;
    return forward_primitive(OpKind::Matmul, {a, b}, at);
}
inline Tensor softmax_rows(const Tensor& a, double temperature) {
    OpAttrs at;
    at.temperature = temperature;
    return forward_primitive(OpKind::SoftmaxRows, {a}, at);
}
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
    OpAttrs at;
    at.eps = eps;
    return forward_primitive(OpKind::L2NormalizeRows, {a}, at);
}
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    return forward_primitive(OpKind::ConcatChannels, {a, b});
}

// ----- backward --------------------------------------------------------------

inline void Tape::backward_node(const Node& node, const std::vector<double>& gout,
                                std::vector<std::vector<double>>& grads) const {
    auto gin = [&](int slot) -> std::vector<double>& {
        const int id = node.in[static_cast<size_t>(slot)];
        auto& g = grads[static_cast<size_t>(id)];
        if (g.empty()) g.assign(static_cast<size_t>(shape_numel(nodes_[static_cast<size_t>(id)].shape)), 0.0);
        return g;
    };
    auto inval = [&](int slot) -> const std::vector<double>& {
        return *nodes_[static_cast<size_t>(node.in[static_cast<size_t>(slot)])].value;
    };
    auto inshape = [&](int slot) -> const std::vector<int>& {
        return nodes_[static_cast<size_t>(node.in[static_cast<size_t>(slot)])].shape;
    };

    switch (node.kind) {
        case OpKind::Leaf:
            return;

        case OpKind::Add: {
            auto& ga = gin(0);
            auto& gb = gin(1);
            for (size_t i = 0; i < gout.size(); ++i) {
                ga[i] += gout[i];
                gb[i] += gout[i];
            }
            return;
        }
        case OpKind::Sub: {
            auto& ga = gin(0);
            auto& gb = gin(1);
            for (size_t i = 0; i < gout.size(); ++i) {
                ga[i] += gout[i];
                gb[i] -= gout[i];
            }
            return;
        }
        case OpKind::MulElementwise: {
            const auto& a = inval(0);
            const auto& b = inval(1);
            auto& ga = gin(0);
            auto& gb = gin(1);
            for (size_t i = 0; i < gout.size(); ++i) {
                ga[i] += gout[i] * b[i];
                gb[i] += gout[i] * a[i];
            }
            return;
        }
        case OpKind::ScalarMul: {
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i) ga[i] += node.attrs.scalar * gout[i];
            return;
        }
        case OpKind::Relu: {
            const auto& a = inval(0);
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i)
                if (a[i] > 0.0) ga[i] += gout[i];
            return;
        }
        case OpKind::Square: {
            const auto& a = inval(0);
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i) ga[i] += 2.0 * a[i] * gout[i];
            return;
        }
        case OpKind::Abs: {
            const auto& a = inval(0);
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i) {
                if (a[i] > 0.0)
                    ga[i] += gout[i];
                else if (a[i] < 0.0)
                    ga[i] -= gout[i];
            }
            return;
        }
        case OpKind::Clamp01: {
            // Gradient passes strictly inside (0,1); zero at saturation.
            const auto& a = inval(0);
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i)
                if (a[i] > 0.0 && a[i] < 1.0) ga[i] += gout[i];
            return;
        }
        case OpKind::SqrtEps: {
            const auto& y = *node.value;
            auto& ga = gin(0);
            for (size_t i = 0; i < gout.size(); ++i)
                if (y[i] > 0.0) ga[i] += gout[i] / (2.0 * y[i]);
            return;
        }
        case OpKind::ReduceSum: {
            auto& ga = gin(0);
            const double g = gout[0];
            for (auto& v : ga) v += g;
            return;
        }
        case OpKind::ReduceMean: {
            auto& ga = gin(0);
            const double g = gout[0] / static_cast<double>(ga.size());
            for (auto& v : ga) v += g;
            return;
        }

        case OpKind::Conv2d: {
            const auto& xs = inshape(0);
            const auto& ws = inshape(1);
            const int H = xs[0], W = xs[1], Ci = xs[2];
            const int k = ws[0], Co = ws[3];
            const int p = node.attrs.pad;
            const int Ho = node.shape[0], Wo = node.shape[1];
            const int KC = k * k * Ci;
            const int R = Ho * Wo;
            const auto& x = inval(0);
            const auto& w = inval(1);

            // Rebuild im2col (cheaper than keeping it on every node).
            std::vector<double> col(static_cast<size_t>(R) * KC, 0.0);
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    double* row = col.data() + (static_cast<size_t>(oy) * Wo + ox) * KC;
                    for (int ky = 0; ky < k; ++ky) {
                        const int y = oy + ky - p;
                        if (y < 0 || y >= H) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xx = ox + kx - p;
                            if (xx < 0 || xx >= W) continue;
                            const double* src = x.data() + (static_cast<size_t>(y) * W + xx) * Ci;
                            double* dst = row + (static_cast<size_t>(ky) * k + kx) * Ci;
                            for (int c = 0; c < Ci; ++c) dst[c] = src[c];
                        }
                    }
                }
            }

            {  // dW = col^T * dY
                auto& gw = gin(1);
                std::vector<double> dw(static_cast<size_t>(KC) * Co);
                detail::mm_tn(col.data(), gout.data(), dw.data(), R, KC, Co);
                for (size_t i = 0; i < dw.size(); ++i) gw[i] += dw[i];
            }
            if (node.n_in == 3) {  // db = column sums of dY
                auto& gb = gin(2);
                for (int r = 0; r < R; ++r) {
                    const double* g = gout.data() + static_cast<size_t>(r) * Co;
                    for (int c = 0; c < Co; ++c) gb[static_cast<size_t>(c)] += g[c];
                }
            }
            {  // dX = col2im(dY * W^T)
                std::vector<double> dcol(static_cast<size_t>(R) * KC);
                detail::mm_nt(gout.data(), w.data(), dcol.data(), R, Co, KC);
                auto& gx = gin(0);
                for (int oy = 0; oy < Ho; ++oy) {
                    for (int ox = 0; ox < Wo; ++ox) {
                        const double* row = dcol.data() + (static_cast<size_t>(oy) * Wo + ox) * KC;
                        for (int ky = 0; ky < k; ++ky) {
                            const int y = oy + ky - p;
                            if (y < 0 || y >= H) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int xx = ox + kx - p;
                                if (xx < 0 || xx >= W) continue;
                                double* dst = gx.data() + (static_cast<size_t>(y) * W + xx) * Ci;
                                const double* src = row + (static_cast<size_t>(ky) * k + kx) * Ci;
                                for (int c = 0; c < Ci; ++c) dst[c] += src[c];
                            }
                        }
                    }
                }
            }
            return;
        }

        case OpKind::BilinearResize:
        case OpKind::BicubicResize: {
            const auto& xs = inshape(0);
            const int H = xs[0], W = xs[1], C = xs[2];
            const bool cubic = node.kind == OpKind::BicubicResize;
            const detail::AxisTaps ty = detail::make_taps(H, node.attrs.out_h, cubic);
            const detail::AxisTaps tx = detail::make_taps(W, node.attrs.out_w, cubic);
            const int S = ty.support;
            auto& gx = gin(0);
            for (int oy = 0; oy < node.attrs.out_h; ++oy) {
                const int* yi = ty.idx.data() + static_cast<size_t>(oy) * S;
                const double* wy = ty.w.data() + static_cast<size_t>(oy) * S;
                for (int ox = 0; ox < node.attrs.out_w; ++ox) {
                    const int* xi = tx.idx.data() + static_cast<size_t>(ox) * S;
                    const double* wx = tx.w.data() + static_cast<size_t>(ox) * S;
                    const double* g = gout.data() + (static_cast<size_t>(oy) * node.attrs.out_w + ox) * C;
                    for (int j = 0; j < S; ++j) {
                        for (int i = 0; i < S; ++i) {
                            const double wji = wy[j] * wx[i];
                            double* dst = gx.data() + (static_cast<size_t>(yi[j]) * W + xi[i]) * C;
                            for (int c = 0; c < C; ++c) dst[c] += wji * g[c];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::UnfoldPatches: {
            const auto& xs = inshape(0);
            const int H = xs[0], W = xs[1], C = xs[2];
            const int p = node.attrs.patch, s = node.attrs.stride, pad = node.attrs.pad;
            const int Gh = detail::grid_size(H, p, s, pad, "unfold_patches");
            const int Gw = detail::grid_size(W, p, s, pad, "unfold_patches");
            const int D = p * p * C;
            auto& gx = gin(0);
            for (int gy = 0; gy < Gh; ++gy) {
                const int ty0 = gy * s - pad;
                for (int gx2 = 0; gx2 < Gw; ++gx2) {
                    const int tx0 = gx2 * s - pad;
                    const double* row = gout.data() + (static_cast<size_t>(gy) * Gw + gx2) * D;
                    for (int py = 0; py < p; ++py) {
                        const int y = ty0 + py;
                        if (y < 0 || y >= H) continue;
                        for (int px = 0; px < p; ++px) {
                            const int xx = tx0 + px;
                            if (xx < 0 || xx >= W) continue;
                            double* dst = gx.data() + (static_cast<size_t>(y) * W + xx) * C;
                            const double* src = row + (static_cast<size_t>(py) * p + px) * C;
                            for (int c = 0; c < C; ++c) dst[c] += src[c];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::FoldPatchesAvg: {
            const int p = node.attrs.patch, s = node.attrs.stride, pad = node.attrs.pad;
            const int Ho = node.attrs.out_h, Wo = node.attrs.out_w;
            const int D = inshape(0)[1];
            const int C = D / (p * p);
            const int Gh = detail::grid_size(Ho, p, s, pad, "fold_patches_overlap_average");
            const int Gw = detail::grid_size(Wo, p, s, pad, "fold_patches_overlap_average");
            std::vector<int> count(static_cast<size_t>(Ho) * Wo, 0);
            for (int gy = 0; gy < Gh; ++gy)
                for (int gx2 = 0; gx2 < Gw; ++gx2)
                    for (int py = 0; py < p; ++py) {
                        const int y = gy * s - pad + py;
                        if (y < 0 || y >= Ho) continue;
                        for (int px = 0; px < p; ++px) {
                            const int xx = gx2 * s - pad + px;
                            if (xx >= 0 && xx < Wo) ++count[static_cast<size_t>(y) * Wo + xx];
                        }
                    }
            auto& gv = gin(0);
            for (int gy = 0; gy < Gh; ++gy) {
                for (int gx2 = 0; gx2 < Gw; ++gx2) {
                    double* row = gv.data() + (static_cast<size_t>(gy) * Gw + gx2) * D;
                    for (int py = 0; py < p; ++py) {
                        const int y = gy * s - pad + py;
                        if (y < 0 || y >= Ho) continue;
                        for (int px = 0; px < p; ++px) {
                            const int xx = gx2 * s - pad + px;
                            if (xx < 0 || xx >= Wo) continue;
                            const int cnt = count[static_cast<size_t>(y) * Wo + xx];
                            const double* g = gout.data() + (static_cast<size_t>(y) * Wo + xx) * C;
                            double* dst = row + (static_cast<size_t>(py) * p + px) * C;
                            const double inv = 1.0 / cnt;
                            for (int c = 0; c < C; ++c) dst[c] += g[c] * inv;
                        }
                    }
                }
            }
            return;
        }

        case OpKind::Matmul: {
            const auto& as = inshape(0);
            const int M = as[0], K = as[1];
            const int N = node.shape[1];
            const auto& a = inval(0);
            const auto& b = inval(1);
            auto& ga = gin(0);
            auto& gb = gin(1);
            std::vector<double> tmp;
            if (node.attrs.transpose_b) {
                // C = A * B^T, B is [N,K]
                tmp.resize(static_cast<size_t>(M) * K);
                detail::mm_nn(gout.data(), b.data(), tmp.data(), M, N, K);
                for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                tmp.assign(static_cast<size_t>(N) * K, 0.0);
                detail::mm_tn(gout.data(), a.data(), tmp.data(), M, N, K);
                for (size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
            } else {
                tmp.resize(static_cast<size_t>(M) * K);
                detail::mm_nt(gout.data(), b.data(), tmp.data(), M, N, K);
                for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                tmp.assign(static_cast<size_t>(K) * N, 0.0);
                detail::mm_tn(a.data(), gout.data(), tmp.data(), M, K, N);
                for (size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
            }
            return;
        }

        case OpKind::SoftmaxRows: {
            const auto& y = *node.value;
            const int R = node.shape[0], D = node.shape[1];
            const double invt = 1.0 / node.attrs.temperature;
            auto& gx = gin(0);
            for (int r = 0; r < R; ++r) {
                const double* yr = y.data() + static_cast<size_t>(r) * D;
                const double* gr = gout.data() + static_cast<size_t>(r) * D;
                double dot = 0.0;
                for (int d = 0; d < D; ++d) dot += gr[d] * yr[d];
                double* gxr = gx.data() + static_cast<size_t>(r) * D;
                for (int d = 0; d < D; ++d) gxr[d] += yr[d] * (gr[d] - dot) * invt;
            }
            return;
        }

        case OpKind::L2NormalizeRows: {
            const auto& x = inval(0);
            const int R = node.shape[0], D = node.shape[1];
            auto& gx = gin(0);
            for (int r = 0; r < R; ++r) {
                const double* xr = x.data() + static_cast<size_t>(r) * D;
                const double* gr = gout.data() + static_cast<size_t>(r) * D;
                double s = 0.0, dot = 0.0;
                for (int d = 0; d < D; ++d) {
                    s += xr[d] * xr[d];
                    dot += gr[d] * xr[d];
                }
                const double n = std::sqrt(s + node.attrs.eps);
                const double inv = 1.0 / n;
                const double inv3 = dot / (n * n * n);
                double* gxr = gx.data() + static_cast<size_t>(r) * D;
                for (int d = 0; d < D; ++d) gxr[d] += gr[d] * inv - xr[d] * inv3;
            }
            return;
        }

        case OpKind::ConcatChannels: {
            const auto& as = inshape(0);
            const auto& bs = inshape(1);
            const int HW = as[0] * as[1];
            const int C1 = as[2], C2 = bs[2];
            auto& ga = gin(0);
            auto& gb = gin(1);
            for (int i = 0; i < HW; ++i) {
                const double* g = gout.data() + static_cast<size_t>(i) * (C1 + C2);
                double* pa = ga.data() + static_cast<size_t>(i) * C1;
                double* pb = gb.data() + static_cast<size_t>(i) * C2;
                for (int c = 0; c < C1; ++c) pa[c] += g[c];
                for (int c = 0; c < C2; ++c) pb[c] += g[C1 + c];
            }
            return;
        }
    }
    throw Error("backward: unknown op");
}

inline std::vector<Tensor> Tape::backward(const Tensor& root) const {
    if (root.tape != this || root.epoch != epoch_ || root.node < 0 ||
        root.node >= static_cast<int>(nodes_.size()))
        throw Error("backward: root does not belong to this record (cleared?)");
    if (root.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape));

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[static_cast<size_t>(root.node)] = {1.0};
    for (int i = root.node; i >= 0; --i) {
        const Node& n = nodes_[static_cast<size_t>(i)];
        auto& g = grads[static_cast<size_t>(i)];
        if (g.empty()) continue;
        backward_node(n, g, grads);
    }
    std::vector<Tensor> out(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (grads[i].empty())
            out[i] = Tensor::zeros(nodes_[i].shape);
        else
            out[i] = Tensor(nodes_[i].shape, make_buf(std::move(grads[i])));
    }
    return out;
}

/// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.
/// Independent of the reverse-mode path; used to validate backward().
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h) {
    if (h <= 0.0) throw Error("finite_diff_grad: step must be positive");
    std::vector<double> g(static_cast<size_t>(x.numel()));
    std::vector<double> work = x.values();
    for (size_t i = 0; i < work.size(); ++i) {
        const double orig = work[i];
        work[i] = orig + h;
        const double fp = f(Tensor(x.shape, make_buf(std::vector<double>(work))));
        work[i] = orig - h;
        const double fm = f(Tensor(x.shape, make_buf(std::vector<double>(work))));
        work[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor(x.shape, make_buf(std::move(g)));
}

}  // namespace refsra
