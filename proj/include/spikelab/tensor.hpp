#pragma once
// Dense row-major float tensors plus the kernel set used by the inference
// engine: matmul, rmsnorm, silu/gelu, hadamard, causal softmax, rotary
// embedding. Storage is float32; accumulation runs in double with a fixed
// loop order so every forward is reproducible bit-for-bit.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace spikelab {

struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::initializer_list<int64_t> dims, std::vector<float> values)
        : shape(dims), data(std::move(values)) {
        if (numel() != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape does not match value count");
    }

    static Tensor zeros(std::initializer_list<int64_t> dims) {
        Tensor t;
        t.shape.assign(dims);
        t.data.assign(static_cast<size_t>(t.numel()), 0.0f);
        return t;
    }
    static Tensor zeros(const std::vector<int64_t>& dims) {
        Tensor t;
        t.shape = dims;
        t.data.assign(static_cast<size_t>(t.numel()), 0.0f);
        return t;
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int64_t i) const { return shape.at(static_cast<size_t>(i)); }

    float& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// Four independent accumulators break the serial max dependency chain; the
// result is exactly the max either way.
inline float tensor_absmax(const float* begin, int64_t n) {
    float m0 = 0.0f, m1 = 0.0f, m2 = 0.0f, m3 = 0.0f;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        m0 = std::max(m0, std::fabs(begin[i]));
        m1 = std::max(m1, std::fabs(begin[i + 1]));
        m2 = std::max(m2, std::fabs(begin[i + 2]));
        m3 = std::max(m3, std::fabs(begin[i + 3]));
    }
    float m = std::max(std::max(m0, m1), std::max(m2, m3));
    for (; i < n; ++i) m = std::max(m, std::fabs(begin[i]));
    return m;
}

// [M,K] x [K,N] -> [M,N]; double accumulator, k ascending.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 tensors");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                    std::to_string(a.dim(1)) + " vs " + std::to_string(b.dim(0)));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a.data.data() + i * k;
        float* orow = out.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p)
                acc += static_cast<double>(arow[p]) * static_cast<double>(b.data[static_cast<size_t>(p * n + j)]);
            orow[j] = static_cast<float>(acc);
        }
    }
    return out;
}

// Row-wise x / sqrt(mean(x^2) + eps) * gamma over the trailing dimension.
// rowmax, when given, receives each output row's absolute maximum, taken
// while the row is still cache-hot so consumers can skip their own pass.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gamma, float eps,
                      std::vector<float>* rowmax = nullptr) {
    if (x.rank() != 2) throw std::invalid_argument("rmsnorm: expects rank-2 input");
    const int64_t rows = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d) throw std::invalid_argument("rmsnorm: gamma length mismatch");
    Tensor out = Tensor::zeros({rows, d});
    if (rowmax) rowmax->resize(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        double sumsq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double v = x.at(i, j);
            sumsq += v * v;
        }
        const double inv = 1.0 / std::sqrt(sumsq / static_cast<double>(d) + static_cast<double>(eps));
        for (int64_t j = 0; j < d; ++j)
            out.at(i, j) = static_cast<float>(static_cast<double>(x.at(i, j)) * inv *
                                              static_cast<double>(gamma.data[static_cast<size_t>(j)]));
        if (rowmax)
            (*rowmax)[static_cast<size_t>(i)] = tensor_absmax(out.data.data() + i * d, d);
    }
    return out;
}

inline double silu(double x) {
    // x * sigmoid(x), branch keeps exp() off the overflowing side.
    if (x >= 0.0) return x / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return x * e / (1.0 + e);
}

// Exact-erf gelu, not the tanh approximation.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

enum class Activation { silu, gelu };

[[nodiscard]] inline Tensor apply_activation(const Tensor& x, Activation act) {
    Tensor out = x;
    for (float& v : out.data)
        v = static_cast<float>(act == Activation::silu ? silu(v) : gelu(v));
    return out;
}

// rowmax (rank-2 inputs only) receives each product row's absolute maximum,
// taken row by row while the row is still cache-hot.
inline Tensor hadamard(const Tensor& a, const Tensor& b, std::vector<float>* rowmax = nullptr) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    Tensor out = a;
    if (!rowmax) {
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] *= b.data[i];
        return out;
    }
    if (out.rank() != 2) throw std::invalid_argument("hadamard: rowmax needs rank-2");
    const int64_t rows = out.dim(0), cols = out.dim(1);
    rowmax->resize(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        float* orow = out.data.data() + i * cols;
        const float* brow = b.data.data() + i * cols;
        for (int64_t j = 0; j < cols; ++j) orow[j] *= brow[j];
        (*rowmax)[static_cast<size_t>(i)] = tensor_absmax(orow, cols);
    }
    return out;
}

// In-place masked softmax over rows of [T,S]. Row t sees columns j <= t + offset;
// offset is the key-position lead of column 0's row (cache length in decode).
inline void causal_softmax_rows(Tensor& scores, int64_t offset) {
    if (scores.rank() != 2) throw std::invalid_argument("causal_softmax_rows: expects rank-2");
    if (offset < 0) throw std::invalid_argument("causal_softmax_rows: negative offset");
    const int64_t t_rows = scores.dim(0), s_cols = scores.dim(1);
    for (int64_t t = 0; t < t_rows; ++t) {
        const int64_t visible = std::min<int64_t>(s_cols, t + offset + 1);
        if (visible <= 0) throw std::invalid_argument("causal_softmax_rows: fully masked row");
        double maxv = -1e300;
        for (int64_t j = 0; j < visible; ++j) maxv = std::max(maxv, static_cast<double>(scores.at(t, j)));
        double sum = 0.0;
        std::vector<double> e(static_cast<size_t>(visible));
        for (int64_t j = 0; j < visible; ++j) {
            e[static_cast<size_t>(j)] = std::exp(static_cast<double>(scores.at(t, j)) - maxv);
            sum += e[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < visible; ++j)
            scores.at(t, j) = static_cast<float>(e[static_cast<size_t>(j)] / sum);
        for (int64_t j = visible; j < s_cols; ++j) scores.at(t, j) = 0.0f;
    }
}

// Rotary embedding on [T, H, Dh], consecutive pairs (2i, 2i+1) rotated by
// pos * theta^(-2i/Dh). positions supplies the absolute position per row.
inline void rope_apply(Tensor& x, const std::vector<int64_t>& positions, double theta) {
    if (x.rank() != 3) throw std::invalid_argument("rope_apply: expects [T,H,Dh]");
    const int64_t t_rows = x.dim(0), heads = x.dim(1), dh = x.dim(2);
    if (dh % 2 != 0) throw std::invalid_argument("rope_apply: head dim must be even");
    if (static_cast<int64_t>(positions.size()) != t_rows)
        throw std::invalid_argument("rope_apply: positions length mismatch");
    for (int64_t t = 0; t < t_rows; ++t) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (int64_t h = 0; h < heads; ++h) {
            float* vec = x.data.data() + (t * heads + h) * dh;
            for (int64_t i = 0; i < dh / 2; ++i) {
                const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double angle = pos * freq;
                const double c = std::cos(angle), s = std::sin(angle);
                const double a = vec[2 * i], b = vec[2 * i + 1];
                vec[2 * i] = static_cast<float>(a * c - b * s);
                vec[2 * i + 1] = static_cast<float>(a * s + b * c);
            }
        }
    }
}

inline float tensor_absmax(const Tensor& t) { return tensor_absmax(t.data.data(), t.numel()); }

// Per-row absmax of a rank-2 tensor.
inline std::vector<float> row_absmax(const Tensor& t) {
    if (t.rank() != 2) throw std::invalid_argument("row_absmax: expects rank-2");
    std::vector<float> out(static_cast<size_t>(t.dim(0)));
    for (int64_t i = 0; i < t.dim(0); ++i)
        out[static_cast<size_t>(i)] = tensor_absmax(t.data.data() + i * t.dim(1), t.dim(1));
    return out;
}

}  // namespace spikelab
