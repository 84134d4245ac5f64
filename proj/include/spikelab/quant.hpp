#pragma once
// Simulated-INT8 symmetric quantization. Integer range is [-127, 127]
// (-128 excluded for symmetry), scale = absmax / 127 with the all-zero
// fallback scale 1.0, rounding ties away from zero. Matmuls on quantized
// operands run exact integer arithmetic (INT32 accumulation, input width
// guarded) and dequantize once at the output. Scales are kept in double so
// quantize/dequantize identities cancel exactly.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "spikelab/module_id.hpp"
#include "spikelab/tensor.hpp"

namespace spikelab {

inline constexpr int32_t kQuantMax = 127;
inline constexpr int64_t kIntAccumWidthLimit = 1 << 15;  // keeps INT32 accumulation exact

enum class Granularity { per_tensor, per_token, per_channel };
enum class Timing { dynamic, static_scale };
enum class QuantTarget { activation, weight };
enum class LinearMode { fp, w8a8, w8a16 };

struct QuantSpec {
    QuantTarget target = QuantTarget::activation;
    Granularity granularity = Granularity::per_tensor;
    Timing timing = Timing::dynamic;
    int bits = 8;
    bool symmetric = true;
};

inline void validate_quant_spec(const QuantSpec& spec) {
    if (spec.bits != 8 || !spec.symmetric)
        throw std::invalid_argument("quant spec: only symmetric 8-bit supported");
    if (spec.target == QuantTarget::activation) {
        if (spec.granularity == Granularity::per_channel)
            throw std::invalid_argument("quant spec: per-channel activations unsupported");
        if (spec.timing == Timing::static_scale && spec.granularity != Granularity::per_tensor)
            throw std::invalid_argument("quant spec: static timing requires per-tensor granularity");
    } else {
        if (spec.granularity == Granularity::per_token)
            throw std::invalid_argument("quant spec: per-token weights unsupported");
        if (spec.timing == Timing::dynamic)
            throw std::invalid_argument("quant spec: weights are quantized once, timing must be static");
    }
}

inline double absmax_scale(float absmax) {
    const double scale = static_cast<double>(absmax) / static_cast<double>(kQuantMax);
    return scale == 0.0 ? 1.0 : scale;
}

// clamp(round(x / scale)) with ties away from zero; clamp only binds for
// static scales smaller than the live range. Rounding is done inline and
// branch-free: the libm round call costs more when quotients cluster below
// one, which would skew timing comparisons between scale granularities.
// Clamping first bounds the quotient, so the integer truncation is exact
// and q - t loses nothing.
inline int8_t quantize_value(float x, double scale) {
    const double q = static_cast<double>(x) / scale;
    if (q >= static_cast<double>(kQuantMax)) return static_cast<int8_t>(kQuantMax);
    if (q <= static_cast<double>(-kQuantMax)) return static_cast<int8_t>(-kQuantMax);
    const int64_t ti = static_cast<int64_t>(q);
    const double frac = q - static_cast<double>(ti);
    const int64_t bump = static_cast<int64_t>(frac >= 0.5) - static_cast<int64_t>(frac <= -0.5);
    return static_cast<int8_t>(ti + bump);
}

struct QuantizedTensor {
    std::vector<int8_t> q;
    std::vector<double> scales;  // size 1 (per_tensor) or rows (per_token)
    int64_t rows = 0, cols = 0;
    Granularity granularity = Granularity::per_tensor;

    double row_scale(int64_t i) const {
        return granularity == Granularity::per_token ? scales[static_cast<size_t>(i)] : scales[0];
    }
};

// rowmax[i] must be exactly the absolute maximum of row i. Producers that
// stream the tensor maintain the maxima as they write, leaving only the
// divide pass here; the per-tensor scale is the max over rows, which equals
// the flat tensor maximum exactly.
inline QuantizedTensor quantize_dynamic(const Tensor& x, Granularity gran, const float* rowmax) {
    if (x.rank() != 2) throw std::invalid_argument("quantize_dynamic: expects rank-2");
    if (gran == Granularity::per_channel)
        throw std::invalid_argument("quantize_dynamic: per-channel activations unsupported");
    QuantizedTensor out;
    out.rows = x.dim(0);
    out.cols = x.dim(1);
    out.granularity = gran;
    out.q.resize(static_cast<size_t>(out.rows * out.cols));
    // Bases and bounds live in locals: the int8 stores are char-type stores,
    // which would otherwise force the vector control words to reload on every
    // element.
    if (gran == Granularity::per_tensor) {
        float mx = 0.0f;
        for (int64_t i = 0; i < out.rows; ++i) mx = std::max(mx, rowmax[i]);
        out.scales = {absmax_scale(mx)};
        const double s = out.scales[0];
        const float* src = x.data.data();
        int8_t* dst = out.q.data();
        const size_t total = x.data.size();
        for (size_t i = 0; i < total; ++i) dst[i] = quantize_value(src[i], s);
    } else {
        out.scales.resize(static_cast<size_t>(out.rows));
        const int64_t cols = out.cols;
        for (int64_t i = 0; i < out.rows; ++i) {
            const double s = absmax_scale(rowmax[i]);
            out.scales[static_cast<size_t>(i)] = s;
            const float* src = x.data.data() + i * cols;
            int8_t* dst = out.q.data() + i * cols;
            for (int64_t j = 0; j < cols; ++j) dst[j] = quantize_value(src[j], s);
        }
    }
    return out;
}

inline QuantizedTensor quantize_dynamic(const Tensor& x, Granularity gran) {
    if (x.rank() != 2) throw std::invalid_argument("quantize_dynamic: expects rank-2");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    std::vector<float> rowmax(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i)
        rowmax[static_cast<size_t>(i)] = tensor_absmax(x.data.data() + i * cols, cols);
    return quantize_dynamic(x, gran, rowmax.data());
}

// Calibrated per-tensor scale; saturates instead of rescaling.
inline QuantizedTensor quantize_static(const Tensor& x, double scale) {
    if (x.rank() != 2) throw std::invalid_argument("quantize_static: expects rank-2");
    if (!(scale > 0.0)) throw std::invalid_argument("quantize_static: scale must be positive");
    QuantizedTensor out;
    out.rows = x.dim(0);
    out.cols = x.dim(1);
    out.granularity = Granularity::per_tensor;
    out.scales = {scale};
    out.q.resize(x.data.size());
    const float* src = x.data.data();
    int8_t* dst = out.q.data();
    const size_t total = x.data.size();
    for (size_t i = 0; i < total; ++i) dst[i] = quantize_value(src[i], scale);
    return out;
}

inline Tensor dequantize(const QuantizedTensor& t) {
    Tensor out = Tensor::zeros({t.rows, t.cols});
    for (int64_t i = 0; i < t.rows; ++i) {
        const double s = t.row_scale(i);
        for (int64_t j = 0; j < t.cols; ++j)
            out.at(i, j) = static_cast<float>(static_cast<double>(t.q[static_cast<size_t>(i * t.cols + j)]) * s);
    }
    return out;
}

struct QuantizedWeight {
    std::vector<int8_t> q;   // [din, dout], matches the float layout
    std::vector<int8_t> qt;  // [dout, din], contiguous per output column
    std::vector<double> scales;  // size dout (per_channel) or 1 (per_tensor)
    int64_t din = 0, dout = 0;
    Granularity granularity = Granularity::per_channel;

    double col_scale(int64_t j) const {
        return granularity == Granularity::per_channel ? scales[static_cast<size_t>(j)] : scales[0];
    }
};

// Weight layout is [din, dout]; per-channel means per output column.
inline QuantizedWeight quantize_weight(const Tensor& w, Granularity gran) {
    if (w.rank() != 2) throw std::invalid_argument("quantize_weight: expects rank-2");
    if (gran == Granularity::per_token)
        throw std::invalid_argument("quantize_weight: per-token weights unsupported");
    QuantizedWeight out;
    out.din = w.dim(0);
    out.dout = w.dim(1);
    out.granularity = gran;
    out.q.resize(w.data.size());
    if (gran == Granularity::per_tensor) {
        out.scales = {absmax_scale(tensor_absmax(w))};
    } else {
        out.scales.resize(static_cast<size_t>(out.dout));
        for (int64_t j = 0; j < out.dout; ++j) {
            float colmax = 0.0f;
            for (int64_t k = 0; k < out.din; ++k)
                colmax = std::max(colmax, std::fabs(w.at(k, j)));
            out.scales[static_cast<size_t>(j)] = absmax_scale(colmax);
        }
    }
    for (int64_t k = 0; k < out.din; ++k)
        for (int64_t j = 0; j < out.dout; ++j)
            out.q[static_cast<size_t>(k * out.dout + j)] = quantize_value(w.at(k, j), out.col_scale(j));
    out.qt.resize(out.q.size());
    for (int64_t k = 0; k < out.din; ++k)
        for (int64_t j = 0; j < out.dout; ++j)
            out.qt[static_cast<size_t>(j * out.din + k)] = out.q[static_cast<size_t>(k * out.dout + j)];
    return out;
}

inline Tensor dequantize_weight(const QuantizedWeight& w) {
    Tensor out = Tensor::zeros({w.din, w.dout});
    for (int64_t k = 0; k < w.din; ++k)
        for (int64_t j = 0; j < w.dout; ++j)
            out.at(k, j) = static_cast<float>(
                static_cast<double>(w.q[static_cast<size_t>(k * w.dout + j)]) * w.col_scale(j));
    return out;
}

// W8A8 core: INT32 accumulation over the shared inner dimension, one
// dequantization at the output. The per-tensor path hoists the combined
// activation*weight scale per column; per-token pays the extra row-scale
// multiply per element. Callers with a static activation scale can build
// the combined vector once per prepared module and pass it in; the
// two-argument form rebuilds it per call.
inline Tensor integer_matmul(const QuantizedTensor& x, const QuantizedWeight& w,
                             const double* combined) {
    if (x.granularity != Granularity::per_tensor)
        throw std::invalid_argument("integer_matmul: combined scales need a per-tensor activation");
    if (x.cols != w.din) throw std::invalid_argument("integer_matmul: inner dimensions disagree");
    if (x.cols > kIntAccumWidthLimit)
        throw std::invalid_argument("integer_matmul: inner dimension exceeds INT32 accumulation guard");
    Tensor out = Tensor::zeros({x.rows, w.dout});
    const int64_t k_dim = x.cols, n = w.dout;
    // The transposed copy keeps the inner loop contiguous in both operands;
    // accumulation order matches the plain layout, so results are identical.
    const int8_t* wt = w.qt.data();
    for (int64_t i = 0; i < x.rows; ++i) {
        const int8_t* xrow = x.q.data() + i * k_dim;
        float* orow = out.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const int8_t* wcol = wt + j * k_dim;
            int32_t acc = 0;
            for (int64_t p = 0; p < k_dim; ++p)
                acc += static_cast<int32_t>(xrow[p]) * static_cast<int32_t>(wcol[p]);
            orow[j] = static_cast<float>(static_cast<double>(acc) * combined[j]);
        }
    }
    return out;
}

inline std::vector<double> combined_scales(double x_scale, const QuantizedWeight& w) {
    std::vector<double> combined(static_cast<size_t>(w.dout));
    for (int64_t j = 0; j < w.dout; ++j)
        combined[static_cast<size_t>(j)] = x_scale * w.col_scale(j);
    return combined;
}

inline Tensor integer_matmul(const QuantizedTensor& x, const QuantizedWeight& w) {
    if (x.cols != w.din) throw std::invalid_argument("integer_matmul: inner dimensions disagree");
    if (x.cols > kIntAccumWidthLimit)
        throw std::invalid_argument("integer_matmul: inner dimension exceeds INT32 accumulation guard");
    if (x.granularity == Granularity::per_tensor)
        return integer_matmul(x, w, combined_scales(x.scales[0], w).data());
    Tensor out = Tensor::zeros({x.rows, w.dout});
    const int64_t k_dim = x.cols, n = w.dout;
    const int8_t* wt = w.qt.data();
    for (int64_t i = 0; i < x.rows; ++i) {
        const int8_t* xrow = x.q.data() + i * k_dim;
        const double srow = x.row_scale(i);
        float* orow = out.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const int8_t* wcol = wt + j * k_dim;
            int32_t acc = 0;
            for (int64_t p = 0; p < k_dim; ++p)
                acc += static_cast<int32_t>(xrow[p]) * static_cast<int32_t>(wcol[p]);
            orow[j] = static_cast<float>(static_cast<double>(acc) * srow * w.col_scale(j));
        }
    }
    return out;
}

// One-shot convenience used by tests and the slow path; the engine caches
// quantized weights in a prepared plan instead.
inline Tensor quantized_linear(const Tensor& x, const Tensor& w, LinearMode mode,
                               const QuantSpec& act_spec, double static_scale = 0.0) {
    switch (mode) {
        case LinearMode::fp:
            return matmul(x, w);
        case LinearMode::w8a16:
            // Weight-only: per-channel INT8 weights, full-precision activations.
            return matmul(x, dequantize_weight(quantize_weight(w, Granularity::per_channel)));
        case LinearMode::w8a8: {
            validate_quant_spec(act_spec);
            const QuantizedWeight qw = quantize_weight(w, Granularity::per_channel);
            if (act_spec.timing == Timing::static_scale) {
                if (!(static_scale > 0.0))
                    throw std::invalid_argument("quantized_linear: static timing without calibrated scale");
                return integer_matmul(quantize_static(x, static_scale), qw);
            }
            return integer_matmul(quantize_dynamic(x, act_spec.granularity), qw);
        }
    }
    throw std::invalid_argument("quantized_linear: bad mode");
}

// Attention BMMs under quantization: both operands per-tensor dynamic,
// integer product, single dequantization. _nt contracts a [M,D] with b [N,D].
inline Tensor bmm_quantized_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("bmm_quantized_nt: shape mismatch");
    if (a.dim(1) > kIntAccumWidthLimit)
        throw std::invalid_argument("bmm_quantized_nt: inner dimension exceeds guard");
    const QuantizedTensor qa = quantize_dynamic(a, Granularity::per_tensor);
    const QuantizedTensor qb = quantize_dynamic(b, Granularity::per_tensor);
    const int64_t m = a.dim(0), d = a.dim(1), n = b.dim(0);
    const double combined = qa.scales[0] * qb.scales[0];
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            int32_t acc = 0;
            for (int64_t p = 0; p < d; ++p)
                acc += static_cast<int32_t>(qa.q[static_cast<size_t>(i * d + p)]) *
                       static_cast<int32_t>(qb.q[static_cast<size_t>(j * d + p)]);
            out.at(i, j) = static_cast<float>(static_cast<double>(acc) * combined);
        }
    return out;
}

inline Tensor bmm_quantized_nn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("bmm_quantized_nn: shape mismatch");
    if (a.dim(1) > kIntAccumWidthLimit)
        throw std::invalid_argument("bmm_quantized_nn: inner dimension exceeds guard");
    const QuantizedTensor qa = quantize_dynamic(a, Granularity::per_tensor);
    const QuantizedTensor qb = quantize_dynamic(b, Granularity::per_tensor);
    const int64_t m = a.dim(0), k_dim = a.dim(1), n = b.dim(1);
    const double combined = qa.scales[0] * qb.scales[0];
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            int32_t acc = 0;
            for (int64_t p = 0; p < k_dim; ++p)
                acc += static_cast<int32_t>(qa.q[static_cast<size_t>(i * k_dim + p)]) *
                       static_cast<int32_t>(qb.q[static_cast<size_t>(p * n + j)]);
            out.at(i, j) = static_cast<float>(static_cast<double>(acc) * combined);
        }
    return out;
}

// How one forward pass quantizes each linear group. Mode overrides carry
// QFeM exclusions (w8a16, never fp); static scales come from calibration.
struct ExecutionPlan {
    LinearMode default_mode = LinearMode::fp;
    QuantSpec act_spec{QuantTarget::activation, Granularity::per_tensor, Timing::dynamic};
    QuantSpec weight_spec{QuantTarget::weight, Granularity::per_channel, Timing::static_scale};
    bool bmm_quant = false;
    std::map<ModuleId, LinearMode> mode_overrides;
    std::map<ModuleId, double> static_scales;

    static ExecutionPlan fp() { return ExecutionPlan{}; }

    LinearMode mode_for(const ModuleId& id) const {
        const auto it = mode_overrides.find(id);
        return it == mode_overrides.end() ? default_mode : it->second;
    }

    double static_scale_for(const ModuleId& id) const {
        const auto it = static_scales.find(id);
        if (it == static_scales.end())
            throw std::invalid_argument("execution plan: static timing without calibrated scale for " +
                                        module_id_name(id));
        return it->second;
    }

    void validate() const {
        validate_quant_spec(act_spec);
        validate_quant_spec(weight_spec);
        if (act_spec.target != QuantTarget::activation || weight_spec.target != QuantTarget::weight)
            throw std::invalid_argument("execution plan: spec targets swapped");
        for (const auto& [id, mode] : mode_overrides)
            if (mode == LinearMode::fp && default_mode != LinearMode::fp)
                throw std::invalid_argument("execution plan: excluded modules run w8a16, not fp");
    }
};

}  // namespace spikelab
