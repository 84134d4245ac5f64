#pragma once
// Pre-norm decoder-only transformer with gated FFN variants, KV cache and
// per-module activation taps. The forward pass runs each linear module either
// in full precision, weight+activation int8, or weight-only int8 according to
// an ExecutionPlan, and can record the tap tensors seen by each module.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spikelab/module_id.hpp"
#include "spikelab/quant.hpp"
#include "spikelab/tensor.hpp"

namespace spikelab {

enum class FfnKind { glu_silu, glu_gelu, plain };
enum class NormKind { rmsnorm };

inline const char* ffn_kind_name(FfnKind k) {
    switch (k) {
        case FfnKind::glu_silu: return "glu_silu";
        case FfnKind::glu_gelu: return "glu_gelu";
        case FfnKind::plain: return "plain";
    }
    throw std::logic_error("bad FfnKind");
}

inline FfnKind parse_ffn_kind(const std::string& s) {
    if (s == "glu_silu") return FfnKind::glu_silu;
    if (s == "glu_gelu") return FfnKind::glu_gelu;
    if (s == "plain") return FfnKind::plain;
    throw std::runtime_error("unknown ffn kind: " + s);
}

struct ModelConfig {
    int32_t n_layers = 0;
    int32_t d_model = 0;
    int32_t n_heads = 0;
    int32_t d_head = 0;
    int32_t d_ff = 0;
    int32_t vocab_size = 0;
    FfnKind ffn_kind = FfnKind::glu_silu;
    NormKind norm_kind = NormKind::rmsnorm;
    float norm_eps = 1e-5f;
    double rope_theta = 10000.0;
    int32_t bos_id = 0;
    int32_t max_positions = 4096;

    bool is_glu() const { return ffn_kind != FfnKind::plain; }

    Activation activation() const {
        return ffn_kind == FfnKind::glu_gelu ? Activation::gelu : Activation::silu;
    }

    int32_t n_modules() const { return n_layers * kModuleKindsPerLayer; }

    void validate() const {
        if (n_layers < 1) throw std::runtime_error("config: n_layers must be >= 1");
        if (d_model < 1 || d_ff < 1) throw std::runtime_error("config: bad dims");
        if (n_heads < 1 || d_head < 1 || n_heads * d_head != d_model)
            throw std::runtime_error("config: n_heads * d_head must equal d_model");
        if (d_head % 2 != 0) throw std::runtime_error("config: d_head must be even for rope");
        if (vocab_size < 2) throw std::runtime_error("config: vocab_size must be >= 2");
        if (bos_id < 0 || bos_id >= vocab_size) throw std::runtime_error("config: bos_id out of range");
        if (max_positions < 1) throw std::runtime_error("config: max_positions must be >= 1");
        if (!(norm_eps > 0.0f)) throw std::runtime_error("config: norm_eps must be positive");
        if (!(rope_theta > 0.0)) throw std::runtime_error("config: rope_theta must be positive");
    }
};

// Spike wiring metadata carried by synthesized checkpoints. Purely
// descriptive at inference time; the weights already encode the behavior.
enum class SpikeMode { none, first_occurrence, static_spike };

inline const char* spike_mode_name(SpikeMode m) {
    switch (m) {
        case SpikeMode::none: return "none";
        case SpikeMode::first_occurrence: return "first_occurrence";
        case SpikeMode::static_spike: return "static";
    }
    throw std::logic_error("bad SpikeMode");
}

inline SpikeMode parse_spike_mode(const std::string& s) {
    if (s == "none") return SpikeMode::none;
    if (s == "first_occurrence") return SpikeMode::first_occurrence;
    if (s == "static") return SpikeMode::static_spike;
    throw std::runtime_error("unknown spike mode: " + s);
}

struct SpikeConfig {
    SpikeMode mode = SpikeMode::none;
    int32_t spike_token = 0;
    int32_t spike_layer = 0;
    int32_t marker_dim = 0;
    double target_ratio = 0.0;
};

// First-order successor grammar used to sample corpora that match the
// checkpoint. alphabet[i] is followed by successor[i] with prob 1 - noise_eps.
struct GrammarConfig {
    std::vector<int32_t> alphabet;
    std::vector<int32_t> successor;
    int32_t spike_successor = 0;
    double noise_eps = 0.1;
};

struct LayerWeights {
    Tensor attn_norm;  // [d_model]
    Tensor wq, wk, wv; // [d_model, d_model]
    Tensor wo;         // [d_model, d_model]
    Tensor ffn_norm;   // [d_model]
    Tensor w_gate;     // [d_model, d_ff], empty for plain FFN
    Tensor w_up;       // [d_model, d_ff]
    Tensor w_down;     // [d_ff, d_model]
};

struct ModelWeights {
    Tensor embedding;  // [vocab, d_model]
    Tensor lm_head;    // [d_model, vocab]
    Tensor final_norm; // [d_model]
    std::vector<LayerWeights> layers;
};

struct Model {
    ModelConfig config;
    ModelWeights weights;
    std::optional<SpikeConfig> spike;
    std::optional<GrammarConfig> grammar;
    std::string fingerprint;  // of the serialized container, set by load/save

    std::vector<ModuleId> module_ids() const {
        std::vector<ModuleId> ids;
        ids.reserve(static_cast<size_t>(config.n_modules()));
        for (int32_t l = 0; l < config.n_layers; ++l)
            for (int32_t k = 0; k < kModuleKindsPerLayer; ++k)
                ids.push_back({l, static_cast<ModuleKind>(k)});
        return ids;
    }
};

// Per-layer cache of rotated keys and values, layout [len, n_heads, d_head].
struct KVCache {
    int64_t cached_len = 0;
    std::vector<std::vector<float>> keys;
    std::vector<std::vector<float>> values;

    KVCache() = default;
    explicit KVCache(int32_t n_layers)
        : keys(static_cast<size_t>(n_layers)), values(static_cast<size_t>(n_layers)) {}

    KVCache clone() const { return *this; }
};

struct TraceRequest {
    bool logits = true;
    bool tap_scales = false;   // per-token absmax of each module input
    bool taps_full = false;    // full tap tensors (memory heavy)
    bool hidden_absmax = false;
    bool last_hidden = false;  // residual stream after the last block
};

struct ForwardTrace {
    Tensor logits;  // [T, vocab] when requested
    // Indexed by module_index(); inner vectors have one entry per new token.
    std::vector<std::vector<float>> tap_scales;
    std::vector<Tensor> taps;
    // Indexed [layer][new token], absmax of the residual stream after the block.
    std::vector<std::vector<float>> hidden_absmax;
    Tensor last_hidden;  // [T, d_model] when requested
};

// Weights pre-processed for one execution plan. w8a8 modules hold int8
// weights; w8a16 modules hold the dequantized per-channel approximation so
// the forward pass runs a plain float matmul against degraded weights.
struct PreparedModule {
    LinearMode mode = LinearMode::fp;
    std::vector<QuantizedWeight> qw;
    std::vector<Tensor> w16;
    // Combined dequant scales per weight, filled only for static-timing w8a8
    // modules whose calibrated scale is fixed at prepare time.
    std::vector<std::vector<double>> combined;
};

struct PreparedPlan {
    ExecutionPlan plan;
    std::vector<PreparedModule> modules;  // by module_index()
    // Module groups whose input gets dynamically quantized; producers track
    // row maxima for these so the quantizer skips its own scale pass.
    std::vector<uint8_t> dyn_act;

    static PreparedPlan prepare(const Model& m, const ExecutionPlan& plan) {
        plan.validate();
        PreparedPlan pp;
        pp.plan = plan;
        pp.modules.resize(static_cast<size_t>(m.config.n_modules()));
        pp.dyn_act.assign(static_cast<size_t>(m.config.n_modules()), 0);
        for (const ModuleId& id : m.module_ids()) {
            PreparedModule& pm = pp.modules[module_index(id)];
            pm.mode = plan.mode_for(id);
            pp.dyn_act[module_index(id)] =
                pm.mode == LinearMode::w8a8 && plan.act_spec.timing == Timing::dynamic;
            if (pm.mode == LinearMode::fp) continue;
            const LayerWeights& lw = m.weights.layers[static_cast<size_t>(id.layer)];
            std::vector<const Tensor*> ws;
            switch (id.kind) {
                case ModuleKind::qkv: ws = {&lw.wq, &lw.wk, &lw.wv}; break;
                case ModuleKind::out: ws = {&lw.wo}; break;
                case ModuleKind::gate_up:
                    if (m.config.is_glu()) ws = {&lw.w_gate, &lw.w_up};
                    else ws = {&lw.w_up};
                    break;
                case ModuleKind::down: ws = {&lw.w_down}; break;
            }
            for (const Tensor* w : ws) {
                QuantizedWeight q = quantize_weight(*w, plan.weight_spec.granularity);
                if (pm.mode == LinearMode::w8a16) pm.w16.push_back(dequantize_weight(q));
                else pm.qw.push_back(std::move(q));
            }
            // A missing static scale still surfaces at forward time through
            // static_scale_for, so only precompute when the plan has one.
            if (pm.mode == LinearMode::w8a8 && plan.act_spec.timing == Timing::static_scale) {
                const auto it = plan.static_scales.find(id);
                if (it != plan.static_scales.end())
                    for (const QuantizedWeight& q : pm.qw)
                        pm.combined.push_back(combined_scales(it->second, q));
            }
        }
        return pp;
    }

    static PreparedPlan prepare_fp(const Model& m) {
        return prepare(m, ExecutionPlan{});
    }
};

namespace detail {

// Slice head h out of a [T, n_heads * d_head] buffer into [T, d_head].
inline Tensor slice_head(const float* data, int64_t rows, int32_t n_heads, int32_t d_head,
                         int32_t h) {
    Tensor out = Tensor::zeros({rows, d_head});
    const int64_t stride = static_cast<int64_t>(n_heads) * d_head;
    for (int64_t t = 0; t < rows; ++t) {
        const float* src = data + t * stride + static_cast<int64_t>(h) * d_head;
        std::copy(src, src + d_head, out.data.begin() + t * d_head);
    }
    return out;
}

inline Tensor bmm_fp_nt(const Tensor& a, const Tensor& b) {
    // a [M, D], b [N, D] -> [M, N]
    const int64_t M = a.dim(0), D = a.dim(1), N = b.dim(0);
    Tensor out = Tensor::zeros({M, N});
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < D; ++k)
                acc += static_cast<double>(a.data[i * D + k]) * b.data[j * D + k];
            out.data[i * N + j] = static_cast<float>(acc);
        }
    return out;
}

}  // namespace detail

// Runs the model over new tokens, optionally continuing from and appending to
// a KV cache. cache may be nullptr for a plain full-sequence forward.
inline ForwardTrace forward(const Model& m, const std::vector<int32_t>& tokens, KVCache* cache,
                            const PreparedPlan& pp, const TraceRequest& req = {}) {
    const ModelConfig& cfg = m.config;
    cfg.validate();
    if (tokens.empty()) throw std::runtime_error("forward: empty token sequence");
    for (int32_t t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw std::runtime_error("forward: token id out of range");
    if (pp.modules.size() != static_cast<size_t>(cfg.n_modules()))
        throw std::runtime_error("forward: prepared plan does not match model");
    if (cache && cache->keys.size() != static_cast<size_t>(cfg.n_layers))
        throw std::runtime_error("forward: cache layer count mismatch");

    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t S0 = cache ? cache->cached_len : 0;
    const int64_t S = S0 + T;
    if (S > cfg.max_positions) throw std::runtime_error("forward: sequence exceeds max_positions");
    const int32_t H = cfg.n_heads, Dh = cfg.d_head, D = cfg.d_model;

    ForwardTrace trace;
    if (req.tap_scales) trace.tap_scales.resize(static_cast<size_t>(cfg.n_modules()));
    if (req.taps_full) trace.taps.resize(static_cast<size_t>(cfg.n_modules()));
    if (req.hidden_absmax) trace.hidden_absmax.resize(static_cast<size_t>(cfg.n_layers));

    std::vector<int64_t> positions(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i) positions[static_cast<size_t>(i)] = S0 + i;

    Tensor x = Tensor::zeros({T, D});
    for (int64_t t = 0; t < T; ++t) {
        const float* row = m.weights.embedding.data.data() +
                           static_cast<int64_t>(tokens[static_cast<size_t>(t)]) * D;
        std::copy(row, row + D, x.data.begin() + t * D);
    }

    auto record_tap = [&](const ModuleId& id, const Tensor& tap) {
        const size_t idx = module_index(id);
        if (req.tap_scales) trace.tap_scales[idx] = row_absmax(tap);
        if (req.taps_full) trace.taps[idx] = tap;
    };

    // Runs every weight of one module group against a shared activation,
    // quantizing the activation at most once. rowmax, when the producer
    // supplied it, carries the activation's per-row absolute maxima.
    auto run_group = [&](const ModuleId& id, const Tensor& act,
                         const std::vector<const Tensor*>& ws,
                         const std::vector<float>* rowmax = nullptr) -> std::vector<Tensor> {
        const PreparedModule& pm = pp.modules[module_index(id)];
        std::vector<Tensor> outs;
        outs.reserve(ws.size());
        switch (pm.mode) {
            case LinearMode::fp:
                for (const Tensor* w : ws) outs.push_back(matmul(act, *w));
                break;
            case LinearMode::w8a16:
                for (const Tensor& w : pm.w16) outs.push_back(matmul(act, w));
                break;
            case LinearMode::w8a8: {
                const QuantSpec& as = pp.plan.act_spec;
                QuantizedTensor qa;
                if (as.timing == Timing::static_scale)
                    qa = quantize_static(act, pp.plan.static_scale_for(id));
                else if (rowmax)
                    qa = quantize_dynamic(act, as.granularity, rowmax->data());
                else
                    qa = quantize_dynamic(act, as.granularity);
                for (size_t wi = 0; wi < pm.qw.size(); ++wi)
                    outs.push_back(wi < pm.combined.size()
                                       ? integer_matmul(qa, pm.qw[wi], pm.combined[wi].data())
                                       : integer_matmul(qa, pm.qw[wi]));
                break;
            }
        }
        return outs;
    };

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));

    // Reused across groups and layers; producers fill them on demand.
    std::vector<float> rowmax, rowmax_down;

    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = m.weights.layers[static_cast<size_t>(l)];

        const ModuleId id_qkv{l, ModuleKind::qkv};
        const bool dyn_qkv = pp.dyn_act[module_index(id_qkv)] != 0;
        Tensor xn = rmsnorm(x, lw.attn_norm, cfg.norm_eps, dyn_qkv ? &rowmax : nullptr);
        record_tap(id_qkv, xn);
        std::vector<Tensor> qkv =
            run_group(id_qkv, xn, {&lw.wq, &lw.wk, &lw.wv}, dyn_qkv ? &rowmax : nullptr);
        Tensor& q = qkv[0];
        Tensor& k = qkv[1];
        Tensor& v = qkv[2];

        Tensor q3 = q;
        q3.shape = {T, H, Dh};
        Tensor k3 = k;
        k3.shape = {T, H, Dh};
        rope_apply(q3, positions, cfg.rope_theta);
        rope_apply(k3, positions, cfg.rope_theta);

        // Full key/value history for this layer: cached entries then new ones.
        std::vector<float> kfull, vfull;
        const int64_t elems_new = T * H * Dh;
        kfull.reserve(static_cast<size_t>(S * H * Dh));
        vfull.reserve(static_cast<size_t>(S * H * Dh));
        if (cache) {
            const auto& ck = cache->keys[static_cast<size_t>(l)];
            const auto& cv = cache->values[static_cast<size_t>(l)];
            kfull.insert(kfull.end(), ck.begin(), ck.end());
            vfull.insert(vfull.end(), cv.begin(), cv.end());
        }
        kfull.insert(kfull.end(), k3.data.begin(), k3.data.begin() + elems_new);
        vfull.insert(vfull.end(), v.data.begin(), v.data.begin() + elems_new);
        if (cache) {
            cache->keys[static_cast<size_t>(l)] = kfull;
            cache->values[static_cast<size_t>(l)] = vfull;
        }

        const ModuleId id_out{l, ModuleKind::out};
        const bool dyn_out = pp.dyn_act[module_index(id_out)] != 0;
        if (dyn_out) rowmax.assign(static_cast<size_t>(T), 0.0f);

        Tensor attn_cat = Tensor::zeros({T, D});
        for (int32_t h = 0; h < H; ++h) {
            Tensor qh = detail::slice_head(q3.data.data(), T, H, Dh, h);
            Tensor kh = detail::slice_head(kfull.data(), S, H, Dh, h);
            Tensor vh = detail::slice_head(vfull.data(), S, H, Dh, h);

            Tensor scores = pp.plan.bmm_quant ? bmm_quantized_nt(qh, kh)
                                              : detail::bmm_fp_nt(qh, kh);
            for (float& s : scores.data) s = static_cast<float>(s * inv_sqrt_dh);
            causal_softmax_rows(scores, S0);
            Tensor oh = pp.plan.bmm_quant ? bmm_quantized_nn(scores, vh) : matmul(scores, vh);
            // Row maxima accumulate per head chunk; the max over chunks is
            // exactly the assembled row's max.
            for (int64_t t = 0; t < T; ++t) {
                std::copy(oh.data.begin() + t * Dh, oh.data.begin() + (t + 1) * Dh,
                          attn_cat.data.begin() + t * D + static_cast<int64_t>(h) * Dh);
                if (dyn_out)
                    rowmax[static_cast<size_t>(t)] =
                        std::max(rowmax[static_cast<size_t>(t)],
                                 tensor_absmax(oh.data.data() + t * Dh, Dh));
            }
        }

        record_tap(id_out, attn_cat);
        Tensor proj = run_group(id_out, attn_cat, {&lw.wo}, dyn_out ? &rowmax : nullptr)[0];
        for (int64_t i = 0; i < T * D; ++i) x.data[i] += proj.data[i];

        const ModuleId id_gu{l, ModuleKind::gate_up};
        const bool dyn_gu = pp.dyn_act[module_index(id_gu)] != 0;
        Tensor xn2 = rmsnorm(x, lw.ffn_norm, cfg.norm_eps, dyn_gu ? &rowmax : nullptr);
        record_tap(id_gu, xn2);

        const ModuleId id_down{l, ModuleKind::down};
        const bool dyn_down = pp.dyn_act[module_index(id_down)] != 0;
        Tensor hact;
        if (cfg.is_glu()) {
            std::vector<Tensor> gu =
                run_group(id_gu, xn2, {&lw.w_gate, &lw.w_up}, dyn_gu ? &rowmax : nullptr);
            hact = hadamard(apply_activation(gu[0], cfg.activation()), gu[1],
                            dyn_down ? &rowmax_down : nullptr);
        } else {
            hact = apply_activation(run_group(id_gu, xn2, {&lw.w_up}, dyn_gu ? &rowmax : nullptr)[0],
                                    cfg.activation());
            if (dyn_down) {
                rowmax_down.resize(static_cast<size_t>(T));
                for (int64_t t = 0; t < T; ++t)
                    rowmax_down[static_cast<size_t>(t)] =
                        tensor_absmax(hact.data.data() + t * hact.dim(1), hact.dim(1));
            }
        }
        record_tap(id_down, hact);
        Tensor down = run_group(id_down, hact, {&lw.w_down}, dyn_down ? &rowmax_down : nullptr)[0];
        for (int64_t i = 0; i < T * D; ++i) x.data[i] += down.data[i];

        if (req.hidden_absmax) {
            std::vector<float> hm = row_absmax(x);
            trace.hidden_absmax[static_cast<size_t>(l)] = std::move(hm);
        }
    }

    if (cache) cache->cached_len = S;
    if (req.last_hidden) trace.last_hidden = x;
    if (req.logits) {
        Tensor xf = rmsnorm(x, m.weights.final_norm, cfg.norm_eps);
        trace.logits = matmul(xf, m.weights.lm_head);
    }
    return trace;
}

inline ForwardTrace forward_fp(const Model& m, const std::vector<int32_t>& tokens,
                               KVCache* cache = nullptr, const TraceRequest& req = {}) {
    return forward(m, tokens, cache, PreparedPlan::prepare_fp(m), req);
}

// Fills a fresh cache by running the tokens through the model in full
// precision. Used for prefix caching where the prefix must stay undamaged.
inline KVCache build_kv_cache(const Model& m, const std::vector<int32_t>& tokens) {
    KVCache cache(m.config.n_layers);
    TraceRequest req;
    req.logits = false;
    forward_fp(m, tokens, &cache, req);
    return cache;
}

}  // namespace spikelab
