#pragma once
// Helpers shared by the test binaries: small random models and corpora.

#include <string>
#include <vector>

#include "spikelab/model.hpp"
#include "spikelab/rng.hpp"

namespace spikelab::testutil {

inline Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double sigma) {
    Tensor t = Tensor::zeros(shape);
    for (float& v : t.data) v = static_cast<float>(rng.normal() * sigma);
    return t;
}

inline Tensor ones(std::vector<int64_t> shape) {
    Tensor t = Tensor::zeros(shape);
    for (float& v : t.data) v = 1.0f;
    return t;
}

// Small well-behaved model with unit norm gains and gaussian weights.
inline Model make_random_model(const ModelConfig& cfg, uint64_t seed, double sigma = 0.05) {
    cfg.validate();
    Model m;
    m.config = cfg;
    uint64_t stream = 0;
    auto next = [&](std::vector<int64_t> shape, double s) {
        Rng r = Rng::fork(seed, stream++);
        return random_tensor(std::move(shape), r, s);
    };
    m.weights.embedding = next({cfg.vocab_size, cfg.d_model}, 1.0);
    m.weights.lm_head = next({cfg.d_model, cfg.vocab_size}, sigma);
    m.weights.final_norm = ones({cfg.d_model});
    m.weights.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lw : m.weights.layers) {
        lw.attn_norm = ones({cfg.d_model});
        lw.wq = next({cfg.d_model, cfg.d_model}, sigma);
        lw.wk = next({cfg.d_model, cfg.d_model}, sigma);
        lw.wv = next({cfg.d_model, cfg.d_model}, sigma);
        lw.wo = next({cfg.d_model, cfg.d_model}, sigma);
        lw.ffn_norm = ones({cfg.d_model});
        if (cfg.is_glu()) lw.w_gate = next({cfg.d_model, cfg.d_ff}, sigma);
        lw.w_up = next({cfg.d_model, cfg.d_ff}, sigma);
        lw.w_down = next({cfg.d_ff, cfg.d_model}, sigma);
    }
    return m;
}

inline ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_head = 8;
    cfg.d_ff = 32;
    cfg.vocab_size = 40;
    cfg.ffn_kind = FfnKind::glu_silu;
    cfg.bos_id = 0;
    cfg.max_positions = 128;
    return cfg;
}

inline std::vector<int32_t> random_tokens(int n, int vocab, Rng& rng) {
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (auto& v : t) v = static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(vocab)));
    return t;
}

inline float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) {
        const float d = std::fabs(a[i] - b[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace spikelab::testutil
