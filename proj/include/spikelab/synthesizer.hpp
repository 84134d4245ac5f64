#pragma once
// Builds small transformer checkpoints whose down-projection input exhibits a
// controlled activation outlier at the first occurrence of a designated
// token, together with matched sample corpora. Outlier magnitude, layer and
// trigger token are configurable; every other statistic of the network is
// kept deliberately tame so the outlier is the only irregularity.
//
// Mechanism: token embeddings are orthonormal codes. One attention head, one
// layer before the target, separates first from repeat occurrences of the
// trigger token: a bos-anchored attention pattern yields occurrence marker
// 2j/(j+1) for the j-th occurrence, written to a reserved residual dimension.
// At the target layer a gated FFN unit reads trigger alignment minus marker,
// so it fires only on first occurrences; its up-projection gain is calibrated
// by probe forwards until the unit's output exceeds the layer median by the
// requested ratio. Bigram units in the same layer carry the actual language
// signal (a noisy successor grammar over lowercase letters), which is what
// coarse quantization then destroys.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spikelab/calibration.hpp"
#include "spikelab/model.hpp"
#include "spikelab/rng.hpp"

namespace spikelab {

struct ToyTokenizer {
    static constexpr int32_t kVocabSize = 257;  // bytes 0..255 plus bos
    static constexpr int32_t kBosId = 256;

    static std::vector<int32_t> encode(const std::string& text, bool add_bos = true) {
        std::vector<int32_t> ids;
        ids.reserve(text.size() + 1);
        if (add_bos) ids.push_back(kBosId);
        for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
        return ids;
    }

    static std::string decode(const std::vector<int32_t>& ids) {
        std::string out;
        for (int32_t id : ids) {
            if (id == kBosId) continue;
            if (id < 0 || id > 255) throw std::runtime_error("decode: id out of byte range");
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
        return out;
    }
};

struct SynthConfig {
    uint64_t seed = 1;
    int32_t n_layers = 4;
    int32_t d_model = 64;
    int32_t n_heads = 4;
    int32_t d_ff = 128;
    FfnKind ffn_kind = FfnKind::glu_silu;
    SpikeMode spike_mode = SpikeMode::first_occurrence;
    int32_t spike_layer = 2;
    int32_t spike_token = 39;  // '\''
    double target_ratio = 500.0;
    int32_t max_positions = 4096;

    void validate() const {
        if (d_model < 44) throw std::runtime_error("synth: d_model must be >= 44");
        if (n_heads < 2) throw std::runtime_error("synth: n_heads must be >= 2");
        if (d_model % n_heads != 0) throw std::runtime_error("synth: n_heads must divide d_model");
        const int32_t dh = d_model / n_heads;
        if (dh < 8 || dh % 4 != 0)
            throw std::runtime_error("synth: d_head must be >= 8 and a multiple of 4");
        if (d_ff < 32) throw std::runtime_error("synth: d_ff must be >= 32");
        if (n_layers < 2) throw std::runtime_error("synth: n_layers must be >= 2");
        if (spike_layer < 1 || spike_layer >= n_layers)
            throw std::runtime_error("synth: spike_layer must be in [1, n_layers-1]");
        if (spike_token < 0 || spike_token > 255 ||
            (spike_token >= 'a' && spike_token <= 'z'))
            throw std::runtime_error("synth: spike_token must be a non-letter byte");
        if (target_ratio < 10.0) throw std::runtime_error("synth: target_ratio must be >= 10");
        if (ffn_kind == FfnKind::plain && spike_mode != SpikeMode::none)
            throw std::runtime_error("synth: outlier wiring needs a gated ffn; use mode none");
    }
};

struct CorpusOptions {
    int32_t samples = 64;
    int32_t seq_len = 64;  // including bos
    double spike_rate = 1.0;
    uint64_t seed = 1;
};

namespace synth_detail {

// Reserved residual layout.
inline constexpr int32_t kBosDims = 8;     // dims 0..7 carry the bos direction
inline constexpr int32_t kMarkerDim = 8;   // occurrence marker
inline constexpr int32_t kCodeOffset = 9;  // orthonormal token codes start here
inline constexpr int32_t kNumLetters = 26;
inline constexpr int32_t kNumCodes = 27;   // letters plus the trigger token

struct Consts {
    double bos_gain = 100.0;       // embedding magnitude of bos
    double beta_qk = 1.07;         // marker head query/key gain
    double bos_key = 1.0;          // bos admixture in the marker key
    double mu_v = 0.25;            // marker head value gain
    double g_o = 1.0;              // marker head output gain
    double w_marker = 20.0;        // occurrence discriminator strength
    double m_star_init = 1.15;     // pre-probe marker threshold
    double a_static = 3.0;         // gate gain for mode always
    double beta_gate = 1.0;        // bigram gate gain
    double gamma_up = 0.075;       // bigram up gain
    double delta_succ = 8.0;       // successor logit written by bigram units
    double rho_self = 1.0;         // self code removed by bigram units
    double delta_spike_out = 2.0;  // bounded residual write of the outlier unit
    double c_match = 2.0;          // matching head query/key gain
    double sigma_match_v = 0.15;
    double sigma_o = 0.001;
    double sigma_noise_gate = 0.05;
    double sigma_noise_down = 0.002;
    double sigma_byte = 0.1;       // embeddings of bytes outside the grammar
    double grammar_eps = 0.1;
    double g_cushion = 1.3;        // overshoot on the calibrated up gain
};

struct TuneError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double dotf(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline void project_out(std::vector<float>& v, const std::vector<float>& e) {
    const double c = dotf(v, e);
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(v[i] - c * e[i]);
}

// n orthonormal rows of length d via twice-iterated Gram-Schmidt.
inline std::vector<std::vector<float>> orthonormal_rows(int n, int d, Rng& rng) {
    if (n > d) throw std::logic_error("orthonormal_rows: n > d");
    std::vector<std::vector<double>> v(static_cast<size_t>(n), std::vector<double>(d));
    for (auto& row : v)
        for (double& x : row) x = rng.normal();
    for (int i = 0; i < n; ++i) {
        auto& vi = v[static_cast<size_t>(i)];
        for (int pass = 0; pass < 2; ++pass) {
            for (int j = 0; j < i; ++j) {
                const auto& vj = v[static_cast<size_t>(j)];
                double c = 0.0;
                for (int k = 0; k < d; ++k) c += vi[static_cast<size_t>(k)] * vj[static_cast<size_t>(k)];
                for (int k = 0; k < d; ++k) vi[static_cast<size_t>(k)] -= c * vj[static_cast<size_t>(k)];
            }
        }
        double nrm = 0.0;
        for (int k = 0; k < d; ++k) nrm += vi[static_cast<size_t>(k)] * vi[static_cast<size_t>(k)];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-8) throw std::runtime_error("orthonormal_rows: degenerate draw");
        for (int k = 0; k < d; ++k) vi[static_cast<size_t>(k)] /= nrm;
    }
    std::vector<std::vector<float>> out(static_cast<size_t>(n), std::vector<float>(d));
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k)
            out[static_cast<size_t>(i)][static_cast<size_t>(k)] =
                static_cast<float>(v[static_cast<size_t>(i)][static_cast<size_t>(k)]);
    return out;
}

// Token codes as full-width residual vectors; index 0..25 map to 'a'..'z',
// index 26 is the trigger token. Depends only on (seed, d_model).
inline std::vector<std::vector<float>> make_codes(uint64_t seed, int32_t d_model) {
    Rng rng = Rng::fork(seed, 1);
    auto sub = orthonormal_rows(kNumCodes, d_model - kCodeOffset, rng);
    std::vector<std::vector<float>> codes(kNumCodes,
                                          std::vector<float>(static_cast<size_t>(d_model), 0.0f));
    for (int c = 0; c < kNumCodes; ++c)
        for (int k = 0; k < d_model - kCodeOffset; ++k)
            codes[static_cast<size_t>(c)][static_cast<size_t>(kCodeOffset + k)] =
                sub[static_cast<size_t>(c)][static_cast<size_t>(k)];
    return codes;
}

inline std::vector<float> bos_direction(int32_t d_model) {
    std::vector<float> b(static_cast<size_t>(d_model), 0.0f);
    const float v = static_cast<float>(1.0 / std::sqrt(static_cast<double>(kBosDims)));
    for (int i = 0; i < kBosDims; ++i) b[static_cast<size_t>(i)] = v;
    return b;
}

inline bool is_letter(int32_t id) { return id >= 'a' && id <= 'z'; }

// Markov walk over the extended successor map with trigger tokens forced at
// the given x-positions (x-position 0 is the token right after bos). The
// noise branch only ever emits letters, so triggers appear exactly at the
// forced positions.
inline std::vector<int32_t> sample_sequence(const GrammarConfig& g, int32_t bos_id,
                                            int32_t spike_token, int32_t seq_len,
                                            const std::set<int32_t>& forced, Rng& rng) {
    const int32_t L = seq_len - 1;
    std::vector<int32_t> seq;
    seq.reserve(static_cast<size_t>(seq_len));
    seq.push_back(bos_id);
    const auto uniform_letter = [&] {
        return g.alphabet[rng.next_below(g.alphabet.size())];
    };
    int32_t prev = -1;
    for (int32_t i = 0; i < L; ++i) {
        int32_t tok;
        if (forced.count(i)) {
            tok = spike_token;
        } else if (prev < 0) {
            tok = uniform_letter();
        } else {
            int32_t succ;
            if (prev == spike_token) {
                succ = g.spike_successor;
            } else {
                const auto it = std::find(g.alphabet.begin(), g.alphabet.end(), prev);
                if (it == g.alphabet.end())
                    throw std::runtime_error("sample_sequence: token outside grammar");
                succ = g.successor[static_cast<size_t>(it - g.alphabet.begin())];
            }
            tok = (rng.next_double() < 1.0 - g.noise_eps) ? succ : uniform_letter();
        }
        seq.push_back(tok);
        prev = tok;
    }
    return seq;
}

// Rng stream ids; ranges keep purposes disjoint.
inline constexpr uint64_t kStreamBytes = 2;
inline constexpr uint64_t kStreamPerm = 3;
inline constexpr uint64_t kStreamSucc = 4;
inline constexpr uint64_t kStreamMatchR = 0x10000;
inline constexpr uint64_t kStreamMatchV = 0x20000;
inline constexpr uint64_t kStreamMatchO = 0x30000;
inline constexpr uint64_t kStreamFfn = 0x40000;
inline constexpr uint64_t kStreamProbe = 0x50000;
inline constexpr uint64_t kStreamCorpus = 0xC0000000;

inline void fill_matching_head(LayerWeights& lw, const SynthConfig& sc, const Consts& cn,
                               const std::vector<float>& e_spike, int32_t layer, int32_t head) {
    const int32_t D = sc.d_model, Dh = sc.d_model / sc.n_heads;
    const int32_t half = Dh / 2;
    const uint64_t tag = static_cast<uint64_t>(layer) * 256 + static_cast<uint64_t>(head);
    Rng rr = Rng::fork(sc.seed, kStreamMatchR + tag);
    // Queries and keys share a semi-orthogonal map placed on the slow rotary
    // half, so same-token attention scores barely move with position.
    const auto R = orthonormal_rows(half, D, rr);
    for (int32_t j = 0; j < half; ++j) {
        const int32_t col = head * Dh + half + j;
        for (int32_t i = 0; i < D; ++i) {
            const float v = static_cast<float>(
                cn.c_match * R[static_cast<size_t>(j)][static_cast<size_t>(i)]);
            lw.wq.at(i, col) = v;
            lw.wk.at(i, col) = v;
        }
    }
    Rng rv = Rng::fork(sc.seed, kStreamMatchV + tag);
    for (int32_t j = 0; j < Dh; ++j) {
        const int32_t col = head * Dh + j;
        for (int32_t i = 0; i < D; ++i)
            lw.wv.at(i, col) = static_cast<float>(rv.normal() * cn.sigma_match_v);
    }
    Rng ro = Rng::fork(sc.seed, kStreamMatchO + tag);
    for (int32_t j = 0; j < Dh; ++j) {
        const int32_t row = head * Dh + j;
        std::vector<float> orow(static_cast<size_t>(D));
        for (float& v : orow) v = static_cast<float>(ro.normal() * cn.sigma_o);
        project_out(orow, e_spike);  // keeps the residual free of trigger code
        for (int32_t i = 0; i < D; ++i) lw.wo.at(row, i) = orow[static_cast<size_t>(i)];
    }
}

inline void fill_marker_head(LayerWeights& lw, const SynthConfig& sc, const Consts& cn,
                             const std::vector<float>& e_spike, const std::vector<float>& b) {
    const int32_t D = sc.d_model, Dh = sc.d_model / sc.n_heads;
    const int32_t qcol = Dh - 2;  // slowest rotary pair of head 0
    for (int32_t i = 0; i < D; ++i) {
        lw.wq.at(i, qcol) = static_cast<float>(cn.beta_qk * e_spike[static_cast<size_t>(i)]);
        lw.wk.at(i, qcol) = static_cast<float>(
            cn.beta_qk *
            (e_spike[static_cast<size_t>(i)] + cn.bos_key * b[static_cast<size_t>(i)]));
        lw.wv.at(i, 0) = static_cast<float>(cn.mu_v * e_spike[static_cast<size_t>(i)]);
    }
    lw.wo.at(0, kMarkerDim) = static_cast<float>(cn.g_o);
}

inline void fill_noise_unit(LayerWeights& lw, int32_t unit, int32_t d_model, const Consts& cn,
                            const std::vector<float>& e_spike, Rng& rg, Rng& ru, Rng& rd,
                            bool glu) {
    for (int32_t i = 0; i < d_model; ++i) {
        if (glu) lw.w_gate.at(i, unit) = static_cast<float>(rg.normal() * cn.sigma_noise_gate);
        lw.w_up.at(i, unit) = static_cast<float>(ru.normal() * cn.sigma_noise_gate);
    }
    std::vector<float> drow(static_cast<size_t>(d_model));
    for (float& v : drow) v = static_cast<float>(rd.normal() * cn.sigma_noise_down);
    project_out(drow, e_spike);
    for (int32_t i = 0; i < d_model; ++i) lw.w_down.at(unit, i) = drow[static_cast<size_t>(i)];
}

inline double act_scalar(FfnKind kind, double x) {
    return kind == FfnKind::glu_gelu ? gelu(x) : silu(x);
}

// Overwrites the outlier unit (ffn unit 0 at the target layer) with the given
// gate threshold, up gain and down-row output scale.
inline void set_spike_unit(Model& m, const Consts& cn, const std::vector<float>& e_spike,
                           const std::vector<float>& e_succ, double a_gain, double up_gain,
                           double out_scale) {
    LayerWeights& lw = m.weights.layers[static_cast<size_t>(m.spike->spike_layer)];
    const int32_t D = m.config.d_model;
    for (int32_t i = 0; i < D; ++i) {
        double g = a_gain * e_spike[static_cast<size_t>(i)];
        if (m.spike->mode == SpikeMode::first_occurrence && i == kMarkerDim) g -= cn.w_marker;
        lw.w_gate.at(i, 0) = static_cast<float>(g);
        lw.w_up.at(i, 0) = static_cast<float>(up_gain * e_spike[static_cast<size_t>(i)]);
        lw.w_down.at(0, i) = static_cast<float>(out_scale * e_succ[static_cast<size_t>(i)]);
    }
}

struct ProbeStats {
    std::vector<double> marker_first, marker_second;  // m-hat at trigger occurrences
    std::vector<double> unit_first, unit_second;      // outlier unit preimage values
    std::vector<float> first_absmax, second_absmax;   // down-tap row absmax at triggers
    std::vector<float> letter_absmax;                 // down-tap row absmax at letters
};

inline ProbeStats run_probes(const Model& m, const SynthConfig& sc,
                             const std::vector<float>& e_spike) {
    static const std::vector<std::pair<int32_t, int32_t>> kPairs = {
        {4, 24}, {9, 33}, {15, 40}, {2, 10}, {20, 44}, {6, 30}};
    const int32_t kProbeLen = 48;
    const int32_t s = m.spike->spike_layer;
    ProbeStats st;
    for (size_t p = 0; p < kPairs.size(); ++p) {
        Rng rng = Rng::fork(sc.seed, kStreamProbe + p);
        std::set<int32_t> forced{kPairs[p].first, kPairs[p].second};
        auto seq = sample_sequence(*m.grammar, m.config.bos_id, m.spike->spike_token, kProbeLen,
                                   forced, rng);
        TraceRequest req;
        req.logits = false;
        req.taps_full = true;
        ForwardTrace tr = forward_fp(m, seq, nullptr, req);
        const Tensor& gu = tr.taps[module_index({s, ModuleKind::gate_up})];
        const Tensor& dn = tr.taps[module_index({s, ModuleKind::down})];
        const auto absmax = row_absmax(dn);
        for (int occ = 0; occ < 2; ++occ) {
            const int32_t pos = (occ == 0 ? kPairs[p].first : kPairs[p].second) + 1;  // +1 bos
            std::vector<float> row(gu.data.begin() + pos * gu.dim(1),
                                   gu.data.begin() + (pos + 1) * gu.dim(1));
            const double c = dotf(row, e_spike);
            if (c <= 0.0) throw TuneError("trigger alignment vanished at a trigger position");
            const double mhat = static_cast<double>(row[kMarkerDim]) / c;
            (occ == 0 ? st.marker_first : st.marker_second).push_back(mhat);
            (occ == 0 ? st.unit_first : st.unit_second)
                .push_back(static_cast<double>(dn.at(pos, 0)));
            (occ == 0 ? st.first_absmax : st.second_absmax)
                .push_back(absmax[static_cast<size_t>(pos)]);
        }
        for (size_t t = 1; t < seq.size(); ++t)
            if (is_letter(seq[t])) st.letter_absmax.push_back(absmax[t]);
    }
    return st;
}

inline double pool_ratio(const std::vector<float>& pool) {
    const float mx = *std::max_element(pool.begin(), pool.end());
    const double med = median_of(pool);
    if (med <= 0.0) throw TuneError("scale pool median is zero");
    return static_cast<double>(mx) / med;
}

// Corpus perplexity in full precision; targets are positions 1..T-1.
inline double fp_perplexity(const Model& m, const std::vector<std::vector<int32_t>>& corpus) {
    double total = 0.0;
    int64_t count = 0;
    for (const auto& seq : corpus) {
        ForwardTrace tr = forward_fp(m, seq);
        const int64_t V = tr.logits.dim(1);
        for (size_t t = 1; t < seq.size(); ++t) {
            const float* row = tr.logits.data.data() + static_cast<int64_t>(t - 1) * V;
            double mx = row[0];
            for (int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double lse = 0.0;
            for (int64_t j = 0; j < V; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
            total += mx + std::log(lse) - static_cast<double>(row[seq[t]]);
            ++count;
        }
    }
    return std::exp(total / static_cast<double>(count));
}

// Assembles all weights; the outlier unit is left zeroed for modes that tune.
inline Model build_base(const SynthConfig& sc, const Consts& cn) {
    const int32_t D = sc.d_model, H = sc.n_heads, Dh = D / H, V = ToyTokenizer::kVocabSize;
    const bool glu = sc.ffn_kind != FfnKind::plain;

    Model m;
    m.config.n_layers = sc.n_layers;
    m.config.d_model = D;
    m.config.n_heads = H;
    m.config.d_head = Dh;
    m.config.d_ff = sc.d_ff;
    m.config.vocab_size = V;
    m.config.ffn_kind = sc.ffn_kind;
    m.config.norm_eps = 1e-6f;
    m.config.rope_theta = 1e8;  // keeps the slow rotary half position-stable
    m.config.bos_id = ToyTokenizer::kBosId;
    m.config.max_positions = sc.max_positions;
    m.config.validate();

    const auto codes = make_codes(sc.seed, D);
    const auto b = bos_direction(D);
    const std::vector<float>& e_spike = codes[kNumCodes - 1];

    GrammarConfig grammar;
    for (int i = 0; i < kNumLetters; ++i) grammar.alphabet.push_back('a' + i);
    {
        std::vector<int32_t> perm(kNumLetters);
        for (int i = 0; i < kNumLetters; ++i) perm[static_cast<size_t>(i)] = i;
        Rng rp = Rng::fork(sc.seed, kStreamPerm);
        for (int i = kNumLetters - 1; i > 0; --i) {
            const auto j = rp.next_below(static_cast<uint64_t>(i + 1));
            std::swap(perm[static_cast<size_t>(i)], perm[j]);
        }
        for (int i = 0; i < kNumLetters; ++i)
            grammar.successor.push_back('a' + perm[static_cast<size_t>(i)]);
        Rng rs = Rng::fork(sc.seed, kStreamSucc);
        grammar.spike_successor = 'a' + static_cast<int32_t>(rs.next_below(kNumLetters));
    }
    grammar.noise_eps = cn.grammar_eps;
    m.grammar = grammar;

    SpikeConfig spike;
    spike.mode = sc.spike_mode;
    spike.spike_token = sc.spike_token;
    spike.spike_layer = sc.spike_layer;
    spike.marker_dim = kMarkerDim;
    spike.target_ratio = sc.spike_mode == SpikeMode::none ? 0.0 : sc.target_ratio;
    m.spike = spike;

    // Embeddings: codes for grammar tokens, the bos direction for bos, small
    // trigger-free noise for every other byte.
    m.weights.embedding = Tensor::zeros({V, D});
    Rng rbyte = Rng::fork(sc.seed, kStreamBytes);
    for (int32_t id = 0; id < V; ++id) {
        std::vector<float> row(static_cast<size_t>(D), 0.0f);
        if (id == ToyTokenizer::kBosId) {
            for (int32_t i = 0; i < D; ++i)
                row[static_cast<size_t>(i)] =
                    static_cast<float>(cn.bos_gain * b[static_cast<size_t>(i)]);
        } else if (is_letter(id)) {
            row = codes[static_cast<size_t>(id - 'a')];
        } else if (id == sc.spike_token) {
            row = e_spike;
        } else {
            for (int32_t k = kCodeOffset; k < D; ++k)
                row[static_cast<size_t>(k)] = static_cast<float>(rbyte.normal() * cn.sigma_byte);
            project_out(row, e_spike);
        }
        for (int32_t i = 0; i < D; ++i)
            m.weights.embedding.at(id, i) = row[static_cast<size_t>(i)];
    }

    // Output head ties the embedding transpose; bos is never predicted.
    m.weights.lm_head = Tensor::zeros({D, V});
    for (int32_t id = 0; id < V; ++id) {
        if (id == ToyTokenizer::kBosId) continue;
        for (int32_t i = 0; i < D; ++i)
            m.weights.lm_head.at(i, id) = m.weights.embedding.at(id, i);
    }

    auto ones_vec = [&](int32_t n) {
        Tensor t = Tensor::zeros({n});
        for (float& v : t.data) v = 1.0f;
        return t;
    };
    m.weights.final_norm = ones_vec(D);

    const double h_nom = glu ? act_scalar(sc.ffn_kind, 8.0 * cn.beta_gate) * 8.0 * cn.gamma_up
                             : act_scalar(sc.ffn_kind, 8.0 * cn.beta_gate);

    m.weights.layers.resize(static_cast<size_t>(sc.n_layers));
    for (int32_t l = 0; l < sc.n_layers; ++l) {
        LayerWeights& lw = m.weights.layers[static_cast<size_t>(l)];
        lw.attn_norm = ones_vec(D);
        lw.ffn_norm = ones_vec(D);
        lw.wq = Tensor::zeros({D, D});
        lw.wk = Tensor::zeros({D, D});
        lw.wv = Tensor::zeros({D, D});
        lw.wo = Tensor::zeros({D, D});
        for (int32_t h = 0; h < H; ++h) {
            if (l == sc.spike_layer - 1 && h == 0 && sc.spike_mode != SpikeMode::none)
                fill_marker_head(lw, sc, cn, e_spike, b);
            else
                fill_matching_head(lw, sc, cn, e_spike, l, h);
        }

        if (glu) lw.w_gate = Tensor::zeros({D, sc.d_ff});
        lw.w_up = Tensor::zeros({D, sc.d_ff});
        lw.w_down = Tensor::zeros({sc.d_ff, D});
        Rng rg = Rng::fork(sc.seed, kStreamFfn + static_cast<uint64_t>(l) * 8 + 0);
        Rng ru = Rng::fork(sc.seed, kStreamFfn + static_cast<uint64_t>(l) * 8 + 1);
        Rng rd = Rng::fork(sc.seed, kStreamFfn + static_cast<uint64_t>(l) * 8 + 2);
        for (int32_t unit = 0; unit < sc.d_ff; ++unit) {
            const bool outlier_slot =
                l == sc.spike_layer && unit == 0 && sc.spike_mode != SpikeMode::none;
            // Units 1..27 read token codes at every layer so each down tap
            // has a firing unit at every position; without that floor the
            // tap pool is a max of near-zero noise products and its
            // max/median ratio drifts with d_ff. Only the spike layer's
            // copies carry the successor signal in their down rows.
            const bool code_slot = unit >= 1 && unit <= kNumCodes;
            if (outlier_slot) continue;  // zeros until set_spike_unit
            if (code_slot) {
                const int32_t ci = unit - 1;
                const std::vector<float>& e_u = codes[static_cast<size_t>(ci)];
                for (int32_t i = 0; i < D; ++i) {
                    if (glu) {
                        lw.w_gate.at(i, unit) =
                            static_cast<float>(cn.beta_gate * e_u[static_cast<size_t>(i)]);
                        lw.w_up.at(i, unit) =
                            static_cast<float>(cn.gamma_up * e_u[static_cast<size_t>(i)]);
                    } else {
                        lw.w_up.at(i, unit) =
                            static_cast<float>(cn.beta_gate * e_u[static_cast<size_t>(i)]);
                    }
                }
                if (l == sc.spike_layer) {
                    const int32_t succ_id = ci < kNumLetters
                                                ? grammar.successor[static_cast<size_t>(ci)]
                                                : grammar.spike_successor;
                    const std::vector<float>& e_s = codes[static_cast<size_t>(succ_id - 'a')];
                    for (int32_t i = 0; i < D; ++i)
                        lw.w_down.at(unit, i) = static_cast<float>(
                            (cn.delta_succ * e_s[static_cast<size_t>(i)] -
                             cn.rho_self * e_u[static_cast<size_t>(i)]) /
                            h_nom);
                } else {
                    std::vector<float> drow(static_cast<size_t>(D));
                    for (float& v : drow) v = static_cast<float>(rd.normal() * cn.sigma_noise_down);
                    project_out(drow, e_spike);
                    for (int32_t i = 0; i < D; ++i)
                        lw.w_down.at(unit, i) = drow[static_cast<size_t>(i)];
                }
            } else {
                fill_noise_unit(lw, unit, D, cn, e_spike, rg, ru, rd, glu);
            }
        }
    }
    return m;
}

inline void verify_model(const Model& m, const SynthConfig& sc, const Consts& cn,
                         const std::vector<float>& e_spike) {
    CorpusOptions vo;
    vo.samples = 16;
    vo.seq_len = 48;
    vo.spike_rate = sc.spike_mode == SpikeMode::none ? 0.0 : 1.0;
    vo.seed = sc.seed;
    std::vector<std::vector<int32_t>> corpus;
    for (int32_t s = 0; s < vo.samples; ++s) {
        Rng rng = Rng::fork(vo.seed, kStreamCorpus + static_cast<uint64_t>(s));
        std::set<int32_t> forced;
        if (vo.spike_rate > 0.0) {
            const int32_t L = vo.seq_len - 1;
            forced.insert(1 + static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(L - 1))));
        }
        corpus.push_back(sample_sequence(*m.grammar, m.config.bos_id,
                                         m.spike ? m.spike->spike_token : 0, vo.seq_len, forced,
                                         rng));
    }

    CalibrationReport rep = run_calibration(m, corpus);
    const size_t target =
        module_index({sc.spike_layer, ModuleKind::down});
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
        const double r = pool_ratio(rep.pool(mi));
        if (sc.spike_mode != SpikeMode::none && mi == target) {
            if (r < sc.target_ratio)
                throw TuneError("target module ratio " + std::to_string(r) + " below requested " +
                                std::to_string(sc.target_ratio));
        } else if (r >= 3.0) {
            throw TuneError("module " + module_id_name(rep.modules[mi]) +
                            " ratio " + std::to_string(r) + " not tame");
        }
    }

    if (sc.spike_mode == SpikeMode::first_occurrence) {
        ProbeStats st = run_probes(m, sc, e_spike);
        const float worst_second =
            *std::max_element(st.second_absmax.begin(), st.second_absmax.end());
        const float best_first = *std::min_element(st.first_absmax.begin(), st.first_absmax.end());
        if (!(worst_second < 0.5f * best_first))
            throw TuneError("repeat occurrence not suppressed");
    }

    const double ppl = fp_perplexity(m, corpus);
    if (!(std::isfinite(ppl) && ppl < 8.0))
        throw TuneError("full precision perplexity " + std::to_string(ppl) + " out of range");
}

inline Model synthesize_attempt(const SynthConfig& sc, const Consts& cn) {
    Model m = build_base(sc, cn);
    const auto codes = make_codes(sc.seed, sc.d_model);
    const std::vector<float>& e_spike = codes[kNumCodes - 1];
    const std::vector<float>& e_succ =
        codes[static_cast<size_t>(m.grammar->spike_successor - 'a')];

    if (sc.spike_mode == SpikeMode::none) {
        verify_model(m, sc, cn, e_spike);
        return m;
    }

    double a_gain = sc.spike_mode == SpikeMode::first_occurrence
                        ? cn.w_marker * cn.m_star_init
                        : cn.a_static;
    set_spike_unit(m, cn, e_spike, e_succ, a_gain, 1.0, 0.0);

    if (sc.spike_mode == SpikeMode::first_occurrence) {
        // Pass 1: place the marker threshold midway between the observed
        // first- and second-occurrence marker readings.
        ProbeStats st = run_probes(m, sc, e_spike);
        const double m1 = *std::max_element(st.marker_first.begin(), st.marker_first.end());
        const double m2 = *std::min_element(st.marker_second.begin(), st.marker_second.end());
        if (m2 - m1 < 0.05) throw TuneError("marker separation too small");
        a_gain = cn.w_marker * 0.5 * (m1 + m2);
        set_spike_unit(m, cn, e_spike, e_succ, a_gain, 1.0, 0.0);
    }

    // Pass 2: with unit gain 1, measure the firing values and the tame
    // median, then scale the up projection to hit the requested ratio.
    ProbeStats st = run_probes(m, sc, e_spike);
    std::vector<double> fired = st.unit_first;
    if (sc.spike_mode == SpikeMode::static_spike)
        fired.insert(fired.end(), st.unit_second.begin(), st.unit_second.end());
    const double v_min = *std::min_element(fired.begin(), fired.end());
    if (v_min <= 0.0) throw TuneError("outlier unit failed to fire in probes");
    std::vector<double> sorted = fired;
    std::sort(sorted.begin(), sorted.end());
    const double v_nom = sorted[sorted.size() / 2];
    const double mu_med = median_of(st.letter_absmax);
    const double up_gain = sc.target_ratio * mu_med / v_min * cn.g_cushion;
    set_spike_unit(m, cn, e_spike, e_succ, a_gain, up_gain,
                   cn.delta_spike_out / (up_gain * v_nom));

    verify_model(m, sc, cn, e_spike);
    return m;
}

}  // namespace synth_detail

inline Model synthesize_model(const SynthConfig& sc) {
    sc.validate();
    synth_detail::Consts cn;
    std::string last_error;
    for (int attempt = 0; attempt < 2; ++attempt) {
        try {
            return synth_detail::synthesize_attempt(sc, cn);
        } catch (const synth_detail::TuneError& e) {
            last_error = e.what();
            cn.w_marker *= 2.0;  // sharper occurrence discrimination, then give up
        }
    }
    throw std::runtime_error("synthesize_model: tuning failed: " + last_error);
}

inline std::vector<std::vector<int32_t>> sample_corpus(const Model& m, const CorpusOptions& opt) {
    if (!m.grammar) throw std::runtime_error("sample_corpus: model carries no grammar block");
    if (opt.samples < 1 || opt.seq_len < 8)
        throw std::runtime_error("sample_corpus: need samples >= 1 and seq_len >= 8");
    if (opt.spike_rate < 0.0) throw std::runtime_error("sample_corpus: negative spike rate");
    if (opt.spike_rate > 0.0 && !m.spike)
        throw std::runtime_error("sample_corpus: spike rate set but model has no trigger token");

    const int32_t L = opt.seq_len - 1;
    const double rate = opt.spike_rate;
    std::vector<std::vector<int32_t>> corpus;
    corpus.reserve(static_cast<size_t>(opt.samples));
    for (int32_t s = 0; s < opt.samples; ++s) {
        Rng rng = Rng::fork(opt.seed, synth_detail::kStreamCorpus + static_cast<uint64_t>(s));
        int32_t n_spikes = static_cast<int32_t>(std::floor(rate));
        if (rng.next_double() < rate - std::floor(rate)) ++n_spikes;
        n_spikes = std::min(n_spikes, std::max(0, L - 2));
        std::set<int32_t> forced;
        while (static_cast<int32_t>(forced.size()) < n_spikes)
            forced.insert(1 + static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(L - 1))));
        corpus.push_back(synth_detail::sample_sequence(
            *m.grammar, m.config.bos_id, m.spike ? m.spike->spike_token : 0, opt.seq_len, forced,
            rng));
    }
    return corpus;
}

}  // namespace spikelab
