#pragma once
// Full-precision calibration pass. Runs the model over a sample corpus and
// records, per linear module, the absolute maximum of every token's input
// row. Those per-token values drive the outlier diagnostic (max over median),
// static activation scales (max / 127) and the prefix search. Residual-stream
// magnitudes and token frequencies ride along for analysis.

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "spikelab/ioutil.hpp"
#include "spikelab/model.hpp"
#include "spikelab/parallel.hpp"
#include "spikelab/quant.hpp"

namespace spikelab {

struct CalibrationOptions {
    // Shared full-precision prefix. When set, samples that start with the
    // model's BOS token are fed without it; the prefix already covers it.
    const KVCache* prefix = nullptr;
    bool record_hidden = true;
    int jobs = 1;
};

struct CalibrationReport {
    std::string model_fingerprint;
    uint64_t corpus_seed = 0;
    int32_t bos_id = 0;
    std::vector<ModuleId> modules;
    // module_scales[module][sample][token]: absmax of the token's input row.
    std::vector<std::vector<std::vector<float>>> module_scales;
    std::vector<std::vector<int32_t>> tokens;  // samples as actually fed
    // hidden[sample][token]: residual-stream absmax, max over layers.
    std::vector<std::vector<float>> hidden;
    std::vector<double> static_scales;  // quantizer step per module

    // All observed values for one module, samples concatenated in order.
    std::vector<float> pool(size_t module_idx) const {
        std::vector<float> out;
        for (const auto& row : module_scales.at(module_idx))
            out.insert(out.end(), row.begin(), row.end());
        return out;
    }
};

inline double median_of(std::vector<float> v) {
    if (v.empty()) throw std::invalid_argument("median_of: empty input");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    if (n % 2 == 1) return static_cast<double>(v[n / 2]);
    return 0.5 * (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2]));
}

inline CalibrationReport run_calibration(const Model& m,
                                         const std::vector<std::vector<int32_t>>& samples,
                                         const CalibrationOptions& opt = {}) {
    if (samples.empty()) throw std::invalid_argument("run_calibration: empty corpus");
    const size_t n_modules = static_cast<size_t>(m.config.n_modules());
    const size_t n_samples = samples.size();

    CalibrationReport rep;
    rep.model_fingerprint = m.fingerprint;
    rep.bos_id = m.config.bos_id;
    rep.modules = m.module_ids();
    rep.module_scales.assign(n_modules, std::vector<std::vector<float>>(n_samples));
    rep.tokens.resize(n_samples);
    if (opt.record_hidden) rep.hidden.resize(n_samples);

    parallel_for(static_cast<int64_t>(n_samples), opt.jobs, [&](int64_t si) {
        const size_t s = static_cast<size_t>(si);
        std::vector<int32_t> fed = samples[s];
        if (opt.prefix && !fed.empty() && fed.front() == m.config.bos_id)
            fed.erase(fed.begin());
        if (fed.empty()) throw std::runtime_error("run_calibration: sample empty after prefix");

        KVCache local;
        KVCache* cache = nullptr;
        if (opt.prefix) {
            local = opt.prefix->clone();
            cache = &local;
        }
        TraceRequest req;
        req.logits = false;
        req.tap_scales = true;
        req.hidden_absmax = opt.record_hidden;
        ForwardTrace tr = forward_fp(m, fed, cache, req);

        for (size_t mi = 0; mi < n_modules; ++mi)
            rep.module_scales[mi][s] = std::move(tr.tap_scales[mi]);
        if (opt.record_hidden) {
            std::vector<float> hm(fed.size(), 0.0f);
            for (const auto& layer_row : tr.hidden_absmax)
                for (size_t t = 0; t < hm.size(); ++t) hm[t] = std::max(hm[t], layer_row[t]);
            rep.hidden[s] = std::move(hm);
        }
        rep.tokens[s] = std::move(fed);
    });

    rep.static_scales.resize(n_modules);
    for (size_t mi = 0; mi < n_modules; ++mi) {
        float maxv = 0.0f;
        for (const auto& row : rep.module_scales[mi])
            for (float v : row) maxv = std::max(maxv, v);
        rep.static_scales[mi] = absmax_scale(maxv);
    }
    return rep;
}

// Counts every non-BOS token across the corpus; ordered by count descending,
// ties by token id ascending.
inline std::vector<std::pair<int32_t, int64_t>> token_frequency(const CalibrationReport& rep) {
    std::map<int32_t, int64_t> counts;
    for (const auto& sample : rep.tokens)
        for (int32_t t : sample)
            if (t != rep.bos_id) ++counts[t];
    std::vector<std::pair<int32_t, int64_t>> out(counts.begin(), counts.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return out;
}

inline nlohmann::json calibration_to_json(const CalibrationReport& rep) {
    nlohmann::json jm = nlohmann::json::array();
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
        jm.push_back({{"layer", rep.modules[mi].layer},
                      {"kind", module_kind_name(rep.modules[mi].kind)},
                      {"scales", rep.module_scales[mi]}});
    }
    nlohmann::json freq = nlohmann::json::object();
    for (const auto& [tok, count] : token_frequency(rep)) freq[std::to_string(tok)] = count;
    return nlohmann::json{{"model_fingerprint", rep.model_fingerprint},
                          {"corpus_seed", rep.corpus_seed},
                          {"bos_id", rep.bos_id},
                          {"samples", rep.tokens.size()},
                          {"seq_len", rep.tokens.empty() ? 0 : rep.tokens.front().size()},
                          {"modules", jm},
                          {"tokens", rep.tokens},
                          {"hidden", rep.hidden},
                          {"freq", freq},
                          {"static_scales", rep.static_scales}};
}

inline CalibrationReport calibration_from_json(const nlohmann::json& j) {
    CalibrationReport rep;
    rep.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    rep.corpus_seed = j.at("corpus_seed").get<uint64_t>();
    rep.bos_id = j.at("bos_id").get<int32_t>();
    for (const auto& jm : j.at("modules")) {
        rep.modules.push_back(
            {jm.at("layer").get<int32_t>(), parse_module_kind(jm.at("kind").get<std::string>())});
        rep.module_scales.push_back(jm.at("scales").get<std::vector<std::vector<float>>>());
    }
    rep.tokens = j.at("tokens").get<std::vector<std::vector<int32_t>>>();
    rep.hidden = j.at("hidden").get<std::vector<std::vector<float>>>();
    rep.static_scales = j.at("static_scales").get<std::vector<double>>();
    return rep;
}

inline void save_calibration(const CalibrationReport& rep, const std::string& path) {
    write_file_text(path, calibration_to_json(rep).dump(2) + "\n");
}

inline CalibrationReport load_calibration(const std::string& path) {
    return calibration_from_json(nlohmann::json::parse(read_file_text(path)));
}

}  // namespace spikelab
