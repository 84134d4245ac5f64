#pragma once
// Quantization-free prefix. The first occurrence of an outlier-triggering
// token spikes the down-projection input; later occurrences stay tame. A
// short full-precision prompt [bos, context, candidate] absorbs that first
// occurrence into a shared KV cache, so quantized inference behind the cache
// never sees the spike.

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "spikelab/calibration.hpp"
#include "spikelab/model.hpp"
#include "spikelab/parallel.hpp"
#include "spikelab/qfem.hpp"

namespace spikelab {

// Raised when no prefix can absorb a spike: either nothing spikes at all or
// the repeat occurrence spikes too. best_ratio is the strongest first/second
// occurrence scale ratio seen before giving up.
class QfepInapplicable : public std::runtime_error {
  public:
    QfepInapplicable(const std::string& what, double best)
        : std::runtime_error(what), best_ratio(best) {}
    double best_ratio = 0.0;
};

struct PrefixResult {
    std::vector<int32_t> prefix;  // [bos, T, C]; [bos, C] without context
    ModuleId target_module;
    double spike_ratio = 0.0;  // scale at first C over scale at repeated C
    int32_t candidate_rank = 0;
};

struct PrefixSearchOptions {
    int32_t top_k = 3;          // candidate tokens tried in rank order
    double tau = 4.0;           // spike means scale >= tau * surrounding median
    int32_t context_pool = 200; // most frequent calibration tokens tried as T
    bool with_context = true;   // false drops T: template [B, C, C]
    int jobs = 1;
};

// Module with the highest max/median ratio; ties break toward the lower
// module index.
inline size_t target_module_index(const std::vector<double>& ratios) {
    return static_cast<size_t>(
        std::max_element(ratios.begin(), ratios.end()) - ratios.begin());
}

// Tokens ranked by the largest input scale they ever produced at the target
// module. Rank order: scale descending, token id ascending on ties.
inline std::vector<int32_t> find_candidate_tokens(const CalibrationReport& rep, int32_t k = 3) {
    if (rep.modules.empty() || rep.tokens.empty())
        throw std::invalid_argument("find_candidate_tokens: empty report");
    if (k < 1) throw std::invalid_argument("find_candidate_tokens: k must be >= 1");

    const std::vector<double> ratios = module_ratios(rep);
    const size_t target = target_module_index(ratios);
    if (ratios[target] <= 1.0)
        throw QfepInapplicable("find_candidate_tokens: no module has max/median ratio above 1",
                               ratios[target]);

    std::map<int32_t, float> best;
    for (size_t s = 0; s < rep.tokens.size(); ++s)
        for (size_t t = 0; t < rep.tokens[s].size(); ++t) {
            const int32_t tok = rep.tokens[s][t];
            const float sc = rep.module_scales[target][s][t];
            auto [it, inserted] = best.emplace(tok, sc);
            if (!inserted) it->second = std::max(it->second, sc);
        }

    std::vector<std::pair<int32_t, float>> ranked(best.begin(), best.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<int32_t> out;
    for (const auto& [tok, sc] : ranked) {
        if (static_cast<int32_t>(out.size()) == k) break;
        out.push_back(tok);
    }
    return out;
}

namespace qfep_detail {

struct Probe {
    bool pass = false;
    double ratio = 0.0;  // first/second candidate scale, whether or not it passed
};

// One template forward: scales at the two candidate positions against the
// median over the other positions.
inline Probe probe_pair(const Model& m, size_t target, const std::vector<int32_t>& tokens,
                        const std::vector<size_t>& cand_pos, double tau) {
    TraceRequest req;
    req.logits = false;
    req.tap_scales = true;
    const ForwardTrace tr = forward_fp(m, tokens, nullptr, req);
    const std::vector<float>& s = tr.tap_scales[target];

    std::vector<float> rest;
    for (size_t i = 0; i < s.size(); ++i)
        if (std::find(cand_pos.begin(), cand_pos.end(), i) == cand_pos.end())
            rest.push_back(s[i]);
    const double med = median_of(rest);

    Probe pr;
    const double c1 = s[cand_pos[0]];
    const double c2 = s[cand_pos[1]];
    if (c2 > 0.0) pr.ratio = c1 / c2;
    if (med > 0.0 && c2 > 0.0)
        pr.pass = (c1 / med >= tau) && (c2 / med < tau / 2.0);
    return pr;
}

}  // namespace qfep_detail

// Grid search over (context T, candidate C): forward [B,T,C,T,C] in full
// precision, demand that the first C spikes against the surrounding median
// and the repeated C does not, keep the pair with the largest first/second
// scale ratio. Candidates go in rank order and the first one with any
// passing pair wins.
inline PrefixResult search_prefix(const Model& m, const CalibrationReport& rep,
                                  const std::vector<int32_t>& candidates,
                                  const PrefixSearchOptions& opt = {}) {
    if (candidates.empty()) throw std::invalid_argument("search_prefix: no candidates");
    const std::vector<double> ratios = module_ratios(rep);
    const size_t target = target_module_index(ratios);
    const int32_t bos = m.config.bos_id;

    std::vector<int32_t> pool;
    if (opt.with_context) {
        for (const auto& [tok, count] : token_frequency(rep)) {
            if (static_cast<int32_t>(pool.size()) == opt.context_pool) break;
            pool.push_back(tok);
        }
        if (pool.empty()) throw std::invalid_argument("search_prefix: empty context pool");
    } else {
        pool.push_back(-1);  // single probe per candidate, no context token
    }

    double best_ratio_anywhere = 0.0;
    for (size_t rank = 0; rank < candidates.size(); ++rank) {
        const int32_t c = candidates[rank];
        std::vector<qfep_detail::Probe> probes(pool.size());
        parallel_for(static_cast<int64_t>(pool.size()), opt.jobs, [&](int64_t pi) {
            const size_t p = static_cast<size_t>(pi);
            if (opt.with_context)
                probes[p] = qfep_detail::probe_pair(m, target, {bos, pool[p], c, pool[p], c},
                                                    {2, 4}, opt.tau);
            else
                probes[p] = qfep_detail::probe_pair(m, target, {bos, c, c}, {1, 2}, opt.tau);
        });

        int64_t best_p = -1;
        for (size_t p = 0; p < probes.size(); ++p) {
            best_ratio_anywhere = std::max(best_ratio_anywhere, probes[p].ratio);
            if (probes[p].pass && (best_p < 0 || probes[p].ratio > probes[static_cast<size_t>(best_p)].ratio))
                best_p = static_cast<int64_t>(p);
        }
        if (best_p >= 0) {
            PrefixResult res;
            if (opt.with_context)
                res.prefix = {bos, pool[static_cast<size_t>(best_p)], c};
            else
                res.prefix = {bos, c};
            res.target_module = rep.modules[target];
            res.spike_ratio = probes[static_cast<size_t>(best_p)].ratio;
            res.candidate_rank = static_cast<int32_t>(rank);
            return res;
        }
    }
    throw QfepInapplicable("search_prefix: no (context, candidate) pair spikes once and only once"
                           "; best first/second ratio " + std::to_string(best_ratio_anywhere),
                           best_ratio_anywhere);
}

// The prefix runs in full precision exactly once; everything after it reuses
// this cache.
inline KVCache prepare_prefix_cache(const Model& m, const PrefixResult& res) {
    if (res.prefix.empty() || res.prefix.front() != m.config.bos_id)
        throw std::invalid_argument("prepare_prefix_cache: prefix must start with bos");
    return build_kv_cache(m, res.prefix);
}

// Position-capacity check for evaluating samples behind a prefix cache. The
// sample's own BOS is dropped before feeding, which downstream consumers
// (perplexity, calibration) also do.
inline void check_prefix_capacity(const Model& m, const KVCache& cache,
                                  const std::vector<std::vector<int32_t>>& corpus) {
    for (const auto& sample : corpus) {
        int64_t fed = static_cast<int64_t>(sample.size());
        if (!sample.empty() && sample.front() == m.config.bos_id) --fed;
        if (fed < 2)
            throw std::invalid_argument("check_prefix_capacity: sample too short to score");
        if (cache.cached_len + fed > m.config.max_positions)
            throw std::runtime_error("check_prefix_capacity: sample of " + std::to_string(fed) +
                                     " tokens does not fit behind a length-" +
                                     std::to_string(cache.cached_len) + " prefix");
    }
}

inline nlohmann::json prefix_to_json(const PrefixResult& res, const std::string& model_fingerprint,
                                     const std::string& prefix_text = "") {
    nlohmann::json j;
    j["prefix"] = res.prefix;
    if (!prefix_text.empty()) j["prefix_text"] = prefix_text;
    j["target_module"] = {{"layer", res.target_module.layer},
                          {"kind", module_kind_name(res.target_module.kind)}};
    j["spike_ratio"] = res.spike_ratio;
    j["candidate_rank"] = res.candidate_rank;
    j["model_fingerprint"] = model_fingerprint;
    return j;
}

inline PrefixResult prefix_from_json(const nlohmann::json& j) {
    PrefixResult res;
    res.prefix = j.at("prefix").get<std::vector<int32_t>>();
    res.target_module = {j.at("target_module").at("layer").get<int32_t>(),
                         parse_module_kind(j.at("target_module").at("kind").get<std::string>())};
    res.spike_ratio = j.at("spike_ratio").get<double>();
    res.candidate_rank = j.value("candidate_rank", 0);
    return res;
}

}  // namespace spikelab
