#pragma once
// Module exclusion driven by the max/median activation-scale ratio. Modules
// whose calibration tap pools show ratio above a threshold alpha run
// weight-only (w8a16); alpha itself is chosen where the normalized
// perplexity-degradation curve crosses the excluded-fraction curve over the
// finite candidate grid of observed ratios.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spikelab/calibration.hpp"
#include "spikelab/module_id.hpp"

namespace spikelab {

inline double max_median_ratio(const std::vector<float>& scales) {
    if (scales.empty()) throw std::invalid_argument("max_median_ratio: empty pool");
    const float mx = *std::max_element(scales.begin(), scales.end());
    const double med = median_of(scales);
    if (med <= 0.0) throw std::runtime_error("max_median_ratio: zero median (all-zero taps)");
    return static_cast<double>(mx) / med;
}

inline std::vector<double> module_ratios(const CalibrationReport& rep) {
    std::vector<double> out(rep.modules.size());
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) out[mi] = max_median_ratio(rep.pool(mi));
    return out;
}

// Module indices with ratio strictly above alpha. alpha = +inf excludes none.
inline std::vector<size_t> select_unquantized(const std::vector<double>& ratios, double alpha) {
    std::vector<size_t> out;
    for (size_t i = 0; i < ratios.size(); ++i)
        if (ratios[i] > alpha) out.push_back(i);
    return out;
}

struct ExclusionSet {
    bool alpha_is_inf = true;
    double alpha = 0.0;           // meaningful only when !alpha_is_inf
    std::vector<size_t> modules;  // indices into the ratio vector
};

struct CurvePoint {
    double alpha = 0.0;
    double ppl = 0.0;
    int64_t n_unquantized = 0;
    double phat = 0.0;  // (ppl(alpha) - ppl_fp) / (ppl(inf) - ppl_fp)
    double chat = 0.0;  // |M_unq| / |M|
    bool feasible = false;
};

struct ThresholdResult {
    ExclusionSet exclusions;
    double ppl_fp = 0.0;
    double ppl_full = 0.0;  // everything quantized (alpha = inf)
    double ppl_star = 0.0;  // at the chosen alpha
    bool degenerate = false;      // full quantization did not hurt
    bool crossing_found = false;  // some candidate satisfied phat <= chat
    size_t evals = 0;             // distinct perplexity evaluations
    std::vector<CurvePoint> curve;
};

enum class ThresholdSearch { binary, sweep };

// eval receives the excluded module indices and returns corpus perplexity
// with those modules at w8a16 and all others fully quantized.
using PplEvaluator = std::function<double(const std::vector<size_t>&)>;

// Candidates are the sorted unique observed ratios; between neighbours both
// curves are constant so nothing else needs probing. The crossing predicate
// phat <= chat holds on a prefix of the ascending grid, so binary search for
// the rightmost true candidate matches the exhaustive sweep; ties resolve
// toward larger alpha (fewer exclusions).
inline ThresholdResult optimize_threshold(const std::vector<double>& ratios, double ppl_fp,
                                          const PplEvaluator& eval,
                                          ThresholdSearch mode = ThresholdSearch::binary,
                                          bool emit_curve = false) {
    if (ratios.empty()) throw std::invalid_argument("optimize_threshold: no modules");
    std::vector<double> cand = ratios;
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    const auto n_modules = static_cast<double>(ratios.size());

    ThresholdResult res;
    std::map<size_t, double> memo;  // keyed by exclusion count; sets are nested
    const auto ppl_at = [&](double alpha, std::vector<size_t>* excl_out) {
        std::vector<size_t> excl = select_unquantized(ratios, alpha);
        if (excl_out != nullptr) *excl_out = excl;
        const auto it = memo.find(excl.size());
        if (it != memo.end()) return it->second;
        const double p = eval(excl);
        memo.emplace(excl.size(), p);
        ++res.evals;
        return p;
    };

    res.ppl_fp = ppl_fp;
    res.ppl_full = ppl_at(std::numeric_limits<double>::infinity(), nullptr);
    const double denom = res.ppl_full - ppl_fp;
    if (denom <= 1e-12) {
        res.degenerate = true;
        res.ppl_star = res.ppl_full;
        return res;  // quantize everything
    }

    const auto probe = [&](size_t k) {
        CurvePoint pt;
        pt.alpha = cand[k];
        std::vector<size_t> excl;
        pt.ppl = ppl_at(cand[k], &excl);
        pt.n_unquantized = static_cast<int64_t>(excl.size());
        pt.phat = (pt.ppl - ppl_fp) / denom;
        pt.chat = static_cast<double>(excl.size()) / n_modules;
        pt.feasible = pt.phat <= pt.chat;
        return pt;
    };

    int64_t best = -1;
    if (mode == ThresholdSearch::binary) {
        int64_t lo = 0, hi = static_cast<int64_t>(cand.size()) - 1;
        while (lo <= hi) {
            const int64_t mid = lo + (hi - lo) / 2;
            if (probe(static_cast<size_t>(mid)).feasible) {
                best = mid;
                lo = mid + 1;
            } else {
                hi = mid - 1;
            }
        }
    } else {
        for (size_t k = 0; k < cand.size(); ++k)
            if (probe(k).feasible) best = static_cast<int64_t>(k);
    }
    if (emit_curve)
        for (size_t k = 0; k < cand.size(); ++k) res.curve.push_back(probe(k));

    if (best < 0) {
        res.ppl_star = res.ppl_full;
        return res;  // no crossing; nothing excluded
    }
    res.crossing_found = true;
    res.exclusions.alpha_is_inf = false;
    res.exclusions.alpha = cand[static_cast<size_t>(best)];
    res.ppl_star = ppl_at(res.exclusions.alpha, &res.exclusions.modules);
    return res;
}

// Artifact layout: {alpha, modules:[{layer,kind}], ratios keyed "L:kind"}.
inline nlohmann::json exclusions_to_json(const ThresholdResult& res,
                                         const std::vector<ModuleId>& modules,
                                         const std::vector<double>& ratios,
                                         const std::string& model_fingerprint,
                                         const std::string& calibration_fingerprint) {
    nlohmann::json j;
    j["alpha"] = res.exclusions.alpha_is_inf ? nlohmann::json("inf")
                                             : nlohmann::json(res.exclusions.alpha);
    j["modules"] = nlohmann::json::array();
    for (size_t mi : res.exclusions.modules)
        j["modules"].push_back({{"layer", modules[mi].layer},
                                {"kind", module_kind_name(modules[mi].kind)}});
    nlohmann::json jr;
    for (size_t mi = 0; mi < modules.size(); ++mi) jr[module_id_name(modules[mi])] = ratios[mi];
    j["ratios"] = jr;
    j["ppl"] = {{"fp", res.ppl_fp}, {"full_quant", res.ppl_full}, {"at_alpha", res.ppl_star}};
    j["degenerate"] = res.degenerate;
    j["crossing_found"] = res.crossing_found;
    j["model_fingerprint"] = model_fingerprint;
    j["calibration_fingerprint"] = calibration_fingerprint;
    return j;
}

// Excluded modules keep quantized weights but full-precision activations.
inline void apply_exclusions(ExecutionPlan& plan, const std::vector<ModuleId>& modules) {
    for (const ModuleId& id : modules) plan.mode_overrides[id] = LinearMode::w8a16;
}

// Reads back just what downstream consumers need: the excluded module ids.
inline std::vector<ModuleId> exclusions_from_json(const nlohmann::json& j) {
    std::vector<ModuleId> out;
    for (const auto& jm : j.at("modules"))
        out.push_back({jm.at("layer").get<int32_t>(),
                       parse_module_kind(jm.at("kind").get<std::string>())});
    return out;
}

}  // namespace spikelab
