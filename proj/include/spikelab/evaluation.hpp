#pragma once
// Quality metrics and micro-benchmarks: corpus perplexity under an execution
// plan, last-hidden-state error between two plans, the ratio-ranked module
// group experiment, and wall-clock latency comparisons.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <sys/resource.h>

#include "spikelab/calibration.hpp"
#include "spikelab/ioutil.hpp"
#include "spikelab/model.hpp"
#include "spikelab/parallel.hpp"
#include "spikelab/qfem.hpp"

namespace spikelab {

// Activation scheme names used across the CLI and reports.
inline QuantSpec parse_act_scheme(const std::string& name) {
    QuantSpec s;
    s.target = QuantTarget::activation;
    if (name == "per-token-dyn") {
        s.granularity = Granularity::per_token;
        s.timing = Timing::dynamic;
    } else if (name == "per-tensor-dyn") {
        s.granularity = Granularity::per_tensor;
        s.timing = Timing::dynamic;
    } else if (name == "per-tensor-static") {
        s.granularity = Granularity::per_tensor;
        s.timing = Timing::static_scale;
    } else {
        throw std::runtime_error("unknown activation scheme '" + name +
                                 "' (per-token-dyn, per-tensor-dyn, per-tensor-static)");
    }
    return s;
}

inline QuantSpec parse_weight_scheme(const std::string& name) {
    QuantSpec s;
    s.target = QuantTarget::weight;
    s.timing = Timing::static_scale;
    if (name == "per-channel") s.granularity = Granularity::per_channel;
    else if (name == "per-tensor") s.granularity = Granularity::per_tensor;
    else throw std::runtime_error("unknown weight scheme '" + name +
                                  "' (per-channel, per-tensor)");
    return s;
}

// Copies calibrated static steps into the plan for every module the report
// covers. Required before preparing a plan with static activation timing.
inline void apply_static_scales(ExecutionPlan& plan, const CalibrationReport& rep) {
    for (size_t mi = 0; mi < rep.modules.size(); ++mi)
        plan.static_scales[rep.modules[mi]] = rep.static_scales[mi];
}

inline ExecutionPlan w8a8_plan(const QuantSpec& act_scheme, bool bmm = false) {
    ExecutionPlan plan;
    plan.default_mode = LinearMode::w8a8;
    plan.act_spec = act_scheme;
    plan.bmm_quant = bmm;
    return plan;
}

inline ExecutionPlan w8a16_plan() {
    ExecutionPlan plan;
    plan.default_mode = LinearMode::w8a16;
    return plan;
}

struct EvalOptions {
    const KVCache* prefix = nullptr;  // samples are fed with their bos dropped
    int jobs = 1;
};

struct PplResult {
    double ppl = 0.0;
    double mean_nll = 0.0;
    int64_t tokens_scored = 0;
};

namespace eval_detail {

// Sum of token NLLs for one sample. Without a prefix the whole sample is fed
// and every position after the first is scored. Behind a prefix the sample's
// bos is dropped and scoring starts at the second fed token, so the scored
// transitions lie entirely inside the sample under both setups.
inline std::pair<double, int64_t> sample_nll(const Model& m, const PreparedPlan& pp,
                                             const std::vector<int32_t>& sample,
                                             const KVCache* prefix) {
    std::vector<int32_t> fed = sample;
    KVCache local(m.config.n_layers);
    KVCache* cache = nullptr;
    if (prefix != nullptr) {
        if (!fed.empty() && fed.front() == m.config.bos_id) fed.erase(fed.begin());
        local = prefix->clone();
        cache = &local;
    }
    if (fed.size() < 2) throw std::invalid_argument("perplexity: sample too short to score");

    ForwardTrace tr = forward(m, fed, cache, pp, TraceRequest{});
    const int64_t V = tr.logits.dim(1);
    double total = 0.0;
    int64_t count = 0;
    for (size_t t = 1; t < fed.size(); ++t) {
        const float* row = tr.logits.data.data() + static_cast<int64_t>(t - 1) * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double lse = 0.0;
        for (int64_t j = 0; j < V; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
        total += mx + std::log(lse) - static_cast<double>(row[fed[t]]);
        ++count;
    }
    return {total, count};
}

}  // namespace eval_detail

inline PplResult perplexity(const Model& m, const PreparedPlan& pp,
                            const std::vector<std::vector<int32_t>>& corpus,
                            const EvalOptions& opt = {}) {
    if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
    std::vector<double> nll(corpus.size());
    std::vector<int64_t> cnt(corpus.size());
    parallel_for(static_cast<int64_t>(corpus.size()), opt.jobs, [&](int64_t i) {
        auto [t, c] = eval_detail::sample_nll(m, pp, corpus[static_cast<size_t>(i)], opt.prefix);
        nll[static_cast<size_t>(i)] = t;
        cnt[static_cast<size_t>(i)] = c;
    });
    PplResult out;
    double total = 0.0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        total += nll[i];
        out.tokens_scored += cnt[i];
    }
    out.mean_nll = total / static_cast<double>(out.tokens_scored);
    out.ppl = std::exp(out.mean_nll);
    return out;
}

// Evaluator handed to optimize_threshold: excluded modules flip to w8a16 on
// top of the base plan, everything else follows the base, perplexity over the
// given corpus. Capture by value so the caller's plan can go away.
inline PplEvaluator exclusion_ppl_evaluator(const Model& m, ExecutionPlan base,
                                            std::vector<ModuleId> module_ids,
                                            std::vector<std::vector<int32_t>> corpus,
                                            int jobs = 1) {
    return [&m, base = std::move(base), ids = std::move(module_ids), corpus = std::move(corpus),
            jobs](const std::vector<size_t>& excluded) {
        ExecutionPlan plan = base;
        plan.mode_overrides.clear();
        for (size_t mi : excluded) plan.mode_overrides[ids.at(mi)] = LinearMode::w8a16;
        EvalOptions opt;
        opt.jobs = jobs;
        return perplexity(m, PreparedPlan::prepare(m, plan), corpus, opt).ppl;
    };
}

// Mean squared per-element difference of the residual stream after the last
// block, between two plans on the same corpus. Symmetric in the plans. With a
// prefix cache both plans run behind clones of the same cache and the
// samples' own BOS is dropped, matching perplexity.
inline double last_hidden_mse(const Model& m, const PreparedPlan& ref, const PreparedPlan& test,
                              const std::vector<std::vector<int32_t>>& corpus,
                              const EvalOptions& opt = {}) {
    if (corpus.empty()) throw std::invalid_argument("last_hidden_mse: empty corpus");
    TraceRequest req;
    req.logits = false;
    req.last_hidden = true;
    std::vector<double> sums(corpus.size());
    std::vector<int64_t> counts(corpus.size());
    parallel_for(static_cast<int64_t>(corpus.size()), opt.jobs, [&](int64_t i) {
        std::vector<int32_t> sample = corpus[static_cast<size_t>(i)];
        if (opt.prefix && !sample.empty() && sample.front() == m.config.bos_id)
            sample.erase(sample.begin());
        const auto run = [&](const PreparedPlan& pp) {
            KVCache local;
            KVCache* cache = nullptr;
            if (opt.prefix) {
                local = opt.prefix->clone();
                cache = &local;
            }
            return forward(m, sample, cache, pp, req).last_hidden;
        };
        const Tensor a = run(ref);
        const Tensor b = run(test);
        double s = 0.0;
        for (size_t k = 0; k < a.data.size(); ++k) {
            const double d = static_cast<double>(a.data[k]) - b.data[k];
            s += d * d;
        }
        sums[static_cast<size_t>(i)] = s;
        counts[static_cast<size_t>(i)] = a.numel();
    });
    double total = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        total += sums[i];
        n += counts[i];
    }
    return total / static_cast<double>(n);
}

struct PartialQuantResult {
    std::string group;
    std::vector<size_t> module_indices;  // ranks taken from the ratio sort
    int32_t group_size = 0;
    bool shrunk = false;  // fewer than 12 modules forced smaller groups
    double ppl = 0.0;
    double mse = 0.0;
};

// Ranks modules by max/median ratio (descending, index ascending on ties) and
// quantizes only the chosen group of 4, everything else full precision.
inline PartialQuantResult partial_quant_experiment(const Model& m, const CalibrationReport& rep,
                                                   const std::string& group,
                                                   const std::vector<std::vector<int32_t>>& corpus,
                                                   int jobs = 1) {
    const size_t n = rep.modules.size();
    const std::vector<double> ratios = module_ratios(rep);
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return ratios[a] > ratios[b]; });

    PartialQuantResult out;
    out.group = group;
    out.group_size = static_cast<int32_t>(std::max<size_t>(1, std::min<size_t>(4, n / 3)));
    out.shrunk = out.group_size < 4;
    const size_t gs = static_cast<size_t>(out.group_size);
    size_t start;
    if (group == "top4") start = 0;
    else if (group == "middle4") start = (n - gs) / 2;
    else if (group == "bottom4") start = n - gs;
    else throw std::runtime_error("unknown group '" + group + "' (top4, middle4, bottom4)");
    for (size_t i = start; i < start + gs; ++i) out.module_indices.push_back(order[i]);

    ExecutionPlan plan;  // fp everywhere except the group
    plan.default_mode = LinearMode::fp;
    plan.act_spec = QuantSpec{QuantTarget::activation, Granularity::per_tensor, Timing::dynamic};
    for (size_t mi : out.module_indices) plan.mode_overrides[rep.modules[mi]] = LinearMode::w8a8;

    const PreparedPlan pp = PreparedPlan::prepare(m, plan);
    const PreparedPlan fp = PreparedPlan::prepare_fp(m);
    EvalOptions eopt;
    eopt.jobs = jobs;
    out.ppl = perplexity(m, pp, corpus, eopt).ppl;
    out.mse = last_hidden_mse(m, fp, pp, corpus, eopt);
    return out;
}

struct BenchResult {
    std::string plan_name;
    double median_ms = 0.0;
    std::vector<double> per_rep_ms;
    uint64_t logits_fingerprint = 0;  // identical across reps by construction
    int64_t tokens = 0;
    int64_t peak_rss_delta_kb = 0;  // process-wide, shared by all plans in the run
};

namespace eval_detail {

inline int64_t peak_rss_kb() {
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    return static_cast<int64_t>(ru.ru_maxrss);
}

}  // namespace eval_detail

// Fixed deterministic token input so repeated runs are comparable.
inline std::vector<int32_t> bench_tokens(const ModelConfig& cfg, int32_t seq_len) {
    std::vector<int32_t> tokens(static_cast<size_t>(seq_len));
    tokens[0] = cfg.bos_id;
    for (int32_t i = 1; i < seq_len; ++i)
        tokens[static_cast<size_t>(i)] = (i * 31 + 7) % cfg.vocab_size;
    return tokens;
}

// Times full-sequence forwards. Plans alternate in blocks of consecutive reps
// with a rotating order per round: blocks let each plan re-establish its own
// cache state after a switch, rotation keeps clock drift from favouring any
// plan. One untimed warm-up per plan; median over all reps.
inline std::vector<BenchResult> bench(const Model& m,
                                      const std::vector<std::pair<std::string, ExecutionPlan>>& plans,
                                      int32_t seq_len, int reps) {
    if (reps < 3) throw std::invalid_argument("bench: need at least 3 repetitions");
    if (plans.empty()) throw std::invalid_argument("bench: no plans");
    const std::vector<int32_t> tokens = bench_tokens(m.config, seq_len);

    std::vector<PreparedPlan> prepared;
    prepared.reserve(plans.size());
    for (const auto& [name, plan] : plans) prepared.push_back(PreparedPlan::prepare(m, plan));

    const int64_t rss_before = eval_detail::peak_rss_kb();
    std::vector<BenchResult> results(plans.size());
    for (size_t p = 0; p < plans.size(); ++p) {
        results[p].plan_name = plans[p].first;
        results[p].tokens = seq_len;
        ForwardTrace tr = forward(m, tokens, nullptr, prepared[p], TraceRequest{});  // warm-up
        results[p].logits_fingerprint =
            fnv1a64(reinterpret_cast<const uint8_t*>(tr.logits.data.data()),
                    tr.logits.data.size() * sizeof(float));
    }
    constexpr int kBlock = 8;
    for (int r0 = 0; r0 < reps; r0 += kBlock) {
        const int block = std::min(kBlock, reps - r0);
        const size_t round = static_cast<size_t>(r0 / kBlock);
        for (size_t q = 0; q < plans.size(); ++q) {
            const size_t p = (q + round) % plans.size();
            for (int b = 0; b < block; ++b) {
                const auto t0 = std::chrono::steady_clock::now();
                ForwardTrace tr = forward(m, tokens, nullptr, prepared[p], TraceRequest{});
                const auto t1 = std::chrono::steady_clock::now();
                results[p].per_rep_ms.push_back(
                    std::chrono::duration<double, std::milli>(t1 - t0).count());
                const uint64_t fp =
                    fnv1a64(reinterpret_cast<const uint8_t*>(tr.logits.data.data()),
                            tr.logits.data.size() * sizeof(float));
                if (fp != results[p].logits_fingerprint)
                    throw std::runtime_error("bench: nondeterministic logits for plan " +
                                             results[p].plan_name);
            }
        }
    }
    const int64_t rss_delta = eval_detail::peak_rss_kb() - rss_before;
    for (auto& res : results) {
        std::vector<double> sorted = res.per_rep_ms;
        std::sort(sorted.begin(), sorted.end());
        const size_t k = sorted.size();
        res.median_ms = k % 2 == 1 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
        res.peak_rss_delta_kb = rss_delta;
    }
    return results;
}

}  // namespace spikelab
