#include "spikelab/qfep.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>

#include "spikelab/evaluation.hpp"
#include "spikelab/synthesizer.hpp"
#include "test_util.hpp"

using namespace spikelab;

namespace {

const Model& spike_model() {
    static const Model m = synthesize_model(SynthConfig{});
    return m;
}

std::vector<std::vector<int32_t>> spiky_corpus(const Model& m, uint64_t seed) {
    CorpusOptions opt;
    opt.samples = 24;
    opt.seq_len = 48;
    opt.spike_rate = 1.0;
    opt.seed = seed;
    return sample_corpus(m, opt);
}

const CalibrationReport& spike_report() {
    static const CalibrationReport rep = [] {
        CalibrationOptions opt;
        opt.jobs = 4;
        return run_calibration(spike_model(), spiky_corpus(spike_model(), 41), opt);
    }();
    return rep;
}

PrefixSearchOptions fast_search() {
    PrefixSearchOptions opt;
    opt.jobs = 4;
    return opt;
}

}  // namespace

TEST(Candidates, SpikeTokenRanksFirst) {
    const auto cands = find_candidate_tokens(spike_report(), 3);
    ASSERT_EQ(cands.size(), 3u);
    EXPECT_EQ(cands[0], spike_model().spike->spike_token);
    EXPECT_EQ(find_candidate_tokens(spike_report(), 1), std::vector<int32_t>{cands[0]});
}

TEST(Candidates, TopCandidateIsArgmaxOfTokenScales) {
    const CalibrationReport& rep = spike_report();
    const size_t target = target_module_index(module_ratios(rep));
    float best_scale = -1.0f;
    int32_t best_tok = -1;
    for (size_t s = 0; s < rep.tokens.size(); ++s)
        for (size_t t = 0; t < rep.tokens[s].size(); ++t)
            if (rep.module_scales[target][s][t] > best_scale) {
                best_scale = rep.module_scales[target][s][t];
                best_tok = rep.tokens[s][t];
            }
    EXPECT_EQ(find_candidate_tokens(rep, 1).front(), best_tok);
}

TEST(Candidates, UniformScalesSignalNoSpikes) {
    CalibrationReport rep;
    rep.bos_id = 0;
    rep.modules = {{0, ModuleKind::qkv}};
    rep.module_scales = {{{2.0f, 2.0f, 2.0f}}};
    rep.tokens = {{0, 5, 7}};
    EXPECT_THROW(find_candidate_tokens(rep, 3), QfepInapplicable);
}

TEST(Candidates, BadArgumentsThrow) {
    EXPECT_THROW(find_candidate_tokens(CalibrationReport{}, 3), std::invalid_argument);
    EXPECT_THROW(find_candidate_tokens(spike_report(), 0), std::invalid_argument);
}

TEST(Search, FindsContextAndSpikeToken) {
    const Model& m = spike_model();
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult res = search_prefix(m, spike_report(), cands, fast_search());

    ASSERT_EQ(res.prefix.size(), 3u);
    EXPECT_EQ(res.prefix[0], m.config.bos_id);
    EXPECT_EQ(res.prefix[2], m.spike->spike_token);
    EXPECT_EQ(res.candidate_rank, 0);
    EXPECT_EQ(res.target_module, (ModuleId{m.spike->spike_layer, ModuleKind::down}));
    EXPECT_GE(res.spike_ratio, 5.0);
}

TEST(Search, AgreesWithExhaustivePairSweep) {
    const Model& m = spike_model();
    const CalibrationReport& rep = spike_report();
    const auto cands = find_candidate_tokens(rep, 3);
    const PrefixResult res = search_prefix(m, rep, cands, fast_search());

    // Replay the search by hand for the winning candidate over the whole
    // context pool and keep the best passing pair.
    const size_t target = target_module_index(module_ratios(rep));
    const double tau = 4.0;
    double best_ratio = -1.0;
    int32_t best_t = -1;
    for (const auto& [t_tok, count] : token_frequency(rep)) {
        TraceRequest req;
        req.logits = false;
        req.tap_scales = true;
        const auto tr = forward_fp(
            m, {m.config.bos_id, t_tok, res.prefix[2], t_tok, res.prefix[2]}, nullptr, req);
        const auto& s = tr.tap_scales[target];
        const double med = median_of({s[0], s[1], s[3]});
        const double c1 = s[2], c2 = s[4];
        if (c2 <= 0.0 || med <= 0.0) continue;
        if (c1 / med >= tau && c2 / med < tau / 2.0 && c1 / c2 > best_ratio) {
            best_ratio = c1 / c2;
            best_t = t_tok;
        }
    }
    EXPECT_EQ(res.prefix[1], best_t);
    EXPECT_DOUBLE_EQ(res.spike_ratio, best_ratio);
}

TEST(Search, DeterministicAcrossRunsAndJobCounts) {
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult a = search_prefix(spike_model(), spike_report(), cands, fast_search());
    const PrefixResult b = search_prefix(spike_model(), spike_report(), cands, fast_search());
    PrefixSearchOptions serial = fast_search();
    serial.jobs = 1;
    const PrefixResult c = search_prefix(spike_model(), spike_report(), cands, serial);
    EXPECT_EQ(a.prefix, b.prefix);
    EXPECT_EQ(a.prefix, c.prefix);
    EXPECT_DOUBLE_EQ(a.spike_ratio, b.spike_ratio);
    EXPECT_DOUBLE_EQ(a.spike_ratio, c.spike_ratio);
}

TEST(Search, NoContextVariantCannotCertifyTameRepeatHere) {
    // Without a context token the surrounding median collapses to the BOS
    // scale, which is far below the tame level; the repeat occurrence then
    // looks spiky relative to it and every pair fails. The error still
    // reports the huge first/second ratio the probe saw.
    PrefixSearchOptions opt = fast_search();
    opt.with_context = false;
    const auto cands = find_candidate_tokens(spike_report(), 3);
    try {
        search_prefix(spike_model(), spike_report(), cands, opt);
        FAIL() << "expected QfepInapplicable";
    } catch (const QfepInapplicable& e) {
        EXPECT_GT(e.best_ratio, 100.0);
    }
}

TEST(Search, RepeatSpikesBlockThePrefix) {
    SynthConfig sc;
    sc.spike_mode = SpikeMode::static_spike;
    const Model m = synthesize_model(sc);
    CalibrationOptions cal;
    cal.jobs = 4;
    const auto rep = run_calibration(m, spiky_corpus(m, 43), cal);
    const auto cands = find_candidate_tokens(rep, 3);
    EXPECT_EQ(cands.front(), m.spike->spike_token);
    try {
        search_prefix(m, rep, cands, fast_search());
        FAIL() << "expected QfepInapplicable";
    } catch (const QfepInapplicable& e) {
        EXPECT_LT(e.best_ratio, 2.0);  // both occurrences spike alike
    }
}

TEST(Search, TameModelHasNothingToAbsorb) {
    SynthConfig sc;
    sc.spike_mode = SpikeMode::none;
    const Model m = synthesize_model(sc);
    CorpusOptions copt;
    copt.samples = 24;
    copt.seq_len = 48;
    copt.spike_rate = 0.0;
    copt.seed = 44;
    CalibrationOptions cal;
    cal.jobs = 4;
    const auto rep = run_calibration(m, sample_corpus(m, copt), cal);
    const auto cands = find_candidate_tokens(rep, 3);
    try {
        search_prefix(m, rep, cands, fast_search());
        FAIL() << "expected QfepInapplicable";
    } catch (const QfepInapplicable& e) {
        EXPECT_LT(e.best_ratio, 1.5);
    }
}

TEST(Cache, LengthThreeAndReproducible) {
    const Model& m = spike_model();
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult res = search_prefix(m, spike_report(), cands, fast_search());

    const KVCache a = prepare_prefix_cache(m, res);
    EXPECT_EQ(a.cached_len, 3);
    ASSERT_EQ(a.keys.size(), static_cast<size_t>(m.config.n_layers));
    const KVCache b = prepare_prefix_cache(m, res);
    for (size_t l = 0; l < a.keys.size(); ++l) {
        EXPECT_EQ(a.keys[l], b.keys[l]);
        EXPECT_EQ(a.values[l], b.values[l]);
    }

    PrefixResult bad = res;
    bad.prefix[0] = 5;
    EXPECT_THROW(prepare_prefix_cache(m, bad), std::invalid_argument);
}

TEST(Cache, BehindCacheMatchesConcatenatedForward) {
    const Model& m = spike_model();
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult res = search_prefix(m, spike_report(), cands, fast_search());
    const KVCache cache = prepare_prefix_cache(m, res);

    std::vector<int32_t> fed = spiky_corpus(m, 53)[0];
    fed.erase(fed.begin());  // drop the sample's own BOS

    KVCache behind = cache.clone();
    const ForwardTrace tr_cached = forward_fp(m, fed, &behind);

    std::vector<int32_t> concat = res.prefix;
    concat.insert(concat.end(), fed.begin(), fed.end());
    const ForwardTrace tr_full = forward_fp(m, concat);

    for (size_t t = 0; t < fed.size(); ++t)
        for (int64_t d = 0; d < m.config.vocab_size; ++d) {
            const float got = tr_cached.logits.at(static_cast<int64_t>(t), d);
            const float want = tr_full.logits.at(static_cast<int64_t>(t + 3), d);
            ASSERT_NEAR(got, want, 1e-4f);
        }
}

TEST(Absorption, FreshSpikesVanishBehindPrefix) {
    const Model& m = spike_model();
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult res = search_prefix(m, spike_report(), cands, fast_search());
    const KVCache cache = prepare_prefix_cache(m, res);

    const auto fresh = spiky_corpus(m, 77);
    const auto mi = static_cast<size_t>(module_index(res.target_module));

    CalibrationOptions plain;
    plain.jobs = 4;
    const double without = max_median_ratio(run_calibration(m, fresh, plain).pool(mi));

    KVCache clone = cache.clone();
    CalibrationOptions behind = plain;
    behind.prefix = &clone;
    const double with_prefix = max_median_ratio(run_calibration(m, fresh, behind).pool(mi));

    EXPECT_GE(without, 10.0);
    EXPECT_LT(with_prefix, 4.0);
}

TEST(Eval, QuantizedPerplexityRecoversBehindPrefix) {
    const Model& m = spike_model();
    const auto cands = find_candidate_tokens(spike_report(), 3);
    const PrefixResult res = search_prefix(m, spike_report(), cands, fast_search());
    const KVCache cache = prepare_prefix_cache(m, res);

    const auto fresh = spiky_corpus(m, 77);
    const auto fp = PreparedPlan::prepare_fp(m);
    const auto quant = PreparedPlan::prepare(m, w8a8_plan(parse_act_scheme("per-tensor-dyn")));

    EvalOptions plain;
    plain.jobs = 4;
    EvalOptions behind = plain;
    behind.prefix = &cache;
    check_prefix_capacity(m, cache, fresh);

    const double ppl_fp = perplexity(m, fp, fresh, plain).ppl;
    const double ppl_q = perplexity(m, quant, fresh, plain).ppl;
    const double ppl_fp_b = perplexity(m, fp, fresh, behind).ppl;
    const double ppl_q_b = perplexity(m, quant, fresh, behind).ppl;

    EXPECT_GE(ppl_q, 1.5 * ppl_fp);
    EXPECT_LE(ppl_q_b, 1.05 * ppl_fp_b);
}

TEST(Eval, CapacityCheckRejectsOverlongSamples) {
    const Model& m = spike_model();
    KVCache cache;
    cache.cached_len = 3;

    std::vector<int32_t> fits(static_cast<size_t>(m.config.max_positions) - 3, 7);
    fits[0] = m.config.bos_id;  // fed length max_positions - 4
    EXPECT_NO_THROW(check_prefix_capacity(m, cache, {fits}));

    std::vector<int32_t> too_long(static_cast<size_t>(m.config.max_positions), 7);
    too_long[0] = m.config.bos_id;  // fed length max_positions - 1
    EXPECT_THROW(check_prefix_capacity(m, cache, {too_long}), std::runtime_error);

    EXPECT_THROW(check_prefix_capacity(m, cache, {{m.config.bos_id, 7}}), std::invalid_argument);
}

TEST(Artifact, JsonRoundTrips) {
    PrefixResult res;
    res.prefix = {256, 119, 39};
    res.target_module = {2, ModuleKind::down};
    res.spike_ratio = 3085.8116;
    res.candidate_rank = 0;

    const nlohmann::json j = prefix_to_json(res, "mfp", "w'");
    EXPECT_EQ(j.at("prefix_text"), "w'");
    EXPECT_EQ(j.at("model_fingerprint"), "mfp");

    const PrefixResult back = prefix_from_json(j);
    EXPECT_EQ(back.prefix, res.prefix);
    EXPECT_EQ(back.target_module, res.target_module);
    EXPECT_DOUBLE_EQ(back.spike_ratio, res.spike_ratio);
    EXPECT_EQ(back.candidate_rank, 0);

    const nlohmann::json bare = prefix_to_json(res, "mfp");
    EXPECT_FALSE(bare.contains("prefix_text"));
}
