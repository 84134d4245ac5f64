#include "spikelab/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "spikelab/synthesizer.hpp"
#include "test_util.hpp"

namespace spikelab {
namespace {

using testutil::make_random_model;
using testutil::random_tokens;
using testutil::small_config;

TEST(SchemeNames, ActSchemesParse) {
    QuantSpec a = parse_act_scheme("per-token-dyn");
    EXPECT_EQ(a.granularity, Granularity::per_token);
    EXPECT_EQ(a.timing, Timing::dynamic);
    QuantSpec b = parse_act_scheme("per-tensor-dyn");
    EXPECT_EQ(b.granularity, Granularity::per_tensor);
    EXPECT_EQ(b.timing, Timing::dynamic);
    QuantSpec c = parse_act_scheme("per-tensor-static");
    EXPECT_EQ(c.granularity, Granularity::per_tensor);
    EXPECT_EQ(c.timing, Timing::static_scale);
    EXPECT_THROW(parse_act_scheme("per-channel-dyn"), std::runtime_error);

    EXPECT_EQ(parse_weight_scheme("per-channel").granularity, Granularity::per_channel);
    EXPECT_EQ(parse_weight_scheme("per-tensor").granularity, Granularity::per_tensor);
    EXPECT_THROW(parse_weight_scheme("per-token"), std::runtime_error);
}

TEST(Perplexity, UniformLogitsGiveVocabSize) {
    Model m = make_random_model(small_config(), 301);
    m.weights.lm_head = Tensor::zeros(m.weights.lm_head.shape);
    Rng rng(1);
    std::vector<std::vector<int32_t>> corpus;
    for (int s = 0; s < 3; ++s) corpus.push_back(random_tokens(10, m.config.vocab_size, rng));
    const PplResult r = perplexity(m, PreparedPlan::prepare_fp(m), corpus);
    EXPECT_NEAR(r.ppl, static_cast<double>(m.config.vocab_size), 1e-9);
    EXPECT_EQ(r.tokens_scored, 3 * 9);
}

TEST(Perplexity, CertainModelScoresOne) {
    Model m = make_random_model(small_config(), 302, 0.0f);
    for (float& v : m.weights.embedding.data) v = 0.0f;
    for (int32_t id = 0; id < m.config.vocab_size; ++id) m.weights.embedding.at(id, 0) = 2.0f;
    m.weights.lm_head = Tensor::zeros(m.weights.lm_head.shape);
    m.weights.lm_head.at(0, 5) = 1000.0f;  // always predicts token 5
    std::vector<std::vector<int32_t>> corpus = {{m.config.bos_id, 5, 5, 5, 5}};
    const PplResult r = perplexity(m, PreparedPlan::prepare_fp(m), corpus);
    EXPECT_EQ(r.ppl, 1.0);
}

TEST(Perplexity, MatchesHandComputedNll) {
    Model m = make_random_model(small_config(), 303, 0.0f);
    for (float& v : m.weights.embedding.data) v = 0.0f;
    for (int32_t id = 0; id < m.config.vocab_size; ++id) m.weights.embedding.at(id, 0) = 2.0f;
    m.weights.lm_head = Tensor::zeros(m.weights.lm_head.shape);
    // After rmsnorm the feeding coordinate is 4.0 for every token.
    m.weights.lm_head.at(0, 0) = 0.1f;
    m.weights.lm_head.at(0, 1) = 0.4f;
    m.weights.lm_head.at(0, 2) = 0.25f;
    const int32_t V = m.config.vocab_size;
    // One rmsnorm feeds the head: coordinate 2 / sqrt(4/16 + eps).
    const double xn0 = 2.0 / std::sqrt(0.25 + 1e-5);
    const auto col = [&](int32_t j) {
        return j == 0 ? 0.1 : j == 1 ? 0.4 : j == 2 ? 0.25 : 0.0;
    };
    const auto nll_of = [&](int32_t target) {
        double lse = 0.0;
        for (int32_t j = 0; j < V; ++j) lse += std::exp(col(j) * xn0);
        return std::log(lse) - col(target) * xn0;
    };
    std::vector<std::vector<int32_t>> corpus = {{m.config.bos_id, 2}, {m.config.bos_id, 1}};
    const PplResult r = perplexity(m, PreparedPlan::prepare_fp(m), corpus);
    const double want = std::exp(0.5 * (nll_of(2) + nll_of(1)));
    EXPECT_NEAR(r.ppl, want, 1e-5);
    EXPECT_EQ(r.tokens_scored, 2);
}

TEST(Perplexity, PrefixDropsBosAndScoresFromSecondFedToken) {
    Model m = make_random_model(small_config(), 304);
    const KVCache cache = build_kv_cache(m, {m.config.bos_id, 7, 9});
    const std::vector<int32_t> sample = {m.config.bos_id, 11, 13, 17};

    EvalOptions opt;
    opt.prefix = &cache;
    const PplResult r = perplexity(m, PreparedPlan::prepare_fp(m), {sample}, opt);
    EXPECT_EQ(r.tokens_scored, 2);  // targets 13 and 17, not 11

    KVCache work = cache.clone();
    const ForwardTrace tr = forward_fp(m, {11, 13, 17}, &work);
    const int64_t V = tr.logits.dim(1);
    double total = 0.0;
    const int32_t targets[2] = {13, 17};
    for (int t = 0; t < 2; ++t) {
        const float* row = tr.logits.data.data() + static_cast<int64_t>(t) * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double lse = 0.0;
        for (int64_t j = 0; j < V; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
        total += mx + std::log(lse) - static_cast<double>(row[targets[t]]);
    }
    EXPECT_NEAR(r.mean_nll, total / 2.0, 1e-12);
}

TEST(Perplexity, JobCountDoesNotChangeResult) {
    Model m = make_random_model(small_config(), 305);
    Rng rng(2);
    std::vector<std::vector<int32_t>> corpus;
    for (int s = 0; s < 6; ++s) corpus.push_back(random_tokens(12, m.config.vocab_size, rng));
    const PreparedPlan pp = PreparedPlan::prepare(
        m, w8a8_plan(parse_act_scheme("per-tensor-dyn")));
    EvalOptions j1, j3;
    j1.jobs = 1;
    j3.jobs = 3;
    EXPECT_EQ(perplexity(m, pp, corpus, j1).ppl, perplexity(m, pp, corpus, j3).ppl);
}

TEST(Perplexity, QuantizedPlanNeverBeatsFloorOfOne) {
    Model m = make_random_model(small_config(), 306);
    Rng rng(3);
    std::vector<std::vector<int32_t>> corpus = {random_tokens(16, m.config.vocab_size, rng)};
    for (const char* scheme : {"per-token-dyn", "per-tensor-dyn"}) {
        const PreparedPlan pp = PreparedPlan::prepare(m, w8a8_plan(parse_act_scheme(scheme)));
        const double ppl = perplexity(m, pp, corpus).ppl;
        EXPECT_TRUE(std::isfinite(ppl));
        EXPECT_GE(ppl, 1.0);
    }
}

TEST(Mse, ZeroAgainstItselfSymmetricOtherwise) {
    Model m = make_random_model(small_config(), 307);
    Rng rng(4);
    std::vector<std::vector<int32_t>> corpus = {random_tokens(10, m.config.vocab_size, rng),
                                                random_tokens(10, m.config.vocab_size, rng)};
    const PreparedPlan fp = PreparedPlan::prepare_fp(m);
    const PreparedPlan q16 = PreparedPlan::prepare(m, w8a16_plan());
    EXPECT_EQ(last_hidden_mse(m, fp, fp, corpus), 0.0);
    const double ab = last_hidden_mse(m, fp, q16, corpus);
    const double ba = last_hidden_mse(m, q16, fp, corpus);
    EXPECT_GT(ab, 0.0);
    EXPECT_EQ(ab, ba);
}

TEST(Mse, MatchesDirectComputation) {
    Model m = make_random_model(small_config(), 308);
    Rng rng(5);
    const std::vector<int32_t> sample = random_tokens(9, m.config.vocab_size, rng);
    const PreparedPlan fp = PreparedPlan::prepare_fp(m);
    const PreparedPlan q = PreparedPlan::prepare(m, w8a8_plan(parse_act_scheme("per-token-dyn")));
    TraceRequest req;
    req.logits = false;
    req.last_hidden = true;
    const Tensor a = forward(m, sample, nullptr, fp, req).last_hidden;
    const Tensor b = forward(m, sample, nullptr, q, req).last_hidden;
    double want = 0.0;
    for (size_t k = 0; k < a.data.size(); ++k) {
        const double d = static_cast<double>(a.data[k]) - b.data[k];
        want += d * d;
    }
    want /= static_cast<double>(a.numel());
    EXPECT_DOUBLE_EQ(last_hidden_mse(m, fp, q, {sample}), want);
}

TEST(PartialQuant, RankingMatchesSortOracle) {
    ModelConfig cfg = small_config();
    cfg.n_layers = 3;  // 12 modules, full-size groups
    Model m = make_random_model(cfg, 309);
    Rng rng(6);
    std::vector<std::vector<int32_t>> corpus;
    for (int s = 0; s < 4; ++s) corpus.push_back(random_tokens(12, cfg.vocab_size, rng));
    const CalibrationReport rep = run_calibration(m, corpus);

    std::vector<double> ratios(rep.modules.size());
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
        const auto pool = rep.pool(mi);
        ratios[mi] = *std::max_element(pool.begin(), pool.end()) / median_of(pool);
    }
    std::vector<size_t> order(ratios.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return ratios[a] > ratios[b]; });

    const auto top = partial_quant_experiment(m, rep, "top4", corpus);
    const auto mid = partial_quant_experiment(m, rep, "middle4", corpus);
    const auto bot = partial_quant_experiment(m, rep, "bottom4", corpus);
    EXPECT_FALSE(top.shrunk);
    EXPECT_EQ(top.module_indices, std::vector<size_t>(order.begin(), order.begin() + 4));
    EXPECT_EQ(mid.module_indices, std::vector<size_t>(order.begin() + 4, order.begin() + 8));
    EXPECT_EQ(bot.module_indices, std::vector<size_t>(order.begin() + 8, order.end()));
    for (const auto& res : {top, mid, bot}) {
        EXPECT_GE(res.ppl, 1.0);
        EXPECT_GE(res.mse, 0.0);
    }
}

TEST(PartialQuant, SmallModuleCountShrinksGroups) {
    Model m = make_random_model(small_config(), 310);  // 2 layers, 8 modules
    Rng rng(7);
    std::vector<std::vector<int32_t>> corpus = {random_tokens(10, m.config.vocab_size, rng)};
    const CalibrationReport rep = run_calibration(m, corpus);
    const auto mid = partial_quant_experiment(m, rep, "middle4", corpus);
    EXPECT_TRUE(mid.shrunk);
    EXPECT_EQ(mid.group_size, 2);
    EXPECT_EQ(mid.module_indices.size(), 2u);
    EXPECT_THROW(partial_quant_experiment(m, rep, "top5", corpus), std::runtime_error);
}

TEST(PartialQuant, SpikeModuleLandsInTopGroup) {
    SynthConfig sc;
    const Model m = synthesize_model(sc);
    CorpusOptions opt;
    opt.samples = 8;
    opt.seq_len = 32;
    opt.spike_rate = 1.0;
    opt.seed = 31;
    const auto corpus = sample_corpus(m, opt);
    const CalibrationReport rep = run_calibration(m, corpus);
    const auto top = partial_quant_experiment(m, rep, "top4", corpus);
    const auto target = static_cast<size_t>(module_index({m.spike->spike_layer, ModuleKind::down}));
    EXPECT_EQ(top.module_indices.front(), target);
}

TEST(Bench, ShapesAndDeterminism) {
    Model m = make_random_model(small_config(), 311);
    std::vector<std::pair<std::string, ExecutionPlan>> plans = {
        {"fp", ExecutionPlan::fp()},
        {"w8a8", w8a8_plan(parse_act_scheme("per-tensor-dyn"))},
    };
    const auto results = bench(m, plans, 16, 3);
    ASSERT_EQ(results.size(), 2u);
    for (const auto& r : results) {
        EXPECT_EQ(r.per_rep_ms.size(), 3u);
        EXPECT_GT(r.median_ms, 0.0);
        EXPECT_EQ(r.tokens, 16);
    }
    EXPECT_NE(results[0].logits_fingerprint, results[1].logits_fingerprint);
    EXPECT_THROW(bench(m, plans, 16, 2), std::invalid_argument);
}

TEST(Bench, TokenInputIsFixed) {
    const ModelConfig cfg = small_config();
    const auto a = bench_tokens(cfg, 12);
    const auto b = bench_tokens(cfg, 12);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a[0], cfg.bos_id);
    for (int32_t t : a) {
        EXPECT_GE(t, 0);
        EXPECT_LT(t, cfg.vocab_size);
    }
}

TEST(StaticScales, CalibratedPlanRunsAndStaysSane) {
    Model m = make_random_model(small_config(), 312);
    Rng rng(8);
    std::vector<std::vector<int32_t>> corpus;
    for (int s = 0; s < 4; ++s) corpus.push_back(random_tokens(12, m.config.vocab_size, rng));
    const CalibrationReport rep = run_calibration(m, corpus);
    ExecutionPlan plan = w8a8_plan(parse_act_scheme("per-tensor-static"));
    apply_static_scales(plan, rep);
    const double ppl = perplexity(m, PreparedPlan::prepare(m, plan), corpus).ppl;
    EXPECT_TRUE(std::isfinite(ppl));
    EXPECT_GE(ppl, 1.0);
}

}  // namespace
}  // namespace spikelab
