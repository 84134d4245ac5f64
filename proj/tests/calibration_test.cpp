#include "spikelab/calibration.hpp"

#include <gtest/gtest.h>

#include "spikelab/model.hpp"
#include "test_util.hpp"

using namespace spikelab;
using namespace spikelab::testutil;

namespace {

std::vector<std::vector<int32_t>> make_corpus(const Model& m, int n_samples, int seq_len,
                                              uint64_t seed) {
    std::vector<std::vector<int32_t>> corpus;
    for (int s = 0; s < n_samples; ++s) {
        Rng rng = Rng::fork(seed, static_cast<uint64_t>(s));
        std::vector<int32_t> sample{m.config.bos_id};
        auto rest = random_tokens(seq_len - 1, m.config.vocab_size, rng);
        sample.insert(sample.end(), rest.begin(), rest.end());
        corpus.push_back(std::move(sample));
    }
    return corpus;
}

}  // namespace

TEST(CalibrationTest, ScalesMatchDirectTrace) {
    Model m = make_random_model(small_config(), 201);
    auto corpus = make_corpus(m, 3, 10, 1);
    CalibrationReport rep = run_calibration(m, corpus);

    ASSERT_EQ(rep.modules.size(), static_cast<size_t>(m.config.n_modules()));
    for (size_t s = 0; s < corpus.size(); ++s) {
        TraceRequest req;
        req.logits = false;
        req.tap_scales = true;
        ForwardTrace tr = forward_fp(m, corpus[s], nullptr, req);
        for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
            ASSERT_EQ(rep.module_scales[mi][s].size(), corpus[s].size());
            for (size_t t = 0; t < corpus[s].size(); ++t)
                EXPECT_EQ(rep.module_scales[mi][s][t], tr.tap_scales[mi][t]);
        }
    }
}

TEST(CalibrationTest, HiddenIsMaxOverLayers) {
    Model m = make_random_model(small_config(), 211);
    auto corpus = make_corpus(m, 2, 8, 2);
    CalibrationReport rep = run_calibration(m, corpus);

    TraceRequest req;
    req.logits = false;
    req.hidden_absmax = true;
    ForwardTrace tr = forward_fp(m, corpus[0], nullptr, req);
    for (size_t t = 0; t < corpus[0].size(); ++t) {
        float want = 0.0f;
        for (const auto& layer_row : tr.hidden_absmax) want = std::max(want, layer_row[t]);
        EXPECT_EQ(rep.hidden[0][t], want);
    }
}

TEST(CalibrationTest, StaticScalesAreMaxOver127) {
    Model m = make_random_model(small_config(), 221);
    auto corpus = make_corpus(m, 2, 6, 3);
    CalibrationReport rep = run_calibration(m, corpus);
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
        const auto pool = rep.pool(mi);
        const float maxv = *std::max_element(pool.begin(), pool.end());
        EXPECT_DOUBLE_EQ(rep.static_scales[mi], static_cast<double>(maxv) / 127.0);
    }
}

TEST(CalibrationTest, PrefixDropsLeadingBos) {
    Model m = make_random_model(small_config(), 231);
    auto corpus = make_corpus(m, 2, 7, 4);
    KVCache prefix = build_kv_cache(m, {m.config.bos_id, 5, 9});

    CalibrationOptions opt;
    opt.prefix = &prefix;
    CalibrationReport rep = run_calibration(m, corpus, opt);

    for (size_t s = 0; s < corpus.size(); ++s) {
        std::vector<int32_t> want(corpus[s].begin() + 1, corpus[s].end());
        EXPECT_EQ(rep.tokens[s], want);
        KVCache local = prefix.clone();
        TraceRequest req;
        req.logits = false;
        req.tap_scales = true;
        ForwardTrace tr = forward_fp(m, want, &local, req);
        for (size_t mi = 0; mi < rep.modules.size(); ++mi)
            for (size_t t = 0; t < want.size(); ++t)
                EXPECT_EQ(rep.module_scales[mi][s][t], tr.tap_scales[mi][t]);
    }
    // The shared prefix itself must stay untouched.
    EXPECT_EQ(prefix.cached_len, 3);
}

TEST(CalibrationTest, JobCountDoesNotChangeReport) {
    Model m = make_random_model(small_config(), 241);
    auto corpus = make_corpus(m, 6, 9, 5);
    CalibrationOptions one;
    one.jobs = 1;
    CalibrationOptions four;
    four.jobs = 4;
    const std::string a = calibration_to_json(run_calibration(m, corpus, one)).dump();
    const std::string b = calibration_to_json(run_calibration(m, corpus, four)).dump();
    EXPECT_EQ(a, b);
}

TEST(CalibrationTest, TokenFrequencyOrdering) {
    CalibrationReport rep;
    rep.bos_id = 0;
    rep.tokens = {{0, 2, 2, 7}, {0, 2, 4, 7}};
    auto freq = token_frequency(rep);
    ASSERT_EQ(freq.size(), 3u);
    EXPECT_EQ(freq[0], (std::pair<int32_t, int64_t>{2, 3}));
    // 4 and 7 tie on count? 7 appears twice, 4 once: order 2,7,4.
    EXPECT_EQ(freq[1], (std::pair<int32_t, int64_t>{7, 2}));
    EXPECT_EQ(freq[2], (std::pair<int32_t, int64_t>{4, 1}));
}

TEST(CalibrationTest, TokenFrequencyTieBreaksById) {
    CalibrationReport rep;
    rep.bos_id = 0;
    rep.tokens = {{0, 9, 3}, {0, 3, 9}};
    auto freq = token_frequency(rep);
    ASSERT_EQ(freq.size(), 2u);
    EXPECT_EQ(freq[0].first, 3);
    EXPECT_EQ(freq[1].first, 9);
}

TEST(CalibrationTest, MedianOf) {
    EXPECT_DOUBLE_EQ(median_of({3.0f, 1.0f, 2.0f}), 2.0);
    EXPECT_DOUBLE_EQ(median_of({4.0f, 1.0f, 3.0f, 2.0f}), 2.5);
    EXPECT_DOUBLE_EQ(median_of({5.0f}), 5.0);
    EXPECT_THROW(median_of({}), std::invalid_argument);
}

TEST(CalibrationTest, JsonRoundTrip) {
    Model m = make_random_model(small_config(), 251);
    auto corpus = make_corpus(m, 2, 5, 6);
    CalibrationReport rep = run_calibration(m, corpus);
    rep.model_fingerprint = "deadbeefdeadbeef";
    rep.corpus_seed = 42;

    const nlohmann::json j = calibration_to_json(rep);
    CalibrationReport back = calibration_from_json(j);
    EXPECT_EQ(calibration_to_json(back).dump(), j.dump());
    EXPECT_EQ(back.model_fingerprint, rep.model_fingerprint);
    EXPECT_EQ(back.corpus_seed, 42u);
    EXPECT_EQ(back.module_scales, rep.module_scales);
    EXPECT_EQ(back.tokens, rep.tokens);
    EXPECT_EQ(back.static_scales, rep.static_scales);
}

TEST(CalibrationTest, EmptyCorpusThrows) {
    Model m = make_random_model(small_config(), 261);
    EXPECT_THROW(run_calibration(m, {}), std::invalid_argument);
}
