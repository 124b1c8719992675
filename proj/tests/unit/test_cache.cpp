#include <gtest/gtest.h>

#include "entroscope/cache.hpp"
#include "fake_backend.hpp"
#include "test_util.hpp"

using namespace entroscope;

namespace {
std::shared_ptr<FakeBackend> scripted() {
    auto fb = std::make_shared<FakeBackend>();
    fb->on("p", FakeBackend::make({{"a", {0.6, 0.4}}, {"b", {1.0}}}));
    fb->on_score("p", {-0.5, -0.25});
    return fb;
}
}  // namespace

TEST(Cache, GreedyHitsSkipInnerBackend) {
    auto fb = scripted();
    CachingBackend cache(fb);
    const auto g1 = cache.generate("p", DecodingParams::greedy());
    const auto g2 = cache.generate("p", DecodingParams::greedy());
    EXPECT_EQ(fb->generate_calls, 1);
    EXPECT_EQ(cache.hits(), 1u);
    EXPECT_EQ(to_json(g1), to_json(g2));
    cache.generate("p", DecodingParams::greedy(5));
    EXPECT_EQ(fb->generate_calls, 2);
}

TEST(Cache, OnlySeededSamplesAreCached) {
    auto fb = scripted();
    CachingBackend cache(fb);
    auto unseeded = DecodingParams::sampled(0.8, 1);
    unseeded.seed.reset();
    cache.generate("p", unseeded);
    cache.generate("p", unseeded);
    EXPECT_EQ(fb->generate_calls, 2);
    cache.generate("p", DecodingParams::sampled(0.8, 1));
    cache.generate("p", DecodingParams::sampled(0.8, 1));
    EXPECT_EQ(fb->generate_calls, 3);
    cache.generate("p", DecodingParams::sampled(0.8, 2));
    EXPECT_EQ(fb->generate_calls, 4);
}

TEST(Cache, ScoringCached) {
    auto fb = scripted();
    CachingBackend cache(fb);
    const std::vector<std::string> toks{"a", "b"};
    EXPECT_EQ(cache.score_response("p", toks), (std::vector<double>{-0.5, -0.25}));
    EXPECT_EQ(cache.score_response("p", toks), (std::vector<double>{-0.5, -0.25}));
    EXPECT_EQ(fb->score_calls, 1);
}

TEST(Cache, PersistsAcrossInstances) {
    TempDir dir;
    const auto file = dir.path() / "cache.jsonl";
    auto fb = scripted();
    const std::vector<std::string> toks{"a", "b"};
    {
        CachingBackend cache(fb, file);
        cache.generate("p", DecodingParams::greedy());
        cache.score_response("p", toks);
    }
    CachingBackend warm(fb, file);
    const auto g = warm.generate("p", DecodingParams::greedy());
    warm.score_response("p", toks);
    EXPECT_EQ(fb->generate_calls, 1);
    EXPECT_EQ(fb->score_calls, 1);
    EXPECT_EQ(warm.generate_calls(), 0u);
    EXPECT_EQ(warm.hits(), 2u);
    EXPECT_EQ(g.text, "ab");
    EXPECT_DOUBLE_EQ(g.steps[0].logprob, std::log(0.6));
}

TEST(Cache, KeysSeparateBackendsAndKinds) {
    const auto p = DecodingParams::greedy();
    EXPECT_NE(generation_cache_key("a", "x", p), generation_cache_key("b", "x", p));
    EXPECT_NE(generation_cache_key("a", "x", p), generation_cache_key("a", "y", p));
    const std::vector<std::string> t{"x"};
    EXPECT_NE(scoring_cache_key("a", "x", t), generation_cache_key("a", "x", p));
}
