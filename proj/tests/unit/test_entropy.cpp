#include <gtest/gtest.h>

#include <cmath>

#include "entroscope/entropy.hpp"
#include "oracles.hpp"

using namespace entroscope;

TEST(TokenEntropy, Examples) {
    EXPECT_EQ(token_entropy(std::vector<double>{1.0, 0.0, 0.0}), 0.0);
    EXPECT_NEAR(token_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-12);
    EXPECT_NEAR(token_entropy(std::vector<double>{0.7, 0.2, 0.1}), 0.801819, 1e-6);
    EXPECT_NEAR(token_entropy(std::vector<double>{0.7, 0.2, 0.1}), oracle::entropy({0.7, 0.2, 0.1}), 1e-12);
}

TEST(TokenEntropy, DomainErrors) {
    EXPECT_THROW(token_entropy(std::vector<double>{-0.1, 1.1}), DomainError);
    EXPECT_THROW(token_entropy(std::vector<double>{1.5}), DomainError);
    EXPECT_THROW(token_entropy(std::vector<double>{0.8, 0.8}), DomainError);
    EXPECT_THROW(token_entropy(std::vector<double>{std::nan("")}), DomainError);
}

TEST(TokenEntropy, TinyValuesClampToZero) {
    EXPECT_EQ(token_entropy(std::vector<double>{1.0 - 1e-16, 1e-16}), 0.0);
}

TEST(TopkEntropy, Examples) {
    EXPECT_NEAR(topk_entropy(std::vector<double>{0.7, 0.2, 0.05, 0.05}, 2), 0.571560, 1e-6);
    EXPECT_EQ(topk_entropy(std::vector<double>{1.0}, 1), 0.0);
    EXPECT_EQ(topk_entropy(std::vector<double>{1.0}, 50), 0.0);
    const std::vector<double> d{0.5, 0.3, 0.2};
    EXPECT_EQ(topk_entropy(d, 3), token_entropy(d));
    EXPECT_EQ(topk_entropy(d, 10), token_entropy(d));
    EXPECT_THROW(topk_entropy(std::vector<double>{}, 3), DomainError);
    EXPECT_THROW(topk_entropy(d, 0), DomainError);
}

TEST(TopkEntropy, OracleAgreesWithItself) {
    const std::vector<double> d{0.1, 0.6, 0.05, 0.25};
    const auto all = oracle::topk_entropy_all(d);
    for (std::size_t k = 1; k <= d.size(); ++k) EXPECT_NEAR(all[k - 1], oracle::topk_entropy(d, k), 1e-15);
}

TEST(TopkEntropy, RenormalizedHeadIsItsOwnDistribution) {
    const std::vector<double> d{0.6, 0.2, 0.1, 0.1};
    EXPECT_NEAR(topk_entropy(d, 2, true), oracle::entropy({0.75, 0.25}), 1e-12);
}

TEST(TopkEntropy, MatchesOracleOnRandomDistributions) {
    oracle::TestRng rng{2024};
    for (int trial = 0; trial < 1000; ++trial) {
        auto p = rng.distribution(1 + rng.below(64));
        std::sort(p.begin(), p.end(), std::greater<>());
        const double full = token_entropy(p);
        const double ref = oracle::entropy(p);
        ASSERT_NEAR(full, ref < kEntropyFloor ? 0.0 : ref, 1e-9);
        const auto refs = oracle::topk_entropy_all(p);
        ASSERT_NEAR(refs.back(), ref, 1e-15);
        double prev = 0.0;
        for (int k = 1; k <= static_cast<int>(p.size()); ++k) {
            const double h = topk_entropy(p, k);
            const double r = refs[static_cast<std::size_t>(k - 1)];
            ASSERT_NEAR(h, r < kEntropyFloor ? 0.0 : r, 1e-9);
            ASSERT_GE(h, prev - 1e-15);
            prev = h;
        }
        ASSERT_EQ(topk_entropy(p, static_cast<int>(p.size())), full);
    }
}

namespace {
EntropySeq seq(std::vector<double> v) { return EntropySeq{std::move(v)}; }
}  // namespace

TEST(PenalizedCosine, Examples) {
    EXPECT_NEAR(penalized_cosine(seq({1, 2, 3}), seq({1, 2, 3})), 1.0, 1e-12);
    EXPECT_NEAR(penalized_cosine(seq({1, 0}), seq({0, 1})), 0.0, 1e-12);
    EXPECT_NEAR(penalized_cosine(seq({1, 1}), seq({1, 1, 1, 1})), 0.353553, 1e-6);
    EXPECT_NEAR(penalized_cosine(seq({1, 1}), seq({1, 1, 1, 1})), oracle::cosine_penalized({1, 1}, {1, 1, 1, 1}), 1e-12);
}

TEST(PenalizedCosine, ZeroNormRules) {
    EXPECT_EQ(penalized_cosine(seq({0, 0}), seq({0, 0, 0})), 2.0 / 3.0);
    EXPECT_EQ(penalized_cosine(seq({0, 0}), seq({0, 1})), 0.0);
    EXPECT_THROW(penalized_cosine(seq({}), seq({1})), DomainError);
    EXPECT_THROW(penalized_cosine(seq({1}), seq({})), DomainError);
}

TEST(PenalizedCosine, OracleSymmetryScaleInvariance) {
    oracle::TestRng rng{77};
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> a(1 + rng.below(40)), b(1 + rng.below(40));
        for (auto& x : a) x = rng.uniform() * 3;
        for (auto& x : b) x = rng.uniform() * 3;
        const double s = penalized_cosine(seq(a), seq(b));
        ASSERT_NEAR(s, oracle::cosine_penalized(a, b), 1e-9);
        ASSERT_NEAR(s, penalized_cosine(seq(b), seq(a)), 1e-12);
        const double c = 0.01 + rng.uniform() * 100;
        auto ac = a;
        for (auto& x : ac) x *= c;
        ASSERT_NEAR(s, penalized_cosine(seq(ac), seq(b)), 1e-9);
        ASSERT_GE(s, 0.0);
        ASSERT_LE(s, 1.0);
    }
}

TEST(EntropySequence, ShapeAndErrors) {
    Generation g;
    for (int i = 0; i < 5; ++i) {
        TokenStep s;
        s.token = "t";
        s.logprob = 0.0;
        s.topk = {{"t", 1.0}};
        g.steps.push_back(s);
    }
    const auto e = entropy_sequence(g, 20);
    EXPECT_EQ(e.size(), 5u);
    for (double v : e.values) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(entropy_sequence(Generation{}, 20), DomainError);
}
