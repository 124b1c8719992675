#pragma once

/**
 * Token-level entropy and the length-penalized cosine similarity.
 *
 * All quantities are in nats. Entropies are computed from whatever top-K
 * probabilities a backend reports; the missing tail mass contributes zero
 * unless renormalization is requested, so the truncated value is a lower
 * bound on the full-vocabulary entropy.
 */

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "entroscope/error.hpp"
#include "entroscope/numeric.hpp"
#include "entroscope/types.hpp"

namespace entroscope {

/// Entropies below this are reported as exactly zero.
inline constexpr double kEntropyFloor = 1e-12;

struct EntropySeq {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }
    bool operator==(const EntropySeq&) const = default;
};

inline double token_entropy(std::span<const double> dist) {
    double total = 0.0;
    for (double p : dist) {
        if (!(p >= 0.0 && p <= 1.0)) throw DomainError("probability outside [0, 1]");
        total += p;
    }
    if (total > 1.0 + 1e-6) throw DomainError("probabilities sum above 1");
    std::vector<double> terms;
    terms.reserve(dist.size());
    for (double p : dist) {
        if (p > 0.0) terms.push_back(-p * std::log(p));
    }
    const double h = pairwise_sum(terms);
    return h < kEntropyFloor ? 0.0 : h;
}

/// Entropy over the first min(k, |topk|) entries. `topk` must be descending.
inline double topk_entropy(std::span<const double> topk, int k, bool renormalize = false) {
    if (topk.empty()) throw DomainError("empty top-k distribution");
    if (k < 1) throw DomainError("k must be >= 1");
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), topk.size());
    auto head = topk.first(n);
    if (!renormalize) return token_entropy(head);
    double mass = 0.0;
    for (double p : head) mass += p;
    if (mass <= 0.0) return 0.0;
    std::vector<double> scaled(head.begin(), head.end());
    for (double& p : scaled) p /= mass;
    return token_entropy(scaled);
}

inline EntropySeq entropy_sequence(const Generation& g, int k, bool renormalize = false) {
    if (g.steps.empty()) throw DomainError("empty generation");
    EntropySeq e;
    e.values.reserve(g.steps.size());
    for (const auto& step : g.steps) {
        const auto probs = step.topk_probs();
        e.values.push_back(topk_entropy(probs, k, renormalize));
    }
    return e;
}

struct SimilarityParts {
    double cosine = 0.0;
    double length_penalty = 0.0;
    double score = 0.0;
};

/**
 * Cosine similarity of the two sequences zero-padded to a common length,
 * times min(|a|,|b|) / max(|a|,|b|).
 *
 * A zero-norm side makes the cosine undefined. If both sides are all zero the
 * cosine is taken as 1 (same degenerate profile), otherwise as 0.
 */
inline SimilarityParts penalized_cosine_parts(const EntropySeq& a, const EntropySeq& b) {
    if (a.empty() || b.empty()) throw DomainError("penalized_cosine on an empty sequence");
    const std::size_t shorter = std::min(a.size(), b.size());
    const std::size_t longer = std::max(a.size(), b.size());

    std::vector<double> dot(shorter), aa(a.size()), bb(b.size());
    for (std::size_t i = 0; i < shorter; ++i) dot[i] = a.values[i] * b.values[i];
    for (std::size_t i = 0; i < a.size(); ++i) aa[i] = a.values[i] * a.values[i];
    for (std::size_t i = 0; i < b.size(); ++i) bb[i] = b.values[i] * b.values[i];
    const double na = std::sqrt(pairwise_sum(aa));
    const double nb = std::sqrt(pairwise_sum(bb));

    SimilarityParts out;
    out.length_penalty = static_cast<double>(shorter) / static_cast<double>(longer);
    if (na == 0.0 || nb == 0.0) {
        out.cosine = (na == 0.0 && nb == 0.0) ? 1.0 : 0.0;
    } else {
        out.cosine = std::clamp(pairwise_sum(dot) / (na * nb), 0.0, 1.0);
    }
    out.score = out.cosine * out.length_penalty;
    return out;
}

inline double penalized_cosine(const EntropySeq& a, const EntropySeq& b) {
    return penalized_cosine_parts(a, b).score;
}

inline json to_json(const EntropySeq& e) {
    json arr = json::array();
    for (double v : e.values) arr.push_back(std::round(v * 1e9) / 1e9);
    return arr;
}

}  // namespace entroscope
