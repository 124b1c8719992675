#pragma once

/**
 * Detection-quality statistics.
 *
 * Members are the positive class. A score "predicts member" when it is at or
 * above the threshold. Ties between a member and a non-member count as half a
 * correctly ordered pair, which is exactly what the trapezoidal ROC area
 * gives, so auc() and trapezoid_area(roc_curve()) agree to rounding.
 */

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "entroscope/error.hpp"
#include "entroscope/jsonl.hpp"
#include "entroscope/numeric.hpp"
#include "entroscope/rng.hpp"

namespace entroscope {

struct LabeledScore {
    double score = 0.0;
    bool member = false;
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct ClassCounts {
    std::size_t members = 0;
    std::size_t nonmembers = 0;
};

inline ClassCounts count_classes(std::span<const LabeledScore> s) {
    ClassCounts c;
    for (const auto& x : s) (x.member ? c.members : c.nonmembers)++;
    return c;
}

inline ClassCounts require_two_classes(std::span<const LabeledScore> s) {
    const auto c = count_classes(s);
    if (c.members == 0 || c.nonmembers == 0) throw DomainError("need at least one member and one non-member");
    return c;
}

/// Mann-Whitney U over n_members * n_nonmembers, via mid-ranks.
inline double auc(std::span<const LabeledScore> scores) {
    const auto c = require_two_classes(scores);
    std::vector<LabeledScore> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    std::vector<double> member_ranks;
    for (std::size_t i = 0; i < s.size();) {
        std::size_t j = i;
        while (j < s.size() && s[j].score == s[i].score) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (s[k].member) member_ranks.push_back(mid);
        i = j;
    }
    const double np = static_cast<double>(c.members), nn = static_cast<double>(c.nonmembers);
    const double u = pairwise_sum(member_ranks) - np * (np + 1.0) / 2.0;
    return u / (np * nn);
}

/// ROC points from (0,0) to (1,1), one per distinct score, thresholds descending.
inline std::vector<RocPoint> roc_curve(std::span<const LabeledScore> scores) {
    const auto c = require_two_classes(scores);
    std::vector<LabeledScore> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<RocPoint> roc{{0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size();) {
        std::size_t j = i;
        while (j < s.size() && s[j].score == s[i].score) {
            (s[j].member ? tp : fp)++;
            ++j;
        }
        roc.push_back({static_cast<double>(fp) / static_cast<double>(c.nonmembers),
                       static_cast<double>(tp) / static_cast<double>(c.members)});
        i = j;
    }
    return roc;
}

inline double trapezoid_area(std::span<const RocPoint> roc) {
    std::vector<double> parts;
    for (std::size_t i = 1; i < roc.size(); ++i)
        parts.push_back((roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0);
    return pairwise_sum(parts);
}

struct ThresholdStats {
    double threshold = 0.0;
    double tpr = 0.0;
    double fpr = 0.0;
    double youden_j = 0.0;
    double f1 = 0.0;
};

/// Confusion-matrix statistics for the rule "member iff score >= threshold".
inline ThresholdStats stats_at(std::span<const LabeledScore> scores, double threshold) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (const auto& s : scores) {
        const bool pred = s.score >= threshold;
        if (s.member) (pred ? tp : fn)++;
        else (pred ? fp : tn)++;
    }
    ThresholdStats st;
    st.threshold = threshold;
    st.tpr = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    st.fpr = fp + tn ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0;
    st.youden_j = st.tpr - st.fpr;
    const double denom = static_cast<double>(2 * tp + fp + fn);
    st.f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    return st;
}

/**
 * Threshold maximizing J = TPR - FPR over the observed score values. Ties in
 * J go to the higher TPR; a remaining tie (same confusion matrix) to the
 * higher threshold.
 */
inline ThresholdStats youden_f1(std::span<const LabeledScore> scores) {
    require_two_classes(scores);
    std::vector<double> cands;
    for (const auto& s : scores) cands.push_back(s.score);
    std::sort(cands.begin(), cands.end(), std::greater<>());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    ThresholdStats best = stats_at(scores, cands.front());
    for (std::size_t i = 1; i < cands.size(); ++i) {
        const auto st = stats_at(scores, cands[i]);
        if (st.youden_j > best.youden_j || (st.youden_j == best.youden_j && st.tpr > best.tpr)) best = st;
    }
    return best;
}

struct EvalReport {
    std::string detector;
    double auc = 0.0;
    std::vector<RocPoint> roc;
    double youden_threshold = 0.0;
    double f1_at_youden = 0.0;
    std::size_t n_members = 0;
    std::size_t n_nonmembers = 0;
};

inline EvalReport evaluate(const std::string& detector, std::span<const LabeledScore> scores) {
    EvalReport r;
    r.detector = detector;
    const auto c = require_two_classes(scores);
    r.n_members = c.members;
    r.n_nonmembers = c.nonmembers;
    r.auc = auc(scores);
    r.roc = roc_curve(scores);
    const auto y = youden_f1(scores);
    r.youden_threshold = y.threshold;
    r.f1_at_youden = y.f1;
    return r;
}

inline json to_json(const EvalReport& r) {
    json roc = json::array();
    for (const auto& p : r.roc) roc.push_back(json::array({p.fpr, p.tpr}));
    return json{{"detector", r.detector},          {"auc", r.auc},
                {"roc", roc},                      {"youden_threshold", r.youden_threshold},
                {"f1_at_youden", r.f1_at_youden}, {"n_members", r.n_members},
                {"n_nonmembers", r.n_nonmembers}};
}

inline EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.detector = j.at("detector").get<std::string>();
    r.auc = j.at("auc").get<double>();
    for (const auto& p : j.at("roc")) r.roc.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    r.youden_threshold = j.at("youden_threshold").get<double>();
    r.f1_at_youden = j.at("f1_at_youden").get<double>();
    r.n_members = j.at("n_members").get<std::size_t>();
    r.n_nonmembers = j.at("n_nonmembers").get<std::size_t>();
    return r;
}

/// Size of a bottom-q subset: max(1, floor(q * n)).
inline std::size_t quantile_size(double q, std::size_t n) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(q * static_cast<double>(n) + 1e-9)));
}

/// The quantile_size(q, n) ids with the lowest aux score; ties go to the smaller id.
inline std::vector<std::string> quantile_subset(const std::vector<std::string>& ids,
                                                const std::unordered_map<std::string, double>& aux, double q) {
    if (!(q > 0.0 && q <= 1.0)) throw DomainError("quantile must be in (0, 1]");
    std::vector<std::pair<double, std::string>> keyed;
    for (const auto& id : ids) {
        auto it = aux.find(id);
        if (it == aux.end()) throw DomainError("no aux score for item '" + id + "'");
        keyed.emplace_back(it->second, id);
    }
    std::sort(keyed.begin(), keyed.end());
    keyed.resize(std::min(keyed.size(), quantile_size(q, ids.size())));
    std::vector<std::string> out;
    for (auto& [_, id] : keyed) out.push_back(std::move(id));
    return out;
}

/// Seeded uniform sample without replacement; returned in input order.
inline std::vector<std::string> random_control_subset(const std::vector<std::string>& ids, std::size_t size, std::uint64_t seed) {
    if (size < 1 || size > ids.size()) throw DomainError("control subset size must be in [1, n]");
    Rng rng(seed);
    auto picked = rng.sample_without_replacement(ids.size(), size);
    std::sort(picked.begin(), picked.end());
    std::vector<std::string> out;
    for (auto i : picked) out.push_back(ids[i]);
    return out;
}

struct DualStageConfig {
    std::string aux_detector = "ppl";
    std::vector<double> quantiles = {1.0, 0.9, 0.8, 0.6, 0.3, 0.1};
    std::uint64_t control_seed = 7;

    void validate() const {
        if (quantiles.empty()) throw ValidationError("no quantiles");
        for (std::size_t i = 0; i < quantiles.size(); ++i) {
            if (!(quantiles[i] > 0.0 && quantiles[i] <= 1.0)) throw ValidationError("quantiles must be in (0, 1]");
            if (i > 0 && quantiles[i] > quantiles[i - 1]) throw ValidationError("quantiles must be sorted descending");
        }
    }
};

struct DualStageRow {
    double q = 1.0;
    std::size_t subset_size = 0;
    std::optional<double> auc_filtered;  // main detector on the bottom-q subset
    std::optional<double> auc_control;   // main detector on a size-matched random subset
    std::optional<double> auc_aux;       // aux detector on the bottom-q subset
};

/// AUC over a subset of ids, or nullopt when the subset holds one class only.
inline std::optional<double> subset_auc(const std::vector<std::string>& ids, const std::unordered_map<std::string, double>& scores,
                                        const std::unordered_map<std::string, bool>& member) {
    std::vector<LabeledScore> s;
    for (const auto& id : ids) {
        auto sc = scores.find(id);
        auto lb = member.find(id);
        if (sc == scores.end() || lb == member.end()) throw DomainError("item '" + id + "' lacks a score or label");
        s.push_back({sc->second, lb->second});
    }
    const auto c = count_classes(s);
    if (c.members == 0 || c.nonmembers == 0) return std::nullopt;
    return auc(s);
}

/**
 * Conditions the main detector on items with a weak pretraining signal: for
 * each q, the bottom-q subset by aux score versus a random subset of the same
 * size. The control subset for row r is drawn with derive_seed(control_seed, r).
 */
inline std::vector<DualStageRow> dual_stage_report(const std::unordered_map<std::string, double>& main_scores,
                                                   const std::unordered_map<std::string, double>& aux_scores,
                                                   const std::unordered_map<std::string, bool>& member,
                                                   const DualStageConfig& cfg) {
    cfg.validate();
    std::vector<std::string> ids;
    for (const auto& [id, _] : member) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
        if (!main_scores.contains(id)) throw DomainError("no main score for item '" + id + "'");
        if (!aux_scores.contains(id)) throw DomainError("no aux score for item '" + id + "'");
    }
    std::vector<DualStageRow> rows;
    for (std::size_t r = 0; r < cfg.quantiles.size(); ++r) {
        DualStageRow row;
        row.q = cfg.quantiles[r];
        const auto filtered = quantile_subset(ids, aux_scores, row.q);
        row.subset_size = filtered.size();
        const auto control =
            random_control_subset(ids, filtered.size(), derive_seed(cfg.control_seed, "control/" + std::to_string(r)));
        row.auc_filtered = subset_auc(filtered, main_scores, member);
        row.auc_control = subset_auc(control, main_scores, member);
        row.auc_aux = subset_auc(filtered, aux_scores, member);
        rows.push_back(row);
    }
    return rows;
}

inline std::string optional_cell(const std::optional<double>& v) { return v ? fixed9(*v) : "null"; }

inline std::string dual_stage_csv(const std::vector<DualStageRow>& rows) {
    std::string out = "q,auc_filtered,auc_control,auc_aux\n";
    for (const auto& r : rows) {
        char q[32];
        std::snprintf(q, sizeof q, "%g", r.q);
        out += std::string(q) + "," + optional_cell(r.auc_filtered) + "," + optional_cell(r.auc_control) + "," +
               optional_cell(r.auc_aux) + "\n";
    }
    return out;
}

inline json to_json(const DualStageRow& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"q", r.q}, {"subset_size", r.subset_size}, {"auc_filtered", opt(r.auc_filtered)},
                {"auc_control", opt(r.auc_control)}, {"auc_aux", opt(r.auc_aux)}};
}

struct HistogramBin {
    double left = 0.0;
    double right = 0.0;
    std::size_t members = 0;
    std::size_t nonmembers = 0;
};

/// Equal-width bins over [min, max]; the last bin is closed on the right.
inline std::vector<HistogramBin> score_histogram(std::span<const LabeledScore> scores, int bins = 20) {
    if (bins < 1) throw DomainError("bin count must be >= 1");
    if (scores.empty()) return {};
    double lo = scores[0].score, hi = scores[0].score;
    for (const auto& s : scores) {
        lo = std::min(lo, s.score);
        hi = std::max(hi, s.score);
    }
    if (hi == lo) hi = lo + 1.0;
    const double width = (hi - lo) / bins;
    std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
    for (int b = 0; b < bins; ++b) {
        out[static_cast<std::size_t>(b)].left = lo + width * b;
        out[static_cast<std::size_t>(b)].right = b + 1 == bins ? hi : lo + width * (b + 1);
    }
    for (const auto& s : scores) {
        auto b = static_cast<std::size_t>(std::floor((s.score - lo) / width));
        b = std::min(b, out.size() - 1);
        (s.member ? out[b].members : out[b].nonmembers)++;
    }
    return out;
}

inline std::string histogram_csv(const std::vector<HistogramBin>& bins) {
    std::string out = "bin_left,bin_right,count_member,count_nonmember\n";
    for (const auto& b : bins)
        out += fixed9(b.left) + "," + fixed9(b.right) + "," + std::to_string(b.members) + "," + std::to_string(b.nonmembers) + "\n";
    return out;
}

}  // namespace entroscope
