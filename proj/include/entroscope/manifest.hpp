#pragma once

/**
 * Detection items, training records, and the RL-MIA style injection builder.
 *
 * Manifests are JSON Lines, one object per line:
 *   {"id": "...", "question": "...", "label": "member|nonmember|unknown",
 *    "source": "...", "meta": {...}}
 * Training records use `item_id`, `question`, `occurrence_index`.
 */

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "entroscope/jsonl.hpp"
#include "entroscope/rng.hpp"

namespace entroscope {

enum class Label { member, nonmember, unknown };

inline std::string to_string(Label l) {
    switch (l) {
        case Label::member: return "member";
        case Label::nonmember: return "nonmember";
        case Label::unknown: return "unknown";
    }
    return "unknown";
}

inline std::optional<Label> parse_label(std::string_view s) {
    if (s == "member") return Label::member;
    if (s == "nonmember") return Label::nonmember;
    if (s == "unknown") return Label::unknown;
    return std::nullopt;
}

struct DetectionItem {
    std::string id;
    std::string question;
    Label label = Label::unknown;
    std::string source;
    json meta = json::object();

    bool operator==(const DetectionItem&) const = default;
};

struct TrainRecord {
    std::string item_id;
    std::string question;
    int occurrence_index = 1;

    bool operator==(const TrainRecord&) const = default;
};

struct InjectionConfig {
    double fraction = 0.5;
    int occurrences = 1;
    std::uint64_t seed = 0;
};

inline json to_json(const DetectionItem& item) {
    json j;
    j["id"] = item.id;
    j["question"] = item.question;
    j["label"] = to_string(item.label);
    j["source"] = item.source;
    j["meta"] = item.meta;
    return j;
}

inline json to_json(const TrainRecord& r) {
    return json{{"item_id", r.item_id}, {"question", r.question}, {"occurrence_index", r.occurrence_index}};
}

inline DetectionItem item_from_json(const json& j, std::size_t line = 0) {
    auto str_field = [&](const char* key, bool required) -> std::string {
        auto it = j.find(key);
        if (it == j.end()) {
            if (required) throw ParseError(std::string("missing field '") + key + "'", line);
            return {};
        }
        if (!it->is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
        return it->get<std::string>();
    };
    DetectionItem item;
    item.id = str_field("id", true);
    item.question = str_field("question", true);
    if (item.id.empty()) throw ParseError("empty id", line);
    if (item.question.empty()) throw ParseError("empty question for id '" + item.id + "'", line);
    const std::string label = str_field("label", false);
    if (label.empty()) {
        item.label = Label::unknown;
    } else if (auto l = parse_label(label)) {
        item.label = *l;
    } else {
        throw ParseError("bad label '" + label + "'", line);
    }
    item.source = str_field("source", false);
    if (auto it = j.find("meta"); it != j.end()) {
        if (!it->is_object()) throw ParseError("field 'meta' must be an object", line);
        item.meta = *it;
    }
    return item;
}

inline TrainRecord train_record_from_json(const json& j, std::size_t line = 0) {
    try {
        TrainRecord r;
        r.item_id = j.at("item_id").get<std::string>();
        r.question = j.at("question").get<std::string>();
        r.occurrence_index = j.value("occurrence_index", 1);
        if (r.occurrence_index < 1) throw ParseError("occurrence_index must be >= 1", line);
        return r;
    } catch (const json::exception& e) {
        throw ParseError(e.what(), line);
    }
}

/// Throws ValidationError naming the first repeated id.
inline void check_unique_ids(const std::vector<DetectionItem>& items) {
    std::set<std::string_view> seen;
    for (const auto& item : items) {
        if (!seen.insert(item.id).second) throw ValidationError("duplicate item id '" + item.id + "'");
    }
}

inline std::vector<DetectionItem> load_manifest(const std::filesystem::path& path) {
    std::vector<DetectionItem> items;
    for_each_jsonl(path, [&](const json& j, std::size_t line) { items.push_back(item_from_json(j, line)); });
    check_unique_ids(items);
    return items;
}

inline std::vector<TrainRecord> load_train_records(const std::filesystem::path& path) {
    std::vector<TrainRecord> records;
    for_each_jsonl(path, [&](const json& j, std::size_t line) { records.push_back(train_record_from_json(j, line)); });
    return records;
}

template <class T>
std::string dump_jsonl(const std::vector<T>& rows) {
    std::string out;
    for (const auto& r : rows) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void save_manifest(const std::filesystem::path& path, const std::vector<DetectionItem>& items) {
    write_file(path, dump_jsonl(items));
}

inline void save_train_records(const std::filesystem::path& path, const std::vector<TrainRecord>& records) {
    write_file(path, dump_jsonl(records));
}

/// round-half-up(fraction * n), the member count used by the injection builder.
inline std::size_t injection_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5 + 1e-9));
}

struct InjectionResult {
    std::vector<TrainRecord> train;
    std::vector<DetectionItem> detection;
};

/**
 * Selects round-half-up(fraction * n) benchmark items uniformly without
 * replacement and inserts each one `occurrences` times at seeded random
 * positions of the base corpus (occurrence-major, so copies are spread
 * out). The base corpus keeps its relative order.
 * The detection manifest keeps benchmark order and relabels every item.
 */
inline InjectionResult build_injection(const std::vector<DetectionItem>& benchmark,
                                       const std::vector<TrainRecord>& base_corpus,
                                       const InjectionConfig& cfg) {
    if (benchmark.empty()) throw ValidationError("benchmark is empty");
    if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) throw ValidationError("fraction must be in (0, 1]");
    if (cfg.occurrences < 1) throw ValidationError("occurrences must be >= 1");
    check_unique_ids(benchmark);

    const std::size_t n = benchmark.size();
    const std::size_t k = injection_count(cfg.fraction, n);
    if (k == 0) throw ValidationError("fraction * benchmark size rounds to 0 members");

    Rng rng(cfg.seed);
    auto chosen = rng.sample_without_replacement(n, k);
    std::vector<bool> is_member(n, false);
    for (auto i : chosen) is_member[i] = true;

    // Occurrence-major order: every member once, then every member again, ...
    // so repeated copies of one item are spread across the sequence.
    std::vector<TrainRecord> injected;
    for (int occ = 1; occ <= cfg.occurrences; ++occ) {
        for (std::size_t i = 0; i < n; ++i) {
            if (is_member[i]) injected.push_back({benchmark[i].id, benchmark[i].question, occ});
        }
    }

    // Interleave: choose which slots of the merged sequence hold injected records.
    const std::size_t total = base_corpus.size() + injected.size();
    auto slots = rng.sample_without_replacement(total, injected.size());
    std::vector<bool> injected_slot(total, false);
    for (auto s : slots) injected_slot[s] = true;

    InjectionResult out;
    out.train.reserve(total);
    std::size_t bi = 0, ii = 0;
    for (std::size_t s = 0; s < total; ++s) {
        out.train.push_back(injected_slot[s] ? injected[ii++] : base_corpus[bi++]);
    }

    out.detection = benchmark;
    for (std::size_t i = 0; i < n; ++i) out.detection[i].label = is_member[i] ? Label::member : Label::nonmember;
    return out;
}

}  // namespace entroscope
