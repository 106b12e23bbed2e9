#pragma once

#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rapgen/corpus.hpp"
#include "rapgen/retriever.hpp"

namespace rapgen {

inline constexpr const char* kClsMarker = "[CLS] ";
inline constexpr const char* kBugMarker = " [BUG] ";
inline constexpr const char* kFixMarker = " [FIX] ";
inline constexpr const char* kSepMarker = " [SEP] ";

struct AugmentedInput {
    std::string text;
    std::pair<size_t, size_t> query_span{0, 0};  // byte ranges [begin, end)
    std::pair<size_t, size_t> bug_span{0, 0};
    std::pair<size_t, size_t> fix_span{0, 0};
    std::string source_id;
    std::string retrieved_id;  // empty when no candidate was available
};

inline void reject_markers(const std::string& text, const char* role) {
    for (const char* marker : {"[CLS]", "[BUG]", "[FIX]", "[SEP]"}) {
        if (text.find(marker) != std::string::npos)
            throw std::invalid_argument(std::string(role) + " contains reserved marker " + marker);
    }
}

// Builds "[CLS] X [BUG] B [FIX] F"; with error info the query segment becomes
// "fix {type} {message} [SEP] X".
inline AugmentedInput augment(const BugFixPair& query, const std::string& retrieved_id,
                              const std::string& retrieved_bug, const std::string& retrieved_fix,
                              bool with_error_info = false) {
    reject_markers(query.bug_text, "query bug text");
    reject_markers(retrieved_bug, "retrieved bug text");
    reject_markers(retrieved_fix, "retrieved fix text");

    std::string q = query.bug_text;
    if (with_error_info) {
        const std::string prefix = error_info_prefix(query.meta);  // throws when meta lacks fields
        reject_markers(prefix, "error info");
        q = prefix + kSepMarker + q;
    }

    AugmentedInput out;
    out.source_id = query.id;
    out.retrieved_id = retrieved_id;
    out.text = kClsMarker;
    out.query_span.first = out.text.size();
    out.text += q;
    out.query_span.second = out.text.size();
    out.text += kBugMarker;
    out.bug_span.first = out.text.size();
    out.text += retrieved_bug;
    out.bug_span.second = out.text.size();
    out.text += kFixMarker;
    out.fix_span.first = out.text.size();
    out.text += retrieved_fix;
    out.fix_span.second = out.text.size();
    return out;
}

struct AugmentedSpans {
    std::string query;
    std::string bug;
    std::string fix;
};

// Inverts the concatenation for any input whose segments are marker-free.
inline AugmentedSpans parse_augmented(const std::string& text) {
    const std::string cls = kClsMarker;
    if (text.rfind(cls, 0) != 0) throw std::invalid_argument("augmented input lacks leading [CLS]");
    const size_t bug_at = text.find(kBugMarker);
    if (bug_at == std::string::npos) throw std::invalid_argument("augmented input lacks [BUG] marker");
    const size_t fix_at = text.find(kFixMarker, bug_at);
    if (fix_at == std::string::npos) throw std::invalid_argument("augmented input lacks [FIX] marker");
    AugmentedSpans spans;
    spans.query = text.substr(cls.size(), bug_at - cls.size());
    spans.bug = text.substr(bug_at + 7, fix_at - (bug_at + 7));
    spans.fix = text.substr(fix_at + 7);
    return spans;
}

using RetrieveFn = std::function<std::vector<RetrievalResult>(const BugFixPair&)>;

struct ExportStats {
    size_t lines = 0;
    size_t empty_retrievals = 0;  // records exported with empty fix-pattern segments
};

// One JSON line per dataset record, augmented with its top-1 retrieval. A
// record with no surviving candidate keeps its place with empty segments so
// dataset sizes are preserved.
inline ExportStats export_training_set(const Corpus& dataset, const Corpus& codebase,
                                       const RetrieveFn& retrieve_top, bool with_error_info,
                                       std::ostream& out) {
    ExportStats stats;
    for (const auto& rec : dataset.records) {
        const auto results = retrieve_top(rec);
        AugmentedInput input;
        json scores;
        if (results.empty()) {
            input = augment(rec, "", "", "", with_error_info);
            scores = json{{"bm25", 0.0}, {"dense", 0.0}, {"hybrid", 0.0}};
            ++stats.empty_retrievals;
        } else {
            const auto& top = results.front();
            const BugFixPair* pair = codebase.find(top.pair_id);
            if (!pair) throw std::runtime_error("retrieved id not in codebase: " + top.pair_id);
            input = augment(rec, pair->id, pair->bug_text, pair->fix_text, with_error_info);
            scores = json{{"bm25", top.bm25_score}, {"dense", top.dense_score}, {"hybrid", top.hybrid_score}};
        }
        json line{{"id", rec.id},
                  {"input", input.text},
                  {"target", rec.fix_text},
                  {"retrieved_id", input.retrieved_id.empty() ? json() : json(input.retrieved_id)},
                  {"scores", scores}};
        out << line.dump() << "\n";
        ++stats.lines;
    }
    return stats;
}

inline ExportStats export_training_set(const Corpus& dataset, const Corpus& codebase,
                                       const Bm25Index& bm25, const DenseIndex& dense,
                                       const EncoderParams& params, const BpeModel& tokenizer,
                                       const HybridConfig& cfg, bool with_error_info,
                                       std::ostream& out) {
    HybridConfig top1 = cfg;
    top1.top_k = 1;
    auto fn = [&](const BugFixPair& q) {
        return retrieve(q, codebase, bm25, dense, params, tokenizer, top1);
    };
    return export_training_set(dataset, codebase, fn, with_error_info, out);
}

}  // namespace rapgen
