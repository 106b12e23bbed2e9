#pragma once

#include <algorithm>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rapgen/bm25.hpp"
#include "rapgen/corpus.hpp"
#include "rapgen/dense_index.hpp"
#include "rapgen/encoder.hpp"

namespace rapgen {

struct HybridConfig {
    double lambda = 1.0;  // weight on the BM25 score
    int top_k = 1;
    std::set<std::string> exclude_ids;
    std::function<bool(const RecordMeta&)> meta_filter;  // null = keep all
};

struct RetrievalResult {
    std::string pair_id;
    double bm25_score = 0.0;
    double dense_score = 0.0;
    double hybrid_score = 0.0;
    int rank = 0;  // 1-based
};

inline void validate_hybrid_config(const HybridConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
    if (cfg.top_k < 1) throw std::invalid_argument("top_k must be >= 1");
}

// Fuses per-candidate scores and ranks the surviving candidates by
// hybrid = dense + lambda * bm25, ties broken by ascending doc id.
inline std::vector<RetrievalResult> rank_candidates(const std::vector<std::string>& doc_ids,
                                                    const std::vector<double>& dense,
                                                    const std::vector<double>& bm25,
                                                    const std::vector<bool>& keep,
                                                    const HybridConfig& cfg) {
    validate_hybrid_config(cfg);
    if (doc_ids.size() != dense.size() || doc_ids.size() != bm25.size() || doc_ids.size() != keep.size())
        throw std::invalid_argument("rank_candidates: score arrays misaligned");
    std::vector<size_t> surviving;
    for (size_t i = 0; i < doc_ids.size(); ++i)
        if (keep[i]) surviving.push_back(i);
    std::vector<double> hybrid(doc_ids.size(), 0.0);
    for (size_t i : surviving) hybrid[i] = dense[i] + cfg.lambda * bm25[i];
    std::sort(surviving.begin(), surviving.end(), [&](size_t a, size_t b) {
        if (hybrid[a] != hybrid[b]) return hybrid[a] > hybrid[b];
        return doc_ids[a] < doc_ids[b];
    });
    if (surviving.size() > static_cast<size_t>(cfg.top_k)) surviving.resize(static_cast<size_t>(cfg.top_k));
    std::vector<RetrievalResult> results;
    results.reserve(surviving.size());
    for (size_t r = 0; r < surviving.size(); ++r) {
        const size_t i = surviving[r];
        results.push_back({doc_ids[i], bm25[i], dense[i], hybrid[i], static_cast<int>(r) + 1});
    }
    return results;
}

// Hybrid retrieval for one query over a codebase. The query record's own id
// is always excluded so a training query can never see its ground truth.
inline std::vector<RetrievalResult> retrieve(const BugFixPair& query, const Corpus& codebase,
                                             const Bm25Index& bm25, const DenseIndex& dense,
                                             const EncoderParams& params, const BpeModel& tokenizer,
                                             const HybridConfig& cfg) {
    validate_hybrid_config(cfg);
    if (bm25.doc_ids != dense.doc_ids)
        throw std::invalid_argument("retrieve: sparse and dense indexes cover different documents");
    if (bm25.doc_ids.size() != codebase.records.size())
        throw std::invalid_argument("retrieve: indexes do not match the codebase");
    for (size_t i = 0; i < codebase.records.size(); ++i)
        if (codebase.records[i].id != bm25.doc_ids[i])
            throw std::invalid_argument("retrieve: index doc ids do not match the codebase");

    const auto query_tokens = tokenizer.encode(query.bug_text).ids;
    const auto bm25_scores = bm25.score(query_tokens);
    const auto dense_q = embed_tokens(params, query_tokens);
    const auto dense_s = dense_scores(dense, dense_q);

    std::vector<bool> keep(codebase.records.size(), true);
    for (size_t i = 0; i < codebase.records.size(); ++i) {
        const auto& rec = codebase.records[i];
        if (rec.id == query.id || cfg.exclude_ids.count(rec.id)) keep[i] = false;
        else if (cfg.meta_filter && !cfg.meta_filter(rec.meta)) keep[i] = false;
    }
    return rank_candidates(bm25.doc_ids, dense_s, bm25_scores, keep, cfg);
}

}  // namespace rapgen
