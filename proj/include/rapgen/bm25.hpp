#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rapgen/corpus.hpp"
#include "rapgen/tokenizer.hpp"

namespace rapgen {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

// Okapi BM25 over BPE token ids of the codebase bug texts.
class Bm25Index {
public:
    std::vector<std::string> doc_ids;
    std::vector<std::map<int, int>> doc_term_freqs;
    std::vector<int> doc_lengths;
    double avg_doc_length = 0.0;
    std::map<int, int> doc_freq;
    Bm25Params params;

    static Bm25Index from_token_docs(std::vector<std::string> ids,
                                     const std::vector<std::vector<int>>& docs,
                                     Bm25Params params = {}) {
        if (ids.size() != docs.size()) throw std::invalid_argument("doc id / document count mismatch");
        if (docs.empty()) throw std::invalid_argument("bm25_build: empty corpus");
        Bm25Index index;
        index.doc_ids = std::move(ids);
        index.params = params;
        long total = 0;
        for (const auto& doc : docs) {
            std::map<int, int> freqs;
            for (int t : doc) freqs[t]++;
            for (const auto& [t, c] : freqs) index.doc_freq[t]++;
            index.doc_lengths.push_back(static_cast<int>(doc.size()));
            total += static_cast<long>(doc.size());
            index.doc_term_freqs.push_back(std::move(freqs));
        }
        index.avg_doc_length = static_cast<double>(total) / static_cast<double>(docs.size());
        return index;
    }

    size_t size() const { return doc_ids.size(); }

    double idf(int term) const {
        const auto it = doc_freq.find(term);
        const double df = it == doc_freq.end() ? 0.0 : static_cast<double>(it->second);
        const double n = static_cast<double>(size());
        return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    }

    // Scores every document against the query token sequence; the result is
    // aligned with doc_ids. Repeated query terms contribute once per
    // occurrence. Documents sharing no term score 0.
    std::vector<double> score(std::span<const int> query_tokens) const {
        std::vector<double> scores(size(), 0.0);
        for (int t : query_tokens) {
            const auto dfit = doc_freq.find(t);
            if (dfit == doc_freq.end()) continue;
            const double term_idf = idf(t);
            for (size_t d = 0; d < size(); ++d) {
                const auto& tfs = doc_term_freqs[d];
                const auto it = tfs.find(t);
                if (it == tfs.end()) continue;
                const double tf = static_cast<double>(it->second);
                const double len = static_cast<double>(doc_lengths[d]);
                const double denom =
                    tf + params.k1 * (1.0 - params.b + params.b * len / avg_doc_length);
                scores[d] += term_idf * tf * (params.k1 + 1.0) / denom;
            }
        }
        return scores;
    }

    std::map<std::string, double> score_map(std::span<const int> query_tokens) const {
        const auto scores = score(query_tokens);
        std::map<std::string, double> out;
        for (size_t d = 0; d < size(); ++d) out[doc_ids[d]] = scores[d];
        return out;
    }

    json to_json() const {
        json jdocs = json::array();
        for (size_t d = 0; d < size(); ++d) {
            json freqs = json::object();
            for (const auto& [t, c] : doc_term_freqs[d]) freqs[std::to_string(t)] = c;
            jdocs.push_back(json{{"id", doc_ids[d]}, {"len", doc_lengths[d]}, {"tf", freqs}});
        }
        return json{{"format", "rapgen.bm25"},
                    {"version", 1},
                    {"k1", params.k1},
                    {"b", params.b},
                    {"docs", jdocs}};
    }

    static Bm25Index from_json(const json& j) {
        if (j.value("format", "") != "rapgen.bm25" || j.value("version", 0) != 1)
            throw std::runtime_error("unsupported bm25 index format");
        std::vector<std::string> ids;
        std::vector<std::vector<int>> docs;
        Bm25Params params{j.at("k1").get<double>(), j.at("b").get<double>()};
        for (const auto& jd : j.at("docs")) {
            ids.push_back(jd.at("id").get<std::string>());
            std::vector<int> doc;
            for (auto it = jd.at("tf").begin(); it != jd.at("tf").end(); ++it) {
                const int term = std::stoi(it.key());
                for (int c = 0; c < it.value().get<int>(); ++c) doc.push_back(term);
            }
            docs.push_back(std::move(doc));
        }
        auto index = from_token_docs(std::move(ids), docs, params);
        size_t d = 0;
        for (const auto& jd : j.at("docs")) {
            if (index.doc_lengths[d++] != jd.at("len").get<int>())
                throw std::runtime_error("bm25 index file is inconsistent");
        }
        return index;
    }
};

inline Bm25Index bm25_build(const Corpus& corpus, const BpeModel& tokenizer, Bm25Params params = {}) {
    if (corpus.records.empty()) throw std::invalid_argument("bm25_build: empty corpus");
    std::vector<std::string> ids;
    std::vector<std::vector<int>> docs;
    ids.reserve(corpus.records.size());
    docs.reserve(corpus.records.size());
    for (const auto& rec : corpus.records) {
        ids.push_back(rec.id);
        docs.push_back(tokenizer.encode(rec.bug_text).ids);
    }
    return Bm25Index::from_token_docs(std::move(ids), docs, params);
}

}  // namespace rapgen
