#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "rapgen/encoder.hpp"

namespace rapgen {

// Flat exhaustive inner-product index; one row per codebase record,
// embedding its bug text (queries match against previous bugs, not fixes).
struct DenseIndex {
    std::vector<std::string> doc_ids;
    Mat vectors;  // |docs| x d

    size_t size() const { return doc_ids.size(); }
};

inline DenseIndex dense_build(const Corpus& corpus, const EncoderParams& params,
                              const BpeModel& tokenizer) {
    DenseIndex index;
    index.vectors = Mat(static_cast<Eigen::Index>(corpus.records.size()), params.dim());
    index.doc_ids.reserve(corpus.records.size());
    for (size_t i = 0; i < corpus.records.size(); ++i) {
        index.doc_ids.push_back(corpus.records[i].id);
        index.vectors.row(static_cast<Eigen::Index>(i)) =
            embed(params, tokenizer, corpus.records[i].bug_text).transpose();
    }
    return index;
}

inline std::vector<double> dense_scores(const DenseIndex& index, const Vec& query) {
    if (index.size() > 0 && query.size() != index.vectors.cols())
        throw std::invalid_argument("dense query width mismatch");
    const Vec s = index.vectors * query;
    return std::vector<double>(s.data(), s.data() + s.size());
}

}  // namespace rapgen
