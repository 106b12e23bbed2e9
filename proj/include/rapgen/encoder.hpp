#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rapgen/corpus.hpp"
#include "rapgen/tokenizer.hpp"

namespace rapgen {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Mean-pooled token embedding followed by a linear projection. Stands in for
// the full transformer encoder while keeping the single-vector representation,
// inner-product scoring, and contrastive training identical.
struct EncoderParams {
    Mat embedding;   // |vocab| x d
    Mat projection;  // d x d

    int dim() const { return static_cast<int>(projection.rows()); }
    int vocab_size() const { return static_cast<int>(embedding.rows()); }
};

// Deterministic uniform double in [0, 1); mt19937_64 output is standardized,
// unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline void shuffle_indices(std::vector<size_t>& idx, std::mt19937_64& rng) {
    for (size_t i = idx.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

// Init scale note: the bilinear form sim = (Pa)^T(Pc) squares the parameter
// scale, so the uniform range must keep initial similarities near O(1) or
// gradient descent stalls for small widths. 0.5 does that for d in [8, 64].
inline constexpr double kInitScale = 0.5;

inline EncoderParams init_encoder_params(int vocab_size, int d, uint64_t seed) {
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.embedding = Mat(vocab_size, d);
    p.projection = Mat(d, d);
    for (int i = 0; i < vocab_size; ++i)
        for (int k = 0; k < d; ++k) p.embedding(i, k) = (uniform01(rng) * 2.0 - 1.0) * kInitScale;
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) p.projection(i, k) = (uniform01(rng) * 2.0 - 1.0) * kInitScale;
    return p;
}

inline Vec mean_pool(const EncoderParams& params, std::span<const int> token_ids) {
    Vec acc = Vec::Zero(params.dim());
    if (token_ids.empty()) return acc;
    for (int t : token_ids) {
        if (t < 0 || t >= params.vocab_size())
            throw std::out_of_range("token id out of range for encoder params");
        acc += params.embedding.row(t).transpose();
    }
    return acc / static_cast<double>(token_ids.size());
}

inline Vec embed_tokens(const EncoderParams& params, std::span<const int> token_ids) {
    return params.projection * mean_pool(params, token_ids);
}

// Empty text maps to the zero vector.
inline Vec embed(const EncoderParams& params, const BpeModel& tokenizer, std::string_view text) {
    const auto seq = tokenizer.encode(text);
    return embed_tokens(params, seq.ids);
}

inline double sim(const Vec& u, const Vec& v) {
    if (u.size() != v.size())
        throw std::invalid_argument("sim: embedding width mismatch (" + std::to_string(u.size()) +
                                    " vs " + std::to_string(v.size()) + ")");
    return u.dot(v);
}

inline double cosine(const Vec& u, const Vec& v) {
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu == 0.0 || nv == 0.0) return 0.0;
    return sim(u, v) / (nu * nv);
}

struct EncoderGrad {
    Mat embedding;
    Mat projection;
};

struct InfoNceResult {
    double loss = 0.0;
    EncoderGrad grad;
};

// In-batch-negative InfoNCE over (bug, fix) text pairs: row i of the score
// matrix S = (P A)^T (P C) is a softmax whose positive sits on the diagonal;
// every other fix in the minibatch is a negative. The gradient is the exact
// analytic derivative with respect to every embedding and projection entry.
inline InfoNceResult infonce_loss(const EncoderParams& params, const BpeModel& tokenizer,
                                  std::span<const std::pair<std::string, std::string>> batch) {
    const int n = static_cast<int>(batch.size());
    if (n < 2) throw std::invalid_argument("infonce_loss: batch must contain at least 2 pairs");
    const int d = params.dim();

    std::vector<std::vector<int>> bug_tokens(static_cast<size_t>(n));
    std::vector<std::vector<int>> fix_tokens(static_cast<size_t>(n));
    Mat a(d, n), c(d, n);  // pooled columns per pair
    for (int i = 0; i < n; ++i) {
        bug_tokens[static_cast<size_t>(i)] = tokenizer.encode(batch[static_cast<size_t>(i)].first).ids;
        fix_tokens[static_cast<size_t>(i)] = tokenizer.encode(batch[static_cast<size_t>(i)].second).ids;
        a.col(i) = mean_pool(params, bug_tokens[static_cast<size_t>(i)]);
        c.col(i) = mean_pool(params, fix_tokens[static_cast<size_t>(i)]);
    }
    const Mat u = params.projection * a;  // d x n queries
    const Mat v = params.projection * c;  // d x n keys
    const Mat s = u.transpose() * v;      // n x n similarities

    // Softmax rows with log-sum-exp stabilization; W = dL/dS.
    Mat w(n, n);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double row_max = s.row(i).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(s(i, j) - row_max);
        const double lse = row_max + std::log(sum);
        loss += lse - s(i, i);
        for (int j = 0; j < n; ++j)
            w(i, j) = (std::exp(s(i, j) - lse) - (i == j ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);

    InfoNceResult out;
    out.loss = loss;
    out.grad.projection = v * w.transpose() * a.transpose() + u * w * c.transpose();
    out.grad.embedding = Mat::Zero(params.vocab_size(), d);

    const Mat grad_a = params.projection.transpose() * (v * w.transpose());  // d x n
    const Mat grad_c = params.projection.transpose() * (u * w);              // d x n
    auto scatter = [&](const std::vector<int>& tokens, const Vec& g) {
        if (tokens.empty()) return;
        const double inv = 1.0 / static_cast<double>(tokens.size());
        for (int t : tokens) out.grad.embedding.row(t) += inv * g.transpose();
    };
    for (int i = 0; i < n; ++i) {
        scatter(bug_tokens[static_cast<size_t>(i)], grad_a.col(i));
        scatter(fix_tokens[static_cast<size_t>(i)], grad_c.col(i));
    }
    return out;
}

struct TrainConfig {
    int batch_size = 32;
    double learning_rate = 0.1;
    int epochs = 30;
    uint64_t seed = 42;
    int dim = 64;
};

// Plain full-batch-sequential gradient descent on the InfoNCE loss with
// seeded shuffling per epoch. No hard-negative mining; the negatives are
// exactly the other in-batch keys.
inline EncoderParams train_dpr(const Corpus& corpus, const BpeModel& tokenizer, TrainConfig config,
                               std::vector<double>* epoch_losses = nullptr) {
    if (corpus.split != Split::train && corpus.split != Split::codebase)
        throw std::invalid_argument("train_dpr expects the train or codebase split");
    if (config.batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
    if (static_cast<int>(corpus.records.size()) < config.batch_size)
        throw std::invalid_argument("corpus smaller than one batch");

    EncoderParams params =
        init_encoder_params(static_cast<int>(tokenizer.vocab_size()), config.dim, config.seed);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<size_t> order(corpus.records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_indices(order, rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
            if (end - start < 2) break;  // a trailing single record cannot form a batch
            std::vector<std::pair<std::string, std::string>> batch;
            batch.reserve(end - start);
            for (size_t k = start; k < end; ++k) {
                const auto& rec = corpus.records[order[k]];
                batch.emplace_back(rec.bug_text, rec.fix_text);
            }
            const auto result = infonce_loss(params, tokenizer, batch);
            params.embedding -= config.learning_rate * result.grad.embedding;
            params.projection -= config.learning_rate * result.grad.projection;
            epoch_loss += result.loss;
            ++batches;
        }
        if (epoch_losses) epoch_losses->push_back(batches ? epoch_loss / batches : 0.0);
    }
    return params;
}

}  // namespace rapgen
