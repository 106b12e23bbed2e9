#include <catch2/catch_amalgamated.hpp>

#include "rapgen/bm25.hpp"
#include "rapgen/dense_index.hpp"
#include "rapgen/encoder.hpp"
#include "rapgen/index_io.hpp"
#include "rapgen/retriever.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace rapgen;

namespace {

std::vector<std::vector<int>> tokenize_all(const Corpus& corpus, const BpeModel& tokenizer) {
    std::vector<std::vector<int>> docs;
    for (const auto& rec : corpus.records) docs.push_back(tokenizer.encode(rec.bug_text).ids);
    return docs;
}

Corpus tiny_corpus(const std::vector<std::pair<std::string, std::string>>& id_bug) {
    Corpus corpus;
    corpus.split = Split::codebase;
    for (const auto& [id, bug] : id_bug) {
        BugFixPair rec;
        rec.id = id;
        rec.bug_text = bug;
        rec.fix_text = "fix of " + bug;
        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

}  // namespace

// --- BM25 -------------------------------------------------------------------

TEST_CASE("bm25_build counts document frequencies and lengths", "[retrieval]") {
    const BpeModel bytes;
    SECTION("a term present in both documents has df 2") {
        const auto corpus = tiny_corpus({{"d1", "xy"}, {"d2", "xz"}});
        const auto index = bm25_build(corpus, bytes);
        CHECK(index.doc_freq.at(kByteTokenBase + 'x') == 2);
        CHECK(index.doc_freq.at(kByteTokenBase + 'y') == 1);
    }
    SECTION("a single-document corpus has that document's average length") {
        const auto corpus = tiny_corpus({{"d1", "abcd"}});
        const auto index = bm25_build(corpus, bytes);
        CHECK(index.avg_doc_length == 4.0);
    }
    SECTION("an empty corpus is rejected") {
        CHECK_THROWS_AS(bm25_build(Corpus{}, bytes), std::invalid_argument);
    }
    SECTION("rebuilding yields a byte-identical serialization") {
        const auto corpus = tiny_corpus({{"d1", "abc abc"}, {"d2", "xyz"}});
        CHECK(bm25_build(corpus, bytes).to_json().dump() == bm25_build(corpus, bytes).to_json().dump());
    }
}

TEST_CASE("bm25_score follows the Okapi closed form", "[retrieval]") {
    // Word-level variant of the three-document example, built from token ids
    // directly: d1 = "a b", d2 = "a a b c", d3 = "c", query "a".
    const int a = 0, b = 1, c = 2;
    const std::vector<std::vector<int>> docs{{a, b}, {a, a, b, c}, {c}};
    const auto index = Bm25Index::from_token_docs({"d1", "d2", "d3"}, docs);

    SECTION("an empty query scores zero everywhere") {
        const auto scores = index.score(std::vector<int>{});
        CHECK(scores == std::vector<double>{0.0, 0.0, 0.0});
    }
    SECTION("a term absent from every document contributes nothing") {
        const auto scores = index.score(std::vector<int>{99});
        CHECK(scores == std::vector<double>{0.0, 0.0, 0.0});
    }
    SECTION("scores match the hand-evaluated formula") {
        const auto scores = index.score(std::vector<int>{a});
        // Frozen from an independent evaluation of the closed form
        // (k1 = 1.2, b = 0.75, idf = ln((N - df + 0.5)/(df + 0.5) + 1)).
        CHECK_THAT(scores[0], Catch::Matchers::WithinAbs(0.499176268302, 1e-9));
        CHECK_THAT(scores[1], Catch::Matchers::WithinAbs(0.538145419359, 1e-9));
        CHECK(scores[2] == 0.0);
        CHECK(scores[1] > scores[0]);
        for (size_t d = 0; d < docs.size(); ++d)
            CHECK_THAT(scores[d], Catch::Matchers::WithinAbs(testutil::oracle_bm25(docs, {a}, d), 1e-12));
    }
}

TEST_CASE("bm25_score agrees with the independent oracle on random corpora", "[retrieval]") {
    const BpeModel bytes;
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const auto corpus = testutil::make_random_text_corpus(rng);
        const auto docs = tokenize_all(corpus, bytes);
        const auto index = bm25_build(corpus, bytes);
        for (int q = 0; q < 3; ++q) {
            const auto query = bytes.encode(testutil::make_random_query(rng)).ids;
            const auto scores = index.score(query);
            for (size_t d = 0; d < docs.size(); ++d)
                REQUIRE_THAT(scores[d],
                             Catch::Matchers::WithinAbs(testutil::oracle_bm25(docs, query, d), 1e-9));
        }
    }
}

// --- Encoder ----------------------------------------------------------------

TEST_CASE("embed pools token embeddings through the projection", "[retrieval]") {
    const BpeModel bytes;
    auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 4, 9);

    SECTION("a single-token text embeds as projection * embedding row") {
        const Vec direct = params.projection * params.embedding.row(kByteTokenBase + 'q').transpose();
        const Vec via = embed(params, bytes, "q");
        CHECK((direct - via).norm() == 0.0);
    }
    SECTION("the empty text maps to the zero vector") {
        CHECK(embed(params, bytes, "").norm() == 0.0);
    }
    SECTION("mean pooling is order-invariant") {
        const Vec uv = embed(params, bytes, "uv");
        const Vec vu = embed(params, bytes, "vu");
        CHECK_THAT((uv - vu).norm(), Catch::Matchers::WithinAbs(0.0, 1e-15));
    }
}

TEST_CASE("sim is the inner product", "[retrieval]") {
    Vec zero = Vec::Zero(3);
    CHECK(sim(zero, zero) == 0.0);
    Vec e1 = Vec::Zero(3);
    e1(0) = 1.0;
    CHECK(sim(e1, e1) == 1.0);
    Vec u(2), v(2);
    u << 1, 2;
    v << 3, -1;
    CHECK(sim(u, v) == 1.0);
    Vec w(3);
    CHECK_THROWS_AS(sim(u, w), std::invalid_argument);
}

TEST_CASE("uniform-similarity batches give ln N loss", "[retrieval]") {
    const BpeModel bytes;
    auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 4, 3);
    params.projection.setZero();  // every embedding collapses to 0 -> sims all equal
    for (int n : {2, 3, 5}) {
        std::vector<std::pair<std::string, std::string>> batch;
        for (int i = 0; i < n; ++i)
            batch.emplace_back("bug " + std::to_string(i), "fix " + std::to_string(i));
        const auto result = infonce_loss(params, bytes, batch);
        CHECK_THAT(result.loss, Catch::Matchers::WithinAbs(std::log(n), 1e-12));
    }
}

TEST_CASE("infonce loss is nonnegative at random parameter points", "[retrieval]") {
    const BpeModel bytes;
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 6, rng());
        std::vector<std::pair<std::string, std::string>> batch;
        const int n = 2 + static_cast<int>(rng() % 4);
        for (int i = 0; i < n; ++i)
            batch.emplace_back(testutil::make_random_query(rng, 8), testutil::make_random_query(rng, 8));
        REQUIRE(infonce_loss(params, bytes, batch).loss >= 0.0);
    }
}

TEST_CASE("infonce rejects batches below two pairs", "[retrieval]") {
    const BpeModel bytes;
    const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 4, 3);
    std::vector<std::pair<std::string, std::string>> batch{{"b", "f"}};
    CHECK_THROWS_AS(infonce_loss(params, bytes, batch), std::invalid_argument);
}

TEST_CASE("the analytic InfoNCE gradient matches finite differences", "[retrieval]") {
    const BpeModel bytes;
    std::mt19937_64 rng(17);
    const int d = 4;
    for (int point = 0; point < 5; ++point) {
        auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), d, rng());
        std::vector<std::pair<std::string, std::string>> batch;
        for (int i = 0; i < 3; ++i)
            batch.emplace_back(testutil::make_random_query(rng, 6), testutil::make_random_query(rng, 6));
        const auto analytic = infonce_loss(params, bytes, batch);

        const double h = 1e-6;
        auto loss_at = [&]() { return infonce_loss(params, bytes, batch).loss; };
        double num2 = 0.0, diff2 = 0.0;
        auto probe_entry = [&](double& entry, double analytic_grad) {
            const double saved = entry;
            entry = saved + h;
            const double up = loss_at();
            entry = saved - h;
            const double down = loss_at();
            entry = saved;
            const double fd = (up - down) / (2.0 * h);
            num2 += fd * fd;
            diff2 += (fd - analytic_grad) * (fd - analytic_grad);
        };
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = 0; c < d; ++c)
                probe_entry(params.projection(r, c), analytic.grad.projection(r, c));
        // Tokens only touch a handful of embedding rows; probe those plus one
        // untouched row to cover the scatter.
        std::set<int> rows{kByteTokenBase + 'z'};
        for (const auto& [bug, fix] : batch) {
            for (char ch : bug) rows.insert(kByteTokenBase + static_cast<unsigned char>(ch));
            for (char ch : fix) rows.insert(kByteTokenBase + static_cast<unsigned char>(ch));
        }
        for (int row : rows)
            for (Eigen::Index c = 0; c < d; ++c)
                probe_entry(params.embedding(row, c), analytic.grad.embedding(row, c));
        REQUIRE(std::sqrt(diff2) <= 1e-5 * std::max(std::sqrt(num2), 1e-12));
    }
}

TEST_CASE("training descends and is bitwise deterministic", "[retrieval]") {
    const auto corpus = testutil::make_marker_corpus();
    const auto tokenizer = train_bpe(corpus, kBaseVocabSize);
    TrainConfig config;
    config.dim = 16;
    config.epochs = 30;
    config.learning_rate = 0.1;
    config.seed = 42;

    std::vector<double> losses;
    const auto params = train_dpr(corpus, tokenizer, config, &losses);
    REQUIRE(losses.size() == 30);
    CHECK(losses.back() < losses.front());

    const auto params2 = train_dpr(corpus, tokenizer, config);
    CHECK(params.embedding == params2.embedding);
    CHECK(params.projection == params2.projection);
}

TEST_CASE("training separates the marker corpus", "[retrieval]") {
    const auto corpus = testutil::make_marker_corpus();
    const auto tokenizer = train_bpe(corpus, kBaseVocabSize);
    TrainConfig config;
    config.dim = 16;
    config.epochs = 30;
    config.learning_rate = 0.1;
    config.seed = 42;
    config.batch_size = 16;
    const auto params = train_dpr(corpus, tokenizer, config);

    std::vector<Vec> keys;
    for (const auto& rec : corpus.records) keys.push_back(embed(params, tokenizer, rec.fix_text));
    int hits = 0;
    for (size_t i = 0; i < corpus.records.size(); ++i) {
        const Vec query = embed(params, tokenizer, corpus.records[i].bug_text);
        size_t best = 0;
        double best_sim = -1e300;
        for (size_t j = 0; j < keys.size(); ++j) {
            const double s = sim(query, keys[j]);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    CHECK(hits >= static_cast<int>(0.9 * static_cast<double>(corpus.records.size())));
}

TEST_CASE("training rejects a corpus smaller than one batch", "[retrieval]") {
    const auto corpus = testutil::make_marker_corpus(8);
    const auto tokenizer = train_bpe(corpus, kBaseVocabSize);
    TrainConfig config;
    config.batch_size = 16;
    CHECK_THROWS_AS(train_dpr(corpus, tokenizer, config), std::invalid_argument);

    SECTION("only the train and codebase splits are trainable") {
        auto test_split = testutil::make_marker_corpus(8);
        test_split.split = Split::test;
        TrainConfig small;
        small.batch_size = 4;
        CHECK_THROWS_AS(train_dpr(test_split, tokenizer, small), std::invalid_argument);
    }
}

// --- Dense index --------------------------------------------------------------

TEST_CASE("dense_build embeds one row per record", "[retrieval]") {
    const auto corpus = tiny_corpus({{"a", "one"}, {"b", "two"}, {"c", "three"}});
    const BpeModel bytes;
    const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 8, 5);
    const auto index = dense_build(corpus, params, bytes);
    REQUIRE(index.size() == 3);
    CHECK(index.doc_ids == std::vector<std::string>{"a", "b", "c"});
    const auto again = dense_build(corpus, params, bytes);
    CHECK(index.vectors == again.vectors);
}

TEST_CASE("an orthonormal dense index returns its own row as top-1", "[retrieval]") {
    DenseIndex index;
    index.doc_ids = {"r0", "r1", "r2"};
    index.vectors = Mat::Identity(3, 3);
    const Vec query = index.vectors.row(1).transpose();
    const auto scores = dense_scores(index, query);
    CHECK(std::distance(scores.begin(), std::max_element(scores.begin(), scores.end())) == 1);
}

// --- Hybrid retrieval ----------------------------------------------------------

TEST_CASE("hybrid fusion weighs BM25 by lambda", "[retrieval]") {
    const std::vector<std::string> ids{"A", "B"};
    const std::vector<double> dense{0.9, 0.2};
    const std::vector<double> bm25{1.0, 5.0};
    const std::vector<bool> keep{true, true};

    HybridConfig cfg;
    cfg.top_k = 2;
    SECTION("lambda 1 lets the lexical score dominate here") {
        cfg.lambda = 1.0;
        const auto results = rank_candidates(ids, dense, bm25, keep, cfg);
        REQUIRE(results.size() == 2);
        CHECK(results[0].pair_id == "B");
        CHECK_THAT(results[0].hybrid_score, Catch::Matchers::WithinAbs(5.2, 1e-12));
        CHECK(results[0].rank == 1);
        CHECK(results[1].rank == 2);
    }
    SECTION("lambda 0 ranks by the dense score alone") {
        cfg.lambda = 0.0;
        const auto results = rank_candidates(ids, dense, bm25, keep, cfg);
        CHECK(results[0].pair_id == "A");
    }
    SECTION("a negative lambda is rejected") {
        cfg.lambda = -0.5;
        CHECK_THROWS_AS(rank_candidates(ids, dense, bm25, keep, cfg), std::invalid_argument);
    }
}

TEST_CASE("hybrid scores satisfy the linearity invariant", "[retrieval]") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t n = 2 + rng() % 20;
        std::vector<std::string> ids;
        std::vector<double> dense, bm25;
        std::vector<bool> keep;
        for (size_t i = 0; i < n; ++i) {
            ids.push_back("c" + std::to_string(i));
            dense.push_back(static_cast<double>(rng() % 1000) / 100.0 - 5.0);
            bm25.push_back(static_cast<double>(rng() % 1000) / 100.0);
            keep.push_back(true);
        }
        HybridConfig cfg;
        cfg.lambda = static_cast<double>(rng() % 400) / 100.0;
        cfg.top_k = static_cast<int>(n);
        for (const auto& r : rank_candidates(ids, dense, bm25, keep, cfg))
            REQUIRE(r.hybrid_score == r.dense_score + cfg.lambda * r.bm25_score);
    }
}

TEST_CASE("scaling dense scores preserves the dense-only ordering", "[retrieval]") {
    std::mt19937_64 rng(29);
    std::vector<std::string> ids;
    std::vector<double> dense, bm25;
    std::vector<bool> keep;
    for (size_t i = 0; i < 15; ++i) {
        ids.push_back("c" + std::to_string(i));
        dense.push_back(static_cast<double>(rng() % 1000) / 100.0 - 5.0);
        bm25.push_back(static_cast<double>(rng() % 1000) / 100.0);
        keep.push_back(true);
    }
    HybridConfig cfg;
    cfg.lambda = 0.0;
    cfg.top_k = 15;
    const auto base = rank_candidates(ids, dense, bm25, keep, cfg);
    auto scaled = dense;
    for (auto& v : scaled) v *= 3.5;
    const auto after = rank_candidates(ids, scaled, bm25, keep, cfg);
    REQUIRE(base.size() == after.size());
    for (size_t i = 0; i < base.size(); ++i) CHECK(base[i].pair_id == after[i].pair_id);
}

TEST_CASE("retrieve excludes the query id, honors filters, and is pure", "[retrieval]") {
    auto corpus = tiny_corpus(
        {{"q", "alpha beta"}, {"x", "alpha beta"}, {"y", "gamma delta"}, {"z", "epsilon zeta"}});
    corpus.records[2].meta.fix_pattern_tag = "P14";
    const BpeModel bytes;
    const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 8, 5);
    const auto bm25 = bm25_build(corpus, bytes);
    const auto dense = dense_build(corpus, params, bytes);

    BugFixPair query = corpus.records[0];  // id "q" also lives in the codebase
    HybridConfig cfg;
    cfg.top_k = 10;

    const auto results = retrieve(query, corpus, bm25, dense, params, bytes, cfg);
    REQUIRE(results.size() == 3);
    for (const auto& r : results) CHECK(r.pair_id != "q");
    CHECK(results[0].pair_id == "x");  // identical text wins

    SECTION("repeated calls agree exactly") {
        const auto again = retrieve(query, corpus, bm25, dense, params, bytes, cfg);
        REQUIRE(again.size() == results.size());
        for (size_t i = 0; i < results.size(); ++i) {
            CHECK(results[i].pair_id == again[i].pair_id);
            CHECK(results[i].hybrid_score == again[i].hybrid_score);
        }
    }
    SECTION("exclude_ids removes candidates before ranking") {
        cfg.exclude_ids = {"x"};
        const auto filtered = retrieve(query, corpus, bm25, dense, params, bytes, cfg);
        CHECK(filtered.size() == 2);
        for (const auto& r : filtered) CHECK(r.pair_id != "x");
    }
    SECTION("meta_filter keeps only matching candidates") {
        cfg.meta_filter = [](const RecordMeta& m) { return m.fix_pattern_tag == "P14"; };
        const auto filtered = retrieve(query, corpus, bm25, dense, params, bytes, cfg);
        REQUIRE(filtered.size() == 1);
        CHECK(filtered[0].pair_id == "y");
    }
    SECTION("an id-space mismatch between indexes is an error") {
        auto other = tiny_corpus({{"only", "doc"}});
        const auto bad_dense = dense_build(other, params, bytes);
        CHECK_THROWS_AS(retrieve(query, corpus, bm25, bad_dense, params, bytes, cfg),
                        std::invalid_argument);
    }
}

TEST_CASE("an identical document wins under BM25-dominated fusion", "[retrieval]") {
    // Five distinct documents; the query text equals doc d2. With a huge
    // lambda the hybrid ranking is BM25's, whose self-similarity is maximal.
    const auto corpus = tiny_corpus({{"d0", "open file and read"},
                                     {"d1", "write buffer to disk"},
                                     {"d2", "close the socket now"},
                                     {"d3", "retry the connection"},
                                     {"d4", "parse the header block"}});
    const BpeModel bytes;
    const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 8, 7);
    const auto bm25 = bm25_build(corpus, bytes);
    const auto dense = dense_build(corpus, params, bytes);

    BugFixPair query;
    query.id = "external-query";
    query.bug_text = "close the socket now";
    query.fix_text = "irrelevant";

    HybridConfig cfg;
    cfg.lambda = 1e6;
    cfg.top_k = 1;
    const auto results = retrieve(query, corpus, bm25, dense, params, bytes, cfg);
    REQUIRE(results.size() == 1);
    CHECK(results[0].pair_id == "d2");

    // Cross-check with the independent oracle: d2 is the BM25 argmax.
    const auto docs = tokenize_all(corpus, bytes);
    const auto qtok = bytes.encode(query.bug_text).ids;
    size_t best = 0;
    double best_score = -1.0;
    for (size_t d = 0; d < docs.size(); ++d) {
        const double s = testutil::oracle_bm25(docs, qtok, d);
        if (s > best_score) {
            best_score = s;
            best = d;
        }
    }
    CHECK(corpus.records[best].id == "d2");
}

// --- Persistence ----------------------------------------------------------------

TEST_CASE("encoder params round-trip through the container format", "[retrieval]") {
    const auto params = init_encoder_params(300, 6, 77);
    testutil::TempDir dir;
    save_params(dir.file("p.params").string(), params);
    const auto loaded = load_params(dir.file("p.params").string());
    CHECK(loaded.embedding == params.embedding);
    CHECK(loaded.projection == params.projection);
}

TEST_CASE("the index container round-trips both indexes", "[retrieval]") {
    const auto corpus = tiny_corpus({{"a", "first doc"}, {"b", "second doc"}, {"c", "third one"}});
    const BpeModel bytes;
    const auto params = init_encoder_params(static_cast<int>(bytes.vocab_size()), 5, 13);
    const auto bm25 = bm25_build(corpus, bytes);
    const auto dense = dense_build(corpus, params, bytes);

    testutil::TempDir dir;
    save_index_container(dir.file("i.bin").string(), bm25, dense);
    const auto [bm25_back, dense_back] = load_index_container(dir.file("i.bin").string());
    CHECK(bm25_back.doc_ids == bm25.doc_ids);
    CHECK(bm25_back.doc_term_freqs == bm25.doc_term_freqs);
    CHECK(bm25_back.avg_doc_length == bm25.avg_doc_length);
    CHECK(dense_back.doc_ids == dense.doc_ids);
    CHECK(dense_back.vectors == dense.vectors);

    SECTION("a tampered version is rejected") {
        auto blob = testutil::slurp(dir.file("i.bin"));
        const auto at = blob.find("\"version\":1");
        REQUIRE(at != std::string::npos);
        blob.replace(at, 11, "\"version\":9");
        testutil::write(dir.file("bad.bin"), blob);
        CHECK_THROWS_WITH(load_index_container(dir.file("bad.bin").string()),
                          Catch::Matchers::ContainsSubstring("unsupported"));
    }
}
