#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rapgen/augmenter.hpp"
#include "rapgen/bm25.hpp"
#include "rapgen/corpus.hpp"
#include "rapgen/dense_index.hpp"
#include "rapgen/encoder.hpp"
#include "rapgen/evaluator.hpp"
#include "rapgen/generator.hpp"
#include "rapgen/index_io.hpp"
#include "rapgen/retriever.hpp"
#include "rapgen/tokenizer.hpp"

namespace rapgen {

namespace fs = std::filesystem;

// Exit codes: 0 success, 2 config error, 3..9 stage-specific.
enum ExitCode : int {
    exit_ok = 0,
    exit_config = 2,
    exit_ingest = 3,
    exit_tokenizer = 4,
    exit_retriever = 5,
    exit_index = 6,
    exit_augment = 7,
    exit_generate = 8,
    exit_eval = 9,
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
public:
    StageError(std::string stage_name, int exit_code, const std::string& what)
        : std::runtime_error(stage_name + ": " + what), stage(std::move(stage_name)), code(exit_code) {}
    std::string stage;
    int code;
};

enum class RetrievalStrategy { hybrid, random };

struct PipelineConfig {
    uint64_t seed = 42;
    fs::path output_dir = "out";
    // data
    std::map<Split, fs::path> datasets;  // train/valid/test when present
    fs::path codebase_path;
    Schema schema = Schema::commit_pair;
    // dedup
    bool dedup_enabled = false;
    DedupKey dedup_key = DedupKey::bug_and_fix_text;
    // tokenizer
    size_t vocab_size = 8192;
    // retriever
    HybridConfig hybrid;  // lambda, top_k; meta_filter derives from fix_pattern_filter
    std::optional<std::string> fix_pattern_filter;
    Bm25Params bm25;
    RetrievalStrategy strategy = RetrievalStrategy::hybrid;
    TrainConfig train;
    // augmenter
    bool with_error_info = false;
    // generator
    BackendSpec backend;
    int beam_size = 5;
    int max_length = 512;
    // evaluation
    EvalOptions eval;
};

inline PipelineConfig load_config(const fs::path& path, std::optional<uint64_t> seed_override = {},
                                  std::optional<fs::path> out_override = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    auto resolve = [&](const std::string& p) -> fs::path {
        fs::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    // Explicit nulls read as absent.
    auto get_string = [](const json& obj, const char* key, const std::string& fallback) {
        if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
        return obj.at(key).get<std::string>();
    };

    PipelineConfig cfg;
    try {
        cfg.seed = j.value("seed", cfg.seed);
        if (seed_override) cfg.seed = *seed_override;
        if (j.contains("output_dir")) cfg.output_dir = resolve(j.at("output_dir").get<std::string>());
        if (out_override) cfg.output_dir = *out_override;

        const json& data = j.at("data");
        for (Split s : {Split::train, Split::valid, Split::test}) {
            const std::string key = to_string(s);
            if (data.contains(key) && !data.at(key).is_null())
                cfg.datasets[s] = resolve(data.at(key).get<std::string>());
        }
        cfg.codebase_path = resolve(data.at("codebase").get<std::string>());
        cfg.schema = parse_schema(data.value("schema", "commit_pair"));

        if (j.contains("dedup")) {
            cfg.dedup_enabled = j.at("dedup").value("enabled", false);
            cfg.dedup_key = j.at("dedup").value("key", "bug_and_fix_text") == std::string("bug_text")
                                ? DedupKey::bug_text
                                : DedupKey::bug_and_fix_text;
        }
        if (j.contains("tokenizer")) cfg.vocab_size = j.at("tokenizer").value("vocab_size", cfg.vocab_size);

        if (j.contains("retriever")) {
            const json& r = j.at("retriever");
            cfg.hybrid.lambda = r.value("lambda", 1.0);
            cfg.hybrid.top_k = r.value("top_k", 1);
            cfg.bm25.k1 = r.value("k1", 1.2);
            cfg.bm25.b = r.value("b", 0.75);
            const std::string strategy = r.value("strategy", "hybrid");
            if (strategy == "hybrid") cfg.strategy = RetrievalStrategy::hybrid;
            else if (strategy == "random") cfg.strategy = RetrievalStrategy::random;
            else throw ConfigError("unknown retrieval strategy: " + strategy);
            if (r.contains("fix_pattern") && !r.at("fix_pattern").is_null()) {
                const auto tag = r.at("fix_pattern").get<std::string>();
                cfg.fix_pattern_filter = tag;
                cfg.hybrid.meta_filter = [tag](const RecordMeta& m) { return m.fix_pattern_tag == tag; };
            }
            if (r.contains("train")) {
                const json& t = r.at("train");
                cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
                cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
                cfg.train.epochs = t.value("epochs", cfg.train.epochs);
                cfg.train.dim = t.value("dim", cfg.train.dim);
                cfg.train.seed = t.value("seed", cfg.seed);
            } else {
                cfg.train.seed = cfg.seed;
            }
        } else {
            cfg.train.seed = cfg.seed;
        }

        if (j.contains("augment")) cfg.with_error_info = j.at("augment").value("with_error_info", false);

        if (j.contains("backend")) {
            const json& b = j.at("backend");
            cfg.backend.kind = parse_backend_kind(b.value("kind", "mock_echo"));
            cfg.backend.endpoint = get_string(b, "endpoint", "");
            cfg.backend.timeout = std::chrono::milliseconds(b.value("timeout_ms", 30000));
            if (b.contains("table") && !b.at("table").is_null()) {
                for (auto it = b.at("table").begin(); it != b.at("table").end(); ++it) {
                    std::vector<Candidate> cands;
                    for (const auto& jc : it.value())
                        cands.push_back({jc.at("text").get<std::string>(), jc.at("score").get<double>()});
                    cfg.backend.table[it.key()] = std::move(cands);
                }
            }
            cfg.beam_size = b.value("beam_size", 5);
            cfg.max_length = b.value("max_length", 512);
        }

        if (j.contains("evaluation")) {
            const json& e = j.at("evaluation");
            cfg.eval.validator_template = get_string(e, "validator", "");
            cfg.eval.length_bucket_width = e.value("length_bucket_width", 40);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("invalid config " + path.string() + ": " + e.what());
    }
    return cfg;
}

// Validation runs before any stage touches the filesystem.
inline void validate_config(const PipelineConfig& cfg) {
    if (cfg.hybrid.lambda < 0.0) throw ConfigError("retriever.lambda must be >= 0");
    if (cfg.hybrid.top_k < 1) throw ConfigError("retriever.top_k must be >= 1");
    if (cfg.train.batch_size < 2) throw ConfigError("retriever.train.batch_size must be >= 2");
    if (cfg.vocab_size < static_cast<size_t>(kBaseVocabSize))
        throw ConfigError("tokenizer.vocab_size must be at least " + std::to_string(kBaseVocabSize));
    if (cfg.beam_size < 1) throw ConfigError("backend.beam_size must be >= 1");
    if (cfg.eval.length_bucket_width < 1) throw ConfigError("evaluation.length_bucket_width must be >= 1");
    if (cfg.backend.kind == BackendKind::remote && cfg.backend.endpoint.empty())
        throw ConfigError("backend.kind=remote requires backend.endpoint");
    if (cfg.codebase_path.empty() || !fs::exists(cfg.codebase_path))
        throw ConfigError("data.codebase path does not exist: " + cfg.codebase_path.string());
    for (const auto& [split, p] : cfg.datasets)
        if (!fs::exists(p))
            throw ConfigError(std::string("data.") + to_string(split) + " path does not exist: " + p.string());
}

struct StageResult {
    std::string stage;
    fs::path artifact;
    bool reused = false;
};

struct RunSummary {
    std::vector<StageResult> stages;
    fs::path report_json;
    fs::path report_txt;
    EvalReport report;

    bool all_reused() const {
        for (const auto& s : stages)
            if (!s.reused) return false;
        return true;
    }
};

namespace detail {

inline std::string short_hash(const std::string& payload) { return hex64(fnv1a64(payload)).substr(0, 10); }

inline std::string file_hash(const fs::path& path) { return short_hash(read_file(path.string())); }

struct Stager {
    const PipelineConfig& cfg;
    std::ostream& log;
    std::vector<StageResult>& stages;

    // Runs `produce` unless the hash-named artifact already exists.
    fs::path stage(const std::string& name, int exit_code, const fs::path& artifact,
                   const std::function<void(const fs::path&)>& produce) {
        try {
            if (fs::exists(artifact)) {
                log << "[" << name << "] reused " << artifact.filename().string() << "\n";
                stages.push_back({name, artifact, true});
                return artifact;
            }
            fs::create_directories(artifact.parent_path());
            const fs::path tmp = artifact.string() + ".tmp";
            produce(tmp);
            fs::rename(tmp, artifact);
            log << "[" << name << "] wrote " << artifact.filename().string() << "\n";
            stages.push_back({name, artifact, false});
            return artifact;
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, exit_code, e.what());
        }
    }
};

}  // namespace detail

// Orchestrates ingestion, deduplication, tokenizer and retriever training,
// indexing, augmentation, generation, and evaluation. Every artifact name
// embeds a hash of the producing configuration, so a rerun with an unchanged
// config reuses each artifact instead of recomputing it.
class Pipeline {
public:
    explicit Pipeline(PipelineConfig config, std::ostream& log = std::cerr)
        : cfg_(std::move(config)), log_(log) {
        validate_config(cfg_);
        out_ = cfg_.output_dir;
    }

    const PipelineConfig& config() const { return cfg_; }

    // --- individual stages ---------------------------------------------

    fs::path stage_ingest(Split split) {
        if (split != Split::codebase && !cfg_.datasets.count(split))
            throw ConfigError(std::string("data.") + to_string(split) + " is required for this command");
        const fs::path source = split == Split::codebase ? cfg_.codebase_path : cfg_.datasets.at(split);
        const std::string h = detail::short_hash(std::string("ingest|") + to_string(split) + "|" +
                                                 to_string(cfg_.schema) + "|" +
                                                 detail::file_hash(source));
        const fs::path artifact = out_ / "corpus" / (std::string(to_string(split)) + "-" + h + ".jsonl");
        corpus_paths_[split] = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage(std::string("ingest:") + to_string(split), exit_ingest, artifact,
                            [&](const fs::path& tmp) {
                                const Corpus corpus = ingest(source.string(), cfg_.schema, split);
                                serialize_to_file(corpus, tmp.string());
                            });
    }

    void stage_ingest_all() {
        stage_ingest(Split::codebase);
        for (const auto& [split, path] : cfg_.datasets) stage_ingest(split);
    }

    fs::path stage_dedup() {
        if (!cfg_.dedup_enabled) throw StageError("dedup", exit_ingest, "dedup is disabled in the config");
        std::vector<Split> splits;
        std::string combined = "dedup|";
        combined += cfg_.dedup_key == DedupKey::bug_text ? "bug_text|" : "bug_and_fix_text|";
        for (const auto& [split, path] : cfg_.datasets) {
            splits.push_back(split);
            combined += corpus_artifact(split).filename().string() + "|";
        }
        const std::string h = detail::short_hash(combined);
        const fs::path report_path = out_ / ("dedup-report-" + h + ".json");
        detail::Stager stager{cfg_, log_, stages_};
        // Filtered corpora are co-produced with the report.
        const fs::path result = stager.stage("dedup", exit_ingest, report_path, [&](const fs::path& tmp) {
            std::vector<Corpus> corpora;
            for (Split s : splits) corpora.push_back(load_corpus_raw(s));
            const DedupReport report = find_duplicates(corpora, cfg_.dedup_key);
            const auto filtered = filter_duplicates(corpora, report);
            for (size_t i = 0; i < splits.size(); ++i)
                serialize_to_file(filtered[i], dedup_corpus_path(splits[i], h).string());
            write_file(tmp.string(), dedup_report_to_json(report).dump(2) + "\n");
        });
        for (Split s : splits) dedup_paths_[s] = dedup_corpus_path(s, h);
        return result;
    }

    fs::path stage_tokenizer() {
        const std::string h = detail::short_hash("bpe|" + std::to_string(cfg_.vocab_size) + "|" +
                                                 corpus_artifact(Split::codebase).filename().string());
        const fs::path artifact = out_ / ("tokenizer-" + h + ".json");
        tokenizer_path_ = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("train-tokenizer", exit_tokenizer, artifact, [&](const fs::path& tmp) {
            const BpeModel model = train_bpe(load_corpus(Split::codebase), cfg_.vocab_size);
            model.save(tmp.string());
        });
    }

    fs::path stage_retriever() {
        json tc{{"batch_size", cfg_.train.batch_size},
                {"learning_rate", cfg_.train.learning_rate},
                {"epochs", cfg_.train.epochs},
                {"seed", cfg_.train.seed},
                {"dim", cfg_.train.dim}};
        const std::string h = detail::short_hash("dpr|" + tc.dump() + "|" +
                                                 tokenizer_artifact().filename().string() + "|" +
                                                 corpus_artifact(Split::codebase).filename().string());
        const fs::path artifact = out_ / ("retriever-" + h + ".params");
        params_path_ = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("train-retriever", exit_retriever, artifact, [&](const fs::path& tmp) {
            const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
            std::vector<double> losses;
            const EncoderParams params = train_dpr(load_corpus(Split::codebase), tokenizer, cfg_.train, &losses);
            for (size_t e = 0; e < losses.size(); ++e)
                log_ << "[train-retriever] epoch " << e + 1 << " mean InfoNCE loss " << losses[e] << "\n";
            save_params(tmp.string(), params);
        });
    }

    fs::path stage_index() {
        json ic{{"k1", cfg_.bm25.k1}, {"b", cfg_.bm25.b}};
        const std::string h = detail::short_hash("index|" + ic.dump() + "|" +
                                                 tokenizer_artifact().filename().string() + "|" +
                                                 params_artifact().filename().string() + "|" +
                                                 corpus_artifact(Split::codebase).filename().string());
        const fs::path artifact = out_ / ("index-" + h + ".bin");
        index_path_ = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("index", exit_index, artifact, [&](const fs::path& tmp) {
            const Corpus codebase = load_corpus(Split::codebase);
            const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
            const EncoderParams params = load_params(params_artifact().string());
            const Bm25Index bm25 = bm25_build(codebase, tokenizer, cfg_.bm25);
            const DenseIndex dense = dense_build(codebase, params, tokenizer);
            save_index_container(tmp.string(), bm25, dense);
        });
    }

    fs::path stage_augment(Split split) {
        json ac{{"lambda", cfg_.hybrid.lambda},
                {"strategy", cfg_.strategy == RetrievalStrategy::random ? "random" : "hybrid"},
                {"fix_pattern", cfg_.fix_pattern_filter.value_or("")},
                {"with_error_info", cfg_.with_error_info},
                {"seed", cfg_.seed}};
        const std::string h = detail::short_hash("augment|" + ac.dump() + "|" +
                                                 index_artifact().filename().string() + "|" +
                                                 corpus_artifact(split).filename().string());
        const fs::path artifact =
            out_ / ("augmented-" + std::string(to_string(split)) + "-" + h + ".jsonl");
        augmented_paths_[split] = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage(std::string("augment:") + to_string(split), exit_augment, artifact,
                            [&](const fs::path& tmp) {
                                const Corpus dataset = load_corpus(split);
                                const Corpus codebase = load_corpus(Split::codebase);
                                const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
                                const EncoderParams params = load_params(params_artifact().string());
                                auto [bm25, dense] = load_index_container(index_artifact().string());
                                std::ofstream outfile(tmp, std::ios::binary);
                                const auto retrieve_top =
                                    make_retrieve_fn(codebase, bm25, dense, params, tokenizer, 1);
                                const auto stats = export_training_set(dataset, codebase, retrieve_top,
                                                                       cfg_.with_error_info, outfile);
                                if (stats.empty_retrievals > 0)
                                    log_ << "[augment:" << to_string(split) << "] warning: "
                                         << stats.empty_retrievals
                                         << " records exported with empty retrieval segments\n";
                            });
    }

    fs::path stage_generate() {
        json gc{{"kind", to_string(cfg_.backend.kind)},
                {"endpoint", cfg_.backend.endpoint},
                {"beam_size", cfg_.beam_size},
                {"max_length", cfg_.max_length}};
        const std::string h = detail::short_hash("generate|" + gc.dump() + "|" +
                                                 augmented_artifact(Split::test).filename().string());
        const fs::path artifact = out_ / ("candidates-" + h + ".jsonl");
        candidates_path_ = artifact;
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("generate", exit_generate, artifact, [&](const fs::path& tmp) {
            std::ifstream in(augmented_artifact(Split::test));
            std::vector<std::string> ids;
            std::vector<GenerationRequest> requests;
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const json jl = json::parse(line);
                ids.push_back(jl.at("id").get<std::string>());
                requests.push_back({jl.at("input").get<std::string>(), cfg_.beam_size, cfg_.max_length});
            }
            const auto outcomes = batch_generate(cfg_.backend, requests);
            std::ofstream outfile(tmp, std::ios::binary);
            for (size_t i = 0; i < outcomes.size(); ++i) {
                json jl{{"id", ids[i]}, {"candidates", candidate_list_to_json(outcomes[i].list)["candidates"]}};
                if (!outcomes[i].ok()) jl["error"] = outcomes[i].error;
                outfile << jl.dump() << "\n";
            }
        });
    }

    fs::path stage_eval() { return stage_eval_on(candidates_path_, "eval"); }

    // --- commands --------------------------------------------------------

    RunSummary run() {
        stage_ingest_all();
        if (cfg_.dedup_enabled) stage_dedup();
        stage_tokenizer();
        stage_retriever();
        stage_index();
        if (cfg_.datasets.count(Split::train)) stage_augment(Split::train);
        if (cfg_.datasets.count(Split::test)) {
            stage_augment(Split::test);
            stage_generate();
            stage_eval();
        }
        write_manifest();
        RunSummary summary;
        summary.stages = stages_;
        summary.report_json = report_json_;
        summary.report_txt = report_txt_;
        summary.report = report_;
        return summary;
    }

    fs::path cmd_retrieve(const fs::path& queries_path) {
        prepare_indexes();
        const std::string h = detail::short_hash("retrieve|" + std::to_string(cfg_.hybrid.lambda) + "|" +
                                                 std::to_string(cfg_.hybrid.top_k) + "|" +
                                                 cfg_.fix_pattern_filter.value_or("") + "|" +
                                                 index_artifact().filename().string() + "|" +
                                                 detail::file_hash(queries_path));
        const fs::path artifact = out_ / ("retrievals-" + h + ".jsonl");
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("retrieve", exit_augment, artifact, [&](const fs::path& tmp) {
            const Corpus queries = ingest(queries_path.string(), cfg_.schema, Split::test);
            const Corpus codebase = load_corpus(Split::codebase);
            const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
            const EncoderParams params = load_params(params_artifact().string());
            auto [bm25, dense] = load_index_container(index_artifact().string());
            const auto retrieve_top =
                make_retrieve_fn(codebase, bm25, dense, params, tokenizer, cfg_.hybrid.top_k);
            std::ofstream outfile(tmp, std::ios::binary);
            for (const auto& query : queries.records) {
                json results = json::array();
                for (const auto& r : retrieve_top(query))
                    results.push_back(json{{"pair_id", r.pair_id},
                                           {"bm25_score", r.bm25_score},
                                           {"dense_score", r.dense_score},
                                           {"hybrid_score", r.hybrid_score},
                                           {"rank", r.rank}});
                outfile << json{{"query_id", query.id}, {"results", results}}.dump() << "\n";
            }
        });
    }

    RunSummary cmd_eval(const fs::path& predictions_path) {
        stage_ingest(Split::test);
        stage_ingest(Split::codebase);
        stage_tokenizer();
        stage_eval_on(predictions_path, "eval");
        RunSummary summary;
        summary.stages = stages_;
        summary.report_json = report_json_;
        summary.report_txt = report_txt_;
        summary.report = report_;
        return summary;
    }

    fs::path cmd_diag() {
        prepare_indexes();
        stage_ingest(Split::test);
        const std::string h = detail::short_hash("diag|" + index_artifact().filename().string() + "|" +
                                                 corpus_artifact(Split::test).filename().string());
        const fs::path artifact = out_ / ("diag-" + h + ".json");
        detail::Stager stager{cfg_, log_, stages_};
        return stager.stage("diag", exit_eval, artifact, [&](const fs::path& tmp) {
            const Corpus queries = load_corpus(Split::test);
            const Corpus codebase = load_corpus(Split::codebase);
            const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
            const EncoderParams params = load_params(params_artifact().string());
            auto [bm25, dense] = load_index_container(index_artifact().string());
            const auto retrieve_top = make_retrieve_fn(codebase, bm25, dense, params, tokenizer, 1);
            std::vector<std::pair<std::string, std::string>> pairs;
            for (const auto& query : queries.records) {
                const auto results = retrieve_top(query);
                if (results.empty()) continue;
                const BugFixPair* rec = codebase.find(results.front().pair_id);
                if (rec) pairs.emplace_back(query.bug_text, rec->bug_text);
            }
            const RetrieverDiag diag = retriever_diagnostics(pairs, params, tokenizer);
            write_file(tmp.string(),
                       json{{"pairs", pairs.size()},
                            {"mean_bleu4", diag.mean_bleu4},
                            {"mean_cossim", diag.mean_cossim}}.dump(2) + "\n");
        });
    }

    // Runs the stages a standalone command depends on, reusing artifacts.
    void prepare_indexes() {
        stage_ingest(Split::codebase);
        stage_tokenizer();
        stage_retriever();
        stage_index();
    }

    const std::vector<StageResult>& stages() const { return stages_; }
    fs::path corpus_artifact(Split split) const {
        if (cfg_.dedup_enabled && dedup_paths_.count(split)) return dedup_paths_.at(split);
        return corpus_paths_.at(split);
    }
    fs::path tokenizer_artifact() const { return tokenizer_path_; }
    fs::path params_artifact() const { return params_path_; }
    fs::path index_artifact() const { return index_path_; }
    fs::path augmented_artifact(Split split) const { return augmented_paths_.at(split); }
    fs::path candidates_artifact() const { return candidates_path_; }

private:
    Corpus load_corpus_raw(Split split) const {
        return ingest(corpus_paths_.at(split).string(), cfg_.schema, split);
    }

    Corpus load_corpus(Split split) const {
        return ingest(corpus_artifact(split).string(), cfg_.schema, split);
    }

    fs::path dedup_corpus_path(Split split, const std::string& h) const {
        return out_ / "corpus" / (std::string(to_string(split)) + "-dedup-" + h + ".jsonl");
    }

    RetrieveFn make_retrieve_fn(const Corpus& codebase, const Bm25Index& bm25, const DenseIndex& dense,
                                const EncoderParams& params, const BpeModel& tokenizer, int top_k) {
        if (cfg_.strategy == RetrievalStrategy::random) {
            // Baseline stub: a seeded uniform pick, still honoring the
            // own-ground-truth exclusion.
            auto rng = std::make_shared<std::mt19937_64>(cfg_.seed);
            const Corpus* cb = &codebase;
            return [rng, cb](const BugFixPair& query) {
                std::vector<size_t> eligible;
                for (size_t i = 0; i < cb->records.size(); ++i)
                    if (cb->records[i].id != query.id) eligible.push_back(i);
                std::vector<RetrievalResult> results;
                if (eligible.empty()) return results;
                const size_t pick = eligible[static_cast<size_t>((*rng)() % eligible.size())];
                results.push_back({cb->records[pick].id, 0.0, 0.0, 0.0, 1});
                return results;
            };
        }
        HybridConfig hc = cfg_.hybrid;
        hc.top_k = top_k;
        const Corpus* cb = &codebase;
        const Bm25Index* bi = &bm25;
        const DenseIndex* di = &dense;
        const EncoderParams* pp = &params;
        const BpeModel* tk = &tokenizer;
        return [=](const BugFixPair& query) { return retrieve(query, *cb, *bi, *di, *pp, *tk, hc); };
    }

    fs::path stage_eval_on(const fs::path& predictions_path, const std::string& stage_name) {
        json ec{{"validator", cfg_.eval.validator_template},
                {"bucket_width", cfg_.eval.length_bucket_width}};
        const std::string h = detail::short_hash("eval|" + ec.dump() + "|" +
                                                 corpus_artifact(Split::test).filename().string() + "|" +
                                                 detail::file_hash(predictions_path));
        report_json_ = out_ / ("report-" + h + ".json");
        report_txt_ = out_ / ("report-" + h + ".txt");
        detail::Stager stager{cfg_, log_, stages_};
        const fs::path result =
            stager.stage(stage_name, exit_eval, report_json_, [&](const fs::path& tmp) {
                const Corpus test = load_corpus(Split::test);
                const BpeModel tokenizer = BpeModel::load(tokenizer_artifact().string());
                std::map<std::string, std::string> predictions;  // id -> top-1 text
                std::ifstream in(predictions_path);
                if (!in) throw std::runtime_error("cannot open predictions: " + predictions_path.string());
                std::string line;
                size_t line_no = 0;
                while (std::getline(in, line)) {
                    ++line_no;
                    if (line.empty()) continue;
                    json jl;
                    try {
                        jl = json::parse(line);
                    } catch (const json::exception& e) {
                        throw std::runtime_error("malformed predictions line " + std::to_string(line_no) +
                                                 ": " + e.what());
                    }
                    const std::string id = jl.at("id").get<std::string>();
                    std::string text;
                    if (jl.contains("prediction")) {
                        text = jl.at("prediction").get<std::string>();
                    } else if (jl.contains("candidates")) {
                        const auto& cands = jl.at("candidates");
                        if (!cands.empty()) text = cands.at(0).at("text").get<std::string>();
                    } else {
                        throw std::runtime_error("predictions line " + std::to_string(line_no) +
                                                 " lacks prediction/candidates");
                    }
                    if (!predictions.emplace(id, std::move(text)).second)
                        throw std::runtime_error("duplicate prediction for id " + id);
                }
                std::vector<EvalRecord> records;
                for (const auto& rec : test.records) {
                    const auto it = predictions.find(rec.id);
                    if (it == predictions.end())
                        throw std::runtime_error("predictions missing id " + rec.id);
                    records.push_back({rec.id, it->second, rec.fix_text, rec.bug_text, rec.meta});
                    predictions.erase(it);
                }
                if (!predictions.empty())
                    throw std::runtime_error("predictions contain unknown id " + predictions.begin()->first);
                report_ = evaluate(records, tokenizer, cfg_.eval);
                write_file(tmp.string(), report_to_json(report_).dump(2) + "\n");
                write_file(report_txt_.string(), render_table(report_));
            });
        if (!stages_.empty() && stages_.back().reused)
            report_ = report_from_json(json::parse(read_file(report_json_.string())));
        return result;
    }

    void write_manifest() {
        json stages = json::array();
        for (const auto& s : stages_)
            stages.push_back(json{{"stage", s.stage},
                                  {"artifact", fs::relative(s.artifact, out_).string()},
                                  {"reused", s.reused}});
        write_file((out_ / "run-manifest.json").string(), json{{"stages", stages}}.dump(2) + "\n");
    }

    PipelineConfig cfg_;
    std::ostream& log_;
    fs::path out_;
    std::vector<StageResult> stages_;
    std::map<Split, fs::path> corpus_paths_;
    std::map<Split, fs::path> dedup_paths_;
    std::map<Split, fs::path> augmented_paths_;
    fs::path tokenizer_path_, params_path_, index_path_, candidates_path_;
    fs::path report_json_, report_txt_;
    EvalReport report_;
};

}  // namespace rapgen
