// rapgen — retrieval-augmented program repair toolkit CLI.
//
// Subcommands chain ingestion, tokenizer/retriever training, indexing,
// retrieval, augmentation, generation, and evaluation over a single
// declarative config file. Artifacts are hash-named and reused on reruns.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rapgen/pipeline.hpp"

namespace {

struct GlobalOpts {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
};

rapgen::PipelineConfig load(const GlobalOpts& opts) {
    if (opts.config.empty()) throw rapgen::ConfigError("--config is required");
    std::optional<std::filesystem::path> out;
    if (opts.out) out = std::filesystem::path(*opts.out);
    auto cfg = rapgen::load_config(opts.config, opts.seed, out);
    rapgen::validate_config(cfg);
    return cfg;
}

int guarded(const std::function<void()>& body) {
    try {
        body();
        return rapgen::exit_ok;
    } catch (const rapgen::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return rapgen::exit_config;
    } catch (const rapgen::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval-augmented program repair toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalOpts opts;
    app.add_option("--config", opts.config, "pipeline config file (JSON, // comments allowed)");
    uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "override the config seed");
    std::string out_value;
    auto* out_opt = app.add_option("--out", out_value, "override the output directory");

    std::string queries_file;
    std::string predictions_file;
    std::string split_name = "codebase";

    auto* cmd_run = app.add_subcommand("run", "execute the full pipeline");
    auto* cmd_ingest = app.add_subcommand("ingest", "ingest the configured corpora");
    cmd_ingest->add_option("--split", split_name, "one split to ingest (default: all)");
    auto* cmd_dedup = app.add_subcommand("dedup", "find and filter duplicates across data splits");
    auto* cmd_tok = app.add_subcommand("train-tokenizer", "train the BPE tokenizer");
    auto* cmd_ret = app.add_subcommand("train-retriever", "train the dense retriever");
    auto* cmd_index = app.add_subcommand("index", "build the sparse and dense indexes");
    auto* cmd_retrieve = app.add_subcommand("retrieve", "run hybrid retrieval for a query file");
    cmd_retrieve->add_option("queries", queries_file, "query corpus (JSON lines)")->required();
    auto* cmd_augment = app.add_subcommand("augment", "export retrieval-augmented inputs");
    auto* cmd_generate = app.add_subcommand("generate", "generate fix candidates for the test split");
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a predictions file against the test split");
    cmd_eval->add_option("predictions", predictions_file, "predictions or candidates file")->required();
    auto* cmd_diag = app.add_subcommand("diag", "retriever matching diagnostics on the test split");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : rapgen::exit_config;
    }
    if (*seed_opt) opts.seed = seed_value;
    if (*out_opt) opts.out = out_value;

    return guarded([&] {
        rapgen::Pipeline pipeline(load(opts), std::cerr);
        if (cmd_run->parsed()) {
            const auto summary = pipeline.run();
            if (!summary.report_json.empty())
                std::cout << rapgen::read_file(summary.report_txt.string());
        } else if (cmd_ingest->parsed()) {
            if (cmd_ingest->count("--split")) pipeline.stage_ingest(rapgen::parse_split(split_name));
            else pipeline.stage_ingest_all();
        } else if (cmd_dedup->parsed()) {
            pipeline.stage_ingest_all();
            pipeline.stage_dedup();
        } else if (cmd_tok->parsed()) {
            pipeline.stage_ingest(rapgen::Split::codebase);
            pipeline.stage_tokenizer();
        } else if (cmd_ret->parsed()) {
            pipeline.stage_ingest(rapgen::Split::codebase);
            pipeline.stage_tokenizer();
            pipeline.stage_retriever();
        } else if (cmd_index->parsed()) {
            pipeline.prepare_indexes();
        } else if (cmd_retrieve->parsed()) {
            std::cout << pipeline.cmd_retrieve(queries_file).string() << "\n";
        } else if (cmd_augment->parsed()) {
            pipeline.prepare_indexes();
            if (pipeline.config().datasets.count(rapgen::Split::train)) {
                pipeline.stage_ingest(rapgen::Split::train);
                pipeline.stage_augment(rapgen::Split::train);
            }
            if (pipeline.config().datasets.count(rapgen::Split::test)) {
                pipeline.stage_ingest(rapgen::Split::test);
                pipeline.stage_augment(rapgen::Split::test);
            }
        } else if (cmd_generate->parsed()) {
            pipeline.prepare_indexes();
            pipeline.stage_ingest(rapgen::Split::test);
            pipeline.stage_augment(rapgen::Split::test);
            std::cout << pipeline.stage_generate().string() << "\n";
        } else if (cmd_eval->parsed()) {
            const auto summary = pipeline.cmd_eval(predictions_file);
            std::cout << rapgen::read_file(summary.report_txt.string());
        } else if (cmd_diag->parsed()) {
            std::cout << pipeline.cmd_diag().string() << "\n";
        }
    });
}
