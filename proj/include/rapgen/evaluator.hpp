#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rapgen/corpus.hpp"
#include "rapgen/diff.hpp"
#include "rapgen/encoder.hpp"
#include "rapgen/text.hpp"
#include "rapgen/tokenizer.hpp"

namespace rapgen {

enum class MatchMode { with_spaces, without_spaces };

inline bool exact_match(const std::string& pred, const std::string& target, MatchMode mode) {
    if (mode == MatchMode::with_spaces) return pred == target;
    return normalize_ws(pred) == normalize_ws(target);
}

// Sentence-level BLEU with n = 1..4, uniform weights, brevity penalty when the
// hypothesis is shorter than the reference, and add-one smoothing on the
// higher-order precisions (the unigram precision stays unsmoothed).
inline double bleu4(std::span<const int> pred, std::span<const int> ref) {
    if (pred.empty()) return 0.0;
    double log_sum = 0.0;
    for (size_t n = 1; n <= 4; ++n) {
        std::map<std::vector<int>, int> ref_ngrams;
        if (ref.size() >= n)
            for (size_t i = 0; i + n <= ref.size(); ++i)
                ref_ngrams[std::vector<int>(ref.begin() + static_cast<long>(i),
                                            ref.begin() + static_cast<long>(i + n))]++;
        std::map<std::vector<int>, int> hyp_ngrams;
        if (pred.size() >= n)
            for (size_t i = 0; i + n <= pred.size(); ++i)
                hyp_ngrams[std::vector<int>(pred.begin() + static_cast<long>(i),
                                            pred.begin() + static_cast<long>(i + n))]++;
        long total = 0, matched = 0;
        for (const auto& [gram, count] : hyp_ngrams) {
            total += count;
            const auto it = ref_ngrams.find(gram);
            if (it != ref_ngrams.end()) matched += std::min(count, it->second);
        }
        double precision;
        if (n == 1) {
            if (total == 0 || matched == 0) return 0.0;
            precision = static_cast<double>(matched) / static_cast<double>(total);
        } else {
            precision = static_cast<double>(matched + 1) / static_cast<double>(total + 1);
        }
        log_sum += std::log(precision);
    }
    double bp = 1.0;
    if (pred.size() < ref.size())
        bp = std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(pred.size()));
    return 100.0 * bp * std::exp(log_sum / 4.0);
}

struct EvalRecord {
    std::string id;
    std::string prediction;  // top-1 candidate, empty when generation failed
    std::string target;
    std::string bug_text;
    RecordMeta meta;
};

struct PerTypeStats {
    int count = 0;
    double em = 0.0;  // 0-100
};

struct ElRemovalStats {
    int gt_count = 0;
    int pred_count = 0;
    int correct_count = 0;
    int false_positive = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct LengthBucket {
    int bucket_start = 0;
    int fixed_count = 0;
    int failed_count = 0;
    double cum_fixed_fraction = 0.0;
    double cum_failed_fraction = 0.0;
};

struct RetrieverDiag {
    double mean_bleu4 = 0.0;   // 0-100
    double mean_cossim = 0.0;  // 0-100
};

struct EvalReport {
    int record_count = 0;
    std::string ws_policy = "strip all Unicode whitespace";
    double em_with_spaces = 0.0;
    double em_without_spaces = 0.0;
    double bleu4 = 0.0;
    bool has_error_removal = false;
    double error_removal = 0.0;
    std::map<std::string, PerTypeStats> per_error_type;  // "(none)" bucket for untyped records
    double unweighted_avg_em = 0.0;
    double weighted_avg_em = 0.0;
    ElRemovalStats el_removal;
    std::map<std::string, double> fix_ops;  // op combination -> fraction of records
    std::vector<LengthBucket> length_histogram;
    std::vector<std::string> undefined_ratios;  // 0/0 ratios reported as 0
};

// --- Fix-operation classification -----------------------------------------

enum class FixOp { insertion, replacement, deletion };

// Line-level LCS diff on whitespace-normalized lines. Within one hunk,
// unmatched target lines pair up with unmatched source lines as replacements;
// the surplus counts as insertion or deletion.
inline std::set<FixOp> fix_op_classify(const std::string& bug_text, const std::string& fix_text) {
    auto norm = [](const std::string& text) {
        auto lines = split_lines(text);
        for (auto& l : lines) l = normalize_ws(l);
        return lines;
    };
    const auto a = norm(bug_text);
    const auto b = norm(fix_text);
    const auto matches = lcs_pairs(a, b);
    std::set<FixOp> ops;
    for (const auto& hunk : diff_hunks(a.size(), b.size(), matches)) {
        if (hunk.deleted > 0 && hunk.inserted > 0) ops.insert(FixOp::replacement);
        if (hunk.deleted > hunk.inserted) ops.insert(FixOp::deletion);
        if (hunk.inserted > hunk.deleted) ops.insert(FixOp::insertion);
    }
    return ops;
}

inline std::string fix_op_key(const std::set<FixOp>& ops) {
    if (ops.empty()) return "none";
    std::string key;
    for (FixOp op : {FixOp::insertion, FixOp::replacement, FixOp::deletion}) {
        if (!ops.count(op)) continue;
        if (!key.empty()) key += "+";
        key += op == FixOp::insertion ? "insertion" : op == FixOp::replacement ? "replacement" : "deletion";
    }
    return key;
}

// --- Error-line removal ----------------------------------------------------

// True iff the candidate's lines equal the buggy lines minus exactly the
// error line, compared whitespace-normalized per line.
inline bool is_el_removal(const std::string& bug_text, int error_line_index,
                          const std::string& candidate_text) {
    const auto bug_lines = split_lines(bug_text);
    if (error_line_index < 0 || static_cast<size_t>(error_line_index) >= bug_lines.size())
        throw std::out_of_range("error_line " + std::to_string(error_line_index) + " out of range");
    const auto cand_lines = split_lines(candidate_text);
    if (cand_lines.size() + 1 != bug_lines.size()) return false;
    size_t ci = 0;
    for (size_t bi = 0; bi < bug_lines.size(); ++bi) {
        if (bi == static_cast<size_t>(error_line_index)) continue;
        if (normalize_ws(bug_lines[bi]) != normalize_ws(cand_lines[ci])) return false;
        ++ci;
    }
    return true;
}

inline ElRemovalStats el_removal_analysis(std::span<const EvalRecord> records) {
    ElRemovalStats stats;
    for (const auto& rec : records) {
        if (!rec.meta.error_line_index)
            throw std::invalid_argument("el_removal_analysis: record " + rec.id + " lacks error_line");
        const int err = *rec.meta.error_line_index;
        const bool gt = is_el_removal(rec.bug_text, err, rec.target);
        const bool pred = is_el_removal(rec.bug_text, err, rec.prediction);
        if (gt) ++stats.gt_count;
        if (pred) ++stats.pred_count;
        if (gt && pred) ++stats.correct_count;
        if (pred && !gt) ++stats.false_positive;
    }
    if (stats.pred_count > 0)
        stats.precision = 100.0 * stats.correct_count / stats.pred_count;
    if (stats.gt_count > 0) stats.recall = 100.0 * stats.correct_count / stats.gt_count;
    if (stats.precision + stats.recall > 0.0)
        stats.f1 = 2.0 * stats.precision * stats.recall / (stats.precision + stats.recall);
    return stats;
}

// --- External validator (error removal) ------------------------------------

struct Diagnostic {
    int line = 0;
    std::string rule;
};

// Runs the validator command template on one file. The template's "{}" is
// replaced with the path (appended when absent). Contract: exit 0, one
// diagnostic per line as "line:rule_id".
inline std::vector<Diagnostic> run_validator(const std::string& command_template,
                                             const std::string& path) {
    std::string cmd = command_template;
    const std::string quoted = "'" + path + "'";
    const size_t at = cmd.find("{}");
    if (at != std::string::npos) cmd.replace(at, 2, quoted);
    else cmd += " " + quoted;
    cmd += " 2>/dev/null";

    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("failed to launch validator: " + cmd);
    std::string output;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, n);
    const int status = pclose(pipe);
    if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw std::runtime_error("validator exited abnormally: " + cmd);

    std::vector<Diagnostic> diags;
    for (const auto& line : split_lines(output)) {
        if (line.empty()) continue;
        const size_t colon = line.find(':');
        if (colon == std::string::npos || colon == 0)
            throw std::runtime_error("unparseable validator output line: " + line);
        Diagnostic d;
        try {
            d.line = std::stoi(line.substr(0, colon));
        } catch (const std::exception&) {
            throw std::runtime_error("unparseable validator output line: " + line);
        }
        d.rule = line.substr(colon + 1);
        diags.push_back(std::move(d));
    }
    return diags;
}

inline std::map<std::string, int> rule_multiset(const std::vector<Diagnostic>& diags) {
    std::map<std::string, int> counts;
    for (const auto& d : diags) counts[d.rule]++;
    return counts;
}

namespace detail {
inline std::string write_temp_file(const std::string& content) {
    static std::atomic<uint64_t> counter{0};
    const auto dir = std::filesystem::temp_directory_path();
    const auto path =
        dir / ("rapgen-validate-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + ".txt");
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path.string();
}
}  // namespace detail

// A prediction is counted as correct when the flagged rule occurs strictly
// fewer times than in the buggy input and no rule gains occurrences. Line
// numbers shift under edits, so diagnostics compare as rule-id multisets.
inline double error_removal(std::span<const EvalRecord> records, const std::string& validator_template,
                            int* validated_count = nullptr) {
    int validated = 0, correct = 0;
    for (const auto& rec : records) {
        if (!rec.meta.error_type) continue;
        const std::string bug_path = detail::write_temp_file(rec.bug_text);
        const std::string pred_path = detail::write_temp_file(rec.prediction);
        std::map<std::string, int> before, after;
        try {
            before = rule_multiset(run_validator(validator_template, bug_path));
            after = rule_multiset(run_validator(validator_template, pred_path));
        } catch (...) {
            std::filesystem::remove(bug_path);
            std::filesystem::remove(pred_path);
            throw;
        }
        std::filesystem::remove(bug_path);
        std::filesystem::remove(pred_path);

        ++validated;
        const std::string& rule = *rec.meta.error_type;
        bool ok = after[rule] < before[rule];
        for (const auto& [r, c] : after)
            if (c > before[r]) ok = false;
        if (ok) ++correct;
    }
    if (validated_count) *validated_count = validated;
    return validated == 0 ? 0.0 : 100.0 * correct / validated;
}

// --- Aggregation ------------------------------------------------------------

// Fills the per-error-type breakdown and the unweighted/weighted averages
// from per-record match outcomes (0-100 scale).
inline void aggregate(std::span<const EvalRecord> records, const std::vector<bool>& matches,
                      EvalReport& report) {
    if (records.size() != matches.size())
        throw std::invalid_argument("aggregate: records and match results misaligned");
    std::map<std::string, std::pair<int, int>> by_type;  // type -> (count, correct)
    for (size_t i = 0; i < records.size(); ++i) {
        const std::string type = records[i].meta.error_type.value_or("(none)");
        auto& [count, correct] = by_type[type];
        ++count;
        if (matches[i]) ++correct;
    }
    report.per_error_type.clear();
    double em_sum = 0.0;
    long total = 0, total_correct = 0;
    for (const auto& [type, cc] : by_type) {
        PerTypeStats stats;
        stats.count = cc.first;
        stats.em = cc.first ? 100.0 * cc.second / cc.first : 0.0;
        em_sum += stats.em;
        total += cc.first;
        total_correct += cc.second;
        report.per_error_type[type] = stats;
    }
    if (by_type.empty()) {
        report.unweighted_avg_em = 0.0;
        report.weighted_avg_em = 0.0;
        report.undefined_ratios.push_back("unweighted_avg_em");
        report.undefined_ratios.push_back("weighted_avg_em");
        return;
    }
    report.unweighted_avg_em = em_sum / static_cast<double>(by_type.size());
    report.weighted_avg_em = 100.0 * static_cast<double>(total_correct) / static_cast<double>(total);
}

inline std::vector<LengthBucket> length_breakdown(std::span<const EvalRecord> records,
                                                  const std::vector<bool>& fixed, const BpeModel& tokenizer,
                                                  int bucket_width) {
    if (records.size() != fixed.size())
        throw std::invalid_argument("length_breakdown: outcomes misaligned");
    if (bucket_width < 1) throw std::invalid_argument("bucket_width must be >= 1");
    std::map<int, std::pair<int, int>> buckets;  // start -> (fixed, failed)
    for (size_t i = 0; i < records.size(); ++i) {
        const int tokens = static_cast<int>(tokenizer.encode(records[i].bug_text).ids.size());
        const int start = (tokens / bucket_width) * bucket_width;
        auto& [nfixed, nfailed] = buckets[start];
        if (fixed[i]) ++nfixed;
        else ++nfailed;
    }
    long total_fixed = 0, total_failed = 0;
    for (const auto& [start, ff] : buckets) {
        total_fixed += ff.first;
        total_failed += ff.second;
    }
    std::vector<LengthBucket> out;
    long cum_fixed = 0, cum_failed = 0;
    for (const auto& [start, ff] : buckets) {
        cum_fixed += ff.first;
        cum_failed += ff.second;
        LengthBucket b;
        b.bucket_start = start;
        b.fixed_count = ff.first;
        b.failed_count = ff.second;
        b.cum_fixed_fraction = total_fixed ? static_cast<double>(cum_fixed) / total_fixed : 0.0;
        b.cum_failed_fraction = total_failed ? static_cast<double>(cum_failed) / total_failed : 0.0;
        out.push_back(b);
    }
    return out;
}

// --- Retriever matching diagnostics ----------------------------------------

// Subword overlap (BLEU-4, retrieved against query) and dense cosine
// similarity between query and retrieved bug texts, both on a 0-100 scale.
inline RetrieverDiag retriever_diagnostics(
    std::span<const std::pair<std::string, std::string>> query_retrieved_texts,
    const EncoderParams& params, const BpeModel& tokenizer) {
    RetrieverDiag diag;
    if (query_retrieved_texts.empty()) return diag;
    double bleu_sum = 0.0, cos_sum = 0.0;
    for (const auto& [query, retrieved] : query_retrieved_texts) {
        const auto q_tokens = tokenizer.encode(query).ids;
        const auto r_tokens = tokenizer.encode(retrieved).ids;
        bleu_sum += bleu4(r_tokens, q_tokens);
        cos_sum += cosine(embed_tokens(params, q_tokens), embed_tokens(params, r_tokens));
    }
    const auto n = static_cast<double>(query_retrieved_texts.size());
    diag.mean_bleu4 = bleu_sum / n;
    diag.mean_cossim = 100.0 * cos_sum / n;
    return diag;
}

inline double mean_cosine_100(std::span<const std::pair<Vec, Vec>> vector_pairs) {
    if (vector_pairs.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [u, v] : vector_pairs) sum += cosine(u, v);
    return 100.0 * sum / static_cast<double>(vector_pairs.size());
}

// --- Orchestration -----------------------------------------------------------

struct EvalOptions {
    int length_bucket_width = 40;
    std::string validator_template;  // empty = skip error removal
};

inline EvalReport evaluate(std::span<const EvalRecord> records, const BpeModel& tokenizer,
                           const EvalOptions& options = {}) {
    EvalReport report;
    report.record_count = static_cast<int>(records.size());

    std::vector<bool> em_with(records.size()), em_without(records.size());
    long with_correct = 0, without_correct = 0;
    double bleu_sum = 0.0;
    std::map<std::string, int> op_counts;
    for (size_t i = 0; i < records.size(); ++i) {
        em_with[i] = exact_match(records[i].prediction, records[i].target, MatchMode::with_spaces);
        em_without[i] = exact_match(records[i].prediction, records[i].target, MatchMode::without_spaces);
        if (em_with[i]) ++with_correct;
        if (em_without[i]) ++without_correct;
        bleu_sum += bleu4(tokenizer.encode(records[i].prediction).ids,
                          tokenizer.encode(records[i].target).ids);
        op_counts[fix_op_key(fix_op_classify(records[i].bug_text, records[i].target))]++;
    }
    if (records.empty()) {
        report.undefined_ratios = {"em_with_spaces", "em_without_spaces", "bleu4",
                                   "unweighted_avg_em", "weighted_avg_em"};
        return report;
    }
    const auto n = static_cast<double>(records.size());
    report.em_with_spaces = 100.0 * static_cast<double>(with_correct) / n;
    report.em_without_spaces = 100.0 * static_cast<double>(without_correct) / n;
    report.bleu4 = bleu_sum / n;
    for (const auto& [key, count] : op_counts) report.fix_ops[key] = static_cast<double>(count) / n;

    aggregate(records, em_without, report);
    report.length_histogram = length_breakdown(records, em_without, tokenizer, options.length_bucket_width);

    bool all_localized = true;
    for (const auto& rec : records) all_localized = all_localized && rec.meta.error_line_index.has_value();
    if (all_localized) {
        report.el_removal = el_removal_analysis(records);
        if (report.el_removal.pred_count == 0) report.undefined_ratios.push_back("el_removal.precision");
        if (report.el_removal.gt_count == 0) report.undefined_ratios.push_back("el_removal.recall");
    } else {
        report.undefined_ratios.push_back("el_removal");
    }

    if (!options.validator_template.empty()) {
        report.has_error_removal = true;
        report.error_removal = error_removal(records, options.validator_template);
    }
    return report;
}

// --- Report rendering --------------------------------------------------------

inline json report_to_json(const EvalReport& r) {
    json per_type = json::object();
    for (const auto& [type, stats] : r.per_error_type)
        per_type[type] = json{{"count", stats.count}, {"em", stats.em}};
    json hist = json::array();
    for (const auto& b : r.length_histogram)
        hist.push_back(json{{"bucket_start", b.bucket_start},
                            {"fixed", b.fixed_count},
                            {"failed", b.failed_count},
                            {"cum_fixed_fraction", b.cum_fixed_fraction},
                            {"cum_failed_fraction", b.cum_failed_fraction}});
    return json{{"record_count", r.record_count},
                {"ws_policy", r.ws_policy},
                {"em_with_spaces", r.em_with_spaces},
                {"em_without_spaces", r.em_without_spaces},
                {"bleu4", r.bleu4},
                {"error_removal", r.has_error_removal ? json(r.error_removal) : json()},
                {"per_error_type", per_type},
                {"unweighted_avg_em", r.unweighted_avg_em},
                {"weighted_avg_em", r.weighted_avg_em},
                {"el_removal",
                 json{{"gt_count", r.el_removal.gt_count},
                      {"pred_count", r.el_removal.pred_count},
                      {"correct_count", r.el_removal.correct_count},
                      {"false_positive", r.el_removal.false_positive},
                      {"precision", r.el_removal.precision},
                      {"recall", r.el_removal.recall},
                      {"f1", r.el_removal.f1}}},
                {"fix_ops", r.fix_ops},
                {"length_histogram", hist},
                {"undefined_ratios", r.undefined_ratios}};
}

inline EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.record_count = j.at("record_count").get<int>();
    r.ws_policy = j.at("ws_policy").get<std::string>();
    r.em_with_spaces = j.at("em_with_spaces").get<double>();
    r.em_without_spaces = j.at("em_without_spaces").get<double>();
    r.bleu4 = j.at("bleu4").get<double>();
    if (!j.at("error_removal").is_null()) {
        r.has_error_removal = true;
        r.error_removal = j.at("error_removal").get<double>();
    }
    for (auto it = j.at("per_error_type").begin(); it != j.at("per_error_type").end(); ++it)
        r.per_error_type[it.key()] = {it.value().at("count").get<int>(), it.value().at("em").get<double>()};
    r.unweighted_avg_em = j.at("unweighted_avg_em").get<double>();
    r.weighted_avg_em = j.at("weighted_avg_em").get<double>();
    const json& el = j.at("el_removal");
    r.el_removal = {el.at("gt_count").get<int>(),     el.at("pred_count").get<int>(),
                    el.at("correct_count").get<int>(), el.at("false_positive").get<int>(),
                    el.at("precision").get<double>(),  el.at("recall").get<double>(),
                    el.at("f1").get<double>()};
    for (auto it = j.at("fix_ops").begin(); it != j.at("fix_ops").end(); ++it)
        r.fix_ops[it.key()] = it.value().get<double>();
    for (const auto& jb : j.at("length_histogram"))
        r.length_histogram.push_back({jb.at("bucket_start").get<int>(), jb.at("fixed").get<int>(),
                                      jb.at("failed").get<int>(), jb.at("cum_fixed_fraction").get<double>(),
                                      jb.at("cum_failed_fraction").get<double>()});
    r.undefined_ratios = j.at("undefined_ratios").get<std::vector<std::string>>();
    return r;
}

inline std::string render_table(const EvalReport& r) {
    std::ostringstream os;
    char buf[160];
    os << "evaluation report (" << r.record_count << " records; whitespace policy: " << r.ws_policy
       << ")\n";
    auto row = [&](const char* name, double value) {
        std::snprintf(buf, sizeof(buf), "  %-24s %8.2f\n", name, value);
        os << buf;
    };
    row("EM w/ spaces", r.em_with_spaces);
    row("EM w/o spaces", r.em_without_spaces);
    row("BLEU-4", r.bleu4);
    if (r.has_error_removal) row("error removal", r.error_removal);
    row("unweighted avg EM", r.unweighted_avg_em);
    row("weighted avg EM", r.weighted_avg_em);

    os << "\nper error type (EM w/o spaces)\n";
    for (const auto& [type, stats] : r.per_error_type) {
        std::snprintf(buf, sizeof(buf), "  %-32s %7d %8.2f\n", type.c_str(), stats.count, stats.em);
        os << buf;
    }

    os << "\nerror line removal\n";
    std::snprintf(buf, sizeof(buf),
                  "  gt %d  predicted %d  correct %d  false positive %d\n"
                  "  precision %.2f  recall %.2f  f1 %.2f\n",
                  r.el_removal.gt_count, r.el_removal.pred_count, r.el_removal.correct_count,
                  r.el_removal.false_positive, r.el_removal.precision, r.el_removal.recall,
                  r.el_removal.f1);
    os << buf;

    os << "\nfix operations\n";
    for (const auto& [key, fraction] : r.fix_ops) {
        std::snprintf(buf, sizeof(buf), "  %-32s %7.1f%%\n", key.c_str(), 100.0 * fraction);
        os << buf;
    }

    os << "\npatch length (tokens, fixed/failed, cumulative fractions)\n";
    for (const auto& b : r.length_histogram) {
        std::snprintf(buf, sizeof(buf), "  [%5d, ...) %6d %6d   %.3f %.3f\n", b.bucket_start,
                      b.fixed_count, b.failed_count, b.cum_fixed_fraction, b.cum_failed_fraction);
        os << buf;
    }
    if (!r.undefined_ratios.empty()) {
        os << "\nundefined ratios reported as 0:";
        for (const auto& name : r.undefined_ratios) os << " " << name;
        os << "\n";
    }
    return os.str();
}

}  // namespace rapgen
