#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "rapgen/diff.hpp"
#include "rapgen/text.hpp"

namespace rapgen {

using json = nlohmann::json;

enum class Schema { linter, commit_pair, line_localized };
enum class Split { train, valid, test, codebase };

inline const char* to_string(Schema s) {
    switch (s) {
        case Schema::linter: return "linter";
        case Schema::commit_pair: return "commit_pair";
        case Schema::line_localized: return "line_localized";
    }
    return "?";
}

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
        case Split::codebase: return "codebase";
    }
    return "?";
}

inline Schema parse_schema(const std::string& s) {
    if (s == "linter") return Schema::linter;
    if (s == "commit_pair") return Schema::commit_pair;
    if (s == "line_localized") return Schema::line_localized;
    throw std::invalid_argument("unknown schema: " + s);
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "valid") return Split::valid;
    if (s == "test") return Split::test;
    if (s == "codebase") return Split::codebase;
    throw std::invalid_argument("unknown split: " + s);
}

// train < valid < test < codebase; earlier splits win when deduplicating.
inline int split_priority(Split s) { return static_cast<int>(s); }

struct RecordMeta {
    Schema schema = Schema::commit_pair;
    std::optional<std::string> error_type;
    std::optional<std::string> error_message;
    std::optional<int> error_line_index;  // 0-based line index into bug_text
    std::string language_tag;
    std::optional<std::string> fix_pattern_tag;
    std::optional<std::string> project;
    json extra = json::object();  // unknown keys, preserved on round-trip

    bool operator==(const RecordMeta&) const = default;
};

struct BugFixPair {
    std::string id;
    std::string bug_text;
    std::string fix_text;
    RecordMeta meta;

    bool operator==(const BugFixPair&) const = default;
};

struct Corpus {
    std::vector<BugFixPair> records;
    Split split = Split::train;

    const BugFixPair* find(const std::string& id) const {
        for (const auto& r : records)
            if (r.id == id) return &r;
        return nullptr;
    }
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& path, size_t line, const std::string& what)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + what),
          line_number(line) {}
    size_t line_number;
};

inline void validate_record(const BugFixPair& rec) {
    if (rec.bug_text.empty()) throw std::invalid_argument("record " + rec.id + ": empty bug text");
    if (rec.fix_text.empty()) throw std::invalid_argument("record " + rec.id + ": empty fix text");
    if (rec.meta.schema == Schema::linter) {
        if (!rec.meta.error_type)
            throw std::invalid_argument("record " + rec.id + ": linter schema requires meta field error_type");
        if (!rec.meta.error_message)
            throw std::invalid_argument("record " + rec.id + ": linter schema requires meta field error_message");
        if (!rec.meta.error_line_index)
            throw std::invalid_argument("record " + rec.id + ": linter schema requires meta field error_line");
    }
    if (rec.meta.error_line_index) {
        const auto lines = split_lines(rec.bug_text);
        const int idx = *rec.meta.error_line_index;
        if (idx < 0 || static_cast<size_t>(idx) >= lines.size())
            throw std::invalid_argument("record " + rec.id + ": error_line " + std::to_string(idx) +
                                        " out of range for " + std::to_string(lines.size()) + " lines");
    }
}

inline json meta_to_json(const RecordMeta& m) {
    json j = m.extra.is_object() ? m.extra : json::object();
    j["schema"] = to_string(m.schema);
    if (m.error_type) j["error_type"] = *m.error_type;
    if (m.error_message) j["error_message"] = *m.error_message;
    if (m.error_line_index) j["error_line"] = *m.error_line_index;
    j["language"] = m.language_tag;
    if (m.fix_pattern_tag) j["fix_pattern"] = *m.fix_pattern_tag;
    if (m.project) j["project"] = *m.project;
    return j;
}

inline RecordMeta meta_from_json(const json& j, Schema declared) {
    RecordMeta m;
    m.schema = declared;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& key = it.key();
        if (key == "schema") m.schema = parse_schema(it.value().get<std::string>());
        else if (key == "error_type") { if (!it.value().is_null()) m.error_type = it.value().get<std::string>(); }
        else if (key == "error_message") { if (!it.value().is_null()) m.error_message = it.value().get<std::string>(); }
        else if (key == "error_line") { if (!it.value().is_null()) m.error_line_index = it.value().get<int>(); }
        else if (key == "language") m.language_tag = it.value().get<std::string>();
        else if (key == "fix_pattern") { if (!it.value().is_null()) m.fix_pattern_tag = it.value().get<std::string>(); }
        else if (key == "project") { if (!it.value().is_null()) m.project = it.value().get<std::string>(); }
        else m.extra[key] = it.value();
    }
    return m;
}

inline json record_to_json(const BugFixPair& rec) {
    return json{{"id", rec.id}, {"bug", rec.bug_text}, {"fix", rec.fix_text}, {"meta", meta_to_json(rec.meta)}};
}

inline BugFixPair record_from_json(const json& j, Schema declared) {
    BugFixPair rec;
    if (!j.contains("bug") || !j.contains("fix")) throw std::invalid_argument("record requires bug and fix fields");
    rec.bug_text = j.at("bug").get<std::string>();
    rec.fix_text = j.at("fix").get<std::string>();
    if (j.contains("id") && !j.at("id").is_null()) rec.id = j.at("id").get<std::string>();
    if (j.contains("meta")) rec.meta = meta_from_json(j.at("meta"), declared);
    else rec.meta.schema = declared;
    return rec;
}

// Stable synthesized id for records without one: line number + content hash.
inline std::string synthesize_id(size_t line_number, const BugFixPair& rec) {
    const uint64_t h = fnv1a64(rec.fix_text, fnv1a64(rec.bug_text));
    std::ostringstream os;
    os << "L" << line_number << "-" << hex64(h).substr(0, 12);
    return os.str();
}

inline Corpus ingest(const std::string& path, Schema schema, Split split = Split::train) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    Corpus corpus;
    corpus.split = split;
    std::set<std::string> seen_ids;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path, line_no, e.what());
        }
        BugFixPair rec;
        try {
            rec = record_from_json(j, schema);
            if (rec.id.empty()) rec.id = synthesize_id(line_no, rec);
            validate_record(rec);
        } catch (const std::exception& e) {
            throw ParseError(path, line_no, e.what());
        }
        if (!seen_ids.insert(rec.id).second) throw ParseError(path, line_no, "duplicate id " + rec.id);
        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

inline std::string serialize(const Corpus& corpus) {
    std::string out;
    for (const auto& rec : corpus.records) {
        out += record_to_json(rec).dump();
        out.push_back('\n');
    }
    return out;
}

inline void serialize_to_file(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    out << serialize(corpus);
}

// --- Deduplication -------------------------------------------------------

enum class DedupKey { bug_and_fix_text, bug_text };

struct DedupReport {
    DedupKey key = DedupKey::bug_and_fix_text;
    std::map<Split, int> intra_split_duplicates;
    std::map<std::pair<Split, Split>, int> inter_split_duplicates;
    std::vector<std::vector<std::string>> duplicate_groups;  // ids, first occurrence first
};

inline std::string dedup_key_of(const BugFixPair& rec, DedupKey key) {
    std::string k = normalize_ws(rec.bug_text);
    if (key == DedupKey::bug_and_fix_text) {
        k.push_back('\x1f');
        k += normalize_ws(rec.fix_text);
    }
    return k;
}

// Two records are duplicates iff their key fields are byte-identical after
// whitespace normalization. Intra counts are surplus records per split within
// a group; inter counts are groups spanning a split pair.
inline DedupReport find_duplicates(const std::vector<Corpus>& corpora,
                                   DedupKey key = DedupKey::bug_and_fix_text) {
    if (corpora.empty()) throw std::invalid_argument("find_duplicates: no corpora given");
    struct Member {
        Split split;
        std::string id;
    };
    std::map<std::string, std::vector<Member>> groups;
    std::vector<std::string> order;
    for (const auto& corpus : corpora) {
        for (const auto& rec : corpus.records) {
            auto k = dedup_key_of(rec, key);
            auto [it, inserted] = groups.try_emplace(std::move(k));
            if (inserted) order.push_back(it->first);
            it->second.push_back({corpus.split, rec.id});
        }
    }
    DedupReport report;
    report.key = key;
    for (const auto& k : order) {
        const auto& members = groups.at(k);
        if (members.size() < 2) continue;
        std::vector<std::string> ids;
        std::map<Split, int> per_split;
        for (const auto& m : members) {
            ids.push_back(m.id);
            per_split[m.split]++;
        }
        report.duplicate_groups.push_back(std::move(ids));
        for (const auto& [split, count] : per_split)
            if (count > 1) report.intra_split_duplicates[split] += count - 1;
        for (auto a = per_split.begin(); a != per_split.end(); ++a)
            for (auto b = std::next(a); b != per_split.end(); ++b)
                report.inter_split_duplicates[{a->first, b->first}] += 1;
    }
    return report;
}

// Keeps the first occurrence per group by (split priority, record order);
// all later occurrences are dropped from their corpora.
inline std::vector<Corpus> filter_duplicates(const std::vector<Corpus>& corpora,
                                             const DedupReport& report) {
    std::set<std::pair<size_t, size_t>> drop;  // (corpus index, record index)
    for (const auto& group : report.duplicate_groups) {
        struct Loc {
            int priority;
            size_t corpus_idx;
            size_t record_idx;
        };
        std::vector<Loc> locs;
        for (const auto& id : group) {
            bool found = false;
            for (size_t ci = 0; ci < corpora.size() && !found; ++ci) {
                const auto& recs = corpora[ci].records;
                for (size_t ri = 0; ri < recs.size(); ++ri) {
                    if (recs[ri].id == id) {
                        locs.push_back({split_priority(corpora[ci].split), ci, ri});
                        found = true;
                        break;
                    }
                }
            }
            if (!found) throw std::invalid_argument("stale dedup report: id " + id + " not found");
        }
        std::sort(locs.begin(), locs.end(), [](const Loc& a, const Loc& b) {
            return std::tie(a.priority, a.corpus_idx, a.record_idx) <
                   std::tie(b.priority, b.corpus_idx, b.record_idx);
        });
        for (size_t i = 1; i < locs.size(); ++i) drop.insert({locs[i].corpus_idx, locs[i].record_idx});
    }
    std::vector<Corpus> out;
    out.reserve(corpora.size());
    for (size_t ci = 0; ci < corpora.size(); ++ci) {
        Corpus filtered;
        filtered.split = corpora[ci].split;
        for (size_t ri = 0; ri < corpora[ci].records.size(); ++ri)
            if (!drop.count({ci, ri})) filtered.records.push_back(corpora[ci].records[ri]);
        out.push_back(std::move(filtered));
    }
    return out;
}

inline json dedup_report_to_json(const DedupReport& r) {
    json intra = json::object();
    for (const auto& [s, c] : r.intra_split_duplicates) intra[to_string(s)] = c;
    json inter = json::object();
    for (const auto& [p, c] : r.inter_split_duplicates)
        inter[std::string(to_string(p.first)) + "," + to_string(p.second)] = c;
    json groups = json::array();
    for (const auto& g : r.duplicate_groups) groups.push_back(g);
    return json{{"key", r.key == DedupKey::bug_text ? "bug_text" : "bug_and_fix_text"},
                {"intra_split_duplicates", intra},
                {"inter_split_duplicates", inter},
                {"duplicate_groups", groups}};
}

// --- Linter-context construction -----------------------------------------

struct LinterContext {
    std::string source_text;  // "fix {type} {message} {context}"
    std::string target_text;  // context with the error line replaced by its fix
};

// The replacement for the error line is the fix region between the LCS
// matches of the surrounding bug lines.
inline LinterContext build_linter_context(const BugFixPair& rec, int window = 1) {
    if (rec.meta.schema != Schema::linter)
        throw std::invalid_argument("build_linter_context requires a linter-schema record");
    if (!rec.meta.error_line_index) throw std::invalid_argument("record lacks error_line");
    if (window < 0) throw std::invalid_argument("window must be >= 0");
    const auto bug_lines = split_lines(rec.bug_text);
    const auto fix_lines = split_lines(rec.fix_text);
    const int err = *rec.meta.error_line_index;
    if (err < 0 || static_cast<size_t>(err) >= bug_lines.size())
        throw std::out_of_range("error_line " + std::to_string(err) + " out of range");

    const int lo = std::max(0, err - window);
    const int hi = std::min(static_cast<int>(bug_lines.size()) - 1, err + window);

    const auto matches = lcs_pairs(bug_lines, fix_lines);
    int fix_lo = 0;
    int fix_hi = static_cast<int>(fix_lines.size());
    for (auto [i, j] : matches) {
        if (i < err) fix_lo = j + 1;
        if (i > err) {
            fix_hi = j;
            break;
        }
    }

    std::vector<std::string> context(bug_lines.begin() + lo, bug_lines.begin() + hi + 1);
    std::vector<std::string> target;
    for (int i = lo; i < err; ++i) target.push_back(bug_lines[static_cast<size_t>(i)]);
    for (int j = fix_lo; j < fix_hi; ++j) target.push_back(fix_lines[static_cast<size_t>(j)]);
    for (int i = err + 1; i <= hi; ++i) target.push_back(bug_lines[static_cast<size_t>(i)]);

    LinterContext out;
    out.source_text = "fix " + rec.meta.error_type.value_or("") + " " + rec.meta.error_message.value_or("") +
                      " " + join_lines(context);
    out.target_text = join_lines(target);
    return out;
}

// Error-information prefix shared with the augmenter.
inline std::string error_info_prefix(const RecordMeta& meta) {
    if (!meta.error_type || !meta.error_message)
        throw std::invalid_argument("record meta lacks error_type/error_message");
    return "fix " + *meta.error_type + " " + *meta.error_message;
}

}  // namespace rapgen
