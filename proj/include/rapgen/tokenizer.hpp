#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rapgen/corpus.hpp"

namespace rapgen {

inline constexpr std::array<const char*, 6> kSpecialTokens = {"[CLS]", "[SEP]", "[BUG]",
                                                              "[FIX]", "[EOS]", "[UNK]"};
inline constexpr int kNumSpecials = 6;
inline constexpr int kByteTokenBase = kNumSpecials;           // byte b has id kByteTokenBase + b
inline constexpr int kBaseVocabSize = kByteTokenBase + 256;   // specials + full byte alphabet

struct TokenSeq {
    std::vector<int> ids;
    std::vector<std::pair<size_t, size_t>> offsets;  // [byte start, byte end) per token
};

// Byte-level BPE model. Ids 0..5 are reserved specials, 6..261 the byte
// alphabet, and merged tokens follow in training order.
class BpeModel {
public:
    std::vector<std::string> vocab;                          // token byte content by id
    std::vector<std::pair<std::string, std::string>> merges;

    BpeModel() {
        vocab.reserve(kBaseVocabSize);
        for (const char* s : kSpecialTokens) vocab.emplace_back(s);
        for (int b = 0; b < 256; ++b) vocab.push_back(std::string(1, static_cast<char>(b)));
        rebuild_lookup();
    }

    static BpeModel from_merges(std::vector<std::pair<std::string, std::string>> merge_list) {
        BpeModel model;
        for (auto& [l, r] : merge_list) model.add_merge(l, r);
        return model;
    }

    size_t vocab_size() const { return vocab.size(); }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= vocab.size())
            throw std::out_of_range("token id " + std::to_string(id) + " out of range");
        return vocab[static_cast<size_t>(id)];
    }

    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

    int special_id(const std::string& name) const {
        for (int i = 0; i < kNumSpecials; ++i)
            if (name == kSpecialTokens[static_cast<size_t>(i)]) return i;
        throw std::invalid_argument("unknown special token: " + name);
    }

    void add_merge(const std::string& left, const std::string& right) {
        const int l = id_of(left);
        const int r = id_of(right);
        if (l < 0 || r < 0) throw std::invalid_argument("merge references unknown token");
        merges.emplace_back(left, right);
        vocab.push_back(left + right);
        const int merged = static_cast<int>(vocab.size()) - 1;
        token_to_id_[vocab.back()] = merged;
        merge_ids_.push_back({l, r, merged});
    }

    // Non-special token id for exact byte content, -1 when absent.
    int id_of(const std::string& content) const {
        auto it = token_to_id_.find(content);
        return it == token_to_id_.end() ? -1 : it->second;
    }

    TokenSeq encode(std::string_view text) const {
        TokenSeq seq;
        seq.ids.reserve(text.size());
        seq.offsets.reserve(text.size());
        for (size_t i = 0; i < text.size(); ++i) {
            seq.ids.push_back(kByteTokenBase + static_cast<unsigned char>(text[i]));
            seq.offsets.emplace_back(i, i + 1);
        }
        // Merges apply in training order, each in one left-to-right pass.
        for (const auto& [l, r, merged] : merge_ids_) {
            size_t w = 0;
            for (size_t i = 0; i < seq.ids.size();) {
                if (i + 1 < seq.ids.size() && seq.ids[i] == l && seq.ids[i + 1] == r) {
                    seq.ids[w] = merged;
                    seq.offsets[w] = {seq.offsets[i].first, seq.offsets[i + 1].second};
                    i += 2;
                } else {
                    seq.ids[w] = seq.ids[i];
                    seq.offsets[w] = seq.offsets[i];
                    i += 1;
                }
                ++w;
            }
            seq.ids.resize(w);
            seq.offsets.resize(w);
        }
        return seq;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) out += token(id);
        return out;
    }

    json to_json() const;
    static BpeModel from_json(const json& j);

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write tokenizer model: " + path);
        out << to_json().dump(2, ' ', /*ensure_ascii=*/true) << "\n";
    }

    static BpeModel load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open tokenizer model: " + path);
        json j;
        in >> j;
        return from_json(j);
    }

private:
    void rebuild_lookup() {
        token_to_id_.clear();
        for (size_t id = kNumSpecials; id < vocab.size(); ++id)
            token_to_id_.emplace(vocab[id], static_cast<int>(id));
    }

    std::unordered_map<std::string, int> token_to_id_;  // non-special content -> id
    std::vector<std::array<int, 3>> merge_ids_;         // (left, right, merged) per merge
};

// Fixed byte <-> code point table for the JSON model file: printable ASCII
// other than space maps to itself, everything else to U+0100 + byte.
inline char32_t byte_to_codepoint(unsigned char b) {
    if (b >= 0x21 && b <= 0x7E) return b;
    return 0x100 + b;
}

inline int codepoint_to_byte(char32_t cp) {
    if (cp >= 0x21 && cp <= 0x7E) return static_cast<int>(cp);
    if (cp >= 0x100 && cp <= 0x1FF) return static_cast<int>(cp - 0x100);
    return -1;
}

inline std::string token_bytes_to_printable(const std::string& bytes) {
    std::string out;
    for (unsigned char b : bytes) {
        const char32_t cp = byte_to_codepoint(b);
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else {  // all mapped code points are below U+0800
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

inline std::string printable_to_token_bytes(const std::string& printable) {
    std::string out;
    size_t i = 0;
    while (i < printable.size()) {
        auto [cp, len] = decode_utf8(printable, i);
        const int b = codepoint_to_byte(cp);
        if (b < 0) throw std::invalid_argument("invalid code point in tokenizer model token");
        out.push_back(static_cast<char>(b));
        i += len;
    }
    return out;
}

inline json BpeModel::to_json() const {
    json jvocab = json::array();
    for (size_t id = 0; id < vocab.size(); ++id) {
        if (id < kNumSpecials) jvocab.push_back(vocab[id]);
        else jvocab.push_back(token_bytes_to_printable(vocab[id]));
    }
    json jmerges = json::array();
    for (const auto& [l, r] : merges)
        jmerges.push_back(json::array({token_bytes_to_printable(l), token_bytes_to_printable(r)}));
    json jspecials = json::object();
    for (int i = 0; i < kNumSpecials; ++i) jspecials[kSpecialTokens[static_cast<size_t>(i)]] = i;
    return json{{"format", "rapgen.bpe"},
                {"version", 1},
                {"vocab", jvocab},
                {"merges", jmerges},
                {"specials", jspecials}};
}

inline BpeModel BpeModel::from_json(const json& j) {
    if (j.value("format", "") != "rapgen.bpe" || j.value("version", 0) != 1)
        throw std::runtime_error("unsupported tokenizer model format");
    BpeModel model;
    for (const auto& m : j.at("merges"))
        model.add_merge(printable_to_token_bytes(m.at(0).get<std::string>()),
                        printable_to_token_bytes(m.at(1).get<std::string>()));
    // Cross-check the stored vocab against the reconstruction.
    const auto& jvocab = j.at("vocab");
    if (jvocab.size() != model.vocab.size()) throw std::runtime_error("tokenizer model vocab size mismatch");
    for (size_t id = kNumSpecials; id < model.vocab.size(); ++id) {
        if (printable_to_token_bytes(jvocab.at(id).get<std::string>()) != model.vocab[id])
            throw std::runtime_error("tokenizer model vocab entry mismatch at id " + std::to_string(id));
    }
    return model;
}

// Greedy byte-level BPE training. Each record contributes its bug and fix
// texts as separate documents. Merges are picked by highest adjacent-pair
// frequency, ties broken by lexicographically smallest merged string; training
// stops at the vocab budget or when no pair occurs at least twice.
inline BpeModel train_bpe(const std::vector<std::string>& documents, size_t vocab_size) {
    if (vocab_size < static_cast<size_t>(kBaseVocabSize))
        throw std::invalid_argument("vocab_size must be at least " + std::to_string(kBaseVocabSize));
    bool any = false;
    for (const auto& d : documents) any = any || !d.empty();
    if (documents.empty() || !any) throw std::invalid_argument("train_bpe: empty corpus");

    BpeModel model;
    std::vector<std::vector<int>> docs;
    docs.reserve(documents.size());
    for (const auto& d : documents) {
        std::vector<int> toks;
        toks.reserve(d.size());
        for (unsigned char b : d) toks.push_back(kByteTokenBase + b);
        docs.push_back(std::move(toks));
    }

    while (model.vocab_size() < vocab_size) {
        std::map<std::pair<int, int>, long> freq;
        for (const auto& doc : docs)
            for (size_t i = 0; i + 1 < doc.size(); ++i) freq[{doc[i], doc[i + 1]}]++;

        long best_count = 0;
        std::pair<int, int> best_pair{-1, -1};
        std::string best_merged;
        for (const auto& [pair, count] : freq) {
            if (count < 2) continue;
            std::string merged = model.token(pair.first) + model.token(pair.second);
            if (model.id_of(merged) >= 0) continue;  // would duplicate an existing token
            bool is_special_name = false;
            for (const char* s : kSpecialTokens) is_special_name = is_special_name || merged == s;
            if (is_special_name) continue;
            if (count > best_count || (count == best_count && merged < best_merged)) {
                best_count = count;
                best_pair = pair;
                best_merged = std::move(merged);
            }
        }
        if (best_count < 2) break;

        model.add_merge(model.token(best_pair.first), model.token(best_pair.second));
        const int merged_id = static_cast<int>(model.vocab_size()) - 1;
        for (auto& doc : docs) {
            size_t w = 0;
            for (size_t i = 0; i < doc.size();) {
                if (i + 1 < doc.size() && doc[i] == best_pair.first && doc[i + 1] == best_pair.second) {
                    doc[w++] = merged_id;
                    i += 2;
                } else {
                    doc[w++] = doc[i];
                    i += 1;
                }
            }
            doc.resize(w);
        }
    }
    return model;
}

inline BpeModel train_bpe(const Corpus& corpus, size_t vocab_size) {
    std::vector<std::string> documents;
    documents.reserve(corpus.records.size() * 2);
    for (const auto& rec : corpus.records) {
        documents.push_back(rec.bug_text);
        documents.push_back(rec.fix_text);
    }
    return train_bpe(documents, vocab_size);
}

}  // namespace rapgen
