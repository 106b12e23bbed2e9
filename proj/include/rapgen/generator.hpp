#pragma once

#include <chrono>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rapgen/augmenter.hpp"

// httplib drags in <resolv.h>, whose _res macro breaks Eigen if it comes
// first; keep this include below the library headers.
#include <httplib.h>

namespace rapgen {

enum class BackendKind { remote, mock_echo, mock_copy_fix, mock_table };

inline const char* to_string(BackendKind k) {
    switch (k) {
        case BackendKind::remote: return "remote";
        case BackendKind::mock_echo: return "mock_echo";
        case BackendKind::mock_copy_fix: return "mock_copy_fix";
        case BackendKind::mock_table: return "mock_table";
    }
    return "?";
}

inline BackendKind parse_backend_kind(const std::string& s) {
    if (s == "remote") return BackendKind::remote;
    if (s == "mock_echo") return BackendKind::mock_echo;
    if (s == "mock_copy_fix") return BackendKind::mock_copy_fix;
    if (s == "mock_table") return BackendKind::mock_table;
    throw std::invalid_argument("unknown backend kind: " + s);
}

struct Candidate {
    std::string text;
    double score = 0.0;

    bool operator==(const Candidate&) const = default;
};

struct CandidateList {
    std::vector<Candidate> candidates;  // scores non-increasing, texts distinct
};

struct BackendSpec {
    BackendKind kind = BackendKind::mock_echo;
    std::string endpoint;  // required for remote
    std::map<std::string, std::vector<Candidate>> table;
    std::chrono::milliseconds timeout{30000};
};

struct GenerationRequest {
    std::string input;
    int beam_size = 5;
    int max_length = 512;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline json generation_request_to_json(const GenerationRequest& req) {
    return json{{"input", req.input}, {"beam_size", req.beam_size}, {"max_length", req.max_length}};
}

inline json candidate_list_to_json(const CandidateList& list) {
    json arr = json::array();
    for (const auto& c : list.candidates) arr.push_back(json{{"text", c.text}, {"score", c.score}});
    return json{{"candidates", arr}};
}

// Validates a backend response against the CandidateList invariants: at most
// beam_size entries after deduplication, scores non-increasing, duplicates
// keep the highest-scored instance. Never reorders.
inline CandidateList parse_candidate_json(const json& body, int beam_size) {
    if (!body.is_object() || !body.contains("candidates") || !body.at("candidates").is_array())
        throw GenerationError("malformed response: missing candidates array");
    CandidateList list;
    double prev_score = 0.0;
    bool first = true;
    for (const auto& jc : body.at("candidates")) {
        if (!jc.is_object() || !jc.contains("text") || !jc.contains("score") ||
            !jc.at("text").is_string() || !jc.at("score").is_number())
            throw GenerationError("malformed response: bad candidate entry");
        Candidate c{jc.at("text").get<std::string>(), jc.at("score").get<double>()};
        if (!first && c.score > prev_score)
            throw GenerationError("malformed response: candidate scores increase");
        prev_score = c.score;
        first = false;
        bool seen = false;
        for (const auto& kept : list.candidates) seen = seen || kept.text == c.text;
        if (!seen) list.candidates.push_back(std::move(c));
    }
    if (list.candidates.size() > static_cast<size_t>(beam_size))
        list.candidates.resize(static_cast<size_t>(beam_size));
    return list;
}

inline CandidateList parse_candidate_response(const std::string& body, int beam_size) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        throw GenerationError(std::string("malformed response: ") + e.what());
    }
    return parse_candidate_json(j, beam_size);
}

namespace detail {

struct SplitUrl {
    std::string base;  // scheme://host:port
    std::string path;
};

inline SplitUrl split_url(const std::string& url) {
    const size_t scheme = url.find("://");
    if (scheme == std::string::npos) throw GenerationError("invalid endpoint url: " + url);
    const size_t path_at = url.find('/', scheme + 3);
    if (path_at == std::string::npos) return {url, "/"};
    return {url.substr(0, path_at), url.substr(path_at)};
}

inline CandidateList generate_remote(const BackendSpec& spec, const GenerationRequest& req) {
    if (spec.endpoint.empty()) throw GenerationError("remote backend requires an endpoint");
    const auto url = split_url(spec.endpoint);
    httplib::Client client(url.base);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(spec.timeout);
    const auto rem_us = std::chrono::duration_cast<std::chrono::microseconds>(spec.timeout - secs);
    client.set_connection_timeout(static_cast<time_t>(secs.count()), rem_us.count());
    client.set_read_timeout(static_cast<time_t>(secs.count()), rem_us.count());
    const std::string body = generation_request_to_json(req).dump();

    httplib::Result res = client.Post(url.path, body, "application/json");
    if (!res) {  // transport failure: one retry
        res = client.Post(url.path, body, "application/json");
        if (!res)
            throw GenerationError("transport failure contacting " + spec.endpoint + ": " +
                                  httplib::to_string(res.error()));
    }
    if (res->status < 200 || res->status >= 300)
        throw GenerationError("malformed response: http status " + std::to_string(res->status));
    return parse_candidate_response(res->body, req.beam_size);
}

}  // namespace detail

inline CandidateList generate(const BackendSpec& spec, const GenerationRequest& req) {
    if (req.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
    switch (spec.kind) {
        case BackendKind::remote:
            return detail::generate_remote(spec, req);
        case BackendKind::mock_echo: {
            const auto spans = parse_augmented(req.input);
            return CandidateList{{Candidate{spans.query, 0.0}}};
        }
        case BackendKind::mock_copy_fix: {
            const auto spans = parse_augmented(req.input);
            return CandidateList{{Candidate{spans.fix, 0.0}}};
        }
        case BackendKind::mock_table: {
            const auto it = spec.table.find(req.input);
            if (it == spec.table.end()) throw GenerationError("mock_table: no entry for input");
            return parse_candidate_json(candidate_list_to_json(CandidateList{it->second}),
                                        req.beam_size);
        }
    }
    throw std::logic_error("unreachable backend kind");
}

struct GenerationOutcome {
    CandidateList list;
    std::string error;  // empty on success

    bool ok() const { return error.empty(); }
};

// Per-request failures become error-annotated empty lists; the batch always
// completes with results positionally aligned to the requests.
inline std::vector<GenerationOutcome> batch_generate(const BackendSpec& spec,
                                                     std::span<const GenerationRequest> requests) {
    std::vector<GenerationOutcome> outcomes;
    outcomes.reserve(requests.size());
    for (const auto& req : requests) {
        GenerationOutcome outcome;
        try {
            outcome.list = generate(spec, req);
        } catch (const std::exception& e) {
            outcome.error = e.what();
        }
        outcomes.push_back(std::move(outcome));
    }
    return outcomes;
}

}  // namespace rapgen
