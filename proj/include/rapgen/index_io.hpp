#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "rapgen/bm25.hpp"
#include "rapgen/dense_index.hpp"
#include "rapgen/encoder.hpp"
#include "rapgen/text.hpp"

namespace rapgen {

// Matrices persist as one JSON header line carrying the dims (plus any extra
// fields) followed by rows*cols little-endian float64 values in row-major
// order.
inline void append_matrix(std::string& out, const Mat& m, json header = json::object()) {
    header["rows"] = m.rows();
    header["cols"] = m.cols();
    out += header.dump();
    out.push_back('\n');
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) append_f64_le(out, m(r, c));
}

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    std::string line() {
        const size_t end = data_.find('\n', pos_);
        if (end == std::string::npos) throw std::runtime_error("truncated container file");
        std::string out = data_.substr(pos_, end - pos_);
        pos_ = end + 1;
        return out;
    }

    std::string bytes(size_t n) {
        if (pos_ + n > data_.size()) throw std::runtime_error("truncated container file");
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    Mat matrix(json* header_out = nullptr) {
        const json header = json::parse(line());
        if (header_out) *header_out = header;
        const auto rows = header.at("rows").get<Eigen::Index>();
        const auto cols = header.at("cols").get<Eigen::Index>();
        const std::string raw = bytes(static_cast<size_t>(rows) * static_cast<size_t>(cols) * 8);
        Mat m(rows, cols);
        const char* p = raw.data();
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c, p += 8) m(r, c) = read_f64_le(p);
        return m;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    std::string data_;
    size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("short write: " + path);
}

inline std::string encode_params(const EncoderParams& params) {
    std::string out;
    out += json{{"format", "rapgen.params"}, {"version", 1}, {"dim", params.dim()},
                {"vocab_size", params.vocab_size()}}.dump();
    out.push_back('\n');
    append_matrix(out, params.embedding);
    append_matrix(out, params.projection);
    return out;
}

inline EncoderParams decode_params(std::string data) {
    ByteReader reader(std::move(data));
    const json header = json::parse(reader.line());
    if (header.value("format", "") != "rapgen.params" || header.value("version", 0) != 1)
        throw std::runtime_error("unsupported encoder params format");
    EncoderParams params;
    params.embedding = reader.matrix();
    params.projection = reader.matrix();
    if (params.projection.rows() != header.at("dim").get<Eigen::Index>() ||
        params.embedding.rows() != header.at("vocab_size").get<Eigen::Index>())
        throw std::runtime_error("encoder params file is inconsistent");
    return params;
}

inline void save_params(const std::string& path, const EncoderParams& params) {
    write_file(path, encode_params(params));
}

inline EncoderParams load_params(const std::string& path) { return decode_params(read_file(path)); }

// Versioned container bundling the sparse index (JSON) and the dense matrix,
// whose header line carries the dims and doc ids.
inline std::string encode_index_container(const Bm25Index& bm25, const DenseIndex& dense) {
    const std::string bm25_json = bm25.to_json().dump();
    std::string out;
    out += json{{"format", "rapgen.index"}, {"version", 1}, {"bm25_bytes", bm25_json.size()}}.dump();
    out.push_back('\n');
    out += bm25_json;
    out.push_back('\n');
    append_matrix(out, dense.vectors, json{{"doc_ids", dense.doc_ids}});
    return out;
}

inline std::pair<Bm25Index, DenseIndex> decode_index_container(std::string data) {
    ByteReader reader(std::move(data));
    const json header = json::parse(reader.line());
    if (header.value("format", "") != "rapgen.index" || header.value("version", 0) != 1)
        throw std::runtime_error("unsupported index container format");
    const auto bm25_bytes = header.at("bm25_bytes").get<size_t>();
    Bm25Index bm25 = Bm25Index::from_json(json::parse(reader.bytes(bm25_bytes)));
    reader.line();  // newline after the bm25 block
    DenseIndex dense;
    json dense_header;
    dense.vectors = reader.matrix(&dense_header);
    dense.doc_ids = dense_header.at("doc_ids").get<std::vector<std::string>>();
    if (dense.vectors.rows() != static_cast<Eigen::Index>(dense.doc_ids.size()))
        throw std::runtime_error("index container is inconsistent");
    return {std::move(bm25), std::move(dense)};
}

inline void save_index_container(const std::string& path, const Bm25Index& bm25,
                                 const DenseIndex& dense) {
    write_file(path, encode_index_container(bm25, dense));
}

inline std::pair<Bm25Index, DenseIndex> load_index_container(const std::string& path) {
    return decode_index_container(read_file(path));
}

}  // namespace rapgen
