#pragma once

/**
 * @file io.hpp
 *
 * @brief Framed binary files: an 8-byte magic, a little-endian u64 header length,
 * a JSON header, then a little-endian f64 payload.
 */

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "eggfm/error.hpp"

namespace eggfm::io {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write to '" + path.string() + "' failed");
}

struct Framed {
    json header;
    std::vector<double> payload;
};

inline std::string encode_framed(std::string_view magic, const json& header, const std::vector<double>& payload) {
    require(magic.size() == 8, ErrorCode::invalid_argument, "frame magic must be 8 bytes");
    const std::string head = header.dump();
    const std::uint64_t head_len = head.size();
    std::string out;
    out.reserve(16 + head.size() + payload.size() * 8);
    out.append(magic);
    out.append(reinterpret_cast<const char*>(&head_len), sizeof head_len);
    out.append(head);
    out.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(double));
    return out;
}

/// Decodes a frame; `expected_doubles` is read from the header by the caller-supplied count.
inline Framed decode_framed(std::string_view bytes, std::string_view magic, const std::string& what) {
    if (bytes.size() < 16 || bytes.substr(0, 8) != magic) {
        fail(ErrorCode::format, what + ": not a '" + std::string(magic) + "' file or truncated header");
    }
    std::uint64_t head_len = 0;
    std::memcpy(&head_len, bytes.data() + 8, sizeof head_len);
    if (head_len > bytes.size() - 16) fail(ErrorCode::format, what + ": truncated JSON header");
    Framed f;
    try {
        f.header = json::parse(bytes.substr(16, head_len));
    } catch (const json::exception& e) {
        fail(ErrorCode::format, what + ": malformed JSON header (" + e.what() + ")");
    }
    const std::size_t rest = bytes.size() - 16 - head_len;
    if (rest % sizeof(double) != 0) fail(ErrorCode::format, what + ": payload is not a whole number of f64 values");
    f.payload.resize(rest / sizeof(double));
    std::memcpy(f.payload.data(), bytes.data() + 16 + head_len, rest);
    return f;
}

/// Appends a matrix to a payload in row-major order.
inline void append_row_major(std::vector<double>& payload, const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) payload.push_back(m(r, c));
    }
}

/// Reads a rows x cols row-major block starting at `offset`, advancing it.
inline Eigen::MatrixXd take_row_major(const std::vector<double>& payload, std::size_t& offset, Eigen::Index rows,
                                      Eigen::Index cols, const std::string& what) {
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    if (offset + n > payload.size()) fail(ErrorCode::format, what + ": payload truncated");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = payload[offset++];
    }
    return m;
}

/// FNV-1a over a string, used to tag outputs with the configuration that produced them.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream ss;
    ss << std::hex << h;
    return ss.str();
}

} // namespace eggfm::io
