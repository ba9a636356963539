#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gemq/model.hpp"

namespace gemq {

// Checkpoint container ("GEMQ"): magic, u16 version, length-prefixed
// canonical config JSON, then named tensor sections (name, rows, cols,
// raw little-endian f64). All integers little-endian.
namespace ckpt {

constexpr char kMagic[4] = {'G', 'E', 'M', 'Q'};
constexpr std::uint16_t kVersion = 1;
constexpr const char* kActivation = "silu";

inline void write_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {(unsigned char)(v & 0xFF), (unsigned char)(v >> 8)};
    os.write((const char*)b, 2);
}
inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xFF);
    os.write((const char*)b, 4);
}
inline void write_f64(std::ostream& os, double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((u >> (8 * i)) & 0xFF);
    os.write((const char*)b, 8);
}
inline std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read((char*)b, 2);
    if (!is) fail("format", "truncated file");
    return std::uint16_t(b[0] | (b[1] << 8));
}
inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read((char*)b, 4);
    if (!is) fail("format", "truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}
inline double read_f64(std::istream& is) {
    unsigned char b[8];
    is.read((char*)b, 8);
    if (!is) fail("format", "truncated file");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
    double d;
    std::memcpy(&d, &u, 8);
    return d;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}
inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), std::streamsize(n));
    if (!is) fail("format", "truncated string");
    return s;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    write_string(os, name);
    write_u32(os, std::uint32_t(t.rows));
    write_u32(os, std::uint32_t(t.cols));
    for (double v : t.data) write_f64(os, v);
}

inline nlohmann::json config_json(const MoeModel& m) {
    const MoeConfig& c = m.config;
    nlohmann::json j;
    j["activation"] = kActivation;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["d_hidden"] = c.d_hidden;
    j["n_layers"] = c.n_layers;
    j["n_experts"] = c.n_experts;
    j["top_k"] = c.top_k;
    j["seq_len"] = c.seq_len;
    j["seed"] = c.seed;
    j["tokenizer_bytes"] = m.tokenizer.id_to_byte;
    if (!m.expert_bits.empty()) j["expert_bits"] = m.expert_bits;
    return j;
}

inline void parse_config(const nlohmann::json& j, MoeModel& m) {
    MoeConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_hidden = j.at("d_hidden").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.at("activation").get<std::string>() != kActivation)
        fail("format", "unsupported activation in checkpoint");
    m.config = c;
    m.tokenizer.id_to_byte = j.at("tokenizer_bytes").get<std::vector<std::uint8_t>>();
    m.tokenizer.byte_to_id.fill(-1);
    for (std::size_t i = 0; i < m.tokenizer.id_to_byte.size(); ++i)
        m.tokenizer.byte_to_id[m.tokenizer.id_to_byte[i]] = int(i);
    if (j.contains("expert_bits"))
        m.expert_bits = j.at("expert_bits").get<std::vector<int>>();
}

} // namespace ckpt

inline void save_checkpoint(const MoeModel& m, std::ostream& os) {
    os.write(ckpt::kMagic, 4);
    ckpt::write_u16(os, ckpt::kVersion);
    ckpt::write_string(os, ckpt::config_json(m).dump());
    std::uint32_t n_tensors = 2 + std::uint32_t(m.blocks.size()) * (1 + 2 * std::uint32_t(m.config.n_experts));
    ckpt::write_u32(os, n_tensors);
    ckpt::write_tensor(os, "embedding", m.embedding);
    ckpt::write_tensor(os, "head", m.head);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        ckpt::write_tensor(os, "block." + std::to_string(l) + ".router", m.blocks[l].router_w);
        for (std::size_t e = 0; e < m.blocks[l].experts.size(); ++e) {
            std::string base = "block." + std::to_string(l) + ".expert." + std::to_string(e);
            ckpt::write_tensor(os, base + ".w_up", m.blocks[l].experts[e].w_up);
            ckpt::write_tensor(os, base + ".w_down", m.blocks[l].experts[e].w_down);
        }
    }
}

inline void save_checkpoint(const MoeModel& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("io", "cannot open for write: " + path);
    save_checkpoint(m, os);
    if (!os) fail("io", "write failed: " + path);
}

// Loads a checkpoint. When `expected_config` is given, a config mismatch is
// rejected before any tensor data is read.
inline MoeModel load_checkpoint(std::istream& is,
                                const std::optional<MoeConfig>& expected_config = {}) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, ckpt::kMagic, 4) != 0)
        fail("format", "bad magic: not a GEMQ checkpoint");
    std::uint16_t ver = ckpt::read_u16(is);
    if (ver != ckpt::kVersion) fail("format", "unsupported checkpoint version");
    MoeModel m;
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(ckpt::read_string(is));
    } catch (const nlohmann::json::exception&) {
        fail("format", "corrupt config blob");
    }
    ckpt::parse_config(cfg, m);
    if (expected_config && !(m.config == *expected_config))
        fail("config-mismatch", "checkpoint config does not match the expected config");

    const MoeConfig& c = m.config;
    std::uint32_t n_tensors = ckpt::read_u32(is);
    m.blocks.resize(c.n_layers);
    for (auto& b : m.blocks) b.experts.resize(c.n_experts);
    auto read_tensor = [&](const std::string& want, std::size_t r, std::size_t cc) {
        std::string name = ckpt::read_string(is);
        if (name != want) fail("format", "unexpected tensor section: " + name);
        std::size_t rows = ckpt::read_u32(is), cols = ckpt::read_u32(is);
        if (rows != r || cols != cc) fail("format", "tensor shape mismatch in " + name);
        Tensor t(rows, cols);
        for (double& v : t.data) v = ckpt::read_f64(is);
        return t;
    };
    std::uint32_t expect = 2 + std::uint32_t(c.n_layers) * (1 + 2 * std::uint32_t(c.n_experts));
    if (n_tensors != expect) fail("format", "tensor count mismatch");
    m.embedding = read_tensor("embedding", c.vocab_size, c.d_model);
    m.head = read_tensor("head", c.vocab_size, c.d_model);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        m.blocks[l].router_w =
            read_tensor("block." + std::to_string(l) + ".router", c.n_experts, c.d_model);
        for (std::size_t e = 0; e < c.n_experts; ++e) {
            std::string base = "block." + std::to_string(l) + ".expert." + std::to_string(e);
            m.blocks[l].experts[e].w_up = read_tensor(base + ".w_up", c.d_hidden, c.d_model);
            m.blocks[l].experts[e].w_down = read_tensor(base + ".w_down", c.d_model, c.d_hidden);
        }
    }
    return m;
}

inline MoeModel load_checkpoint(const std::string& path,
                                const std::optional<MoeConfig>& expected_config = {}) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("io", "cannot open for read: " + path);
    return load_checkpoint(is, expected_config);
}

} // namespace gemq
