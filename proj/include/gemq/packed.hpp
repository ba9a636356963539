#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gemq/apply.hpp"
#include "gemq/checkpoint.hpp"

namespace gemq {

// Codes packed LSB-first into 32-bit little-endian words: 32/16/8 codes per
// word for b = 1/2/4, and 10 codes per word for b = 3 (top 2 bits zero).
inline std::size_t codes_per_word(int bits) {
    switch (bits) {
        case 1: return 32;
        case 2: return 16;
        case 3: return 10;
        case 4: return 8;
    }
    fail("config", "packable bit-widths are 1..4");
}

inline std::vector<std::uint32_t> pack_codes(const std::vector<std::uint8_t>& codes, int bits) {
    const int qmax = (1 << bits) - 1;
    const std::size_t per = codes_per_word(bits);
    std::vector<std::uint32_t> words((codes.size() + per - 1) / per, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > qmax) fail("range", "code out of range for bit-width");
        words[i / per] |= std::uint32_t(codes[i]) << (std::uint32_t(bits) * (i % per));
    }
    return words;
}

inline std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint32_t>& words,
                                              int bits, std::size_t count) {
    const std::uint32_t mask = (1u << bits) - 1u;
    const std::size_t per = codes_per_word(bits);
    if (words.size() != (count + per - 1) / per) fail("format", "packed word count mismatch");
    std::vector<std::uint8_t> codes(count);
    for (std::size_t i = 0; i < count; ++i)
        codes[i] = std::uint8_t((words[i / per] >> (std::uint32_t(bits) * (i % per))) & mask);
    return codes;
}

struct PackedMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 0;
    std::size_t group_size = 0;
    std::vector<std::uint32_t> words;
    std::vector<double> scales;
    std::vector<std::uint8_t> zeros;
};

inline PackedMatrix pack(const QuantizedMatrix& q) {
    PackedMatrix p;
    p.rows = q.rows;
    p.cols = q.cols;
    p.bits = q.bits;
    p.group_size = q.group_size;
    p.words = pack_codes(q.q, q.bits);
    p.scales = q.scales;
    p.zeros = q.zeros;
    return p;
}

inline QuantizedMatrix unpack(const PackedMatrix& p) {
    QuantizedMatrix q;
    q.rows = p.rows;
    q.cols = p.cols;
    q.bits = p.bits;
    q.group_size = p.group_size;
    q.q = unpack_codes(p.words, p.bits, p.rows * p.cols);
    q.scales = p.scales;
    q.zeros = p.zeros;
    return q;
}

struct PackedExpert {
    PackedMatrix w_up;
    PackedMatrix w_down;
};

// Quantized model in deployable form: experts bit-packed, routers,
// embeddings and head dense.
struct PackedModel {
    MoeModel dense; // embedding/head/routers + config; expert weights unused
    std::vector<PackedExpert> experts;

    // Dequantizes experts once (cached) and runs the standard forward.
    const MoeModel& realized() const {
        if (!cache_valid_) {
            cache_ = dense;
            for (std::size_t i = 0; i < experts.size(); ++i) {
                Expert& e = cache_.expert(i);
                e.w_up = unpack(experts[i].w_up).dequant();
                e.w_down = unpack(experts[i].w_down).dequant();
            }
            cache_valid_ = true;
        }
        return cache_;
    }

private:
    mutable MoeModel cache_;
    mutable bool cache_valid_ = false;
};

inline PackedModel pack_model(const MoeModel& model, const std::vector<ExpertQuant>& quants) {
    if (quants.size() != model.config.total_experts())
        fail("config", "need one quantized expert per global expert index");
    PackedModel pm;
    pm.dense = model;
    // Drop dense expert payloads; they are reconstructed from the codes.
    for (MoeBlock& b : pm.dense.blocks)
        for (Expert& e : b.experts) {
            e.w_up = Tensor(e.w_up.rows, e.w_up.cols);
            e.w_down = Tensor(e.w_down.rows, e.w_down.cols);
        }
    for (const ExpertQuant& q : quants)
        pm.experts.push_back({pack(q.w_up), pack(q.w_down)});
    return pm;
}

inline Tensor packed_forward(const PackedModel& pm, const std::vector<int>& tokens) {
    return forward(pm.realized(), tokens).logits;
}

// ---- GEMQP container ----
// magic "GEMQP", u16 version, config JSON blob, then per-tensor sections
// with a type tag (0 = dense f64, 1..4 = packed b-bit). Little-endian.

namespace packedio {

constexpr char kMagic[5] = {'G', 'E', 'M', 'Q', 'P'};
constexpr std::uint16_t kVersion = 1;

inline void write_packed_matrix(std::ostream& os, const PackedMatrix& p) {
    os.put(char(p.bits)); // section type tag: 1..4 = packed b-bit
    ckpt::write_u16(os, std::uint16_t(p.bits));
    ckpt::write_u32(os, std::uint32_t(p.rows));
    ckpt::write_u32(os, std::uint32_t(p.cols));
    ckpt::write_u32(os, std::uint32_t(p.group_size));
    ckpt::write_u32(os, std::uint32_t(p.scales.size()));
    for (double s : p.scales) ckpt::write_f64(os, s);
    os.write((const char*)p.zeros.data(), std::streamsize(p.zeros.size()));
    ckpt::write_u32(os, std::uint32_t(p.words.size()));
    for (std::uint32_t w : p.words) ckpt::write_u32(os, w);
}

inline PackedMatrix read_packed_matrix(std::istream& is) {
    int tag = is.get();
    if (tag < 1 || tag > 4) fail("format", "bad packed section tag");
    PackedMatrix p;
    p.bits = int(ckpt::read_u16(is));
    if (p.bits != tag) fail("format", "section tag does not match bit-width");
    if (p.bits < 1 || p.bits > 4) fail("format", "bad packed bit-width");
    p.rows = ckpt::read_u32(is);
    p.cols = ckpt::read_u32(is);
    p.group_size = ckpt::read_u32(is);
    std::uint32_t ns = ckpt::read_u32(is);
    p.scales.resize(ns);
    for (double& s : p.scales) s = ckpt::read_f64(is);
    p.zeros.resize(ns);
    is.read((char*)p.zeros.data(), std::streamsize(ns));
    if (!is) fail("format", "truncated zeros");
    std::uint32_t nw = ckpt::read_u32(is);
    std::size_t per = codes_per_word(p.bits);
    if (nw != (p.rows * p.cols + per - 1) / per) fail("format", "packed word count mismatch");
    p.words.resize(nw);
    for (std::uint32_t& w : p.words) w = ckpt::read_u32(is);
    return p;
}

} // namespace packedio

inline void save_packed(const PackedModel& pm, std::ostream& os) {
    os.write(packedio::kMagic, 5);
    ckpt::write_u16(os, packedio::kVersion);
    ckpt::write_string(os, ckpt::config_json(pm.dense).dump());
    const MoeModel& m = pm.dense;
    auto dense_section = [&](const std::string& name, const Tensor& t) {
        os.put(char(0)); // section type tag: 0 = dense f64
        ckpt::write_tensor(os, name, t);
    };
    dense_section("embedding", m.embedding);
    dense_section("head", m.head);
    for (std::size_t l = 0; l < m.blocks.size(); ++l)
        dense_section("block." + std::to_string(l) + ".router", m.blocks[l].router_w);
    for (std::size_t i = 0; i < pm.experts.size(); ++i) {
        packedio::write_packed_matrix(os, pm.experts[i].w_up);
        packedio::write_packed_matrix(os, pm.experts[i].w_down);
    }
}

inline void save_packed(const PackedModel& pm, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("io", "cannot open for write: " + path);
    save_packed(pm, os);
}

inline PackedModel load_packed(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, packedio::kMagic, 5) != 0)
        fail("format", "bad magic: not a GEMQP file");
    if (ckpt::read_u16(is) != packedio::kVersion) fail("format", "unsupported GEMQP version");
    PackedModel pm;
    nlohmann::json cfg = nlohmann::json::parse(ckpt::read_string(is), nullptr, false);
    if (cfg.is_discarded()) fail("format", "corrupt config blob");
    ckpt::parse_config(cfg, pm.dense);
    const MoeConfig& c = pm.dense.config;
    auto read_tensor = [&](const std::string& want, std::size_t r, std::size_t cc) {
        if (is.get() != 0) fail("format", "expected dense section tag");
        std::string name = ckpt::read_string(is);
        if (name != want) fail("format", "unexpected tensor section: " + name);
        std::size_t rows = ckpt::read_u32(is), cols = ckpt::read_u32(is);
        if (rows != r || cols != cc) fail("format", "tensor shape mismatch in " + name);
        Tensor t(rows, cols);
        for (double& v : t.data) v = ckpt::read_f64(is);
        return t;
    };
    pm.dense.embedding = read_tensor("embedding", c.vocab_size, c.d_model);
    pm.dense.head = read_tensor("head", c.vocab_size, c.d_model);
    pm.dense.blocks.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        pm.dense.blocks[l].router_w =
            read_tensor("block." + std::to_string(l) + ".router", c.n_experts, c.d_model);
        pm.dense.blocks[l].experts.assign(
            c.n_experts, Expert{Tensor(c.d_hidden, c.d_model), Tensor(c.d_model, c.d_hidden)});
    }
    for (std::size_t i = 0; i < c.total_experts(); ++i) {
        PackedExpert pe;
        pe.w_up = packedio::read_packed_matrix(is);
        pe.w_down = packedio::read_packed_matrix(is);
        pm.experts.push_back(std::move(pe));
    }
    return pm;
}

inline PackedModel load_packed(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("io", "cannot open for read: " + path);
    return load_packed(is);
}

// Analytic payload size of one packed matrix in bytes (codes + group params
// + the small shape header), matching the writer exactly.
inline std::size_t packed_matrix_bytes(std::size_t rows, std::size_t cols, int bits,
                                       std::size_t group_size) {
    std::size_t per = codes_per_word(bits);
    std::size_t n_groups = (cols + group_size - 1) / group_size;
    std::size_t words = (rows * cols + per - 1) / per;
    return 1 + 2 + 4 * 4           // tag, bits, rows, cols, group_size, scale count
           + rows * n_groups * 9   // f64 scale + u8 zero per (row, group)
           + 4 + words * 4;        // word count + packed words
}

} // namespace gemq
