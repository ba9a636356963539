#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gemq/tape.hpp"

namespace gemq {

struct MoeConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 32;
    std::size_t d_hidden = 64;
    std::size_t n_layers = 4;
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    std::size_t seq_len = 64;
    std::uint64_t seed = 1;

    void validate() const {
        if (top_k < 1 || top_k > n_experts) fail("config", "need 1 <= top_k <= n_experts");
        if (d_hidden < 1) fail("config", "d_hidden must be >= 1");
        if (vocab_size < 2) fail("config", "vocab_size must be >= 2");
    }

    std::size_t total_experts() const { return n_layers * n_experts; }

    bool operator==(const MoeConfig&) const = default;
};

// Byte-level tokenizer over the distinct bytes present in the corpus,
// sorted ascending.
struct Tokenizer {
    std::vector<std::uint8_t> id_to_byte;
    std::array<int, 256> byte_to_id{};

    static Tokenizer from_corpus(const std::string& text) {
        std::array<bool, 256> seen{};
        for (unsigned char c : text) seen[c] = true;
        Tokenizer tk;
        tk.byte_to_id.fill(-1);
        for (int b = 0; b < 256; ++b) {
            if (seen[std::size_t(b)]) {
                tk.byte_to_id[std::size_t(b)] = int(tk.id_to_byte.size());
                tk.id_to_byte.push_back(std::uint8_t(b));
            }
        }
        return tk;
    }

    std::size_t vocab() const { return id_to_byte.size(); }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        out.reserve(text.size());
        for (unsigned char c : text) {
            int id = byte_to_id[c];
            if (id < 0) fail("range", "byte not in tokenizer vocabulary");
            out.push_back(id);
        }
        return out;
    }
};

struct Expert {
    Tensor w_up;   // d_hidden x d_model
    Tensor w_down; // d_model x d_hidden
};

struct MoeBlock {
    Tensor router_w; // n_experts x d_model
    std::vector<Expert> experts;
};

struct MoeModel {
    MoeConfig config;
    Tokenizer tokenizer;
    Tensor embedding; // vocab x d_model
    std::vector<MoeBlock> blocks;
    Tensor head; // vocab x d_model
    std::vector<int> expert_bits; // empty until a quantization plan is applied

    std::size_t layer_of(std::size_t global_expert) const {
        return global_expert / config.n_experts;
    }
    std::size_t expert_in_layer(std::size_t global_expert) const {
        return global_expert % config.n_experts;
    }
    Expert& expert(std::size_t global_expert) {
        return blocks[layer_of(global_expert)].experts[expert_in_layer(global_expert)];
    }
    const Expert& expert(std::size_t global_expert) const {
        return blocks[layer_of(global_expert)].experts[expert_in_layer(global_expert)];
    }

    std::size_t param_count() const {
        std::size_t n = embedding.size() + head.size();
        for (const MoeBlock& b : blocks) {
            n += b.router_w.size();
            for (const Expert& e : b.experts) n += e.w_up.size() + e.w_down.size();
        }
        return n;
    }

    std::size_t router_param_count() const {
        std::size_t n = 0;
        for (const MoeBlock& b : blocks) n += b.router_w.size();
        return n;
    }
};

inline MoeModel init_model(const MoeConfig& cfg, const Tokenizer& tk) {
    cfg.validate();
    if (tk.vocab() != cfg.vocab_size) fail("config", "tokenizer vocab does not match config");
    MoeModel m;
    m.config = cfg;
    m.tokenizer = tk;
    Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
    auto randn = [&](std::size_t r, std::size_t c, double std) {
        Tensor t(r, c);
        for (double& v : t.data) v = rng.normal() * std;
        return t;
    };
    double s_emb = 0.5;
    double s_in = 1.0 / std::sqrt(double(cfg.d_model));
    double s_hid = 1.0 / std::sqrt(double(cfg.d_hidden));
    m.embedding = randn(cfg.vocab_size, cfg.d_model, s_emb);
    m.head = randn(cfg.vocab_size, cfg.d_model, s_in);
    m.blocks.resize(cfg.n_layers);
    for (MoeBlock& b : m.blocks) {
        b.router_w = randn(cfg.n_experts, cfg.d_model, s_in);
        b.experts.resize(cfg.n_experts);
        for (Expert& e : b.experts) {
            e.w_up = randn(cfg.d_hidden, cfg.d_model, s_in);
            e.w_down = randn(cfg.d_model, cfg.d_hidden, s_hid);
        }
    }
    return m;
}

// Top-K selection and renormalized gate weights per (layer, token).
// Ties resolve toward the lower expert index.
struct RoutingRecord {
    // selected[layer][token] -> K expert ids, descending score
    std::vector<std::vector<std::vector<std::size_t>>> selected;
    // gates[layer][token] -> K weights, sum 1
    std::vector<std::vector<std::vector<double>>> gates;
};

// Tape node handles for one block of one forward pass.
struct BlockNodes {
    NodeId block_input;  // x
    NodeId mixer_output; // y (router/expert input)
    NodeId aggregate;    // z (gated expert sum, pre-residual)
    NodeId gates;        // T x K renormalized gates
};

struct ForwardNodes {
    NodeId embedding_rows;
    NodeId logits;
    std::vector<BlockNodes> blocks;
};

// Which parameter groups become tracked tape inputs.
enum class TrackMode { none, all, routers_only };

// Tape input ids for every parameter tensor, for reading gradients back.
struct ParamNodes {
    NodeId embedding;
    std::vector<NodeId> routers;
    std::vector<std::vector<std::pair<NodeId, NodeId>>> experts; // (w_up, w_down)
    NodeId head;
};

struct ForwardOptions {
    TrackMode track = TrackMode::none;
    const RoutingRecord* forced_routing = nullptr; // reuse another model's decisions
};

inline std::vector<std::size_t> top_k_indices(const double* scores, std::size_t n,
                                              std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

// Runs the model on a token sequence, recording everything on `tape`.
// Per block: y = causal_mean(x); r = y * router^T; s = softmax(r);
// top-K experts by score; gates renormalized over the selected set
// (softmax over the selected logits, since the full-softmax denominator
// cancels); z = sum of gated expert outputs on y; output x + z.
inline ForwardNodes forward_on_tape(const MoeModel& m, const std::vector<int>& tokens,
                                    Tape& tape, const ForwardOptions& opt = {},
                                    ParamNodes* params_out = nullptr,
                                    RoutingRecord* routing_out = nullptr) {
    if (tokens.empty()) fail("input", "empty token sequence");
    const MoeConfig& cfg = m.config;
    for (int t : tokens)
        if (t < 0 || std::size_t(t) >= cfg.vocab_size) fail("range", "token id out of vocab");
    if (opt.forced_routing && opt.forced_routing->selected.size() != cfg.n_layers)
        fail("config", "forced routing does not match layer count");

    const std::size_t T = tokens.size();
    const std::size_t K = cfg.top_k;

    bool track_all = opt.track == TrackMode::all;
    bool track_routers = track_all || opt.track == TrackMode::routers_only;

    ParamNodes pn;
    pn.embedding = tape.input(m.embedding, track_all);
    pn.head = tape.input(m.head, track_all);
    pn.routers.resize(cfg.n_layers);
    pn.experts.resize(cfg.n_layers);

    std::vector<std::size_t> token_rows(T);
    for (std::size_t t = 0; t < T; ++t) token_rows[t] = std::size_t(tokens[t]);

    ForwardNodes fn;
    fn.embedding_rows = tape.gather_rows(pn.embedding, token_rows);
    NodeId x = fn.embedding_rows;

    if (routing_out) {
        routing_out->selected.assign(cfg.n_layers, {});
        routing_out->gates.assign(cfg.n_layers, {});
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const MoeBlock& blk = m.blocks[l];
        pn.routers[l] = tape.input(blk.router_w, track_routers);
        pn.experts[l].resize(cfg.n_experts);

        BlockNodes bn;
        bn.block_input = x;
        NodeId y = tape.causal_mean(x);
        bn.mixer_output = y;

        NodeId logits = tape.matmul_nt(y, pn.routers[l]); // T x N

        // Discrete selection from values; constants on the tape.
        const Tensor& r = tape.value(logits);
        std::vector<std::vector<std::size_t>> sel(T);
        if (opt.forced_routing) {
            for (std::size_t t = 0; t < T; ++t)
                sel[t] = opt.forced_routing->selected[l][t];
        } else {
            for (std::size_t t = 0; t < T; ++t)
                sel[t] = top_k_indices(&r.data[t * cfg.n_experts], cfg.n_experts, K);
        }

        // Renormalized gates: softmax over the selected logits. Forced
        // routing substitutes the reference model's gates as constants.
        NodeId gates;
        if (opt.forced_routing) {
            Tensor gv(T, K);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t k = 0; k < K; ++k)
                    gv(t, k) = opt.forced_routing->gates[l][t][k];
            gates = tape.input(std::move(gv), false);
        } else {
            NodeId sel_logits = tape.select_cols(logits, sel);
            gates = tape.softmax_rows(sel_logits);
        }
        bn.gates = gates;

        if (routing_out) {
            const Tensor& gv = tape.value(gates);
            auto& rsel = routing_out->selected[l];
            auto& rg = routing_out->gates[l];
            rsel.resize(T);
            rg.resize(T);
            for (std::size_t t = 0; t < T; ++t) {
                rsel[t] = sel[t];
                rg[t].assign(K, 0.0);
                for (std::size_t k = 0; k < K; ++k) rg[t][k] = gv(t, k);
            }
        }

        // Group routed tokens per expert.
        std::vector<std::vector<Tape::Placement>> routed(cfg.n_experts);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < K; ++k)
                routed[sel[t][k]].push_back({0, t, k});

        NodeId z = -1;
        for (std::size_t e = 0; e < cfg.n_experts; ++e) {
            NodeId up = tape.input(blk.experts[e].w_up, track_all);
            NodeId down = tape.input(blk.experts[e].w_down, track_all);
            pn.experts[l][e] = {up, down};
            if (routed[e].empty()) continue;
            std::vector<std::size_t> rows;
            rows.reserve(routed[e].size());
            for (std::size_t i = 0; i < routed[e].size(); ++i) {
                routed[e][i].src_row = i;
                rows.push_back(routed[e][i].token);
            }
            NodeId xin = tape.gather_rows(y, rows);
            NodeId hidden = tape.silu(tape.matmul_nt(xin, up));
            NodeId out = tape.matmul_nt(hidden, down);
            NodeId contrib = tape.scatter_rows_gated(out, gates, routed[e], T);
            z = (z < 0) ? contrib : tape.add(z, contrib);
        }
        if (z < 0) z = tape.input(Tensor(T, cfg.d_model), false); // all experts unrouted: zero
        bn.aggregate = z;
        x = tape.add(x, z);
        fn.blocks.push_back(bn);
    }

    fn.logits = tape.matmul_nt(x, pn.head);
    if (params_out) *params_out = pn;
    return fn;
}

// Convenience wrapper: plain forward, returning logits and routing.
struct ForwardResult {
    Tensor logits;
    RoutingRecord routing;
};

inline ForwardResult forward(const MoeModel& m, const std::vector<int>& tokens,
                             const RoutingRecord* forced_routing = nullptr) {
    Tape tape;
    ForwardOptions opt;
    opt.forced_routing = forced_routing;
    ForwardResult res;
    ForwardNodes fn = forward_on_tape(m, tokens, tape, opt, nullptr, &res.routing);
    res.logits = tape.value(fn.logits);
    return res;
}

} // namespace gemq
