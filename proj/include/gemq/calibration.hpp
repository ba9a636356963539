#pragma once

#include <string>
#include <vector>

#include "gemq/model.hpp"

namespace gemq {

// Calibration sequences: each entry has seq_len + 1 token ids; the first
// seq_len are inputs, positions 1.. are the teacher-forced targets.
struct CalibSet {
    std::vector<std::vector<int>> seqs;

    static CalibSet sample(const std::string& text, const Tokenizer& tk,
                           std::size_t n_seqs, std::size_t seq_len, std::uint64_t seed) {
        std::vector<int> ids = tk.encode(text);
        if (ids.size() < seq_len + 2) fail("input", "calibration text too short");
        Rng rng(seed);
        CalibSet cs;
        cs.seqs.reserve(n_seqs);
        for (std::size_t i = 0; i < n_seqs; ++i) {
            std::size_t start = std::size_t(rng.below(ids.size() - seq_len - 1));
            cs.seqs.emplace_back(ids.begin() + long(start),
                                 ids.begin() + long(start + seq_len + 1));
        }
        return cs;
    }

    std::vector<int> inputs(std::size_t i) const {
        return {seqs[i].begin(), seqs[i].end() - 1};
    }
    std::vector<int> targets(std::size_t i) const {
        return {seqs[i].begin() + 1, seqs[i].end()};
    }
};

// Frozen forward state of one calibration sequence: per block the input x,
// the mixer output y (the expert/router input), the aggregated output z,
// and the routing record.
struct SeqCapture {
    RoutingRecord routing;
    std::vector<Tensor> block_input;
    std::vector<Tensor> mixer_out;
    std::vector<Tensor> block_agg;
};

struct Capture {
    std::vector<SeqCapture> seqs;
    double calib_ce = 0.0; // mean CE over sequences
};

inline Capture capture_forward(const MoeModel& m, const CalibSet& calib) {
    if (calib.seqs.empty()) fail("input", "empty calibration set");
    Capture cap;
    cap.seqs.resize(calib.seqs.size());
    double ce_sum = 0.0;
    for (std::size_t i = 0; i < calib.seqs.size(); ++i) {
        Tape tape;
        SeqCapture& sc = cap.seqs[i];
        ForwardNodes fn = forward_on_tape(m, calib.inputs(i), tape, {}, nullptr, &sc.routing);
        for (const BlockNodes& bn : fn.blocks) {
            sc.block_input.push_back(tape.value(bn.block_input));
            sc.mixer_out.push_back(tape.value(bn.mixer_output));
            sc.block_agg.push_back(tape.value(bn.aggregate));
        }
        ce_sum += cross_entropy(tape.value(fn.logits), calib.targets(i));
    }
    cap.calib_ce = ce_sum / double(calib.seqs.size());
    return cap;
}

// Token positions (and gate weights) routed to one expert, across the
// whole capture, in (sequence, token) order.
struct RoutedTokens {
    std::vector<std::size_t> seq;
    std::vector<std::size_t> token;
    std::vector<double> gate;

    std::size_t count() const { return seq.size(); }
};

inline RoutedTokens routed_tokens(const Capture& cap, std::size_t layer, std::size_t expert) {
    RoutedTokens rt;
    for (std::size_t s = 0; s < cap.seqs.size(); ++s) {
        const RoutingRecord& r = cap.seqs[s].routing;
        const auto& sel = r.selected[layer];
        for (std::size_t t = 0; t < sel.size(); ++t) {
            for (std::size_t k = 0; k < sel[t].size(); ++k) {
                if (sel[t][k] == expert) {
                    rt.seq.push_back(s);
                    rt.token.push_back(t);
                    rt.gate.push_back(r.gates[layer][t][k]);
                }
            }
        }
    }
    return rt;
}

// Mixer-output columns for the routed tokens: d_model x n.
inline Tensor gather_expert_inputs(const Capture& cap, std::size_t layer,
                                   const RoutedTokens& rt) {
    std::size_t d = cap.seqs[0].mixer_out[layer].cols;
    Tensor x(d, rt.count());
    for (std::size_t i = 0; i < rt.count(); ++i) {
        const Tensor& y = cap.seqs[rt.seq[i]].mixer_out[layer];
        for (std::size_t j = 0; j < d; ++j) x(j, i) = y(rt.token[i], j);
    }
    return x;
}

} // namespace gemq
