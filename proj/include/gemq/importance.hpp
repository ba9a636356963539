#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gemq/apply.hpp"
#include "gemq/calibration.hpp"

namespace gemq {

// Loss-increase proxies for the allocation program: one row per global
// expert index, one column per candidate bit.
struct ImportanceTable {
    std::vector<std::vector<double>> entries; // [expert][bit idx]
    std::vector<int> bit_candidates;
    std::vector<bool> observed; // false when no calibration token routed there
    std::string estimation_model_tag;
    std::uint64_t calib_hash = 0;

    void validate() const {
        for (const auto& row : entries)
            for (double v : row)
                if (!(v >= 0.0) || !std::isfinite(v))
                    fail("numeric", "importance entries must be finite and >= 0");
    }
};

// Gradients of the mean calibration CE w.r.t. every block's aggregated
// output, one tensor per (sequence, layer).
struct OutputGradients {
    std::vector<std::vector<Tensor>> g; // [seq][layer], each T x d_model
};

inline OutputGradients collect_output_gradients(const MoeModel& m, const CalibSet& calib) {
    OutputGradients og;
    og.g.resize(calib.seqs.size());
    for (std::size_t i = 0; i < calib.seqs.size(); ++i) {
        Tape tape;
        ForwardNodes fn = forward_on_tape(m, calib.inputs(i), tape);
        NodeId loss = tape.cross_entropy(fn.logits, calib.targets(i));
        tape.backward(loss);
        for (const BlockNodes& bn : fn.blocks)
            og.g[i].push_back(tape.grad(bn.aggregate));
    }
    return og;
}

// Aggregated-output perturbation from quantizing one expert, on the frozen
// routing of the capture: dz[t] = gate * (E_hat(y_t) - E(y_t)) for routed
// tokens, zero elsewhere. Rows align with RoutedTokens order.
struct Perturbation {
    RoutedTokens routed;
    Tensor dz; // routed.count() x d_model
    bool observed = false;
};

inline Perturbation expert_perturbation(const MoeModel& m, std::size_t global_expert,
                                        int bits, const Capture& cap,
                                        const QuantConfig& base_cfg) {
    std::size_t l = m.layer_of(global_expert);
    std::size_t e = m.expert_in_layer(global_expert);
    Perturbation p;
    p.routed = routed_tokens(cap, l, e);
    if (p.routed.count() == 0) return p; // unobserved: dz == 0
    p.observed = true;

    const Expert& fp = m.blocks[l].experts[e];
    Tensor inputs = gather_expert_inputs(cap, l, p.routed); // d_model x n
    ExpertQuant qe = quantize_expert(fp, inputs, base_cfg.with_bits(bits));
    Tensor up_hat = qe.w_up.dequant();
    Tensor down_hat = qe.w_down.dequant();

    // E(y) and E_hat(y) on the frozen inputs, per routed token (columns).
    Tensor h_fp = silu(matmul(fp.w_up, inputs));
    Tensor out_fp = matmul(fp.w_down, h_fp);       // d_model x n
    Tensor h_q = silu(matmul(up_hat, inputs));
    Tensor out_q = matmul(down_hat, h_q);          // d_model x n

    std::size_t n = p.routed.count(), d = m.config.d_model;
    p.dz = Tensor(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            p.dz(i, j) = p.routed.gate[i] * (out_q(j, i) - out_fp(j, i));
    return p;
}

// Mean over all calibration tokens of sum_k g_k^2 * dz_k^2. Tokens where
// the expert is not routed contribute zero but still count in the mean.
inline double importance_entry(const OutputGradients& grads, const Perturbation& p,
                               std::size_t layer, std::size_t total_tokens) {
    double sum = 0.0;
    for (std::size_t i = 0; i < p.routed.count(); ++i) {
        const Tensor& g = grads.g[p.routed.seq[i]][layer];
        std::size_t t = p.routed.token[i];
        for (std::size_t j = 0; j < g.cols; ++j) {
            double gk = g(t, j);
            double dk = p.dz(i, j);
            sum += gk * gk * dk * dk;
        }
    }
    return sum / double(total_tokens);
}

inline ImportanceTable build_table(const MoeModel& m, const CalibSet& calib,
                                   const std::vector<int>& bit_candidates,
                                   const QuantConfig& base_cfg,
                                   const std::string& estimation_tag = "fp") {
    if (calib.seqs.empty()) fail("input", "empty calibration set");
    Capture cap = capture_forward(m, calib);
    OutputGradients grads = collect_output_gradients(m, calib);
    std::size_t total_tokens = 0;
    for (const auto& s : calib.seqs) total_tokens += s.size() - 1;

    ImportanceTable table;
    table.bit_candidates = bit_candidates;
    table.estimation_model_tag = estimation_tag;
    // FNV-1a over the token stream identifies the calibration set.
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& s : calib.seqs)
        for (int id : s) {
            h ^= std::uint64_t(std::uint32_t(id));
            h *= 0x100000001B3ULL;
        }
    table.calib_hash = h;
    std::size_t E = m.config.total_experts();
    table.entries.assign(E, std::vector<double>(bit_candidates.size(), 0.0));
    table.observed.assign(E, false);
    for (std::size_t i = 0; i < E; ++i) {
        std::size_t l = m.layer_of(i);
        for (std::size_t j = 0; j < bit_candidates.size(); ++j) {
            Perturbation p = expert_perturbation(m, i, bit_candidates[j], cap, base_cfg);
            table.entries[i][j] = importance_entry(grads, p, l, total_tokens);
            if (p.observed) table.observed[i] = true;
        }
    }
    table.validate();
    return table;
}

// CSV round trip: header `expert,layer,bit,delta_loss,observed`.
inline void save_importance_csv(const ImportanceTable& t, std::size_t n_experts_per_layer,
                                std::ostream& os) {
    os << "expert,layer,bit,delta_loss,observed\n";
    os.precision(17);
    for (std::size_t i = 0; i < t.entries.size(); ++i)
        for (std::size_t j = 0; j < t.bit_candidates.size(); ++j)
            os << i << ',' << i / n_experts_per_layer << ',' << t.bit_candidates[j] << ','
               << t.entries[i][j] << ',' << (t.observed[i] ? 1 : 0) << '\n';
}

inline void save_importance_csv(const ImportanceTable& t, std::size_t n_experts_per_layer,
                                const std::string& path) {
    std::ofstream os(path);
    if (!os) fail("io", "cannot open for write: " + path);
    save_importance_csv(t, n_experts_per_layer, os);
}

inline ImportanceTable load_importance_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("expert,layer,bit", 0) != 0)
        fail("format", "bad importance CSV header");
    ImportanceTable t;
    std::vector<int> seen_bits;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::size_t expert, layer;
        int bit, obs;
        double dl;
        char c;
        if (!(ss >> expert >> c >> layer >> c >> bit >> c >> dl >> c >> obs))
            fail("format", "bad importance CSV row: " + line);
        if (expert >= t.entries.size()) {
            t.entries.resize(expert + 1);
            t.observed.resize(expert + 1, false);
        }
        std::size_t j = 0;
        for (; j < seen_bits.size(); ++j)
            if (seen_bits[j] == bit) break;
        if (j == seen_bits.size()) seen_bits.push_back(bit);
        if (t.entries[expert].size() <= j) t.entries[expert].resize(j + 1, 0.0);
        t.entries[expert][j] = dl;
        t.observed[expert] = obs != 0;
    }
    t.bit_candidates = seen_bits;
    t.validate();
    return t;
}

inline ImportanceTable load_importance_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("io", "cannot open for read: " + path);
    return load_importance_csv(is);
}

} // namespace gemq
