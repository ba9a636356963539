#pragma once
// Test-only utilities: independent oracles and small fixtures. Everything
// here is written against the definitions directly (plain loops), not by
// calling back into the library code under test, except where noted.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gemq/allocate.hpp"
#include "gemq/model.hpp"
#include "gemq/train.hpp"

namespace th {

using gemq::Tensor;

inline std::string load_corpus() {
    std::ifstream is(GEMQ_DATA_DIR "/corpus.txt", std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ---- naive matmul oracle (independent accumulation order) ----
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

// ---- reference forward (plain loops, no tape) ----

struct RefBlock {
    Tensor x, y, z;
    std::vector<std::vector<std::size_t>> sel;
    std::vector<std::vector<double>> gates;
};
struct RefOut {
    Tensor logits;
    std::vector<RefBlock> blocks;
};

inline double ref_silu(double v) { return v / (1.0 + std::exp(-v)); }

inline std::vector<std::size_t> ref_topk(const std::vector<double>& s, std::size_t k) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

// Runs blocks [first_layer, L) on an explicit input matrix. Optional forced
// expert selection per layer/token (gates still recomputed from the model's
// own logits over the forced set).
inline RefOut ref_forward_rows(const gemq::MoeModel& m, Tensor x, std::size_t first_layer = 0,
                               const std::vector<std::vector<std::vector<std::size_t>>>*
                                   forced_sel = nullptr) {
    const auto& cfg = m.config;
    const std::size_t T = x.rows, D = cfg.d_model, K = cfg.top_k;
    RefOut out;
    for (std::size_t l = first_layer; l < cfg.n_layers; ++l) {
        RefBlock rb;
        rb.x = x;
        // causal mean
        Tensor y(T, D);
        std::vector<double> acc(D, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < D; ++j) {
                acc[j] += x(t, j);
                y(t, j) = acc[j] / double(t + 1);
            }
        rb.y = y;
        Tensor z(T, D);
        rb.sel.resize(T);
        rb.gates.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> logit(cfg.n_experts, 0.0);
            for (std::size_t e = 0; e < cfg.n_experts; ++e)
                for (std::size_t j = 0; j < D; ++j)
                    logit[e] += y(t, j) * m.blocks[l].router_w(e, j);
            std::vector<std::size_t> sel =
                forced_sel ? (*forced_sel)[l][t] : ref_topk(logit, K);
            // renormalized gates: softmax over the selected logits
            double mx = logit[sel[0]];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logit[sel[k]]);
            std::vector<double> g(K);
            double gs = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                g[k] = std::exp(logit[sel[k]] - mx);
                gs += g[k];
            }
            for (double& v : g) v /= gs;
            rb.sel[t] = sel;
            rb.gates[t] = g;
            for (std::size_t k = 0; k < K; ++k) {
                const gemq::Expert& ex = m.blocks[l].experts[sel[k]];
                std::vector<double> h(cfg.d_hidden, 0.0);
                for (std::size_t i = 0; i < cfg.d_hidden; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < D; ++j) s += ex.w_up(i, j) * y(t, j);
                    h[i] = ref_silu(s);
                }
                for (std::size_t j = 0; j < D; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < cfg.d_hidden; ++i) s += ex.w_down(j, i) * h[i];
                    z(t, j) += g[k] * s;
                }
            }
        }
        rb.z = z;
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += z.data[i];
        out.blocks.push_back(std::move(rb));
    }
    Tensor logits(T, cfg.vocab_size);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
            double s = 0.0;
            for (std::size_t j = 0; j < cfg.d_model; ++j) s += x(t, j) * m.head(v, j);
            logits(t, v) = s;
        }
    out.logits = logits;
    return out;
}

inline RefOut ref_forward(const gemq::MoeModel& m, const std::vector<int>& tokens,
                          const std::vector<std::vector<std::vector<std::size_t>>>*
                              forced_sel = nullptr) {
    Tensor x(tokens.size(), m.config.d_model);
    for (std::size_t t = 0; t < tokens.size(); ++t)
        for (std::size_t j = 0; j < m.config.d_model; ++j)
            x(t, j) = m.embedding(std::size_t(tokens[t]), j);
    return ref_forward_rows(m, std::move(x), 0, forced_sel);
}

inline double ref_ce(const Tensor& logits, const std::vector<int>& targets) {
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx);
        total += -(logits(i, std::size_t(targets[i])) - mx - std::log(sum));
    }
    return total / double(logits.rows);
}

// ---- finite differences ----

// Relative error with a floored denominator so that finite-difference noise
// on near-zero gradients does not dominate (values in play are O(1)).
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// ---- Spearman rank correlation (average ranks for ties) ----
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = (double(i) + double(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) { ma += ra[i]; mb += rb[i]; }
    ma /= double(ra.size());
    mb /= double(rb.size());
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(va * vb);
}

// ---- brute-force allocation oracle ----
// Enumerates every assignment; costs are accumulated right-to-left over the
// expert index so floating-point sums match the DP's suffix accumulation
// bitwise. Tie-break: min cost, then max spend, then lexicographically
// smallest bit vector.
struct BruteResult {
    bool feasible = false;
    gemq::AllocationPlan plan;
};

inline BruteResult brute_force(const gemq::AllocationProblem& p) {
    const std::size_t E = p.costs.size();
    const std::size_t J = p.bit_candidates.size();
    const int highest = p.bit_candidates.back();
    const int second = J >= 2 ? p.bit_candidates[J - 2] : highest;
    std::vector<long> weight = p.expert_weight;
    if (weight.empty()) weight.assign(E, 1);

    auto group = [&](std::size_t i) {
        std::size_t l = p.layer_of[i];
        return p.mode == gemq::ConstraintMode::highest_every_2_layers ? l / 2 : l;
    };

    BruteResult best;
    long best_spend = -1;
    std::vector<std::size_t> choice(E, 0);
    while (true) {
        // evaluate
        long spend = 0;
        double cost = 0.0;
        for (std::size_t i = E; i-- > 0;) {
            cost = p.costs[i][choice[i]] + cost;
            spend += long(p.bit_candidates[choice[i]]) * weight[i];
        }
        bool ok = spend <= p.budget;
        if (ok && p.mode != gemq::ConstraintMode::none) {
            std::size_t i = 0;
            while (i < E && ok) {
                std::size_t g = group(i);
                bool h = false, s = false;
                std::size_t j = i;
                for (; j < E && group(j) == g; ++j) {
                    if (p.bit_candidates[choice[j]] == highest) h = true;
                    if (p.bit_candidates[choice[j]] == second) s = true;
                }
                switch (p.mode) {
                    case gemq::ConstraintMode::highest_and_second: ok = h && s; break;
                    case gemq::ConstraintMode::only_highest: ok = h; break;
                    case gemq::ConstraintMode::only_second: ok = s; break;
                    case gemq::ConstraintMode::highest_every_2_layers: ok = h; break;
                    default: break;
                }
                i = j;
            }
        }
        if (ok) {
            std::vector<int> bits(E);
            for (std::size_t i = 0; i < E; ++i) bits[i] = p.bit_candidates[choice[i]];
            bool better = false;
            if (!best.feasible) better = true;
            else if (cost < best.plan.objective) better = true;
            else if (cost == best.plan.objective) {
                if (spend > best_spend) better = true;
                else if (spend == best_spend &&
                         std::lexicographical_compare(bits.begin(), bits.end(),
                                                      best.plan.bits.begin(),
                                                      best.plan.bits.end()))
                    better = true;
            }
            if (better) {
                best.feasible = true;
                best.plan.bits = bits;
                best.plan.objective = cost;
                best_spend = spend;
            }
        }
        // next assignment
        std::size_t k = 0;
        while (k < E && ++choice[k] == J) choice[k++] = 0;
        if (k == E) break;
    }
    if (best.feasible) best.plan.bpe = gemq::bpe_of(best.plan);
    return best;
}

// ---- grid-exact weights ----
// Builds a matrix whose rows lie exactly on a b-bit affine grid (one group
/// per row): power-of-two scale, integer zero, codes spanning 0..qmax, so
// round-trip quantization at b bits reproduces the values bitwise.
inline Tensor on_grid(std::size_t rows, std::size_t cols, int bits, gemq::Rng& rng) {
    const int qmax = (1 << bits) - 1;
    Tensor w(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = std::ldexp(1.0, -1 - int(rng.below(4)));
        int z = int(rng.below(std::uint64_t(qmax) + 1));
        std::vector<int> codes(cols);
        for (std::size_t c = 0; c < cols; ++c)
            codes[c] = int(rng.below(std::uint64_t(qmax) + 1));
        std::size_t p0 = std::size_t(rng.below(cols));
        std::size_t p1 = (p0 + 1 + std::size_t(rng.below(cols - 1))) % cols;
        codes[p0] = 0;
        codes[p1] = qmax;
        for (std::size_t c = 0; c < cols; ++c) w(r, c) = s * double(codes[c] - z);
    }
    return w;
}

// ---- small trained fixture ----
inline gemq::MoeConfig small_config(std::uint64_t seed) {
    gemq::MoeConfig cfg;
    cfg.d_model = 16;
    cfg.d_hidden = 32;
    cfg.n_layers = 2;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.seq_len = 32;
    cfg.seed = seed;
    return cfg;
}

inline gemq::MoeModel small_trained(std::uint64_t seed, std::size_t steps = 200,
                                    const std::string& corpus = load_corpus()) {
    gemq::TrainConfig tc;
    tc.steps = steps;
    return gemq::train(small_config(seed), corpus.substr(0, 40000), tc);
}

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    return gemq::bitwise_equal(a, b);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline std::string model_bytes(const gemq::MoeModel& m);

} // namespace th

#include "gemq/checkpoint.hpp"

namespace th {
inline std::string model_bytes(const gemq::MoeModel& m) {
    std::ostringstream os;
    gemq::save_checkpoint(m, os);
    return os.str();
}
} // namespace th
