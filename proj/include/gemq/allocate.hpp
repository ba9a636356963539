#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gemq/common.hpp"

namespace gemq {

// Per-layer constraint variants for the global allocation program.
enum class ConstraintMode {
    none,
    highest_and_second, // each layer: one highest-bit and one second-highest-bit expert
    only_highest,
    only_second,
    highest_every_2_layers,
};

inline const char* to_string(ConstraintMode m) {
    switch (m) {
        case ConstraintMode::none: return "none";
        case ConstraintMode::highest_and_second: return "highest_and_second";
        case ConstraintMode::only_highest: return "only_highest";
        case ConstraintMode::only_second: return "only_second";
        case ConstraintMode::highest_every_2_layers: return "highest_every_2_layers";
    }
    return "?";
}

inline ConstraintMode constraint_mode_from_string(const std::string& s) {
    if (s == "none") return ConstraintMode::none;
    if (s == "highest_and_second") return ConstraintMode::highest_and_second;
    if (s == "only_highest") return ConstraintMode::only_highest;
    if (s == "only_second") return ConstraintMode::only_second;
    if (s == "highest_every_2_layers") return ConstraintMode::highest_every_2_layers;
    fail("config", "unknown constraint mode: " + s);
}

struct AllocationProblem {
    // costs[i][j]: loss-increase proxy of expert i at bit_candidates[j].
    std::vector<std::vector<double>> costs;
    std::vector<int> bit_candidates; // sorted ascending
    long budget = 0;                 // total bit units
    std::vector<std::size_t> layer_of; // expert -> layer, non-decreasing
    ConstraintMode mode = ConstraintMode::highest_and_second;
    std::vector<long> expert_weight; // per-expert size weight; empty = all 1

    std::size_t n_experts() const { return costs.size(); }

    void validate() const {
        if (bit_candidates.empty()) fail("config", "empty bit candidate set");
        if (!std::is_sorted(bit_candidates.begin(), bit_candidates.end()))
            fail("config", "bit candidates must be sorted ascending");
        if (layer_of.size() != costs.size())
            fail("config", "layer_of must cover every expert");
        for (std::size_t i = 1; i < layer_of.size(); ++i)
            if (layer_of[i] < layer_of[i - 1])
                fail("config", "experts must be ordered by layer");
        for (const auto& row : costs)
            if (row.size() != bit_candidates.size())
                fail("config", "cost row width must match bit candidates");
        bool needs_second = mode == ConstraintMode::highest_and_second ||
                            mode == ConstraintMode::only_second;
        if (needs_second && bit_candidates.size() < 2)
            fail("config", "constraint mode needs at least two bit candidates");
    }
};

struct AllocationPlan {
    std::vector<int> bits; // one candidate per expert
    double objective = 0.0;
    double bpe = 0.0;
};

inline double bpe_of(const AllocationPlan& plan) {
    if (plan.bits.empty()) fail("config", "empty plan");
    long total = 0;
    for (int b : plan.bits) total += b;
    return double(total) / double(plan.bits.size());
}

namespace alloc_detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Group id per expert: one group per layer, or per pair of consecutive
// layers for the every-2-layers mode (trailing odd layer forms its own).
inline std::vector<std::size_t> group_of(const AllocationProblem& p) {
    std::vector<std::size_t> g(p.n_experts());
    for (std::size_t i = 0; i < p.n_experts(); ++i) {
        std::size_t l = p.layer_of[i];
        g[i] = (p.mode == ConstraintMode::highest_every_2_layers) ? l / 2 : l;
    }
    return g;
}

inline bool flags_ok(ConstraintMode mode, bool h, bool s) {
    switch (mode) {
        case ConstraintMode::none: return true;
        case ConstraintMode::highest_and_second: return h && s;
        case ConstraintMode::only_highest: return h;
        case ConstraintMode::only_second: return s;
        case ConstraintMode::highest_every_2_layers: return h;
    }
    return true;
}

} // namespace alloc_detail

// Exact solver for the global allocation program: pick one candidate bit per
// expert minimizing total cost subject to sum(bits * weight) <= budget and
// the per-layer constraint mode. Suffix DP over (expert, exact spend,
// layer-constraint flags); ties resolve toward higher total spend, then the
// lexicographically smallest assignment.
inline AllocationPlan solve(const AllocationProblem& p) {
    using alloc_detail::kInf;
    p.validate();
    const std::size_t E = p.n_experts();
    const std::size_t J = p.bit_candidates.size();
    const int highest = p.bit_candidates.back();
    const int second = J >= 2 ? p.bit_candidates[J - 2] : highest;

    std::vector<long> weight = p.expert_weight;
    if (weight.empty()) weight.assign(E, 1);
    if (weight.size() != E) fail("config", "expert_weight must cover every expert");

    std::vector<std::size_t> group = alloc_detail::group_of(p);
    long max_spend = 0;
    for (std::size_t i = 0; i < E; ++i) max_spend += long(highest) * weight[i];
    const std::size_t S = std::size_t(max_spend) + 1;

    // f[g][s][h][sec]: min suffix cost, experts g..E-1, exact spend s, with
    // the current group's flags already at (h, sec).
    auto idx = [S](std::size_t s, int h, int sec) { return (s * 2 + std::size_t(h)) * 2 + std::size_t(sec); };
    std::vector<std::vector<double>> f(E + 1, std::vector<double>(S * 4, kInf));
    f[E][idx(0, 0, 0)] = 0.0;

    for (std::size_t g = E; g-- > 0;) {
        bool group_end = (g + 1 == E) || (group[g + 1] != group[g]);
        for (std::size_t s = 0; s < S; ++s) {
            for (int h = 0; h < 2; ++h) {
                for (int sec = 0; sec < 2; ++sec) {
                    double best = kInf;
                    for (std::size_t j = 0; j < J; ++j) {
                        long spend = long(p.bit_candidates[j]) * weight[g];
                        if (long(s) < spend) continue;
                        bool nh = h || (p.bit_candidates[j] == highest);
                        bool ns = sec || (p.bit_candidates[j] == second);
                        double nxt;
                        if (group_end) {
                            if (!alloc_detail::flags_ok(p.mode, nh, ns)) continue;
                            nxt = f[g + 1][idx(s - std::size_t(spend), 0, 0)];
                        } else {
                            nxt = f[g + 1][idx(s - std::size_t(spend), nh, ns)];
                        }
                        if (nxt == kInf) continue;
                        double cand = p.costs[g][j] + nxt;
                        if (cand < best) best = cand;
                    }
                    f[g][idx(s, h, sec)] = best;
                }
            }
        }
    }

    // Pick the spend: min cost, then maximal spend not exceeding the budget.
    double best_cost = kInf;
    long best_spend = -1;
    long cap = std::min(p.budget, max_spend);
    for (long s = 0; s <= cap; ++s) {
        double c = f[0][idx(std::size_t(s), 0, 0)];
        if (c < best_cost || (c == best_cost && c < kInf)) {
            best_cost = c;
            best_spend = s;
        }
    }
    if (best_spend < 0 || best_cost == kInf) {
        long min_spend = -1;
        for (long s = 0; s <= max_spend; ++s)
            if (f[0][idx(std::size_t(s), 0, 0)] < kInf) { min_spend = s; break; }
        std::string binding = std::string("constraint mode ") + to_string(p.mode);
        if (min_spend >= 0)
            binding += " requires minimum total spend " + std::to_string(min_spend) +
                       " > budget " + std::to_string(p.budget);
        else
            binding += " is unsatisfiable for this instance";
        fail("infeasible", binding);
    }

    // Greedy reconstruction: smallest feasible bit first gives the
    // lexicographically smallest assignment at the chosen (cost, spend).
    AllocationPlan plan;
    plan.bits.resize(E);
    std::size_t rem = std::size_t(best_spend);
    int h = 0, sec = 0;
    double target = best_cost;
    for (std::size_t g = 0; g < E; ++g) {
        bool group_end = (g + 1 == E) || (group[g + 1] != group[g]);
        bool chosen = false;
        for (std::size_t j = 0; j < J && !chosen; ++j) {
            long spend = long(p.bit_candidates[j]) * weight[g];
            if (long(rem) < spend) continue;
            bool nh = h || (p.bit_candidates[j] == highest);
            bool ns = sec || (p.bit_candidates[j] == second);
            double nxt;
            if (group_end) {
                if (!alloc_detail::flags_ok(p.mode, nh, ns)) continue;
                nxt = f[g + 1][idx(rem - std::size_t(spend), 0, 0)];
            } else {
                nxt = f[g + 1][idx(rem - std::size_t(spend), nh, ns)];
            }
            if (nxt == kInf) continue;
            if (p.costs[g][j] + nxt == target) {
                plan.bits[g] = p.bit_candidates[j];
                rem -= std::size_t(spend);
                target = nxt;
                if (group_end) { h = 0; sec = 0; }
                else { h = nh; sec = ns; }
                chosen = true;
            }
        }
        if (!chosen) fail("internal", "allocation reconstruction failed");
    }
    plan.objective = best_cost;
    plan.bpe = bpe_of(plan);
    return plan;
}

// The uniform baseline: integer targets assign that bit everywhere; x.5
// targets use the half-split scheme (first half of the layers at
// target + 0.5, second half at target - 0.5).
inline AllocationPlan uniform_plan(std::size_t n_layers, std::size_t n_experts_per_layer,
                                   double bpe_target, const std::vector<int>& candidates) {
    auto has = [&](int b) {
        return std::find(candidates.begin(), candidates.end(), b) != candidates.end();
    };
    AllocationPlan plan;
    plan.bits.resize(n_layers * n_experts_per_layer);
    double frac = bpe_target - std::floor(bpe_target);
    if (frac == 0.0) {
        int b = int(bpe_target);
        if (!has(b)) fail("config", "uniform target bit not in candidate set");
        std::fill(plan.bits.begin(), plan.bits.end(), b);
    } else if (frac == 0.5) {
        if (n_layers % 2 != 0)
            fail("config", "half-split uniform target needs an even layer count");
        int hi = int(bpe_target + 0.5), lo = int(bpe_target - 0.5);
        if (!has(hi) || !has(lo))
            fail("config", "uniform half-split bits not in candidate set");
        for (std::size_t l = 0; l < n_layers; ++l) {
            int b = (l < n_layers / 2) ? hi : lo;
            for (std::size_t e = 0; e < n_experts_per_layer; ++e)
                plan.bits[l * n_experts_per_layer + e] = b;
        }
    } else {
        fail("config", "uniform target must be an integer or x.5 value");
    }
    plan.objective = 0.0;
    plan.bpe = bpe_of(plan);
    return plan;
}

inline nlohmann::json plan_to_json(const AllocationPlan& plan, double budget_bpe,
                                   ConstraintMode mode, std::size_t n_layers,
                                   const std::vector<int>& candidates) {
    nlohmann::json j;
    j["budget_bpe"] = budget_bpe;
    j["constraint_mode"] = to_string(mode);
    j["objective"] = plan.objective;
    j["achieved_bpe"] = plan.bpe;
    j["bits"] = plan.bits;
    std::size_t per_layer = plan.bits.size() / n_layers;
    nlohmann::json hist = nlohmann::json::array();
    for (std::size_t l = 0; l < n_layers; ++l) {
        nlohmann::json row;
        row["layer"] = l;
        for (int b : candidates) {
            std::size_t cnt = 0;
            for (std::size_t e = 0; e < per_layer; ++e)
                if (plan.bits[l * per_layer + e] == b) ++cnt;
            row["b" + std::to_string(b)] = cnt;
        }
        hist.push_back(row);
    }
    j["per_layer_histogram"] = hist;
    return j;
}

inline AllocationPlan plan_from_json(const nlohmann::json& j) {
    AllocationPlan p;
    p.bits = j.at("bits").get<std::vector<int>>();
    p.objective = j.at("objective").get<double>();
    p.bpe = j.at("achieved_bpe").get<double>();
    return p;
}

} // namespace gemq
