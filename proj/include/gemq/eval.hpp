#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gemq/calibration.hpp"
#include "gemq/model.hpp"

namespace gemq {

// Splits a text into consecutive windows of seq_len + 1 tokens for
// teacher-forced evaluation (stride seq_len; a trailing partial window with
// at least 2 tokens is kept).
inline std::vector<std::vector<int>> eval_windows(const std::vector<int>& ids,
                                                  std::size_t seq_len) {
    std::vector<std::vector<int>> out;
    for (std::size_t start = 0; start + 1 < ids.size(); start += seq_len) {
        std::size_t end = std::min(ids.size(), start + seq_len + 1);
        out.emplace_back(ids.begin() + long(start), ids.begin() + long(end));
        if (end == ids.size()) break;
    }
    return out;
}

// Token-weighted mean cross-entropy of teacher-forced next-token prediction.
inline double mean_cross_entropy(const MoeModel& m, const std::string& text) {
    if (text.size() < 2) fail("input", "text too short to evaluate");
    std::vector<int> ids = m.tokenizer.encode(text);
    auto windows = eval_windows(ids, m.config.seq_len);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& w : windows) {
        std::vector<int> inputs(w.begin(), w.end() - 1);
        std::vector<int> targets(w.begin() + 1, w.end());
        Tensor logits = forward(m, inputs).logits;
        total += cross_entropy(logits, targets) * double(targets.size());
        count += targets.size();
    }
    return total / double(count);
}

inline double perplexity(const MoeModel& m, const std::string& text) {
    return std::exp(mean_cross_entropy(m, text));
}

// Router change: mean over (token, layer) of (K - |TopK_a n TopK_b|) / K.
// The secondary metric counts tokens whose selected set differs at all.
struct ChangeRatio {
    double slot = 0.0;    // per-slot overlap definition (primary)
    double any_diff = 0.0; // set-differs-at-all definition
};

inline ChangeRatio router_change_ratio(const MoeModel& a, const MoeModel& b,
                                       const std::string& text) {
    if (!(a.config == b.config) &&
        !(a.config.n_layers == b.config.n_layers && a.config.n_experts == b.config.n_experts &&
          a.config.top_k == b.config.top_k && a.config.vocab_size == b.config.vocab_size))
        fail("config", "router_change_ratio needs matching architectures");
    std::vector<int> ids = a.tokenizer.encode(text);
    auto windows = eval_windows(ids, a.config.seq_len);
    double slot_sum = 0.0, any_sum = 0.0;
    std::size_t count = 0;
    const std::size_t K = a.config.top_k;
    for (const auto& w : windows) {
        std::vector<int> inputs(w.begin(), w.end() - 1);
        RoutingRecord ra = forward(a, inputs).routing;
        RoutingRecord rb = forward(b, inputs).routing;
        for (std::size_t l = 0; l < a.config.n_layers; ++l) {
            for (std::size_t t = 0; t < inputs.size(); ++t) {
                std::size_t common = 0;
                for (std::size_t i : ra.selected[l][t])
                    for (std::size_t j : rb.selected[l][t])
                        if (i == j) { ++common; break; }
                slot_sum += double(K - common) / double(K);
                any_sum += (common == K) ? 0.0 : 1.0;
                ++count;
            }
        }
    }
    return {slot_sum / double(count), any_sum / double(count)};
}

// Perplexity of `model` when the reference model's routing decisions
// (selected experts and gate weights) are substituted per token.
inline double fp_logit_replacement_ppl(const MoeModel& model, const MoeModel& reference,
                                       const std::string& text) {
    if (!(model.config.n_layers == reference.config.n_layers &&
          model.config.n_experts == reference.config.n_experts &&
          model.config.top_k == reference.config.top_k &&
          model.config.vocab_size == reference.config.vocab_size))
        fail("config", "fp_logit_replacement needs matching architectures");
    std::vector<int> ids = model.tokenizer.encode(text);
    auto windows = eval_windows(ids, model.config.seq_len);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& w : windows) {
        std::vector<int> inputs(w.begin(), w.end() - 1);
        std::vector<int> targets(w.begin() + 1, w.end());
        RoutingRecord ref = forward(reference, inputs).routing;
        Tensor logits = forward(model, inputs, &ref).logits;
        total += cross_entropy(logits, targets) * double(targets.size());
        count += targets.size();
    }
    return std::exp(total / double(count));
}

// Mean CE over a calibration set (teacher-forced, per-token weighted
// uniformly since all sequences share one length).
inline double calib_cross_entropy(const MoeModel& m, const CalibSet& calib) {
    double total = 0.0;
    for (std::size_t i = 0; i < calib.seqs.size(); ++i) {
        Tensor logits = forward(m, calib.inputs(i)).logits;
        total += cross_entropy(logits, calib.targets(i));
    }
    return total / double(calib.seqs.size());
}

} // namespace gemq
