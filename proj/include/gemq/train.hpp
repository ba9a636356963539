#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "gemq/model.hpp"
#include "gemq/optim.hpp"

namespace gemq {

struct TrainConfig {
    std::size_t steps = 800;
    std::size_t batch = 4;
    double learning_rate = 3e-3;
    std::size_t log_every = 100;
    bool verbose = false;
};

namespace detail {

// Collects every parameter tensor of the model together with its tape node,
// in a fixed order, so the optimizer walk is deterministic.
inline std::vector<std::pair<Tensor*, NodeId>> param_list(MoeModel& m, const ParamNodes& pn) {
    std::vector<std::pair<Tensor*, NodeId>> out;
    out.push_back({&m.embedding, pn.embedding});
    out.push_back({&m.head, pn.head});
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        out.push_back({&m.blocks[l].router_w, pn.routers[l]});
        for (std::size_t e = 0; e < m.blocks[l].experts.size(); ++e) {
            out.push_back({&m.blocks[l].experts[e].w_up, pn.experts[l][e].first});
            out.push_back({&m.blocks[l].experts[e].w_down, pn.experts[l][e].second});
        }
    }
    return out;
}

} // namespace detail

// Trains a character-level model by mini-batch AdamW on next-token
// cross-entropy. Deterministic given cfg.seed.
inline MoeModel train(const MoeConfig& cfg, const std::string& corpus,
                      const TrainConfig& tc = {}) {
    if (corpus.size() < 10 * cfg.seq_len)
        fail("input", "corpus too small: need at least 10 * seq_len characters");
    Tokenizer tk = Tokenizer::from_corpus(corpus);
    MoeConfig c = cfg;
    c.vocab_size = tk.vocab();
    c.validate();

    MoeModel model = init_model(c, tk);
    std::vector<int> ids = tk.encode(corpus);
    const std::size_t T = c.seq_len;
    if (ids.size() < T + 2) fail("input", "corpus shorter than one sequence");

    Rng rng(c.seed);
    AdamWConfig ac;
    ac.learning_rate = tc.learning_rate;
    ac.weight_decay = 0.0;
    std::vector<AdamWState> states;

    for (std::size_t step = 0; step < tc.steps; ++step) {
        // Accumulate gradients over the batch, then take one step.
        std::vector<Tensor> grad_acc;
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < tc.batch; ++b) {
            std::size_t start = std::size_t(rng.below(ids.size() - T - 1));
            std::vector<int> tokens(ids.begin() + long(start), ids.begin() + long(start + T));
            std::vector<int> targets(ids.begin() + long(start + 1),
                                     ids.begin() + long(start + T + 1));
            Tape tape;
            ForwardOptions opt;
            opt.track = TrackMode::all;
            ParamNodes pn;
            ForwardNodes fn = forward_on_tape(model, tokens, tape, opt, &pn);
            NodeId loss = tape.cross_entropy(fn.logits, targets);
            loss_sum += tape.value(loss)(0, 0);
            tape.backward(loss);

            auto params = detail::param_list(model, pn);
            if (grad_acc.empty()) {
                for (auto& [p, id] : params) grad_acc.push_back(tape.grad(id));
            } else {
                for (std::size_t i = 0; i < params.size(); ++i) {
                    const Tensor& g = tape.grad(params[i].second);
                    for (std::size_t j = 0; j < g.size(); ++j)
                        grad_acc[i].data[j] += g.data[j];
                }
            }
        }
        {
            // Same parameter order as detail::param_list.
            std::vector<Tensor*> params;
            params.push_back(&model.embedding);
            params.push_back(&model.head);
            for (auto& blk : model.blocks) {
                params.push_back(&blk.router_w);
                for (auto& e : blk.experts) {
                    params.push_back(&e.w_up);
                    params.push_back(&e.w_down);
                }
            }
            if (states.empty()) states.resize(params.size());
            double inv = 1.0 / double(tc.batch);
            for (std::size_t i = 0; i < params.size(); ++i) {
                for (double& g : grad_acc[i].data) g *= inv;
                adamw_step(*params[i], grad_acc[i], states[i], ac);
            }
        }
        if (tc.verbose && (step % tc.log_every == 0 || step + 1 == tc.steps))
            std::fprintf(stderr, "step %zu  loss %.4f\n", step, loss_sum / double(tc.batch));
    }
    return model;
}

} // namespace gemq
