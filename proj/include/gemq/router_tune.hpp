#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "gemq/calibration.hpp"
#include "gemq/optim.hpp"
#include "gemq/quant.hpp"

namespace gemq {

struct TuneConfig {
    AdamWConfig adamw; // lr 1e-4, wd 1e-4, betas 0.9/0.999, eps 1e-8
    std::size_t epochs = 1;

    void validate() const {
        if (adamw.learning_rate <= 0.0 || adamw.weight_decay < 0.0)
            fail("config", "tuning rates must be positive");
        // epochs == 0 is allowed as the explicit identity case
    }
};

struct TuneResult {
    MoeModel model;
    std::vector<double> loss_trace; // per optimizer step
    bool aborted = false;
    std::string diagnostic;
};

// Post-quantization global router fine-tuning: everything except the
// router weight matrices is frozen; the discrete top-K selection is
// treated as constant per forward (straight-through), gradients flow
// through the selected-logit softmax.
inline TuneResult finetune_routers(const MoeModel& model, const CalibSet& calib,
                                   const TuneConfig& cfg = {}) {
    cfg.validate();
    if (model.expert_bits.empty())
        fail("config", "finetune_routers expects a quantized model (expert_bits set)");
    if (calib.seqs.empty()) fail("input", "empty calibration set");

    TuneResult res;
    res.model = model;
    std::vector<AdamWState> states(model.config.n_layers);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < calib.seqs.size(); ++i) {
            Tape tape;
            ForwardOptions opt;
            opt.track = TrackMode::routers_only;
            ParamNodes pn;
            ForwardNodes fn = forward_on_tape(res.model, calib.inputs(i), tape, opt, &pn);
            NodeId loss = tape.cross_entropy(fn.logits, calib.targets(i));
            double lv = tape.value(loss)(0, 0);
            if (!std::isfinite(lv)) {
                TuneResult failed;
                failed.model = model; // pre-tune weights
                failed.loss_trace = res.loss_trace;
                failed.aborted = true;
                failed.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) +
                                    ", sequence " + std::to_string(i);
                return failed;
            }
            res.loss_trace.push_back(lv);
            tape.backward(loss);
            for (std::size_t l = 0; l < model.config.n_layers; ++l)
                adamw_step(res.model.blocks[l].router_w, tape.grad(pn.routers[l]),
                           states[l], cfg.adamw);
        }
    }
    return res;
}

// Optional final step: store routers at 4 bits (dequantized in place).
// bits >= 16 is the identity (full-precision storage).
inline MoeModel quantize_routers(const MoeModel& model, int bits = 4) {
    if (bits >= 16) return model;
    MoeModel out = model;
    QuantConfig qc;
    qc.bits = bits;
    qc.group_size = std::min<std::size_t>(128, model.config.d_model);
    for (MoeBlock& b : out.blocks)
        b.router_w = affine_quantize(b.router_w, qc).dequant();
    return out;
}

inline void save_loss_trace_csv(const std::vector<double>& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) fail("io", "cannot open for write: " + path);
    os << "step,loss\n";
    os.precision(17);
    for (std::size_t i = 0; i < trace.size(); ++i) os << i << ',' << trace[i] << '\n';
}

} // namespace gemq
