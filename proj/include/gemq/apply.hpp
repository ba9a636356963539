#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gemq/allocate.hpp"
#include "gemq/calibration.hpp"
#include "gemq/quant.hpp"

namespace gemq {

struct ExpertQuant {
    QuantizedMatrix w_up;
    QuantizedMatrix w_down;
};

struct ApplyResult {
    MoeModel model;                  // pseudo-quantized (dequantized weights, dense)
    std::vector<ExpertQuant> quants; // one per global expert index
    std::vector<std::string> warnings;
};

// Base config; the group size is capped per matrix at its own input
// dimension inside quantize_expert, so 128 here mirrors full-width layers
// while small layers get a single group per row.
inline QuantConfig default_quant_config(const MoeConfig&) { return QuantConfig{}; }

// Quantizes both matrices of one expert at the given bit-width against the
// frozen routed inputs. w_down calibrates on the expert's own (full
// precision) hidden activations.
inline ExpertQuant quantize_expert(const Expert& e, const Tensor& inputs,
                                   const QuantConfig& qc) {
    // Group size is capped per matrix at its own input dimension.
    QuantConfig up_cfg = qc;
    up_cfg.group_size = std::min(qc.group_size, e.w_up.cols);
    QuantConfig down_cfg = qc;
    down_cfg.group_size = std::min(qc.group_size, e.w_down.cols);
    ExpertQuant out;
    out.w_up = gptq_quantize(e.w_up, inputs, up_cfg);
    Tensor hidden = silu(matmul(e.w_up, inputs)); // d_hidden x n
    out.w_down = gptq_quantize(e.w_down, hidden, down_cfg);
    return out;
}

// Applies a bit allocation: every expert's weights are replaced by their
// dequantized GPTQ output at the plan's bit-width, using calibration inputs
// captured from the source (full precision) model. Routers, embeddings and
// head are untouched. Experts with no routed calibration tokens fall back
// to round-to-nearest and are reported as warnings.
inline ApplyResult apply_allocation(const MoeModel& model, const AllocationPlan& plan,
                                    const Capture& calib,
                                    const QuantConfig& base_cfg) {
    if (plan.bits.size() != model.config.total_experts())
        fail("config", "plan does not cover every expert");
    ApplyResult res;
    res.model = model;
    res.quants.resize(plan.bits.size());
    for (std::size_t i = 0; i < plan.bits.size(); ++i) {
        std::size_t l = model.layer_of(i);
        std::size_t e = model.expert_in_layer(i);
        QuantConfig qc = base_cfg.with_bits(plan.bits[i]);
        const Expert& src = model.blocks[l].experts[e];
        RoutedTokens rt = routed_tokens(calib, l, e);
        if (rt.count() == 0) {
            QuantConfig up_cfg = qc;
            up_cfg.group_size = std::min(qc.group_size, src.w_up.cols);
            QuantConfig down_cfg = qc;
            down_cfg.group_size = std::min(qc.group_size, src.w_down.cols);
            res.quants[i].w_up = affine_quantize(src.w_up, up_cfg);
            res.quants[i].w_down = affine_quantize(src.w_down, down_cfg);
            res.warnings.push_back("expert " + std::to_string(i) +
                                   " received no calibration tokens; used round-to-nearest");
        } else {
            Tensor inputs = gather_expert_inputs(calib, l, rt);
            res.quants[i] = quantize_expert(src, inputs, qc);
        }
        Expert& dst = res.model.blocks[l].experts[e];
        dst.w_up = res.quants[i].w_up.dequant();
        dst.w_down = res.quants[i].w_down.dequant();
    }
    res.model.expert_bits = plan.bits;
    return res;
}

} // namespace gemq
