#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gemq/apply.hpp"
#include "gemq/eval.hpp"
#include "gemq/importance.hpp"
#include "gemq/packed.hpp"
#include "gemq/router_tune.hpp"

namespace gemq {

struct PipelinePlan {
    std::vector<double> budgets = {2.5, 2.0, 1.5}; // strictly descending bpe targets
    std::vector<int> bit_candidates = {1, 2, 3};
    ConstraintMode constraint_mode = ConstraintMode::highest_and_second;
    QuantConfig quant;
    TuneConfig tune;
    bool single_stage = false;     // ablation: always estimate from the FP model
    bool quantize_routers = false; // optional 4-bit router storage
    int router_bits = 4;

    void validate() const {
        if (budgets.empty()) fail("config", "no budgets given");
        for (std::size_t i = 1; i < budgets.size(); ++i)
            if (budgets[i] >= budgets[i - 1])
                fail("config", "budgets must be strictly descending");
    }
};

struct StageMetrics {
    double budget_bpe = 0.0;
    double achieved_bpe = 0.0;
    double objective = 0.0;
    double calib_ce_pre_tune = 0.0;
    double calib_ce_post_tune = 0.0;
    double heldout_ppl = 0.0;
    double change_ratio_vs_estimation = 0.0;
    double change_ratio_vs_fp = 0.0;
    double change_ratio_any_vs_fp = 0.0;
    std::string estimation_model_tag;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["budget_bpe"] = budget_bpe;
        j["achieved_bpe"] = achieved_bpe;
        j["objective"] = objective;
        j["calib_ce_pre_tune"] = calib_ce_pre_tune;
        j["calib_ce_post_tune"] = calib_ce_post_tune;
        j["heldout_ppl"] = heldout_ppl;
        j["change_ratio_vs_estimation"] = change_ratio_vs_estimation;
        j["change_ratio_vs_fp"] = change_ratio_vs_fp;
        j["change_ratio_any_vs_fp"] = change_ratio_any_vs_fp;
        j["estimation_model_tag"] = estimation_model_tag;
        j["warnings"] = warnings;
        return j;
    }
};

struct StageArtifact {
    double budget = 0.0;
    ImportanceTable table;
    AllocationPlan plan;
    MoeModel pseudo_quantized; // pre-tune
    MoeModel tuned;            // Q_k
    std::vector<ExpertQuant> quants;
    StageMetrics metrics;
};

// Progressive quantization driver. Per descending budget: importance from
// the current estimation model Q' (FP at stage 1), exact allocation, GPTQ
// pseudo-quantization applied to the FP model Q0, router fine-tuning, then
// Q' <- tuned stage model. `out_dir`, when set, persists all artifacts.
inline std::vector<StageArtifact> run_pipeline(const MoeModel& q0, const CalibSet& calib,
                                               const PipelinePlan& plan,
                                               const std::string& heldout_text = "",
                                               const std::string& out_dir = "") {
    plan.validate();
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);

    // GPTQ layer inputs always come from the FP model (calib_from=fp).
    Capture fp_capture = capture_forward(q0, calib);

    std::vector<StageArtifact> stages;
    stages.reserve(plan.budgets.size());
    const MoeModel* estimation = &q0;
    std::string est_tag = "fp";

    for (double budget_bpe : plan.budgets) {
        StageArtifact st;
        st.budget = budget_bpe;

        const MoeModel& est = plan.single_stage ? q0 : *estimation;
        std::string tag = plan.single_stage ? "fp" : est_tag;
        st.table = build_table(est, calib, plan.bit_candidates, plan.quant, tag);

        AllocationProblem prob;
        prob.costs = st.table.entries;
        prob.bit_candidates = plan.bit_candidates;
        prob.budget = long(round_half_away(budget_bpe * double(q0.config.total_experts())));
        prob.mode = plan.constraint_mode;
        prob.layer_of.resize(q0.config.total_experts());
        for (std::size_t i = 0; i < prob.layer_of.size(); ++i)
            prob.layer_of[i] = q0.layer_of(i);
        st.plan = solve(prob);

        ApplyResult applied = apply_allocation(q0, st.plan, fp_capture, plan.quant);
        st.pseudo_quantized = std::move(applied.model);
        st.quants = std::move(applied.quants);
        st.metrics.warnings = std::move(applied.warnings);

        st.metrics.calib_ce_pre_tune = calib_cross_entropy(st.pseudo_quantized, calib);
        TuneResult tuned = finetune_routers(st.pseudo_quantized, calib, plan.tune);
        if (tuned.aborted)
            st.metrics.warnings.push_back("router tuning aborted: " + tuned.diagnostic);
        st.tuned = std::move(tuned.model);
        if (plan.quantize_routers)
            st.tuned = quantize_routers(st.tuned, plan.router_bits);
        st.metrics.calib_ce_post_tune = calib_cross_entropy(st.tuned, calib);

        st.metrics.budget_bpe = budget_bpe;
        st.metrics.achieved_bpe = st.plan.bpe;
        st.metrics.objective = st.plan.objective;
        st.metrics.estimation_model_tag = tag;
        if (!heldout_text.empty()) {
            st.metrics.heldout_ppl = perplexity(st.tuned, heldout_text);
            st.metrics.change_ratio_vs_estimation =
                router_change_ratio(st.tuned, est, heldout_text).slot;
            ChangeRatio fp_ratio = router_change_ratio(st.tuned, q0, heldout_text);
            st.metrics.change_ratio_vs_fp = fp_ratio.slot;
            st.metrics.change_ratio_any_vs_fp = fp_ratio.any_diff;
        }

        if (!out_dir.empty()) {
            std::string stage_dir = out_dir + "/stage_" + std::to_string(budget_bpe).substr(0, 3);
            fs::create_directories(stage_dir);
            save_checkpoint(st.tuned, stage_dir + "/model.gemq");
            save_packed(pack_model(st.tuned, st.quants), stage_dir + "/model.gemqp");
            std::ofstream pj(stage_dir + "/plan.json");
            pj << plan_to_json(st.plan, budget_bpe, plan.constraint_mode,
                               q0.config.n_layers, plan.bit_candidates)
                      .dump(2)
               << '\n';
            save_importance_csv(st.table, q0.config.n_experts, stage_dir + "/importance.csv");
            std::ofstream mj(stage_dir + "/metrics.json");
            mj << st.metrics.to_json().dump(2) << '\n';
            save_loss_trace_csv(tuned.loss_trace, stage_dir + "/losstrace.csv");
        }

        stages.push_back(std::move(st));
        estimation = &stages.back().tuned;
        est_tag = "q" + std::to_string(budget_bpe).substr(0, 3) + "+rft";
    }

    if (!out_dir.empty()) {
        nlohmann::json manifest;
        manifest["budgets"] = plan.budgets;
        manifest["bit_candidates"] = plan.bit_candidates;
        manifest["constraint_mode"] = to_string(plan.constraint_mode);
        manifest["single_stage"] = plan.single_stage;
        manifest["seed"] = q0.config.seed;
        manifest["calib_sequences"] = calib.seqs.size();
        nlohmann::json st_list = nlohmann::json::array();
        for (const StageArtifact& st : stages) {
            nlohmann::json e;
            std::string stage_dir = "stage_" + std::to_string(st.budget).substr(0, 3);
            e["dir"] = stage_dir;
            e["budget_bpe"] = st.budget;
            e["metrics"] = st.metrics.to_json();
            st_list.push_back(e);
        }
        manifest["stages"] = st_list;
        std::ofstream mf(out_dir + "/manifest.json");
        mf << manifest.dump(2) << '\n';
    }
    return stages;
}

} // namespace gemq
