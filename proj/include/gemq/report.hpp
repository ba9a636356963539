#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gemq/common.hpp"

namespace gemq {

// Rebuilds the report CSVs from the artifacts of a pipeline run directory.
// Pure function of what is on disk; reads manifest.json and the per-stage
// plan/metrics files, writes ppl_vs_bpe.csv, bit_histogram.csv and
// change_ratio.csv into the run directory.
inline void write_reports(const std::string& run_dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(run_dir + "/manifest.json");
    if (!mf) fail("io", "no manifest.json in " + run_dir);
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) fail("format", "corrupt manifest.json");

    std::ofstream ppl(run_dir + "/ppl_vs_bpe.csv");
    std::ofstream hist(run_dir + "/bit_histogram.csv");
    std::ofstream chg(run_dir + "/change_ratio.csv");
    if (!ppl || !hist || !chg) fail("io", "cannot write reports in " + run_dir);
    ppl << "budget_bpe,achieved_bpe,heldout_ppl,calib_ce_pre_tune,calib_ce_post_tune\n";
    hist << "budget_bpe,layer,bit,count\n";
    chg << "budget_bpe,vs_estimation_slot,vs_fp_slot,vs_fp_any\n";
    ppl.precision(17);
    chg.precision(17);

    for (const auto& stage : manifest.at("stages")) {
        std::string dir = run_dir + "/" + stage.at("dir").get<std::string>();
        std::ifstream mj(dir + "/metrics.json");
        if (!mj) fail("io", "missing metrics.json in " + dir);
        nlohmann::json m = nlohmann::json::parse(mj);
        double bpe = m.at("budget_bpe").get<double>();
        ppl << bpe << ',' << m.at("achieved_bpe").get<double>() << ','
            << m.at("heldout_ppl").get<double>() << ','
            << m.at("calib_ce_pre_tune").get<double>() << ','
            << m.at("calib_ce_post_tune").get<double>() << '\n';
        chg << bpe << ',' << m.at("change_ratio_vs_estimation").get<double>() << ','
            << m.at("change_ratio_vs_fp").get<double>() << ','
            << m.at("change_ratio_any_vs_fp").get<double>() << '\n';

        std::ifstream pj(dir + "/plan.json");
        if (!pj) fail("io", "missing plan.json in " + dir);
        nlohmann::json plan = nlohmann::json::parse(pj);
        for (const auto& row : plan.at("per_layer_histogram")) {
            for (auto& [key, val] : row.items()) {
                if (key.size() > 1 && key[0] == 'b')
                    hist << bpe << ',' << row.at("layer").get<int>() << ','
                         << key.substr(1) << ',' << val.get<std::size_t>() << '\n';
            }
        }
    }
}

} // namespace gemq
