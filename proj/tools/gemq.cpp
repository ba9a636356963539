// gemq: command-line driver for training, quantizing, tuning and serving
// the toy mixture-of-experts language model.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gemq/checkpoint.hpp"
#include "gemq/eval.hpp"
#include "gemq/packed.hpp"
#include "gemq/pipeline.hpp"
#include "gemq/report.hpp"
#include "gemq/train.hpp"

using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) gemq::fail("io", "cannot open file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<double> parse_budgets(const std::string& s) {
    std::vector<double> out;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

std::vector<int> parse_bits(const std::string& s) {
    std::vector<int> out;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

// Loads either a dense checkpoint or a packed model, by magic.
gemq::MoeModel load_any_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) gemq::fail("io", "cannot open file: " + path);
    char magic[5] = {};
    is.read(magic, 5);
    is.seekg(0);
    if (std::string(magic, 5) == "GEMQP") return gemq::load_packed(is).realized();
    return gemq::load_checkpoint(is);
}

gemq::CalibSet make_calib(const gemq::MoeModel& m, const std::string& calib_path,
                          std::size_t n_seqs, std::uint64_t seed) {
    return gemq::CalibSet::sample(read_file(calib_path), m.tokenizer, n_seqs,
                                  m.config.seq_len, seed);
}

// Shared flag bundle; config-file values act as defaults, command-line
// flags override them.
struct Common {
    json cfg;

    template <typename T>
    void seed_default(CLI::Option* opt, T& var, const char* key) {
        if (cfg.contains(key)) var = cfg.at(key).get<T>();
        (void)opt;
    }
};

json load_config_arg(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") {
            json j = json::parse(read_file(argv[i + 1]), nullptr, false);
            if (j.is_discarded())
                gemq::fail("config", std::string("config file is not valid JSON: ") + argv[i + 1]);
            return j;
        }
    return json::object();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"global expert-level mixed-precision quantization for a toy MoE LM"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file with flag defaults");

    json cfg;
    try {
        cfg = load_config_arg(argc, argv);
    } catch (const gemq::Error& e) {
        std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
        return 2;
    }
    auto def = [&cfg](auto& var, const char* key) {
        if (cfg.contains(key)) var = cfg.at(key).template get<std::decay_t<decltype(var)>>();
    };

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train the toy MoE language model");
    std::string corpus_path, out_path = "model.gemq";
    gemq::MoeConfig mc;
    gemq::TrainConfig tc;
    double heldout_frac = 0.1;
    def(corpus_path, "corpus"); def(out_path, "out");
    def(mc.d_model, "d_model"); def(mc.d_hidden, "d_hidden");
    def(mc.n_layers, "n_layers"); def(mc.n_experts, "n_experts");
    def(mc.top_k, "top_k"); def(mc.seq_len, "seq_len"); def(mc.seed, "seed");
    def(tc.steps, "steps"); def(tc.batch, "batch"); def(tc.learning_rate, "learning_rate");
    train_cmd->add_option("--corpus", corpus_path, "training text file")->required(false);
    train_cmd->add_option("--out", out_path, "output checkpoint path");
    train_cmd->add_option("--d-model", mc.d_model);
    train_cmd->add_option("--d-hidden", mc.d_hidden);
    train_cmd->add_option("--layers", mc.n_layers);
    train_cmd->add_option("--experts", mc.n_experts);
    train_cmd->add_option("--top-k", mc.top_k);
    train_cmd->add_option("--seq-len", mc.seq_len);
    train_cmd->add_option("--seed", mc.seed);
    train_cmd->add_option("--steps", tc.steps);
    train_cmd->add_option("--batch", tc.batch);
    train_cmd->add_option("--lr", tc.learning_rate);
    train_cmd->add_option("--heldout-frac", heldout_frac, "tail fraction excluded from training");

    // ---- importance ----
    auto* imp_cmd = app.add_subcommand("importance", "build the expert importance table");
    std::string model_path, calib_path, bits_str = "1,2,3", imp_out = "importance.csv";
    std::size_t calib_seqs = 128;
    std::uint64_t calib_seed = 1234;
    def(model_path, "model"); def(calib_path, "calib"); def(bits_str, "bits");
    def(imp_out, "importance_out"); def(calib_seqs, "calib_seqs"); def(calib_seed, "calib_seed");
    imp_cmd->add_option("--model", model_path)->required(false);
    imp_cmd->add_option("--calib", calib_path, "calibration text file");
    imp_cmd->add_option("--bits", bits_str, "candidate bit-widths, comma separated");
    imp_cmd->add_option("--out", imp_out);
    imp_cmd->add_option("--calib-seqs", calib_seqs);
    imp_cmd->add_option("--calib-seed", calib_seed);

    // ---- allocate ----
    auto* alloc_cmd = app.add_subcommand("allocate", "solve the global bit allocation");
    std::string imp_path, plan_out = "plan.json", mode_str = "highest_and_second";
    double budget_bpe = 2.0;
    std::size_t alloc_layers = 0, alloc_experts = 0;
    def(imp_path, "importance"); def(plan_out, "plan_out"); def(mode_str, "constraint_mode");
    def(budget_bpe, "budget");
    alloc_cmd->add_option("--importance", imp_path, "importance CSV")->required(false);
    alloc_cmd->add_option("--budget", budget_bpe, "target bits per expert");
    alloc_cmd->add_option("--constraint-mode", mode_str);
    alloc_cmd->add_option("--layers", alloc_layers, "layer count (default from CSV)");
    alloc_cmd->add_option("--experts", alloc_experts, "experts per layer (default from CSV)");
    alloc_cmd->add_option("--out", plan_out);

    // ---- quantize ----
    auto* quant_cmd = app.add_subcommand("quantize", "apply a plan with GPTQ");
    std::string plan_path, quant_out = "model_q.gemq", packed_out;
    def(plan_path, "plan"); def(quant_out, "quant_out"); def(packed_out, "packed_out");
    quant_cmd->add_option("--model", model_path)->required(false);
    quant_cmd->add_option("--plan", plan_path)->required(false);
    quant_cmd->add_option("--calib", calib_path);
    quant_cmd->add_option("--calib-seqs", calib_seqs);
    quant_cmd->add_option("--calib-seed", calib_seed);
    quant_cmd->add_option("--out", quant_out);
    quant_cmd->add_option("--packed-out", packed_out, "also write a packed model");

    // ---- tune-routers ----
    auto* tune_cmd = app.add_subcommand("tune-routers", "fine-tune router weights");
    std::string tune_out = "model_tuned.gemq", trace_out;
    gemq::TuneConfig tune_cfg;
    def(tune_out, "tune_out"); def(tune_cfg.epochs, "epochs");
    tune_cmd->add_option("--model", model_path)->required(false);
    tune_cmd->add_option("--calib", calib_path);
    tune_cmd->add_option("--calib-seqs", calib_seqs);
    tune_cmd->add_option("--calib-seed", calib_seed);
    tune_cmd->add_option("--epochs", tune_cfg.epochs);
    tune_cmd->add_option("--lr", tune_cfg.adamw.learning_rate);
    tune_cmd->add_option("--weight-decay", tune_cfg.adamw.weight_decay);
    tune_cmd->add_option("--out", tune_out);
    tune_cmd->add_option("--trace", trace_out, "loss trace CSV");

    // ---- pipeline ----
    auto* pipe_cmd = app.add_subcommand("pipeline", "progressive multi-budget quantization");
    std::string budgets_str = "2.5,2.0,1.5", run_out, heldout_path;
    bool single_stage = false, router_quant = false;
    def(budgets_str, "budgets"); def(run_out, "run_dir"); def(heldout_path, "heldout");
    def(single_stage, "single_stage");
    pipe_cmd->add_option("--model", model_path)->required(false);
    pipe_cmd->add_option("--calib", calib_path);
    pipe_cmd->add_option("--calib-seqs", calib_seqs);
    pipe_cmd->add_option("--calib-seed", calib_seed);
    pipe_cmd->add_option("--budgets", budgets_str);
    pipe_cmd->add_option("--bits", bits_str);
    pipe_cmd->add_option("--constraint-mode", mode_str);
    pipe_cmd->add_option("--heldout", heldout_path, "held-out text for metrics");
    pipe_cmd->add_option("--out", run_out, "run directory (default run/<timestamp>)");
    pipe_cmd->add_flag("--single-stage", single_stage, "always estimate from the FP model");
    pipe_cmd->add_flag("--quantize-routers", router_quant, "store routers at 4 bits");

    // ---- pack ----
    auto* pack_cmd = app.add_subcommand("pack", "write a bit-packed model");
    std::string q0_path, pack_out = "model.gemqp";
    def(q0_path, "q0"); def(pack_out, "pack_out");
    pack_cmd->add_option("--model", model_path, "checkpoint providing routers/embeddings");
    pack_cmd->add_option("--q0", q0_path, "FP checkpoint the experts are quantized from");
    pack_cmd->add_option("--plan", plan_path);
    pack_cmd->add_option("--calib", calib_path);
    pack_cmd->add_option("--calib-seqs", calib_seqs);
    pack_cmd->add_option("--calib-seed", calib_seed);
    pack_cmd->add_option("--out", pack_out);

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "perplexity and router metrics");
    std::string text_path, ref_path;
    def(text_path, "text"); def(ref_path, "ref");
    eval_cmd->add_option("--model", model_path, "checkpoint or packed model");
    eval_cmd->add_option("--text", text_path, "evaluation text file");
    eval_cmd->add_option("--ref", ref_path, "reference model for change ratio / routing swap");

    // ---- report ----
    auto* report_cmd = app.add_subcommand("report", "regenerate CSV reports for a run");
    std::string report_dir;
    report_cmd->add_option("dir", report_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        if (code != 0)
            std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
        return code;
    }

    try {
        if (*train_cmd) {
            if (corpus_path.empty()) gemq::fail("usage", "missing --corpus");
            std::string text = read_file(corpus_path);
            std::size_t split = std::size_t(double(text.size()) * (1.0 - heldout_frac));
            gemq::MoeModel m = gemq::train(mc, text.substr(0, split), tc);
            gemq::save_checkpoint(m, out_path);
            double ppl = gemq::perplexity(m, text.substr(split));
            std::cout << json{{"out", out_path},
                              {"vocab_size", m.config.vocab_size},
                              {"heldout_ppl", ppl}}
                             .dump(2)
                      << '\n';
        } else if (*imp_cmd) {
            if (model_path.empty() || calib_path.empty())
                gemq::fail("usage", "missing --model or --calib");
            gemq::MoeModel m = load_any_model(model_path);
            gemq::CalibSet calib = make_calib(m, calib_path, calib_seqs, calib_seed);
            gemq::QuantConfig qc = gemq::default_quant_config(m.config);
            gemq::ImportanceTable t =
                gemq::build_table(m, calib, parse_bits(bits_str), qc);
            gemq::save_importance_csv(t, m.config.n_experts, imp_out);
            std::cout << json{{"out", imp_out}, {"experts", t.entries.size()}}.dump(2) << '\n';
        } else if (*alloc_cmd) {
            if (imp_path.empty()) gemq::fail("usage", "missing --importance");
            gemq::ImportanceTable t = gemq::load_importance_csv(imp_path);
            std::size_t E = t.entries.size();
            std::size_t layers = alloc_layers, experts = alloc_experts;
            if (layers == 0 || experts == 0)
                gemq::fail("usage", "--layers and --experts are required with a bare CSV");
            if (layers * experts != E) gemq::fail("config", "layers*experts != table rows");
            gemq::AllocationProblem prob;
            prob.costs = t.entries;
            prob.bit_candidates = t.bit_candidates;
            prob.mode = gemq::constraint_mode_from_string(mode_str);
            prob.budget = long(gemq::round_half_away(budget_bpe * double(E)));
            prob.layer_of.resize(E);
            for (std::size_t i = 0; i < E; ++i) prob.layer_of[i] = i / experts;
            gemq::AllocationPlan plan = gemq::solve(prob);
            std::ofstream os(plan_out);
            os << gemq::plan_to_json(plan, budget_bpe, prob.mode, layers, prob.bit_candidates)
                      .dump(2)
               << '\n';
            std::cout << json{{"out", plan_out},
                              {"objective", plan.objective},
                              {"achieved_bpe", plan.bpe}}
                             .dump(2)
                      << '\n';
        } else if (*quant_cmd) {
            if (model_path.empty() || plan_path.empty() || calib_path.empty())
                gemq::fail("usage", "missing --model, --plan or --calib");
            gemq::MoeModel m = gemq::load_checkpoint(model_path);
            gemq::AllocationPlan plan =
                gemq::plan_from_json(json::parse(read_file(plan_path)));
            gemq::CalibSet calib = make_calib(m, calib_path, calib_seqs, calib_seed);
            gemq::Capture cap = gemq::capture_forward(m, calib);
            gemq::ApplyResult res =
                gemq::apply_allocation(m, plan, cap, gemq::default_quant_config(m.config));
            gemq::save_checkpoint(res.model, quant_out);
            if (!packed_out.empty())
                gemq::save_packed(gemq::pack_model(res.model, res.quants), packed_out);
            std::cout << json{{"out", quant_out}, {"warnings", res.warnings}}.dump(2) << '\n';
        } else if (*tune_cmd) {
            if (model_path.empty() || calib_path.empty())
                gemq::fail("usage", "missing --model or --calib");
            gemq::MoeModel m = gemq::load_checkpoint(model_path);
            gemq::CalibSet calib = make_calib(m, calib_path, calib_seqs, calib_seed);
            gemq::TuneResult res = gemq::finetune_routers(m, calib, tune_cfg);
            gemq::save_checkpoint(res.model, tune_out);
            if (!trace_out.empty()) gemq::save_loss_trace_csv(res.loss_trace, trace_out);
            json j{{"out", tune_out}, {"aborted", res.aborted}};
            if (!res.loss_trace.empty()) {
                j["first_loss"] = res.loss_trace.front();
                j["last_loss"] = res.loss_trace.back();
            }
            std::cout << j.dump(2) << '\n';
        } else if (*pipe_cmd) {
            if (model_path.empty() || calib_path.empty())
                gemq::fail("usage", "missing --model or --calib");
            gemq::MoeModel q0 = gemq::load_checkpoint(model_path);
            gemq::CalibSet calib = make_calib(q0, calib_path, calib_seqs, calib_seed);
            gemq::PipelinePlan plan;
            plan.budgets = parse_budgets(budgets_str);
            plan.bit_candidates = parse_bits(bits_str);
            plan.constraint_mode = gemq::constraint_mode_from_string(mode_str);
            plan.quant = gemq::default_quant_config(q0.config);
            plan.single_stage = single_stage;
            plan.quantize_routers = router_quant;
            if (run_out.empty())
                run_out = "run/" + std::to_string(std::time(nullptr));
            std::string heldout = heldout_path.empty() ? "" : read_file(heldout_path);
            auto stages = gemq::run_pipeline(q0, calib, plan, heldout, run_out);
            json out = json::array();
            for (const auto& st : stages) out.push_back(st.metrics.to_json());
            std::cout << json{{"run_dir", run_out}, {"stages", out}}.dump(2) << '\n';
        } else if (*pack_cmd) {
            if (model_path.empty() || q0_path.empty() || plan_path.empty() || calib_path.empty())
                gemq::fail("usage", "missing --model, --q0, --plan or --calib");
            gemq::MoeModel shell = gemq::load_checkpoint(model_path);
            gemq::MoeModel q0 = gemq::load_checkpoint(q0_path);
            gemq::AllocationPlan plan =
                gemq::plan_from_json(json::parse(read_file(plan_path)));
            gemq::CalibSet calib = make_calib(q0, calib_path, calib_seqs, calib_seed);
            gemq::Capture cap = gemq::capture_forward(q0, calib);
            gemq::ApplyResult res =
                gemq::apply_allocation(q0, plan, cap, gemq::default_quant_config(q0.config));
            shell.expert_bits = plan.bits;
            gemq::save_packed(gemq::pack_model(shell, res.quants), pack_out);
            std::cout << json{{"out", pack_out}}.dump(2) << '\n';
        } else if (*eval_cmd) {
            if (model_path.empty() || text_path.empty())
                gemq::fail("usage", "missing --model or --text");
            gemq::MoeModel m = load_any_model(model_path);
            std::string text = read_file(text_path);
            json j;
            j["perplexity"] = gemq::perplexity(m, text);
            if (!ref_path.empty()) {
                gemq::MoeModel ref = load_any_model(ref_path);
                gemq::ChangeRatio cr = gemq::router_change_ratio(m, ref, text);
                j["change_ratio_slot"] = cr.slot;
                j["change_ratio_any"] = cr.any_diff;
                j["fp_logit_replacement_ppl"] = gemq::fp_logit_replacement_ppl(m, ref, text);
                j["ref_perplexity"] = gemq::perplexity(ref, text);
            }
            std::cout << j.dump(2) << '\n';
        } else if (*report_cmd) {
            gemq::write_reports(report_dir);
            std::cout << json{{"run_dir", report_dir}}.dump(2) << '\n';
        }
    } catch (const gemq::Error& e) {
        std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
        return 1;
    }
    return 0;
}
