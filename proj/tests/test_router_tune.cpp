#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gemq/apply.hpp"
#include "gemq/eval.hpp"
#include "gemq/router_tune.hpp"
#include "helpers.hpp"

using gemq::Tensor;

namespace {

struct Quantized {
    gemq::MoeModel model;
    gemq::CalibSet calib;
};

// A trained model with all experts crushed to low bit-widths, so router
// tuning has something to recover.
Quantized crushed_model(std::uint64_t seed, int bits, std::size_t n_calib = 48) {
    Quantized out;
    gemq::MoeModel fp = th::small_trained(seed, 250);
    std::string corpus = th::load_corpus();
    out.calib = gemq::CalibSet::sample(corpus.substr(0, 40000), fp.tokenizer, n_calib,
                                       fp.config.seq_len, seed + 1);
    gemq::Capture cap = gemq::capture_forward(fp, out.calib);
    gemq::AllocationPlan plan;
    plan.bits.assign(fp.config.total_experts(), bits);
    plan.bpe = double(bits);
    out.model = gemq::apply_allocation(fp, plan, cap,
                                       gemq::default_quant_config(fp.config))
                    .model;
    return out;
}

} // namespace

TEST_CASE("adamw zero gradient applies pure decoupled weight decay") {
    Tensor p(1, 1, {1.0});
    Tensor g(1, 1, {0.0});
    gemq::AdamWState st;
    gemq::AdamWConfig cfg; // lr 1e-4, wd 1e-4
    gemq::adamw_step(p, g, st, cfg);
    CHECK(p(0, 0) == 1.0 - 1e-4 * 1e-4 * 1.0);
    CHECK(st.step == 1);
}

TEST_CASE("adamw first step moves by about the learning rate against the gradient") {
    gemq::AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    for (double grad : {0.5, -2.0, 13.0}) {
        Tensor p(1, 1, {0.3});
        Tensor g(1, 1, {grad});
        gemq::AdamWState st;
        gemq::adamw_step(p, g, st, cfg);
        double delta = p(0, 0) - 0.3;
        CHECK(std::abs(std::abs(delta) - cfg.learning_rate) < 1e-7);
        CHECK(delta * grad < 0.0);
    }
}

TEST_CASE("adamw drives a quadratic toward its minimum") {
    gemq::AdamWConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.0;
    Tensor p(1, 1, {-4.0});
    gemq::AdamWState st;
    double first = (p(0, 0) - 3.0) * (p(0, 0) - 3.0);
    for (int i = 0; i < 100; ++i) {
        Tensor g(1, 1, {2.0 * (p(0, 0) - 3.0)});
        gemq::adamw_step(p, g, st, cfg);
    }
    double last = (p(0, 0) - 3.0) * (p(0, 0) - 3.0);
    CHECK(last < first);
    CHECK(std::abs(p(0, 0) - 3.0) < std::abs(-4.0 - 3.0));
    CHECK_THROWS_AS(gemq::adamw_step(p, Tensor(2, 2), st, cfg), gemq::Error);
}

TEST_CASE("router gradients match finite differences under frozen selection") {
    gemq::MoeConfig cfg = th::small_config(31);
    cfg.d_model = 6;
    cfg.d_hidden = 8;
    cfg.vocab_size = 8;
    gemq::MoeModel m = gemq::init_model(cfg, gemq::Tokenizer::from_corpus("abcdefgh"));
    std::vector<int> tokens = {0, 3, 1, 5, 2, 7};
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    std::vector<int> inputs(tokens.begin(), tokens.end() - 1);

    gemq::Tape tape;
    gemq::ForwardOptions opt;
    opt.track = gemq::TrackMode::routers_only;
    gemq::ParamNodes pn;
    gemq::ForwardNodes fn = gemq::forward_on_tape(m, inputs, tape, opt, &pn);
    gemq::NodeId loss = tape.cross_entropy(fn.logits, targets);
    tape.backward(loss);

    // freeze the baseline selection while differencing
    th::RefOut base = th::ref_forward(m, inputs);
    std::vector<std::vector<std::vector<std::size_t>>> sel;
    for (const th::RefBlock& b : base.blocks) sel.push_back(b.sel);

    const double eps = 1e-6;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Tensor grad = tape.grad(pn.routers[l]);
        for (std::size_t i = 0; i < grad.size(); i += 5) {
            gemq::MoeModel up = m, dn = m;
            up.blocks[l].router_w.data[i] += eps;
            dn.blocks[l].router_w.data[i] -= eps;
            double lu = th::ref_ce(th::ref_forward(up, inputs, &sel).logits, targets);
            double ld = th::ref_ce(th::ref_forward(dn, inputs, &sel).logits, targets);
            double fd = (lu - ld) / (2 * eps);
            CHECK(th::rel_err(fd, grad.data[i]) < 1e-4);
        }
    }
}

TEST_CASE("zero epochs is the bitwise identity") {
    Quantized q = crushed_model(33, 2, 4);
    gemq::TuneConfig tc;
    tc.epochs = 0;
    gemq::TuneResult r = gemq::finetune_routers(q.model, q.calib, tc);
    CHECK_FALSE(r.aborted);
    CHECK(r.loss_trace.empty());
    CHECK(th::model_bytes(r.model) == th::model_bytes(q.model));
}

TEST_CASE("tuning touches routers only") {
    Quantized q = crushed_model(34, 2, 6);
    gemq::TuneResult r = gemq::finetune_routers(q.model, q.calib);
    REQUIRE_FALSE(r.aborted);
    CHECK(r.loss_trace.size() == q.calib.seqs.size());
    CHECK(th::tensors_equal(r.model.embedding, q.model.embedding));
    CHECK(th::tensors_equal(r.model.head, q.model.head));
    bool any_router_changed = false;
    for (std::size_t l = 0; l < q.model.config.n_layers; ++l) {
        if (!th::tensors_equal(r.model.blocks[l].router_w, q.model.blocks[l].router_w))
            any_router_changed = true;
        for (std::size_t e = 0; e < q.model.config.n_experts; ++e) {
            CHECK(th::tensors_equal(r.model.blocks[l].experts[e].w_up,
                                    q.model.blocks[l].experts[e].w_up));
            CHECK(th::tensors_equal(r.model.blocks[l].experts[e].w_down,
                                    q.model.blocks[l].experts[e].w_down));
        }
    }
    CHECK(any_router_changed);
    CHECK(r.model.expert_bits == q.model.expert_bits);
}

TEST_CASE("tuning requires a quantized model and a calibration set") {
    Quantized q = crushed_model(35, 2, 4);
    gemq::MoeModel fp = q.model;
    fp.expert_bits.clear();
    CHECK_THROWS_AS((void)gemq::finetune_routers(fp, q.calib), gemq::Error);
    gemq::CalibSet empty;
    CHECK_THROWS_AS((void)gemq::finetune_routers(q.model, empty), gemq::Error);
    gemq::TuneConfig bad;
    bad.adamw.learning_rate = 0.0;
    CHECK_THROWS_AS((void)gemq::finetune_routers(q.model, q.calib, bad), gemq::Error);
}

TEST_CASE("tuning is deterministic") {
    Quantized q = crushed_model(36, 2, 6);
    gemq::TuneResult a = gemq::finetune_routers(q.model, q.calib);
    gemq::TuneResult b = gemq::finetune_routers(q.model, q.calib);
    CHECK(th::model_bytes(a.model) == th::model_bytes(b.model));
    CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("tuning lowers the calibration loss on a heavily quantized model") {
    Quantized q = crushed_model(37, 1, 64);
    double before = gemq::calib_cross_entropy(q.model, q.calib);
    gemq::TuneConfig tc;
    tc.epochs = 2;
    gemq::TuneResult r = gemq::finetune_routers(q.model, q.calib, tc);
    REQUIRE_FALSE(r.aborted);
    double after = gemq::calib_cross_entropy(r.model, q.calib);
    CHECK(after < before);
}

TEST_CASE("non-finite loss aborts and returns the pre-tune weights") {
    Quantized q = crushed_model(38, 2, 4);
    q.model.head(0, 0) = std::numeric_limits<double>::infinity();
    gemq::TuneResult r = gemq::finetune_routers(q.model, q.calib);
    CHECK(r.aborted);
    CHECK(r.diagnostic.find("non-finite") != std::string::npos);
    CHECK(th::model_bytes(r.model) == th::model_bytes(q.model));
}

TEST_CASE("router storage quantization") {
    Quantized q = crushed_model(39, 2, 4);
    // bits >= 16 is the identity
    CHECK(th::model_bytes(gemq::quantize_routers(q.model, 16)) ==
          th::model_bytes(q.model));
    // routers already on a 4-bit grid pass through unchanged
    gemq::MoeModel grid = q.model;
    gemq::Rng rng(390);
    for (gemq::MoeBlock& b : grid.blocks)
        b.router_w = th::on_grid(b.router_w.rows, b.router_w.cols, 4, rng);
    gemq::MoeModel rq = gemq::quantize_routers(grid, 4);
    for (std::size_t l = 0; l < grid.config.n_layers; ++l)
        CHECK(th::tensors_equal(rq.blocks[l].router_w, grid.blocks[l].router_w));
    // on a trained model the perplexity impact of 4-bit routers is small
    gemq::MoeModel fp = th::small_trained(39, 250);
    std::string heldout = th::load_corpus().substr(100000, 6000);
    double p0 = gemq::perplexity(fp, heldout);
    double p1 = gemq::perplexity(gemq::quantize_routers(fp, 4), heldout);
    CHECK(std::abs(p1 - p0) / p0 < 0.01);
}

TEST_CASE("loss trace CSV") {
    std::string path = "trace_test.csv";
    gemq::save_loss_trace_csv({1.5, 0.75}, path);
    std::ifstream is(path);
    std::string header, r0, r1;
    std::getline(is, header);
    std::getline(is, r0);
    std::getline(is, r1);
    CHECK(header == "step,loss");
    CHECK(r0 == "0,1.5");
    CHECK(r1 == "1,0.75");
    std::remove(path.c_str());
}
