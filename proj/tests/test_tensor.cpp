#include <catch2/catch_amalgamated.hpp>

#include "sicql/graph.hpp"
#include "sicql/optim.hpp"
#include "sicql/rng.hpp"
#include "sicql/tensor.hpp"
#include "testing_util.hpp"

using namespace sicql;

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x({1, 5});
    Tensor y = ops::softmax_rows(x);
    for (int j = 0; j < 5; ++j) REQUIRE(y.at(0, j) == Catch::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    Tensor x = Tensor::randn({7, 9}, rng, 3.0);
    Tensor y = ops::softmax_rows(x);
    for (int i = 0; i < 7; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y.at(i, j);
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layer norm of a constant vector is zero before affine") {
    Tensor x = Tensor::full({1, 8}, 3.7);
    Tensor stats;
    Tensor y = ops::layer_norm_rows(x, 1e-5, &stats);
    for (int j = 0; j < 8; ++j) REQUIRE(std::abs(y.at(0, j)) < 1e-9);
}

TEST_CASE("matmul against identity") {
    Rng rng(11);
    Tensor a = Tensor::randn({6, 6}, rng);
    Tensor eye({6, 6});
    for (int i = 0; i < 6; ++i) eye.at(i, i) = 1.0;
    Tensor c = ops::matmul(a, eye);
    REQUIRE(c == a);
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor a({2, 3}), b({4, 2});
    REQUIRE_THROWS_AS(ops::matmul(a, b), TensorError);
}

TEST_CASE("log rejects non-positive input") {
    Tensor a({1, 2}, {1.0, 0.0});
    REQUIRE_THROWS_AS(ops::log(a), TensorError);
}

TEST_CASE("batched rows are bit-identical to single rows") {
    // Kernel accumulation order is row-local, so computing a row inside a
    // batch must give the exact bits of computing it alone.
    Rng rng(5);
    Tensor a = Tensor::randn({9, 17}, rng);
    Tensor b = Tensor::randn({17, 13}, rng);
    Tensor full = ops::matmul(a, b);
    for (int i = 0; i < 9; ++i) {
        Tensor row({1, 17});
        for (int j = 0; j < 17; ++j) row.at(0, j) = a.at(i, j);
        Tensor r = ops::matmul(row, b);
        for (int j = 0; j < 13; ++j) REQUIRE(r.at(0, j) == full.at(i, j));
    }
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tape tape;
    ParamSet params;
    Tensor& x = params.add("x", Tensor({3}, {1.0, 2.0, 3.0}));
    Var vx = tape.param(x, &params.find("x").grad);
    Var loss = tape.sum_all(tape.mul(vx, vx));
    tape.backward(loss);
    const Tensor& g = params.find("x").grad;
    REQUIRE(g.at(0) == Catch::Approx(2.0));
    REQUIRE(g.at(1) == Catch::Approx(4.0));
    REQUIRE(g.at(2) == Catch::Approx(6.0));
}

TEST_CASE("constant loss yields zero gradients") {
    Tape tape;
    ParamSet params;
    Tensor& x = params.add("x", Tensor({4}, {1.0, -1.0, 2.0, 0.5}));
    Var vx = tape.param(x, &params.find("x").grad);
    Var c = tape.constant(Tensor::scalar(3.0));
    // x participates in the graph but the loss does not depend on it.
    Var dead = tape.mul(vx, vx);
    (void)dead;
    Var loss = tape.mean_all(c);
    tape.backward(loss);
    for (int i = 0; i < 4; ++i) REQUIRE(params.find("x").grad.at(i) == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    ParamSet params;
    Tensor& x = params.add("x", Tensor({2}, {1.0, 2.0}));
    Var vx = tape.param(x, &params.find("x").grad);
    REQUIRE_THROWS_AS(tape.backward(vx), GraphError);
}

TEST_CASE("backward rejects non-finite loss") {
    Tape tape;
    Var c = tape.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
    REQUIRE_THROWS_AS(tape.backward(c), GraphError);
}

TEST_CASE("two-layer relu net matches central finite differences") {
    // 10 parameters: W1 (2x3), W2 (3x1), b2 (1).
    Rng rng(17);
    ParamSet params;
    params.add("w1", Tensor::randn({2, 3}, rng, 0.8));
    params.add("w2", Tensor::randn({3, 1}, rng, 0.8));
    params.add("b2", Tensor::randn({1}, rng, 0.5));
    REQUIRE(params.total_params() == 10);
    Tensor input = Tensor::randn({4, 2}, rng, 1.3);

    auto eval = [&](Tape* tape, bool with_grad) {
        if (with_grad) {
            Var w1 = tape->param(params.find("w1").value, &params.find("w1").grad);
            Var w2 = tape->param(params.find("w2").value, &params.find("w2").grad);
            Var b2 = tape->param(params.find("b2").value, &params.find("b2").grad);
            Var h = tape->relu(tape->matmul(tape->constant(input), w1));
            Var out = tape->add_rowvec(tape->matmul(h, w2), b2);
            Var loss = tape->mean_all(tape->mul(out, out));
            tape->backward(loss);
            return tape->val(loss).value();
        }
        Tensor h = ops::relu(ops::matmul(input, params.find("w1").value));
        Tensor out = ops::add_rowvec(ops::matmul(h, params.find("w2").value), params.find("b2").value);
        return ops::mean_all(ops::mul(out, out)).value();
    };

    auto res = testing::grad_check(params, eval);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("composed primitive graph matches finite differences") {
    // Touches every op family the models use: matmul, bias rows, layer norm,
    // attention, softmaxes, gathers, slices, sequence assembly, pick, outer.
    Rng rng(23);
    const int items = 2, T = 3, dim = 4;
    ParamSet params;
    params.add("wq", Tensor::randn({6, dim}, rng, 0.7));
    params.add("wr", Tensor::randn({dim}, rng, 0.7));
    params.add("qkv", Tensor::randn({dim, 3 * dim}, rng, 0.5));
    params.add("g", Tensor::full({dim}, 1.0));
    params.add("b", Tensor::randn({dim}, rng, 0.3));
    params.add("pos", Tensor::randn({T, dim}, rng, 0.4));
    params.add("head", Tensor::randn({dim, 5}, rng, 0.6));

    std::vector<int32_t> gidx = {1, 4, 0, 2, 5, 3};  // items*T rows
    std::vector<double> coeffs = {0.5, -1.0, 0.25, 2.0, 0.0, 1.5};
    std::vector<int32_t> picks = {0, 3, 1, 4, 2, 2};

    auto eval = [&](Tape* tape, bool with_grad) -> double {
        if (with_grad) {
            Var wq = tape->param(params.find("wq").value, &params.find("wq").grad);
            Var wr = tape->param(params.find("wr").value, &params.find("wr").grad);
            Var qkv = tape->param(params.find("qkv").value, &params.find("qkv").grad);
            Var g = tape->param(params.find("g").value, &params.find("g").grad);
            Var b = tape->param(params.find("b").value, &params.find("b").grad);
            Var pos = tape->param(params.find("pos").value, &params.find("pos").grad);
            Var head = tape->param(params.find("head").value, &params.find("head").grad);

            Var x = tape->add(tape->gather_rows(wq, gidx), tape->rows_outer(coeffs, wr));
            x = tape->add_rows_tiled(x, pos, T);
            Var ln = tape->layer_norm(x, g, b, 1e-5);
            Var att = tape->causal_attention(tape->matmul(ln, qkv), items, T, dim);
            x = tape->add(x, att);
            Var logits = tape->matmul(x, head);
            Var lp = tape->log_softmax_rows(logits);
            Var picked = tape->pick(lp, picks);
            Var sm = tape->softmax_rows(tape->slice_cols(logits, 1, 4));
            Var loss = tape->add(tape->scale(tape->mean_all(picked), -1.0),
                                 tape->mean_all(tape->mul(sm, sm)));
            tape->backward(loss);
            return tape->val(loss).value();
        }
        Tensor x = ops::add(ops::gather_rows(params.find("wq").value, gidx),
                            ops::rows_outer(coeffs, params.find("wr").value));
        x = ops::add_rows_tiled(x, params.find("pos").value, T);
        Tensor stats;
        Tensor ln = ops::layer_norm_rows(x, 1e-5, &stats);
        const Tensor& g = params.find("g").value;
        const Tensor& b = params.find("b").value;
        for (int64_t i = 0; i < ln.rows(); ++i) {
            for (int64_t j = 0; j < ln.cols(); ++j) {
                ln.at(i, j) = ln.at(i, j) * g.at(j) + b.at(j);
            }
        }
        Tensor att = ops::causal_attention(ops::matmul(ln, params.find("qkv").value), items, T,
                                           dim, nullptr);
        x = ops::add(x, att);
        Tensor logits = ops::matmul(x, params.find("head").value);
        Tensor lp = ops::log_softmax_rows(logits);
        Tensor picked = ops::pick(lp, picks);
        Tensor sm = ops::softmax_rows(ops::slice_cols(logits, 1, 4));
        return -ops::mean_all(picked).value() + ops::mean_all(ops::mul(sm, sm)).value();
    };

    auto res = testing::grad_check(params, eval);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("gru-style gate graph matches finite differences") {
    Rng rng(29);
    const int n = 3, hidden = 4, in = 5;
    ParamSet params;
    params.add("wx", Tensor::randn({in, 3 * hidden}, rng, 0.6));
    params.add("wh", Tensor::randn({hidden, 3 * hidden}, rng, 0.6));
    params.add("bx", Tensor::randn({3 * hidden}, rng, 0.3));
    params.add("bh", Tensor::randn({3 * hidden}, rng, 0.3));
    Tensor x0 = Tensor::randn({n, in}, rng);
    Tensor h0 = Tensor::randn({n, hidden}, rng, 0.5);

    auto gru_eager = [&]() {
        Tensor xp = ops::add_rowvec(ops::matmul(x0, params.find("wx").value), params.find("bx").value);
        Tensor hp = ops::add_rowvec(ops::matmul(h0, params.find("wh").value), params.find("bh").value);
        Tensor r = ops::sigmoid(ops::add(ops::slice_cols(xp, 0, hidden), ops::slice_cols(hp, 0, hidden)));
        Tensor z = ops::sigmoid(ops::add(ops::slice_cols(xp, hidden, 2 * hidden),
                                         ops::slice_cols(hp, hidden, 2 * hidden)));
        Tensor ncand = ops::tanh(ops::add(ops::slice_cols(xp, 2 * hidden, 3 * hidden),
                                          ops::mul(r, ops::slice_cols(hp, 2 * hidden, 3 * hidden))));
        Tensor h1 = ops::add(ncand, ops::mul(z, ops::sub(h0, ncand)));
        return ops::mean_all(ops::mul(h1, h1)).value();
    };

    auto eval = [&](Tape* tape, bool with_grad) -> double {
        if (!with_grad) return gru_eager();
        Var wx = tape->param(params.find("wx").value, &params.find("wx").grad);
        Var wh = tape->param(params.find("wh").value, &params.find("wh").grad);
        Var bx = tape->param(params.find("bx").value, &params.find("bx").grad);
        Var bh = tape->param(params.find("bh").value, &params.find("bh").grad);
        Var x = tape->constant(x0);
        Var h = tape->constant(h0);
        Var xp = tape->add_rowvec(tape->matmul(x, wx), bx);
        Var hp = tape->add_rowvec(tape->matmul(h, wh), bh);
        Var r = tape->sigmoid(tape->add(tape->slice_cols(xp, 0, hidden), tape->slice_cols(hp, 0, hidden)));
        Var z = tape->sigmoid(tape->add(tape->slice_cols(xp, hidden, 2 * hidden),
                                        tape->slice_cols(hp, hidden, 2 * hidden)));
        Var ncand = tape->tanh_(tape->add(tape->slice_cols(xp, 2 * hidden, 3 * hidden),
                                          tape->mul(r, tape->slice_cols(hp, 2 * hidden, 3 * hidden))));
        Var h1 = tape->add(ncand, tape->mul(z, tape->sub(h, ncand)));
        Var loss = tape->mean_all(tape->mul(h1, h1));
        tape->backward(loss);
        return tape->val(loss).value();
    };

    auto res = testing::grad_check(params, eval);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("adam clips by the global norm before updating") {
    ParamSet params;
    params.add("a", Tensor({3}, {0.0, 0.0, 0.0}));
    params.add("b", Tensor({1}, {0.0}));
    // Global norm 20 with clip 10: every gradient halves.
    params.find("a").grad = Tensor({3}, {12.0, 0.0, -16.0});
    params.find("b").grad = Tensor({1}, {0.0});
    OptimizerConfig cfg;
    cfg.grad_clip_norm = 10.0;
    cfg.learning_rate = 1.0;
    cfg.weight_decay = 0.0;
    Adam opt(cfg);
    auto info = opt.step(params);
    REQUIRE(info.grad_norm == Catch::Approx(20.0));
    REQUIRE(info.clipped);
    // First Adam step moves each coordinate by -lr * g/|g| regardless of
    // magnitude; zero-gradient coordinates stay put.
    REQUIRE(params.find("a").value.at(0) < 0.0);
    REQUIRE(params.find("a").value.at(1) == 0.0);
    REQUIRE(params.find("a").value.at(2) > 0.0);
    REQUIRE(params.find("b").value.at(0) == 0.0);

    // Post-clip norm respects the bound.
    double post = 0.0;
    for (double g : {12.0 * 0.5, -16.0 * 0.5}) post += g * g;
    REQUIRE(std::sqrt(post) <= cfg.grad_clip_norm + 1e-9);
}

TEST_CASE("adam with zero gradients and zero weight decay is a no-op") {
    ParamSet params;
    params.add("a", Tensor({4}, {1.0, -2.0, 3.0, 0.25}));
    params.zero_grads();
    OptimizerConfig cfg;
    cfg.weight_decay = 0.0;
    Adam opt(cfg);
    opt.step(params);
    REQUIRE(params.find("a").value == Tensor({4}, {1.0, -2.0, 3.0, 0.25}));
}

TEST_CASE("adam matches a hand-computed scalar recurrence for three steps") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.01;
    cfg.grad_clip_norm = 100.0;
    cfg.adam_beta1 = 0.9;
    cfg.adam_beta2 = 0.999;
    cfg.adam_eps = 1e-8;

    ParamSet params;
    params.add("p", Tensor({1}, {1.0}));
    Adam opt(cfg);
    const double grads[3] = {0.5, -0.25, 0.125};

    // Independent scalar reference of the same recurrence.
    double p = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const double g = grads[t - 1];
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g;
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g;
        const double mhat = m / (1 - std::pow(cfg.adam_beta1, t));
        const double vhat = v / (1 - std::pow(cfg.adam_beta2, t));
        p = (1.0 - cfg.learning_rate * cfg.weight_decay) * p -
            cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);

        params.find("p").grad = Tensor({1}, {g});
        opt.step(params);
        REQUIRE(params.find("p").value.at(0) == Catch::Approx(p).epsilon(1e-14));
    }
}

TEST_CASE("adam rejects mismatched grad shape") {
    ParamSet params;
    params.add("a", Tensor({3}));
    params.find("a").grad = Tensor({2});
    Adam opt(OptimizerConfig{});
    REQUIRE_THROWS_AS(opt.step(params), TensorError);
}

TEST_CASE("optimizer trajectories are deterministic") {
    auto run = [] {
        Rng rng(99);
        ParamSet params;
        params.add("w", Tensor::randn({8, 8}, rng, 0.1));
        Adam opt(OptimizerConfig{});
        Tensor input = Tensor::randn({4, 8}, rng);
        for (int step = 0; step < 20; ++step) {
            params.zero_grads();
            Tape tape;
            Var w = tape.param(params.find("w").value, &params.find("w").grad);
            Var out = tape.matmul(tape.constant(input), w);
            tape.backward(tape.mean_all(tape.mul(out, out)));
            opt.step(params);
        }
        return params.checksum();
    };
    REQUIRE(run() == run());
}

TEST_CASE("rng streams are independent and reproducible") {
    Rng a = Rng::fan(42, Stream::batch, 7);
    Rng b = Rng::fan(42, Stream::batch, 7);
    Rng c = Rng::fan(42, Stream::batch, 8);
    bool diverged = false;
    for (int i = 0; i < 64; ++i) {
        const uint64_t x = a.next_u64();
        REQUIRE(x == b.next_u64());
        if (x != c.next_u64()) diverged = true;
    }
    REQUIRE(diverged);
}

TEST_CASE("uniform_int stays in range and covers values") {
    Rng rng(1234);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const int v = rng.uniform_int(7);
        REQUIRE(v >= 0);
        REQUIRE(v < 7);
        counts[static_cast<size_t>(v)] += 1;
    }
    for (int c : counts) REQUIRE(c > 700);
}
