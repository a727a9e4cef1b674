#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ogpo/autodiff.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/optim.hpp"
#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

using namespace ogpo;

TEST_CASE("Tensor shape and data invariants") {
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    REQUIRE_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    Tensor bad = Tensor::vector({1.0, std::nan("")});
    REQUIRE_THROWS_AS(bad.assert_finite("test"), NonFiniteError);
}

TEST_CASE("mlp_forward basics") {
    Rng rng(1);
    SECTION("zero-weight net maps anything to zero") {
        Mlp net({3, 4, 2}, Activation::Tanh, rng);
        net.zero_params();
        Tensor y = mlp_forward(net, Tensor::vector({0.3, -2.0, 5.0}));
        REQUIRE(y.size() == 2);
        REQUIRE(y[0] == 0.0);
        REQUIRE(y[1] == 0.0);
    }
    SECTION("1x1 affine: w=2, b=1, x=3 -> 7") {
        Mlp net({1, 1}, Activation::Tanh, rng);
        net.weight(0)[0] = 2.0;
        net.bias(0)[0] = 1.0;
        REQUIRE(mlp_forward(net, Tensor::vector({3.0}))[0] == 7.0);
    }
    SECTION("4-8-2 output shape") {
        Mlp net({4, 8, 2}, Activation::Tanh, rng);
        Tensor y = net.forward(Tensor::vector({0.1, 0.2, 0.3, 0.4}));
        REQUIRE(y.shape() == std::vector<std::size_t>{2});
        REQUIRE(net.parameter_count() == 4 * 8 + 8 + 8 * 2 + 2);
    }
    SECTION("shape mismatch and non-finite input rejected") {
        Mlp net({3, 2}, Activation::Tanh, rng);
        REQUIRE_THROWS_AS(net.forward(Tensor::vector({1.0, 2.0})), std::invalid_argument);
        REQUIRE_THROWS_AS(net.forward(Tensor::vector({1.0, 2.0, std::nan("")})), NonFiniteError);
    }
    SECTION("forward is deterministic and pure") {
        Mlp net({3, 8, 2}, Activation::Gelu, rng);
        Tensor x = Tensor::vector({0.5, -0.2, 1.5});
        Tensor y1 = net.forward(x);
        Tensor y2 = net.forward(x);
        REQUIRE(y1.raw() == y2.raw());
    }
    SECTION("batched forward equals per-row forward") {
        Mlp net({3, 8, 2}, Activation::Relu, rng);
        Tensor batch({2, 3}, {0.1, 0.2, 0.3, -0.5, 0.4, 0.9});
        Tensor yb = net.forward(batch);
        Tensor y0 = net.forward(Tensor::vector({0.1, 0.2, 0.3}));
        Tensor y1 = net.forward(Tensor::vector({-0.5, 0.4, 0.9}));
        REQUIRE(yb.at(0, 0) == y0[0]);
        REQUIRE(yb.at(0, 1) == y0[1]);
        REQUIRE(yb.at(1, 0) == y1[0]);
        REQUIRE(yb.at(1, 1) == y1[1]);
    }
}

TEST_CASE("tape_backward simple identities") {
    SECTION("loss = w*x, x=3 -> dloss/dw = 3") {
        Tensor w = Tensor::scalar(0.7);
        Tape tape;
        Tape::Ref loss = tape.mul(tape.param(w), tape.constant_scalar(3.0));
        tape.backward(loss);
        REQUIRE(tape.grad_of(w)[0] == 3.0);
    }
    SECTION("loss = tanh(w*x), w=0 -> dloss/dw = x") {
        Tensor w = Tensor::scalar(0.0);
        Tape tape;
        Tape::Ref loss = tape.tanh_op(tape.mul(tape.param(w), tape.constant_scalar(1.7)));
        tape.backward(loss);
        REQUIRE(tape.grad_of(w)[0] == Catch::Approx(1.7).epsilon(1e-12));
    }
    SECTION("backward twice is an error; non-scalar root is an error") {
        Tensor w = Tensor::scalar(1.0);
        Tape tape;
        Tape::Ref loss = tape.square(tape.param(w));
        tape.backward(loss);
        REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);
        Tape tape2;
        Tape::Ref vec = tape2.param(w);
        Tape::Ref big = tape2.concat_cols({vec, vec});
        REQUIRE_THROWS_AS(tape2.backward(big), std::logic_error);
    }
    SECTION("gradients of parameters off the loss path are zero") {
        Tensor w = Tensor::scalar(2.0);
        Tensor unused = Tensor::scalar(5.0);
        Tape tape;
        Tape::Ref loss = tape.square(tape.param(w));
        tape.param(unused);  // touched by the forward pass, not by the loss
        tape.backward(loss);
        REQUIRE(tape.grad_of(unused)[0] == 0.0);
        REQUIRE(tape.grad_of(w)[0] == 4.0);
    }
}

TEST_CASE("finite_diff_grad basics") {
    SECTION("f(w) = w^2 at w=3 -> 6") {
        Tensor w = Tensor::scalar(3.0);
        auto g = finite_diff_grad([&]() { return w[0] * w[0]; }, {&w}, 1e-5);
        REQUIRE(g[0][0] == Catch::Approx(6.0).margin(1e-8));
    }
    SECTION("constant f -> zero vector") {
        Tensor w = Tensor::vector({1.0, 2.0, 3.0});
        auto g = finite_diff_grad([]() { return 4.2; }, {&w}, 1e-5);
        for (std::size_t i = 0; i < 3; ++i) REQUIRE(g[0][i] == 0.0);
    }
    SECTION("eps must be positive") {
        Tensor w = Tensor::scalar(1.0);
        REQUIRE_THROWS_AS(finite_diff_grad([]() { return 0.0; }, {&w}, 0.0),
                          std::invalid_argument);
    }
}

namespace {

double rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double na = 0, nb = 0, nd = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            na += a[i][j] * a[i][j];
            nb += b[i][j] * b[i][j];
            nd += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
        }
    }
    return std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

}  // namespace

TEST_CASE("tape gradients match central differences on random MLP losses") {
    // loss = mean((net(x) - y)^2) for each activation, 10 random points
    for (Activation act : {Activation::Tanh, Activation::Relu, Activation::Gelu}) {
        for (int pt = 0; pt < 10; ++pt) {
            Rng rng(mix64(100 + static_cast<std::uint64_t>(act), pt));
            Mlp net({4, 8, 8, 3}, act, rng);
            Tensor x({5, 4});
            Tensor y({5, 3});
            for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.normal();

            auto loss_value = [&]() {
                Tape tape;
                Tape::Ref out = net.forward(tape, tape.constant(x));
                Tape::Ref loss = tape.mean(tape.square(tape.sub(out, tape.constant(y))));
                return tape.scalar_value(loss);
            };
            Tape tape;
            Tape::Ref out = net.forward(tape, tape.constant(x));
            Tape::Ref loss = tape.mean(tape.square(tape.sub(out, tape.constant(y))));
            tape.backward(loss);
            std::vector<Tensor> tg;
            std::vector<Tensor*> ps;
            for (auto& p : net.params()) {
                ps.push_back(&p);
                tg.push_back(tape.grad_of(p));
            }
            auto fd = finite_diff_grad(loss_value, ps, 1e-5);
            REQUIRE(rel_err(tg, fd) < 1e-4);
        }
    }
}

TEST_CASE("tape ops used by the losses differentiate correctly") {
    // composite: sum(min(exp(a.*w), clamp(exp(a.*w), 0.9, 1.1)) .* c) + |.|
    Rng rng(42);
    Tensor w({6});
    for (std::size_t i = 0; i < 6; ++i) w[i] = rng.normal(0.0, 0.1);
    Tensor a({6}), c({6});
    for (std::size_t i = 0; i < 6; ++i) {
        a[i] = rng.normal();
        c[i] = rng.normal();
    }
    auto loss_value = [&](std::vector<Tensor>* grads) {
        Tape tape;
        Tape::Ref wp = tape.param(w);
        Tape::Ref prod = tape.mul(wp, tape.constant(a));
        Tape::Ref e = tape.exp_op(prod);
        Tape::Ref m = tape.min_elem(e, tape.clamp(e, 0.9, 1.1));
        Tape::Ref weighted = tape.mul(m, tape.constant(c));
        Tape::Ref loss = tape.add(tape.sum(weighted),
                                  tape.sum(tape.abs_op(tape.group_mean(wp, 2))));
        const double v = tape.scalar_value(loss);
        if (grads != nullptr) {
            tape.backward(loss);
            grads->push_back(tape.grad_of(w));
        }
        return v;
    };
    std::vector<Tensor> tg;
    loss_value(&tg);
    auto fd = finite_diff_grad([&]() { return loss_value(nullptr); }, {&w}, 1e-5);
    REQUIRE(rel_err(tg, fd) < 1e-4);
}

TEST_CASE("adam_update")  {
    SECTION("zero gradient leaves params unchanged, bumps step") {
        Tensor p = Tensor::vector({1.0, -2.0});
        OptimState st = OptimState::for_params({p});
        adam_update({&p}, {Tensor({2})}, st, 0.1);
        REQUIRE(p[0] == 1.0);
        REQUIRE(p[1] == -2.0);
        REQUIRE(st.step == 1);
    }
    SECTION("first-step identity: g=1 -> delta ~ -lr") {
        Tensor p = Tensor::scalar(0.0);
        OptimState st = OptimState::for_params({p});
        Tensor g = Tensor::scalar(1.0);
        adam_update({&p}, {g}, st, 0.1);
        REQUIRE(p[0] == Catch::Approx(-0.1).epsilon(1e-6));
    }
    SECTION("purity: identical inputs give identical results") {
        Tensor p1 = Tensor::vector({0.5, 0.5}), p2 = Tensor::vector({0.5, 0.5});
        OptimState s1 = OptimState::for_params({p1});
        OptimState s2 = OptimState::for_params({p2});
        Tensor g = Tensor::vector({0.3, -0.7});
        adam_update({&p1}, {g}, s1, 0.01);
        adam_update({&p2}, {g}, s2, 0.01);
        REQUIRE(p1.raw() == p2.raw());
    }
    SECTION("lr must be positive") {
        Tensor p = Tensor::scalar(0.0);
        OptimState st = OptimState::for_params({p});
        REQUIRE_THROWS_AS(adam_update({&p}, {Tensor::scalar(1.0)}, st, 0.0),
                          std::invalid_argument);
    }
    SECTION("decoupled weight decay shrinks params") {
        Tensor p = Tensor::scalar(1.0);
        OptimState st = OptimState::for_params({p});
        st.weight_decay = 0.1;
        adam_update({&p}, {Tensor::scalar(0.0)}, st, 0.1);
        REQUIRE(p[0] == Catch::Approx(1.0 - 0.1 * 0.1 * 1.0));
    }
}

TEST_CASE("lr_at schedule") {
    OptimState st;
    st.scheduler = Scheduler::CosineWithWarmup;
    st.warmup_steps = 2000;
    st.decay_steps = 50000;
    st.end_value = 2e-5;
    const double base = 4.5e-5;
    REQUIRE(lr_at(0, st, base) == 0.0);
    REQUIRE(lr_at(2000, st, base) == base);
    REQUIRE(lr_at(2000 + 50000, st, base) == 2e-5);
    REQUIRE(lr_at(1000, st, base) == Catch::Approx(base / 2));
    // halfway through decay the cosine sits at the midpoint
    REQUIRE(lr_at(2000 + 25000, st, base) == Catch::Approx(2e-5 + (base - 2e-5) * 0.5));
    // beyond the decay horizon it stays at the end value
    REQUIRE(lr_at(2000 + 50000 + 12345, st, base) == 2e-5);
    OptimState flat;
    REQUIRE(lr_at(123456, flat, 0.3) == 0.3);
    REQUIRE_THROWS_AS(lr_at(-1, st, base), std::invalid_argument);
}

TEST_CASE("ema_update arithmetic") {
    std::vector<Tensor> dst = {Tensor::scalar(0.0)};
    std::vector<Tensor> src = {Tensor::scalar(1.0)};
    ema_update(dst, src, 0.05);
    REQUIRE(dst[0][0] == Catch::Approx(0.05));
    ema_update(dst, src, 1.0);
    REQUIRE(dst[0][0] == 1.0);
    std::vector<Tensor> frozen = {Tensor::scalar(0.25)};
    ema_update(frozen, src, 0.0);
    REQUIRE(frozen[0][0] == 0.25);
}

TEST_CASE("rng determinism and stream splitting") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng s1 = a.stream(1), s2 = a.stream(2);
    REQUIRE(s1.next_u64() != s2.next_u64());
    // normals have roughly unit variance
    Rng n(3);
    double sum = 0, sumsq = 0;
    const int N = 20000;
    for (int i = 0; i < N; ++i) {
        const double x = n.normal();
        sum += x;
        sumsq += x * x;
    }
    REQUIRE(std::fabs(sum / N) < 0.05);
    REQUIRE(std::fabs(sumsq / N - 1.0) < 0.05);
}
