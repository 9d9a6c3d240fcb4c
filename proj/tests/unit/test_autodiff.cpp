#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fgd/autodiff.hpp"
#include "fgd/optim.hpp"
#include "fgd/rng.hpp"

using namespace fgd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
    return t;
}

// values kept away from 0 so relu kinks do not sit inside the difference stencil
Tensor away_from_zero(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.2 + rng.uniform());
    return t;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
    Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(t.shape(), (Shape{2, 3}));
    EXPECT_EQ(t.at(1, 2), 6.0);
    EXPECT_EQ(t.reshaped({3, 2}).at(2, 0), 5.0);
    EXPECT_THROW(t.reshaped({4}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
    EXPECT_THROW(t.item(), ShapeError);
}

TEST(AutodiffForward, MatmulByHand) {
    Graph g;
    const Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
    const Var b = g.constant(Tensor::matrix({{1}, {1}}));
    EXPECT_EQ(g.value(g.matmul(a, b)), Tensor::matrix({{3}, {7}}));
}

TEST(AutodiffForward, SoftmaxOfEqualLogitsIsUniform) {
    Graph g;
    const Tensor& s = g.value(g.softmax_rows(g.constant(Tensor::matrix({{0, 0, 0}}))));
    for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(AutodiffForward, BceAtHalfIsLn2) {
    Graph g;
    const Var p = g.sigmoid(g.constant(Tensor::matrix({{0.0}})));
    EXPECT_NEAR(g.value(g.bce(p, Tensor::vector({1.0}))).item(), std::numbers::ln2, 1e-15);
    EXPECT_NEAR(g.value(g.bce_with_logits(g.constant(Tensor::matrix({{0.0}})), Tensor::vector({1.0}))).item(),
                std::numbers::ln2, 1e-15);
}

TEST(AutodiffForward, ShapeErrorNamesOpAndShapes) {
    Graph g;
    const Var a = g.constant(Tensor({2, 3}));
    const Var b = g.constant(Tensor({2, 3}));
    try {
        g.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    }
    EXPECT_THROW(g.add(a, g.constant(Tensor({3, 2}))), ShapeError);
}

TEST(AutodiffForward, SoftmaxRowsSumToOne) {
    Rng rng(7);
    Graph g;
    const Tensor& s = g.value(g.softmax_rows(g.constant(random_tensor({50, 7}, rng, 30.0))));
    for (std::size_t r = 0; r < 50; ++r) {
        double total = 0.0;
        for (double v : s.row(r)) {
            EXPECT_GE(v, 0.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(AutodiffBackward, SquareAtThree) {
    Parameter x("x", Tensor::vector({3.0}));
    Graph g;
    const Var v = g.parameter(x);
    const Var loss = g.sum(g.mul(v, v));
    g.backward(loss);
    EXPECT_DOUBLE_EQ(g.grad(v)[0], 6.0);
}

TEST(AutodiffBackward, SigmoidSlopeAtZero) {
    Parameter x("x", Tensor::vector({0.0}));
    Graph g;
    const Var v = g.parameter(x);
    g.backward(g.sum(g.sigmoid(v)));
    EXPECT_DOUBLE_EQ(g.grad(v)[0], 0.25);
}

TEST(AutodiffBackward, AccumulateBeforeBackwardThrows) {
    Parameter x("x", Tensor::vector({1.0}));
    Graph g;
    g.parameter(x);
    EXPECT_THROW(g.accumulate_gradients(), AutodiffError);
}

TEST(AutodiffBackward, NonScalarTargetThrows) {
    Parameter x("x", Tensor::vector({1.0, 2.0}));
    Graph g;
    const Var v = g.parameter(x);
    EXPECT_THROW(g.backward(v), AutodiffError);
}

TEST(AutodiffBackward, ConstantsReceiveNoGradient) {
    Parameter w("w", Tensor::matrix({{2.0}}));
    Graph g;
    const Var c = g.constant(Tensor::matrix({{5.0}}));
    const Var pw = g.parameter(w);
    g.backward(g.sum(g.matmul(c, pw)));
    EXPECT_EQ(g.grad(c)[0], 0.0);
    EXPECT_EQ(g.grad(pw)[0], 5.0);
}

TEST(AutodiffBackward, GradientsAccumulateIntoParameters) {
    Parameter x("x", Tensor::vector({3.0}));
    for (int i = 0; i < 2; ++i) {
        Graph g;
        const Var v = g.parameter(x);
        g.backward(g.sum(g.mul(v, v)));
        g.accumulate_gradients();
    }
    EXPECT_DOUBLE_EQ(x.grad[0], 12.0);
}

TEST(AutodiffBackward, BackwardOfSumEqualsSumOfBackwards) {
    Rng rng(3);
    Parameter w("w", random_tensor({4, 3}, rng));
    const Tensor x = random_tensor({5, 4}, rng);
    auto f1 = [&](Graph& g, Var pw) { return g.sum(g.sigmoid(g.matmul(g.constant(x), pw))); };
    auto f2 = [&](Graph& g, Var pw) { return g.mean(g.mul(pw, pw)); };

    Graph both;
    const Var pb = both.parameter(w);
    both.backward(both.add(f1(both, pb), f2(both, pb)));
    Graph a;
    const Var pa = a.parameter(w);
    a.backward(f1(a, pa));
    Graph b;
    const Var pbb = b.parameter(w);
    b.backward(f2(b, pbb));
    const Tensor gsum = both.grad(pb);
    for (std::size_t i = 0; i < gsum.size(); ++i) EXPECT_NEAR(gsum[i], a.grad(pa)[i] + b.grad(pbb)[i], 1e-10);
}

TEST(Gradcheck, RejectsNonPositiveEpsilon) {
    Parameter x("x", Tensor::vector({1.0}));
    Parameter* ps[] = {&x};
    auto f = [&](Graph& g) { return g.sum(g.parameter(x)); };
    EXPECT_THROW(gradcheck(f, ps, 0.0), std::invalid_argument);
}

TEST(Gradcheck, RejectsNonFiniteLoss) {
    Parameter x("x", Tensor::vector({1.0}));
    Parameter* ps[] = {&x};
    auto f = [&](Graph& g) { return g.scale(g.sum(g.parameter(x)), std::numeric_limits<double>::infinity()); };
    EXPECT_THROW(gradcheck(f, ps, 1e-5), std::exception);
}

TEST(Gradcheck, LinearLayer) {
    Rng rng(11);
    Parameter w("w", random_tensor({4, 3}, rng));
    Parameter b("b", random_tensor({3}, rng));
    const Tensor x = random_tensor({6, 4}, rng);
    Parameter* ps[] = {&w, &b};
    auto f = [&](Graph& g) { return g.sum(g.add_row(g.matmul(g.constant(x), g.parameter(w)), g.parameter(b))); };
    EXPECT_LT(gradcheck(f, ps, 1e-5), 1e-6);
}

TEST(Gradcheck, ThreeLayerMlp) {
    Rng rng(12);
    Parameter w1("w1", random_tensor({5, 8}, rng)), b1("b1", random_tensor({8}, rng));
    Parameter w2("w2", random_tensor({8, 8}, rng)), b2("b2", random_tensor({8}, rng));
    Parameter w3("w3", random_tensor({8, 1}, rng)), b3("b3", random_tensor({1}, rng));
    const Tensor x = random_tensor({10, 5}, rng);
    Tensor y({10});
    for (std::size_t i = 0; i < 10; ++i) y[i] = i % 2;
    Parameter* ps[] = {&w1, &b1, &w2, &b2, &w3, &b3};
    auto f = [&](Graph& g) {
        Var h = g.relu(g.add_row(g.matmul(g.constant(x), g.parameter(w1)), g.parameter(b1)));
        h = g.relu(g.add_row(g.matmul(h, g.parameter(w2)), g.parameter(b2)));
        return g.bce_with_logits(g.add_row(g.matmul(h, g.parameter(w3)), g.parameter(b3)), y);
    };
    EXPECT_LT(gradcheck(f, ps, 1e-5), 1e-4);
}

TEST(Gradcheck, AttentionBlock) {
    Rng rng(13);
    const std::size_t samples = 3, steps = 4, d = 6;
    Parameter wq("wq", random_tensor({d, d}, rng)), wk("wk", random_tensor({d, d}, rng)),
        wv("wv", random_tensor({d, d}, rng));
    const Tensor x = random_tensor({samples * steps, d}, rng);
    const Tensor target = random_tensor({samples * steps, d}, rng);
    Parameter* ps[] = {&wq, &wk, &wv};
    auto f = [&](Graph& g) {
        const Var xv = g.constant(x);
        const Var a = g.attention(g.matmul(xv, g.parameter(wq)), g.matmul(xv, g.parameter(wk)),
                                  g.matmul(xv, g.parameter(wv)), steps, 2);
        return g.sum(g.mul(a, g.constant(target)));
    };
    EXPECT_LT(gradcheck(f, ps, 1e-5), 1e-4);
}

// Every differentiable op against central differences on randomized inputs.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
    const int op = GetParam();
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng = Rng::derive(100 + op, trial);
        Parameter a("a", away_from_zero({3, 4}, rng));
        Parameter b("b", away_from_zero({3, 4}, rng));
        Parameter c("c", away_from_zero({4, 2}, rng));
        Parameter r("r", away_from_zero({4}, rng));
        Parameter col("col", away_from_zero({3, 1}, rng));
        Parameter s("s", Tensor::scalar(1.5 + rng.uniform()));
        const Tensor weights = random_tensor({3, 4}, rng);
        Tensor targets({3});
        for (std::size_t i = 0; i < 3; ++i) targets[i] = static_cast<double>(i % 2);
        std::vector<Parameter*> ps = {&a, &b, &c, &r, &col, &s};
        auto f = [&](Graph& g) -> Var {
            const Var va = g.parameter(a), vb = g.parameter(b), vc = g.parameter(c), vr = g.parameter(r),
                      vcol = g.parameter(col), vs = g.parameter(s);
            const Var w = g.constant(weights);
            auto dot = [&](Var v) { return g.sum(g.mul(v, w)); };
            switch (op) {
            case 0: return g.sum(g.matmul(va, vc));
            case 1: return dot(g.add(va, vb));
            case 2: return dot(g.sub(va, vb));
            case 3: return dot(g.mul(va, vb));
            case 4: return dot(g.div(va, vs));
            case 5: return dot(g.scale(va, -2.5));
            case 6: return dot(g.add_row(va, vr));
            case 7: return dot(g.mul_col(va, vcol));
            case 8: return dot(g.relu(va));
            case 9: return dot(g.sigmoid(va));
            case 10: return dot(g.softmax_rows(va));
            case 11: return g.mean(g.mul(va, vb));
            case 12: return g.l2norm(va);
            case 13: return g.sum(g.mul(g.mean_pool(g.concat_cols(std::vector<Var>{va, vb}), 3),
                                        g.constant(Tensor({1, 8}, 0.7))));
            case 14: {
                const Var parts[] = {va, vr};
                return g.sum(g.mul(g.concat(parts), g.constant(Tensor({16}, 0.3))));
            }
            case 15: return dot(g.concat_cols(std::vector<Var>{g.slice_cols(va, 0, 2), g.slice_cols(vb, 2, 4)}));
            case 16: return g.sum(g.mul(g.slice_rows(va, 1, 3), g.slice_rows(vb, 0, 2)));
            case 17: return g.sum(g.mul(g.reshape(va, {4, 3}), g.reshape(vb, {4, 3})));
            case 18: return g.bce(g.sigmoid(vcol), targets);
            default: return g.bce_with_logits(vcol, targets);
            }
        };
        worst = std::max(worst, gradcheck(f, ps, 1e-5));
    }
    EXPECT_LT(worst, 1e-4) << "op " << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 20));

TEST(AutodiffBackward, DetachBlocksGradient) {
    Parameter a("a", Tensor::vector({2.0}));
    Parameter b("b", Tensor::vector({3.0}));
    Graph g;
    const Var va = g.parameter(a);
    const Var vb = g.parameter(b);
    g.backward(g.sum(g.mul(g.detach(va), vb)));
    EXPECT_EQ(g.grad(va)[0], 0.0);
    EXPECT_EQ(g.grad(vb)[0], 2.0);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Parameter p("p", Tensor::vector({1.0, -2.0}));
    Parameter* ps[] = {&p};
    AdamState st = make_adam_state(ps);
    adam_step(ps, st, {});
    EXPECT_EQ(p.value, Tensor::vector({1.0, -2.0}));
    EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
    Parameter p("p", Tensor::vector({1.0, 1.0}));
    p.grad = Tensor::vector({3.0, -0.01});
    Parameter* ps[] = {&p};
    AdamState st = make_adam_state(ps);
    AdamOptions o;
    o.lr = 0.1;
    adam_step(ps, st, o);
    EXPECT_NEAR(p.value[0], 0.9, 1e-6);
    EXPECT_NEAR(p.value[1], 1.1, 1e-5);
}

TEST(Adam, MinimizesSquare) {
    Parameter p("x", Tensor::vector({1.0}));
    Parameter* ps[] = {&p};
    AdamState st = make_adam_state(ps);
    AdamOptions o;
    o.lr = 0.1;
    std::vector<double> trace;
    for (int i = 0; i < 200; ++i) {
        p.zero_grad();
        Graph g;
        const Var v = g.parameter(p);
        g.backward(g.sum(g.mul(v, v)));
        g.accumulate_gradients();
        adam_step(ps, st, o);
        trace.push_back(std::abs(p.value[0]));
    }
    EXPECT_LT(trace.back(), 0.05);
    // |x| shrinks over successive windows of 20 steps
    for (std::size_t w = 0; w + 40 <= 80; w += 20) {
        double a = 0, b = 0;
        for (std::size_t i = 0; i < 20; ++i) a += trace[w + i], b += trace[w + 20 + i];
        EXPECT_LT(b, a);
    }
}

TEST(Adam, ShapeMismatchThrows) {
    Parameter p("p", Tensor::vector({1.0}));
    Parameter* ps[] = {&p};
    AdamState st = make_adam_state(ps);
    st.m[0] = Tensor({2});
    EXPECT_THROW(adam_step(ps, st, {}), ShapeError);
}
