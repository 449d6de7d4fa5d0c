#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hsq/tensor.hpp"
#include "testutil.hpp"

using namespace hsq;
using test::TestParam;

TEST_CASE("matmul identity and selector") {
    Graph g;
    auto I = g.input(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    auto A = g.input(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    auto P = g.matmul(I, A);
    CHECK(g.value(P).data == std::vector<float>{1, 2, 3, 4});

    auto sel = g.input(Tensor::matrix(1, 2, {1, 0}));
    auto col = g.input(Tensor::matrix(2, 1, {5, 7}));
    auto r = g.matmul(sel, col);
    CHECK(g.value(r).shape == std::vector<int>{1, 1});
    CHECK(g.value(r).data[0] == doctest::Approx(5));
}

TEST_CASE("matmul matches triple-loop oracle on random shapes") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = rng.uniform_int(1, 8), k = rng.uniform_int(1, 8), n = rng.uniform_int(1, 8);
        auto a = test::random_tensor<float>(rng, {m, k});
        auto b = test::random_tensor<float>(rng, {k, n});
        Graph g;
        auto got = g.value(g.matmul(g.input(a), g.input(b)));
        auto want = test::matmul_oracle(a, b);
        for (int64_t i = 0; i < got.numel(); ++i)
            CHECK(test::rel_err(got.data[i], want.data[i]) < 1e-5);
    }
}

TEST_CASE("matmul rank-1 promotion") {
    Graph g;
    auto v = g.input(Tensor::vector({1, 2}));
    auto M = g.input(Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0}));
    auto r = g.matmul(v, M);
    CHECK(g.value(r).shape == std::vector<int>{3});
    CHECK(g.value(r).data == std::vector<float>{1, 2, 0});

    auto w = g.input(Tensor::vector({1, 1, 1}));
    auto s = g.matmul(M, w);
    CHECK(g.value(s).shape == std::vector<int>{2});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Graph g;
    auto a = g.input(Tensor::zeros({2, 3}));
    auto b = g.input(Tensor::zeros({4, 2}));
    try {
        g.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax closed forms") {
    Graph g;
    auto u = g.softmax(g.input(Tensor::vector({0, 0, 0, 0})));
    for (float v : g.value(u).data) CHECK(v == doctest::Approx(0.25));

    auto two = g.softmax(g.input(Tensor::vector({0.0f, std::log(3.0f)})));
    CHECK(g.value(two).data[0] == doctest::Approx(0.25));
    CHECK(g.value(two).data[1] == doctest::Approx(0.75));

    auto big = g.softmax(g.input(Tensor::vector({1000, 1000})));
    CHECK(g.value(big).data[0] == doctest::Approx(0.5));
    CHECK(g.value(big).data[1] == doctest::Approx(0.5));
    CHECK(g.value(big).all_finite());
}

TEST_CASE("softmax rows sum to one on random input") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const int rows = rng.uniform_int(1, 6), cols = rng.uniform_int(1, 9);
        auto x = test::random_tensor<float>(rng, {rows, cols}, -30, 30);
        Graph g;
        const auto& y = g.value(g.softmax(g.input(x)));
        for (int i = 0; i < rows; ++i) {
            double s = 0;
            for (int j = 0; j < cols; ++j) {
                CHECK(y.at(i, j) >= 0.0f);
                s += y.at(i, j);
            }
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("softmax gives exactly zero weight to -inf entries") {
    Graph g;
    const float ninf = -std::numeric_limits<float>::infinity();
    auto y = g.value(g.softmax(g.input(Tensor::vector({0.5f, ninf, 1.0f}))));
    CHECK(y.data[1] == 0.0f);
    CHECK(y.data[0] + y.data[2] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm closed forms and oracle") {
    Graph g;
    auto gain = g.input(Tensor::vector({1, 1, 1}));
    auto bias = g.input(Tensor::vector({0, 0, 0}));
    auto c = g.layer_norm(g.input(Tensor::vector({5, 5, 5})), gain, bias, 1e-5f);
    for (float v : g.value(c).data) CHECK(v == doctest::Approx(0).epsilon(1e-5));

    auto gain2 = g.input(Tensor::vector({1, 1}));
    auto bias2 = g.input(Tensor::vector({0, 0}));
    auto n2 = g.layer_norm(g.input(Tensor::vector({1, -1})), gain2, bias2, 1e-12f);
    CHECK(g.value(n2).data[0] == doctest::Approx(1).epsilon(1e-5));
    CHECK(g.value(n2).data[1] == doctest::Approx(-1).epsilon(1e-5));

    Rng rng(3);
    auto x = test::random_tensor<float>(rng, {4, 7}, -2, 2);
    auto gn = test::random_tensor<float>(rng, {7});
    auto bs = test::random_tensor<float>(rng, {7});
    Graph g2;
    const float eps = 1e-5f;
    const auto& y = g2.value(g2.layer_norm(g2.input(x), g2.input(gn), g2.input(bs), eps));
    for (int i = 0; i < 4; ++i) {
        float mean, var;
        test::mean_var_oracle(x.data.data() + i * 7, 7, &mean, &var);
        for (int j = 0; j < 7; ++j) {
            const float want = (x.at(i, j) - mean) / std::sqrt(var + eps) * gn.data[j] + bs.data[j];
            CHECK(y.at(i, j) == doctest::Approx(want).epsilon(1e-4));
        }
    }
}

TEST_CASE("layer_norm normalizes to mean 0 variance 1 before affine") {
    Rng rng(11);
    auto x = test::random_tensor<float>(rng, {3, 16}, -5, 5);
    Graph g;
    auto ones = g.input(Tensor::full({16}, 1));
    auto zeros = g.input(Tensor::zeros({16}));
    const auto& y = g.value(g.layer_norm(g.input(x), ones, zeros, 1e-7f));
    for (int i = 0; i < 3; ++i) {
        float mean, var;
        test::mean_var_oracle(y.data.data() + i * 16, 16, &mean, &var);
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(std::fabs(var - 1.0f) < 1e-4);
    }
}

TEST_CASE("cross_entropy closed forms") {
    Graph g;
    auto logits = g.input(Tensor::zeros({1, 4}));
    auto l = g.cross_entropy(logits, {2}, -1);
    CHECK(g.value(l).data[0] == doctest::Approx(std::log(4.0)));

    Tensor hot = Tensor::zeros({1, 4});
    hot.at(0, 1) = 1e4f;
    auto l2 = g.cross_entropy(g.input(hot), {1}, -1);
    CHECK(g.value(l2).data[0] == doctest::Approx(0).epsilon(1e-6));
}

TEST_CASE("cross_entropy all-ignored is zero with zero gradient") {
    Graph g;
    TestParam<float> w(Tensor::matrix(2, 3, {0.5f, -1, 2, 0, 1, -2}));
    auto l = g.cross_entropy(w.bind(g), {9, 9}, 9);
    CHECK(g.value(l).data[0] == 0.0f);
    g.backward(l);
    for (float v : w.grad.data) CHECK(v == 0.0f);
}

TEST_CASE("cross_entropy rejects out-of-range target") {
    Graph g;
    auto logits = g.input(Tensor::zeros({1, 4}));
    CHECK_THROWS_AS((void)g.cross_entropy(logits, {4}, -1), IndexError);
}

TEST_CASE("backward basics") {
    Graph g;
    TestParam<float> w(Tensor::vector({1, 2, 3}));
    auto l = g.sum(w.bind(g));
    g.backward(l);
    CHECK(w.grad.data == std::vector<float>{1, 1, 1});

    TestParam<float> w2(Tensor::vector({1, 2}));
    Graph g2;
    auto v = w2.bind(g2);
    auto l2 = g2.sum(v * v);
    g2.backward(l2);
    CHECK(w2.grad.data[0] == doctest::Approx(2));
    CHECK(w2.grad.data[1] == doctest::Approx(4));
}

TEST_CASE("backward twice accumulates exactly 2x") {
    Rng rng(5);
    TestParam<float> w(test::random_tensor<float>(rng, {3, 3}));
    Graph g;
    auto v = w.bind(g);
    auto y = g.sum(g.tanh_(g.matmul(v, v)));
    g.backward(y);
    const auto once = w.grad.data;
    g.backward(y);
    for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad.data[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE("backward rejects non-scalar loss") {
    Graph g;
    TestParam<float> w(Tensor::vector({1, 2}));
    auto v = w.bind(g);
    CHECK_THROWS_AS(g.backward(v), ContractError);
}

TEST_CASE("disconnected trainable leaf keeps zero grad allocated") {
    Graph g;
    TestParam<float> used(Tensor::vector({2}));
    TestParam<float> unused(Tensor::vector({3}));
    auto a = used.bind(g);
    (void)unused.bind(g);
    g.backward(g.sum(a));
    CHECK(unused.grad.data == std::vector<float>{0});
    CHECK(used.grad.data == std::vector<float>{1});
}

TEST_CASE("add broadcast over leading axis only") {
    Graph g;
    auto m = g.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    auto b = g.input(Tensor::vector({10, 20, 30}));
    auto y = g.add(m, b);
    CHECK(g.value(y).data == std::vector<float>{11, 22, 33, 14, 25, 36});

    auto bad = g.input(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(g.add(m, bad), ShapeError);
}

TEST_CASE("finite-difference check per primitive op") {
    Rng rng(1234);
    const auto run = [&](const char* name, auto&& build) {
        TestParam<double> a(test::random_tensor<double>(rng, {3, 4}, -0.8, 0.8));
        TestParam<double> b(test::random_tensor<double>(rng, {4, 3}, -0.8, 0.8));
        auto loss_of = [&] {
            GraphT<double> g;
            return g.value(build(g, g.param(a.value, a.grad), g.param(b.value, b.grad))).data[0];
        };
        auto backprop = [&] {
            GraphT<double> g;
            auto l = build(g, g.param(a.value, a.grad), g.param(b.value, b.grad));
            g.backward(l);
        };
        const double worst = test::grad_check({&a, &b}, loss_of, backprop);
        INFO(name);
        CHECK(worst < 1e-3);
    };

    run("matmul", [](GraphT<double>& g, VarT<double> a, VarT<double> b) { return g.sum(g.tanh_(g.matmul(a, b))); });
    run("mul+add", [](GraphT<double>& g, VarT<double> a, VarT<double> b) {
        return g.sum(g.add(g.mul(a, a), g.transpose(b)));
    });
    run("softmax", [](GraphT<double>& g, VarT<double> a, VarT<double>) {
        return g.sum(g.mul(g.softmax(a), a));
    });
    run("log_softmax", [](GraphT<double>& g, VarT<double> a, VarT<double>) {
        return g.sum(g.mul(g.log_softmax(a), g.sigmoid(a)));
    });
    run("relu-ish", [](GraphT<double>& g, VarT<double> a, VarT<double> b) {
        // shift away from the kink so finite differences stay valid
        auto s = g.add(g.relu(g.add(a, g.input(TensorT<double>::full({3, 4}, 0.05)))), a);
        return g.sum(g.tanh_(g.matmul(s, b)));
    });
    run("layer_norm", [](GraphT<double>& g, VarT<double> a, VarT<double> b) {
        auto bt = g.transpose(b);  // [3x4]
        auto gl = g.row(bt, 0);
        auto bl = g.row(bt, 1);
        return g.sum(g.mul(g.layer_norm(a, gl, bl, 1e-5), a));
    });
    run("cross_entropy", [](GraphT<double>& g, VarT<double> a, VarT<double>) {
        return g.cross_entropy(a, {1, 3, 9}, 9, 0.1);
    });
    run("slices+concat", [](GraphT<double>& g, VarT<double> a, VarT<double> b) {
        auto left = g.slice_cols(a, 0, 2);
        auto right = g.slice_cols(a, 2, 4);
        auto together = g.concat_cols({right, left});
        auto rows = g.concat_rows({g.row(together, 0), g.row(together, 2)});
        return g.sum(g.tanh_(g.matmul(rows, g.slice_rows(b, 0, 4))));
    });
    run("gather_rows", [](GraphT<double>& g, VarT<double> a, VarT<double> b) {
        auto rows = g.gather_rows(a, {0, 2, 2, 1});
        return g.sum(g.tanh_(g.matmul(rows, b)));
    });
}

TEST_CASE("scale and sub and neg gradients") {
    Rng rng(77);
    TestParam<double> a(test::random_tensor<double>(rng, {5}, -1, 1));
    auto loss_of = [&] {
        GraphT<double> g;
        auto v = g.param(a.value, a.grad);
        auto y = g.sub(g.scale(v, 3.0), g.neg(v));
        return g.value(g.sum(g.mul(y, y))).data[0];
    };
    auto back = [&] {
        GraphT<double> g;
        auto v = g.param(a.value, a.grad);
        auto y = g.sub(g.scale(v, 3.0), g.neg(v));
        g.backward(g.sum(g.mul(y, y)));
    };
    CHECK(test::grad_check({&a}, loss_of, back) < 1e-3);
}

TEST_CASE("dropout zero rate is identity and mask is consistent in backward") {
    Rng rng(9);
    Graph g;
    auto x = g.input(Tensor::vector({1, 2, 3}));
    auto y = g.dropout(x, 0.0f, rng);
    CHECK(g.value(y).data == std::vector<float>{1, 2, 3});

    TestParam<float> w(Tensor::full({1000}, 1));
    Graph g2;
    Rng drop_rng(123);
    auto v = w.bind(g2);
    auto d = g2.dropout(v, 0.5f, drop_rng);
    g2.backward(g2.sum(d));
    // grad equals the mask: entries are either 0 or 1/(1-rate)
    int kept = 0;
    for (float gv : w.grad.data) {
        CHECK((gv == 0.0f || gv == doctest::Approx(2.0f)));
        kept += gv != 0.0f;
    }
    CHECK(kept > 350);
    CHECK(kept < 650);
}
