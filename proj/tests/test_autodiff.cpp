#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "gpr/autodiff.hpp"
#include "gpr/checkpoint.hpp"
#include "gpr/common.hpp"

using namespace gpr;
using namespace gpr::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("tensor construction validates") {
    CHECK_THROWS(Tensor({2, 2}, {1.0, 2.0, 3.0}));
    CHECK_THROWS(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}));
    CHECK_THROWS(Tensor({2}, {std::nan(""), 0.0}));
    Tensor t({2, 3}, 0.5);
    CHECK(t.numel() == 6);
}

TEST_CASE("sigmoid(0) is 0.5") {
    Graph g;
    Var x = g.constant(Tensor::scalar(0.0));
    CHECK(g.scalar_value(sigmoid(x)) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("d/dx x*x at x=3 is 6") {
    Graph g;
    Tensor xt = Tensor::scalar(3.0);
    xt.requires_grad = true;
    Var x = g.leaf(xt);
    g.backward(mul(x, x));
    CHECK(g.grad_tensor(x).data[0] == doctest::Approx(6.0).epsilon(1e-15));
    CHECK(xt.grad[0] == doctest::Approx(6.0));  // sink populated
}

TEST_CASE("softmax of zeros is uniform") {
    Graph g;
    Var s = softmax(g.constant(Tensor({3}, {0.0, 0.0, 0.0})), 0);
    for (int i = 0; i < 3; ++i) CHECK(g.value(s)[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("grad of sum(W.x) wrt W broadcasts x") {
    Graph g;
    Tensor wt({2, 3}, {1, 2, 3, 4, 5, 6});
    wt.requires_grad = true;
    Var w = g.leaf(wt);
    Var x = g.constant(Tensor({3, 1}, {7, 8, 9}));
    g.backward(reduce_sum(matmul(w, x)));
    const Tensor gw = g.grad_tensor(w);
    for (int r = 0; r < 2; ++r) {
        CHECK(gw.at(r, 0) == doctest::Approx(7.0));
        CHECK(gw.at(r, 1) == doctest::Approx(8.0));
        CHECK(gw.at(r, 2) == doctest::Approx(9.0));
    }
}

TEST_CASE("constant output yields zero gradients") {
    Graph g;
    Tensor xt({4}, 1.5);
    xt.requires_grad = true;
    Var x = g.leaf(xt);
    (void)x;
    Var c = g.constant(3.0);
    g.backward(c);
    const Tensor gx = g.grad_tensor(x);
    for (const double v : gx.data) CHECK(v == 0.0);
}

TEST_CASE("backward requires scalar output") {
    Graph g;
    Tensor xt({3}, 1.0);
    xt.requires_grad = true;
    Var x = g.leaf(xt);
    CHECK_THROWS(g.backward(relu(x)));
}

TEST_CASE("shape mismatch raises descriptive error") {
    Graph g;
    Var a = g.constant(Tensor({2, 3}, 1.0));
    Var b = g.constant(Tensor({3, 3}, 1.0));
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("log and sqrt of negative input raise") {
    Graph g;
    Var neg = g.constant(Tensor({1}, {-0.5}));
    CHECK_THROWS_AS(ad::log(neg), std::domain_error);
    CHECK_THROWS_AS(ad::sqrt(neg), std::domain_error);
    Var zero = g.constant(Tensor({1}, {0.0}));
    CHECK_THROWS_AS(ad::log(zero), std::domain_error);
    CHECK(g.scalar_value(ad::sqrt(zero)) == 0.0);
}

TEST_CASE("random 2-layer network gradients match finite differences") {
    Rng rng(12345);
    Tensor w1 = random_tensor({4, 3}, rng);
    Tensor b1 = random_tensor({4, 1}, rng);
    Tensor w2 = random_tensor({1, 4}, rng);
    Tensor x = random_tensor({3, 1}, rng);
    GraphFn f = [&x](Graph& g, const std::vector<Var>& p) {
        Var h = relu(add(matmul(p[0], g.constant(x)), p[1]));
        return reduce_sum(sigmoid(matmul(p[2], h)));
    };
    const FdReport r = finite_diff_check(f, {w1, b1, w2}, 1e-5, 1e-4);
    CHECK(r.pass);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("finite_diff_check spec examples") {
    Rng rng(99);
    SUBCASE("sum of sigmoid passes") {
        Tensor x = random_tensor({6}, rng, -2.0, 2.0);
        GraphFn f = [](Graph&, const std::vector<Var>& p) { return reduce_sum(sigmoid(p[0])); };
        CHECK(finite_diff_check(f, {x}, 1e-5, 1e-4).pass);
    }
    SUBCASE("sum of relu away from the kink passes") {
        Tensor x({5}, {0.7, -0.9, 1.3, -2.0, 0.4});
        GraphFn f = [](Graph&, const std::vector<Var>& p) { return reduce_sum(relu(p[0])); };
        CHECK(finite_diff_check(f, {x}, 1e-5, 1e-4).pass);
    }
    SUBCASE("constant function passes with zero gradients") {
        Tensor x({3}, 1.0);
        GraphFn f = [](Graph& g, const std::vector<Var>& p) {
            (void)p;
            return g.constant(2.5);
        };
        const FdReport r = finite_diff_check(f, {x}, 1e-5, 1e-4);
        CHECK(r.pass);
        CHECK(r.max_rel_error == 0.0);
    }
}

// Spec invariant: every primitive matches central differences (eps=1e-5) to
// rel error < 1e-4 at 20 random probe points away from non-smooth kinks.
TEST_CASE("all primitives pass finite-difference probes") {
    struct ProbeCase {
        const char* name;
        GraphFn fn;
        std::vector<std::vector<int>> shapes;
        double lo, hi;
        bool positive_only = false;
    };
    auto sum1 = [](Var v) { return reduce_sum(v); };

    std::vector<ProbeCase> cases;
    cases.push_back({"add", [&](Graph&, const std::vector<Var>& p) { return sum1(add(p[0], p[1])); },
                     {{2, 3}, {2, 3}}, -2, 2});
    cases.push_back({"add scalar-broadcast",
                     [&](Graph&, const std::vector<Var>& p) { return sum1(add(p[0], p[1])); },
                     {{2, 3}, {1}}, -2, 2});
    cases.push_back({"sub", [&](Graph&, const std::vector<Var>& p) { return sum1(sub(p[0], p[1])); },
                     {{4}, {4}}, -2, 2});
    cases.push_back({"mul", [&](Graph&, const std::vector<Var>& p) {
                         return sum1(mul(p[0], p[1]));
                     },
                     {{3, 2}, {3, 2}}, -2, 2});
    cases.push_back({"div", [&](Graph&, const std::vector<Var>& p) { return sum1(div(p[0], p[1])); },
                     {{4}, {4}}, 0.5, 2.0});
    cases.push_back({"minimum",
                     [&](Graph&, const std::vector<Var>& p) { return sum1(minimum(p[0], p[1])); },
                     {{5}, {5}}, -2, 2});
    cases.push_back({"maximum",
                     [&](Graph&, const std::vector<Var>& p) { return sum1(maximum(p[0], p[1])); },
                     {{5}, {5}}, -2, 2});
    cases.push_back({"relu", [&](Graph&, const std::vector<Var>& p) { return sum1(relu(p[0])); },
                     {{6}}, 0.1, 2.0});
    cases.push_back({"sigmoid+exp+log+sqrt+square+abs+softplus",
                     [&](Graph&, const std::vector<Var>& p) {
                         Var a = sigmoid(p[0]);
                         Var b = ad::exp(scale(p[0], 0.3));
                         Var c = ad::log(add_scalar(square(p[0]), 1.0));
                         Var d = ad::sqrt(add_scalar(square(p[0]), 0.5));
                         Var e = ad::abs(add_scalar(p[0], 5.0));
                         Var f2 = softplus(p[0]);
                         return reduce_sum(add(add(add(a, b), add(c, d)), add(e, f2)));
                     },
                     {{5}}, 0.2, 1.5});
    cases.push_back({"matmul",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(square(matmul(p[0], p[1])));
                     },
                     {{3, 4}, {4, 2}}, -1, 1});
    cases.push_back({"softmax-1d",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(square(softmax(p[0], 0)));
                     },
                     {{5}}, -2, 2});
    cases.push_back({"softmax-rows",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(square(softmax(p[0], 1)));
                     },
                     {{3, 4}}, -2, 2});
    cases.push_back({"log_softmax_rows",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(mul(log_softmax_rows(p[0]), log_softmax_rows(p[0])));
                     },
                     {{3, 4}}, -2, 2});
    cases.push_back({"reduce_mean",
                     [&](Graph&, const std::vector<Var>& p) { return reduce_mean(square(p[0])); },
                     {{7}}, -2, 2});
    cases.push_back({"max_over_rows",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(square(max_over_rows(p[0])));
                     },
                     {{5, 3}}, -2, 2});
    cases.push_back({"concat+slice+gather+tile",
                     [&](Graph&, const std::vector<Var>& p) {
                         Var c0 = concat(p[0], p[1], 0);
                         Var c1 = concat(slice_rows(c0, 0, 2), slice_rows(c0, 2, 2), 1);
                         Var gr = gather_rows(c1, {1, 0, 1});
                         Var ge = gather_elements(gr, {0, 3, 5});
                         Var t = tile_rows(max_over_rows(c1), 3);
                         return add(sum1(square(ge)), sum1(square(t)));
                     },
                     {{2, 3}, {2, 3}}, -2, 2});
    cases.push_back({"conv2d",
                     [&](Graph&, const std::vector<Var>& p) {
                         return sum1(square(conv2d(p[0], p[1], 1)));
                     },
                     {{2, 4, 4}, {3, 2, 3, 3}}, -1, 1});

    Rng rng(777);
    for (const auto& pc : cases) {
        CAPTURE(pc.name);
        for (int probe = 0; probe < 20; ++probe) {
            std::vector<Tensor> params;
            for (const auto& s : pc.shapes) params.push_back(random_tensor(s, rng, pc.lo, pc.hi));
            const FdReport r = finite_diff_check(pc.fn, params, 1e-5, 1e-4);
            CAPTURE(probe);
            CAPTURE(r.max_rel_error);
            REQUIRE(r.pass);
        }
    }
}

TEST_CASE("backward is deterministic bit-identical") {
    Rng rng(5);
    Tensor w = random_tensor({6, 6}, rng);
    Tensor x = random_tensor({6, 1}, rng);
    auto run = [&]() {
        Graph g;
        Tensor wt = w;
        wt.requires_grad = true;
        Var wv = g.leaf(wt);
        Var y = reduce_sum(sigmoid(matmul(wv, g.constant(x))));
        g.backward(y);
        return g.grad_tensor(wv).data;
    };
    const auto g1 = run();
    const auto g2 = run();
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("chain rule composition on 1-D probes") {
    // f(g(x)) with f=sigmoid, g=square: d/dx = f'(g(x)) * g'(x)
    Rng rng(31);
    for (int i = 0; i < 10; ++i) {
        const double x0 = rng.uniform(-2.0, 2.0);
        Graph g;
        Tensor xt = Tensor::scalar(x0);
        xt.requires_grad = true;
        Var x = g.leaf(xt);
        g.backward(sigmoid(square(x)));
        const double s = 1.0 / (1.0 + std::exp(-x0 * x0));
        const double expected = s * (1 - s) * 2 * x0;
        CHECK(g.grad_tensor(x).data[0] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gradients of unused leaves are zero") {
    Graph g;
    Tensor a = Tensor::scalar(2.0), b = Tensor::scalar(3.0);
    a.requires_grad = b.requires_grad = true;
    Var va = g.leaf(a), vb = g.leaf(b);
    (void)vb;
    g.backward(square(va));
    CHECK(g.grad_tensor(vb).data[0] == 0.0);
    CHECK(g.grad_tensor(va).data[0] == doctest::Approx(4.0));
}

TEST_CASE("sgd_step spec examples") {
    SUBCASE("lr=0.1 momentum=0 p=1 g=1 -> 0.9") {
        Tensor p = Tensor::scalar(1.0);
        std::vector<Tensor> vel;
        sgd_step({&p}, {Tensor::scalar(1.0)}, {0.1, 0.0, 0}, vel);
        CHECK(p.data[0] == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("zero gradient leaves parameter unchanged") {
        Tensor p = Tensor::scalar(1.25);
        std::vector<Tensor> vel;
        sgd_step({&p}, {Tensor::scalar(0.0)}, {0.1, 0.5, 0}, vel);
        CHECK(p.data[0] == 1.25);
    }
    SUBCASE("100 steps on (p-2)^2 converges within 1e-3") {
        Tensor p = Tensor::scalar(0.0);
        std::vector<Tensor> vel;
        for (int i = 0; i < 100; ++i) {
            Graph g;
            p.requires_grad = true;
            Var pv = g.leaf(p);
            g.backward(square(add_scalar(pv, -2.0)));
            sgd_step({&p}, {g.grad_tensor(pv)}, {0.1, 0.0, 0}, vel);
        }
        CHECK(std::fabs(p.data[0] - 2.0) < 1e-3);
    }
    SUBCASE("invalid config rejected") {
        Tensor p = Tensor::scalar(1.0);
        std::vector<Tensor> vel;
        CHECK_THROWS(sgd_step({&p}, {Tensor::scalar(0.0)}, {-0.1, 0.0, 0}, vel));
        CHECK_THROWS(sgd_step({&p}, {Tensor::scalar(0.0)}, {0.1, 1.0, 0}, vel));
    }
}

TEST_CASE("GPRW checkpoint round-trips bit-exact") {
    Rng rng(2024);
    NamedTensors ts;
    ts.emplace_back("layer1.weight", random_tensor({3, 5}, rng));
    ts.emplace_back("layer1.bias", random_tensor({5}, rng));
    ts.emplace_back("scalar", Tensor::scalar(0.1 + 0.2));  // not exactly representable sum
    const std::string path = (std::filesystem::temp_directory_path() / "gprw_test.bin").string();
    save_checkpoint(path, ts);
    const NamedTensors back = load_checkpoint(path);
    REQUIRE(back.size() == ts.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        CHECK(back[i].first == ts[i].first);
        CHECK(back[i].second.shape == ts[i].second.shape);
        REQUIRE(back[i].second.data.size() == ts[i].second.data.size());
        for (size_t j = 0; j < ts[i].second.data.size(); ++j) {
            CHECK(back[i].second.data[j] == ts[i].second.data[j]);
        }
    }
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("adam_step reduces a quadratic") {
    Tensor p = Tensor::scalar(0.0);
    AdamState st;
    for (int i = 0; i < 400; ++i) {
        Graph g;
        p.requires_grad = true;
        Var pv = g.leaf(p);
        g.backward(square(add_scalar(pv, -2.0)));
        adam_step({&p}, {g.grad_tensor(pv)}, {0.05, 0.9, 0.999, 1e-8}, st);
    }
    CHECK(std::fabs(p.data[0] - 2.0) < 1e-2);
}
