// Reverse-mode tape: every operation's gradient is checked against central
// finite differences; bookkeeping contracts (single consumption, scalar loss,
// zero gradients for unused leaves) are exercised directly.
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "slotmix/common.hpp"
#include "slotmix/tape.hpp"
#include "slotmix/tensor.hpp"

using slotmix::Rng;
using slotmix::Tensor;
using slotmix::contract_error;
using slotmix::tape::Tape;
using Id = Tape::Id;

namespace {

Tensor random_tensor(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
    Tensor t(rows, cols);
    for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

using BuildFn = std::function<Id(Tape&, const std::vector<Id>&)>;

// Runs backward once, then re-evaluates the same graph with each input entry
// perturbed to form a central difference. `skip` marks entries whose FD probe
// would cross a non-smooth point (clamp floors, rectifier kinks).
void check_gradients(const std::vector<Tensor>& inputs, const BuildFn& build, double tol = 1e-4,
                     double step = 1e-5,
                     const std::function<bool(size_t, size_t)>& skip = nullptr) {
    Tape tp;
    std::vector<Id> ids;
    ids.reserve(inputs.size());
    for (const Tensor& t : inputs) ids.push_back(tp.constant(t));
    const Id loss = build(tp, ids);
    REQUIRE(tp.value(loss).rows == 1);
    REQUIRE(tp.value(loss).cols == 1);
    tp.backward(loss);

    auto eval = [&](const std::vector<Tensor>& mod) {
        Tape t2;
        std::vector<Id> ids2;
        ids2.reserve(mod.size());
        for (const Tensor& t : mod) ids2.push_back(t2.constant(t));
        return t2.value(build(t2, ids2)).at(0, 0);
    };

    for (size_t which = 0; which < inputs.size(); ++which) {
        for (size_t e = 0; e < inputs[which].data.size(); ++e) {
            if (skip && skip(which, e)) continue;
            std::vector<Tensor> mod = inputs;
            const double x0 = mod[which].data[e];
            mod[which].data[e] = x0 + step;
            const double fp = eval(mod);
            mod[which].data[e] = x0 - step;
            const double fm = eval(mod);
            const double fd = (fp - fm) / (2.0 * step);
            const double an = tp.grad(ids[which]).data[e];
            INFO("input ", which, " entry ", e, " analytic ", an, " fd ", fd);
            CHECK(oracle::rel_err(an, fd) < tol);
        }
    }
}

}  // namespace

TEST_CASE("sum of squares gradient matches the analytic form") {
    Tape tp;
    const Id x = tp.constant(Tensor::from_rows({{1.0, 2.0}}));
    const Id loss = tp.sum_sq(x);
    CHECK(tp.value(loss).at(0, 0) == 5.0);
    tp.backward(loss);
    CHECK(tp.grad(x).at(0, 0) == 2.0);
    CHECK(tp.grad(x).at(0, 1) == 4.0);
}

TEST_CASE("matmul forward value and both input gradients") {
    Rng rng(11);
    const Tensor a = random_tensor(rng, 3, 4);
    const Tensor b = random_tensor(rng, 4, 2);
    {
        Tape tp;
        const Id y = tp.matmul(tp.constant(a), tp.constant(b));
        Tensor direct;
        slotmix::matmul(a, b, direct);
        CHECK(bitwise_equal(tp.value(y), direct));
    }
    check_gradients({a, b}, [](Tape& tp, const std::vector<Id>& in) {
        return tp.sum_sq(tp.matmul(in[0], in[1]));
    });
}

TEST_CASE("transposed matmul flavors match the plain product and finite differences") {
    Rng rng(12);
    const Tensor a = random_tensor(rng, 3, 4);
    const Tensor bt = random_tensor(rng, 5, 4);  // used as b^T
    const Tensor c = random_tensor(rng, 3, 2);

    Tape tp;
    const Id y_nt = tp.matmul_nt(tp.constant(a), tp.constant(bt));
    Tensor b(4, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) b.at(j, i) = bt.at(i, j);
    Tensor direct;
    slotmix::matmul(a, b, direct);
    CHECK(tp.value(y_nt).rows == 3);
    CHECK(tp.value(y_nt).cols == 5);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j)
            CHECK(tp.value(y_nt).at(i, j) == doctest::Approx(direct.at(i, j)).epsilon(1e-15));

    check_gradients({a, bt}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.matmul_nt(in[0], in[1]));
    });
    check_gradients({a, c}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.matmul_tn(in[0], in[1]));
    });
}

TEST_CASE("row vector addition broadcasts and routes gradients") {
    Rng rng(13);
    const Tensor a = random_tensor(rng, 4, 3);
    const Tensor v = random_tensor(rng, 1, 3);
    Tape tp;
    const Id y = tp.add_rowvec(tp.constant(a), tp.constant(v));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) CHECK(tp.value(y).at(i, j) == a.at(i, j) + v.at(0, j));
    check_gradients({a, v}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.add_rowvec(in[0], in[1]));
    });
}

TEST_CASE("leaky rectifier value and gradient on both pieces") {
    // entries kept away from the kink so finite differences stay one-sided
    Rng rng(14);
    Tensor x(3, 4);
    for (double& v : x.data) {
        const double mag = 0.1 + 0.9 * rng.uniform();
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    Tape tp;
    const Id y = tp.leaky_relu(tp.constant(x), 0.2);
    for (size_t e = 0; e < x.data.size(); ++e) {
        const double expect = x.data[e] >= 0.0 ? x.data[e] : 0.2 * x.data[e];
        CHECK(tp.value(y).data[e] == expect);
    }
    check_gradients({x}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.leaky_relu(in[0], 0.2));
    });
}

TEST_CASE("clamped log: gradient flows above the floor and vanishes below") {
    Tensor x = Tensor::from_rows({{0.5, 2.0, 0.0, -1.0}});
    Tape tp;
    const Id ids = tp.constant(x);
    const Id loss = tp.sum_sq(tp.log_clamped(ids));
    CHECK(tp.value(loss).at(0, 0) ==
          doctest::Approx(std::log(0.5) * std::log(0.5) + std::log(2.0) * std::log(2.0) +
                          2.0 * std::log(1e-300) * std::log(1e-300))
              .epsilon(1e-12));
    tp.backward(loss);
    CHECK(tp.grad(ids).at(0, 2) == 0.0);
    CHECK(tp.grad(ids).at(0, 3) == 0.0);
    CHECK(tp.grad(ids).at(0, 0) == doctest::Approx(2.0 * std::log(0.5) / 0.5).epsilon(1e-12));

    // positive entries only, checked against finite differences
    Rng rng(15);
    const Tensor xp = random_tensor(rng, 2, 3, 0.2, 3.0);
    check_gradients({xp}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.log_clamped(in[0]));
    });
}

TEST_CASE("gaussian logits match the direct formula and finite differences") {
    Rng rng(16);
    const int N = 3, K = 2, d = 2;
    const Tensor keys = random_tensor(rng, N, d, -2.0, 2.0);
    const Tensor q = random_tensor(rng, K, d, -2.0, 2.0);
    const Tensor var = random_tensor(rng, K, d, 0.3, 2.0);
    const Tensor logpi = random_tensor(rng, 1, K, -2.0, -0.1);

    Tape tp;
    const Id L = tp.gauss_logits(tp.constant(keys), tp.constant(q), tp.constant(var),
                                 tp.constant(logpi));
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            double expect = logpi.at(0, k);
            for (int j = 0; j < d; ++j) {
                const double diff = keys.at(n, j) - q.at(k, j);
                expect += -0.5 * (std::log(2.0 * M_PI * var.at(k, j)) +
                                  diff * diff / var.at(k, j));
            }
            CHECK(tp.value(L).at(n, k) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    check_gradients({keys, q, var, logpi}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.gauss_logits(in[0], in[1], in[2], in[3]));
    });
}

TEST_CASE("row softmax normalizes and matches finite differences") {
    Rng rng(17);
    const Tensor x = random_tensor(rng, 4, 3, -2.0, 2.0);
    Tape tp;
    const Id a = tp.softmax_rows(tp.constant(x));
    for (int i = 0; i < 4; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += tp.value(a).at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    const Tensor w = random_tensor(rng, 4, 3);  // break softmax's constant row sums
    check_gradients({x}, [&w](Tape& tp2, const std::vector<Id>& in) {
        Tensor wc = w;
        return tp2.sum_sq(tp2.matmul_nt(tp2.softmax_rows(in[0]), tp2.constant(std::move(wc))));
    });
}

TEST_CASE("column normalization and finite differences") {
    Rng rng(18);
    const Tensor x = random_tensor(rng, 5, 3, 0.1, 2.0);
    Tape tp;
    const Id ah = tp.colnorm(tp.constant(x));
    for (int k = 0; k < 3; ++k) {
        double s = 0.0;
        for (int n = 0; n < 5; ++n) s += tp.value(ah).at(n, k);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    const Tensor w = random_tensor(rng, 5, 3);
    check_gradients({x}, [&w](Tape& tp2, const std::vector<Id>& in) {
        Tensor wc = w;
        return tp2.sum_sq(tp2.matmul_tn(tp2.colnorm(in[0]), tp2.constant(std::move(wc))));
    });
}

TEST_CASE("weighted variance gradients for all three inputs") {
    Rng rng(19);
    const int N = 5, K = 2, d = 2;
    const Tensor logits = random_tensor(rng, N, K);
    const Tensor values = random_tensor(rng, N, d, -2.0, 2.0);
    const Tensor mu = random_tensor(rng, K, d, -1.0, 1.0);
    check_gradients({logits, values, mu}, [](Tape& tp, const std::vector<Id>& in) {
        const Id ah = tp.colnorm(tp.softmax_rows(in[0]));
        return tp.sum_sq(tp.weighted_var(ah, in[1], in[2]));
    });
}

TEST_CASE("minimum clamp passes gradient only above the floor") {
    Tensor x = Tensor::from_rows({{0.2, 0.8, 0.5}});
    Tape tp;
    const Id ids = tp.constant(x);
    const Id y = tp.clamp_min(ids, 0.5);
    CHECK(tp.value(y).at(0, 0) == 0.5);
    CHECK(tp.value(y).at(0, 1) == 0.8);
    CHECK(tp.value(y).at(0, 2) == 0.5);  // ties clamp, matching max(x, lo)
    tp.backward(tp.sum_sq(y));
    CHECK(tp.grad(ids).at(0, 0) == 0.0);
    CHECK(tp.grad(ids).at(0, 1) == doctest::Approx(1.6));

    Rng rng(20);
    Tensor far(2, 3);
    for (double& v : far.data) v = rng.uniform() < 0.5 ? 0.1 + 0.2 * rng.uniform()
                                                       : 1.0 + rng.uniform();
    check_gradients({far}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.clamp_min(in[0], 0.5));
    });
}

TEST_CASE("column mean value and gradient") {
    Rng rng(21);
    const Tensor x = random_tensor(rng, 4, 3);
    Tape tp;
    const Id y = tp.colmean(tp.constant(x));
    for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int i = 0; i < 4; ++i) s += x.at(i, j);
        CHECK(tp.value(y).at(0, j) == doctest::Approx(s / 4.0).epsilon(1e-15));
    }
    check_gradients({x}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.sum_sq(tp2.colmean(in[0]));
    });
}

TEST_CASE("mean squared error value and gradient") {
    Rng rng(22);
    const Tensor pred = random_tensor(rng, 4, 2);
    const Tensor target = random_tensor(rng, 4, 2);
    Tape tp;
    const Id ids = tp.constant(pred);
    Tensor tc = target;
    const Id loss = tp.mse(ids, std::move(tc));
    double expect = 0.0;
    for (size_t e = 0; e < pred.data.size(); ++e) {
        const double diff = pred.data[e] - target.data[e];
        expect += diff * diff;
    }
    expect /= 4.0;
    CHECK(tp.value(loss).at(0, 0) == doctest::Approx(expect).epsilon(1e-15));
    check_gradients({pred}, [&target](Tape& tp2, const std::vector<Id>& in) {
        Tensor t2 = target;
        return tp2.mse(in[0], std::move(t2));
    });
}

TEST_CASE("two slot-attention sweeps compose into a correct gradient") {
    // exercises every op interaction the training loss uses, T = 2
    Rng rng(23);
    const int N = 6, K = 2, d = 2;
    const Tensor keys = random_tensor(rng, N, d, -1.5, 1.5);
    const Tensor mu0 = random_tensor(rng, K, d, -1.0, 1.0);
    const Tensor var0 = random_tensor(rng, K, d, 0.5, 1.5);
    Tensor pi0(1, K, 1.0 / K);
    const Tensor target = random_tensor(rng, N, d);

    check_gradients(
        {keys, mu0, var0, pi0},
        [&target](Tape& tp, const std::vector<Id>& in) {
            Id mu = in[1], var = in[2], pi = in[3];
            Id A = -1;
            for (int t = 0; t < 2; ++t) {
                const Id logits = tp.gauss_logits(in[0], mu, var, tp.log_clamped(pi));
                A = tp.softmax_rows(logits);
                const Id ah = tp.colnorm(A);
                mu = tp.matmul_tn(ah, in[0]);
                var = tp.clamp_min(tp.weighted_var(ah, in[0], mu), 1e-8);
                pi = tp.colmean(A);
            }
            Tensor tc = target;
            return tp.mse(tp.matmul(A, mu), std::move(tc));
        },
        2e-4);
}

TEST_CASE("gradients reproduce bitwise across identical passes") {
    Rng rng(24);
    const Tensor a = random_tensor(rng, 3, 3);
    const Tensor b = random_tensor(rng, 3, 3);
    auto run = [&](std::vector<Tensor>& grads) {
        Tape tp;
        const Id ia = tp.constant(a);
        const Id ib = tp.constant(b);
        const Id loss = tp.sum_sq(tp.leaky_relu(tp.matmul(ia, ib), 0.2));
        tp.backward(loss);
        grads = {tp.grad(ia), tp.grad(ib)};
    };
    std::vector<Tensor> g1, g2;
    run(g1);
    run(g2);
    CHECK(bitwise_equal(g1[0], g2[0]));
    CHECK(bitwise_equal(g1[1], g2[1]));
}

TEST_CASE("tape bookkeeping contracts") {
    SUBCASE("backward on an empty tape is rejected") {
        Tape tp;
        CHECK_THROWS_AS(tp.backward(0), contract_error);
    }
    SUBCASE("loss must be a scalar node") {
        Tape tp;
        const Id x = tp.constant(Tensor(2, 2, 1.0));
        CHECK_THROWS_AS(tp.backward(x), contract_error);
    }
    SUBCASE("a tape is consumed by backward") {
        Tape tp;
        const Id loss = tp.sum_sq(tp.constant(Tensor(1, 2, 1.0)));
        tp.backward(loss);
        CHECK(tp.consumed());
        CHECK_THROWS_AS(tp.backward(loss), contract_error);
        CHECK_THROWS_AS(tp.constant(Tensor(1, 1, 0.0)), contract_error);
    }
    SUBCASE("out-of-range ids are rejected") {
        Tape tp;
        CHECK_THROWS_AS(tp.value(-1), contract_error);
        CHECK_THROWS_AS(tp.value(0), contract_error);
    }
}

TEST_CASE("entry selector extracts one coordinate and routes its gradient") {
    Rng rng(25);
    const Tensor x = random_tensor(rng, 3, 4);
    Tape tp;
    const Id ix = tp.constant(x);
    const Id y = tp.entry(ix, 1, 2);
    CHECK(tp.value(y).at(0, 0) == x.at(1, 2));
    CHECK_THROWS_AS(tp.entry(ix, 3, 0), contract_error);
    tp.backward(y);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) CHECK(tp.grad(ix).at(r, c) == (r == 1 && c == 2 ? 1.0 : 0.0));

    check_gradients({x}, [](Tape& tp2, const std::vector<Id>& in) {
        return tp2.entry(tp2.leaky_relu(tp2.matmul_tn(in[0], in[0]), 0.2), 2, 1);
    });
}

TEST_CASE("unused leaves keep zero gradients") {
    Tape tp;
    const Id used = tp.constant(Tensor(1, 2, 3.0));
    const Id unused = tp.constant(Tensor(2, 2, 5.0));
    tp.backward(tp.sum_sq(used));
    for (double g : tp.grad(unused).data) CHECK(g == 0.0);
    CHECK(tp.grad(used).at(0, 0) == 6.0);
}
