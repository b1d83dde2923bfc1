// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cobo/graph.hpp"

using cobo::ad::Graph;
using cobo::ad::GradCheckReport;
using cobo::ad::NodeId;
using cobo::ad::Tensor;

namespace {

// Test-local deterministic uniform in [lo, hi). Independent of the library's
// rng module so the gradient tests do not depend on it.
struct TestRng {
    std::uint64_t s;
    explicit TestRng(std::uint64_t seed) : s(seed ? seed : 1) {}
    double uniform(double lo, double hi) {
        // xorshift64*
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        const double u = static_cast<double>((s * 0x2545F4914F6CDD1DULL) >> 11) * 0x1.0p-53;
        return lo + u * (hi - lo);
    }
};

Tensor rand_tensor(std::vector<std::size_t> shape, TestRng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Gauss-Jordan inverse with partial pivoting; independent of Eigen.
std::vector<std::vector<double>> gj_inverse(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[piv], a[col]);
        std::swap(inv[piv], inv[col]);
        const double d = a[col][col];
        for (std::size_t c = 0; c < n; ++c) {
            a[col][c] /= d;
            inv[col][c] /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            for (std::size_t c = 0; c < n; ++c) {
                a[r][c] -= f * a[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    return inv;
}

// Random symmetric diagonally dominant (hence SPD) matrix as a Tensor.
Tensor random_spd(std::size_t m, TestRng& rng) {
    Tensor a({m, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const double v = rng.uniform(-0.5, 0.5);
            a[i * m + j] = v;
            a[j * m + i] = v;
        }
    for (std::size_t i = 0; i < m; ++i) a[i * m + i] += static_cast<double>(m) + 1.0;
    return a;
}

}  // namespace

TEST_SUITE("diffcore") {

TEST_CASE("forward: x plus x doubles") {
    Graph g;
    NodeId x = g.input("x", {2});
    NodeId y = g.add(x, x);
    g.set_value(x, Tensor({2}, {1.0, 2.0}));
    g.forward();
    CHECK(g.value(y)[0] == doctest::Approx(2.0));
    CHECK(g.value(y)[1] == doctest::Approx(4.0));
}

TEST_CASE("forward: reduce_mean of zeros is zero") {
    Graph g;
    NodeId x = g.input("x", {3});
    NodeId y = g.reduce_mean(x);
    g.set_value(x, Tensor({3}, {0.0, 0.0, 0.0}));
    g.forward();
    CHECK(g.value(y).value() == 0.0);
}

TEST_CASE("forward: tanh at origin is zero") {
    Graph g;
    NodeId x = g.input("x", {1});
    NodeId y = g.tanh(x);
    g.set_value(x, Tensor({1}, {0.0}));
    g.forward();
    CHECK(g.value(y)[0] == 0.0);
}

TEST_CASE("backward: power rule, d(x*x)/dx = 6 at x = 3") {
    Graph g;
    NodeId x = g.param("x", Tensor::scalar(3.0));
    NodeId y = g.mul(x, x);
    g.forward();
    g.backward(y);
    CHECK(g.grad(x).value() == doctest::Approx(6.0));
}

TEST_CASE("backward: hinge max(0, x-1) subgradient") {
    auto hinge_grad = [](double x0) {
        Graph g;
        NodeId x = g.param("x", Tensor::scalar(x0));
        NodeId y = g.relu(g.add_scalar(x, -1.0));
        g.forward();
        g.backward(y);
        return g.grad(x).value();
    };
    CHECK(hinge_grad(0.5) == 0.0);  // inactive branch
    CHECK(hinge_grad(2.0) == 1.0);  // active branch
    CHECK(hinge_grad(1.0) == 0.0);  // kink: inactive-branch convention
}

TEST_CASE("backward: gradient accumulates across consumers") {
    // y = x*x + x so dy/dx = 2x + 1
    Graph g;
    NodeId x = g.param("x", Tensor::scalar(1.5));
    NodeId y = g.add(g.mul(x, x), x);
    g.forward();
    g.backward(y);
    CHECK(g.grad(x).value() == doctest::Approx(4.0));
}

TEST_CASE("backward: idempotent without a new forward") {
    TestRng rng(11);
    Graph g;
    NodeId x = g.param("x", rand_tensor({4}, rng, -1.0, 1.0));
    NodeId y = g.reduce_sum(g.mul(g.tanh(x), x));
    g.forward();
    g.backward(y);
    const Tensor g1 = g.grad(x);
    g.backward(y);
    const Tensor g2 = g.grad(x);
    for (std::size_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("backward: zero seed propagates zero everywhere") {
    TestRng rng(12);
    Graph g;
    NodeId x = g.param("x", rand_tensor({4}, rng, -1.0, 1.0));
    NodeId y = g.reduce_sum(g.exp(x));
    g.forward();
    g.backward(y, 0.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.grad(x)[i] == 0.0);
}

TEST_CASE("backward: unused parameter keeps a zero gradient") {
    Graph g;
    NodeId used = g.param("used", Tensor::scalar(2.0));
    NodeId unused = g.param("unused", Tensor({3}, {1.0, 2.0, 3.0}));
    NodeId y = g.mul(used, used);
    g.forward();
    g.backward(y);
    for (std::size_t i = 0; i < 3; ++i) CHECK(g.grad(unused)[i] == 0.0);
}

TEST_CASE("backward: non-scalar seed rejected") {
    Graph g;
    NodeId x = g.input("x", {2});
    NodeId y = g.add(x, x);
    g.set_value(x, Tensor({2}, {1.0, 2.0}));
    g.forward();
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("grad_check: linear graph is exact to near machine precision") {
    TestRng rng(21);
    Graph g;
    NodeId w = g.param("w", rand_tensor({1, 3}, rng, -1.0, 1.0));
    NodeId x = g.constant(rand_tensor({3, 1}, rng, -1.0, 1.0));
    NodeId y = g.reduce_sum(g.matmul(w, x));
    auto report = g.grad_check(y, {w});
    CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("forward: matmul, transpose, reshape against hand values") {
    Graph g;
    NodeId a = g.constant(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    NodeId b = g.constant(Tensor({2, 2}, {5.0, 6.0, 7.0, 8.0}));
    NodeId ab = g.matmul(a, b);
    NodeId at = g.transpose(a);
    NodeId ar = g.reshape(a, {4});
    g.forward();
    // [[1 2][3 4]] * [[5 6][7 8]] = [[19 22][43 50]]
    CHECK(g.value(ab)[0] == 19.0);
    CHECK(g.value(ab)[1] == 22.0);
    CHECK(g.value(ab)[2] == 43.0);
    CHECK(g.value(ab)[3] == 50.0);
    CHECK(g.value(at)[1] == 3.0);
    CHECK(g.value(at)[2] == 2.0);
    CHECK(g.value(ar).shape() == std::vector<std::size_t>{4});
}

TEST_CASE("grad_check: elementwise chain at random points") {
    TestRng rng(31);
    Graph g;
    NodeId x = g.param("x", rand_tensor({5}, rng, 0.2, 1.8));
    NodeId y = g.param("y", rand_tensor({5}, rng, 0.5, 2.0));
    // mix of tanh, exp, log, sqrt, div, abs, clamp on strictly positive input
    NodeId expr = g.reduce_sum(
        g.add(g.mul(g.tanh(x), g.exp(g.mul_scalar(x, 0.3))),
              g.add(g.div(g.log(y), y), g.add(g.sqrt(y), g.clamp(g.abs(x), 0.1, 1.5)))));
    auto report = g.grad_check(expr, {x, y});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: matmul and broadcast helpers") {
    TestRng rng(32);
    Graph g;
    NodeId w = g.param("w", rand_tensor({3, 4}, rng, -1.0, 1.0));
    NodeId b = g.param("b", rand_tensor({4}, rng, -1.0, 1.0));
    NodeId cvec = g.param("c", rand_tensor({2}, rng, 0.5, 1.5));
    NodeId x = g.constant(rand_tensor({2, 3}, rng, -1.0, 1.0));
    NodeId h = g.tanh(g.add_rowvec(g.matmul(x, w), b));
    NodeId scaled = g.mul_rowvec(h, b);
    NodeId shifted = g.add_colvec(scaled, cvec);
    NodeId out = g.reduce_mean(shifted);
    auto report = g.grad_check(out, {w, b, cvec});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("forward: logsumexp_rows matches direct evaluation") {
    TestRng rng(33);
    Tensor m = rand_tensor({3, 4}, rng, -2.0, 2.0);
    Graph g;
    NodeId x = g.constant(m);
    NodeId lse = g.logsumexp_rows(x);
    g.forward();
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += std::exp(m[r * 4 + c]);
        CHECK(g.value(lse)[r] == doctest::Approx(std::log(s)).epsilon(1e-12));
    }
}

TEST_CASE("grad_check: logsumexp, gather, slice_cols") {
    TestRng rng(34);
    Graph g;
    NodeId x = g.param("x", rand_tensor({3, 5}, rng, -1.0, 1.0));
    NodeId sliced = g.slice_cols(x, 1, 4);
    NodeId lse = g.logsumexp_rows(sliced);
    NodeId picked = g.gather(x, {0, 6, 14});
    NodeId out = g.add(g.reduce_sum(lse), g.reduce_sum(picked));
    auto report = g.grad_check(out, {x});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("forward: pairwise_dist matches direct loops") {
    TestRng rng(41);
    Tensor z = rand_tensor({5, 3}, rng, -2.0, 2.0);
    Graph g;
    NodeId zn = g.constant(z);
    NodeId d = g.pairwise_dist(zn);
    g.forward();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                const double df = z[i * 3 + k] - z[j * 3 + k];
                s += df * df;
            }
            const double expect = std::max(std::sqrt(s), Graph::kDistFloor);
            CHECK(g.value(d)[i * 5 + j] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("pairwise_dist: coincident points clamp to the floor, finite grads") {
    Graph g;
    NodeId z = g.param("z", Tensor({3, 2}, {1.0, 1.0, 1.0, 1.0, 2.0, 3.0}));
    NodeId d = g.pairwise_dist(z);
    NodeId out = g.reduce_sum(d);
    g.forward();
    CHECK(g.value(d)[0 * 3 + 1] == Graph::kDistFloor);
    g.backward(out);
    CHECK(g.grad(z).all_finite());
}

TEST_CASE("grad_check: Lipschitz-hinge style graph over pairwise distances") {
    // sum_{i<j} w_ij * max(0, |dy_ij| / dist_ij - L) built from primitives;
    // the gradient only flows through the latent points.
    TestRng rng(42);
    const std::size_t N = 4, K = 3;
    Tensor z0 = rand_tensor({N, K}, rng, -1.5, 1.5);
    std::vector<double> y(N);
    for (auto& v : y) v = rng.uniform(-2.0, 2.0);

    // oracle pieces computed outside the graph: |y_i - y_j|, median slope
    Tensor dy({N, N});
    std::vector<double> slopes;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            dy[i * N + j] = std::abs(y[i] - y[j]);
            if (j > i) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                    const double df = z0[i * K + k] - z0[j * K + k];
                    s += df * df;
                }
                slopes.push_back(dy[i * N + j] / std::sqrt(s));
            }
        }
    std::sort(slopes.begin(), slopes.end());
    const double median = 0.5 * (slopes[2] + slopes[3]);
    const double L = 0.9 * median;  // keep every pair away from the kink

    Tensor mask({N, N});  // upper triangle, doubles as the pair weights
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j) mask[i * N + j] = 0.5 + 0.1 * double(i + j);

    Graph g;
    NodeId z = g.param("z", z0);
    NodeId dist = g.pairwise_dist(z);
    NodeId slope = g.div(g.constant(dy), dist);
    NodeId hinge = g.relu(g.add_scalar(slope, -L));
    NodeId loss = g.reduce_sum(g.mul(g.constant(mask), hinge));
    auto report = g.grad_check(loss, {z});
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("grad_check: latent-distance style graph with abs kink away from zero") {
    TestRng rng(43);
    const std::size_t N = 5, K = 2;
    Graph g;
    NodeId z = g.param("z", rand_tensor({N, K}, rng, -1.0, 1.0));
    Tensor offdiag = Tensor::full({N, N}, 1.0);
    for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
    NodeId dist = g.pairwise_dist(z);
    NodeId mean = g.mul_scalar(g.reduce_sum(g.mul(g.constant(offdiag), dist)),
                               1.0 / double(N * N));
    NodeId loss = g.abs(g.add_scalar(mean, -3.0));  // mean distance << 3
    auto report = g.grad_check(loss, {z});
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("forward: solve_spd matches a Gauss-Jordan oracle") {
    TestRng rng(51);
    const std::size_t m = 4;
    Tensor a = random_spd(m, rng);
    Tensor b = rand_tensor({m, 2}, rng, -1.0, 1.0);

    std::vector<std::vector<double>> arows(m, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) arows[i][j] = a[i * m + j];
    const auto inv = gj_inverse(arows);

    Graph g;
    NodeId an = g.constant(a);
    NodeId bn = g.constant(b);
    NodeId x = g.solve_spd(an, bn);
    g.forward();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < 2; ++c) {
            double expect = 0.0;
            for (std::size_t j = 0; j < m; ++j) expect += inv[i][j] * b[j * 2 + c];
            CHECK(g.value(x)[i * 2 + c] == doctest::Approx(expect).epsilon(1e-10));
        }
}

TEST_CASE("forward: logdet_spd matches the 3x3 determinant formula") {
    TestRng rng(52);
    Tensor a = random_spd(3, rng);
    const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) -
                       a[1] * (a[3] * a[8] - a[5] * a[6]) +
                       a[2] * (a[3] * a[7] - a[4] * a[6]);
    Graph g;
    NodeId an = g.constant(a);
    NodeId ld = g.logdet_spd(an);
    g.forward();
    CHECK(g.value(ld).value() == doctest::Approx(std::log(det)).epsilon(1e-12));
}

TEST_CASE("grad_check: solve_spd and logdet_spd") {
    TestRng rng(53);
    const std::size_t m = 3;
    Graph g;
    NodeId a = g.param("a", random_spd(m, rng));
    NodeId b = g.param("b", rand_tensor({m, 2}, rng, -1.0, 1.0));
    NodeId x = g.solve_spd(a, b);
    NodeId weights = g.constant(rand_tensor({m, 2}, rng, 0.5, 1.5));
    NodeId out = g.add(g.reduce_sum(g.mul(x, weights)), g.logdet_spd(a));
    auto report = g.grad_check(out, {a, b});
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("solve_spd: hopelessly indefinite matrix raises after jitter escalation") {
    Graph g;
    Tensor a = Tensor({2, 2}, {-5.0, 0.0, 0.0, -5.0});
    NodeId an = g.constant(a);
    NodeId bn = g.constant(Tensor({2, 1}, {1.0, 1.0}));
    g.solve_spd(an, bn);
    CHECK_THROWS_AS(g.forward(), cobo::ad::FactorizationError);
}

TEST_CASE("solve_spd: near-singular matrix is rescued by jitter") {
    Graph g;
    // rank-1 outer product, singular but PSD
    Tensor a = Tensor({2, 2}, {1.0, 1.0, 1.0, 1.0});
    NodeId an = g.constant(a);
    NodeId bn = g.constant(Tensor({2, 1}, {1.0, 2.0}));
    NodeId x = g.solve_spd(an, bn);
    g.forward();
    CHECK(g.value(x).all_finite());
}

TEST_CASE("errors: shape mismatch names the op") {
    Graph g;
    NodeId a = g.input("a", {2});
    NodeId b = g.input("b", {3});
    CHECK_THROWS_WITH_AS(g.add(a, b),
                         doctest::Contains("add"), cobo::ad::ShapeError);
    NodeId m = g.input("m", {2, 3});
    CHECK_THROWS_WITH_AS(g.matmul(m, m),
                         doctest::Contains("matmul"), cobo::ad::ShapeError);
}

TEST_CASE("errors: non-finite forward value names the node") {
    Graph g;
    NodeId x = g.input("x", {1});
    g.log(x);
    g.set_value(x, Tensor({1}, {-1.0}));
    CHECK_THROWS_WITH_AS(g.forward(), doctest::Contains("log"),
                         cobo::ad::NonFiniteError);
}

TEST_CASE("reduce_sum_rows and scale_by gradients") {
    TestRng rng(61);
    Graph g;
    NodeId x = g.param("x", rand_tensor({3, 4}, rng, -1.0, 1.0));
    NodeId s = g.param("s", Tensor::scalar(0.7));
    NodeId rows = g.reduce_sum_rows(g.scale_by(x, g.exp(s)));
    NodeId out = g.reduce_mean(rows);
    auto report = g.grad_check(out, {x, s});
    CHECK(report.max_rel_err < 1e-6);
}

}  // TEST_SUITE
