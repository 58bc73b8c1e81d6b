// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lkv/errors.hpp"
#include "lkv/rng.hpp"
#include "lkv/tensor.hpp"

using namespace lkv;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, bool requires_grad = true,
                     double lo = -3.0, double hi = 3.0) {
    Tensor t(std::move(shape), requires_grad);
    Rng rng(seed);
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

double rel_err(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        num = std::max(num, std::fabs(a.data()[i] - b.data()[i]));
        den = std::max(den, std::fabs(b.data()[i]));
    }
    return num / (den + 1e-12);
}

}  // namespace

TEST_CASE("softmax of a symmetric pair splits evenly") {
    Tensor x = Tensor::from({2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("identity matmul returns its operand") {
    Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor a = random_tensor({2, 2}, 17, false);
    Tensor out = matmul(eye, a);
    for (size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("kl of identical logits vanishes and its gradient is zero") {
    Tensor t = random_tensor({3, 5}, 23, false);
    Tensor s = t.detached_clone();
    s.set_requires_grad(true);
    Tensor kl = kl_from_logits(t, s);
    CHECK(kl.value() == doctest::Approx(0.0).epsilon(1e-12));

    GradMap g = backward(kl);
    Tensor gs = g.grad_for(s);
    for (size_t i = 0; i < gs.numel(); ++i) CHECK(std::fabs(gs.data()[i]) < 1e-12);

    // Numeric confirmation along 5 random coordinates.
    Tensor fd = finite_difference_gradient(
        [&](const Tensor& probe) { return kl_from_logits(t, probe).value(); }, s, 1e-5);
    for (size_t i = 0; i < fd.numel(); ++i) CHECK(std::fabs(fd.data()[i] - gs.data()[i]) < 1e-7);
}

TEST_CASE("backward of sum of squares") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor loss = sum(mul(x, x));
    GradMap g = backward(loss);
    Tensor gx = g.grad_for(x);
    CHECK(gx.data()[0] == doctest::Approx(2.0));
    CHECK(gx.data()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects constants and non-scalar roots") {
    Tensor c = Tensor::scalar(3.0);
    CHECK_THROWS_AS(backward(c), contract_error);
    Tensor x = random_tensor({3}, 5);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), contract_error);
}

TEST_CASE("unreached leaves read back as zero gradients") {
    Tensor x = random_tensor({3}, 7);
    Tensor other = random_tensor({3}, 8);
    GradMap g = backward(sum(mul(x, x)));
    Tensor go = g.grad_for(other);
    for (size_t i = 0; i < go.numel(); ++i) CHECK(go.data()[i] == 0.0);
}

TEST_CASE("finite differences recover analytic derivatives") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    Tensor fd = finite_difference_gradient(
        [](const Tensor& p) {
            double s = 0.0;
            for (size_t i = 0; i < p.numel(); ++i) s += p.data()[i] * p.data()[i];
            return s;
        },
        x, 1e-5);
    CHECK(std::fabs(fd.data()[0] - 2.0) < 1e-8);
    CHECK(std::fabs(fd.data()[1] - 4.0) < 1e-8);
}

TEST_CASE("softmax row sums are gradient-free directions") {
    Tensor x = random_tensor({6}, 31, false);
    Tensor fd = finite_difference_gradient(
        [](const Tensor& p) { return sum(softmax_lastdim(p)).value(); }, x, 1e-5);
    for (size_t i = 0; i < fd.numel(); ++i) CHECK(std::fabs(fd.data()[i]) < 1e-6);
}

TEST_CASE("every differentiable primitive matches finite differences") {
    const double h = 1e-5, tol = 1e-5;

    auto check_unary = [&](const char* name, auto op, uint64_t seed, double lo = -3.0, double hi = 3.0) {
        CAPTURE(name);
        Tensor x = random_tensor({4, 3}, seed, true, lo, hi);
        Tensor loss = mean(op(x));
        GradMap g = backward(loss);
        Tensor fd = finite_difference_gradient([&](const Tensor& p) { return mean(op(p)).value(); }, x, h);
        CHECK(rel_err(g.grad_for(x), fd) < tol);
    };
    check_unary("silu", [](const Tensor& t) { return silu(t); }, 101);
    check_unary("softmax", [](const Tensor& t) { return mul(softmax_lastdim(t), t); }, 102);
    check_unary("exp", [](const Tensor& t) { return exp(t); }, 103);
    check_unary("log", [](const Tensor& t) { return log(t); }, 104, 0.2, 3.0);
    check_unary("reshape", [](const Tensor& t) { return mul(reshape(t, {3, 4}), reshape(t, {3, 4})); }, 105);
    check_unary("slice", [](const Tensor& t) { return mul(slice_lastdim(t, 1, 2), slice_lastdim(t, 0, 2)); }, 106);

    auto check_binary = [&](const char* name, auto op, uint64_t seed) {
        CAPTURE(name);
        Tensor a = random_tensor({3, 4}, seed);
        Tensor b = random_tensor({3, 4}, seed + 1);
        Tensor loss = mean(op(a, b));
        GradMap g = backward(loss);
        Tensor fda = finite_difference_gradient([&](const Tensor& p) { return mean(op(p, b)).value(); }, a, h);
        Tensor fdb = finite_difference_gradient([&](const Tensor& p) { return mean(op(a, p)).value(); }, b, h);
        CHECK(rel_err(g.grad_for(a), fda) < tol);
        CHECK(rel_err(g.grad_for(b), fdb) < tol);
    };
    check_binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, 201);
    check_binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, 202);
    check_binary("sq_error", [](const Tensor& a, const Tensor& b) { return sq_error(a, b); }, 203);
    check_binary("concat", [](const Tensor& a, const Tensor& b) {
        Tensor c = concat_lastdim({a, b});
        return mul(c, c);
    }, 204);
    check_binary("kl", [](const Tensor& a, const Tensor& b) { return kl_from_logits(a, b); }, 205);

    {
        Tensor a = random_tensor({3, 4}, 301);
        Tensor b = random_tensor({4, 2}, 302);
        Tensor loss = mean(matmul(a, b));
        GradMap g = backward(loss);
        Tensor fda = finite_difference_gradient([&](const Tensor& p) { return mean(matmul(p, b)).value(); }, a, h);
        Tensor fdb = finite_difference_gradient([&](const Tensor& p) { return mean(matmul(a, p)).value(); }, b, h);
        CHECK(rel_err(g.grad_for(a), fda) < tol);
        CHECK(rel_err(g.grad_for(b), fdb) < tol);
    }
    {
        Tensor x = random_tensor({5, 6}, 303);
        Tensor gain = random_tensor({6}, 304, true, 0.5, 1.5);
        Tensor loss = mean(rmsnorm(x, gain));
        GradMap g = backward(loss);
        Tensor fdx = finite_difference_gradient([&](const Tensor& p) { return mean(rmsnorm(p, gain)).value(); }, x, h);
        Tensor fdg = finite_difference_gradient([&](const Tensor& p) { return mean(rmsnorm(x, p)).value(); }, gain, h);
        CHECK(rel_err(g.grad_for(x), fdx) < tol);
        CHECK(rel_err(g.grad_for(gain), fdg) < tol);
    }
    {
        std::vector<int> pos{0, 5, 17};
        Tensor x = random_tensor({3, 8}, 305);
        auto op = [&pos](const Tensor& t) { return mul(rope(t, pos), rope(t, pos)); };
        Tensor loss = mean(op(x));
        GradMap g = backward(loss);
        Tensor fd = finite_difference_gradient([&](const Tensor& p) { return mean(op(p)).value(); }, x, h);
        CHECK(rel_err(g.grad_for(x), fd) < tol);
    }
    {
        Tensor x = random_tensor({5, 4}, 306);
        Tensor b = random_tensor({4}, 307);
        Tensor loss = mean(add_rowvec(x, b));
        GradMap g = backward(loss);
        Tensor fdb = finite_difference_gradient([&](const Tensor& p) { return mean(add_rowvec(x, p)).value(); }, b, h);
        CHECK(rel_err(g.grad_for(b), fdb) < tol);
    }
    {
        Tensor table = random_tensor({7, 3}, 308);
        std::vector<int> ids{0, 3, 3, 6};
        Tensor loss = mean(mul(embedding_rows(table, ids), embedding_rows(table, ids)));
        GradMap g = backward(loss);
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& p) { return mean(mul(embedding_rows(p, ids), embedding_rows(p, ids))).value(); },
            table, h);
        CHECK(rel_err(g.grad_for(table), fd) < tol);
    }
    {
        Tensor logits = random_tensor({4, 6}, 309);
        std::vector<int> targets{1, 0, 5, 2};
        Tensor loss = cross_entropy_logits(logits, targets);
        GradMap g = backward(loss);
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& p) { return cross_entropy_logits(p, targets).value(); }, logits, h);
        CHECK(rel_err(g.grad_for(logits), fd) < tol);
    }
}

TEST_CASE("forward passes are bit-reproducible") {
    Tensor a = random_tensor({16, 16}, 41, false);
    Tensor b = random_tensor({16, 16}, 42, false);
    Tensor c1 = matmul(silu(a), softmax_lastdim(b));
    Tensor c2 = matmul(silu(a), softmax_lastdim(b));
    for (size_t i = 0; i < c1.numel(); ++i) CHECK(c1.data()[i] == c2.data()[i]);
}

TEST_CASE("non-finite inputs are rejected") {
    Tensor a = Tensor::from({2}, {1.0, std::nan("")});
    Tensor b = Tensor::from({2}, {1.0, 1.0});
    CHECK_THROWS_AS(add(a, b), numeric_error);
    CHECK_THROWS_AS(matmul(Tensor::from({1, 2}, {1.0, INFINITY}), Tensor({2, 1})), numeric_error);
}

TEST_CASE("shape mismatches are contract violations") {
    CHECK_THROWS_AS(add(Tensor({2}), Tensor({3})), contract_error);
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), contract_error);
}
