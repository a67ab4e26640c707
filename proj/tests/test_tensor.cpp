#include "memt5/ops.hpp"

#include <random>

#include "doctest.h"
#include "memt5/verify.hpp"

using namespace memt5;

namespace {

Tensor<double> rand_tensor(Shape s, std::mt19937_64& eng, double scale = 1.0) {
    std::vector<double> d(size_t(shape_numel(s)));
    for (auto& x : d) x = (double(eng() >> 11) / 9007199254740992.0 * 2.0 - 1.0) * scale;
    return Tensor<double>::from_data(std::move(s), std::move(d));
}

}  // namespace

TEST_CASE("matmul basic cases") {
    auto I = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto B = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
    auto C = matmul(I, B);
    CHECK(C.data() == std::vector<double>{1, 2, 3, 4});

    auto Z = Tensor<double>::zeros({2, 3});
    auto Y = Tensor<double>::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(Z, Y).data() == std::vector<double>(4, 0.0));

    auto a = Tensor<double>::from_data({1, 2}, {1, 2});
    auto b = Tensor<double>::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape errors name both shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul right-identity property") {
    std::mt19937_64 eng(7);
    for (int trial = 0; trial < 5; ++trial) {
        auto A = rand_tensor({3, 4}, eng);
        std::vector<double> id(16, 0.0);
        for (int i = 0; i < 4; ++i) id[size_t(i * 4 + i)] = 1.0;
        auto I = Tensor<double>::from_data({4, 4}, id);
        auto C = matmul(A, I);
        for (size_t i = 0; i < A.data().size(); ++i) CHECK(C.data()[i] == doctest::Approx(A.data()[i]));
    }
}

TEST_CASE("backward on simple graphs") {
    auto x = Tensor<double>::from_data({3}, {1, 2, 3}, true);
    sum_all(x).backward();
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    auto y = Tensor<double>::from_data({2}, {1, 2}, true);
    sum_all(mul(y, y)).backward();
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar roots") {
    auto x = Tensor<double>::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(mul(x, x).backward(), Error);
}

TEST_CASE("gradient accumulates across multiple uses") {
    auto x = Tensor<double>::from_data({2}, {3, 4}, true);
    // f = sum(x) + sum(2x) -> grad 3 everywhere
    auto loss = add(sum_all(x), sum_all(scale(x, 2.0)));
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(x.grad()[1] == doctest::Approx(3.0));
}

TEST_CASE("masked_softmax examples") {
    auto s = Tensor<double>::from_data({1, 3}, {0, 0, 0});
    auto p = masked_softmax(s, Mask::all_true({1, 3}));
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3));

    Mask m;
    m.shape = {1, 3};
    m.v = {0, 1, 0};
    auto p2 = masked_softmax(Tensor<double>::from_data({1, 3}, {5, 9, 2}), m);
    CHECK(p2.data()[0] == 0.0);
    CHECK(p2.data()[1] == 1.0);
    CHECK(p2.data()[2] == 0.0);

    auto p3 = masked_softmax(Tensor<double>::from_data({1, 2}, {1, 2}), Mask::all_true({1, 2}));
    CHECK(p3.data()[0] == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(p3.data()[1] == doctest::Approx(0.7311).epsilon(1e-3));
}

TEST_CASE("masked_softmax rows sum to one and masked entries are exact zeros") {
    std::mt19937_64 eng(11);
    auto s = rand_tensor({2, 4, 5}, eng, 3.0);
    Mask m;
    m.shape = {2, 4, 5};
    m.v.assign(40, 1);
    for (size_t i = 0; i < m.v.size(); i += 3) m.v[i] = 0;
    // keep every row non-empty
    for (int r = 0; r < 8; ++r) m.v[size_t(r * 5 + 4)] = 1;
    auto p = masked_softmax(s, m);
    for (int r = 0; r < 8; ++r) {
        double sum = 0;
        for (int i = 0; i < 5; ++i) {
            double v = p.data()[size_t(r * 5 + i)];
            if (!m.v[size_t(r * 5 + i)]) CHECK(v == 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("masked_softmax rejects fully masked rows") {
    Mask m;
    m.shape = {1, 2};
    m.v = {0, 0};
    CHECK_THROWS_AS(masked_softmax(Tensor<double>::from_data({1, 2}, {1, 2}), m), Error);
}

TEST_CASE("rms_norm examples") {
    auto g4 = Tensor<double>::filled({4}, 1.0);
    auto y = rms_norm(Tensor<double>::from_data({4}, {1, 1, 1, 1}), g4, 0.0);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0));

    auto g2 = Tensor<double>::filled({2}, 1.0);
    auto y2 = rms_norm(Tensor<double>::from_data({2}, {0, 0}), g2, 1e-6);
    CHECK(y2.data()[0] == 0.0);
    CHECK(y2.data()[1] == 0.0);

    auto y3 = rms_norm(Tensor<double>::from_data({2}, {3, 4}), g2, 0.0);
    CHECK(y3.data()[0] == doctest::Approx(3.0 / std::sqrt(12.5)));
    CHECK(y3.data()[1] == doctest::Approx(4.0 / std::sqrt(12.5)));
}

TEST_CASE("cross_entropy examples") {
    // uniform logits, V = 32000
    auto logits = Tensor<double>::zeros({1, 32000});
    auto l = cross_entropy_mean(logits, std::vector<int>{5}, 0 - 1);
    CHECK(l.item() == doctest::Approx(std::log(32000.0)).epsilon(1e-6));
    CHECK(l.item() == doctest::Approx(10.3735).epsilon(1e-4));

    // huge margin on the correct class -> loss ~ 0
    auto sharp = Tensor<double>::zeros({1, 4});
    sharp.data()[2] = 50.0;
    CHECK(cross_entropy_mean(sharp, std::vector<int>{2}, -1).item() == doctest::Approx(0.0).epsilon(1e-9));

    // all ignored -> error
    CHECK_THROWS_AS(cross_entropy_mean(sharp, std::vector<int>{-1}, -1), Error);
}

TEST_CASE("cross_entropy ignored positions contribute nothing") {
    std::mt19937_64 eng(3);
    auto logits = rand_tensor({3, 5}, eng);
    logits.set_requires_grad(true);
    auto l = cross_entropy_mean(logits, std::vector<int>{2, -1, 4}, -1);
    l.backward();
    for (int i = 0; i < 5; ++i) CHECK(logits.grad()[size_t(5 + i)] == 0.0);

    // value equals the mean over just the two counted rows
    auto row0 = Tensor<double>::from_data({1, 5}, std::vector<double>(logits.data().begin(), logits.data().begin() + 5));
    auto row2 = Tensor<double>::from_data({1, 5}, std::vector<double>(logits.data().begin() + 10, logits.data().end()));
    double expect = 0.5 * (cross_entropy_mean(row0, std::vector<int>{2}, -1).item() +
                           cross_entropy_mean(row2, std::vector<int>{4}, -1).item());
    CHECK(l.item() == doctest::Approx(expect));
}

TEST_CASE("dropout identity, determinism, scaling") {
    std::mt19937_64 eng(9);
    auto x = rand_tensor({64}, eng);

    auto y_eval = dropout(x, 0.5, false, nullptr);
    CHECK(y_eval.node().get() == x.node().get());  // literally the same tensor

    RngStream r1(42, "drop", 0);
    RngStream r2(42, "drop", 0);
    auto y1 = dropout(x, 0.5, true, &r1);
    auto y2 = dropout(x, 0.5, true, &r2);
    CHECK(y1.data() == y2.data());  // bit-for-bit under the same stream

    int kept = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = y1.data()[size_t(i)];
        if (v != 0.0) {
            ++kept;
            CHECK(v == doctest::Approx(x.data()[size_t(i)] * 2.0));
        }
    }
    CHECK(kept > 10);
    CHECK(kept < 60);
}

TEST_CASE("embedding lookup and scatter-add gradient") {
    auto table = Tensor<double>::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    auto out = embedding_lookup(table, {2, 0, 2}, {3});
    CHECK(out.data() == std::vector<double>{5, 6, 1, 2, 5, 6});
    sum_all(out).backward();
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
    CHECK_THROWS_AS(embedding_lookup(table, {3}, {1}), Error);
}

TEST_CASE("reshape, permute, concat, split round trips") {
    std::mt19937_64 eng(5);
    auto x = rand_tensor({2, 3, 4}, eng);
    auto r = reshape(x, {6, 4});
    CHECK(r.data() == x.data());
    auto r2 = reshape(r, {2, -1});
    CHECK(r2.shape() == Shape{2, 12});

    auto p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    auto back = permute(p, {1, 2, 0});
    CHECK(back.data() == x.data());

    auto parts = split(x, 1, {1, 2});
    CHECK(parts[0].shape() == Shape{2, 1, 4});
    CHECK(parts[1].shape() == Shape{2, 2, 4});
    auto glued = concat(parts, 1);
    CHECK(glued.data() == x.data());
}

// Finite differences are the oracle for every differentiable kernel.
TEST_CASE("gradcheck: every kernel matches central differences") {
    std::mt19937_64 eng(1234);

    auto a = rand_tensor({2, 3}, eng);
    auto b = rand_tensor({3, 4}, eng);
    auto rep = gradcheck("matmul", [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b});
    CHECK(rep.pass);

    auto a3 = rand_tensor({2, 2, 3}, eng);
    auto b3 = rand_tensor({2, 3, 2}, eng);
    rep = gradcheck("matmul_batched", [&] { return sum_all(mul(matmul(a3, b3), matmul(a3, b3))); }, {a3, b3});
    CHECK(rep.pass);

    auto w = rand_tensor({3, 2}, eng);
    rep = gradcheck("matmul_broadcast_weights", [&] { return sum_all(mul(matmul(a3, w), matmul(a3, w))); },
                    {a3, w});
    CHECK(rep.pass);

    auto u = rand_tensor({2, 1, 4}, eng);
    auto v = rand_tensor({3, 1}, eng);
    rep = gradcheck("broadcast_add_mul_div",
                    [&] {
                        auto z = mul(add(u, v), sub(u, v));
                        return sum_all(div(z, add_scalar(exp_op(scale(v, 0.1)), 1.0)));
                    },
                    {u, v});
    CHECK(rep.pass);

    auto s = rand_tensor({2, 3, 4}, eng, 2.0);
    auto cm = rand_tensor({2, 3, 4}, eng);  // fixed coefficients, not a leaf
    Mask m;
    m.shape = {3, 4};
    m.v = {1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 0};
    rep = gradcheck("masked_softmax", [&] { return sum_all(mul(masked_softmax(s, m), cm)); }, {s});
    CHECK(rep.pass);

    auto xn = rand_tensor({3, 5}, eng);
    auto g = rand_tensor({5}, eng);
    auto cn = rand_tensor({3, 5}, eng);
    rep = gradcheck("rms_norm", [&] { return sum_all(mul(rms_norm(xn, g, 1e-6), cn)); }, {xn, g});
    CHECK(rep.pass);

    auto lg = rand_tensor({4, 6}, eng, 2.0);
    std::vector<int> tg{1, -1, 3, 0};
    rep = gradcheck("cross_entropy", [&] { return cross_entropy_mean(lg, tg, -1); }, {lg}, 1e-5, 1e-6);
    CHECK(rep.pass);

    auto xr = rand_tensor({2, 6}, eng);
    rep = gradcheck("relu_log_exp",
                    [&] { return sum_all(log_op(add_scalar(exp_op(relu(xr)), 1.0))); }, {xr});
    CHECK(rep.pass);

    auto tb = rand_tensor({4, 3}, eng);
    auto f = rand_tensor({3, 3}, eng);
    rep = gradcheck("embedding", [&] { return sum_all(mul(embedding_lookup(tb, {1, 3, 1}, {3}), f)); }, {tb, f});
    CHECK(rep.pass);

    auto xs = rand_tensor({2, 2, 3}, eng);
    auto cs = rand_tensor({3, 4}, eng);
    rep = gradcheck("shape_ops",
                    [&] {
                        auto pieces = split(permute(reshape(xs, {4, 3}), {1, 0}), 1, {1, 3});
                        std::vector<Tensor<double>> order{pieces[1], pieces[0]};
                        return sum_all(mul(concat(order, 1), cs));
                    },
                    {xs});
    CHECK(rep.pass);

    auto xl = rand_tensor({2, 5}, eng, 3.0);
    rep = gradcheck("logsumexp", [&] { return sum_all(logsumexp_last(xl)); }, {xl}, 1e-5, 1e-6);
    CHECK(rep.pass);

    auto xd = rand_tensor({4, 4}, eng);
    auto cd = rand_tensor({4, 4}, eng);
    rep = gradcheck("dropout",
                    [&] {
                        RngStream r(7, "gc", 0);
                        return sum_all(mul(dropout(xd, 0.25, true, &r), cd));
                    },
                    {xd});
    CHECK(rep.pass);
}

TEST_CASE("gradcheck flags a corrupted gradient (negative control)") {
    auto x = Tensor<double>::from_data({3}, {0.5, -0.2, 0.9});
    auto rep = gradcheck("corrupted",
                         [&] {
                             auto y = sum_all(mul(x, x));
                             // wrong by construction: pretends d(x^2) = 3x
                             y.node()->backprop = [](TensorNode<double>& self) {
                                 auto& p = *self.parents[0];
                                 p.grad.assign(p.value.size(), 0.0);
                                 for (size_t i = 0; i < p.value.size(); ++i)
                                     p.grad[i] = 3.0 * p.value[i] * self.grad[0];
                             };
                             return y;
                         },
                         {x});
    CHECK(!rep.pass);
}
