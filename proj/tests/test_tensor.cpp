#include <catch2/catch_amalgamated.hpp>

#include "fwi/gradcheck.hpp"
#include "fwi/tensor.hpp"
#include "oracles.hpp"

using fwi::Tensor;
using fwi::Tape;
using Catch::Approx;

TEST_CASE("tensor construction validates shape against data") {
    CHECK_THROWS_AS(Tensor<float>({2, 3}, {1.f, 2.f}), fwi::ValueError);
    CHECK_THROWS_AS(Tensor<float>({0}, {}), fwi::ValueError);
    Tensor<float> t({2, 2}, {1, 2, 3, 4});
    CHECK(t.numel() == 4);
    CHECK(t.shape() == std::vector<size_t>{2, 2});
}

TEST_CASE("elementwise add") {
    Tensor<double> a({2}, {1, 2});
    Tensor<double> b({2}, {3, 4});
    auto y = fwi::add(a, b);
    CHECK(y.data()[0] == 4.0);
    CHECK(y.data()[1] == 6.0);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
    Tensor<double> a({2}, {1, 2});
    Tensor<double> b({3}, {1, 2, 3});
    CHECK_THROWS_WITH(fwi::add(a, b),
                      Catch::Matchers::ContainsSubstring("[2]") &&
                          Catch::Matchers::ContainsSubstring("[3]"));
}

TEST_CASE("scalar broadcasting on either side") {
    Tensor<double> a({3}, {1, 2, 3});
    Tensor<double> s = Tensor<double>::scalar(10);
    auto y1 = fwi::mul(a, s);
    auto y2 = fwi::mul(s, a);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(y1.data()[i] == a.data()[i] * 10);
        CHECK(y2.data()[i] == a.data()[i] * 10);
    }
}

TEST_CASE("abs backward uses sign, 0 at the kink") {
    Tensor<double> x({3}, {-3.5, 0.0, 2.0}, true);
    Tape<double> tape;
    auto loss = fwi::sum(fwi::abs(x));
    tape.backward(loss);
    CHECK(x.grad()[0] == -1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("log1p at zero has value 0 and gradient 1") {
    Tensor<double> x({1}, {0.0}, true);
    Tape<double> tape;
    auto y = fwi::sum(fwi::log1p(x));
    CHECK(y.item() == 0.0);
    tape.backward(y);
    CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("matmul identity and small case") {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> m({2, 2}, {1, 2, 3, 4});
    auto y = fwi::matmul(eye, m);
    for (size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == m.data()[i]);

    Tensor<double> a({1, 2}, {1, 2});
    Tensor<double> b({2, 1}, {3, 4});
    CHECK(fwi::matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul inner-dimension mismatch") {
    Tensor<double> a({2, 3}, std::vector<double>(6, 1.0));
    Tensor<double> b({2, 3}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(fwi::matmul(a, b), fwi::ValueError);
}

TEST_CASE("matmul matches triple-loop oracle") {
    auto a = oracle::random_tensor<double>({4, 3}, 11);
    auto b = oracle::random_tensor<double>({3, 5}, 12);
    auto y = fwi::matmul(a, b);
    auto ref = oracle::matmul(std::vector<double>(a.data().begin(), a.data().end()),
                              std::vector<double>(b.data().begin(), b.data().end()), 4, 3, 5);
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(y.data()[i] == Approx(ref[i]).margin(1e-12));
}

TEST_CASE("backward of sum gives ones") {
    Tensor<double> x({3}, {5, 6, 7}, true);
    Tape<double> tape;
    auto loss = fwi::sum(x);
    tape.backward(loss);
    for (size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum(x*x)") {
    Tensor<double> x({2}, {1, 2}, true);
    Tape<double> tape;
    auto loss = fwi::sum(fwi::mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == Approx(2.0));
    CHECK(x.grad()[1] == Approx(4.0));
}

TEST_CASE("gradient accumulates when a leaf is used twice") {
    Tensor<double> x({2}, {1.5, -2.0}, true);
    Tape<double> tape;
    auto loss = fwi::sum(fwi::add(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
    Tensor<double> x({2}, {1, 2}, true);
    {
        Tape<double> tape;
        auto y = fwi::add(x, x);
        CHECK_THROWS_AS(tape.backward(y), fwi::ValueError);
    }
    {
        Tensor<double> frozen({2}, {1, 2}, false);
        Tape<double> tape;
        auto y = fwi::sum(frozen);
        CHECK_THROWS_AS(tape.backward(y), fwi::ValueError);
    }
}

TEST_CASE("frozen tensors never accumulate gradients") {
    Tensor<double> x({2}, {1, 2}, true);
    Tensor<double> w({2}, {3, 4}, false);
    Tape<double> tape;
    auto loss = fwi::sum(fwi::mul(x, w));
    tape.backward(loss);
    CHECK(x.has_grad());
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("no recording happens without an active tape") {
    Tensor<double> x({2}, {1, 2}, true);
    auto y = fwi::mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward results are deterministic across repeated evaluation") {
    auto a = oracle::random_tensor<float>({16, 16}, 99);
    auto b = oracle::random_tensor<float>({16, 16}, 100);
    auto y1 = fwi::matmul(a, b);
    auto y2 = fwi::matmul(a, b);
    CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}

TEST_CASE("reshape and crop_center round gradients back") {
    Tensor<double> x({1, 1, 4, 4},
                     {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}, true);
    Tape<double> tape;
    auto y = fwi::crop_center(x, 2, 2);
    CHECK(y.data()[0] == 5.0);
    CHECK(y.data()[3] == 10.0);
    auto loss = fwi::sum(y);
    tape.backward(loss);
    double total = 0;
    for (double g : x.grad()) total += g;
    CHECK(total == 4.0);
    CHECK(x.grad()[5] == 1.0);
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("finite_difference_check on quadratic is near-exact") {
    Tensor<double> x({3}, {1, 2, 3});
    double err = fwi::finite_difference_check(
        [](const Tensor<double>& v) { return fwi::sum(fwi::mul(v, v)); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite_difference_check on L1 away from the kink") {
    auto x = oracle::random_tensor<double>({8}, 7, 0.5, 2.0);
    auto target = oracle::random_tensor<double>({8}, 8, -2.0, -0.5);
    double err = fwi::finite_difference_check(
        [&target](const Tensor<double>& v) { return fwi::mean(fwi::abs(fwi::sub(v, target))); },
        x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("finite_difference_check across composed elementwise ops") {
    auto x = oracle::random_tensor<double>({6}, 21, 0.1, 1.5);
    double err = fwi::finite_difference_check(
        [](const Tensor<double>& v) {
            auto y = fwi::log1p(fwi::mul(v, v));
            y = fwi::tanh(fwi::scale(y, 0.7));
            y = fwi::leaky_relu(fwi::sub(y, Tensor<double>::scalar(0.2)), 0.2);
            return fwi::mean(y);
        },
        x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("matmul gradcheck") {
    auto a = oracle::random_tensor<double>({3, 4}, 31);
    auto b = oracle::random_tensor<double>({4, 2}, 32);
    double err_a = fwi::finite_difference_check(
        [&]() { return fwi::sum(fwi::tanh(fwi::matmul(a, b))); }, a, 1e-5);
    double err_b = fwi::finite_difference_check(
        [&]() { return fwi::sum(fwi::tanh(fwi::matmul(a, b))); }, b, 1e-5);
    CHECK(err_a < 1e-6);
    CHECK(err_b < 1e-6);
}
