#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dfmad/autodiff.hpp"
#include "dfmad/error.hpp"
#include "dfmad/random.hpp"
#include "oracles.hpp"

using namespace dfmad;

namespace {

Var param(std::initializer_list<double> values)
{
    return parameter(Tensor::vector(values));
}

Var random_param(Shape shape, Rng& rng, double stddev = 1.0)
{
    return parameter(randn(std::move(shape), stddev, rng));
}

} // namespace

TEST(Tensor, ShapeMustMatchData)
{
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    const Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(shape_numel(t.shape()), t.values().size());
}

TEST(Tensor, ScalarHasRankZero)
{
    const Tensor s = Tensor::scalar(4.0);
    EXPECT_EQ(s.rank(), 0u);
    EXPECT_DOUBLE_EQ(s.item(), 4.0);
    EXPECT_THROW(Tensor::vector({1, 2}).item(), ShapeError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged)
{
    const auto out = matmul(constant(Tensor::matrix({{1, 0}, {0, 1}})), constant(Tensor::matrix({{3, 4}, {5, 6}})));
    EXPECT_EQ(out->value, Tensor::matrix({{3, 4}, {5, 6}}));
}

TEST(Matmul, TwoByTwoProduct)
{
    const auto out = matmul(constant(Tensor::matrix({{1, 2}, {3, 4}})), constant(Tensor::matrix({{5, 6}, {7, 8}})));
    EXPECT_EQ(out->value, Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Matmul, GradOfSumWithOnesColumn)
{
    auto a = parameter(Tensor::matrix({{0.3, -1.2}, {2.0, 0.7}, {-0.4, 0.1}}));
    auto b = constant(Tensor::matrix({{1}, {1}}));
    backward(sum(matmul(a, b)));
    ASSERT_TRUE(a->has_grad());
    for (double g : a->grad.values()) {
        EXPECT_EQ(g, 1.0);
    }
    EXPECT_EQ(a->grad.shape(), a->value.shape());

    auto loss = [&] { return sum(matmul(a, b)); };
    const Var params[] = {a};
    EXPECT_LT(oracle::max_gradient_error(loss, params), 1e-8);
}

TEST(Matmul, ShapeErrorNamesBothShapes)
{
    try {
        matmul(constant(Tensor({2, 3})), constant(Tensor({2, 3})));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find(". [2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesNaiveProductOnRandomShapes)
{
    Rng rng(3);
    std::uniform_int_distribution<std::size_t> dim(1, 9);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
        const Tensor a = randn({m, k}, 1.0, rng);
        const Tensor b = randn({k, n}, 1.0, rng);
        const auto got = matmul(constant(a), constant(b))->value;
        const auto want = oracle::matmul(a.values(), b.values(), m, k, n);
        for (std::size_t i = 0; i < want.size(); ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-12);
        }
    }
}

TEST(Linear, EqualsMatmulWithTransposedWeight)
{
    Rng rng(8);
    const Tensor x = randn({5, 4}, 1.0, rng);
    const Tensor w = randn({3, 4}, 1.0, rng);
    const Tensor b = randn({3}, 1.0, rng);
    const auto got = linear(constant(x), constant(w), constant(b))->value;
    const auto xw = matmul(constant(x), transpose(constant(w)))->value;
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_NEAR(got.at(i, j), xw.at(i, j) + b[j], 1e-12);
        }
    }
    EXPECT_THROW(linear(constant(x), constant(randn({3, 5}, 1.0, rng))), ShapeError);
}

TEST(Elementwise, SigmoidOfZeroIsHalf)
{
    EXPECT_EQ(sigmoid(constant(Tensor::scalar(0.0)))->value.item(), 0.5);
}

TEST(Elementwise, Subtract)
{
    const auto out = sub(constant(Tensor::vector({3, 5})), constant(Tensor::vector({1, 2})));
    EXPECT_EQ(out->value, Tensor::vector({2, 3}));
}

TEST(Elementwise, SigmoidDerivativeAtZero)
{
    auto x = parameter(Tensor::scalar(0.0));
    backward(sigmoid(x));
    EXPECT_DOUBLE_EQ(x->grad.item(), 0.25);
    const Var params[] = {x};
    EXPECT_LT(oracle::max_gradient_error([&] { return sigmoid(x); }, params), 1e-8);
}

TEST(Elementwise, LogOfNonPositiveIsDomainError)
{
    EXPECT_THROW(log(constant(Tensor::vector({1.0, 0.0}))), DomainError);
    EXPECT_THROW(log(constant(Tensor::vector({-2.0}))), DomainError);
}

TEST(Elementwise, IncompatibleBroadcastIsShapeError)
{
    EXPECT_THROW(add(constant(Tensor({2, 3})), constant(Tensor({2}))), ShapeError);
    EXPECT_THROW(mul(constant(Tensor({4})), constant(Tensor({3}))), ShapeError);
}

TEST(Elementwise, TrailingAxisBroadcast)
{
    const auto out = add(constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}})), constant(Tensor::vector({10, 20, 30})));
    EXPECT_EQ(out->value, Tensor::matrix({{11, 22, 33}, {14, 25, 36}}));
    const auto scaled = mul(constant(Tensor::scalar(2.0)), constant(Tensor::vector({1, 2})));
    EXPECT_EQ(scaled->value, Tensor::vector({2, 4}));
}

TEST(Elementwise, OverflowIsNumericError)
{
    EXPECT_THROW(exp(constant(Tensor::vector({1000.0}))), NumericError);
}

TEST(LayerNorm, ConstantInputGivesBias)
{
    const auto out = layer_norm(constant(Tensor::vector({2.5, 2.5, 2.5})), constant(Tensor::vector({3, -1, 2})),
                                constant(Tensor::vector({0.1, 0.2, 0.3})), 1e-6);
    EXPECT_EQ(out->value, Tensor::vector({0.1, 0.2, 0.3}));
}

TEST(LayerNorm, AlreadyNormalisedInput)
{
    const auto out = layer_norm(constant(Tensor::vector({1, -1})), constant(Tensor::vector({1, 1})),
                                constant(Tensor::vector({0, 0})), 1e-12);
    EXPECT_NEAR(out->value[0], 1.0, 1e-10);
    EXPECT_NEAR(out->value[1], -1.0, 1e-10);
}

TEST(LayerNorm, NonPositiveEpsIsConfigError)
{
    const auto x = constant(Tensor::vector({1, 2}));
    const auto g = constant(Tensor::vector({1, 1}));
    EXPECT_THROW(layer_norm(x, g, g, 0.0), ConfigError);
    EXPECT_THROW(layer_norm(x, g, g, -1e-5), ConfigError);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences)
{
    Rng rng(21);
    auto x = random_param({4, 6}, rng);
    auto g = random_param({6}, rng);
    auto b = random_param({6}, rng);
    const auto w = constant(randn({4, 6}, 1.0, rng));
    auto loss = [&] { return sum(mul(layer_norm(x, g, b, 1e-6), w)); };
    const Var params[] = {x, g, b};
    EXPECT_LT(oracle::max_gradient_error(loss, params), 1e-5);
}

TEST(Softmax, UniformInput)
{
    const auto out = softmax(constant(Tensor::vector({0, 0, 0})), 0);
    for (double v : out->value.values()) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
}

TEST(Softmax, LargeInputDoesNotOverflow)
{
    const auto out = softmax(constant(Tensor::vector({1000, 0})), 0);
    EXPECT_NEAR(out->value[0], 1.0, 1e-15);
    EXPECT_NEAR(out->value[1], 0.0, 1e-15);
}

TEST(Softmax, JacobianRowsSumToZero)
{
    Rng rng(4);
    auto x = random_param({3, 5}, rng, 2.0);
    backward(sum(softmax(x, 1)));
    for (double g : x->grad.values()) {
        EXPECT_NEAR(g, 0.0, 1e-14);
    }
}

TEST(Softmax, OutputsAreDistributionsAlongAxis)
{
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = randn({4, 7}, 5.0, rng);
        for (std::size_t axis : {0u, 1u}) {
            const auto out = softmax(constant(x), axis)->value;
            const std::size_t rows = axis == 1 ? 4 : 7;
            const std::size_t len = axis == 1 ? 7 : 4;
            for (std::size_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double v = axis == 1 ? out.at(r, j) : out.at(j, r);
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        }
    }
}

TEST(Backward, IdentityLoss)
{
    auto x = parameter(Tensor::scalar(1.7));
    backward(x);
    EXPECT_EQ(x->grad.item(), 1.0);
}

TEST(Backward, Square)
{
    auto x = parameter(Tensor::scalar(3.0));
    backward(mul(x, x));
    EXPECT_EQ(x->grad.item(), 6.0);
}

TEST(Backward, NonScalarLossIsContractError)
{
    auto x = param({1, 2});
    EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, RunningTwiceDoublesLeafGradients)
{
    Rng rng(9);
    auto w = random_param({3, 4}, rng);
    auto x = constant(randn({2, 4}, 1.0, rng));
    const auto loss = sum(gelu(linear(x, w)));
    backward(loss);
    const Tensor once = w->grad;
    backward(loss);
    for (std::size_t i = 0; i < once.numel(); ++i) {
        EXPECT_EQ(w->grad[i], 2.0 * once[i]);
    }
}

TEST(Backward, GradientsAccumulateOverSharedPaths)
{
    auto x = parameter(Tensor::scalar(2.0));
    backward(add(mul(x, x), scale(x, 3.0)));
    EXPECT_DOUBLE_EQ(x->grad.item(), 7.0);
}

TEST(Backward, RandomThreeLayerMlpMatchesFiniteDifferences)
{
    Rng rng(2024);
    auto w1 = random_param({8, 5}, rng, 0.5);
    auto b1 = random_param({8}, rng, 0.1);
    auto w2 = random_param({6, 8}, rng, 0.5);
    auto b2 = random_param({6}, rng, 0.1);
    auto w3 = random_param({1, 6}, rng, 0.5);
    auto b3 = random_param({1}, rng, 0.1);
    const auto x = constant(randn({4, 5}, 1.0, rng));
    auto loss = [&] {
        auto h = gelu(linear(x, w1, b1));
        h = sigmoid(linear(h, w2, b2));
        return mean(pow(linear(h, w3, b3), 2.0));
    };
    const Var params[] = {w1, b1, w2, b2, w3, b3};
    EXPECT_LT(oracle::max_gradient_error(loss, params), 1e-4);
}

TEST(Backward, GradShapeMatchesValueShape)
{
    Rng rng(1);
    auto w = random_param({3, 2}, rng);
    auto b = random_param({3}, rng);
    backward(sum(linear(constant(randn({5, 2}, 1.0, rng)), w, b)));
    EXPECT_EQ(w->grad.shape(), w->value.shape());
    EXPECT_EQ(b->grad.shape(), b->value.shape());
}

TEST(FiniteDifferenceCheck, Square)
{
    auto x = parameter(Tensor::scalar(2.0));
    const Var params[] = {x};
    const auto r = finite_difference_check([&] { return mul(x, x); }, params, 1e-5);
    EXPECT_LT(r.max_relative_error, 1e-8);
    EXPECT_NEAR(r.analytic, 4.0, 1e-12);
}

TEST(FiniteDifferenceCheck, ConstantFunction)
{
    auto x = param({1.0, -2.0});
    const Var params[] = {x};
    const auto c = constant(Tensor::scalar(3.0));
    const auto r = finite_difference_check([&] { return add(c, scale(sum(x), 0.0)); }, params, 1e-5);
    EXPECT_EQ(r.analytic, 0.0);
    EXPECT_NEAR(r.numeric, 0.0, 1e-12);
    EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(FiniteDifferenceCheck, AgreesWithIndependentOracle)
{
    Rng rng(12);
    auto w = random_param({3, 3}, rng);
    const auto x = constant(randn({2, 3}, 1.0, rng));
    auto loss = [&] { return sum(exp(scale(linear(x, w), 0.3))); };
    const Var params[] = {w};
    const double library = finite_difference_check(loss, params).max_relative_error;
    const double reference = oracle::max_gradient_error(loss, params);
    EXPECT_LT(library, 1e-6);
    EXPECT_NEAR(library, reference, 1e-9);
}

TEST(FiniteDifferenceCheck, RejectsNonPositiveStep)
{
    auto x = param({1.0});
    const Var params[] = {x};
    EXPECT_THROW(finite_difference_check([&] { return sum(x); }, params, 0.0), ConfigError);
}

// Every differentiable operation against central differences on random inputs.
class OperationGradient : public ::testing::TestWithParam<int> {};

TEST_P(OperationGradient, MatchesFiniteDifferences)
{
    Rng rng(derive_seed(77, {static_cast<std::uint64_t>(GetParam())}));
    auto a = random_param({3, 4}, rng);
    auto b = random_param({3, 4}, rng);
    auto v = random_param({4}, rng);
    auto positive = parameter(uniform({3, 4}, 0.5, 2.0, rng));
    auto m = random_param({4, 2}, rng);
    const auto weights = constant(randn({3, 4}, 1.0, rng));

    std::vector<std::pair<const char*, std::function<Var()>>> cases = {
        {"add", [&] { return sum(mul(add(a, b), weights)); }},
        {"sub", [&] { return sum(mul(sub(a, v), weights)); }},
        {"mul", [&] { return sum(mul(mul(a, b), weights)); }},
        {"div", [&] { return sum(mul(div(a, positive), weights)); }},
        {"sigmoid", [&] { return sum(mul(sigmoid(a), weights)); }},
        {"gelu", [&] { return sum(mul(gelu(a), weights)); }},
        {"log", [&] { return sum(mul(log(positive), weights)); }},
        {"exp", [&] { return sum(mul(exp(scale(a, 0.5)), weights)); }},
        {"neg", [&] { return sum(mul(neg(a), weights)); }},
        {"pow", [&] { return sum(mul(pow(positive, 1.7), weights)); }},
        {"add_scalar", [&] { return sum(mul(add_scalar(a, 0.3), weights)); }},
        {"matmul", [&] { return sum(mul(matmul(a, m), constant(Tensor({3, 2}, 0.7)))); }},
        {"transpose", [&] { return sum(mul(transpose(a), transpose(weights))); }},
        {"linear",
         [&] {
             const auto y = linear(a, transpose(m), constant(Tensor({2}, 0.1)));
             return sum(mul(y, constant(Tensor({3, 2}, 0.3))));
         }},
        {"softmax", [&] { return sum(mul(softmax(a, 1), weights)); }},
        {"layer_norm", [&] { return sum(mul(layer_norm(a, v, v, 1e-6), weights)); }},
        {"mean", [&] { return mean(mul(a, b)); }},
        {"reshape", [&] { return sum(mul(reshape(a, {4, 3}), reshape(weights, {4, 3}))); }},
        {"slice_cols", [&] { return sum(mul(slice_cols(a, 1, 2), slice_cols(weights, 0, 2))); }},
        {"concat_cols", [&] {
             const Var parts[] = {a, b};
             return sum(mul(concat_cols(parts), concat_cols(std::vector<Var>{weights, weights})));
         }},
        {"concat_rows", [&] { return sum(mul(concat_rows(a, b), concat_rows(weights, weights))); }},
        {"row", [&] { return sum(mul(row(a, 1), v)); }},
    };
    const Var params[] = {a, b, v, positive, m};
    for (const auto& [name, loss] : cases) {
        EXPECT_LT(oracle::max_gradient_error(loss, params), 1e-4) << name;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OperationGradient, ::testing::Range(0, 5));

TEST(NumericPolicy, FiniteInputsStayFiniteInsideDomain)
{
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = constant(randn({3, 5}, 3.0, rng));
        const auto g = constant(randn({5}, 1.0, rng));
        const auto y = softmax(layer_norm(gelu(x), g, g, 1e-6), 1);
        EXPECT_TRUE(y->value.all_finite());
        EXPECT_TRUE(sigmoid(scale(x, 100.0))->value.all_finite());
    }
}

TEST(NoGrad, GuardStopsGraphRecording)
{
    auto x = param({1.0, 2.0});
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        const auto y = mul(x, x);
        EXPECT_FALSE(y->requires_grad);
        EXPECT_TRUE(y->parents.empty());
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_TRUE(mul(x, x)->requires_grad);
}
