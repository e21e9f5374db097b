#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "timesbert/gradcheck.hpp"
#include "timesbert/ops.hpp"

using namespace timesbert;
using timesbert::testing::random_tensor;

namespace {

Tensor param(Shape shape, std::vector<double> v) { return Tensor(std::move(shape), std::move(v), true); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor out = ops::matmul(eye, m);
    EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
    Tensor out = ops::matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
    EXPECT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(out.item(), 11.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    // Oracle: central differences of sum(a.b) at a=[[1,1]], b=[[2],[5]], h=1e-6.
    auto f = [](double a0, double a1) { return a0 * 2.0 + a1 * 5.0; };
    const double h = 1e-6;
    const double fd0 = (f(1 + h, 1) - f(1 - h, 1)) / (2 * h);
    const double fd1 = (f(1, 1 + h) - f(1, 1 - h)) / (2 * h);
    ASSERT_NEAR(fd0, 2.0, 1e-8);
    ASSERT_NEAR(fd1, 5.0, 1e-8);

    Tensor a = param({1, 2}, {1, 1});
    Tensor b = Tensor::matrix(2, 1, {2, 5});
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(ops::sum(ops::matmul(a, b)));
    }
    EXPECT_NEAR(a.grad()[0], 2.0, 1e-12);
    EXPECT_NEAR(a.grad()[1], 5.0, 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        ops::matmul(Tensor({2, 3}), Tensor({2, 3}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    }
}

TEST(Softmax, UniformForEqualLogits) {
    Tensor out = ops::softmax(Tensor({2}, {0, 0}));
    EXPECT_DOUBLE_EQ(out[0], 0.5);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tensor out = ops::softmax(Tensor({2}, {1000, 1000}));
    EXPECT_DOUBLE_EQ(out[0], 0.5);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, LogThree) {
    Tensor out = ops::softmax(Tensor({2}, {0, std::log(3.0)}));
    EXPECT_NEAR(out[0], 0.25, 1e-15);
    EXPECT_NEAR(out[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeRandomInputs) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = random_tensor({1 + rng.uniform_int(6), 1 + rng.uniform_int(9)}, rng, 1e3);
        Tensor y = ops::softmax(x);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) s += y.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerNorm, ConstantRowCollapsesToBeta) {
    Tensor out = ops::layer_norm(Tensor({3}, {1, 1, 1}), Tensor({3}, {1, 1, 1}), Tensor({3}));
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceInputIsNearlyUnchanged) {
    Tensor out = ops::layer_norm(Tensor({2}, {-1, 1}), Tensor({2}, {1, 1}), Tensor({2}));
    EXPECT_NEAR(out[0], -1.0, 1e-4);
    EXPECT_NEAR(out[1], 1.0, 1e-4);
}

TEST(LayerNorm, AffineShift) {
    // Hand evaluation: mean 1, var 1, x_hat = +-1/sqrt(1 + 1e-5).
    const double xhat = 1.0 / std::sqrt(1.0 + 1e-5);
    Tensor out = ops::layer_norm(Tensor({2}, {0, 2}), Tensor({2}, {1, 1}), Tensor({2}, {5, 5}));
    EXPECT_NEAR(out[0], 5.0 - xhat, 1e-12);
    EXPECT_NEAR(out[1], 5.0 + xhat, 1e-12);
    EXPECT_NEAR(out[0], 4.0, 1e-4);
    EXPECT_NEAR(out[1], 6.0, 1e-4);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVarianceBeforeAffine) {
    Rng rng(5);
    Tensor x = random_tensor({7, 9}, rng, 3.0);
    Tensor ones({9});
    for (double& v : ones.values()) v = 1.0;
    Tensor y = ops::layer_norm(x, ones, Tensor({9}), 0.0);
    for (std::size_t r = 0; r < 7; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 9; ++c) m += y.at(r, c);
        m /= 9;
        for (std::size_t c = 0; c < 9; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
        EXPECT_NEAR(m, 0.0, 1e-9);
        EXPECT_NEAR(v / 9, 1.0, 1e-9);
    }
}

TEST(CrossEntropy, UniformLogits) {
    std::vector<int> y{0};
    EXPECT_NEAR(ops::cross_entropy_from_logits(Tensor({1, 4}), y).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectClassIsNearZero) {
    std::vector<int> y{0};
    EXPECT_NEAR(ops::cross_entropy_from_logits(Tensor::matrix(1, 2, {10, -10}), y).item(), 0.0, 1e-8);
}

TEST(CrossEntropy, HandEvaluatedLogSumExp) {
    std::vector<int> y{1};
    EXPECT_NEAR(ops::cross_entropy_from_logits(Tensor::matrix(1, 2, {1, 0}), y).item(), std::log(1.0 + std::exp(1.0)),
                1e-12);
    EXPECT_NEAR(ops::cross_entropy_from_logits(Tensor::matrix(1, 2, {1, 0}), y).item(), 1.3133, 1e-4);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
    std::vector<int> y{2};
    EXPECT_THROW(ops::cross_entropy_from_logits(Tensor({1, 2}), y), std::out_of_range);
}

TEST(GradCheck, SumOfSquares) {
    Tensor x = param({3}, {1, 2, 3});
    auto report = check_gradients([&] { return ops::sum(ops::mul(x, x)); }, {{"x", x}});
    EXPECT_TRUE(report.passed);
    EXPECT_EQ(report.checked, 3u);
    EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
    EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);
    EXPECT_NEAR(x.grad()[2], 6.0, 1e-12);
}

TEST(GradCheck, RejectsNonDeterministicFunction) {
    Tensor x = param({1}, {1});
    int calls = 0;
    EXPECT_THROW(check_gradients([&] { return Tensor::scalar(x[0] + (calls++)); }, {{"x", x}}), std::runtime_error);
}

TEST(GradCheck, ReportsWorstOffenders) {
    // A deliberately wrong backward: detach part of the graph.
    Tensor x = param({2}, {1, 2});
    auto report = check_gradients(
        [&] {
            Tensor frozen = x.detach();
            return ops::sum(ops::mul(x, frozen));
        },
        {{"x", x}});
    EXPECT_FALSE(report.passed);
    ASSERT_FALSE(report.worst.empty());
    EXPECT_GT(report.worst.front().rel_error, 0.1);
}

TEST(Primitives, BackwardMatchesFiniteDifferencesOnRandomShapes) {
    for (const auto& c : timesbert::testing::primitive_cases()) {
        Rng rng(derive_seed({17, hash_string(c.name)}));
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            auto report = c.run(rng);
            worst = std::max(worst, report.max_rel_error);
        }
        EXPECT_LE(worst, 1e-4) << c.name;
    }
}

TEST(Primitives, ForwardIsBitwiseDeterministic) {
    Rng rng(3);
    Tensor q = random_tensor({6, 8}, rng), k = random_tensor({6, 8}, rng), v = random_tensor({6, 8}, rng);
    AttentionMask mask(6, true);
    Tensor a = ops::masked_attention(q, k, v, mask, 2);
    Tensor b = ops::masked_attention(q, k, v, mask, 2);
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)));
}

TEST(Primitives, NonFiniteOutputIsAnError) {
    Tensor x({1}, {std::numeric_limits<double>::max()});
    EXPECT_THROW(ops::scale(x, 10.0), NumericError);
}

TEST(Attention, DisallowedKeysAreIgnored) {
    Rng rng(9);
    Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
    AttentionMask only_self(3);
    for (std::size_t i = 0; i < 3; ++i) only_self.set(i, i, true);
    Tensor out = ops::masked_attention(q, k, v, only_self, 2);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], v[i]);
}

TEST(Attention, QueryWithoutKeysYieldsZeroRow) {
    Rng rng(10);
    Tensor q = random_tensor({2, 2}, rng);
    AttentionMask mask(2);
    mask.set(0, 0, true);
    Tensor out = ops::masked_attention(q, q, q, mask, 1);
    EXPECT_DOUBLE_EQ(out.at(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(out.at(1, 1), 0.0);
}

TEST(Tape, ReplaysInReverseOrderAndAccumulatesSharedUses) {
    // y = x*x + 3x uses x on two paths; dy/dx = 2x + 3.
    Tensor x = param({1}, {2});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = ops::add(ops::mul(x, x), ops::scale(x, 3.0));
        EXPECT_EQ(tape.size(), 3u);
        tape.backward(y);
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tape, NothingIsRecordedWithoutAnActiveTape) {
    Tensor x = param({1}, {2});
    Tensor y = ops::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
}
