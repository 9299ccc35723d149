#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "taskmoe/error.hpp"
#include "taskmoe/grad_check.hpp"
#include "taskmoe/ops.hpp"
#include "test_util.hpp"

namespace taskmoe {
namespace {

using testing::naive_matmul;
using testing::random_matrix;

TEST(Affine, IdentityRight) {
    const Matrix x{{1.0, 2.0}};
    EXPECT_EQ(affine(x, Matrix::identity(2)), x);
}

TEST(Affine, IdentityLeft) {
    const Matrix w{{3.0, 4.0}, {5.0, 6.0}};
    EXPECT_EQ(affine(Matrix::identity(2), w), w);
}

TEST(Affine, MatchesTripleLoopExactlyUpTo8x8) {
    Rng rng(7);
    for (std::size_t n = 1; n <= 8; ++n) {
        for (std::size_t k = 1; k <= 8; ++k) {
            for (std::size_t m = 1; m <= 8; ++m) {
                const Matrix a = random_matrix(rng, n, k);
                const Matrix b = random_matrix(rng, k, m);
                ASSERT_EQ(affine(a, b), naive_matmul(a, b)) << n << "x" << k << "x" << m;
            }
        }
    }
}

TEST(Affine, ShapeMismatchThrows) {
    EXPECT_THROW(affine(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Affine, BackwardMatchesFiniteDifferences) {
    Rng rng(11);
    Parameter x(random_matrix(rng, 3, 4));
    Parameter w(random_matrix(rng, 4, 2));
    const Matrix upstream = random_matrix(rng, 3, 2);
    auto loss = [&] {
        const Matrix y = affine(x.value, w.value);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            acc += y.data()[i] * upstream.data()[i];
        }
        return acc;
    };
    affine_backward(x.value, w.value, upstream, &x.grad, &w.grad);
    std::vector<Parameter*> params{&x, &w};
    EXPECT_LT(grad_check(loss, params, 1e-4).max_rel_error, 1e-6);
}

TEST(Relu, SignCases) {
    EXPECT_EQ(relu(Matrix{{-1.0, 0.0, 2.0}}), (Matrix{{0.0, 0.0, 2.0}}));
    EXPECT_EQ(relu(Matrix{{-1.0, -3.0}, {-0.5, -2.0}}), Matrix(2, 2));
}

TEST(Relu, BackwardSubgradientZeroAtZero) {
    const Matrix x{{-1.0, 0.0, 2.0}};
    EXPECT_EQ(relu_backward(x, Matrix{{1.0, 1.0, 1.0}}), (Matrix{{0.0, 0.0, 1.0}}));

    // Away from the kink the mask agrees with central differences.
    Parameter p(Matrix{{-1.0, 0.5, 2.0}});
    p.grad = relu_backward(p.value, Matrix{{1.0, 1.0, 1.0}});
    auto loss = [&p] {
        const Matrix y = relu(p.value);
        return std::accumulate(y.data().begin(), y.data().end(), 0.0);
    };
    std::vector<Parameter*> params{&p};
    EXPECT_LT(grad_check(loss, params, 1e-4).max_rel_error, 1e-8);
}

TEST(Softmax, Symmetry) {
    const auto p = softmax(std::vector<double>{0.0, 0.0});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, ShiftInvariance) {
    for (double c : {-1000.0, -3.5, 0.0, 42.0, 1000.0}) {
        const auto p = softmax(std::vector<double>{c, c, c, c});
        for (double v : p) {
            EXPECT_DOUBLE_EQ(v, 0.25);
        }
    }
}

TEST(Softmax, MatchesDirectExponentiation) {
    const std::vector<double> z{2.0, 1.0, 0.5, -1.0};
    const auto oracle = testing::direct_softmax(z);
    const auto p = softmax(z);
    const std::vector<double> frozen{0.6094, 0.2242, 0.1360, 0.0303};
    for (std::size_t i = 0; i < z.size(); ++i) {
        EXPECT_NEAR(p[i], oracle[i], 1e-15);
        EXPECT_NEAR(p[i], frozen[i], 1e-4);
    }
}

TEST(Softmax, ProbabilityVectorProperty) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<double> z(n);
        for (double& v : z) {
            v = rng.normal() * 5.0;
        }
        const auto p = softmax(z);
        const double total = std::accumulate(p.begin(), p.end(), 0.0);
        EXPECT_NEAR(total, 1.0, 1e-12);
        for (double v : p) {
            EXPECT_GE(v, 0.0);
        }
        std::vector<double> shifted = z;
        const double c = rng.normal() * 10.0;
        for (double& v : shifted) {
            v += c;
        }
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(p[i], q[i], 1e-12);
        }
    }
}

TEST(Softmax, EmptyThrows) {
    EXPECT_THROW(softmax(std::vector<double>{}), ShapeError);
}

TEST(CrossEntropy, HugeMarginGoesToZero) {
    const Matrix logits{{100.0, 0.0, 0.0}, {0.0, 0.0, 100.0}};
    const std::vector<std::size_t> targets{0, 2};
    EXPECT_LT(cross_entropy(logits, targets), 1e-40);
}

TEST(CrossEntropy, UniformIsLogV) {
    const Matrix logits(3, 4, 0.7);
    const std::vector<std::size_t> targets{0, 1, 3};
    EXPECT_NEAR(cross_entropy(logits, targets), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, MatchesFormulaAndGradient) {
    const Matrix logits{{0.3, -1.2, 2.0}, {1.5, 0.1, -0.4}};
    const std::vector<std::size_t> targets{1, 0};
    // Hand evaluation: mean of log Σ exp(z) − z_target.
    double expected = 0.0;
    for (std::size_t s = 0; s < 2; ++s) {
        double z = 0.0;
        for (std::size_t v = 0; v < 3; ++v) {
            z += std::exp(logits(s, v));
        }
        expected += std::log(z) - logits(s, targets[s]);
    }
    expected /= 2.0;
    Matrix grad;
    EXPECT_NEAR(cross_entropy(logits, targets, &grad), expected, 1e-14);

    Parameter p(logits);
    p.grad = grad;
    auto loss = [&] { return cross_entropy(p.value, targets); };
    std::vector<Parameter*> params{&p};
    EXPECT_LT(grad_check(loss, params, 1e-4).max_rel_error, 1e-7);
}

TEST(CrossEntropy, OutOfRangeTarget) {
    const std::vector<std::size_t> targets{3};
    EXPECT_THROW(cross_entropy(Matrix(1, 3), targets), IndexError);
}

TEST(RmsNorm, BackwardMatchesFiniteDifferences) {
    Rng rng(5);
    Parameter x(random_matrix(rng, 3, 5));
    const Matrix upstream = random_matrix(rng, 3, 5);
    const Matrix y = rms_norm(x.value);
    rms_norm_backward(x.value, y, upstream, x.grad);
    auto loss = [&] {
        const Matrix out = rms_norm(x.value);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            acc += out.data()[i] * upstream.data()[i];
        }
        return acc;
    };
    std::vector<Parameter*> params{&x};
    EXPECT_LT(grad_check(loss, params, 1e-4).max_rel_error, 1e-6);
}

TEST(GradCheck, Square) {
    Parameter w(Matrix{{3.0}});
    w.grad(0, 0) = 6.0;
    auto loss = [&w] { return w.value(0, 0) * w.value(0, 0); };
    std::vector<Parameter*> params{&w};
    EXPECT_LT(grad_check(loss, params, 1e-4).max_rel_error, 1e-6);
    EXPECT_EQ(w.value(0, 0), 3.0);
}

TEST(GradCheck, ConstantFunction) {
    Parameter w(Matrix{{1.0, -2.0}});
    auto loss = [] { return 4.2; };
    std::vector<Parameter*> params{&w};
    const auto r = grad_check(loss, params, 1e-4);
    EXPECT_EQ(r.max_rel_error, 0.0);
    EXPECT_EQ(r.coords_checked, 2u);
}

TEST(GradCheck, NonFiniteLossThrows) {
    Parameter w(Matrix{{1.0}});
    auto loss = [] { return std::nan(""); };
    std::vector<Parameter*> params{&w};
    EXPECT_THROW(grad_check(loss, params, 1e-4), EvaluationError);
    EXPECT_THROW(grad_check([] { return 0.0; }, params, 0.0), ValidationError);
}

} // namespace
} // namespace taskmoe
