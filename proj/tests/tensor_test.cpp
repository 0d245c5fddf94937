#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "trust/nn.hpp"
#include "trust/tensor.hpp"

using trust::Padding;
using trust::Shape;
using trust::Tensor;
using D = Tensor<double>;

namespace {

trust::Rng test_rng(std::uint64_t salt = 0) { return trust::Rng(0xbeef1234 + salt); }

D rand_tensor(Shape shape, trust::Rng& rng, double lo = -1.0, double hi = 1.0) {
    D t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Scalarizes an arbitrary tensor-to-tensor op against a fixed random weight
// and runs the central-difference check on it.
double fd_op(const std::function<D(const D&)>& op, const D& point, std::uint64_t salt = 7,
             double eps = 1e-5) {
    D probe = op(point.clone());
    trust::Rng rng = test_rng(salt);
    D w = rand_tensor(probe.shape(), rng);
    auto f = [&](const D& x) { return trust::sum_all(trust::mul(op(x), w)); };
    return trust::finite_diff_check<double>(f, point, eps);
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityCase) {
    D eye({2, 2}, {1, 0, 0, 1});
    D a({2, 2}, {1, 2, 3, 4});
    D c = trust::matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(c[i], a[i]);
}

TEST(Matmul, OneByOne) {
    D a({1, 1}, {2});
    D b({1, 1}, {3});
    EXPECT_DOUBLE_EQ(trust::matmul(a, b)[0], 6.0);
}

TEST(Matmul, HandExpanded) {
    D a({2, 2}, {1, 2, 3, 4});
    D b({2, 2}, {5, 6, 7, 8});
    D c = trust::matmul(a, b);
    EXPECT_DOUBLE_EQ(c(0, 0), 19.0);
    EXPECT_DOUBLE_EQ(c(0, 1), 22.0);
    EXPECT_DOUBLE_EQ(c(1, 0), 43.0);
    EXPECT_DOUBLE_EQ(c(1, 1), 50.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    D a({2, 3});
    D b({2, 2});
    try {
        trust::matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const trust::DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2, 2]"), std::string::npos) << msg;
    }
}

TEST(Matmul, AssociativityOnRandomTriples) {
    auto rng = test_rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        D a = rand_tensor({3, 4}, rng);
        D b = rand_tensor({4, 5}, rng);
        D c = rand_tensor({5, 2}, rng);
        D left = trust::matmul(trust::matmul(a, b), c);
        D right = trust::matmul(a, trust::matmul(b, c));
        for (std::size_t i = 0; i < left.numel(); ++i)
            EXPECT_NEAR(left[i], right[i], 1e-9);
    }
}

TEST(Matmul, CountsMacs) {
    // a single d=2 -> 2 linear map applied to 3 tokens costs 12 MACs
    D x({3, 2}, {1, 2, 3, 4, 5, 6});
    D w({2, 2}, {1, 0, 0, 1});
    trust::MacCounter::Scope scope;
    trust::matmul(x, w);
    EXPECT_EQ(scope.macs(), 12u);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, UniformRow) {
    D a({1, 3}, {0, 0, 0});
    D s = trust::softmax_rows(a);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, SingleElementRow) {
    D a({1, 1}, {5});
    EXPECT_NEAR(trust::softmax_rows(a)[0], 1.0, 1e-12);
}

TEST(Softmax, ClosedForm) {
    D a({1, 2}, {0.0, std::log(2.0)});
    D s = trust::softmax_rows(a);
    EXPECT_NEAR(s[0], 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(s[1], 2.0 / 3.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    auto rng = test_rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        D a = rand_tensor({4, 7}, rng, -30.0, 30.0);
        D s = trust::softmax_rows(a);
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < 7; ++c) sum += s(r, c);
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
        const double shift = rng.uniform(-5.0, 5.0);
        D b = a.clone();
        for (std::size_t c = 0; c < 7; ++c) b(1, c) += shift;
        D s2 = trust::softmax_rows(b);
        for (std::size_t c = 0; c < 7; ++c) EXPECT_NEAR(s2(1, c), s(1, c), 1e-9);
    }
}

TEST(Softmax, NanInputIsNumericError) {
    D a({1, 2}, {0.0, std::nan("")});
    EXPECT_THROW(trust::softmax_rows(a), trust::NumericError);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityKernel) {
    auto rng = test_rng(3);
    D x = rand_tensor({4, 5, 2}, rng);
    D k({1, 1, 2, 2}, {1, 0, 0, 1});
    D y = trust::conv2d(x, k, 1, Padding::kValid);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, WindowSumWithSamePadding) {
    D x({5, 5, 1}, 1.0);
    D k({3, 3, 1, 1}, 1.0);
    D y = trust::conv2d(x, k, 1, Padding::kSame);
    ASSERT_EQ(y.shape(), (Shape{5, 5, 1}));
    EXPECT_DOUBLE_EQ(y(2, 2, 0), 9.0);  // interior: full window
    EXPECT_DOUBLE_EQ(y(0, 0, 0), 4.0);  // corner: 2x2 window
    EXPECT_DOUBLE_EQ(y(0, 2, 0), 6.0);  // edge: 2x3 window
}

TEST(Conv2d, StrideTwoValidSizeFormula) {
    D x({4, 4, 1}, 1.0);
    D k({3, 3, 1, 1}, 1.0);
    D y = trust::conv2d(x, k, 2, Padding::kValid);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y[0], 9.0);
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
    D x({2, 2, 1}, 1.0);
    D k({5, 5, 1, 1}, 1.0);
    EXPECT_THROW(trust::conv2d(x, k, 1, Padding::kValid), trust::DimensionError);
}

// ---------------------------------------------------------------------------
// layernorm
// ---------------------------------------------------------------------------

TEST(Layernorm, ConstantRowIsZero) {
    D x({2, 4}, 3.5);
    D gain({4}, 1.0);
    D bias({4}, 0.0);
    D y = trust::layernorm(x, gain, bias, 1e-8);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.0, 1e-9);
}

TEST(Layernorm, UnitVarianceRow) {
    D x({1, 2}, {-1.0, 1.0});
    D gain({2}, 1.0);
    D bias({2}, 0.0);
    D y = trust::layernorm(x, gain, bias, 1e-10);
    EXPECT_NEAR(y[0], -1.0, 1e-4);
    EXPECT_NEAR(y[1], 1.0, 1e-4);
}

TEST(Layernorm, BiasOnly) {
    auto rng = test_rng(4);
    D x = rand_tensor({3, 5}, rng);
    D gain({5}, 0.0);
    D bias({5}, 2.25);
    D y = trust::layernorm(x, gain, bias, 1e-6);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 2.25);
}

TEST(Layernorm, ZeroWidthAxisIsDimensionError) {
    D x({2, 0});
    D gain({0});
    D bias({0});
    EXPECT_THROW(trust::layernorm(x, gain, bias, 1e-6), trust::DimensionError);
}

// ---------------------------------------------------------------------------
// concat_tokens
// ---------------------------------------------------------------------------

TEST(ConcatTokens, EmptyPrepend) {
    auto rng = test_rng(5);
    D a({0, 3});
    D b = rand_tensor({4, 3}, rng);
    D c = trust::concat_tokens(a, b);
    ASSERT_EQ(c.shape(), b.shape());
    for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_DOUBLE_EQ(c[i], b[i]);
}

TEST(ConcatTokens, PromptFirst) {
    D a({1, 2}, {9, 9});
    D b({2, 2}, {1, 2, 3, 4});
    D c = trust::concat_tokens(a, b);
    ASSERT_EQ(c.shape(), (Shape{3, 2}));
    EXPECT_DOUBLE_EQ(c(0, 0), 9.0);
    EXPECT_DOUBLE_EQ(c(2, 1), 4.0);
}

TEST(ConcatTokens, GradientOfSumIsAllOnes) {
    D a({2, 3}, 0.5, true);
    D b({4, 3}, 0.25);
    trust::Tape<double> tape;
    tape.backward(trust::sum_all(trust::concat_tokens(a, b)));
    for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(ConcatTokens, DimMismatch) {
    D a({2, 3});
    D b({2, 4});
    EXPECT_THROW(trust::concat_tokens(a, b), trust::DimensionError);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, SumOfSquares) {
    D x({1}, {3.0}, true);
    trust::Tape<double> tape;
    tape.backward(trust::sum_all(trust::mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, UnrelatedParameterStaysZero) {
    D x({3}, 1.0, true);
    D y({3}, 2.0, true);
    trust::Tape<double> tape;
    tape.backward(trust::sum_all(trust::mul(y, y)));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    D x({2}, 1.0, true);
    trust::Tape<double> tape;
    D y = trust::mul(x, x);
    EXPECT_THROW(tape.backward(y), trust::ContractError);
}

TEST(Backward, NoActiveTapeIsContractError) {
    D x({1}, 1.0, true);
    EXPECT_THROW(trust::backward(trust::sum_all(x)), trust::ContractError);
}

TEST(Backward, TwoLayerMatmulChainMatchesFiniteDifference) {
    auto rng = test_rng(6);
    D w1 = rand_tensor({3, 4}, rng);
    D w2 = rand_tensor({4, 2}, rng);
    D x = rand_tensor({2, 3}, rng);
    auto f = [&](const D& p) {
        return trust::sum_all(trust::mul(trust::matmul(trust::matmul(p, w1), w2),
                                         trust::matmul(trust::matmul(p, w1), w2)));
    };
    EXPECT_LE(trust::finite_diff_check<double>(f, x, 1e-5), 1e-4);
}

TEST(Backward, GradAccumulatesWhenValueReused) {
    D x({1}, {2.0}, true);
    trust::Tape<double> tape;
    // x*x + x -> d/dx = 2x + 1 = 5
    tape.backward(trust::sum_all(trust::add(trust::mul(x, x), x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

// ---------------------------------------------------------------------------
// finite_diff_check contract
// ---------------------------------------------------------------------------

TEST(FiniteDiff, LinearIsExact) {
    auto rng = test_rng(7);
    D w = rand_tensor({6}, rng);
    auto f = [&](const D& x) { return trust::sum_all(trust::mul(x, w)); };
    D p = rand_tensor({6}, rng);
    EXPECT_LE(trust::finite_diff_check<double>(f, p, 1e-5), 1e-10);
}

TEST(FiniteDiff, QuadraticIsNearExact) {
    auto f = [](const D& x) { return trust::sum_all(trust::mul(x, x)); };
    auto rng = test_rng(8);
    D p = rand_tensor({5}, rng);
    EXPECT_LE(trust::finite_diff_check<double>(f, p, 1e-5), 1e-8);
}

TEST(FiniteDiff, NonPositiveEpsIsContractError) {
    auto f = [](const D& x) { return trust::sum_all(x); };
    D p({2}, 1.0);
    EXPECT_THROW(trust::finite_diff_check<double>(f, p, 0.0), trust::ContractError);
}

// ---------------------------------------------------------------------------
// per-op gradient suite
// ---------------------------------------------------------------------------

TEST(GradSuite, EveryDifferentiableOp) {
    auto rng = test_rng(9);
    struct Case {
        const char* name;
        std::function<D(const D&)> op;
        D point;
    };
    D fixed_a = rand_tensor({3, 4}, rng);
    D fixed_b = rand_tensor({4, 3}, rng);
    D fixed_rows = rand_tensor({2, 4}, rng);
    D gain = rand_tensor({4}, rng, 0.5, 1.5);
    D bias = rand_tensor({4}, rng);
    D kernel = rand_tensor({3, 3, 2, 3}, rng, -0.5, 0.5);
    D img = rand_tensor({6, 6, 2}, rng);
    D img3 = rand_tensor({4, 4, 3}, rng);
    D chan_bias = rand_tensor({3}, rng);
    D vec4 = rand_tensor({4}, rng);

    std::vector<Case> cases;
    cases.push_back({"add", [&](const D& x) { return trust::add(x, fixed_a); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"sub", [&](const D& x) { return trust::sub(fixed_a, x); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"mul", [&](const D& x) { return trust::mul(x, fixed_a); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"scale", [&](const D& x) { return trust::scale(x, 2.5); }, rand_tensor({3, 4}, rng)});
    // keep relu inputs away from the kink
    {
        D p = rand_tensor({3, 4}, rng);
        for (auto& v : p.values()) v += (v >= 0 ? 0.2 : -0.2);
        cases.push_back({"relu", [&](const D& x) { return trust::relu(x); }, p});
    }
    cases.push_back({"gelu", [&](const D& x) { return trust::gelu(x); }, rand_tensor({3, 4}, rng, -2, 2)});
    cases.push_back({"sigmoid", [&](const D& x) { return trust::sigmoid(x); }, rand_tensor({3, 4}, rng, -3, 3)});
    cases.push_back({"log_clamped",
                     [&](const D& x) { return trust::log_clamped(x, 1e-7); },
                     rand_tensor({3, 4}, rng, 0.2, 2.0)});
    cases.push_back({"matmul_lhs", [&](const D& x) { return trust::matmul(x, fixed_b); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"matmul_rhs", [&](const D& x) { return trust::matmul(fixed_a, x); }, rand_tensor({4, 3}, rng)});
    cases.push_back({"matmul_nt_lhs", [&](const D& x) { return trust::matmul_nt(x, fixed_a); }, rand_tensor({5, 4}, rng)});
    cases.push_back({"matmul_nt_rhs", [&](const D& x) { return trust::matmul_nt(fixed_a, x); }, rand_tensor({5, 4}, rng)});
    cases.push_back({"transpose2d", [&](const D& x) { return trust::transpose2d(x); }, rand_tensor({3, 5}, rng)});
    cases.push_back({"add_rowvec_lhs", [&](const D& x) { return trust::add_rowvec(x, vec4); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"add_rowvec_vec", [&](const D& x) { return trust::add_rowvec(fixed_a, x); }, rand_tensor({4}, rng)});
    cases.push_back({"softmax_rows", [&](const D& x) { return trust::softmax_rows(x); }, rand_tensor({3, 5}, rng, -2, 2)});
    cases.push_back({"layernorm_x",
                     [&](const D& x) { return trust::layernorm(x, gain, bias, 1e-5); },
                     rand_tensor({3, 4}, rng)});
    cases.push_back({"layernorm_gain",
                     [&](const D& x) { return trust::layernorm(fixed_rows, x, bias, 1e-5); },
                     rand_tensor({4}, rng)});
    cases.push_back({"layernorm_bias",
                     [&](const D& x) { return trust::layernorm(fixed_rows, gain, x, 1e-5); },
                     rand_tensor({4}, rng)});
    cases.push_back({"concat_tokens_a",
                     [&](const D& x) { return trust::concat_tokens(x, fixed_a); },
                     rand_tensor({2, 4}, rng)});
    cases.push_back({"concat_tokens_b",
                     [&](const D& x) { return trust::concat_tokens(fixed_a, x); },
                     rand_tensor({2, 4}, rng)});
    cases.push_back({"slice_rows", [&](const D& x) { return trust::slice_rows(x, 1, 3); }, rand_tensor({4, 3}, rng)});
    cases.push_back({"slice_cols", [&](const D& x) { return trust::slice_cols(x, 1, 3); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"concat_cols",
                     [&](const D& x) {
                         return trust::concat_cols<double>({x, fixed_rows});
                     },
                     rand_tensor({2, 3}, rng)});
    cases.push_back({"reshape", [&](const D& x) { return trust::reshape(x, {2, 6}); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"conv2d_x",
                     [&](const D& x) { return trust::conv2d(x, kernel, 1, Padding::kSame); },
                     rand_tensor({5, 5, 2}, rng)});
    cases.push_back({"conv2d_x_stride2",
                     [&](const D& x) { return trust::conv2d(x, kernel, 2, Padding::kValid); },
                     rand_tensor({7, 7, 2}, rng)});
    cases.push_back({"conv2d_kernel",
                     [&](const D& x) { return trust::conv2d(img, x, 1, Padding::kSame); },
                     rand_tensor({3, 3, 2, 3}, rng, -0.5, 0.5)});
    cases.push_back({"add_chanvec_x",
                     [&](const D& x) { return trust::add_chanvec(x, chan_bias); },
                     rand_tensor({4, 4, 3}, rng)});
    cases.push_back({"add_chanvec_bias",
                     [&](const D& x) { return trust::add_chanvec(img3, x); },
                     rand_tensor({3}, rng)});
    cases.push_back({"upsample_nearest2x",
                     [&](const D& x) { return trust::upsample_nearest2x(x); },
                     rand_tensor({3, 3, 2}, rng)});
    cases.push_back({"sum_all", [&](const D& x) { return trust::sum_all(x); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"mean_all", [&](const D& x) { return trust::mean_all(x); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"pick", [&](const D& x) { return trust::pick(x, 5); }, rand_tensor({3, 4}, rng)});
    cases.push_back({"channel_stats", [&](const D& x) { return trust::channel_stats(x); }, rand_tensor({4, 4, 3}, rng)});
    cases.push_back({"mean_rows", [&](const D& x) { return trust::mean_rows(x); }, rand_tensor({4, 3}, rng)});
    cases.push_back({"patchify", [&](const D& x) { return trust::patchify(x, 2); }, rand_tensor({4, 4, 2}, rng)});
    cases.push_back({"unpatchify",
                     [&](const D& x) { return trust::unpatchify(x, 4, 4, 2, 2); },
                     rand_tensor({4, 8}, rng)});

    std::uint64_t salt = 100;
    for (const auto& c : cases) {
        const double err = fd_op(c.op, c.point, ++salt);
        EXPECT_LE(err, 1e-4) << "op " << c.name << " gradient error " << err;
    }
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

TEST(Determinism, SeededInitAndForwardAreBitIdentical) {
    auto run = [] {
        trust::Rng rng(42);
        Tensor<float> w(Shape{8, 8}, 0.0f, true);
        trust::xavier_fill(w, 8, 8, rng);
        Tensor<float> x(Shape{4, 8});
        for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
        Tensor<float> y = trust::softmax_rows(trust::matmul(x, w));
        return std::vector<float>(y.values().begin(), y.values().end());
    };
    auto a = run();
    auto b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(std::memcmp(&a[i], &b[i], sizeof(float)), 0);
    }
}

TEST(Tape, InferenceWithoutTapeRecordsNothing) {
    D x({2, 2}, 1.0, true);
    D y = trust::mul(x, x);  // no active tape
    EXPECT_FALSE(y.requires_grad());
}
