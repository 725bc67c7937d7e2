#include "refsra/tensor.hpp"

#include <gtest/gtest.h>

#include "refsra/rng.hpp"

using namespace refsra;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

/// Random values kept at least `margin` away from the given kink points.
Tensor random_away_from(std::vector<int> shape, Rng& rng, std::vector<double> kinks,
                        double lo, double hi, double margin = 1e-3) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) {
        for (;;) {
            const double cand = rng.uniform(lo, hi);
            bool ok = true;
            for (double kink : kinks)
                if (std::abs(cand - kink) < margin) ok = false;
            if (ok) {
                x = cand;
                break;
            }
        }
    }
    return Tensor::from(std::move(shape), std::move(v));
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape, b.shape);
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.at(i), y = b.at(i);
        const double denom = std::max({1.0, std::abs(x), std::abs(y)});
        worst = std::max(worst, std::abs(x - y) / denom);
    }
    return worst;
}

/// Checks reverse-mode gradients of `build` (a graph expression producing a
/// scalar from one variable input) against central finite differences.
void expect_gradcheck(const std::function<Tensor(const Tensor&)>& build, const Tensor& x0,
                      double tol = 1e-5, double h = 1e-5) {
    Tape tape;
    Tensor x = tape.leaf(x0);
    Tensor loss = build(x);
    ASSERT_EQ(loss.numel(), 1);
    auto grads = tape.backward(loss);
    const Tensor& analytic = grads[static_cast<size_t>(x.node)];

    auto f = [&](const Tensor& v) { return build(v).scalar(); };
    Tensor numeric = finite_diff_grad(f, x0, h);
    EXPECT_LT(max_rel_err(analytic, numeric), tol);
}

/// Scalarizes an op output by a fixed random projection, so every output
/// element influences the loss with a distinct weight.
std::function<Tensor(const Tensor&)> project(const std::function<Tensor(const Tensor&)>& op,
                                             uint64_t seed, const Tensor& probe) {
    Tensor probe_out = op(probe);
    Rng rng(seed);
    Tensor weights = random_tensor(probe_out.shape, rng);
    return [op, weights](const Tensor& x) { return reduce_sum(mul(op(x), weights)); };
}

TEST(TensorBasics, FactoryAndShapeChecks) {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6);
    EXPECT_THROW(Tensor::from({2, 2}, {1.0}), ShapeError);
    EXPECT_THROW(Tensor::from({1, 2}, {1.0, 2.0}).scalar(), ShapeError);
}

TEST(ForwardExamples, ReluDefinition) {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
}

TEST(ForwardExamples, ConvIdentityKernel) {
    Rng rng(11);
    Tensor img = random_tensor({5, 5, 1}, rng, 0.0, 1.0);
    Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor out = conv2d(img, k, 0);
    EXPECT_EQ(out.shape, img.shape);
    EXPECT_EQ(out.values(), img.values());
}

TEST(ForwardExamples, SoftmaxSymmetry) {
    Tensor x = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor y = softmax_rows(x, 1.0);
    EXPECT_DOUBLE_EQ(y.at(0), 0.5);
    EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(ForwardExamples, PurityBitIdentical) {
    Rng rng(5);
    Tensor x = random_tensor({7, 6, 3}, rng);
    Tensor w = random_tensor({3, 3, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor a = conv2d(x, w, b, 1);
    Tensor c = conv2d(x, w, b, 1);
    EXPECT_EQ(a.values(), c.values());
}

TEST(ForwardExamples, ShapeMismatchNamesOpAndDims) {
    Tensor x = Tensor::from({2, 2, 3}, std::vector<double>(12, 0.0));
    Tensor w = Tensor::from({3, 3, 4, 2}, std::vector<double>(72, 0.0));
    try {
        conv2d(x, w, 1);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("conv2d"), std::string::npos);
        EXPECT_NE(msg.find("3"), std::string::npos);
        EXPECT_NE(msg.find("4"), std::string::npos);
    }
}

TEST(BackwardExamples, SumOfSquares) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor loss = reduce_sum(square(x));
    auto grads = tape.backward(loss);
    EXPECT_EQ(grads[static_cast<size_t>(x.node)].values(), (std::vector<double>{2, 4}));
}

TEST(BackwardExamples, ReluGate) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {-3, 5}));
    Tensor loss = reduce_sum(relu(x));
    auto grads = tape.backward(loss);
    EXPECT_EQ(grads[static_cast<size_t>(x.node)].values(), (std::vector<double>{0, 1}));
}

TEST(BackwardExamples, UnreachableNodesGetZeroGrad) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor y = tape.leaf(Tensor::from({2}, {3, 4}));
    Tensor unused = square(y);
    Tensor loss = reduce_sum(x);
    auto grads = tape.backward(loss);
    EXPECT_EQ(grads[static_cast<size_t>(unused.node)].values(), (std::vector<double>{0, 0}));
    EXPECT_EQ(grads[static_cast<size_t>(y.node)].values(), (std::vector<double>{0, 0}));
}

TEST(BackwardExamples, ErrorsOnNonScalarRoot) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
    Tensor y = square(x);
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(BackwardExamples, ErrorsAfterClear) {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from({1}, {2}));
    Tensor loss = square(x);
    tape.clear();
    EXPECT_THROW(tape.backward(loss), Error);
}

TEST(BackwardExamples, ConvMatchesFiniteDifferences) {
    Rng rng(42);
    Tensor k = random_tensor({3, 3, 1, 1}, rng);
    Tensor target = random_tensor({6, 6, 1}, rng);
    Tensor x0 = random_tensor({6, 6, 1}, rng);
    expect_gradcheck(
        [&](const Tensor& x) { return reduce_mean(square(sub(conv2d(x, k, 1), target))); }, x0);
}

// Every primitive against the central-difference oracle, 20 seeded cases
// each. Inputs are drawn away from non-smooth points (ReLU at 0, clamp at
// bounds, abs at 0) by at least 1e-3.
TEST(GradCheck, AllPrimitives) {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 7919);

        {  // add / sub / mul_elementwise: check gradient w.r.t. each operand
            Tensor a = random_tensor({3, 4}, rng);
            Tensor b = random_tensor({3, 4}, rng);
            expect_gradcheck(project([&](const Tensor& x) { return add(x, b); }, seed, a), a);
            expect_gradcheck(project([&](const Tensor& x) { return sub(b, x); }, seed, a), a);
            expect_gradcheck(project([&](const Tensor& x) { return mul(x, b); }, seed, a), a);
        }
        {  // scalar_mul
            Tensor a = random_tensor({5}, rng);
            expect_gradcheck(project([](const Tensor& x) { return scalar_mul(x, -1.7); }, seed, a), a);
        }
        {  // relu away from its kink
            Tensor a = random_away_from({4, 5}, rng, {0.0}, -1.0, 1.0);
            expect_gradcheck(project([](const Tensor& x) { return relu(x); }, seed, a), a);
        }
        {  // square / abs / sqrt_eps
            Tensor a = random_away_from({6}, rng, {0.0}, -1.0, 1.0);
            expect_gradcheck(project([](const Tensor& x) { return square(x); }, seed, a), a);
            expect_gradcheck(project([](const Tensor& x) { return abs_op(x); }, seed, a), a);
            Tensor pos = random_tensor({6}, rng, 0.1, 2.0);
            expect_gradcheck(project([](const Tensor& x) { return sqrt_eps(x); }, seed, pos), pos);
        }
        {  // clamp01: mix of interior and saturated values, all off-boundary
            Tensor a = random_away_from({4, 4}, rng, {0.0, 1.0}, -0.3, 1.3);
            expect_gradcheck(project([](const Tensor& x) { return clamp01(x); }, seed, a), a);
        }
        {  // reductions
            Tensor a = random_tensor({3, 3}, rng);
            expect_gradcheck([](const Tensor& x) { return reduce_sum(x); }, a);
            expect_gradcheck([](const Tensor& x) { return reduce_mean(square(x)); }, a);
        }
        {  // conv2d w.r.t. input, kernel, and bias
            Tensor x = random_tensor({6, 5, 2}, rng);
            Tensor w = random_tensor({3, 3, 2, 3}, rng);
            Tensor b = random_tensor({3}, rng);
            expect_gradcheck(project([&](const Tensor& v) { return conv2d(v, w, b, 1); }, seed, x), x);
            expect_gradcheck(project([&](const Tensor& v) { return conv2d(x, v, b, 1); }, seed, w), w);
            expect_gradcheck(project([&](const Tensor& v) { return conv2d(x, w, v, 0); }, seed, b), b);
        }
        {  // resizes, both directions
            Tensor a = random_tensor({6, 8, 2}, rng);
            expect_gradcheck(project([](const Tensor& x) { return bilinear_resize(x, 9, 5); }, seed, a), a);
            expect_gradcheck(project([](const Tensor& x) { return bicubic_resize_op(x, 3, 11); }, seed, a), a);
            expect_gradcheck(project([](const Tensor& x) { return bicubic_resize_op(x, 12, 16); }, seed, a), a);
        }
        {  // unfold / fold
            Tensor a = random_tensor({6, 6, 2}, rng);
            expect_gradcheck(project([](const Tensor& x) { return unfold_patches(x, 3, 2, 1); }, seed, a), a);
            Tensor patches = random_tensor({9, 8}, rng);  // 3x3 grid of 2x2x2 patches
            expect_gradcheck(
                project([](const Tensor& x) { return fold_patches_overlap_average(x, 5, 5, 2, 2, 1); },
                        seed, patches),
                patches);
        }
        {  // matmul, both layouts, both operands
            Tensor a = random_tensor({3, 5}, rng);
            Tensor b = random_tensor({5, 4}, rng);
            Tensor bt = random_tensor({4, 5}, rng);
            expect_gradcheck(project([&](const Tensor& x) { return matmul(x, b); }, seed, a), a);
            expect_gradcheck(project([&](const Tensor& x) { return matmul(a, x); }, seed, b), b);
            expect_gradcheck(project([&](const Tensor& x) { return matmul(x, bt, true); }, seed, a), a);
            expect_gradcheck(project([&](const Tensor& x) { return matmul(a, x, true); }, seed, bt), bt);
        }
        {  // softmax at the model's sharp temperature and at 1.0
            Tensor a = random_tensor({3, 6}, rng);
            expect_gradcheck(project([](const Tensor& x) { return softmax_rows(x, 0.05); }, seed, a), a,
                             1e-5, 1e-6);
            expect_gradcheck(project([](const Tensor& x) { return softmax_rows(x, 1.0); }, seed, a), a);
        }
        {  // l2_normalize_rows on rows with healthy norms
            Tensor a = random_away_from({4, 6}, rng, {0.0}, -1.0, 1.0, 0.2);
            expect_gradcheck(project([](const Tensor& x) { return l2_normalize_rows(x); }, seed, a), a);
        }
        {  // concat_channels w.r.t. both inputs
            Tensor a = random_tensor({3, 4, 2}, rng);
            Tensor b = random_tensor({3, 4, 3}, rng);
            expect_gradcheck(project([&](const Tensor& x) { return concat_channels(x, b); }, seed, a), a);
            expect_gradcheck(project([&](const Tensor& x) { return concat_channels(a, x); }, seed, b), b);
        }
    }
}

TEST(FoldUnfold, ConstantRoundTripIsIdentity) {
    // Model geometries: p=3 s=2 pad=1 on the LR grid, p=12 s=8 pad=4 on HR.
    for (auto [h, w, c, p, s, pad] : {std::tuple{16, 16, 3, 3, 2, 1}, std::tuple{64, 64, 2, 12, 8, 4}}) {
        Tensor img = Tensor::full({h, w, c}, 0.37);
        Tensor patches = unfold_patches(img, p, s, pad);
        Tensor back = fold_patches_overlap_average(patches, h, w, p, s, pad);
        EXPECT_EQ(back.shape, img.shape);
        for (int64_t i = 0; i < back.numel(); ++i) ASSERT_DOUBLE_EQ(back.at(i), 0.37);
    }
}

TEST(FiniteDiff, LinearAndQuadratic) {
    Rng rng(3);
    Tensor x = random_tensor({4}, rng);
    Tensor ones = finite_diff_grad([](const Tensor& t) { return reduce_sum(t).scalar(); }, x, 1e-5);
    for (int64_t i = 0; i < 4; ++i) EXPECT_NEAR(ones.at(i), 1.0, 1e-9);

    Tensor x3 = Tensor::from({1}, {3.0});
    Tensor g = finite_diff_grad([](const Tensor& t) { return reduce_sum(square(t)).scalar(); }, x3, 1e-5);
    EXPECT_NEAR(g.at(0), 6.0, 1e-8);
}

TEST(ResizeOps, BicubicConstantPreserved) {
    Tensor img = Tensor::full({10, 12, 3}, 0.42);
    for (auto [oh, ow] : {std::pair{5, 6}, std::pair{25, 17}, std::pair{10, 12}}) {
        Tensor out = bicubic_resize_op(img, oh, ow);
        for (int64_t i = 0; i < out.numel(); ++i) ASSERT_NEAR(out.at(i), 0.42, 1e-12);
    }
}

TEST(ResizeOps, IdentityWhenSameSize) {
    Rng rng(9);
    Tensor img = random_tensor({7, 5, 2}, rng);
    EXPECT_EQ(bicubic_resize_op(img, 7, 5).values(), img.values());
    EXPECT_EQ(bilinear_resize(img, 7, 5).values(), img.values());
}

}  // namespace
