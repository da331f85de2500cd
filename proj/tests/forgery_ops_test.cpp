#include <fnas/forgery_ops.hpp>

#include "support/oracles.hpp"

#include <gtest/gtest.h>

using namespace fnas;

namespace {

Tensor ones(Shape s) { return Tensor::full(std::move(s), real(1)); }

// Independent fold: center tap becomes w_c - theta * sum(w), per (o, c) plane.
Tensor folded_by_hand(const Tensor& w, double theta) {
    std::vector<real> v(w.data().begin(), w.data().end());
    const std::size_t kh = w.dim(2), kw = w.dim(3), taps = kh * kw;
    for (std::size_t p = 0; p < w.dim(0) * w.dim(1); ++p) {
        real s = 0;
        for (std::size_t t = 0; t < taps; ++t) s += v[p * taps + t];
        v[p * taps + (kh / 2) * kw + kw / 2] -= static_cast<real>(theta) * s;
    }
    return Tensor(w.shape(), std::move(v));
}

}  // namespace

TEST(ParseKind, SeparableName) {
    auto k = parse_kind("SepCDC_3x3_0.5");
    EXPECT_EQ(k.family, OpFamily::sep_cdc);
    EXPECT_EQ(k.kernel, 3);
    EXPECT_EQ(k.dilation, 1);
    EXPECT_EQ(k.theta, 0.5);
}

TEST(ParseKind, SkipConnect) { EXPECT_EQ(parse_kind("skip_connect").family, OpFamily::skip); }

TEST(ParseKind, DilatedUsesDilationTwo) {
    auto k = parse_kind("DilCDC_5x5_0.7");
    EXPECT_EQ(k.family, OpFamily::dil_cdc);
    EXPECT_EQ(k.kernel, 5);
    EXPECT_EQ(k.dilation, 2);
}

TEST(ParseKind, MaxPool) {
    auto k = parse_kind("max_pool_3x3");
    EXPECT_EQ(k.family, OpFamily::pool_max);
    EXPECT_EQ(format_kind(k), "max_pool_3x3");
}

TEST(ParseKind, RejectsEvenKernel) {
    try {
        parse_kind("SepCDC_2x2_0.5");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("2x2"), std::string::npos);
    }
}

TEST(ParseKind, RejectsMalformed) {
    for (const char* bad : {"", "SepCDC", "SepCDC_3x3", "SepCDC_3x5_0.5", "SepCDC_3x3_1.5", "SepCDC_3x3_0.50",
                            "SepCDC_3x3_-0.0", "SepCDC_03x3_0.5", "Conv_3x3_0.5", "SepCDC_3x3_abc", "skip",
                            "max_pool_2x2", "SepCDC_3x3_1"})
        EXPECT_THROW(parse_kind(bad), Error) << bad;
}

TEST(ParseKind, RoundTripsDefaultRegistry) {
    for (const auto& n : OperatorRegistry::default_names()) EXPECT_EQ(format_kind(parse_kind(n)), n);
}

TEST(ParseKind, RoundTripsArbitraryTheta) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
        OperationKind k{OpFamily::sep_cdc, 3, 1, u(rng)};
        const auto name = format_kind(k);
        EXPECT_EQ(parse_kind(name), k);
        EXPECT_EQ(format_kind(parse_kind(name)), name);
    }
}

TEST(Registry, DefaultHasNineOpsInOrder) {
    auto r = OperatorRegistry::defaults();
    ASSERT_EQ(r.size(), 9u);
    EXPECT_EQ(r.name(0), "skip_connect");
    EXPECT_EQ(r.name(8), "DilCDC_5x5_0.7");
    EXPECT_EQ(r.index_of("SepCDC_3x3_0.7"), 3u);
    EXPECT_FALSE(r.index_of("max_pool_3x3").has_value());
}

TEST(Registry, RejectsDuplicatesAndTinyLists) {
    EXPECT_THROW(OperatorRegistry({"skip_connect", "SepCDC_3x3_0.5", "skip_connect"}), Error);
    EXPECT_THROW(OperatorRegistry({"skip_connect", "SepCDC_3x3_0.5"}), Error);
    EXPECT_NO_THROW(OperatorRegistry({"skip_connect", "SepCDC_3x3_0.5", "max_pool_3x3"}));
}

TEST(Cdc, OnesWithThetaOne) {
    Tensor out = cdc_forward(nullptr, ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), 1, {1, 1, 1, 1});
    EXPECT_DOUBLE_EQ(out[4], 0.0);
    for (std::size_t corner : {0u, 2u, 6u, 8u}) EXPECT_DOUBLE_EQ(out[corner], -5.0);
    auto naive = oracle::naive_cdc(ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), 1.0, 1, 1, 1);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(out[i], naive[i], 1e-12);
}

TEST(Cdc, ThetaZeroIsVanilla) {
    std::mt19937_64 rng(3);
    auto x = oracle::random_tensor({2, 4, 7, 7}, rng);
    auto w = oracle::random_tensor({5, 4, 3, 3}, rng);
    Conv2dOptions o{1, 1, 1, 1};
    auto a = cdc_forward(nullptr, x, w, 0, o);
    auto b = conv2d(nullptr, x, w, o);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Cdc, RejectsEvenKernel) {
    EXPECT_THROW(cdc_forward(nullptr, ones({1, 1, 4, 4}), ones({1, 1, 2, 2}), 0.5), Error);
    EXPECT_THROW(cdc_forward(nullptr, ones({1, 1, 4, 4}), ones({1, 1, 2, 2}), 0), Error);
}

TEST(Cdc, FoldingEquivalenceOverRandomConfigs) {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> pick(0, 1 << 20);
    for (int trial = 0; trial < 120; ++trial) {
        const int k = 1 + 2 * (pick(rng) % 3);
        const int dil = 1 + pick(rng) % 2;
        const int stride = 1 + pick(rng) % 2;
        const int pad = pick(rng) % (dil * (k - 1) / 2 + 2);
        const std::size_t groups = 1 + pick(rng) % 3;
        const std::size_t c = groups * (1 + pick(rng) % 2), o = groups * (1 + pick(rng) % 3);
        const std::size_t h = static_cast<std::size_t>(dil * (k - 1) + 1 + pick(rng) % 5);
        const double theta = (pick(rng) % 1001) / 1000.0;
        auto x = oracle::random_tensor({1 + std::size_t(pick(rng) % 2), c, h, h + 1}, rng);
        auto w = oracle::random_tensor({o, c / groups, std::size_t(k), std::size_t(k)}, rng);
        Conv2dOptions opt{stride, pad, dil, static_cast<int>(groups)};
        auto got = cdc_forward(nullptr, x, w, static_cast<real>(theta), opt);
        auto want = conv2d(nullptr, x, folded_by_hand(w, theta), opt);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12) << "trial " << trial;
        if (groups == 1) {
            auto naive = oracle::naive_cdc(x, w, theta, stride, pad, dil);
            for (std::size_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got[i], naive[i], 1e-10) << "trial " << trial;
        }
    }
}

TEST(Cdc, ThetaOneAnnihilatesConstantInterior) {
    std::mt19937_64 rng(5);
    for (int k : {3, 5}) {
        for (int dil : {1, 2}) {
            const std::size_t h = 16;
            auto x = Tensor::full({2, 3, h, h}, real(0.37));
            auto w = oracle::random_tensor({3, 1, std::size_t(k), std::size_t(k)}, rng);
            const int pad = dil * (k - 1) / 2;
            auto y = cdc_forward(nullptr, x, w, 1, {1, pad, dil, 3});
            for (std::size_t p = 0; p < 6; ++p)
                for (std::size_t r = pad; r < h - pad; ++r)
                    for (std::size_t col = pad; col < h - pad; ++col)
                        EXPECT_LT(std::abs(y[(p * h + r) * h + col]), 1e-10);
        }
    }
}

TEST(Instantiate, SkipStrideOneIsIdentity) {
    Rng rng(1);
    auto stack = instantiate(parse_kind("skip_connect"), 4, 1, {}, rng);
    std::mt19937_64 g(2);
    auto x = oracle::random_tensor({2, 4, 6, 6}, g);
    auto y = stack.forward(nullptr, x, true);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
    EXPECT_EQ(stack.parameter_count(), 0u);
}

TEST(Instantiate, SepStrideTwoShape) {
    Rng rng(1);
    auto stack = instantiate(parse_kind("SepCDC_3x3_0.5"), 16, 2, {}, rng);
    std::mt19937_64 g(2);
    auto y = stack.forward(nullptr, oracle::random_tensor({2, 16, 16, 16}, g), true);
    EXPECT_EQ(y.shape(), (Shape{2, 16, 8, 8}));
}

TEST(Instantiate, EveryOperationPreservesChannels) {
    std::vector<std::string> names = OperatorRegistry::default_names();
    names.push_back("max_pool_3x3");
    std::mt19937_64 g(9);
    auto x = oracle::random_tensor({2, 6, 8, 8}, g);
    for (const auto& n : names) {
        for (int stride : {1, 2}) {
            for (bool affine : {false, true}) {
                Rng rng(4);
                auto stack = instantiate(parse_kind(n), 6, stride, {affine, false}, rng);
                auto y = stack.forward(nullptr, x, true);
                const std::size_t s = 8 / stride;
                EXPECT_EQ(y.shape(), (Shape{2, 6, s, s})) << n << " stride " << stride;
                EXPECT_TRUE(all_finite(y));
            }
        }
    }
}

TEST(Instantiate, ParameterCountIndependentOfTheta) {
    Rng a(1), b(1);
    auto s0 = instantiate(parse_kind("SepCDC_3x3_0.0"), 16, 1, {}, a);
    auto s7 = instantiate(parse_kind("SepCDC_3x3_0.7"), 16, 1, {}, b);
    EXPECT_EQ(s0.parameter_count(), s7.parameter_count());
    EXPECT_EQ(s0.parameter_count(), 2u * (16 * 9 + 16 * 16));
}

TEST(Instantiate, RejectsBadStride) {
    Rng rng(1);
    EXPECT_THROW(instantiate(parse_kind("SepCDC_3x3_0.5"), 4, 3, {}, rng), Error);
    EXPECT_THROW(instantiate(parse_kind("SepCDC_3x3_0.5"), 0, 1, {}, rng), Error);
}

TEST(Instantiate, AffineAndRunningStatsAddState) {
    Rng a(1), b(1);
    auto plain = instantiate(parse_kind("DilCDC_3x3_0.5"), 8, 1, {false, false}, a);
    auto full = instantiate(parse_kind("DilCDC_3x3_0.5"), 8, 1, {true, true}, b);
    EXPECT_EQ(full.parameter_count(), plain.parameter_count() + 16);
    EXPECT_TRUE(plain.running_stats().empty());
    EXPECT_EQ(full.running_stats().size(), 1u);
}

// Running on a channel subset equals running a C=k stack built from the
// corresponding weight slices.
TEST(Instantiate, ChannelSubsetMatchesSlicedStack) {
    const std::vector<std::size_t> idx = {1, 4, 5};
    std::vector<std::string> names = OperatorRegistry::default_names();
    names.push_back("max_pool_3x3");
    for (const auto& n : names) {
        for (int stride : {1, 2}) {
            Rng rng(8);
            auto full = instantiate(parse_kind(n), 6, stride, {true, false}, rng);
            LayerStack small = full;
            for (auto& st : small.stages()) {
                if (auto* c = std::get_if<stage::Conv>(&st)) {
                    if (c->opt.groups > 1) {
                        c->kernel = index_select(nullptr, c->kernel, 0, idx);
                        c->opt.groups = 3;
                    } else {
                        c->kernel = index_select(nullptr, index_select(nullptr, c->kernel, 0, idx), 1, idx);
                    }
                } else if (auto* f = std::get_if<stage::FactorizedReduce>(&st)) {
                    // Output channels 1 (first branch) and 4, 5 (second branch).
                    f->kernel = index_select(nullptr, index_select(nullptr, f->kernel, 0, idx), 1, idx);
                    f->split = 1;
                } else if (auto* nm = std::get_if<stage::Norm>(&st)) {
                    nm->gamma = index_select(nullptr, *nm->gamma, 0, idx);
                    nm->beta = index_select(nullptr, *nm->beta, 0, idx);
                }
            }
            std::mt19937_64 g(3);
            auto x = oracle::random_tensor({2, 3, 8, 8}, g);
            auto a = full.forward(nullptr, x, true, idx);
            auto b = small.forward(nullptr, x, true);
            ASSERT_EQ(a.shape(), b.shape());
            for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << n;
        }
    }
}

TEST(Instantiate, FactorizedReduceMatchesTwoBranchConcat) {
    Rng rng(2);
    auto stack = make_factorized_reduce(4, 6, {}, rng);
    const auto& f = std::get<stage::FactorizedReduce>(stack.stages()[1]);
    std::mt19937_64 g(5);
    auto x = oracle::random_tensor({2, 4, 6, 6}, g);
    auto y = stack.forward(nullptr, x, true);
    // Reference: relu, conv(a) on x, conv(b) on shifted x, concat, batch norm.
    auto r = relu(nullptr, x);
    const std::vector<std::size_t> first = {0, 1, 2}, second = {3, 4, 5};
    auto a = conv2d(nullptr, r, index_select(nullptr, f.kernel, 0, first), {2, 0, 1, 1});
    auto b = conv2d(nullptr, crop_top_left(nullptr, r), index_select(nullptr, f.kernel, 0, second), {2, 0, 1, 1});
    auto want = batch_norm(nullptr, concat_channels(nullptr, {a, b}), nullptr, nullptr, nullptr);
    ASSERT_EQ(y.shape(), want.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(Instantiate, InferenceUsesRunningStats) {
    Rng rng(2);
    auto stack = instantiate(parse_kind("max_pool_3x3"), 3, 1, {false, true}, rng);
    std::mt19937_64 g(5);
    auto x = oracle::random_tensor({2, 3, 5, 5}, g);
    auto y = stack.forward(nullptr, x, false);
    auto pooled = max_pool2d(nullptr, x, 3, 1, 1);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], pooled[i] / std::sqrt(1 + 1e-5), 1e-12);
}

class OpGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpGrad, CdcForward) {
    std::mt19937_64 rng(100 + GetParam());
    const int k = GetParam() % 2 ? 3 : 5;
    const int dil = 1 + GetParam() % 2;
    auto x = oracle::random_tensor({2, 2, 7, 7}, rng);
    auto w = oracle::random_tensor({3, 2, std::size_t(k), std::size_t(k)}, rng);
    const real theta = real(0.1 * (GetParam() % 10));
    Conv2dOptions o{1 + GetParam() % 2, dil * (k - 1) / 2, dil, 1};
    auto r = oracle::grad_check(
        [&](Tape* t) { return oracle::project(t, cdc_forward(t, x, w, theta, o), 7); }, {x, w});
    EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST_P(OpGrad, EveryRegistryOperation) {
    std::vector<std::string> names = OperatorRegistry::default_names();
    names.push_back("max_pool_3x3");
    for (const auto& n : names) {
        for (int stride : {1, 2}) {
            Rng rng(static_cast<std::uint64_t>(GetParam()) * 31 + stride);
            std::mt19937_64 g(static_cast<std::uint64_t>(GetParam()) * 17 + stride);
            auto stack = instantiate(parse_kind(n), 3, stride, {true, false}, rng);
            auto x = oracle::random_tensor({2, 3, 6, 6}, g);
            std::vector<Tensor> leaves = stack.parameters();
            leaves.push_back(x);
            auto r = oracle::grad_check(
                [&](Tape* t) { return oracle::project(t, stack.forward(t, x, true), 13); }, leaves);
            EXPECT_LT(r.max_rel_error, 1e-3) << n << " stride " << stride;
        }
    }
}

TEST_P(OpGrad, ChannelSubsetForward) {
    Rng rng(static_cast<std::uint64_t>(GetParam()));
    std::mt19937_64 g(static_cast<std::uint64_t>(GetParam()) + 1);
    const std::vector<std::size_t> idx = {0, 2};
    for (const char* n : {"SepCDC_3x3_0.7", "skip_connect"}) {
        auto stack = instantiate(parse_kind(n), 4, 2, {}, rng);
        auto x = oracle::random_tensor({2, 2, 6, 6}, g);
        std::vector<Tensor> leaves = stack.parameters();
        leaves.push_back(x);
        auto r = oracle::grad_check(
            [&](Tape* t) { return oracle::project(t, stack.forward(t, x, true, idx), 3); }, leaves);
        EXPECT_LT(r.max_rel_error, 1e-3) << n;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGrad, ::testing::Range(0, 20));
