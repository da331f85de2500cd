#include <fnas/supernet.hpp>

#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <set>

using namespace fnas;

namespace {

Tensor random_input(std::vector<std::size_t> shape, std::uint64_t seed) {
    Rng rng(seed);
    return oracle::random_tensor(std::move(shape), rng);
}

Supernet small_net(std::uint64_t seed, std::size_t channels = 4, std::size_t groups = 1,
                   OperatorRegistry reg = OperatorRegistry::defaults()) {
    return Supernet(std::move(reg), SupernetConfig{channels, groups, 2, kDefaultLambda}, seed);
}

std::vector<LayerStack> all_ops(const OperatorRegistry& reg, std::size_t c, int stride, Rng& rng) {
    std::vector<LayerStack> ops;
    for (std::size_t o = 0; o < reg.size(); ++o) ops.push_back(instantiate(reg.kind(o), c, stride, LayerOptions{false, false}, rng));
    return ops;
}

void copy_values(const std::vector<Tensor>& from, std::vector<Tensor> to) {
    ASSERT_EQ(from.size(), to.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        ASSERT_EQ(from[i].shape(), to[i].shape());
        std::copy(from[i].data().begin(), from[i].data().end(), to[i].mutable_data().begin());
    }
}

}  // namespace

TEST(ChannelMask, SampledCount) {
    EXPECT_EQ(ChannelMask::sampled_count(16, 1.0 / 8), 2u);
    EXPECT_EQ(ChannelMask::sampled_count(4, 1.0 / 8), 1u);
    EXPECT_EQ(ChannelMask::sampled_count(8, 1.0), 8u);
    EXPECT_EQ(ChannelMask::sampled_count(3, 0.01), 1u);
    EXPECT_THROW(ChannelMask::sampled_count(8, 0.0), Error);
    EXPECT_THROW(ChannelMask::sampled_count(8, 1.5), Error);
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        const std::size_t c = 1 + t % 40;
        const double r = 0.05 + 0.95 * (t % 17) / 16.0;
        const auto m = ChannelMask::sample(c, r, rng);
        const auto expect = std::max<long long>(1, std::llround(r * static_cast<double>(c)));
        EXPECT_EQ(static_cast<long long>(m.idx.size()), std::min<long long>(expect, static_cast<long long>(c)));
        EXPECT_TRUE(std::is_sorted(m.idx.begin(), m.idx.end()));
        EXPECT_EQ(std::set<std::size_t>(m.idx.begin(), m.idx.end()).size(), m.idx.size());
        for (auto i : m.idx) EXPECT_LT(i, c);
    }
}

TEST(MixedOp, SingleSkipIsIdentity) {
    const auto reg = OperatorRegistry::defaults();
    Rng rng(2);
    auto ops = all_ops(reg, 8, 1, rng);
    EdgeState e(0, 2, reg.size());
    for (std::size_t o = 1; o < reg.size(); ++o) e.alive[o] = false;
    const Tensor x = random_input({2, 8, 6, 6}, 3);
    for (double r : {1.0 / 8, 0.5, 1.0}) {
        const auto mask = ChannelMask::sample(8, r, rng);
        const Tensor y = mixed_op_forward(nullptr, x, ops, e, 1, mask, Tensor({1}, {real(1)}));
        EXPECT_EQ(y.shape(), x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
    }
}

TEST(MixedOp, EighthOfSixteenChannelsEnterOps) {
    const auto reg = OperatorRegistry::defaults();
    Rng rng(4);
    auto ops = all_ops(reg, 16, 1, rng);
    EdgeState e(0, 2, reg.size());
    for (std::size_t o = 1; o < reg.size(); ++o) e.alive[o] = false;
    const Tensor x = random_input({2, 16, 4, 4}, 5);
    const auto mask = ChannelMask::sample(16, 1.0 / 8, rng);
    const Tensor y = mixed_op_forward(nullptr, x, ops, e, 1, mask, Tensor({1}, {real(0.5)}));
    std::size_t changed = 0;
    for (std::size_t c = 0; c < 16; ++c) {
        bool diff = false;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t p = 0; p < 16; ++p) diff |= y[(n * 16 + c) * 16 + p] != x[(n * 16 + c) * 16 + p];
        changed += diff;
    }
    EXPECT_EQ(changed, 2u);
}

TEST(MixedOp, UnsampledChannelsPassThrough) {
    const auto reg = OperatorRegistry::defaults();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        for (int stride : {1, 2}) {
            auto ops = all_ops(reg, 8, stride, rng);
            EdgeState e(0, 2, reg.size());
            for (std::size_t o = 0; o < reg.size(); ++o) e.alpha.mutable_data()[o] = static_cast<real>(0.3 * static_cast<double>(o % 3));
            e.alive[seed % reg.size()] = false;
            const Tensor x = random_input({3, 8, 8, 8}, 100 + seed);
            const auto mask = ChannelMask::sample(8, 0.25, rng);
            const Tensor y = mixed_op_forward(nullptr, x, ops, e, stride, mask, importance_tensor(nullptr, e));
            const Tensor ref = stride == 1 ? x : avg_pool2d(nullptr, x, 2, 2, 0);
            ASSERT_EQ(y.shape(), ref.shape());
            const std::size_t plane = y.dim(2) * y.dim(3);
            std::set<std::size_t> sampled(mask.idx.begin(), mask.idx.end());
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t c = 0; c < 8; ++c) {
                    if (sampled.count(c)) continue;
                    for (std::size_t p = 0; p < plane; ++p) EXPECT_EQ(y[(n * 8 + c) * plane + p], ref[(n * 8 + c) * plane + p]);
                }
        }
    }
}

TEST(MixedOp, FullMaskIsWeightedSumOfOps) {
    const auto reg = OperatorRegistry::defaults();
    Rng rng(8);
    auto ops = all_ops(reg, 4, 1, rng);
    EdgeState e(0, 2, reg.size());
    e.alive[2] = e.alive[5] = false;
    const auto alive = e.alive_indices();
    std::vector<real> w;
    for (std::size_t k = 0; k < alive.size(); ++k) w.push_back(static_cast<real>(0.1 + 0.05 * static_cast<double>(k)));
    const Tensor x = random_input({2, 4, 6, 6}, 9);
    const Tensor y = mixed_op_forward(nullptr, x, ops, e, 1, ChannelMask::full(4), Tensor({alive.size()}, w));
    std::vector<double> ref(x.numel(), 0.0);
    for (std::size_t k = 0; k < alive.size(); ++k) {
        const Tensor o = ops[alive[k]].forward(nullptr, x, true);
        for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += static_cast<double>(w[k]) * o[i];
    }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(MixedOp, AllDeadEdgeFails) {
    const auto reg = OperatorRegistry::defaults();
    Rng rng(1);
    auto ops = all_ops(reg, 4, 1, rng);
    EdgeState e(0, 2, reg.size());
    std::fill(e.alive.begin(), e.alive.end(), false);
    EXPECT_THROW(mixed_op_forward(nullptr, random_input({1, 4, 4, 4}, 1), ops, e, 1, ChannelMask::full(4), Tensor({1}, {real(1)})),
                 Error);
}

TEST(NodeForward, UniformBeta) {
    EdgeState a(0, 2, 3), b(1, 2, 3);
    const Tensor f0 = random_input({2, 3, 4, 4}, 1), f1 = random_input({2, 3, 4, 4}, 2);
    const Tensor y = node_forward(nullptr, {f0, f1}, {&a, &b});
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.5 * f0[i] + 0.5 * f1[i], 1e-15);
}

TEST(NodeForward, SaturatedBeta) {
    EdgeState a(0, 2, 3), b(1, 2, 3);
    a.beta.mutable_data()[0] = real(20);
    b.beta.mutable_data()[0] = real(-20);
    const Tensor f0 = random_input({2, 3, 4, 4}, 3), f1 = random_input({2, 3, 4, 4}, 4);
    const Tensor y = node_forward(nullptr, {f0, f1}, {&a, &b});
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], f0[i], 1e-6);
}

TEST(NodeForward, WeightsSumToOne) {
    Rng rng(5);
    std::normal_distribution<double> n(0, 3);
    for (int t = 0; t < 50; ++t) {
        const std::size_t k = 2 + t % 4;
        std::vector<EdgeState> es;
        for (std::size_t i = 0; i < k; ++i) {
            es.emplace_back(i, k, 3);
            es.back().beta.mutable_data()[0] = static_cast<real>(n(rng));
        }
        std::vector<const EdgeState*> in;
        for (auto& e : es) in.push_back(&e);
        const Tensor ones = Tensor::full({1, 1, 2, 2}, real(1));
        const Tensor y = node_forward(nullptr, std::vector<Tensor>(k, ones), in);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], 1.0, 1e-6);
        const auto w = edge_weights(in);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-6);
    }
    EdgeState a(0, 2, 3);
    EXPECT_THROW(node_forward(nullptr, {}, {}), Error);
    EXPECT_THROW(node_forward(nullptr, {Tensor::zeros({1})}, {&a, &a}), Error);
}

TEST(Supernet, LogitShapeAtFullScale) {
    Supernet net(OperatorRegistry::defaults(), SupernetConfig{}, 7);
    Rng masks(1);
    const Tensor logits = net.forward(nullptr, random_input({96, 3, 32, 32}, 1), masks, 1.0 / 8);
    EXPECT_EQ(logits.shape(), (std::vector<std::size_t>{96, 2}));
    EXPECT_TRUE(all_finite(logits));
}

TEST(Supernet, CellTopologyAndChannelDoubling) {
    Supernet net(OperatorRegistry::defaults(), SupernetConfig{}, 7);
    const auto& cells = net.cells();
    ASSERT_EQ(cells.size(), 6u);
    const std::vector<CellKind> kinds = {CellKind::normal, CellKind::normal, CellKind::reduction,
                                         CellKind::normal, CellKind::normal, CellKind::reduction};
    const std::vector<std::size_t> channels = {16, 16, 32, 32, 32, 64};
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(cells[i].kind, kinds[i]);
        EXPECT_EQ(cells[i].channels, channels[i]);
        EXPECT_EQ(cells[i].ops.size(), kCellEdges);
    }
    EXPECT_EQ(net.edges(CellKind::normal).size(), 14u);
    EXPECT_EQ(net.edges(CellKind::reduction).size(), 14u);
    Rng masks(2);
    const auto f = net.forward_features(nullptr, random_input({2, 3, 16, 16}, 2), masks, 0.25);
    const std::vector<std::size_t> side = {16, 16, 8, 8, 8, 4};
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(f.cell_outputs[i].dim(1), 4 * channels[i]);  // output node concatenates four nodes
        EXPECT_EQ(f.cell_outputs[i].dim(2), side[i]);
        EXPECT_EQ(f.cell_outputs[i].dim(3), side[i]);
    }
}

TEST(Supernet, IndivisibleInputRejected) {
    auto net = small_net(1, 4, 2);
    Rng masks(1);
    EXPECT_THROW(net.forward(nullptr, random_input({2, 3, 10, 10}, 1), masks, 0.5), Error);
    EXPECT_THROW(net.forward(nullptr, random_input({2, 1, 8, 8}, 1), masks, 0.5), Error);
    EXPECT_NO_THROW(net.forward(nullptr, random_input({2, 3, 12, 12}, 1), masks, 0.5));
}

TEST(Supernet, RegistryPermutationInvariance) {
    const auto names = OperatorRegistry::default_names();
    auto perm = names;
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[4]);
    const OperatorRegistry ra(names), rb(perm);
    auto a = small_net(3, 4, 1, ra);
    auto b = small_net(9, 4, 1, rb);
    for (auto* net : {&a, &b})
        for (auto& t : net->arch()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), real(0));
    // Same weights for same-named ops.
    for (std::size_t c = 0; c < a.cells().size(); ++c) {
        auto& ca = a.cells()[c];
        auto& cb = b.cells()[c];
        copy_values(ca.pre0.parameters(), cb.pre0.parameters());
        copy_values(ca.pre1.parameters(), cb.pre1.parameters());
        for (std::size_t e = 0; e < kCellEdges; ++e)
            for (std::size_t o = 0; o < ra.size(); ++o)
                copy_values(ca.ops[e][o].parameters(), cb.ops[e][*rb.index_of(ra.name(o))].parameters());
    }
    const auto wa = a.weights(), wb = b.weights();
    copy_values({wa.begin(), wa.begin() + 1}, {wb.begin(), wb.begin() + 1});                 // stem conv
    copy_values({wa.end() - 2, wa.end()}, {wb.end() - 2, wb.end()});                     // head
    const Tensor x = random_input({4, 3, 8, 8}, 11);
    for (double r : {1.0 / 4, 1.0}) {
        Rng ma(5), mb(5);
        const Tensor la = a.forward(nullptr, x, ma, r), lb = b.forward(nullptr, x, mb, r);
        for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_NEAR(la[i], lb[i], 1e-8);
    }
}

TEST(Supernet, ImportanceSumsToOnePlusLambda) {
    auto net = small_net(4);
    for (auto k : {CellKind::normal, CellKind::reduction})
        for (const auto& e : net.edges(k)) {
            const Tensor w = importance_tensor(nullptr, e, kDefaultLambda);
            double s = 0;
            for (real v : w.data()) s += v;
            EXPECT_NEAR(s, 1.0 + kDefaultLambda, 1e-12);
        }
}

TEST(Supernet, ArchAndWeightsAreDisjoint) {
    auto net = small_net(5);
    std::set<const void*> w, a;
    for (const auto& t : net.all_weights()) w.insert(t.handle().get());
    for (const auto& t : net.arch()) a.insert(t.handle().get());
    for (const auto* p : a) EXPECT_EQ(w.count(p), 0u);
    EXPECT_EQ(a.size(), 2u * 2 * kCellEdges);
    // Pruning removes a dead op's parameters from the trainable set.
    const std::size_t before = net.weights().size();
    for (auto& e : net.edges(CellKind::normal)) e.alive[1] = false;  // SepCDC_3x3_0.0: 4 tensors per instance
    std::set<const void*> live;
    for (const auto& t : net.weights()) live.insert(t.handle().get());
    for (const auto& t : net.dead_weights()) EXPECT_EQ(live.count(t.handle().get()), 0u);
    EXPECT_EQ(before - net.weights().size(), net.dead_weights().size());
    EXPECT_EQ(net.dead_weights().size(), 2u * kCellEdges * 4);  // two normal cells, two depthwise+pointwise pairs each
}

TEST(Supernet, ArchGradientsNonzero) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto net = small_net(seed);
        auto arch = net.arch();
        zero_grads(arch);
        Rng masks(seed);
        Tape tape;
        const Tensor x = random_input({4, 3, 8, 8}, 50 + seed);
        const std::vector<int> labels = {0, 1, 1, 0};
        const Tensor loss = softmax_cross_entropy(&tape, net.forward(&tape, x, masks, 0.5), labels);
        tape.backward(loss);
        for (auto k : {CellKind::normal, CellKind::reduction})
            for (const auto& e : net.edges(k)) {
                ASSERT_TRUE(e.alpha.has_grad());
                double ga = 0;
                for (auto o : e.alive_indices()) ga += std::abs(e.alpha.grad()[o]);
                EXPECT_GT(ga, 0.0);
                EXPECT_NE(e.beta.grad()[0], 0.0);
            }
    }
}

TEST(Supernet, ArchGradientMatchesFiniteDifference) {
    auto net = small_net(12, 4, 1);
    Rng pick_rng(3);
    for (auto& t : net.arch()) {
        std::normal_distribution<double> n(0, 0.5);
        for (auto& v : t.mutable_data()) v = static_cast<real>(n(pick_rng));
    }
    net.edges(CellKind::normal)[3].alive[0] = false;
    const Tensor x = random_input({4, 3, 8, 8}, 77);
    const std::vector<int> labels = {1, 0, 0, 1};
    auto loss_at = [&](Tape* tape) {
        Rng masks(99);
        return softmax_cross_entropy(tape, net.forward(tape, x, masks, 0.5), labels);
    };
    auto arch = net.arch();
    zero_grads(arch);
    Tape tape;
    tape.backward(loss_at(&tape));
    std::vector<std::pair<Tensor, std::size_t>> probes = {
        {net.edges(CellKind::normal)[0].alpha, 2}, {net.edges(CellKind::normal)[3].alpha, 5},
        {net.edges(CellKind::reduction)[7].alpha, 0}, {net.edges(CellKind::normal)[9].beta, 0},
        {net.edges(CellKind::reduction)[13].beta, 0}, {net.edges(CellKind::reduction)[1].alpha, 8}};
    for (auto& [t, i] : probes) {
        const double h = 1e-5;
        const real orig = t.data()[i];
        t.mutable_data()[i] = static_cast<real>(orig + h);
        const double up = loss_at(nullptr).item();
        t.mutable_data()[i] = static_cast<real>(orig - h);
        const double down = loss_at(nullptr).item();
        t.mutable_data()[i] = orig;
        const double fd = (up - down) / (2 * h);
        EXPECT_NEAR(t.grad()[i], fd, 1e-6 + 1e-4 * std::abs(fd));
    }
}

TEST(Supernet, ProbeReplacesOneEdge) {
    auto net = small_net(6);
    const Tensor x = random_input({4, 3, 8, 8}, 6);
    Rng m1(3), m2(3), m3(3);
    const ProbeOverride p{CellKind::reduction, 4, 2};
    const Tensor a = net.forward(nullptr, x, m1, 0.25, &p);
    const Tensor b = net.forward(nullptr, x, m2, 0.25, &p);
    const Tensor c = net.forward(nullptr, x, m3, 0.25);
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_EQ(a[i], b[i]);
        differs |= a[i] != c[i];
    }
    EXPECT_TRUE(differs);
    // Masks for the remaining edges are drawn identically with and without a probe.
    EXPECT_EQ(m1(), m3());
}

TEST(Supernet, DeterministicInit) {
    auto a = small_net(21), b = small_net(21), c = small_net(22);
    EXPECT_EQ(hash_tensors(a.all_weights()), hash_tensors(b.all_weights()));
    EXPECT_EQ(hash_tensors(a.arch()), hash_tensors(b.arch()));
    EXPECT_NE(hash_tensors(a.all_weights()), hash_tensors(c.all_weights()));
}
