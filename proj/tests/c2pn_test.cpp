#include <fnas/c2pn.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

using namespace fnas;

namespace {

Genotype some_genotype(std::uint64_t seed = 1) {
    Rng r(seed);
    return random_genotype(OperatorRegistry::defaults(), r);
}

TrainConfig small_config(std::size_t input = 16, std::size_t channels = 4) {
    TrainConfig c;
    c.input_size = input;
    c.init_channels = channels;
    c.batch_size = 8;
    c.epochs = 2;
    c.seed = 3;
    return c;
}

Tensor random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
    Rng r(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<real> v(n * 3 * size * size);
    for (auto& x : v) x = static_cast<real>(u(r));
    return Tensor({n, 3, size, size}, std::move(v));
}

std::vector<std::vector<real>> values(const std::vector<Tensor>& ts) {
    std::vector<std::vector<real>> out;
    for (const auto& t : ts) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

std::vector<real> flat(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void copy_weights(DetectionNet& from, DetectionNet& to) {
    auto src = from.parameters(), dst = to.parameters();
    ASSERT_EQ(src.size(), dst.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto d = dst[i].mutable_data();
        std::copy(src[i].data().begin(), src[i].data().end(), d.begin());
    }
}

std::filesystem::path scratch() {
    auto d = std::filesystem::temp_directory_path() / "fnas_c2pn_test";
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
    TrainConfig c;
    EXPECT_EQ(c.epochs, 150u);
    EXPECT_EQ(c.batch_size, 48u);
    EXPECT_EQ(c.input_size, 64u);
    EXPECT_DOUBLE_EQ(c.lr, 0.025);
    EXPECT_DOUBLE_EQ(c.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c.weight_decay, 3e-4);
    EXPECT_NO_THROW(c.validate());
    c.input_size = 40;  // not divisible by 2^4
    EXPECT_THROW(c.validate(), Error);
    c = TrainConfig{};
    c.lr = -1;
    EXPECT_THROW(c.validate(), Error);
    c = TrainConfig{};
    c.epochs = 0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(TrainConfig, CosineSchedule) {
    TrainConfig c;
    c.epochs = 10;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.025);
    EXPECT_NEAR(scheduled_lr(c, 5), 0.0125, 1e-15);
    for (std::size_t e = 1; e < 10; ++e) EXPECT_LT(scheduled_lr(c, e), scheduled_lr(c, e - 1));
    c.cosine = false;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 7), 0.025);
}

TEST(TrainConfig, JsonRoundTrip) {
    TrainConfig c = small_config();
    c.pyramid = false;
    c.grad_clip = 2.5;
    EXPECT_EQ(train_config_from_json(c.to_json()).to_json(), c.to_json());
}

TEST(DetectionNet, FullSizeShapes) {
    TrainConfig c = small_config(64, 8);
    DetectionNet net(some_genotype(), c, 1);
    EXPECT_EQ(net.cells().size(), 12u);
    EXPECT_EQ(net.taps(), 4u);
    const auto out = net.forward(nullptr, random_images(48, 64, 1), false);
    EXPECT_EQ(out.logits.shape(), (Shape{48, 2}));
    ASSERT_EQ(out.taps.size(), 4u);
    const std::size_t sides[] = {32, 16, 8, 4};
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(out.taps[t].dim(2), sides[t]);
        EXPECT_EQ(out.taps[t].dim(3), sides[t]);
        // Four intermediate nodes of 2C, 4C, 8C, 16C channels.
        EXPECT_EQ(out.taps[t].dim(1), 4 * (8u << (t + 1)));
    }
}

TEST(DetectionNet, CellPatternAndChannelDoubling) {
    DetectionNet net(some_genotype(), small_config(16, 4), 1);
    std::size_t expect = 4;
    for (std::size_t i = 0; i < net.cells().size(); ++i) {
        const bool red = i % 3 == 2;
        EXPECT_EQ(net.cells()[i].kind, red ? CellKind::reduction : CellKind::normal) << i;
        if (red) expect *= 2;
        EXPECT_EQ(net.cells()[i].channels, expect) << i;
        EXPECT_EQ(net.cells()[i].ops.size(), 8u);
    }
}

TEST(DetectionNet, ParameterCountIsAFunctionOfGenotypeAndWidth) {
    const Genotype g = some_genotype(4);
    DetectionNet a(g, small_config(), 1), b(g, small_config(), 99);
    EXPECT_EQ(a.parameter_count(), b.parameter_count());
    DetectionNet wider(g, small_config(16, 6), 1);
    EXPECT_GT(wider.parameter_count(), a.parameter_count());
}

TEST(DetectionNet, SameInitSeedSameWeights) {
    const Genotype g = some_genotype(4);
    DetectionNet a(g, small_config(), 7), b(g, small_config(), 7), c(g, small_config(), 8);
    EXPECT_EQ(values(a.parameters()), values(b.parameters()));
    EXPECT_NE(values(a.parameters()), values(c.parameters()));
}

TEST(DetectionNet, RoundTrippedGenotypeBuildsTheSameNetwork) {
    for (std::uint64_t s = 1; s <= 5; ++s) {
        const Genotype g = some_genotype(s);
        const Genotype back = genotype_from_string(genotype_to_string(g));
        DetectionNet a(g, small_config(), 1), b(back, small_config(), 2);
        EXPECT_EQ(a.parameter_count(), b.parameter_count());
        copy_weights(a, b);
        const Tensor x = random_images(4, 16, s);
        EXPECT_EQ(flat(a.forward(nullptr, x, false).logits), flat(b.forward(nullptr, x, false).logits));
    }
}

TEST(DetectionNet, EveryTapReachesTheLogits) {
    DetectionNet net(some_genotype(2), small_config(), 1);
    const Tensor x = random_images(4, 16, 5);
    const auto full = flat(net.forward(nullptr, x, false).logits);
    for (std::size_t t = 0; t < 4; ++t) {
        std::vector<bool> mask(4, true);
        mask[t] = false;
        EXPECT_NE(flat(net.forward(nullptr, x, false, &mask).logits), full) << "tap " << t;
    }
}

TEST(DetectionNet, PlainCascadeUsesOnlyTheLastTap) {
    TrainConfig c = small_config();
    c.pyramid = false;
    DetectionNet plain(some_genotype(2), c, 1), pyramid(some_genotype(2), small_config(), 1);
    EXPECT_LT(plain.parameter_count(), pyramid.parameter_count());
    const Tensor x = random_images(4, 16, 5);
    const auto full = flat(plain.forward(nullptr, x, false).logits);
    std::vector<bool> mask = {false, false, false, true};
    EXPECT_EQ(flat(plain.forward(nullptr, x, false, &mask).logits), full);
}

TEST(DetectionNet, RejectsBadInputs) {
    DetectionNet net(some_genotype(), small_config(), 1);
    EXPECT_THROW(net.forward(nullptr, random_images(2, 20, 1), false), Error);
    EXPECT_THROW(net.forward(nullptr, Tensor::zeros({2, 1, 16, 16}), false), Error);
    Genotype g = some_genotype();
    g.normal[0].op = "no_such_op";
    EXPECT_THROW(DetectionNet(g, small_config(), 1), Error);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
    TrainConfig c = small_config();
    c.lr = 0;
    DetectionNet net(some_genotype(), c, 1);
    const auto before = values(net.parameters());
    train(net, generate_synthetic(1, 16, Manipulation::splice, 16), generate_synthetic(2, 8, Manipulation::splice, 16), c);
    EXPECT_EQ(values(net.parameters()), before);
}

TEST(Train, SameSeedSameFinalWeights) {
    auto once = [] {
        DetectionNet net(some_genotype(), small_config(), 1);
        auto r = train(net, generate_synthetic(1, 16, Manipulation::splice, 16),
                       generate_synthetic(2, 8, Manipulation::splice, 16), small_config());
        return std::pair{values(net.parameters()), r.curves};
    };
    const auto a = once(), b = once();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Train, RecordsCurvesAndKeepsTheBestEpoch) {
    TrainConfig c = small_config();
    c.epochs = 3;
    DetectionNet net(some_genotype(), c, 1);
    const Dataset val = generate_synthetic(2, 8, Manipulation::splice, 16);
    std::size_t calls = 0;
    auto r = train(net, generate_synthetic(1, 16, Manipulation::splice, 16), val, c,
                   [&](std::size_t e, const TrainResult&) { EXPECT_EQ(e, ++calls); });
    EXPECT_EQ(calls, 3u);
    for (const char* k : {"lr", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc"})
        EXPECT_EQ(r.curves.at(k).size(), 3u) << k;
    const auto& aucs = r.curves.at("val_auc");
    ASSERT_GE(r.best_epoch, 1u);
    EXPECT_EQ(r.best_val_auc, *std::max_element(aucs.begin(), aucs.end()));
    EXPECT_EQ(aucs[r.best_epoch - 1], r.best_val_auc);
    // The restored weights are the best epoch's.
    EXPECT_DOUBLE_EQ(evaluate(net, val, c.batch_size).auc, r.best_val_auc);
}

TEST(Train, ToyRunLowersTrainingLoss) {
    TrainConfig c = small_config();
    c.epochs = 10;
    DetectionNet net(some_genotype(3), c, 1);
    auto r = train(net, generate_synthetic(1, 64, Manipulation::splice, 16),
                   generate_synthetic(2, 16, Manipulation::splice, 16), c);
    const auto& l = r.curves.at("train_loss");
    EXPECT_LT(l.back(), l.front());
}

TEST(Train, NonFiniteLossAborts) {
    Dataset d = generate_synthetic(1, 16, Manipulation::splice, 16);
    d.samples[0].pixels[0] = std::numeric_limits<real>::quiet_NaN();
    DetectionNet net(some_genotype(), small_config(), 1);
    try {
        train(net, d, generate_synthetic(2, 8, Manipulation::splice, 16), small_config());
        FAIL() << "expected divergence error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }
}

TEST(Train, RejectsMismatchedImageSize) {
    DetectionNet net(some_genotype(), small_config(), 1);
    EXPECT_THROW(train(net, generate_synthetic(1, 16, Manipulation::splice, 32),
                       generate_synthetic(2, 8, Manipulation::splice, 32), small_config()),
                 Error);
}

TEST(Evaluate, MatchesMetricsReferenceAndIsPure) {
    DetectionNet net(some_genotype(), small_config(), 1);
    const Dataset test = generate_synthetic(4, 20, Manipulation::splice, 16);
    const auto scores = net.predict(test, 8);
    const auto r1 = evaluate(net, test, 8), r2 = evaluate(net, test, 8);
    EXPECT_EQ(r1.auc, auc(scores, test.labels()));
    EXPECT_EQ(r1.acc, accuracy(scores, test.labels()));
    EXPECT_EQ(r1.n_samples, 20u);
    EXPECT_EQ(r1, r2);
    for (double s : scores) {
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Evaluate, SingleClassSetIsAnError) {
    DetectionNet net(some_genotype(), small_config(), 1);
    Dataset test = generate_synthetic(4, 20, Manipulation::splice, 16);
    test.samples.erase(std::remove_if(test.samples.begin(), test.samples.end(), [](const Sample& s) { return s.label; }),
                       test.samples.end());
    EXPECT_THROW(evaluate(net, test, 8), Error);
    EXPECT_THROW(evaluate(net, Dataset{}, 8), Error);
}

TEST(ActivationMap, UntrainedNetGivesAValidMap) {
    DetectionNet net(some_genotype(), small_config(32, 4), 1);
    const Dataset d = generate_synthetic(1, 4, Manipulation::splice, 32);
    for (const auto& s : d.samples) {
        const auto m = activation_map(net, Tensor({3, 32, 32}, s.pixels));
        EXPECT_EQ(m.height, 32u);
        EXPECT_EQ(m.width, 32u);
        ASSERT_EQ(m.values.size(), 32u * 32u);
        for (double v : m.values) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        if (!m.degenerate) EXPECT_DOUBLE_EQ(*std::max_element(m.values.begin(), m.values.end()), 1.0);
        EXPECT_TRUE(m.predicted_class == 0 || m.predicted_class == 1);
    }
    // The map pass leaves parameters trainable and unchanged.
    for (const auto& p : net.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(ActivationMap, QuadrantFromCenterOfGravity) {
    ActivationMap m;
    m.height = m.width = 4;
    for (int q = 0; q < 4; ++q) {
        m.values.assign(16, 0.0);
        const std::size_t y = q / 2 ? 3 : 0, x = q % 2 ? 3 : 0;
        m.values[y * 4 + x] = 1;
        EXPECT_EQ(m.quadrant(), q);
    }
    m.values.assign(16, 0.0);
    m.values[0] = m.values[15] = 1;
    const auto [cx, cy] = m.center_of_gravity();
    EXPECT_DOUBLE_EQ(cx, 2.0);
    EXPECT_DOUBLE_EQ(cy, 2.0);
}

TEST(ActivationMap, HeatmapFileIsAGraymap) {
    ActivationMap m;
    m.height = 2;
    m.width = 3;
    m.values = {0, 0.5, 1, 1, 0.5, 0};
    const auto path = (scratch() / "map.pgm").string();
    write_heatmap(path, m);
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    std::size_t w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 3u);
    EXPECT_EQ(h, 2u);
    EXPECT_EQ(maxv, 255u);
}

TEST(Weights, SaveLoadRoundTrip) {
    TrainConfig c = small_config();
    DetectionNet net(some_genotype(6), c, 1);
    train(net, generate_synthetic(1, 16, Manipulation::splice, 16), generate_synthetic(2, 8, Manipulation::splice, 16), c);
    const auto path = (scratch() / "net.weights").string();
    save_weights(net, c, path);
    auto loaded = load_weights(path);
    EXPECT_EQ(loaded.config.to_json(), c.to_json());
    EXPECT_EQ(genotype_to_string(loaded.net.genotype()), genotype_to_string(net.genotype()));
    EXPECT_EQ(values(loaded.net.parameters()), values(net.parameters()));
    const Tensor x = random_images(4, 16, 9);
    EXPECT_EQ(flat(loaded.net.forward(nullptr, x, false).logits), flat(net.forward(nullptr, x, false).logits));
}

TEST(Weights, RejectsForeignFiles) {
    const auto path = (scratch() / "junk.weights").string();
    std::ofstream(path) << "not a weights file";
    EXPECT_THROW(load_weights(path), Error);
    EXPECT_THROW(load_weights((scratch() / "absent.weights").string()), Error);
}
