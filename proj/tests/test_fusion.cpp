#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dfn/checkpoint.hpp"
#include "dfn/fusion.hpp"
#include "dfn/gradcheck.hpp"

using namespace dfn;

namespace {

void zero_out(Tensor t) {
    std::fill(t.data().begin(), t.data().end(), 0.0);
}

DFNetConfig tiny_config(int depth, int m, int width = 8) {
    DFNetConfig cfg;
    cfg.encoder_depth = depth;
    cfg.widths.assign(static_cast<std::size_t>(depth), width);
    cfg.fusion_blocks = m;
    cfg.alpha_hidden = 4;
    cfg.p_layers = {1};
    cfg.q_layers = {1};
    return cfg;
}

Mask checker_mask(int h, int w) {
    // Unknown band over rows [h/4, h/2): ratio is exactly 1/4.
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(h) * w, 1);
    for (int y = h / 4; y < h / 2; ++y)
        for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = 0;
    return make_mask(h, w, std::move(grid));
}

}  // namespace

TEST(MapFn, ZeroWeightsGiveHalf) {
    Rng rng(1);
    FusionBlock block(8, 4, 0.2, rng);
    zero_out(block.map_conv.w);
    zero_out(block.map_conv.b);
    auto f = Tensor::uniform({1, 8, 4, 4}, rng, -1.0, 1.0);
    auto c = block.map_fn(f);
    for (double v : c.data()) EXPECT_EQ(v, 0.5);
}

TEST(MapFn, ShapeContract) {
    Rng rng(2);
    FusionBlock block(64, 8, 0.2, rng);
    auto f = Tensor::uniform({1, 64, 32, 32}, rng, -1.0, 1.0);
    EXPECT_EQ(block.map_fn(f).shape(), (Shape{1, 3, 32, 32}));

    auto wrong = Tensor::uniform({1, 16, 32, 32}, rng, -1.0, 1.0);
    EXPECT_THROW(block.map_fn(wrong), ShapeError);
}

TEST(MapFn, GradientMatchesFiniteDifferences) {
    Rng rng(3);
    FusionBlock block(6, 4, 0.2, rng);
    auto f = Tensor::uniform({1, 6, 5, 5}, rng, -1.0, 1.0, true);
    auto probe = Tensor::uniform({1, 3, 5, 5}, rng, -1.0, 1.0);
    auto loss = [&] { return sum(mul(block.map_fn(f), probe)); };
    EXPECT_LT(gradcheck_max_rel_error(loss, {f, block.map_conv.w, block.map_conv.b}),
              1e-5);
}

TEST(AlphaFn, ZeroFinalConvGivesHalf) {
    Rng rng(4);
    FusionBlock block(8, 4, 0.2, rng);
    zero_out(block.a3.w);
    zero_out(block.a3.b);
    auto f = Tensor::uniform({2, 8, 8, 8}, rng, -1.0, 1.0);
    auto img = Tensor::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
    auto alpha = block.alpha_fn(f, img, Mode::Train);
    for (double v : alpha.data()) EXPECT_EQ(v, 0.5);
}

TEST(AlphaFn, ShapeContract) {
    Rng rng(5);
    FusionBlock block(64, 8, 0.2, rng);
    auto f = Tensor::uniform({1, 64, 32, 32}, rng, -1.0, 1.0);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
    EXPECT_EQ(block.alpha_fn(f, img, Mode::Train).shape(), (Shape{1, 3, 32, 32}));

    auto small = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    EXPECT_THROW(block.alpha_fn(f, small, Mode::Train), ShapeError);
}

TEST(AlphaFn, GradientThroughFullStack) {
    Rng rng(6);
    FusionBlock block(6, 4, 0.2, rng);
    auto f = Tensor::uniform({2, 6, 4, 4}, rng, -1.0, 1.0, true);
    auto img = Tensor::uniform({2, 3, 4, 4}, rng, 0.0, 1.0, true);
    auto probe = Tensor::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
    auto loss = [&] {
        return sum(mul(block.alpha_fn(f, img, Mode::Train), probe));
    };
    std::vector<Tensor> probed = {f,          img,        block.a1.w, block.a1.b,
                                  block.a2.w, block.a2.b, block.a3.w, block.a3.b,
                                  block.bn1.gamma, block.bn2.beta};
    EXPECT_LT(gradcheck_max_rel_error(loss, probed), 1e-4);
}

TEST(Blend, ConvexEndpointsAndMidpoint) {
    auto c = Tensor::full({1, 3, 2, 2}, 1.0);
    auto i = Tensor::zeros({1, 3, 2, 2});
    EXPECT_EQ(blend(Tensor::zeros({1, 3, 2, 2}), c, i).data(), i.data());
    EXPECT_EQ(blend(Tensor::full({1, 3, 2, 2}, 1.0), c, i).data(), c.data());
    auto mid = blend(Tensor::full({1, 3, 2, 2}, 0.5), c, i);
    for (double v : mid.data()) EXPECT_EQ(v, 0.5);
    EXPECT_THROW(blend(Tensor::zeros({1, 3, 4, 4}), c, i), ShapeError);
}

TEST(ResizeInput, IdentityAtK1) {
    Rng rng(7);
    auto x = Tensor::uniform({1, 3, 8, 8}, rng, 0.0, 1.0);
    EXPECT_EQ(resize_input(x, 1).data(), x.data());
}

TEST(ResizeInput, ConstantStaysConstant) {
    auto x = Tensor::full({1, 3, 16, 16}, 0.3);
    auto y = resize_input(x, 2);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 8, 8}));
    for (double v : y.data()) EXPECT_EQ(v, 0.3);
}

TEST(ResizeInput, CheckerboardAveragesToHalf) {
    std::vector<double> d(static_cast<std::size_t>(3) * 256 * 256);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 256; ++y)
            for (int x = 0; x < 256; ++x)
                d[(static_cast<std::size_t>(c) * 256 + y) * 256 + x] =
                    (x + y) % 2 == 0 ? 0.0 : 1.0;
    auto x = Tensor::from_data({1, 3, 256, 256}, std::move(d));
    auto y = resize_input(x, 3);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64}));
    for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(ResizeInput, RejectsNonDivisibleExtents) {
    auto x = Tensor::zeros({1, 3, 6, 6});
    EXPECT_THROW(resize_input(x, 3), ShapeError);
    EXPECT_THROW(resize_input(x, 0), ContractError);
}

TEST(HardComposite, MaskGatedCopy) {
    auto in = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto out = Tensor::from_data({1, 1, 2, 2}, {9.0, 8.0, 7.0, 6.0});

    auto all_known = Tensor::full({1, 1, 2, 2}, 1.0);
    EXPECT_EQ(hard_composite(in, out, all_known).data(), in.data());

    auto all_unknown = Tensor::zeros({1, 1, 2, 2});
    EXPECT_EQ(hard_composite(in, out, all_unknown).data(), out.data());

    // Columns mixed per definition: M = [[1,0],[1,0]].
    auto half = Tensor::from_data({1, 1, 2, 2}, {1.0, 0.0, 1.0, 0.0});
    auto comp = hard_composite(in, out, half);
    EXPECT_EQ(comp.data(), (std::vector<double>{1.0, 8.0, 3.0, 6.0}));

    // Idempotent on the known region.
    auto twice = hard_composite(in, comp, half);
    EXPECT_EQ(twice.data(), comp.data());

    EXPECT_THROW(hard_composite(in, Tensor::zeros({1, 1, 4, 4}), half),
                 ShapeError);
}

TEST(DFNetForward, ResolutionLaw) {
    DFNet net(tiny_config(4, 3), 11);
    Rng rng(12);
    auto img = Tensor::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
    auto outputs = net.forward(img, checker_mask(64, 64), Mode::Train);
    ASSERT_EQ(outputs.size(), 3u);
    for (int k = 1; k <= 3; ++k) {
        const auto& lo = outputs[static_cast<std::size_t>(k - 1)];
        EXPECT_EQ(lo.k, k);
        const std::int64_t e = 64 >> (k - 1);
        EXPECT_EQ(lo.features.extent(2), e);
        EXPECT_EQ(lo.raw_completion.shape(), (Shape{1, 3, e, e}));
        EXPECT_EQ(lo.alpha.shape(), (Shape{1, 3, e, e}));
        EXPECT_EQ(lo.scaled_input.shape(), (Shape{1, 3, e, e}));
        EXPECT_EQ(lo.fused.shape(), (Shape{1, 3, e, e}));
    }
}

TEST(DFNetForward, AlphaOpenRangeAndConvexBound) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        DFNet net(tiny_config(3, 2), seed);
        Rng rng(100 + seed);
        auto img = Tensor::uniform({2, 3, 32, 32}, rng, 0.0, 1.0);
        auto outputs = net.forward(img, checker_mask(32, 32), Mode::Train);
        for (const auto& lo : outputs) {
            const auto& a = lo.alpha.data();
            const auto& c = lo.raw_completion.data();
            const auto& i = lo.scaled_input.data();
            const auto& f = lo.fused.data();
            for (std::size_t j = 0; j < a.size(); ++j) {
                EXPECT_GT(a[j], 0.0);
                EXPECT_LT(a[j], 1.0);
                EXPECT_GE(f[j], std::min(c[j], i[j]));
                EXPECT_LE(f[j], std::max(c[j], i[j]));
            }
        }
    }
}

TEST(DFNetForward, ZeroedFusionWeightsGiveClosedForm) {
    DFNet net(tiny_config(3, 2), 21);
    for (int k = 1; k <= 2; ++k) {
        auto& block = net.fusion_block(k);
        zero_out(block.map_conv.w);
        zero_out(block.map_conv.b);
        zero_out(block.a3.w);
        zero_out(block.a3.b);
    }
    Rng rng(22);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
    auto outputs = net.forward(img, checker_mask(32, 32), Mode::Train);
    for (const auto& lo : outputs) {
        // C = sigmoid(0) = 0.5 and alpha = 0.5, so fused = 0.25 + 0.5 * I_k.
        for (std::size_t j = 0; j < lo.fused.data().size(); ++j) {
            EXPECT_NEAR(lo.fused.data()[j],
                        0.25 + 0.5 * lo.scaled_input.data()[j], 1e-15);
        }
    }
}

TEST(DFNetForward, RejectsBadExtents) {
    DFNet net(tiny_config(3, 1), 31);
    Rng rng(32);
    auto img = Tensor::uniform({1, 3, 48, 48}, rng, 0.0, 1.0);  // not a power of two
    EXPECT_THROW(net.forward(img, checker_mask(48, 48), Mode::Train), ShapeError);
    auto small = Tensor::uniform({1, 3, 4, 4}, rng, 0.0, 1.0);  // below 2^depth
    EXPECT_THROW(net.forward(small, checker_mask(4, 4), Mode::Train), ShapeError);
}

TEST(DFNetInfer, MatchesInputShapeAndIsDeterministic) {
    DFNet net(tiny_config(4, 2), 41);
    Rng rng(42);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
    auto mask = checker_mask(32, 32);
    auto a = net.infer(img, mask);
    auto b = net.infer(img, mask);
    EXPECT_EQ(a.shape(), img.shape());
    EXPECT_EQ(a.data(), b.data());
    for (double v : a.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(DFNetForward, HardMaskBlendUsesResizedMask) {
    auto cfg = tiny_config(3, 2);
    cfg.hard_mask_blend = true;
    DFNet net(cfg, 51);
    Rng rng(52);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
    auto mask = checker_mask(32, 32);
    auto outputs = net.forward(img, mask, Mode::Train);
    // At k=1 the alpha map equals 1 - M, so known pixels pass through.
    const auto& lo = outputs[0];
    const auto plane = mask_to_tensor(mask);
    for (std::int64_t p = 0; p < 32 * 32; ++p) {
        if (plane.raw()[p] == 1.0) {
            for (int c = 0; c < 3; ++c) {
                EXPECT_EQ(lo.fused.data()[static_cast<std::size_t>(c * 1024 + p)],
                          lo.scaled_input.data()[static_cast<std::size_t>(c * 1024 + p)]);
            }
        }
    }
}

TEST(Checkpoint, RoundTripsBitwise) {
    namespace fs = std::filesystem;
    const auto dir = fs::path(testing::TempDir()) / "dfn_ckpt_test";
    fs::create_directories(dir);

    auto cfg = tiny_config(3, 2);
    DFNet net(cfg, 61);
    Rng rng(62);
    auto img = Tensor::uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
    net.forward(img, checker_mask(16, 16), Mode::Train);  // move BN stats

    ParamGroup group;
    for (auto& [name, t] : net.named_params()) group.add(name, t);
    group.step_count = 3;

    const auto path_a = (dir / "a.ckpt").string();
    const auto path_b = (dir / "b.ckpt").string();
    save_model_checkpoint(path_a, net, 16, &group);

    auto loaded = load_model_checkpoint(path_a);
    EXPECT_EQ(loaded.image_size, 16);
    ASSERT_TRUE(loaded.adam.has_value());
    EXPECT_EQ(loaded.adam->step_count, 3);

    save_model_checkpoint(path_b, loaded.model, loaded.image_size,
                          &*loaded.adam);
    std::ifstream fa(path_a, std::ios::binary), fb(path_b, std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(fa)),
                   std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(fb)),
                   std::istreambuf_iterator<char>());
    EXPECT_EQ(ba, bb);
    EXPECT_FALSE(ba.empty());

    // Loaded model reproduces the original bitwise.
    auto x = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto mask = checker_mask(16, 16);
    EXPECT_EQ(net.infer(x, mask).data(), loaded.model.infer(x, mask).data());
}

TEST(Checkpoint, FeatureExtractorFileRoundTrips) {
    namespace fs = std::filesystem;
    const auto dir = fs::path(testing::TempDir()) / "dfn_fx_test";
    fs::create_directories(dir);

    FeatureExtractorConfig cfg;
    cfg.widths = {4, 8};
    cfg.taps = {1, 2};
    FeatureExtractor fx(cfg);
    const auto path = (dir / "fx.bin").string();
    save_feature_extractor(path, fx);
    auto fx2 = load_feature_extractor(path);

    Rng rng(71);
    auto img = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto a = fx.features(img);
    auto b = fx2.features(img);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].data(), b[i].data());
    }
}

TEST(DFNetConfig, Validation) {
    auto cfg = tiny_config(3, 2);
    cfg.p_layers = {3};  // outside {1..m}
    EXPECT_THROW(DFNet(cfg, 0), ContractError);

    cfg = tiny_config(3, 2);
    cfg.widths = {8, 8};  // wrong arity
    EXPECT_THROW(DFNet(cfg, 0), ContractError);

    cfg = tiny_config(3, 4);  // m > depth
    EXPECT_THROW(DFNet(cfg, 0), ContractError);
}
