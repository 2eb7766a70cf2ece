#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dfn/gradsuite.hpp"
#include "dfn/train.hpp"

using namespace dfn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::path(testing::TempDir()) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunConfig tiny_run(const fs::path& dir) {
    RunConfig cfg;
    cfg.data = "synth:8";
    cfg.image_size = 16;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.seed = 5;
    cfg.mask_pool = 6;
    cfg.checkpoint_path = (dir / "model.ckpt").string();
    cfg.net.encoder_depth = 3;
    cfg.net.widths = {8, 8, 8};
    cfg.net.fusion_blocks = 2;
    cfg.net.alpha_hidden = 4;
    cfg.net.p_layers = {1, 2};
    cfg.net.q_layers = {1};
    return cfg;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST(RunConfigParsing, FileAndOverrides) {
    auto dir = fresh_dir("dfn_cfg");
    {
        std::ofstream out(dir / "run.cfg");
        out << "# comment line\n";
        out << "data=synth:12\n";
        out << "image_size=32\n";
        out << "fusion_blocks=2\n";
        out << "encoder_depth=4\n";
        out << "p=2\n";
        out << "q=1\n";
        out << "lambda_s=120.5\n";
        out << "seed=99\n";
    }
    auto cfg = load_run_config((dir / "run.cfg").string());
    EXPECT_EQ(cfg.data, "synth:12");
    EXPECT_EQ(cfg.image_size, 32);
    EXPECT_EQ(cfg.net.fusion_blocks, 2);
    EXPECT_EQ(cfg.net.encoder_depth, 4);
    EXPECT_EQ(cfg.net.widths, (std::vector<int>{32, 64, 128, 128}));
    EXPECT_EQ(cfg.net.p_layers, (std::vector<int>{1, 2}));
    EXPECT_EQ(cfg.net.q_layers, (std::vector<int>{1}));
    EXPECT_EQ(cfg.net.loss_weights.style, 120.5);
    EXPECT_EQ(cfg.seed, 99u);

    apply_config_entry(cfg, "batch_size", "2");
    EXPECT_EQ(cfg.batch_size, 2);
    EXPECT_THROW(apply_config_entry(cfg, "no_such_key", "1"), ContractError);
    EXPECT_THROW(apply_config_entry(cfg, "batch_size", "abc"), ContractError);
}

TEST(RunConfigParsing, Validation) {
    RunConfig cfg;
    cfg.epochs = 25;  // beyond the default 20-epoch schedule
    EXPECT_THROW(cfg.validate(), ContractError);
    cfg.epochs = 5;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(Train, OneRunProducesReloadableCheckpointAndLog) {
    auto dir = fresh_dir("dfn_train1");
    auto cfg = tiny_run(dir);
    cfg.log_path = (dir / "log.jsonl").string();
    auto result = train(cfg);

    // 8 images, batch 4, 2 epochs -> 4 steps, strictly increasing.
    ASSERT_EQ(result.log.records.size(), 4u);
    for (std::size_t i = 0; i < result.log.records.size(); ++i) {
        EXPECT_EQ(result.log.records[i].step, static_cast<std::int64_t>(i));
        EXPECT_EQ(result.log.records[i].lr,
                  lr_at(cfg.schedule, result.log.records[i].epoch));
        EXPECT_TRUE(std::isfinite(result.log.records[i].total));
    }
    EXPECT_TRUE(fs::exists(cfg.log_path));

    auto loaded = load_model_checkpoint(cfg.checkpoint_path);
    EXPECT_EQ(loaded.image_size, 16);
    for (auto& [name, t] : loaded.model.named_params()) {
        bool found = false;
        for (auto& [name2, t2] : result.model.named_params()) {
            if (name2 == name) {
                EXPECT_EQ(t.data(), t2.data()) << name;
                found = true;
            }
        }
        EXPECT_TRUE(found) << name;
    }
    ASSERT_TRUE(loaded.adam.has_value());
    EXPECT_EQ(loaded.adam->step_count, 4);
}

TEST(Train, BitwiseReproducibleAcrossRuns) {
    auto dir_a = fresh_dir("dfn_repro_a");
    auto dir_b = fresh_dir("dfn_repro_b");
    auto cfg_a = tiny_run(dir_a);
    auto cfg_b = tiny_run(dir_b);
    auto ra = train(cfg_a);
    auto rb = train(cfg_b);

    EXPECT_EQ(file_bytes(cfg_a.checkpoint_path), file_bytes(cfg_b.checkpoint_path));

    // Metric reports agree bitwise too.
    FeatureExtractor fx;
    auto masks_a = build_mask_pool(4, 16, 77);
    auto report_a = evaluate_model(ra.model, ra.images, {masks_a[0], masks_a[1],
                                   masks_a[2], masks_a[3], masks_a[0], masks_a[1],
                                   masks_a[2], masks_a[3]}, 1, fx);
    auto report_b = evaluate_model(rb.model, rb.images, {masks_a[0], masks_a[1],
                                   masks_a[2], masks_a[3], masks_a[0], masks_a[1],
                                   masks_a[2], masks_a[3]}, 1, fx);
    EXPECT_EQ(report_a.to_json().dump(), report_b.to_json().dump());
}

TEST(Train, LoggedLrFollowsSchedule) {
    auto dir = fresh_dir("dfn_lr");
    auto cfg = tiny_run(dir);
    cfg.data = "synth:4";
    cfg.epochs = 16;
    cfg.mask_pool = 4;
    auto result = train(cfg);
    for (const auto& r : result.log.records) {
        if (r.epoch == 0) EXPECT_EQ(r.lr, 2e-3);
        if (r.epoch == 5) EXPECT_EQ(r.lr, 2e-4);
        if (r.epoch == 10) EXPECT_EQ(r.lr, 2e-5);
        if (r.epoch == 15) EXPECT_EQ(r.lr, 2e-6);
    }
}

TEST(MeanFill, FillsHoleWithKnownMean) {
    std::vector<std::uint8_t> grid(16, 1);
    grid[5] = 0;
    grid[6] = 0;
    auto mask = make_mask(4, 4, std::move(grid));
    std::vector<double> vals(3 * 16, 0.25);
    vals[5] = 99.0;  // unknown pixels should be ignored and replaced
    vals[6] = 99.0;
    auto img = Tensor::from_data({3, 4, 4}, std::move(vals));
    auto filled = mean_fill(img, mask);
    EXPECT_EQ(filled.data()[5], 0.25);
    EXPECT_EQ(filled.data()[6], 0.25);
    EXPECT_EQ(filled.data()[0], 0.25);

    auto all_unknown = make_mask(4, 4, std::vector<std::uint8_t>(16, 0));
    EXPECT_THROW(mean_fill(img, all_unknown), ContractError);
}

TEST(EvaluateModel, BookkeepingMatchesInputs) {
    auto dir = fresh_dir("dfn_evalmodel");
    auto cfg = tiny_run(dir);
    cfg.epochs = 1;
    auto result = train(cfg);

    auto masks = build_mask_pool(8, 16, 123);
    FeatureExtractor fx;
    auto report = evaluate_model(result.model, result.images, masks, 1, fx);
    EXPECT_EQ(report.total_count(), 8);
    for (std::size_t b = 0; b < 5; ++b) {
        if (report.buckets[b]) {
            EXPECT_GT(report.buckets[b]->count, 0);
            EXPECT_GE(report.buckets[b]->l1, 0.0);
            EXPECT_GE(report.buckets[b]->bpe, 0.0);
            EXPECT_GE(report.buckets[b]->ffd, 0.0);
        }
    }
}

TEST(Train, HardBlendVariantTrains) {
    auto dir = fresh_dir("dfn_hard");
    auto cfg = tiny_run(dir);
    cfg.epochs = 1;
    cfg.net.hard_mask_blend = true;
    auto result = train(cfg);
    EXPECT_EQ(result.log.records.size(), 2u);
    for (const auto& r : result.log.records) EXPECT_TRUE(std::isfinite(r.total));
}
