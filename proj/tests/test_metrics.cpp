#include <gtest/gtest.h>

#include <cmath>

#include "dfn/metrics.hpp"

using namespace dfn;

namespace {

Mask right_half_unknown(int h, int w) {
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(h) * w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = w / 2; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = 0;
    return make_mask(h, w, std::move(grid));
}

Mask single_hole(int h, int w, int y, int x) {
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(h) * w, 1);
    grid[static_cast<std::size_t>(y) * w + x] = 0;
    return make_mask(h, w, std::move(grid));
}

// Simple deterministic embedder for evaluate_set tests: channel means.
std::vector<double> channel_mean_embedder(const Tensor& img) {
    const auto& s = img.shape();
    const std::int64_t C = s[0], plane = s[1] * s[2];
    std::vector<double> out(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += img.raw()[c * plane + i];
        out[static_cast<std::size_t>(c)] = acc / static_cast<double>(plane);
    }
    return out;
}

}  // namespace

TEST(L1Metric, TrivialValues) {
    auto a = Tensor::full({3, 4, 4}, 0.25);
    EXPECT_EQ(l1_metric(a, a), 0.0);
    auto b = Tensor::full({3, 4, 4}, 0.26);
    EXPECT_NEAR(l1_metric(a, b), 1.0, 1e-12);
    EXPECT_THROW(l1_metric(a, Tensor::zeros({3, 2, 2})), ShapeError);
}

TEST(L1Metric, TriangleConsistency) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = Tensor::uniform({3, 4, 4}, rng, 0.0, 1.0);
        auto b = Tensor::uniform({3, 4, 4}, rng, 0.0, 1.0);
        auto c = Tensor::uniform({3, 4, 4}, rng, 0.0, 1.0);
        EXPECT_LE(l1_metric(a, c), l1_metric(a, b) + l1_metric(b, c) + 1e-12);
    }
}

TEST(BoundaryBand, SingleUnknownPixel) {
    auto m = single_hole(8, 8, 3, 4);
    auto band = boundary_band(m, 1);
    EXPECT_EQ(band.count, 1);
    EXPECT_EQ(band.band[3 * 8 + 4], 1);
}

TEST(BoundaryBand, RightHalfHandCase) {
    // 4x4 with right half unknown, n=1: band is exactly the third column.
    auto m = right_half_unknown(4, 4);
    auto band = boundary_band(m, 1);
    EXPECT_EQ(band.count, 4);
    for (int y = 0; y < 4; ++y) {
        EXPECT_EQ(band.band[static_cast<std::size_t>(y) * 4 + 2], 1);
        EXPECT_EQ(band.band[static_cast<std::size_t>(y) * 4 + 3], 0);
    }
}

TEST(BoundaryBand, SaturatesToWholeHole) {
    auto m = right_half_unknown(8, 8);
    auto band = boundary_band(m, 8);
    EXPECT_EQ(band.count, m.unknown_count());
}

TEST(BoundaryBand, MonotoneInN) {
    auto m = right_half_unknown(8, 8);
    auto b1 = boundary_band(m, 1);
    auto b2 = boundary_band(m, 2);
    EXPECT_LT(b1.count, b2.count);
    for (std::size_t i = 0; i < b1.band.size(); ++i) {
        if (b1.band[i]) EXPECT_EQ(b2.band[i], 1);
    }
}

TEST(BoundaryBand, DegenerateMasksRejected) {
    auto all_known = make_mask(4, 4, std::vector<std::uint8_t>(16, 1));
    EXPECT_THROW(boundary_band(all_known, 1), ContractError);
    auto all_unknown = make_mask(4, 4, std::vector<std::uint8_t>(16, 0));
    EXPECT_THROW(boundary_band(all_unknown, 1), ContractError);
}

TEST(Bpe, IdentityAndUniformBandError) {
    auto m = right_half_unknown(8, 8);
    Rng rng(2);
    auto target = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
    EXPECT_EQ(bpe(target, target, m, 1), 0.0);

    // Uniform 0.01 error on band pixels only -> BPE is exactly 1.0.
    auto band = boundary_band(m, 1);
    auto pred = target.detach();
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < 64; ++i) {
            if (band.band[static_cast<std::size_t>(i)]) {
                pred.data()[static_cast<std::size_t>(c * 64 + i)] += 0.01;
            }
        }
    }
    EXPECT_NEAR(bpe(pred, target, m, 1), 1.0, 1e-10);
}

TEST(Bpe, DependsOnlyOnBandPixelsBitwise) {
    auto m = right_half_unknown(8, 8);
    Rng rng(3);
    auto target = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
    auto pred = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
    const double before = bpe(pred, target, m, 2);

    auto band = boundary_band(m, 2);
    auto perturbed = pred.detach();
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < 64; ++i) {
            if (!band.band[static_cast<std::size_t>(i)]) {
                perturbed.data()[static_cast<std::size_t>(c * 64 + i)] =
                    rng.next_double() * 10.0 - 5.0;
            }
        }
    }
    const double after = bpe(perturbed, target, m, 2);
    EXPECT_EQ(before, after);  // bitwise
}

TEST(Bpe, ConvergesToHoleRestrictedL1) {
    auto m = right_half_unknown(8, 8);
    Rng rng(4);
    auto target = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
    auto pred = Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0);
    const double wide = bpe(pred, target, m, 8);

    double acc = 0.0;
    std::int64_t cnt = 0;
    for (std::int64_t i = 0; i < 64; ++i) {
        if (m.grid[static_cast<std::size_t>(i)] == 0) {
            ++cnt;
            for (std::int64_t c = 0; c < 3; ++c) {
                acc += std::fabs(pred.raw()[c * 64 + i] - target.raw()[c * 64 + i]);
            }
        }
    }
    EXPECT_NEAR(wide, 100.0 * acc / static_cast<double>(cnt * 3), 1e-12);
}

TEST(MatrixSqrt, FixedPoints) {
    const std::vector<double> eye = {1, 0, 0, 1};
    EXPECT_EQ(matrix_sqrt_psd(eye, 2), eye);

    const std::vector<double> diag = {4, 0, 0, 9};
    auto r = matrix_sqrt_psd(diag, 2);
    EXPECT_NEAR(r[0], 2.0, 1e-12);
    EXPECT_NEAR(r[3], 3.0, 1e-12);
    EXPECT_NEAR(r[1], 0.0, 1e-12);
}

TEST(MatrixSqrt, ReconstructsRandomPsd) {
    Rng rng(5);
    const int d = 12;
    std::vector<double> a(static_cast<std::size_t>(d) * d);
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    // S = A^T A is symmetric PSD.
    std::vector<double> s(a.size(), 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k)
                s[static_cast<std::size_t>(i) * d + j] +=
                    a[static_cast<std::size_t>(k) * d + i] *
                    a[static_cast<std::size_t>(k) * d + j];

    auto r = matrix_sqrt_psd(s, d);
    // Residual ||R R - S||_F / ||S||_F < 1e-8, and R is symmetric.
    double num = 0.0, den = 0.0;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            double rr = 0.0;
            for (int k = 0; k < d; ++k)
                rr += r[static_cast<std::size_t>(i) * d + k] *
                      r[static_cast<std::size_t>(k) * d + j];
            const double diff = rr - s[static_cast<std::size_t>(i) * d + j];
            num += diff * diff;
            den += s[static_cast<std::size_t>(i) * d + j] *
                   s[static_cast<std::size_t>(i) * d + j];
            EXPECT_NEAR(r[static_cast<std::size_t>(i) * d + j],
                        r[static_cast<std::size_t>(j) * d + i], 1e-12);
        }
    }
    EXPECT_LT(std::sqrt(num / den), 1e-8);
}

TEST(MatrixSqrt, RejectsAsymmetry) {
    const std::vector<double> bad = {1, 2, 3, 1};
    EXPECT_THROW(matrix_sqrt_psd(bad, 2), ContractError);
    EXPECT_THROW(matrix_sqrt_psd({1, 0, 0, -1}, 2), ContractError);
}

TEST(Frechet, IdenticalSetsGiveZero) {
    Rng rng(6);
    std::vector<std::vector<double>> a;
    for (int i = 0; i < 10; ++i) {
        a.push_back({rng.next_double(), rng.next_double(), rng.next_double()});
    }
    EXPECT_NEAR(frechet_feature_distance(a, a), 0.0, 1e-8);
}

TEST(Frechet, UnivariateClosedForm) {
    // means 0 and 3, unbiased variances 1 and 1: d = 3^2 + (1+1-2) = 9.
    const std::vector<std::vector<double>> a = {{-1.0}, {0.0}, {1.0}};
    const std::vector<std::vector<double>> b = {{2.0}, {3.0}, {4.0}};
    EXPECT_NEAR(frechet_feature_distance(a, b), 9.0, 1e-9);
}

TEST(Frechet, SymmetricWithinTolerance) {
    Rng rng(7);
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 16; ++i) {
        a.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        b.push_back({rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)});
    }
    const double dab = frechet_feature_distance(a, b);
    const double dba = frechet_feature_distance(b, a);
    EXPECT_NEAR(dab, dba, 1e-10 * std::max(1.0, dab));
}

TEST(Frechet, InvariantUnderCommonRotation) {
    Rng rng(8);
    const int dim = 4;
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 20; ++i) {
        std::vector<double> va(dim), vb(dim);
        for (int j = 0; j < dim; ++j) {
            va[static_cast<std::size_t>(j)] = rng.uniform(-1, 1);
            vb[static_cast<std::size_t>(j)] = rng.uniform(-0.5, 1.5);
        }
        a.push_back(va);
        b.push_back(vb);
    }
    const double before = frechet_feature_distance(a, b);

    // Random orthogonal map from composed Givens rotations.
    std::vector<std::vector<double>> q(dim, std::vector<double>(dim, 0.0));
    for (int i = 0; i < dim; ++i) q[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    for (int r = 0; r < 8; ++r) {
        const int i = static_cast<int>(rng.uniform_int(0, dim - 1));
        int j = static_cast<int>(rng.uniform_int(0, dim - 2));
        if (j >= i) ++j;
        const double th = rng.uniform(0.0, 2.0 * M_PI);
        const double c = std::cos(th), sn = std::sin(th);
        for (int k = 0; k < dim; ++k) {
            const double qi = q[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
            const double qj = q[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
            q[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] = c * qi - sn * qj;
            q[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] = sn * qi + c * qj;
        }
    }
    auto rotate = [&](const std::vector<std::vector<double>>& set) {
        std::vector<std::vector<double>> out;
        for (const auto& v : set) {
            std::vector<double> r(dim, 0.0);
            for (int i = 0; i < dim; ++i)
                for (int j = 0; j < dim; ++j)
                    r[static_cast<std::size_t>(i)] +=
                        q[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] *
                        v[static_cast<std::size_t>(j)];
            out.push_back(std::move(r));
        }
        return out;
    };
    const double after = frechet_feature_distance(rotate(a), rotate(b));
    EXPECT_NEAR(before, after, 1e-6 * std::max(1.0, before));
}

TEST(Frechet, EmptySetRejected) {
    EXPECT_THROW(frechet_feature_distance({}, {{1.0}}), ContractError);
}

TEST(EvaluateSet, IdentityPredictionsGiveZeroRows) {
    Rng rng(9);
    std::vector<Tensor> preds, targets;
    std::vector<Mask> masks;
    for (int i = 0; i < 4; ++i) {
        auto img = Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0);
        preds.push_back(img);
        targets.push_back(img);
        masks.push_back(right_half_unknown(16, 16));  // ratio 0.5... bucket 4
    }
    // right half of 16x16 = ratio exactly 0.5 which is out of range; shrink.
    masks.clear();
    for (int i = 0; i < 4; ++i) {
        std::vector<std::uint8_t> grid(256, 1);
        for (int y = 0; y < 16; ++y)
            for (int x = 12; x < 16; ++x) grid[static_cast<std::size_t>(y) * 16 + x] = 0;
        masks.push_back(make_mask(16, 16, std::move(grid)));  // ratio 0.25
    }
    auto report = evaluate_set(preds, targets, masks, 1, channel_mean_embedder);
    EXPECT_EQ(report.total_count(), 4);
    ASSERT_TRUE(report.buckets[2].has_value());  // ratio 0.25 -> bucket 2
    EXPECT_EQ(report.buckets[2]->count, 4);
    EXPECT_EQ(report.buckets[2]->l1, 0.0);
    EXPECT_EQ(report.buckets[2]->bpe, 0.0);
    EXPECT_NEAR(report.buckets[2]->ffd, 0.0, 1e-10);
    EXPECT_FALSE(report.buckets[0].has_value());
}

TEST(EvaluateSet, MeansMatchPerSampleOracle) {
    Rng rng(10);
    std::vector<Tensor> preds, targets;
    std::vector<Mask> masks;
    for (int i = 0; i < 6; ++i) {
        preds.push_back(Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0));
        targets.push_back(Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0));
        std::vector<std::uint8_t> grid(256, 1);
        for (int y = 4; y < 10; ++y)
            for (int x = 2; x < 9; ++x) grid[static_cast<std::size_t>(y) * 16 + x] = 0;
        masks.push_back(make_mask(16, 16, std::move(grid)));
    }
    const int bucket = masks[0].bucket;
    auto report = evaluate_set(preds, targets, masks, 2, channel_mean_embedder);
    ASSERT_TRUE(report.buckets[static_cast<std::size_t>(bucket)].has_value());

    double l1_acc = 0.0, bpe_acc = 0.0;
    for (int i = 0; i < 6; ++i) {
        l1_acc += l1_metric(preds[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)]);
        bpe_acc += bpe(preds[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)],
                       masks[static_cast<std::size_t>(i)], 2);
    }
    EXPECT_NEAR(report.buckets[static_cast<std::size_t>(bucket)]->l1, l1_acc / 6.0, 1e-12);
    EXPECT_NEAR(report.buckets[static_cast<std::size_t>(bucket)]->bpe, bpe_acc / 6.0, 1e-12);
}

TEST(EvaluateSet, ReportSerializes) {
    Rng rng(11);
    std::vector<Tensor> preds = {Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0)};
    std::vector<Tensor> targets = {Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0)};
    std::vector<std::uint8_t> grid(256, 1);
    for (int i = 0; i < 26; ++i) grid[static_cast<std::size_t>(i)] = 0;
    std::vector<Mask> masks = {make_mask(16, 16, std::move(grid))};

    auto report = evaluate_set(preds, targets, masks, 1, channel_mean_embedder);
    auto j = report.to_json();
    EXPECT_EQ(j["buckets"].size(), 1u);
    EXPECT_EQ(j["buckets"][0]["bucket"], 1);
    EXPECT_EQ(j["buckets"][0]["count"], 1);
    EXPECT_TRUE(j["buckets"][0].contains("l1"));
    EXPECT_TRUE(j["buckets"][0].contains("bpe"));
    EXPECT_TRUE(j["buckets"][0].contains("ffd"));
    EXPECT_FALSE(report.to_table().empty());
}
