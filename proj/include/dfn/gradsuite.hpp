#pragma once

#include <string>
#include <vector>

#include "dfn/fusion.hpp"
#include "dfn/gradcheck.hpp"
#include "dfn/losses.hpp"
#include "dfn/train.hpp"

namespace dfn {

// Finite-difference conformance suite covering every differentiable
// operation plus a tiny end-to-end network. Tolerances: 1e-5 for plain ops,
// 1e-4 once batch normalization participates.

inline std::vector<GradCheckResult> run_gradcheck_suite(
    std::uint64_t seed, const std::string& corrupt_op = "") {
    std::vector<GradCheckResult> results;
    Rng rng(seed);

    auto check = [&](const std::string& name, double tolerance,
                     const std::function<Tensor()>& loss_fn,
                     const std::vector<Tensor>& inputs) {
        const double tamper = name == corrupt_op ? 0.25 : 0.0;
        const double err = gradcheck_max_rel_error(loss_fn, inputs, 1e-5, tamper);
        results.push_back({name, err, tolerance, err <= tolerance});
    };

    // Inputs bounded away from activation kinks where it matters.
    auto signed_uniform = [&rng](const Shape& shape, double lo, double hi) {
        std::vector<double> vals(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& v : vals) {
            const double mag = rng.uniform(lo, hi);
            v = rng.next_double() < 0.5 ? -mag : mag;
        }
        return Tensor::from_data(shape, std::move(vals), true);
    };

    {
        auto x = Tensor::uniform({1, 2, 6, 6}, rng, -1.0, 1.0, true);
        auto w = Tensor::uniform({3, 2, 3, 3}, rng, -0.5, 0.5, true);
        auto b = Tensor::uniform({3}, rng, -0.2, 0.2, true);
        auto probe = Tensor::uniform({1, 3, 6, 6}, rng, -1.0, 1.0);
        check("conv2d", 1e-5,
              [&] { return sum(mul(conv2d(x, w, b, 1, 1), probe)); }, {x, w, b});
    }
    {
        auto x = signed_uniform({20}, 0.2, 1.5);
        auto probe = Tensor::uniform({20}, rng, -1.0, 1.0);
        check("leaky_relu", 1e-5,
              [&] { return sum(mul(leaky_relu(x, 0.2), probe)); }, {x});
        check("sigmoid", 1e-5, [&] { return sum(mul(sigmoid(x), probe)); }, {x});
        check("abs", 1e-5, [&] { return sum(abs(x)); }, {x});
    }
    {
        auto a = Tensor::uniform({12}, rng, -1.0, 1.0, true);
        auto b = Tensor::uniform({12}, rng, -1.0, 1.0, true);
        auto probe = Tensor::uniform({12}, rng, -1.0, 1.0);
        check("add", 1e-5, [&] { return sum(mul(add(a, b), probe)); }, {a, b});
        check("sub", 1e-5, [&] { return sum(mul(sub(a, b), probe)); }, {a, b});
        check("mul", 1e-5, [&] { return sum(mul(mul(a, b), probe)); }, {a, b});
        check("scalar_ops", 1e-5,
              [&] { return sum(mul(add_scalar(mul_scalar(a, 1.7), 0.3), probe)); },
              {a});
        check("sum", 1e-5, [&] { return mul_scalar(sum(a), 2.5); }, {a});
    }
    {
        auto x = Tensor::uniform({2, 3, 4, 4}, rng, -1.0, 1.0, true);
        auto up_probe = Tensor::uniform({2, 3, 8, 8}, rng, -1.0, 1.0);
        auto down_probe = Tensor::uniform({2, 3, 2, 2}, rng, -1.0, 1.0);
        check("upsample_nearest_2x", 1e-5,
              [&] { return sum(mul(upsample_nearest_2x(x), up_probe)); }, {x});
        check("downsample_avg_2x", 1e-5,
              [&] { return sum(mul(downsample_avg_2x(x), down_probe)); }, {x});
        auto y = Tensor::uniform({2, 2, 4, 4}, rng, -1.0, 1.0, true);
        auto cat_probe = Tensor::uniform({2, 5, 4, 4}, rng, -1.0, 1.0);
        check("concat_channels", 1e-5,
              [&] { return sum(mul(concat_channels(x, y), cat_probe)); }, {x, y});
    }
    {
        auto x = Tensor::uniform({4, 2, 3, 3}, rng, -1.0, 1.0, true);
        auto gamma = Tensor::uniform({2}, rng, 0.5, 1.5, true);
        auto beta = Tensor::uniform({2}, rng, -0.5, 0.5, true);
        auto probe = Tensor::uniform({4, 2, 3, 3}, rng, -1.0, 1.0);
        check("batch_norm", 1e-4,
              [&] {
                  BatchNormState state(2);
                  return sum(mul(batch_norm(x, gamma, beta, state, Mode::Train),
                                 probe));
              },
              {x, gamma, beta});
    }
    {
        auto f = Tensor::uniform({1, 3, 4, 4}, rng, -1.0, 1.0, true);
        auto probe = Tensor::uniform({1, 3, 3}, rng, -1.0, 1.0);
        check("gram", 1e-5, [&] { return sum(mul(gram(f), probe)); }, {f});
    }

    FeatureExtractorConfig fx_cfg;
    fx_cfg.widths = {4, 6};
    fx_cfg.taps = {1, 2};
    fx_cfg.seed = seed ^ 0xF00DULL;
    FeatureExtractor fx(fx_cfg);
    {
        auto pred = Tensor::uniform({1, 3, 8, 8}, rng, 0.2, 0.8, true);
        auto target = Tensor::uniform({1, 3, 8, 8}, rng, 0.2, 0.8);
        check("recon_loss", 1e-5, [&] { return recon_loss(pred, target); },
              {pred});
        check("perceptual_loss", 1e-4,
              [&] { return perceptual_loss(pred, target, fx); }, {pred});
        check("style_loss", 1e-4, [&] { return style_loss(pred, target, fx); },
              {pred});
        check("tv_loss", 1e-5, [&] { return tv_loss(pred); }, {pred});
        check("total_loss", 1e-4,
              [&] {
                  return total_loss({pred}, {target}, {1}, {1}, LossWeights{},
                                    fx)
                      .total;
              },
              {pred});
    }
    {
        Rng block_rng(seed ^ 0xB10CULL);
        FusionBlock block(5, 4, 0.2, block_rng);
        auto f = Tensor::uniform({2, 5, 4, 4}, rng, -1.0, 1.0, true);
        auto img = Tensor::uniform({2, 3, 4, 4}, rng, 0.1, 0.9, true);
        auto probe = Tensor::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
        check("map_fn", 1e-5,
              [&] { return sum(mul(block.map_fn(f), probe)); },
              {f, block.map_conv.w, block.map_conv.b});
        check("alpha_fn", 1e-4,
              [&] { return sum(mul(block.alpha_fn(f, img, Mode::Train), probe)); },
              {f, img, block.a1.w, block.a2.w, block.a3.w, block.a3.b,
               block.bn1.gamma, block.bn1.beta, block.bn2.gamma, block.bn2.beta});
        auto alpha = Tensor::uniform({1, 3, 4, 4}, rng, 0.1, 0.9, true);
        auto comp = Tensor::uniform({1, 3, 4, 4}, rng, 0.0, 1.0, true);
        auto scaled = Tensor::uniform({1, 3, 4, 4}, rng, 0.0, 1.0, true);
        auto bprobe = Tensor::uniform({1, 3, 4, 4}, rng, -1.0, 1.0);
        check("blend", 1e-5,
              [&] { return sum(mul(blend(alpha, comp, scaled), bprobe)); },
              {alpha, comp, scaled});
    }
    {
        // Tiny end-to-end model: 8x8 input, two fusion blocks, total loss
        // through every parameter.
        DFNetConfig cfg;
        cfg.encoder_depth = 3;
        cfg.widths = {6, 6, 6};
        cfg.fusion_blocks = 2;
        cfg.alpha_hidden = 4;
        cfg.p_layers = {1, 2};
        cfg.q_layers = {1};
        DFNet net(cfg, seed ^ 0xD7E2ULL);

        auto gt = Tensor::uniform({2, 3, 8, 8}, rng, 0.1, 0.9);
        std::vector<std::uint8_t> grid(64, 1);
        for (int y = 2; y < 5; ++y)
            for (int x = 3; x < 7; ++x) grid[static_cast<std::size_t>(y) * 8 + x] = 0;
        const Mask mask = make_mask(8, 8, std::move(grid));

        std::vector<Tensor> params;
        for (auto& [name, t] : net.named_params()) params.push_back(t);
        auto loss_fn = [&] {
            auto outputs = net.forward(gt, mask, Mode::Train);
            std::vector<Tensor> fused, targets;
            for (const auto& lo : outputs) fused.push_back(lo.fused);
            {
                NoGradGuard no_grad;
                for (int k = 1; k <= cfg.fusion_blocks; ++k) {
                    targets.push_back(resize_input(gt, k));
                }
            }
            return total_loss(fused, targets, cfg.p_layers, cfg.q_layers,
                              LossWeights{}, fx)
                .total;
        };
        check("dfnet_end_to_end", 1e-4, loss_fn, params);
    }
    return results;
}

}  // namespace dfn
