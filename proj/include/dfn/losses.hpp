#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfn/nn.hpp"
#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

struct LossWeights {
    double l1 = 6.0;
    double perceptual = 0.1;
    double style = 240.0;
    double tv = 0.1;

    void validate() const {
        const double vals[] = {l1, perceptual, style, tv};
        for (double v : vals) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw ContractError("LossWeights must be finite and >= 0");
            }
        }
    }
};

struct FeatureExtractorConfig {
    std::vector<int> widths = {8, 16, 32, 32};
    double leaky_slope = 0.2;
    std::vector<int> taps = {1, 2, 3, 4};  // 1-based stage indices
    // Fixed default seed: embeddings must be comparable across training runs.
    std::uint64_t seed = 0x7A11E5u;
};

/// Frozen conv stack standing in for a pre-trained feature network. Each
/// stage is conv3x3 -> leaky ReLU -> 2x average pool; taps are the pooled
/// stage outputs. Weights never receive gradients.
class FeatureExtractor {
public:
    explicit FeatureExtractor(FeatureExtractorConfig cfg = {})
        : cfg_(std::move(cfg)) {
        if (cfg_.widths.empty()) {
            throw ContractError("FeatureExtractor: needs at least one stage");
        }
        for (int t : cfg_.taps) {
            if (t < 1 || t > static_cast<int>(cfg_.widths.size())) {
                throw ContractError("FeatureExtractor: tap index out of range");
            }
        }
        Rng rng(cfg_.seed);
        int cin = 3;
        for (int cout : cfg_.widths) {
            const double bound = std::sqrt(3.0 / (cin * 9.0)) *
                                 std::sqrt(2.0 / (1.0 + cfg_.leaky_slope *
                                                            cfg_.leaky_slope));
            weights_.push_back(
                Tensor::uniform({cout, cin, 3, 3}, rng, -bound, bound));
            biases_.push_back(Tensor::uniform(
                {cout}, rng, -1.0 / std::sqrt(cin * 9.0), 1.0 / std::sqrt(cin * 9.0)));
            cin = cout;
        }
    }

    int stages() const { return static_cast<int>(cfg_.widths.size()); }
    int min_input_extent() const { return 1 << stages(); }
    const FeatureExtractorConfig& config() const { return cfg_; }

    /// Tap features for [B,3,h,w] input; differentiable w.r.t. the input.
    std::vector<Tensor> features(const Tensor& image) const {
        const auto& s = image.shape();
        if (s.size() != 4 || s[1] != 3) {
            throw ShapeError("FeatureExtractor expects [B,3,H,W], got " +
                             shape_str(s));
        }
        if (s[2] < min_input_extent() || s[3] < min_input_extent()) {
            throw ShapeError("FeatureExtractor: input " + shape_str(s) +
                             " smaller than receptive requirement " +
                             std::to_string(min_input_extent()));
        }
        std::vector<Tensor> taps;
        Tensor x = image;
        for (int j = 0; j < stages(); ++j) {
            x = conv2d(x, weights_[static_cast<std::size_t>(j)],
                       biases_[static_cast<std::size_t>(j)], 1, 1);
            x = leaky_relu(x, cfg_.leaky_slope);
            x = downsample_avg_2x(x);
            for (int t : cfg_.taps) {
                if (t == j + 1) taps.push_back(x);
            }
        }
        return taps;
    }

    /// Mean-pooled last-tap embedding of a single [B,3,h,w] image batch,
    /// ordered by batch element; used as the Frechet-distance embedder.
    std::vector<std::vector<double>> embed(const Tensor& image) const {
        NoGradGuard no_grad;
        auto taps = features(image);
        const Tensor& last = taps.back();
        const auto& s = last.shape();
        const std::int64_t B = s[0], C = s[1], plane = s[2] * s[3];
        std::vector<std::vector<double>> out;
        out.reserve(static_cast<std::size_t>(B));
        for (std::int64_t b = 0; b < B; ++b) {
            std::vector<double> v(static_cast<std::size_t>(C), 0.0);
            for (std::int64_t c = 0; c < C; ++c) {
                const double* p = last.raw() + (b * C + c) * plane;
                double acc = 0.0;
                for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
                v[static_cast<std::size_t>(c)] = acc / static_cast<double>(plane);
            }
            out.push_back(std::move(v));
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_tensors() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (int j = 0; j < stages(); ++j) {
            out.emplace_back("stage" + std::to_string(j + 1) + ".w",
                             weights_[static_cast<std::size_t>(j)]);
            out.emplace_back("stage" + std::to_string(j + 1) + ".b",
                             biases_[static_cast<std::size_t>(j)]);
        }
        return out;
    }

private:
    FeatureExtractorConfig cfg_;
    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;
};

/// Mean absolute error, normalized by elements per sample (and batch).
inline Tensor recon_loss(const Tensor& pred, const Tensor& target) {
    detail::check_same_shape(pred, target, "recon_loss");
    return mul_scalar(sum(abs(sub(target, pred))),
                      1.0 / static_cast<double>(pred.numel()));
}

/// Channel co-occurrence matrix of [C,H,W] or [B,C,H,W] features:
/// G[c,c'] = sum_hw f[c,hw] f[c',hw] / (C*H*W).
inline Tensor gram(const Tensor& features) {
    Shape s = features.shape();
    const bool batched = s.size() == 4;
    if (!batched && s.size() != 3) {
        throw ShapeError("gram expects [C,H,W] or [B,C,H,W], got " +
                         shape_str(s));
    }
    const std::int64_t B = batched ? s[0] : 1;
    const std::int64_t C = batched ? s[1] : s[0];
    const std::int64_t plane = batched ? s[2] * s[3] : s[1] * s[2];
    const double norm = 1.0 / static_cast<double>(C * plane);

    std::vector<double> out(static_cast<std::size_t>(B * C * C), 0.0);
    for (std::int64_t b = 0; b < B; ++b) {
        const double* f = features.raw() + b * C * plane;
        double* g = out.data() + b * C * C;
        detail::gemm_abT_acc(C, plane, C, f, f, g);
        for (std::int64_t i = 0; i < C * C; ++i) g[i] *= norm;
    }

    Shape oshape = batched ? Shape{B, C, C} : Shape{C, C};
    auto fn = features.node();
    return detail::make_op(
        std::move(oshape), std::move(out), detail::grad_parents({features}),
        [fn, B, C, plane, norm](detail::TensorNode* self) {
            for (std::int64_t b = 0; b < B; ++b) {
                const double* g = self->pass_grad.data() + b * C * C;
                const double* f = fn->data.data() + b * C * plane;
                double* df = fn->pass_grad.data() + b * C * plane;
                for (std::int64_t c = 0; c < C; ++c) {
                    for (std::int64_t c2 = 0; c2 < C; ++c2) {
                        const double coef = norm * (g[c * C + c2] + g[c2 * C + c]);
                        if (coef == 0.0) continue;
                        const double* src = f + c2 * plane;
                        double* dst = df + c * plane;
                        for (std::int64_t i = 0; i < plane; ++i)
                            dst[i] += coef * src[i];
                    }
                }
            }
        });
}

/// Sum over tap layers of unnormalized L1 feature differences, averaged
/// over the batch. Gradient flows into `pred` only.
inline Tensor perceptual_loss(const Tensor& pred, const Tensor& target,
                              const FeatureExtractor& fx) {
    detail::check_same_shape(pred, target, "perceptual_loss");
    std::vector<Tensor> target_taps;
    {
        NoGradGuard no_grad;
        target_taps = fx.features(target);
    }
    auto pred_taps = fx.features(pred);
    Tensor total;
    for (std::size_t j = 0; j < pred_taps.size(); ++j) {
        auto term = sum(abs(sub(target_taps[j], pred_taps[j])));
        total = total.defined() ? add(total, term) : term;
    }
    return mul_scalar(total, 1.0 / static_cast<double>(pred.extent(0)));
}

/// L1 error between per-layer Gram matrices, averaged over the batch.
inline Tensor style_loss(const Tensor& pred, const Tensor& target,
                         const FeatureExtractor& fx) {
    detail::check_same_shape(pred, target, "style_loss");
    std::vector<Tensor> target_grams;
    {
        NoGradGuard no_grad;
        for (const auto& tap : fx.features(target)) {
            target_grams.push_back(gram(tap));
        }
    }
    auto pred_taps = fx.features(pred);
    Tensor total;
    for (std::size_t j = 0; j < pred_taps.size(); ++j) {
        auto term = sum(abs(sub(target_grams[j], gram(pred_taps[j]))));
        total = total.defined() ? add(total, term) : term;
    }
    return mul_scalar(total, 1.0 / static_cast<double>(pred.extent(0)));
}

/// Total variation against the top and left neighbors, normalized by the
/// element count. A 1x1 image has no neighbor pairs and scores zero.
inline Tensor tv_loss(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("tv_loss expects [B,C,H,W]");
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    const std::int64_t plane = H * W;
    const double norm = 1.0 / static_cast<double>(C * plane * B);
    double acc = 0.0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* p = x.raw() + bc * plane;
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t xw = 0; xw < W; ++xw) {
                const double v = p[y * W + xw];
                if (y > 0) acc += std::fabs(v - p[(y - 1) * W + xw]);
                if (xw > 0) acc += std::fabs(v - p[y * W + xw - 1]);
            }
        }
    }
    auto xn = x.node();
    return detail::make_op(
        {1}, {acc * norm}, detail::grad_parents({x}),
        [xn, B, C, H, W, plane, norm](detail::TensorNode* self) {
            const double g = self->pass_grad[0] * norm;
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const double* p = xn->data.data() + bc * plane;
                double* d = xn->pass_grad.data() + bc * plane;
                for (std::int64_t y = 0; y < H; ++y) {
                    for (std::int64_t xw = 0; xw < W; ++xw) {
                        const double v = p[y * W + xw];
                        if (y > 0) {
                            const double diff = v - p[(y - 1) * W + xw];
                            const double sg =
                                diff > 0.0 ? g : (diff < 0.0 ? -g : 0.0);
                            d[y * W + xw] += sg;
                            d[(y - 1) * W + xw] -= sg;
                        }
                        if (xw > 0) {
                            const double diff = v - p[y * W + xw - 1];
                            const double sg =
                                diff > 0.0 ? g : (diff < 0.0 ? -g : 0.0);
                            d[y * W + xw] += sg;
                            d[y * W + xw - 1] -= sg;
                        }
                    }
                }
            }
        });
}

struct LossBreakdown {
    Tensor total;
    double structure = 0.0;  // weighted reconstruction term
    double perceptual = 0.0;
    double style = 0.0;
    double tv = 0.0;
};

/// Structure loss over layer set P plus texture loss over layer set Q,
/// each set-averaged; an empty set's term is omitted. Layer k=1 is the
/// full-resolution output (index 0 of the vectors).
inline LossBreakdown total_loss(const std::vector<Tensor>& outputs,
                                const std::vector<Tensor>& targets,
                                const std::vector<int>& p_layers,
                                const std::vector<int>& q_layers,
                                const LossWeights& w,
                                const FeatureExtractor& fx) {
    w.validate();
    if (outputs.size() != targets.size()) {
        throw ContractError("total_loss: outputs/targets size mismatch");
    }
    auto at = [&](const std::vector<Tensor>& v, int k) -> const Tensor& {
        if (k < 1 || k > static_cast<int>(v.size())) {
            throw ContractError("total_loss: layer index " + std::to_string(k) +
                                " outside available outputs");
        }
        return v[static_cast<std::size_t>(k - 1)];
    };

    LossBreakdown out;
    Tensor total;
    if (!p_layers.empty()) {
        Tensor structure;
        for (int k : p_layers) {
            auto term = mul_scalar(recon_loss(at(outputs, k), at(targets, k)), w.l1);
            structure = structure.defined() ? add(structure, term) : term;
        }
        structure = mul_scalar(structure, 1.0 / static_cast<double>(p_layers.size()));
        out.structure = structure.item();
        total = structure;
    }
    if (!q_layers.empty()) {
        Tensor perc, styl, tv;
        for (int k : q_layers) {
            const Tensor& o = at(outputs, k);
            const Tensor& t = at(targets, k);
            auto pterm = mul_scalar(perceptual_loss(o, t, fx), w.perceptual);
            auto sterm = mul_scalar(style_loss(o, t, fx), w.style);
            auto tvterm = mul_scalar(tv_loss(o), w.tv);
            perc = perc.defined() ? add(perc, pterm) : pterm;
            styl = styl.defined() ? add(styl, sterm) : sterm;
            tv = tv.defined() ? add(tv, tvterm) : tvterm;
        }
        const double qn = 1.0 / static_cast<double>(q_layers.size());
        perc = mul_scalar(perc, qn);
        styl = mul_scalar(styl, qn);
        tv = mul_scalar(tv, qn);
        out.perceptual = perc.item();
        out.style = styl.item();
        out.tv = tv.item();
        auto texture = add(add(perc, styl), tv);
        total = total.defined() ? add(total, texture) : texture;
    }
    if (!total.defined()) total = Tensor::zeros({1});
    out.total = total;
    return out;
}

}  // namespace dfn
