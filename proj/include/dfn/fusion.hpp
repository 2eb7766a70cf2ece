#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfn/losses.hpp"
#include "dfn/mask.hpp"
#include "dfn/nn.hpp"
#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

namespace detail {

inline bool power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

/// out[b,c,:,:] = x[b,c,:,:] * plane[b,0,:,:]; the plane is data, not a
/// differentiable input.
inline Tensor mul_by_plane(const Tensor& x, const Tensor& plane) {
    const auto& s = x.shape();
    const auto& ps = plane.shape();
    if (s.size() != 4 || ps.size() != 4 || ps[1] != 1 || s[0] != ps[0] ||
        s[2] != ps[2] || s[3] != ps[3]) {
        throw ShapeError("mul_by_plane: incompatible shapes " + shape_str(s) +
                         " vs " + shape_str(ps));
    }
    if (plane.requires_grad()) {
        throw ContractError("mul_by_plane: plane must not require grad");
    }
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    std::vector<double> out(x.data().size());
    for (std::int64_t b = 0; b < B; ++b) {
        const double* pl = plane.raw() + b * HW;
        for (std::int64_t c = 0; c < C; ++c) {
            const double* px = x.raw() + (b * C + c) * HW;
            double* po = out.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) po[i] = px[i] * pl[i];
        }
    }
    auto xn = x.node(), pn = plane.node();
    return detail::make_op({s[0], s[1], s[2], s[3]}, std::move(out),
                           detail::grad_parents({x}),
                           [xn, pn, B, C, HW](detail::TensorNode* self) {
                               for (std::int64_t b = 0; b < B; ++b) {
                                   const double* pl = pn->data.data() + b * HW;
                                   for (std::int64_t c = 0; c < C; ++c) {
                                       const double* g =
                                           self->pass_grad.data() + (b * C + c) * HW;
                                       double* d =
                                           xn->pass_grad.data() + (b * C + c) * HW;
                                       for (std::int64_t i = 0; i < HW; ++i)
                                           d[i] += g[i] * pl[i];
                                   }
                               }
                           });
}

}  // namespace detail

/// Resized network input for layer k: identity at k=1, otherwise repeated
/// 2x average pooling down to the layer's resolution.
inline Tensor resize_input(const Tensor& input, int k) {
    if (k < 1) throw ContractError("resize_input: k must be >= 1");
    const auto& s = input.shape();
    if (s.size() != 4) throw ShapeError("resize_input expects [B,C,H,W]");
    const std::int64_t div = std::int64_t{1} << (k - 1);
    if (s[2] % div != 0 || s[3] % div != 0) {
        throw ShapeError("resize_input: extents " + shape_str(s) +
                         " not divisible by 2^" + std::to_string(k - 1));
    }
    Tensor x = input;
    for (int i = 1; i < k; ++i) x = downsample_avg_2x(x);
    return x;
}

/// Convex per-element blend of completion and scaled input.
inline Tensor blend(const Tensor& alpha, const Tensor& completion,
                    const Tensor& scaled_input) {
    detail::check_same_shape(alpha, completion, "blend");
    detail::check_same_shape(alpha, scaled_input, "blend");
    auto one_minus = add_scalar(neg(alpha), 1.0);
    return add(mul(alpha, completion), mul(one_minus, scaled_input));
}

/// Mask-gated copy: known pixels from `input`, unknown from `prediction`.
/// The rigid baseline that the learned alpha blend replaces.
inline Tensor hard_composite(const Tensor& input, const Tensor& prediction,
                             const Tensor& mask_plane) {
    detail::check_same_shape(input, prediction, "hard_composite");
    auto known = detail::mul_by_plane(input, mask_plane);
    auto inverse = add_scalar(neg(mask_plane), 1.0);
    auto unknown = detail::mul_by_plane(prediction, inverse);
    return add(known, unknown);
}

inline Tensor hard_composite(const Tensor& input, const Tensor& prediction,
                             const Mask& mask) {
    return hard_composite(input, prediction, mask_to_tensor(mask));
}

struct Conv2dLayer {
    Tensor w, b;
    std::int64_t stride = 1;
    std::int64_t pad = 0;

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct BatchNormLayer {
    Tensor gamma, beta;
    BatchNormState state;

    Tensor operator()(const Tensor& x, Mode mode) {
        return batch_norm(x, gamma, beta, state, mode);
    }
};

namespace detail {

inline Conv2dLayer make_conv(std::int64_t cin, std::int64_t cout,
                             std::int64_t k, std::int64_t stride,
                             std::int64_t pad, double slope, Rng& rng) {
    const double fan_in = static_cast<double>(cin * k * k);
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    const double bound = gain * std::sqrt(3.0 / fan_in);
    const double bbound = 1.0 / std::sqrt(fan_in);
    Conv2dLayer layer;
    layer.w = Tensor::uniform({cout, cin, k, k}, rng, -bound, bound, true);
    layer.b = Tensor::uniform({cout}, rng, -bbound, bbound, true);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

inline BatchNormLayer make_bn(std::int64_t channels) {
    BatchNormLayer bn;
    bn.gamma = Tensor::full({channels}, 1.0, true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.state = BatchNormState(channels);
    return bn;
}

}  // namespace detail

/// Per-decoder-layer record: features, raw completion, alpha map, resized
/// input and blended completion, all at the layer's resolution.
struct LayerOutput {
    int k = 0;
    Tensor features;        // F_k
    Tensor raw_completion;  // C_k
    Tensor alpha;           // alpha_k
    Tensor scaled_input;    // I_k
    Tensor fused;           // I_hat_k
};

/// Learnable fusion block: a 1x1 map to image space and a 1-3-1 conv stack
/// predicting a 3-channel alpha composition map.
struct FusionBlock {
    Conv2dLayer map_conv;          // features -> 3 channels
    Conv2dLayer a1, a2, a3;        // kernel sizes 1, 3, 1
    BatchNormLayer bn1, bn2;

    FusionBlock() = default;

    FusionBlock(std::int64_t feature_channels, std::int64_t hidden,
                double slope, Rng& rng)
        : map_conv(detail::make_conv(feature_channels, 3, 1, 1, 0, slope, rng)),
          a1(detail::make_conv(feature_channels + 3, hidden, 1, 1, 0, slope, rng)),
          a2(detail::make_conv(hidden, hidden, 3, 1, 1, slope, rng)),
          a3(detail::make_conv(hidden, 3, 1, 1, 0, slope, rng)),
          bn1(detail::make_bn(hidden)),
          bn2(detail::make_bn(hidden)),
          slope_(slope) {
        // Gate-style init: bias the alpha map toward the completion so the
        // block starts near pass-through and learns where to lean on the
        // scaled input instead of having to escape a half-dark blend.
        std::fill(a3.b.data().begin(), a3.b.data().end(), 4.0);
    }

    /// Raw completion C_k = sigmoid(1x1 conv of the feature maps).
    Tensor map_fn(const Tensor& features) const {
        return sigmoid(map_conv(features));
    }

    /// Alpha map from features and the scaled input, channel-wise in (0,1).
    Tensor alpha_fn(const Tensor& features, const Tensor& scaled_input,
                    Mode mode) {
        if (features.shape()[2] != scaled_input.shape()[2] ||
            features.shape()[3] != scaled_input.shape()[3]) {
            throw ShapeError("alpha_fn: resolution mismatch between features " +
                             shape_str(features.shape()) + " and input " +
                             shape_str(scaled_input.shape()));
        }
        auto x = concat_channels(features, scaled_input);
        x = leaky_relu(bn1(a1(x), mode), slope_);
        x = leaky_relu(bn2(a2(x), mode), slope_);
        return sigmoid(a3(x));
    }

    double slope_ = 0.2;
};

struct DFNetConfig {
    int encoder_depth = 6;
    std::vector<int> widths = {32, 64, 128, 128, 128, 128};
    int fusion_blocks = 3;  // m
    int alpha_hidden = 8;
    double leaky_slope = 0.2;
    std::vector<int> p_layers = {1, 2, 3};  // structure-loss set P
    std::vector<int> q_layers = {1, 2, 3};  // texture-loss set Q
    LossWeights loss_weights;
    bool hard_mask_blend = false;  // ablation: resized mask replaces alpha

    void validate() const {
        if (encoder_depth < 1 ||
            widths.size() != static_cast<std::size_t>(encoder_depth)) {
            throw ContractError("DFNetConfig: widths must list one channel "
                                "count per encoder level");
        }
        for (int w : widths) {
            if (w < 1) throw ContractError("DFNetConfig: widths must be >= 1");
        }
        if (fusion_blocks < 1 || fusion_blocks > 6 ||
            fusion_blocks > encoder_depth) {
            throw ContractError("DFNetConfig: fusion block count must be in "
                                "[1, min(6, encoder_depth)]");
        }
        for (int k : p_layers) {
            if (k < 1 || k > fusion_blocks) {
                throw ContractError("DFNetConfig: P must be a subset of {1..m}");
            }
        }
        for (int k : q_layers) {
            if (k < 1 || k > fusion_blocks) {
                throw ContractError("DFNetConfig: Q must be a subset of {1..m}");
            }
        }
        if (alpha_hidden < 1) throw ContractError("DFNetConfig: alpha_hidden >= 1");
        loss_weights.validate();
    }
};

/// U-Net with fusion blocks on the last `m` decoder layers. The encoder
/// sees the masked image concatenated with the mask plane; stride-2 4x4
/// convolutions downsample, nearest-neighbor upsampling plus 3x3
/// convolutions mirror them with skip concatenations.
class DFNet {
public:
    DFNet(DFNetConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
        cfg_.validate();
        Rng rng(seed);
        const double slope = cfg_.leaky_slope;
        std::int64_t cin = 4;  // masked image + mask plane
        for (int i = 0; i < cfg_.encoder_depth; ++i) {
            const std::int64_t cout = cfg_.widths[static_cast<std::size_t>(i)];
            enc_.push_back({detail::make_conv(cin, cout, 4, 2, 1, slope, rng),
                            i > 0 ? std::optional<BatchNormLayer>(
                                        detail::make_bn(cout))
                                  : std::nullopt});
            cin = cout;
        }
        // Decoder level k produces features at H / 2^(k-1); skip input at
        // level k joins the encoder feature of the same resolution (the raw
        // network input for k=1).
        for (int k = cfg_.encoder_depth; k >= 1; --k) {
            // Feature arriving from the level above: the deepest encoder
            // output for k = D, otherwise the (mirrored) decoder output of
            // level k+1 — both have widths[k-1] channels.
            const std::int64_t above = cfg_.widths[static_cast<std::size_t>(k - 1)];
            const std::int64_t skip =
                k == 1 ? 4 : cfg_.widths[static_cast<std::size_t>(k - 2)];
            const std::int64_t cout =
                k == 1 ? cfg_.widths[0] : cfg_.widths[static_cast<std::size_t>(k - 2)];
            dec_.push_back({detail::make_conv(above + skip, cout, 3, 1, 1,
                                              slope, rng),
                            detail::make_bn(cout)});
        }
        for (int k = 1; k <= cfg_.fusion_blocks; ++k) {
            const std::int64_t fc = decoder_out_channels(k);
            fusion_.emplace_back(fc, cfg_.alpha_hidden, slope, rng);
        }
    }

    const DFNetConfig& config() const { return cfg_; }

    /// Full forward pass returning layer outputs for k = 1..m (index 0 is
    /// the full-resolution layer).
    std::vector<LayerOutput> forward(const Tensor& image,
                                     const Tensor& mask_plane, Mode mode) {
        return run(image, mask_plane, mode, cfg_.fusion_blocks);
    }

    std::vector<LayerOutput> forward(const Tensor& image, const Mask& mask,
                                     Mode mode) {
        return forward(image, broadcast_mask(mask, image.extent(0)), mode);
    }

    /// Evaluation path: only the full-resolution completion is produced.
    Tensor infer(const Tensor& image, const Tensor& mask_plane) {
        NoGradGuard no_grad;
        return run(image, mask_plane, Mode::Eval, 1).front().fused;
    }

    Tensor infer(const Tensor& image, const Mask& mask) {
        return infer(image, broadcast_mask(mask, image.extent(0)));
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        auto add_conv = [&out](const std::string& prefix, Conv2dLayer& c) {
            out.emplace_back(prefix + ".w", c.w);
            out.emplace_back(prefix + ".b", c.b);
        };
        auto add_bn = [&out](const std::string& prefix, BatchNormLayer& bn) {
            out.emplace_back(prefix + ".gamma", bn.gamma);
            out.emplace_back(prefix + ".beta", bn.beta);
        };
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            const std::string p = "enc" + std::to_string(i + 1);
            add_conv(p + ".conv", enc_[i].conv);
            if (enc_[i].bn) add_bn(p + ".bn", *enc_[i].bn);
        }
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            const std::string p =
                "dec" + std::to_string(cfg_.encoder_depth - i);
            add_conv(p + ".conv", dec_[i].conv);
            add_bn(p + ".bn", dec_[i].bn);
        }
        for (std::size_t i = 0; i < fusion_.size(); ++i) {
            const std::string p = "fuse" + std::to_string(i + 1);
            add_conv(p + ".map", fusion_[i].map_conv);
            add_conv(p + ".a1", fusion_[i].a1);
            add_conv(p + ".a2", fusion_[i].a2);
            add_conv(p + ".a3", fusion_[i].a3);
            add_bn(p + ".bn1", fusion_[i].bn1);
            add_bn(p + ".bn2", fusion_[i].bn2);
        }
        return out;
    }

    std::vector<std::pair<std::string, std::vector<double>*>> named_buffers() {
        std::vector<std::pair<std::string, std::vector<double>*>> out;
        auto add_state = [&out](const std::string& prefix, BatchNormState& s) {
            out.emplace_back(prefix + ".running_mean", &s.running_mean);
            out.emplace_back(prefix + ".running_var", &s.running_var);
        };
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            if (enc_[i].bn) {
                add_state("enc" + std::to_string(i + 1) + ".bn",
                          enc_[i].bn->state);
            }
        }
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            add_state("dec" + std::to_string(cfg_.encoder_depth - i) + ".bn",
                      dec_[i].bn.state);
        }
        for (std::size_t i = 0; i < fusion_.size(); ++i) {
            const std::string p = "fuse" + std::to_string(i + 1);
            add_state(p + ".bn1", fusion_[i].bn1.state);
            add_state(p + ".bn2", fusion_[i].bn2.state);
        }
        return out;
    }

    FusionBlock& fusion_block(int k) {
        return fusion_.at(static_cast<std::size_t>(k - 1));
    }

    static Tensor broadcast_mask(const Mask& mask, std::int64_t batch) {
        auto plane = mask_to_tensor(mask);
        if (batch == 1) return plane;
        std::vector<double> d;
        d.reserve(static_cast<std::size_t>(batch) * plane.data().size());
        for (std::int64_t b = 0; b < batch; ++b) {
            d.insert(d.end(), plane.data().begin(), plane.data().end());
        }
        return Tensor::from_data({batch, 1, mask.h, mask.w}, std::move(d));
    }

private:
    struct EncLevel {
        Conv2dLayer conv;
        std::optional<BatchNormLayer> bn;
    };
    struct DecLevel {
        Conv2dLayer conv;
        BatchNormLayer bn;
    };

    std::int64_t decoder_out_channels(int k) const {
        return k == 1 ? cfg_.widths[0]
                      : cfg_.widths[static_cast<std::size_t>(k - 2)];
    }

    void check_input(const Shape& s, const Shape& ms) const {
        if (s.size() != 4 || s[1] != 3) {
            throw ShapeError("DFNet expects image [B,3,H,W], got " + shape_str(s));
        }
        if (ms.size() != 4 || ms[1] != 1 || ms[0] != s[0] || ms[2] != s[2] ||
            ms[3] != s[3]) {
            throw ShapeError("DFNet: mask plane " + shape_str(ms) +
                             " does not match image " + shape_str(s));
        }
        const std::int64_t min_extent = std::int64_t{1} << cfg_.encoder_depth;
        if (!detail::power_of_two(s[2]) || !detail::power_of_two(s[3]) ||
            s[2] < min_extent || s[3] < min_extent) {
            throw ShapeError("DFNet: extents must be powers of two >= " +
                             std::to_string(min_extent) + ", got " +
                             shape_str(s));
        }
    }

    std::vector<LayerOutput> run(const Tensor& image, const Tensor& mask_plane,
                                 Mode mode, int blocks) {
        check_input(image.shape(), mask_plane.shape());
        const double slope = cfg_.leaky_slope;

        // Unknown pixels are zeroed; the mask plane rides along as a fourth
        // channel so the hole is visible to the encoder.
        auto masked = detail::mul_by_plane(image, mask_plane);
        auto x0 = concat_channels(masked, mask_plane);

        std::vector<Tensor> skips{x0};
        Tensor x = x0;
        for (auto& level : enc_) {
            x = level.conv(x);
            if (level.bn) x = (*level.bn)(x, mode);
            x = leaky_relu(x, slope);
            skips.push_back(x);
        }

        std::vector<LayerOutput> outputs(static_cast<std::size_t>(blocks));
        for (int k = cfg_.encoder_depth; k >= 1; --k) {
            auto& level = dec_[static_cast<std::size_t>(cfg_.encoder_depth - k)];
            x = upsample_nearest_2x(x);
            x = concat_channels(x, skips[static_cast<std::size_t>(k - 1)]);
            x = level.conv(x);
            x = level.bn(x, mode);
            x = leaky_relu(x, slope);
            if (k <= blocks) {
                auto& block = fusion_[static_cast<std::size_t>(k - 1)];
                LayerOutput lo;
                lo.k = k;
                lo.features = x;
                lo.scaled_input = resize_input(masked, k);
                lo.raw_completion = block.map_fn(x);
                if (cfg_.hard_mask_blend) {
                    // Ablation: the resized mask stands in for the alpha map.
                    auto mk = resize_input(mask_plane, k).detach();
                    std::vector<double> a(mk.data().size() * 3);
                    const std::int64_t hw = mk.extent(2) * mk.extent(3);
                    const std::int64_t B = mk.extent(0);
                    for (std::int64_t b = 0; b < B; ++b) {
                        for (int c = 0; c < 3; ++c) {
                            for (std::int64_t i = 0; i < hw; ++i) {
                                a[static_cast<std::size_t>((b * 3 + c) * hw + i)] =
                                    1.0 - mk.raw()[b * hw + i];
                            }
                        }
                    }
                    lo.alpha = Tensor::from_data(
                        {B, 3, mk.extent(2), mk.extent(3)}, std::move(a));
                } else {
                    lo.alpha = block.alpha_fn(x, lo.scaled_input, mode);
                }
                lo.fused = blend(lo.alpha, lo.raw_completion, lo.scaled_input);
                outputs[static_cast<std::size_t>(k - 1)] = std::move(lo);
            }
        }
        return outputs;
    }

    DFNetConfig cfg_;
    std::vector<EncLevel> enc_;
    std::vector<DecLevel> dec_;
    std::vector<FusionBlock> fusion_;
};

}  // namespace dfn
