#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfn/checkpoint.hpp"
#include "dfn/dataset.hpp"
#include "dfn/fusion.hpp"
#include "dfn/mask.hpp"
#include "dfn/metrics.hpp"
#include "dfn/optim.hpp"

namespace dfn {

/// Flat training-run configuration; mirrors the key=value config file.
struct RunConfig {
    std::string data = "synth:200";  // "synth:COUNT" or a directory of PNGs
    int image_size = 64;
    int batch_size = 4;
    int epochs = 6;
    std::uint64_t seed = 1;
    int mask_pool = 1000;
    int checkpoint_every = 0;  // epochs between periodic saves; 0 = final only
    int band_n = 0;            // 0 = scaled default (4 at 256^2)
    std::string checkpoint_path = "model.ckpt";
    std::string log_path;
    std::string fx_weights;  // optional feature-extractor weights file
    DFNetConfig net;
    LrSchedule schedule;

    int derived_band_n() const {
        return band_n > 0 ? band_n : std::max(1, image_size * 4 / 256);
    }

    void validate() const {
        if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
        if (epochs < 1) throw ContractError("config: epochs must be >= 1");
        if (epochs > schedule.total_epochs) {
            throw ContractError("config: epochs exceed the lr schedule span");
        }
        if (mask_pool < 1) throw ContractError("config: mask_pool must be >= 1");
        net.validate();
    }
};

inline std::vector<int> default_widths(int depth) {
    std::vector<int> w;
    for (int i = 0; i < depth; ++i) w.push_back(std::min(128, 32 << i));
    return w;
}

inline std::vector<int> first_k_layers(int k) {
    std::vector<int> v;
    for (int i = 1; i <= k; ++i) v.push_back(i);
    return v;
}

/// Applies one "key=value" setting. Unknown keys are errors so typos in
/// config files or CLI overrides surface immediately.
inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value) {
    auto as_int = [&value, &key] {
        try {
            return std::stoi(value);
        } catch (...) {
            throw ContractError("config: bad integer for '" + key + "'");
        }
    };
    auto as_double = [&value, &key] {
        try {
            return std::stod(value);
        } catch (...) {
            throw ContractError("config: bad number for '" + key + "'");
        }
    };
    if (key == "data") cfg.data = value;
    else if (key == "image_size") cfg.image_size = as_int();
    else if (key == "batch_size") cfg.batch_size = as_int();
    else if (key == "epochs") cfg.epochs = as_int();
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "mask_pool") cfg.mask_pool = as_int();
    else if (key == "checkpoint_every") cfg.checkpoint_every = as_int();
    else if (key == "band_n") cfg.band_n = as_int();
    else if (key == "checkpoint") cfg.checkpoint_path = value;
    else if (key == "log") cfg.log_path = value;
    else if (key == "fx_weights") cfg.fx_weights = value;
    else if (key == "encoder_depth") {
        cfg.net.encoder_depth = as_int();
        cfg.net.widths = default_widths(cfg.net.encoder_depth);
    } else if (key == "widths") cfg.net.widths = parse_int_list(value);
    else if (key == "fusion_blocks") cfg.net.fusion_blocks = as_int();
    else if (key == "alpha_hidden") cfg.net.alpha_hidden = as_int();
    else if (key == "leaky_slope") cfg.net.leaky_slope = as_double();
    else if (key == "p") cfg.net.p_layers = first_k_layers(as_int());
    else if (key == "q") cfg.net.q_layers = first_k_layers(as_int());
    else if (key == "lambda_l1") cfg.net.loss_weights.l1 = as_double();
    else if (key == "lambda_p") cfg.net.loss_weights.perceptual = as_double();
    else if (key == "lambda_s") cfg.net.loss_weights.style = as_double();
    else if (key == "lambda_tv") cfg.net.loss_weights.tv = as_double();
    else if (key == "hard_mask_blend") cfg.net.hard_mask_blend = as_int() != 0;
    else if (key == "lr_initial") cfg.schedule.initial_rate = as_double();
    else if (key == "lr_final") cfg.schedule.final_rate = as_double();
    else if (key == "lr_decay") cfg.schedule.decay = as_double();
    else if (key == "lr_step") cfg.schedule.step_epochs = as_int();
    else if (key == "lr_total_epochs") cfg.schedule.total_epochs = as_int();
    else throw ContractError("config: unknown key '" + key + "'");
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    RunConfig cfg;
    for (const auto& [key, value] : parse_kv_text(text)) {
        apply_config_entry(cfg, key, value);
    }
    return cfg;
}

struct TrainLogRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double lr = 0.0;
    double total = 0.0;
    double structure = 0.0;
    double perceptual = 0.0;
    double style = 0.0;
    double tv = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRecord> records;

    void write_jsonl(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot open log file '" + path + "'");
        for (const auto& r : records) {
            nlohmann::json j = {{"epoch", r.epoch},   {"step", r.step},
                                {"lr", r.lr},         {"total", r.total},
                                {"structure", r.structure},
                                {"perceptual", r.perceptual},
                                {"style", r.style},   {"tv", r.tv}};
            out << j.dump() << "\n";
        }
    }
};

struct TrainResult {
    DFNet model;
    ParamGroup adam;
    TrainLog log;
    std::vector<Tensor> images;  // the training images actually used
};

inline std::vector<Tensor> load_training_images(const RunConfig& cfg) {
    if (cfg.data.rfind("synth:", 0) == 0) {
        const int count = std::stoi(cfg.data.substr(6));
        return synth_dataset(count, cfg.image_size,
                             cfg.seed ^ 0x5AD0D474ULL);
    }
    return load_images(cfg.data, cfg.image_size);
}

inline std::vector<Mask> build_mask_pool(int count, int size,
                                         std::uint64_t seed) {
    const StrokeParams params = StrokeParams{}.scaled_to(size);
    Rng rng(seed);
    std::vector<Mask> pool;
    pool.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        pool.push_back(generate_mask(size, size, params, rng.next_u64()));
    }
    return pool;
}

/// Runs the full training loop: per step, draw an image batch and random
/// augmented masks, forward through the fusion network, apply the grouped
/// multi-scale losses over (P, Q), backpropagate and take an Adam step at
/// the scheduled rate.
inline TrainResult train(const RunConfig& cfg) {
    cfg.validate();

    auto images = load_training_images(cfg);
    auto pool = build_mask_pool(cfg.mask_pool, cfg.image_size,
                                cfg.seed ^ 0x3A5C9D11ULL);
    FeatureExtractor fx = cfg.fx_weights.empty()
                              ? FeatureExtractor()
                              : load_feature_extractor(cfg.fx_weights);

    TrainResult result{DFNet(cfg.net, cfg.seed ^ 0x9E17B3F5ULL), ParamGroup{},
                       TrainLog{}, images};
    DFNet& net = result.model;
    for (auto& [name, t] : net.named_params()) result.adam.add(name, t);

    Rng draw_rng(cfg.seed ^ 0x6B79A21DULL);
    const std::int64_t n = static_cast<std::int64_t>(images.size());
    const std::int64_t steps_per_epoch =
        (n + cfg.batch_size - 1) / cfg.batch_size;
    std::int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg.schedule, epoch);
        std::vector<std::size_t> order(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(cfg.seed ^ (0xC0FFEE11ULL + static_cast<std::uint64_t>(epoch)));
        for (std::int64_t i = n - 1; i > 0; --i) {
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
        }

        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = static_cast<std::size_t>(s) * cfg.batch_size;
            const std::size_t hi = std::min(order.size(),
                                            lo + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> batch_idx(order.begin() + lo,
                                               order.begin() + hi);
            auto gt = stack_batch(images, batch_idx);

            // One random augmented pool mask per sample.
            std::vector<double> plane_data;
            plane_data.reserve(batch_idx.size() *
                               static_cast<std::size_t>(cfg.image_size) *
                               cfg.image_size);
            for (std::size_t b = 0; b < batch_idx.size(); ++b) {
                const auto& base = pool[static_cast<std::size_t>(
                    draw_rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
                Mask m = augment_mask(base, draw_rng.next_u64());
                for (auto v : m.grid) plane_data.push_back(v);
            }
            auto plane = Tensor::from_data(
                {static_cast<std::int64_t>(batch_idx.size()), 1,
                 cfg.image_size, cfg.image_size},
                std::move(plane_data));

            auto outputs = net.forward(gt, plane, Mode::Train);
            std::vector<Tensor> fused, targets;
            for (const auto& lo_k : outputs) {
                fused.push_back(lo_k.fused);
            }
            {
                NoGradGuard no_grad;
                for (int k = 1; k <= cfg.net.fusion_blocks; ++k) {
                    targets.push_back(resize_input(gt, k));
                }
            }
            auto breakdown = total_loss(fused, targets, cfg.net.p_layers,
                                        cfg.net.q_layers, cfg.net.loss_weights,
                                        fx);
            const double total = breakdown.total.item();
            if (!std::isfinite(total)) {
                throw ContractError("train: non-finite loss at epoch " +
                                    std::to_string(epoch) + " step " +
                                    std::to_string(step));
            }
            result.adam.zero_grad();
            breakdown.total.backward();
            adam_step(result.adam, lr);

            result.log.records.push_back({epoch, step, lr, total,
                                          breakdown.structure,
                                          breakdown.perceptual, breakdown.style,
                                          breakdown.tv});
            ++step;
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            save_model_checkpoint(cfg.checkpoint_path, net, cfg.image_size,
                                  &result.adam);
        }
    }
    save_model_checkpoint(cfg.checkpoint_path, net, cfg.image_size,
                          &result.adam);
    if (!cfg.log_path.empty()) result.log.write_jsonl(cfg.log_path);
    return result;
}

/// Known-region per-channel mean poured into the hole: the no-learning
/// baseline predictor.
inline Tensor mean_fill(const Tensor& image, const Mask& mask) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[1] != mask.h || s[2] != mask.w) {
        throw ShapeError("mean_fill expects [C,H,W] matching the mask");
    }
    const std::int64_t C = s[0], plane = s[1] * s[2];
    std::vector<double> out(image.data());
    const std::int64_t known = static_cast<std::int64_t>(mask.grid.size()) -
                               mask.unknown_count();
    if (known == 0) throw ContractError("mean_fill: mask has no known pixels");
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) {
            if (mask.grid[static_cast<std::size_t>(i)]) acc += image.raw()[c * plane + i];
        }
        const double mean = acc / static_cast<double>(known);
        for (std::int64_t i = 0; i < plane; ++i) {
            if (!mask.grid[static_cast<std::size_t>(i)]) {
                out[static_cast<std::size_t>(c * plane + i)] = mean;
            }
        }
    }
    return Tensor::from_data(s, std::move(out));
}

inline Embedder make_embedder(const FeatureExtractor& fx) {
    return [fx](const Tensor& image) {
        const auto& s = image.shape();
        if (s.size() != 3) throw ShapeError("embedder expects [C,H,W]");
        auto batch = Tensor::from_data({1, s[0], s[1], s[2]}, image.data());
        return fx.embed(batch)[0];
    };
}

/// Runs eval-mode inference per (image, mask) pair and aggregates the
/// per-bucket metric report against the ground-truth images.
inline MetricsReport evaluate_model(DFNet& net,
                                    const std::vector<Tensor>& images,
                                    const std::vector<Mask>& masks, int band_n,
                                    const FeatureExtractor& fx) {
    if (images.size() != masks.size() || images.empty()) {
        throw ContractError("evaluate_model: misaligned images and masks");
    }
    std::vector<Tensor> preds;
    preds.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = images[i];
        auto batch = Tensor::from_data({1, img.extent(0), img.extent(1),
                                        img.extent(2)},
                                       img.data());
        auto out = net.infer(batch, masks[i]);
        preds.push_back(Tensor::from_data({img.extent(0), img.extent(1),
                                           img.extent(2)},
                                          out.data()));
    }
    return evaluate_set(preds, images, masks, band_n, make_embedder(fx));
}

}  // namespace dfn
