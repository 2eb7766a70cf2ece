// Command-line surface: train / infer / eval / genmasks / gradcheck.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dfn/checkpoint.hpp"
#include "dfn/dataset.hpp"
#include "dfn/gradsuite.hpp"
#include "dfn/image_io.hpp"
#include "dfn/train.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& extras) {
    dfn::RunConfig cfg = dfn::load_run_config(config_path);
    for (std::size_t i = 0; i < extras.size(); ++i) {
        std::string key = extras[i];
        if (key.rfind("--", 0) != 0 || i + 1 >= extras.size()) {
            throw dfn::ContractError("train overrides must be --key value pairs");
        }
        dfn::apply_config_entry(cfg, key.substr(2), extras[++i]);
    }
    auto result = dfn::train(cfg);
    const auto& first = result.log.records.front();
    const auto& last = result.log.records.back();
    std::printf("trained %lld steps over %d epochs\n",
                static_cast<long long>(result.log.records.size()), cfg.epochs);
    std::printf("loss %.6f -> %.6f\n", first.total, last.total);
    std::printf("checkpoint written to %s\n", cfg.checkpoint_path.c_str());
    if (!cfg.log_path.empty()) {
        std::printf("train log written to %s\n", cfg.log_path.c_str());
    }
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image_path,
              const std::string& mask_path, const std::string& out_dir) {
    auto loaded = dfn::load_model_checkpoint(ckpt);
    const int size = loaded.image_size;

    auto image = dfn::image_to_tensor(dfn::read_png(image_path));
    if (image.extent(1) != size || image.extent(2) != size) {
        image = dfn::bilinear_resize(image, size, size);
    }
    auto mask = dfn::mask_from_image(dfn::read_png(mask_path));
    if (mask.h != size || mask.w != size) {
        throw dfn::ContractError("mask is " + std::to_string(mask.w) + "x" +
                                 std::to_string(mask.h) +
                                 " but the checkpoint expects " +
                                 std::to_string(size));
    }

    fs::create_directories(out_dir);
    auto batch = dfn::Tensor::from_data({1, 3, size, size}, image.data());

    dfn::NoGradGuard no_grad;
    auto outputs = loaded.model.forward(batch, mask, dfn::Mode::Eval);
    const auto& lo = outputs.front();

    dfn::write_png((fs::path(out_dir) / "completed.png").string(),
                   dfn::tensor_to_image(lo.fused));
    dfn::write_png((fs::path(out_dir) / "alpha.png").string(),
                   dfn::tensor_to_image(lo.alpha));

    // Mean alpha as grayscale.
    const std::int64_t plane = std::int64_t{size} * size;
    dfn::ImageU8 mean_img;
    mean_img.w = size;
    mean_img.h = size;
    mean_img.channels = 1;
    mean_img.pixels.resize(static_cast<std::size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        const double m = (lo.alpha.raw()[i] + lo.alpha.raw()[plane + i] +
                          lo.alpha.raw()[2 * plane + i]) /
                         3.0;
        mean_img.pixels[static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(std::lround(m * 255.0));
    }
    dfn::write_png((fs::path(out_dir) / "alpha_mean.png").string(), mean_img);

    auto comp = dfn::hard_composite(batch, lo.fused, mask);
    dfn::write_png((fs::path(out_dir) / "hard_composite.png").string(),
                   dfn::tensor_to_image(comp));

    std::printf("wrote completed.png, alpha.png, alpha_mean.png, "
                "hard_composite.png to %s\n",
                out_dir.c_str());
    return 0;
}

std::vector<dfn::Mask> load_mask_manifest(const std::string& masks_dir,
                                          int expected_size) {
    const fs::path manifest = fs::path(masks_dir) / "manifest.txt";
    std::ifstream in(manifest);
    if (!in) {
        throw dfn::IoError("cannot open mask manifest '" + manifest.string() +
                           "'");
    }
    std::vector<dfn::Mask> masks;
    std::string file;
    double ratio;
    int bucket;
    while (in >> file >> ratio >> bucket) {
        auto mask =
            dfn::mask_from_image(dfn::read_png((fs::path(masks_dir) / file).string()));
        if (mask.h != expected_size || mask.w != expected_size) {
            throw dfn::ContractError("mask '" + file + "' is not " +
                                     std::to_string(expected_size) + "^2");
        }
        if (mask.bucket != bucket) {
            throw dfn::ContractError("manifest mismatch for '" + file +
                                     "': bucket " + std::to_string(bucket) +
                                     " vs recomputed " +
                                     std::to_string(mask.bucket));
        }
        masks.push_back(std::move(mask));
    }
    if (masks.empty()) throw dfn::IoError("mask manifest is empty");
    return masks;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& masks_dir, int band_n,
             const std::string& out_prefix) {
    auto loaded = dfn::load_model_checkpoint(ckpt);
    const int size = loaded.image_size;
    auto images = dfn::load_images(data_dir, size);
    auto pool = load_mask_manifest(masks_dir, size);

    std::vector<dfn::Mask> masks;
    masks.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        masks.push_back(pool[i % pool.size()]);
    }
    const int n = band_n > 0 ? band_n : std::max(1, size * 4 / 256);
    dfn::FeatureExtractor fx;
    auto report = dfn::evaluate_model(loaded.model, images, masks, n, fx);

    std::cout << report.to_table();
    std::ofstream jout(out_prefix + ".json");
    jout << report.to_json().dump(2) << "\n";
    std::ofstream tout(out_prefix + ".txt");
    tout << report.to_table();
    std::printf("report written to %s.json and %s.txt\n", out_prefix.c_str(),
                out_prefix.c_str());
    return 0;
}

int cmd_genmasks(int count, int size, std::uint64_t seed,
                 const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto masks = dfn::build_mask_pool(count, size, seed);
    std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
    for (std::size_t i = 0; i < masks.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "mask_%05zu.png", i);
        dfn::write_png((fs::path(out_dir) / name).string(),
                       dfn::mask_to_image(masks[i]));
        manifest << name << " " << dfn::format_double(masks[i].area_ratio)
                 << " " << masks[i].bucket << "\n";
    }
    std::printf("wrote %d masks and manifest.txt to %s\n", count,
                out_dir.c_str());
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    auto results = dfn::run_gradcheck_suite(seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-22s max_rel_err %.3e  (tol %.0e)  %s\n", r.op.c_str(),
                    r.max_rel_error, r.tolerance, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("gradcheck: %s\n", all_pass ? "all checks passed" : "FAILURES");
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep fusion network for image completion"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "Train a model from a config file");
    std::string config_path;
    train->add_option("--config", config_path, "key=value config file")
        ->required();
    train->allow_extras();

    auto* infer = app.add_subcommand("infer", "Complete one image");
    std::string ckpt, image_path, mask_path, out_dir = "infer_out";
    infer->add_option("--ckpt", ckpt)->required();
    infer->add_option("--image", image_path)->required();
    infer->add_option("--mask", mask_path)->required();
    infer->add_option("--out", out_dir);

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string data_dir, masks_dir, out_prefix = "eval_report";
    int band_n = 0;
    eval->add_option("--ckpt", ckpt)->required();
    eval->add_option("--data", data_dir)->required();
    eval->add_option("--masks", masks_dir)->required();
    eval->add_option("--band", band_n, "boundary band width in pixels");
    eval->add_option("--out", out_prefix);

    auto* genmasks = app.add_subcommand("genmasks", "Generate a mask set");
    int count = 1000, size = 256;
    std::uint64_t seed = 0;
    genmasks->add_option("--count", count);
    genmasks->add_option("--size", size);
    genmasks->add_option("--seed", seed);
    std::string masks_out = "masks";
    genmasks->add_option("--out", masks_out);

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference suite");
    std::uint64_t gc_seed = 2024;
    gradcheck->add_option("--seed", gc_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, train->remaining());
        if (infer->parsed()) return cmd_infer(ckpt, image_path, mask_path, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt, data_dir, masks_dir, band_n, out_prefix);
        if (genmasks->parsed()) return cmd_genmasks(count, size, seed, masks_out);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
