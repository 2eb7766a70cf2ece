#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfn/image_io.hpp"
#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

/// Decodes every PNG in a directory in lexicographic order, resized to
/// size x size and scaled to [0,1]. Returns [3,S,S] tensors.
inline std::vector<Tensor> load_images(const std::string& dir, int size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) {
        throw IoError("load_images: '" + dir + "' is not a directory");
    }
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") names.push_back(entry.path().string());
    }
    if (names.empty()) {
        throw IoError("load_images: no PNG files in '" + dir + "'");
    }
    std::sort(names.begin(), names.end());

    std::vector<Tensor> out;
    out.reserve(names.size());
    for (const auto& name : names) {
        Tensor t;
        try {
            t = image_to_tensor(read_png(name));
        } catch (const std::exception& e) {
            throw IoError("load_images: failed on '" + name + "': " + e.what());
        }
        if (t.extent(1) != size || t.extent(2) != size) {
            t = bilinear_resize(t, size, size);
        }
        out.push_back(std::move(t));
    }
    return out;
}

namespace detail {

inline void fill_gradient(std::vector<double>& img, int size, Rng& rng) {
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = rng.next_double();
        c1[c] = rng.next_double();
    }
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const double dx = std::cos(theta), dy = std::sin(theta);
    const double diag = std::sqrt(2.0) * size;
    const std::int64_t plane = std::int64_t{size} * size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double t = ((x - size / 2.0) * dx + (y - size / 2.0) * dy) / diag + 0.5;
            t = std::min(1.0, std::max(0.0, t));
            for (int c = 0; c < 3; ++c) {
                img[static_cast<std::size_t>(c * plane + std::int64_t{y} * size + x)] =
                    (1.0 - t) * c0[c] + t * c1[c];
            }
        }
    }
}

inline void paint_shape(std::vector<double>& img, int size, Rng& rng) {
    const bool ellipse = rng.next_double() < 0.5;
    const bool striped = rng.next_double() < 0.5;
    const double cx = rng.uniform(0.1, 0.9) * size;
    const double cy = rng.uniform(0.1, 0.9) * size;
    const double rx = rng.uniform(0.08, 0.3) * size;
    const double ry = rng.uniform(0.08, 0.3) * size;
    double base[3], alt[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.next_double();
        alt[c] = rng.next_double();
    }
    const double stripe_freq = rng.uniform(2.0, 8.0) * 2.0 * M_PI / size;
    const double stripe_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double stripe_theta = rng.uniform(0.0, 2.0 * M_PI);
    const double sx = std::cos(stripe_theta), sy = std::sin(stripe_theta);
    const std::int64_t plane = std::int64_t{size} * size;

    const int x0 = std::max(0, static_cast<int>(cx - rx));
    const int x1 = std::min(size - 1, static_cast<int>(cx + rx));
    const int y0 = std::max(0, static_cast<int>(cy - ry));
    const int y1 = std::min(size - 1, static_cast<int>(cy + ry));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if (ellipse) {
                const double u = (x - cx) / rx, v = (y - cy) / ry;
                if (u * u + v * v > 1.0) continue;
            }
            const double* col = base;
            if (striped &&
                std::sin(stripe_freq * (x * sx + y * sy) + stripe_phase) > 0.0) {
                col = alt;
            }
            for (int c = 0; c < 3; ++c) {
                img[static_cast<std::size_t>(c * plane + std::int64_t{y} * size + x)] =
                    col[c];
            }
        }
    }
}

}  // namespace detail

/// Procedural stand-in dataset: color gradients overlaid with rectangles,
/// ellipses and stripe textures, so both structure and texture losses have
/// signal. Deterministic per seed; returns [3,S,S] tensors in [0,1].
inline std::vector<Tensor> synth_dataset(int count, int size,
                                         std::uint64_t seed) {
    if (count < 1) throw ContractError("synth_dataset: count must be >= 1");
    Rng rng(seed);
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        std::vector<double> img(static_cast<std::size_t>(3) * size * size);
        detail::fill_gradient(img, size, rng);
        const int shapes = static_cast<int>(rng.uniform_int(2, 5));
        for (int s = 0; s < shapes; ++s) detail::paint_shape(img, size, rng);
        out.push_back(Tensor::from_data({3, size, size}, std::move(img)));
    }
    return out;
}

/// Stacks [3,S,S] images into one [B,3,S,S] batch.
inline Tensor stack_batch(const std::vector<Tensor>& images,
                          const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("stack_batch: empty batch");
    const auto& s0 = images.at(indices[0]).shape();
    std::vector<double> data;
    data.reserve(indices.size() * static_cast<std::size_t>(shape_numel(s0)));
    for (auto idx : indices) {
        const auto& t = images.at(idx);
        if (t.shape() != s0) {
            throw ShapeError("stack_batch: inconsistent image shapes");
        }
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    return Tensor::from_data(
        {static_cast<std::int64_t>(indices.size()), s0[0], s0[1], s0[2]},
        std::move(data));
}

}  // namespace dfn
