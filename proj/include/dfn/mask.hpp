#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

/// Binary known/unknown map. Convention: 1 = known pixel, 0 = unknown, so
/// hard composition reads I_comp = M*I_in + (1-M)*I_out.
struct Mask {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> grid;  // row-major, values 0 or 1
    double area_ratio = 0.0;         // unknown fraction, stored at build time
    int bucket = 0;

    std::int64_t unknown_count() const {
        std::int64_t n = 0;
        for (auto v : grid) n += (v == 0);
        return n;
    }

    double recompute_ratio() const {
        return static_cast<double>(unknown_count()) /
               static_cast<double>(std::int64_t{h} * w);
    }
};

/// Decile bucket of the unknown-area ratio, computed in integer arithmetic
/// so rational ratios land in the mathematically correct half-open class.
inline int bucket_of(const Mask& mask) {
    const std::int64_t total = std::int64_t{mask.h} * mask.w;
    const std::int64_t z = mask.unknown_count();
    if (2 * z >= total) {
        throw ContractError("bucket_of: area ratio " +
                            std::to_string(mask.recompute_ratio()) +
                            " is outside [0, 0.5)");
    }
    return static_cast<int>((10 * z) / total);
}

inline Mask make_mask(int h, int w, std::vector<std::uint8_t> grid) {
    if (h <= 0 || w <= 0 ||
        grid.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
        throw ShapeError("make_mask: grid size does not match extents");
    }
    for (auto v : grid) {
        if (v > 1) throw ContractError("make_mask: grid values must be 0 or 1");
    }
    Mask m;
    m.h = h;
    m.w = w;
    m.grid = std::move(grid);
    m.area_ratio = m.recompute_ratio();
    // Bucketing is only defined below a ratio of 0.5; out-of-range masks are
    // still representable (bucket_of rejects them on use).
    m.bucket = m.area_ratio < 0.5 ? bucket_of(m) : -1;
    return m;
}

/// Free-form stroke statistics. Lengths are in pixels at the target
/// resolution; defaults are tuned for 256x256 and scale linearly.
struct StrokeParams {
    int min_strokes = 1;
    int max_strokes = 6;
    int min_vertices = 4;
    int max_vertices = 12;
    double angle_perturb = 1.0;  // radians, +/- per vertex
    double min_segment = 10.0;
    double max_segment = 50.0;
    double min_width = 4.0;
    double max_width = 28.0;
    int max_retries = 100;

    StrokeParams scaled_to(int size) const {
        StrokeParams p = *this;
        const double f = static_cast<double>(size) / 256.0;
        p.min_segment *= f;
        p.max_segment *= f;
        p.min_width = std::max(1.0, min_width * f);
        p.max_width = std::max(p.min_width, max_width * f);
        return p;
    }

    void validate() const {
        if (min_strokes < 0 || max_strokes < min_strokes ||
            min_vertices < 1 || max_vertices < min_vertices ||
            angle_perturb < 0.0 || min_segment <= 0.0 ||
            max_segment < min_segment || min_width < 1.0 ||
            max_width < min_width || max_retries < 1) {
            throw ContractError("StrokeParams: invalid ranges");
        }
    }
};

namespace detail {

inline void rasterize_capsule(std::vector<std::uint8_t>& grid, int h, int w,
                              double x0, double y0, double x1, double y1,
                              double radius) {
    const int ymin = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - radius)));
    const int ymax = std::min(h - 1, static_cast<int>(std::ceil(std::max(y0, y1) + radius)));
    const int xmin = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - radius)));
    const int xmax = std::min(w - 1, static_cast<int>(std::ceil(std::max(x0, x1) + radius)));
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    const double r2 = radius * radius;
    for (int y = ymin; y <= ymax; ++y) {
        for (int x = xmin; x <= xmax; ++x) {
            // Distance from pixel center to the segment.
            double t = 0.0;
            if (len2 > 0.0) {
                t = ((x - x0) * dx + (y - y0) * dy) / len2;
                t = std::min(1.0, std::max(0.0, t));
            }
            const double px = x0 + t * dx - x;
            const double py = y0 + t * dy - y;
            if (px * px + py * py <= r2) grid[static_cast<std::size_t>(y) * w + x] = 0;
        }
    }
}

}  // namespace detail

/// Draws random thick polyline strokes until the unknown area lands below
/// half of the image; deterministic per seed.
inline Mask generate_mask(int h, int w, const StrokeParams& params,
                          std::uint64_t seed) {
    if (h < 16 || w < 16) {
        throw ContractError("generate_mask: extents must be at least 16");
    }
    params.validate();
    Rng rng(seed);
    const std::int64_t total = std::int64_t{h} * w;
    for (int attempt = 0; attempt < params.max_retries; ++attempt) {
        std::vector<std::uint8_t> grid(static_cast<std::size_t>(total), 1);
        const int strokes =
            static_cast<int>(rng.uniform_int(params.min_strokes, params.max_strokes));
        for (int s = 0; s < strokes; ++s) {
            double x = rng.uniform(0.0, static_cast<double>(w));
            double y = rng.uniform(0.0, static_cast<double>(h));
            double angle = rng.uniform(0.0, 2.0 * M_PI);
            const int verts = static_cast<int>(
                rng.uniform_int(params.min_vertices, params.max_vertices));
            for (int v = 0; v < verts; ++v) {
                angle += rng.uniform(-params.angle_perturb, params.angle_perturb);
                const double seg = rng.uniform(params.min_segment, params.max_segment);
                const double width = rng.uniform(params.min_width, params.max_width);
                double nx = std::min(static_cast<double>(w - 1),
                                     std::max(0.0, x + seg * std::cos(angle)));
                double ny = std::min(static_cast<double>(h - 1),
                                     std::max(0.0, y + seg * std::sin(angle)));
                detail::rasterize_capsule(grid, h, w, x, y, nx, ny, width / 2.0);
                x = nx;
                y = ny;
            }
        }
        std::int64_t z = 0;
        for (auto g : grid) z += (g == 0);
        if (2 * z < total) return make_mask(h, w, std::move(grid));
    }
    throw ContractError("generate_mask: could not draw a mask with area ratio "
                        "below 0.5 within retry budget");
}

/// The eight axis-aligned isometries (flips, 90-degree rotations and their
/// compositions). All of them preserve the unknown-pixel count.
inline Mask apply_dihedral(const Mask& m, int t) {
    if (t < 0 || t > 7) throw ContractError("apply_dihedral: t must be in 0..7");
    const int h = m.h, w = m.w;
    const bool swaps = (t == 1 || t == 3 || t == 6 || t == 7);
    const int oh = swaps ? w : h;
    const int ow = swaps ? h : w;
    std::vector<std::uint8_t> out(m.grid.size());
    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            int si = 0, sj = 0;
            switch (t) {
                case 0: si = i; sj = j; break;                  // identity
                case 1: si = h - 1 - j; sj = i; break;          // rot90
                case 2: si = h - 1 - i; sj = w - 1 - j; break;  // rot180
                case 3: si = j; sj = w - 1 - i; break;          // rot270
                case 4: si = i; sj = w - 1 - j; break;          // horizontal flip
                case 5: si = h - 1 - i; sj = j; break;          // vertical flip
                case 6: si = j; sj = i; break;                  // transpose
                default: si = h - 1 - j; sj = w - 1 - i; break; // anti-transpose
            }
            out[static_cast<std::size_t>(i) * ow + j] =
                m.grid[static_cast<std::size_t>(si) * w + sj];
        }
    }
    return make_mask(oh, ow, std::move(out));
}

inline Mask augment_mask(const Mask& m, std::uint64_t seed) {
    Rng rng(seed);
    return apply_dihedral(m, static_cast<int>(rng.uniform_int(0, 7)));
}

/// Mask plane as a [1,1,H,W] tensor of 0/1 values.
inline Tensor mask_to_tensor(const Mask& m) {
    std::vector<double> d(m.grid.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m.grid[i];
    return Tensor::from_data({1, 1, m.h, m.w}, std::move(d));
}

}  // namespace dfn
