#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfn/mask.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
    int w = 0;
    int h = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline ImageU8 read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open '" + path + "' for reading");

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 ||
        png_sig_cmp(header, 0, 8) != 0) {
        throw IoError("'" + path + "' is not a PNG file");
    }

    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    ImageU8 img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
        png_get_bit_depth(png, info) < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    png_set_interlace_handling(png);
    png_read_update_info(png, info);

    img.w = static_cast<int>(png_get_image_width(png, info));
    img.h = static_cast<int>(png_get_image_height(png, info));
    const int ct = png_get_color_type(png, info);
    img.channels = (ct == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
    if (ct != PNG_COLOR_TYPE_GRAY && ct != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("'" + path + "' has an unsupported PNG color type");
    }
    img.pixels.resize(static_cast<std::size_t>(img.w) * img.h * img.channels);
    rows.resize(static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y) {
        rows[static_cast<std::size_t>(y)] =
            img.pixels.data() + static_cast<std::size_t>(y) * img.w * img.channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw IoError("write_png: image must have 1 or 3 channels");
    }
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");

    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
                 static_cast<png_uint_32>(img.h), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    rows.resize(static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y) {
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
            img.pixels.data() + static_cast<std::size_t>(y) * img.w * img.channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Decoded image as a [3,H,W] tensor scaled to [0,1]; gray is replicated.
inline Tensor image_to_tensor(const ImageU8& img) {
    std::vector<double> d(static_cast<std::size_t>(3) * img.h * img.w);
    const std::int64_t plane = std::int64_t{img.h} * img.w;
    for (std::int64_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            const int sc = img.channels == 1 ? 0 : c;
            d[static_cast<std::size_t>(c * plane + p)] =
                img.pixels[static_cast<std::size_t>(p * img.channels + sc)] / 255.0;
        }
    }
    return Tensor::from_data({3, img.h, img.w}, std::move(d));
}

/// [3,H,W] or [1,3,H,W] tensor to an 8-bit RGB image; values clamped to [0,1].
inline ImageU8 tensor_to_image(const Tensor& t) {
    Shape s = t.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3 || s[0] != 3) {
        throw ShapeError("tensor_to_image expects [3,H,W], got " +
                         shape_str(t.shape()));
    }
    ImageU8 img;
    img.h = static_cast<int>(s[1]);
    img.w = static_cast<int>(s[2]);
    img.channels = 3;
    const std::int64_t plane = s[1] * s[2];
    img.pixels.resize(static_cast<std::size_t>(3 * plane));
    for (std::int64_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            double v = t.raw()[c * plane + p];
            v = std::min(1.0, std::max(0.0, v));
            img.pixels[static_cast<std::size_t>(3 * p + c)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return img;
}

/// Mask file convention: single channel, 255 = unknown, 0 = known.
inline ImageU8 mask_to_image(const Mask& m) {
    ImageU8 img;
    img.w = m.w;
    img.h = m.h;
    img.channels = 1;
    img.pixels.resize(m.grid.size());
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
        img.pixels[i] = m.grid[i] ? 0 : 255;
    }
    return img;
}

inline Mask mask_from_image(const ImageU8& img) {
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(img.w) * img.h);
    for (std::size_t p = 0; p < grid.size(); ++p) {
        // Any channel flagged bright counts as unknown.
        std::uint8_t maxv = 0;
        for (int c = 0; c < img.channels; ++c) {
            maxv = std::max(maxv, img.pixels[p * img.channels + c]);
        }
        grid[p] = maxv >= 128 ? 0 : 1;
    }
    return make_mask(img.h, img.w, std::move(grid));
}

/// Bilinear resampling of [3,H,W] data with half-pixel centers.
inline Tensor bilinear_resize(const Tensor& t, int oh, int ow) {
    const auto& s = t.shape();
    if (s.size() != 3) throw ShapeError("bilinear_resize expects [C,H,W]");
    const std::int64_t C = s[0], H = s[1], W = s[2];
    if (oh <= 0 || ow <= 0) throw ShapeError("bilinear_resize: bad target size");
    std::vector<double> out(static_cast<std::size_t>(C) * oh * ow);
    const double sy = static_cast<double>(H) / oh;
    const double sx = static_cast<double>(W) / ow;
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = t.raw() + c * H * W;
        double* dst = out.data() + c * oh * ow;
        for (int y = 0; y < oh; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            fy = std::min(static_cast<double>(H - 1), std::max(0.0, fy));
            const std::int64_t y0 = static_cast<std::int64_t>(fy);
            const std::int64_t y1 = std::min(H - 1, y0 + 1);
            const double wy = fy - static_cast<double>(y0);
            for (int x = 0; x < ow; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                fx = std::min(static_cast<double>(W - 1), std::max(0.0, fx));
                const std::int64_t x0 = static_cast<std::int64_t>(fx);
                const std::int64_t x1 = std::min(W - 1, x0 + 1);
                const double wx = fx - static_cast<double>(x0);
                const double v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
                const double v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
                dst[static_cast<std::size_t>(y) * ow + x] =
                    (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                    wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }
    return Tensor::from_data({C, oh, ow}, std::move(out));
}

}  // namespace dfn
