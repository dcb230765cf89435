#pragma once

// PNG reading and writing through libpng.

#include "code/tensor.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

namespace code {

struct ImageSample {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;  // height * width * 3, row-major, values in [0, 1]
    std::string id;

    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
};

inline void validate(const ImageSample& img) {
    if (img.height < 8 || img.width < 8) throw Error("image must be at least 8x8: " + img.id);
    if (img.pixels.size() != img.height * img.width * 3) throw Error("pixel buffer size mismatch: " + img.id);
    for (double p : img.pixels)
        if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw Error("pixel value outside [0,1]: " + img.id);
}

namespace png_detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw Error("cannot open file: " + path);
    return f;
}

[[noreturn]] inline void fail(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }
inline void warn(png_structp, png_const_charp) {}

// Decodes to 8-bit rows with the given libpng transforms applied.
struct Decoded {
    std::size_t width = 0, height = 0, channels = 0;
    int color_type = 0;
    std::vector<std::uint8_t> data;
    std::vector<png_color> palette;
};

inline Decoded read(const std::string& path, bool expand_palette) {
    auto f = open(path, "rb");
    std::array<unsigned char, 8> sig{};
    if (std::fread(sig.data(), 1, 8, f.get()) != 8 || png_sig_cmp(sig.data(), 0, 8) != 0)
        throw Error("not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, fail, warn);
    png_infop info = png_create_info_struct(png);
    Decoded d;
    try {
        png_init_io(png, f.get());
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        d.color_type = png_get_color_type(png, info);
        const int depth = png_get_bit_depth(png, info);
        if (d.color_type == PNG_COLOR_TYPE_PALETTE) {
            png_colorp pal = nullptr;
            int n = 0;
            if (png_get_PLTE(png, info, &pal, &n)) d.palette.assign(pal, pal + n);
            if (expand_palette) png_set_palette_to_rgb(png);
            else if (depth < 8) png_set_packing(png);
        }
        if (depth == 16) png_set_strip_16(png);
        if (d.color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        png_read_update_info(png, info);
        d.width = png_get_image_width(png, info);
        d.height = png_get_image_height(png, info);
        d.channels = png_get_channels(png, info);
        const std::size_t stride = png_get_rowbytes(png, info);
        d.data.resize(stride * d.height);
        std::vector<png_bytep> rows(d.height);
        for (std::size_t y = 0; y < d.height; ++y) rows[y] = d.data.data() + y * stride;
        png_read_image(png, rows.data());
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return d;
}

inline void write(const std::string& path, std::size_t width, std::size_t height, int color_type,
                  const std::vector<std::uint8_t>& data, std::size_t channels,
                  const std::vector<png_color>& palette = {}) {
    auto f = open(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, fail, warn);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, f.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        if (color_type == PNG_COLOR_TYPE_PALETTE)
            png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
        png_write_info(png, info);
        for (std::size_t y = 0; y < height; ++y)
            png_write_row(png, const_cast<png_bytep>(data.data() + y * width * channels));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
}

}  // namespace png_detail

inline ImageSample read_png(const std::string& path) {
    auto d = png_detail::read(path, true);
    ImageSample img;
    img.width = d.width;
    img.height = d.height;
    img.id = path;
    img.pixels.resize(d.width * d.height * 3);
    for (std::size_t i = 0; i < d.width * d.height; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = d.channels >= 3 ? c : 0;
            img.pixels[i * 3 + c] = d.data[i * d.channels + src] / 255.0;
        }
    }
    return img;
}

inline void write_png(const std::string& path, const ImageSample& img) {
    std::vector<std::uint8_t> data(img.pixels.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double v = std::clamp(img.pixels[i], 0.0, 1.0);
        data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_detail::write(path, img.width, img.height, PNG_COLOR_TYPE_RGB, data, 3);
}

inline void write_gray_png(const std::string& path, std::size_t width, std::size_t height,
                           const std::vector<std::uint8_t>& values) {
    png_detail::write(path, width, height, PNG_COLOR_TYPE_GRAY, values, 1);
}

// Fixed 256-entry palette: index 0 black, 255 white, others spread over hues.
inline std::vector<png_color> label_palette() {
    std::vector<png_color> pal(256);
    for (int i = 0; i < 256; ++i) {
        const auto h = static_cast<std::uint8_t>(i);
        pal[static_cast<std::size_t>(i)] = png_color{static_cast<png_byte>((h * 97) & 0xff),
                                                     static_cast<png_byte>((h * 57 + 80) & 0xff),
                                                     static_cast<png_byte>((h * 151 + 160) & 0xff)};
    }
    pal[0] = png_color{0, 0, 0};
    pal[255] = png_color{255, 255, 255};
    return pal;
}

// 8-bit paletted PNG whose pixel index is the label value.
inline void write_label_png(const std::string& path, std::size_t width, std::size_t height,
                            const std::vector<std::uint8_t>& labels) {
    png_detail::write(path, width, height, PNG_COLOR_TYPE_PALETTE, labels, 1, label_palette());
}

// Reads indices from a paletted PNG, or raw values from an 8-bit grayscale PNG.
inline std::vector<std::uint8_t> read_label_png(const std::string& path, std::size_t& width,
                                                std::size_t& height) {
    auto d = png_detail::read(path, false);
    if (d.channels != 1) throw Error("label PNG must be paletted or grayscale: " + path);
    width = d.width;
    height = d.height;
    return d.data;
}

}  // namespace code
