#include "maskdiff/imageio.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace maskdiff {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const Png8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: channels must be 1 or 3");
    if (img.pixels.size() != static_cast<size_t>(img.height) * img.width * img.channels)
        throw std::invalid_argument("write_png: pixel buffer size mismatch");

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("write_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng error writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Png8 read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("read_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("read_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("read_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: libpng error reading " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    Png8 img;
    img.height = static_cast<int>(h);
    img.width = static_cast<int>(w);
    img.channels = color_type == PNG_COLOR_TYPE_GRAY ? 1 : 3;
    img.pixels.resize(static_cast<size_t>(img.height) * img.width * img.channels);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Png8 quantize_image(const TensorF& chw) {
    if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3))
        throw std::invalid_argument("quantize_image: expected (1|3,H,W)");
    Png8 img;
    img.channels = chw.dim(0);
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.pixels.resize(static_cast<size_t>(img.height) * img.width * img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                float v = chw.at3(c, y, x);
                v = v < -1.f ? -1.f : (v > 1.f ? 1.f : v);
                const int q = static_cast<int>(std::lround((v + 1.f) * 127.5f));
                img.pixels[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
            }
    return img;
}

TensorF dequantize_image(const Png8& img) {
    TensorF chw({img.channels, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                chw.at3(c, y, x) =
                    img.pixels[(static_cast<size_t>(y) * img.width + x) * img.channels + c] / 127.5f - 1.f;
    return chw;
}

Png8 mask_to_png(const InstanceMask& m) {
    Png8 img;
    img.channels = 1;
    img.height = m.height();
    img.width = m.width();
    img.pixels.resize(static_cast<size_t>(img.height) * img.width);
    for (int64_t i = 0; i < m.data.numel(); ++i) img.pixels[static_cast<size_t>(i)] = m.data[i] ? 255 : 0;
    return img;
}

InstanceMask mask_from_png(const Png8& img) {
    if (img.channels != 1) throw std::invalid_argument("mask_from_png: expected single-channel image");
    InstanceMask m(img.height, img.width);
    for (size_t i = 0; i < img.pixels.size(); ++i) m.data[static_cast<int64_t>(i)] = img.pixels[i] ? 1 : 0;
    return m;
}

}  // namespace maskdiff
