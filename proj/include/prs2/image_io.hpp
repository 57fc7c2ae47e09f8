#pragma once

// Grayscale image files: binary PGM (8/16-bit) and PNG via libpng.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "instance.hpp"

namespace prs2 {

class ImageFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Grayscale pixels widened to 16 bits; `bit_depth` is 8 or 16.
struct GrayImage {
    Grid<std::uint16_t> pixels;
    int bit_depth = 8;
};

namespace detail {

inline std::string read_pgm_token(std::istream& is)
{
    std::string tok;
    char ch;
    while (is.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(is, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(ch);
    }
    return tok;
}

inline GrayImage read_pgm(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const std::string magic = read_pgm_token(is);
    if (magic != "P5") throw ImageFormatError(path.string() + ": not a binary grayscale PGM (magic '" + magic + "')");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(read_pgm_token(is));
        h = std::stoul(read_pgm_token(is));
        maxval = std::stoul(read_pgm_token(is));
    } catch (const std::exception&) {
        throw ImageFormatError(path.string() + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ImageFormatError(path.string() + ": bad PGM header");
    GrayImage img{Grid<std::uint16_t>(h, w, 0), maxval > 255 ? 16 : 8};
    for (std::size_t i = 0; i < w * h; ++i) {
        if (img.bit_depth == 8) {
            const int c = is.get();
            if (c == EOF) throw ImageFormatError(path.string() + ": truncated pixel data");
            img.pixels[i] = static_cast<std::uint16_t>(c);
        } else {
            const int hi = is.get(), lo = is.get();
            if (lo == EOF) throw ImageFormatError(path.string() + ": truncated pixel data");
            img.pixels[i] = static_cast<std::uint16_t>((hi << 8) | lo);
        }
    }
    return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << img.pixels.width() << ' ' << img.pixels.height() << '\n' << (img.bit_depth == 16 ? 65535 : 255) << '\n';
    for (std::uint16_t v : img.pixels.cells()) {
        if (img.bit_depth == 16) os.put(static_cast<char>(v >> 8));
        os.put(static_cast<char>(v & 0xff));
    }
    if (!os) throw IoError("write failed for " + path.string());
}

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

inline GrayImage read_png(const std::filesystem::path& path)
{
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    GrayImage img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageFormatError(path.string() + ": unreadable PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageFormatError(path.string() + ": not a grayscale image");
    }
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_swap(png); // host little-endian
    png_read_update_info(png, info);
    const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> buf(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (std::size_t r = 0; r < h; ++r) rows[r] = buf.data() + r * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    img.bit_depth = depth == 16 ? 16 : 8;
    img.pixels = Grid<std::uint16_t>(h, w, 0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (img.bit_depth == 16) {
                img.pixels(r, c) = static_cast<std::uint16_t>(rows[r][2 * c] | (rows[r][2 * c + 1] << 8));
            } else {
                img.pixels(r, c) = rows[r][c];
            }
        }
    }
    return img;
}

inline void write_png(const std::filesystem::path& path, const GrayImage& img)
{
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp.get());
    const std::size_t h = img.pixels.height(), w = img.pixels.width();
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), img.bit_depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t bpp = img.bit_depth == 16 ? 2 : 1;
    std::vector<unsigned char> row(w * bpp);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const std::uint16_t v = img.pixels(r, c);
            if (bpp == 2) {
                row[2 * c] = static_cast<unsigned char>(v >> 8);
                row[2 * c + 1] = static_cast<unsigned char>(v & 0xff);
            } else {
                row[c] = static_cast<unsigned char>(v);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline bool has_extension(const std::filesystem::path& p, const char* ext)
{
    std::string e = p.extension().string();
    for (auto& ch : e) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return e == ext;
}

} // namespace detail

inline bool is_supported_image(const std::filesystem::path& p)
{
    return detail::has_extension(p, ".png") || detail::has_extension(p, ".pgm");
}

inline GrayImage read_gray(const std::filesystem::path& path)
{
    if (detail::has_extension(path, ".pgm")) return detail::read_pgm(path);
    if (detail::has_extension(path, ".png")) return detail::read_png(path);
    throw ImageFormatError(path.string() + ": unsupported extension (expected .png or .pgm)");
}

inline void write_gray(const std::filesystem::path& path, const GrayImage& img)
{
    if (detail::has_extension(path, ".pgm")) return detail::write_pgm(path, img);
    if (detail::has_extension(path, ".png")) return detail::write_png(path, img);
    throw ImageFormatError(path.string() + ": unsupported extension (expected .png or .pgm)");
}

/// Pixel value = instance id. A mask with a single non-zero value is treated
/// as binary and labeled by connected components; otherwise ids are
/// compacted to 1..K.
struct MaskLoadOptions {
    Connectivity connectivity = Connectivity::Four;
    std::size_t opening_size = 0; // applied to the foreground when > 1
};

inline InstanceMap instances_from_gray(const GrayImage& img, const MaskLoadOptions& opt = {})
{
    const auto& px = img.pixels;
    LabelGrid raw(px.height(), px.width(), 0);
    std::uint16_t first_value = 0;
    bool binary = true;
    for (std::size_t i = 0; i < px.size(); ++i) {
        raw[i] = px[i];
        if (px[i] == 0) continue;
        if (first_value == 0) first_value = px[i];
        else if (px[i] != first_value) binary = false;
    }
    BinaryMask fg(px.height(), px.width(), 0);
    for (std::size_t i = 0; i < px.size(); ++i) fg[i] = px[i] ? 1 : 0;
    if (opt.opening_size > 1) {
        fg = morphological_opening(fg, opt.opening_size);
        for (std::size_t i = 0; i < px.size(); ++i)
            if (!fg[i]) raw[i] = 0;
    }
    if (binary) return connected_components(fg, opt.connectivity);
    return InstanceMap::from_labels(raw);
}

inline InstanceMap load_instance_mask(const std::filesystem::path& path, const MaskLoadOptions& opt = {})
{
    return instances_from_gray(read_gray(path), opt);
}

/// Instance ids as pixel values; 16-bit when more than 255 instances.
inline GrayImage instances_to_gray(const InstanceMap& m)
{
    GrayImage img{Grid<std::uint16_t>(m.height(), m.width(), 0), m.count() > 255 ? 16 : 8};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint16_t>(m[i]);
    return img;
}

inline GrayImage to_gray(const Grid<std::uint8_t>& g)
{
    GrayImage img{Grid<std::uint16_t>(g.height(), g.width(), 0), 8};
    for (std::size_t i = 0; i < g.size(); ++i) img.pixels[i] = g[i];
    return img;
}

/// Channel 0 of a tensor with values in [0, 1], quantized to 8 bits.
inline GrayImage tensor_to_gray(const Tensor& t)
{
    const std::size_t h = t.extent(t.rank() - 2), w = t.extent(t.rank() - 1);
    GrayImage img{Grid<std::uint16_t>(h, w, 0), 8};
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp(t[i], 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * 255.0));
    }
    return img;
}

} // namespace prs2
