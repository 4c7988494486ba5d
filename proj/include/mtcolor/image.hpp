#pragma once

// 8-bit RGB images, PNG codec (libpng simplified API) and base64 for the
// HTTP payloads.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mtcolor/checkpoint.hpp"
#include "mtcolor/error.hpp"

namespace mtcolor {

// Interleaved RGB, row-major.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    RgbImage() = default;
    RgbImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    std::uint8_t* at(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const { return data.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    bool operator==(const RgbImage&) const = default;
};

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Planar [3,H,W] floats in [0,1] <-> 8-bit image.
inline RgbImage image_from_planar(const std::vector<float>& p, int width, int height) {
    const std::size_t n = static_cast<std::size_t>(width) * height;
    if (p.size() != 3 * n) throw DimensionMismatch("planar buffer does not hold 3x" + std::to_string(n) + " values");
    RgbImage img(width, height);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = to_u8(p[c * n + i]);
    return img;
}

inline std::vector<float> planar_from_image(const RgbImage& img) {
    const std::size_t n = img.pixels();
    std::vector<float> p(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) p[c * n + i] = img.data[i * 3 + c] / 255.0f;
    return p;
}

// BT.601 luma in [0,1].
inline std::vector<float> gray_of(const RgbImage& img) {
    std::vector<float> g(img.pixels());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto* p = img.data.data() + i * 3;
        g[i] = static_cast<float>((0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0);
    }
    return g;
}

inline RgbImage image_from_gray(const std::vector<float>& g, int width, int height) {
    if (g.size() != static_cast<std::size_t>(width) * height) throw DimensionMismatch("gray size mismatch");
    RgbImage img(width, height);
    for (std::size_t i = 0; i < g.size(); ++i) std::fill_n(img.data.data() + i * 3, 3, to_u8(g[i]));
    return img;
}

inline std::string encode_png(const RgbImage& img) {
    if (img.width <= 0 || img.height <= 0) throw InvalidArgument("cannot encode an empty image");
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.data.data(), 0, nullptr))
        throw Error(std::string("PNG encode failed: ") + pi.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.data.data(), 0, nullptr))
        throw Error(std::string("PNG encode failed: ") + pi.message);
    out.resize(size);
    return out;
}

// Any PNG color type is converted to 8-bit RGB (alpha composited on black).
inline RgbImage decode_png(const std::string& bytes) {
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
        throw InvalidInput(std::string("not a readable PNG: ") + pi.message);
    pi.format = PNG_FORMAT_RGB;
    RgbImage img(static_cast<int>(pi.width), static_cast<int>(pi.height));
    if (!png_image_finish_read(&pi, nullptr, img.data.data(), 0, nullptr)) {
        png_image_free(&pi);
        throw InvalidInput(std::string("PNG decode failed: ") + pi.message);
    }
    return img;
}

inline void write_png(const std::string& path, const RgbImage& img) { write_file_atomic(path, encode_png(img)); }

inline RgbImage read_png(const std::string& path) {
    try {
        return decode_png(read_file(path));
    } catch (const InvalidInput& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

// RFC 4648 base64 with padding.
inline std::string base64_encode(const std::string& in) {
    static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
        out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], tbl[v & 63]};
    }
    if (i + 1 == in.size()) {
        const std::uint32_t v = std::uint8_t(in[i]) << 16;
        out += {tbl[v >> 18], tbl[(v >> 12) & 63], '=', '='};
    } else if (i + 2 == in.size()) {
        const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8);
        out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], '='};
    }
    return out;
}

inline std::string base64_decode(const std::string& in) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (in.size() % 4 != 0) throw InvalidInput("base64 length is not a multiple of 4");
    std::string out;
    out.reserve(in.size() / 4 * 3);
    for (std::size_t i = 0; i < in.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = in[i + k];
            if (c == '=' && i + 4 == in.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                if (pad) throw InvalidInput("misplaced base64 padding");
                v[k] = val(c);
                if (v[k] < 0) throw InvalidInput("invalid base64 character");
            }
        }
        const std::uint32_t x = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out += static_cast<char>(x >> 16);
        if (pad < 2) out += static_cast<char>((x >> 8) & 0xff);
        if (pad < 1) out += static_cast<char>(x & 0xff);
    }
    return out;
}

} // namespace mtcolor
