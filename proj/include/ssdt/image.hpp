#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssdt/error.hpp"

namespace ssdt::corpus {

/// Grayscale image, row-major intensities in [0, 1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    ImageTensor() = default;
    ImageTensor(int h, int w, double fill = 0.0)
        : height(h), width(w), pixels(std::size_t(h) * std::size_t(w), fill) {
        check_dims(h, w);
    }

    double& at(int y, int x) { return pixels[std::size_t(y) * width + x]; }
    double at(int y, int x) const { return pixels[std::size_t(y) * width + x]; }

    std::size_t size() const { return pixels.size(); }

    bool operator==(const ImageTensor& other) const {
        return height == other.height && width == other.width && pixels == other.pixels;
    }

    void validate() const {
        check_dims(height, width);
        if (pixels.size() != std::size_t(height) * std::size_t(width))
            throw ShapeError("ImageTensor pixel count does not match height*width");
        for (double p : pixels)
            if (!(p >= 0.0 && p <= 1.0))
                throw ParamError("ImageTensor intensity outside [0,1]");
    }

private:
    static void check_dims(int h, int w) {
        if (h < 8 || w < 8)
            throw ParamError("image dimensions must be at least 8x8");
    }
};

/// Snaps an intensity to the 8-bit grid used by the PGM container, so that
/// disk round trips reproduce pixels exactly.
inline double snap_to_byte_grid(double p) {
    p = std::clamp(p, 0.0, 1.0);
    return std::round(p * 255.0) / 255.0;
}

inline ImageTensor flip_ud(const ImageTensor& img) {
    ImageTensor out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x) = img.at(img.height - 1 - y, x);
    return out;
}

inline ImageTensor flip_lr(const ImageTensor& img) {
    ImageTensor out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x) = img.at(y, img.width - 1 - x);
    return out;
}

/// Shifts content by (dx, dy); vacated pixels are filled with 0.
inline ImageTensor translate(const ImageTensor& img, int dx, int dy) {
    if (std::abs(dx) >= img.width || std::abs(dy) >= img.height)
        throw ConfigError("translation exceeds image bounds");
    ImageTensor out(img.height, img.width, 0.0);
    for (int y = 0; y < img.height; ++y) {
        const int sy = y - dy;
        if (sy < 0 || sy >= img.height)
            continue;
        for (int x = 0; x < img.width; ++x) {
            const int sx = x - dx;
            if (sx >= 0 && sx < img.width)
                out.at(y, x) = img.at(sy, sx);
        }
    }
    return out;
}

/// Rotates about the image center by `degrees`, nearest-neighbor resampling,
/// out-of-frame pixels set to 0.
inline ImageTensor rotate(const ImageTensor& img, double degrees) {
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = (img.height - 1) / 2.0;
    const double cx = (img.width - 1) / 2.0;
    ImageTensor out(img.height, img.width, 0.0);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            // inverse mapping: rotate output coordinate back into the source
            const double ry = y - cy, rx = x - cx;
            const double sx = c * rx + s * ry + cx;
            const double sy = -s * rx + c * ry + cy;
            const int ix = int(std::lround(sx));
            const int iy = int(std::lround(sy));
            if (ix >= 0 && ix < img.width && iy >= 0 && iy < img.height)
                out.at(y, x) = img.at(iy, ix);
        }
    }
    return out;
}

/// Writes an 8-bit binary PGM (P5, maxval 255). Intensities are encoded as
/// round(p * 255).
inline void write_pgm(const ImageTensor& img, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open for writing: " + path.string());
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const double p = std::clamp(img.pixels[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(p * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f)
        throw IoError("write failed: " + path.string());
}

namespace detail {

inline int pgm_next_int(std::istream& in, const std::string& path) {
    // skip whitespace and '#' comment lines
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n')
                ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF)
        throw SchemaError("truncated PGM header: " + path);
    int value = 0;
    bool any = false;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        any = true;
        ch = in.get();
    }
    if (!any)
        throw SchemaError("malformed PGM header: " + path);
    return value;
}

} // namespace detail

inline ImageTensor read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open image file: " + path.string());
    char magic[2] = {0, 0};
    f.read(magic, 2);
    if (!f || magic[0] != 'P' || magic[1] != '5')
        throw SchemaError("not a binary PGM (P5): " + path.string());
    const int width = detail::pgm_next_int(f, path.string());
    const int height = detail::pgm_next_int(f, path.string());
    const int maxval = detail::pgm_next_int(f, path.string());
    if (maxval != 255)
        throw SchemaError("unsupported PGM maxval (expected 255): " + path.string());
    std::vector<unsigned char> bytes(std::size_t(width) * std::size_t(height));
    f.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (std::size_t(f.gcount()) != bytes.size())
        throw SchemaError("truncated PGM payload: " + path.string());
    ImageTensor img(height, width);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = bytes[i] / 255.0;
    return img;
}

} // namespace ssdt::corpus
