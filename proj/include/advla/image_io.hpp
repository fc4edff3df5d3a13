#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "advla/common.hpp"
#include "advla/tensor.hpp"

namespace advla {

/// Real value in [0,1] -> 8-bit sample, round-half-to-even.
inline std::uint8_t quantize_byte(double v) {
    double scaled = std::nearbyint(v * 255.0);  // FE_TONEAREST: ties to even
    if (scaled < 0.0) scaled = 0.0;
    if (scaled > 255.0) scaled = 255.0;
    return static_cast<std::uint8_t>(scaled);
}

namespace detail {

inline void skip_pnm_space(std::istream& is) {
    for (;;) {
        int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            is.get();
        } else {
            return;
        }
    }
}

inline std::size_t read_pnm_int(std::istream& is, const std::string& what) {
    skip_pnm_space(is);
    long long v = -1;
    if (!(is >> v) || v < 0) throw ValidationError("malformed PNM " + what);
    return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Write a [3 x H x W] tensor with values in [0,1] as binary PPM (P6, maxval 255).
template <typename S>
void write_ppm(const std::string& path, const Tensor<S>& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ValidationError("write_ppm: [3 x H x W] tensor required, got " + image.shape_string());
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericError("cannot open " + path + " for writing");
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<std::uint8_t> row(3 * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                row[3 * x + c] = quantize_byte(static_cast<double>(image[(c * h + y) * w + x]));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw NumericError("write failure on " + path);
}

/// Read a binary PPM (P6, maxval 255) into a [3 x H x W] tensor scaled to [0,1].
template <typename S>
Tensor<S> read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open image file " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw ValidationError(path + " is not a binary PPM (P6) file");
    const std::size_t w = detail::read_pnm_int(is, "width");
    const std::size_t h = detail::read_pnm_int(is, "height");
    const std::size_t maxval = detail::read_pnm_int(is, "maxval");
    if (w == 0 || h == 0) throw ValidationError(path + ": degenerate image dimensions");
    if (maxval != 255)
        throw ValidationError(path + ": only maxval 255 is supported, got " + std::to_string(maxval));
    is.get();  // single whitespace after maxval
    std::vector<std::uint8_t> raw(3 * w * h);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw ValidationError(path + ": truncated pixel data");
    Tensor<S> image({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                image[(c * h + y) * w + x] =
                    static_cast<S>(raw[(y * w + x) * 3 + c]) / S(255);
    return image;
}

/// Write an [H x W] tensor as binary PGM (P5), linearly scaled so the value
/// `scale_max` maps to 255. scale_max <= 0 picks the tensor maximum.
template <typename S>
void write_pgm(const std::string& path, const Tensor<S>& map, double scale_max = 0.0) {
    if (map.rank() != 2)
        throw ValidationError("write_pgm: [H x W] tensor required, got " + map.shape_string());
    const std::size_t h = map.dim(0), w = map.dim(1);
    double mx = scale_max > 0.0 ? scale_max : static_cast<double>(map.max_value());
    if (mx <= 0.0) mx = 1.0;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericError("cannot open " + path + " for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    for (std::size_t i = 0; i < map.size(); ++i)
        os.put(static_cast<char>(quantize_byte(static_cast<double>(map[i]) / mx)));
    if (!os) throw NumericError("write failure on " + path);
}

/// Write a binary bitmap (P4). Nonzero values are emitted as 1-bits (black).
template <typename S>
void write_pbm(const std::string& path, const Tensor<S>& bits) {
    if (bits.rank() != 2)
        throw ValidationError("write_pbm: [H x W] tensor required, got " + bits.shape_string());
    const std::size_t h = bits.dim(0), w = bits.dim(1);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericError("cannot open " + path + " for writing");
    os << "P4\n" << w << " " << h << "\n";
    const std::size_t row_bytes = (w + 7) / 8;
    std::vector<std::uint8_t> row(row_bytes);
    for (std::size_t y = 0; y < h; ++y) {
        std::fill(row.begin(), row.end(), 0);
        for (std::size_t x = 0; x < w; ++x)
            if (bits[y * w + x] != S(0)) row[x / 8] |= static_cast<std::uint8_t>(0x80u >> (x % 8));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row_bytes));
    }
    if (!os) throw NumericError("write failure on " + path);
}

}  // namespace advla
