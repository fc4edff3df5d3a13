#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "advla/common.hpp"
#include "advla/encoder.hpp"
#include "advla/image_io.hpp"
#include "advla/tensor.hpp"

namespace advla {

/// Nonnegative per-pixel attention weights at image resolution.
template <typename S>
struct PixelWeightMap {
    Tensor<S> values;  // [H x W]
};

/// Binary selection of the K highest-attention patches.
struct PatchMask {
    std::vector<std::uint8_t> bits;  // length N
    std::size_t k_count = 0;
};

/// PatchMask upsampled to image resolution by nearest-neighbor block fill.
template <typename S>
struct PixelMask {
    Tensor<S> bits;  // [H x W], exactly 0 or 1
};

/// PatchMask tagged for channel-broadcast application to [N x D] features.
struct FlatFeatureMask {
    std::vector<std::uint8_t> bits;  // length N
    std::size_t k_count = 0;
};

/// Row-major reshape of per-patch scores to the g x g patch grid.
template <typename S>
Tensor<S> scores_to_grid(const Tensor<S>& scores) {
    const std::size_t n = scores.size();
    const std::size_t g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (g * g != n)
        throw ValidationError("scores_to_grid: patch count " + std::to_string(n) +
                              " is not a perfect square");
    return Tensor<S>({g, g}, scores.data());
}

namespace detail {

/// Keys cubic convolution kernel with a = -0.5.
inline double keys_kernel(double t) {
    constexpr double a = -0.5;
    const double at = std::abs(t);
    if (at <= 1.0) return (a + 2.0) * at * at * at - (a + 3.0) * at * at + 1.0;
    if (at < 2.0) return a * (at * at * at - 5.0 * at * at + 8.0 * at - 4.0);
    return 0.0;
}

inline std::ptrdiff_t clamp_index(std::ptrdiff_t i, std::ptrdiff_t n) {
    return std::max<std::ptrdiff_t>(0, std::min(i, n - 1));
}

}  // namespace detail

/// Bicubic upsample of a g x g score grid to image resolution. Half-pixel
/// center mapping, clamped edge samples, output clamped to >= 0.
template <typename S>
PixelWeightMap<S> bicubic_resize(const Tensor<S>& grid, std::size_t H, std::size_t W) {
    if (grid.rank() != 2 || grid.dim(0) != grid.dim(1))
        throw ValidationError("bicubic_resize: square grid required, got " + grid.shape_string());
    const std::size_t g = grid.dim(0);
    if (g < 2) throw ValidationError("bicubic_resize: grid must be at least 2x2");
    if (H < g || W < g)
        throw ValidationError("bicubic_resize: target " + std::to_string(H) + "x" +
                              std::to_string(W) + " smaller than grid " + std::to_string(g));
    Tensor<S> out({H, W});
    const double sy = static_cast<double>(g) / static_cast<double>(H);
    const double sx = static_cast<double>(g) / static_cast<double>(W);
    const auto n = static_cast<std::ptrdiff_t>(g);
    std::vector<double> wxs(4), wys(4);
    for (std::size_t y = 0; y < H; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const auto iy = static_cast<std::ptrdiff_t>(std::floor(fy));
        for (int k = 0; k < 4; ++k) wys[k] = detail::keys_kernel(fy - static_cast<double>(iy - 1 + k));
        for (std::size_t x = 0; x < W; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const auto ix = static_cast<std::ptrdiff_t>(std::floor(fx));
            for (int k = 0; k < 4; ++k)
                wxs[k] = detail::keys_kernel(fx - static_cast<double>(ix - 1 + k));
            double acc = 0.0;
            for (int ky = 0; ky < 4; ++ky) {
                const std::ptrdiff_t gy = detail::clamp_index(iy - 1 + ky, n);
                double row = 0.0;
                for (int kx = 0; kx < 4; ++kx) {
                    const std::ptrdiff_t gx = detail::clamp_index(ix - 1 + kx, n);
                    row += wxs[kx] * static_cast<double>(grid[gy * n + gx]);
                }
                acc += wys[ky] * row;
            }
            out[y * W + x] = static_cast<S>(std::max(0.0, acc));
        }
    }
    return PixelWeightMap<S>{std::move(out)};
}

/// K = ceil(ratio * N) with a tiny slack so binary ratios approximating simple
/// fractions do not round an exact product up.
inline std::size_t topk_count(double ratio, std::size_t n) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ValidationError("topk ratio must lie in (0, 1], got " + std::to_string(ratio));
    const double raw = ratio * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::min(std::max<std::size_t>(k, 1), n);
}

/// Select the K highest scores; ties broken toward the smaller patch index.
template <typename S>
PatchMask topk_mask(const Tensor<S>& scores, double ratio) {
    const std::size_t n = scores.size();
    const std::size_t k = topk_count(ratio, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    PatchMask mask;
    mask.bits.assign(n, 0);
    mask.k_count = k;
    for (std::size_t i = 0; i < k; ++i) mask.bits[order[i]] = 1;
    return mask;
}

/// Nearest-neighbor block fill: pixel (y, x) is 1 iff its patch is selected.
template <typename S>
PixelMask<S> mask_to_pixels(const PatchMask& mask, const EncoderConfig& cfg) {
    if (mask.bits.size() != cfg.num_patches())
        throw ValidationError("mask_to_pixels: mask length " + std::to_string(mask.bits.size()) +
                              " does not match patch grid of " + std::to_string(cfg.num_patches()));
    const std::size_t P = cfg.patch, gw = cfg.grid_w();
    Tensor<S> bits({cfg.image_h, cfg.image_w});
    for (std::size_t y = 0; y < cfg.image_h; ++y)
        for (std::size_t x = 0; x < cfg.image_w; ++x) {
            const std::size_t patch_idx = (y / P) * gw + (x / P);
            bits[y * cfg.image_w + x] = mask.bits[patch_idx] ? S(1) : S(0);
        }
    return PixelMask<S>{std::move(bits)};
}

/// Tag a patch mask for channel-broadcast application to [N x D] features.
inline FlatFeatureMask flatten_mask(const PatchMask& mask) {
    return FlatFeatureMask{mask.bits, mask.k_count};
}

/// Expand a flat feature mask over D channels into an [N x D] 0/1 tensor.
template <typename S>
Tensor<S> expand_feature_mask(const FlatFeatureMask& mask, std::size_t d) {
    const std::size_t n = mask.bits.size();
    Tensor<S> out({n, d});
    for (std::size_t i = 0; i < n; ++i)
        if (mask.bits[i])
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = S(1);
    return out;
}

/// Weight map export: grayscale P5 scaled so the peak weight maps to 255.
template <typename S>
void export_weight_map(const PixelWeightMap<S>& map, const std::string& path) {
    write_pgm(path, map.values);
}

/// Pixel mask export: P4 bitmap, selected pixels as 1-bits.
template <typename S>
void export_pixel_mask(const PixelMask<S>& mask, const std::string& path) {
    write_pbm(path, mask.bits);
}

}  // namespace advla
