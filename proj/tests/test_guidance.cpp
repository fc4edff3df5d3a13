#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "advla/guidance.hpp"
#include "support/fd_check.hpp"

using advla::EncoderConfig;
using advla::FlatFeatureMask;
using advla::PatchMask;
using advla::PixelWeightMap;
using advla::RandomStream;
using advla::Tensor;

namespace {

// Independent bicubic reference: explicit Keys a=-0.5 polynomial, full 4x4
// support accumulated with the same clamped-sample convention, structured
// nothing like the production resize loop.
double ref_keys(double t) {
    t = std::abs(t);
    if (t >= 2.0) return 0.0;
    if (t >= 1.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return (1.5 * t - 2.5) * t * t + 1.0;
}

double ref_bicubic_at(const Tensor<double>& grid, std::size_t H, std::size_t W, std::size_t y,
                      std::size_t x) {
    const auto g = static_cast<std::ptrdiff_t>(grid.dim(0));
    const double fy =
        (static_cast<double>(y) + 0.5) * static_cast<double>(g) / static_cast<double>(H) - 0.5;
    const double fx =
        (static_cast<double>(x) + 0.5) * static_cast<double>(g) / static_cast<double>(W) - 0.5;
    const auto base_y = static_cast<std::ptrdiff_t>(std::floor(fy));
    const auto base_x = static_cast<std::ptrdiff_t>(std::floor(fx));
    double acc = 0.0;
    for (std::ptrdiff_t dy = -1; dy <= 2; ++dy)
        for (std::ptrdiff_t dx = -1; dx <= 2; ++dx) {
            const std::ptrdiff_t sy = std::clamp<std::ptrdiff_t>(base_y + dy, 0, g - 1);
            const std::ptrdiff_t sx = std::clamp<std::ptrdiff_t>(base_x + dx, 0, g - 1);
            acc += ref_keys(fy - static_cast<double>(base_y + dy)) *
                   ref_keys(fx - static_cast<double>(base_x + dx)) *
                   grid[static_cast<std::size_t>(sy * g + sx)];
        }
    return std::max(0.0, acc);
}

}  // namespace

TEST_CASE("scores reshape to the patch grid", "[guidance]") {
    Tensor<double> s({4}, {1.0, 2.0, 3.0, 4.0});
    Tensor<double> grid = advla::scores_to_grid(s);
    REQUIRE(grid.shape() == std::vector<std::size_t>{2, 2});
    CHECK(grid.at2(0, 0) == 1.0);
    CHECK(grid.at2(0, 1) == 2.0);
    CHECK(grid.at2(1, 0) == 3.0);
    CHECK(grid.at2(1, 1) == 4.0);

    // Reshape then flatten is the identity.
    CHECK(grid.data() == s.data());

    Tensor<double> s256({256});
    CHECK(advla::scores_to_grid(s256).shape() == std::vector<std::size_t>{16, 16});

    Tensor<double> bad({6});
    CHECK_THROWS_AS(advla::scores_to_grid(bad), advla::ValidationError);
}

TEST_CASE("bicubic resize of a constant is constant", "[guidance]") {
    RandomStream rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const double c = rng.uniform(0.0, 3.0);
        const std::size_t g = 2 + static_cast<std::size_t>(trial);
        PixelWeightMap<double> map = advla::bicubic_resize(Tensor<double>::full({g, g}, c), 32, 48);
        REQUIRE(map.values.shape() == std::vector<std::size_t>{32, 48});
        for (std::size_t i = 0; i < map.values.size(); ++i)
            CHECK(std::abs(map.values[i] - c) < 1e-12);
    }
}

TEST_CASE("bicubic matches a direct kernel-formula evaluation", "[guidance]") {
    SECTION("2x2 grid upsampled 2x, all samples") {
        Tensor<double> grid({2, 2}, {0.2, 0.9, 0.4, 0.6});
        PixelWeightMap<double> map = advla::bicubic_resize(grid, 4, 4);
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x)
                CHECK(std::abs(map.values.at2(y, x) - ref_bicubic_at(grid, 4, 4, y, x)) < 1e-10);
    }

    SECTION("impulse response on a 6x6 grid") {
        Tensor<double> grid({6, 6});
        grid.at2(3, 3) = 1.0;
        PixelWeightMap<double> map = advla::bicubic_resize(grid, 24, 24);
        for (std::size_t y = 0; y < 24; ++y)
            for (std::size_t x = 0; x < 24; ++x)
                CHECK(std::abs(map.values.at2(y, x) - ref_bicubic_at(grid, 24, 24, y, x)) < 1e-10);
    }

    SECTION("output is clamped nonnegative") {
        Tensor<double> grid({4, 4});
        grid.at2(1, 1) = 1.0;  // raw bicubic overshoots negative nearby
        PixelWeightMap<double> map = advla::bicubic_resize(grid, 16, 16);
        CHECK(map.values.min_value() >= 0.0);
    }

    SECTION("degenerate sizes rejected") {
        Tensor<double> g1({1, 1}, {1.0});
        CHECK_THROWS_AS(advla::bicubic_resize(g1, 8, 8), advla::ValidationError);
        Tensor<double> g4({4, 4});
        CHECK_THROWS_AS(advla::bicubic_resize(g4, 2, 8), advla::ValidationError);
    }
}

TEST_CASE("top-k selection count and tie-breaking", "[guidance]") {
    SECTION("ratio 0.1 of 256 patches selects 26") {
        Tensor<double> s({256});
        RandomStream rng(9);
        for (std::size_t i = 0; i < 256; ++i) s[i] = rng.uniform01();
        PatchMask m = advla::topk_mask(s, 0.1);
        CHECK(m.k_count == 26);
        CHECK(std::accumulate(m.bits.begin(), m.bits.end(), 0) == 26);
    }

    SECTION("all-equal scores select lowest indices") {
        Tensor<double> s = Tensor<double>::full({10}, 0.5);
        PatchMask m = advla::topk_mask(s, 0.3);
        REQUIRE(m.k_count == 3);
        for (std::size_t i = 0; i < 10; ++i) CHECK(m.bits[i] == (i < 3 ? 1 : 0));
    }

    SECTION("ratio one selects everything") {
        Tensor<double> s({7}, {3, 1, 4, 1, 5, 9, 2});
        PatchMask m = advla::topk_mask(s, 1.0);
        CHECK(m.k_count == 7);
        CHECK(std::count(m.bits.begin(), m.bits.end(), 1) == 7);
    }

    SECTION("property: K matches exact rational ceil and selection is deterministic") {
        RandomStream rng(123);
        for (int trial = 0; trial < 300; ++trial) {
            const std::size_t n = 1 + rng.below(400);
            const std::size_t den = 1 + rng.below(100);
            const std::size_t num = 1 + rng.below(den);
            const double ratio = static_cast<double>(num) / static_cast<double>(den);
            Tensor<double> s({n});
            for (std::size_t i = 0; i < n; ++i) s[i] = rng.uniform(-2.0, 2.0);
            PatchMask a = advla::topk_mask(s, ratio);
            PatchMask b = advla::topk_mask(s, ratio);
            CHECK(a.bits == b.bits);
            const std::size_t k_exact = (num * n + den - 1) / den;  // integer ceil
            CHECK(a.k_count == std::max<std::size_t>(1, k_exact));
            CHECK(static_cast<std::size_t>(std::count(a.bits.begin(), a.bits.end(), 1)) ==
                  a.k_count);
            // Every selected score >= every unselected score.
            double worst_in = 1e300, best_out = -1e300;
            for (std::size_t i = 0; i < n; ++i)
                (a.bits[i] ? worst_in = std::min(worst_in, s[i])
                           : best_out = std::max(best_out, s[i]));
            if (a.k_count < n) CHECK(worst_in >= best_out);
        }
    }

    SECTION("property: permuting scores permutes the selection") {
        RandomStream rng(321);
        const std::size_t n = 64;
        Tensor<double> s({n});
        for (std::size_t i = 0; i < n; ++i) s[i] = rng.uniform01() + static_cast<double>(i) * 1e-6;
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

        Tensor<double> sp({n});
        for (std::size_t i = 0; i < n; ++i) sp[perm[i]] = s[i];
        PatchMask m = advla::topk_mask(s, 0.25);
        PatchMask mp = advla::topk_mask(sp, 0.25);
        for (std::size_t i = 0; i < n; ++i) CHECK(mp.bits[perm[i]] == m.bits[i]);
    }

    SECTION("invalid ratios rejected") {
        Tensor<double> s({4});
        CHECK_THROWS_AS(advla::topk_mask(s, 0.0), advla::ValidationError);
        CHECK_THROWS_AS(advla::topk_mask(s, 1.5), advla::ValidationError);
    }
}

TEST_CASE("patch mask upsampling", "[guidance]") {
    EncoderConfig cfg;
    cfg.image_h = cfg.image_w = 32;
    cfg.patch = 8;  // 4x4 grid

    SECTION("single selected patch fills one block") {
        PatchMask m;
        m.bits.assign(16, 0);
        m.bits[5] = 1;  // grid (1, 1)
        m.k_count = 1;
        auto px = advla::mask_to_pixels<double>(m, cfg);
        std::size_t ones = 0;
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                const double v = px.bits.at2(y, x);
                if (v == 1.0) {
                    ++ones;
                    CHECK((y >= 8 && y < 16 && x >= 8 && x < 16));
                } else {
                    CHECK(v == 0.0);
                }
            }
        CHECK(ones == 64);  // k_count * P^2
    }

    SECTION("full mask fills the image") {
        PatchMask m;
        m.bits.assign(16, 1);
        m.k_count = 16;
        auto px = advla::mask_to_pixels<double>(m, cfg);
        CHECK(px.bits.min_value() == 1.0);
    }

    SECTION("grid mismatch rejected") {
        PatchMask m;
        m.bits.assign(9, 1);
        m.k_count = 9;
        CHECK_THROWS_AS(advla::mask_to_pixels<double>(m, cfg), advla::ValidationError);
    }
}

TEST_CASE("flat feature mask broadcast", "[guidance]") {
    RandomStream rng(15);
    Tensor<double> s({256});
    for (std::size_t i = 0; i < 256; ++i) s[i] = rng.uniform01();
    PatchMask m = advla::topk_mask(s, 0.1);

    FlatFeatureMask fm = advla::flatten_mask(m);
    CHECK(fm.bits == m.bits);
    CHECK(fm.k_count == 26);

    Tensor<double> expanded = advla::expand_feature_mask<double>(fm, 96);
    REQUIRE(expanded.shape() == std::vector<std::size_t>{256, 96});
    // Applied to an all-ones feature matrix: exactly K rows survive and
    // (N - K) * D entries are zeroed.
    std::size_t nonzero_rows = 0, zero_entries = 0;
    for (std::size_t r = 0; r < 256; ++r) {
        bool any = false;
        for (std::size_t c = 0; c < 96; ++c) {
            if (expanded.at2(r, c) != 0.0) any = true;
            else ++zero_entries;
        }
        if (any) ++nonzero_rows;
    }
    CHECK(nonzero_rows == 26);
    CHECK(zero_entries == (256 - 26) * 96);

    // Pixel mask and feature mask derived from one PatchMask agree on patches.
    EncoderConfig cfg;
    cfg.image_h = cfg.image_w = 128;
    cfg.patch = 8;  // 16x16 grid
    auto px = advla::mask_to_pixels<double>(m, cfg);
    for (std::size_t p = 0; p < 256; ++p) {
        const std::size_t y = (p / 16) * 8, x = (p % 16) * 8;
        CHECK((px.bits.at2(y, x) == 1.0) == (fm.bits[p] == 1));
    }
}
