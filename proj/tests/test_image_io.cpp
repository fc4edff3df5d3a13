#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "advla/image_io.hpp"
#include "support/fd_check.hpp"

using advla::RandomStream;
using advla::Tensor;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("quantization rounds half to even", "[imageio]") {
    CHECK(advla::quantize_byte(0.0) == 0);
    CHECK(advla::quantize_byte(1.0) == 255);
    CHECK(advla::quantize_byte(-0.2) == 0);
    CHECK(advla::quantize_byte(1.7) == 255);
    CHECK(advla::quantize_byte(0.5) == 128);            // 127.5 -> even 128
    CHECK(advla::quantize_byte(128.5 / 255.0) == 128);  // 128.5 -> even 128
}

TEST_CASE("ppm round-trip is byte-identical", "[imageio]") {
    RandomStream rng(12);
    Tensor<double> img({3, 6, 5});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform01();

    const std::string p1 = tmp_path("advla_io_a.ppm");
    const std::string p2 = tmp_path("advla_io_b.ppm");
    advla::write_ppm(p1, img);
    Tensor<double> loaded = advla::read_ppm<double>(p1);
    REQUIRE(loaded.shape() == img.shape());
    advla::write_ppm(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));

    // Loaded pixels are the quantized originals rescaled to [0, 1].
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(loaded[i] == static_cast<double>(advla::quantize_byte(img[i])) / 255.0);

    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("ppm parser accepts comments and rejects malformed input", "[imageio]") {
    const std::string p = tmp_path("advla_io_c.ppm");
    {
        std::ofstream os(p, std::ios::binary);
        os << "P6\n# a comment\n2 1\n255\n";
        const unsigned char px[6] = {255, 0, 0, 0, 255, 0};
        os.write(reinterpret_cast<const char*>(px), 6);
    }
    Tensor<double> img = advla::read_ppm<double>(p);
    CHECK(img.dim(1) == 1);
    CHECK(img.dim(2) == 2);
    CHECK(img[(0 * 1 + 0) * 2 + 0] == 1.0);  // red channel of pixel 0

    {
        std::ofstream os(p, std::ios::binary);
        os << "P5\n2 1\n255\n??";
    }
    CHECK_THROWS_AS(advla::read_ppm<double>(p), advla::ValidationError);

    {
        std::ofstream os(p, std::ios::binary);
        os << "P6\n2 1\n65535\n";
        os.write("\0\0\0\0\0\0\0\0\0\0\0\0", 12);
    }
    CHECK_THROWS_AS(advla::read_ppm<double>(p), advla::ValidationError);

    {
        std::ofstream os(p, std::ios::binary);
        os << "P6\n4 4\n255\nshort";
    }
    CHECK_THROWS_AS(advla::read_ppm<double>(p), advla::ValidationError);
    std::filesystem::remove(p);
}

TEST_CASE("pgm and pbm writers emit well-formed files", "[imageio]") {
    const std::string pgm = tmp_path("advla_io.pgm");
    Tensor<double> map({2, 3}, {0.0, 0.5, 1.0, 1.5, 2.0, 0.25});
    advla::write_pgm(pgm, map);  // auto-scaled so 2.0 -> 255
    std::string bytes = slurp(pgm);
    CHECK(bytes.substr(0, 9) == "P5\n3 2\n25");
    CHECK(bytes.size() == std::string("P5\n3 2\n255\n").size() + 6);
    CHECK(static_cast<unsigned char>(bytes.back()) == advla::quantize_byte(0.125));

    const std::string pbm = tmp_path("advla_io.pbm");
    Tensor<double> bits({2, 10});
    bits[0] = 1.0;   // row 0, col 0
    bits[19] = 1.0;  // row 1, col 9
    advla::write_pbm(pbm, bits);
    bytes = slurp(pbm);
    const std::string header = "P4\n10 2\n";
    REQUIRE(bytes.size() == header.size() + 4);  // two bytes per row
    CHECK(static_cast<unsigned char>(bytes[header.size()]) == 0x80);      // col 0
    CHECK(static_cast<unsigned char>(bytes[header.size() + 3]) == 0x40);  // col 9
    std::filesystem::remove(pgm);
    std::filesystem::remove(pbm);
}
