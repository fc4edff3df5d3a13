#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "advla/encoder.hpp"
#include "support/fd_check.hpp"

using advla::AttentionAggregation;
using advla::AttentionRecord;
using advla::EncoderConfig;
using advla::RandomStream;
using advla::Tape;
using advla::Tensor;
using advla::Var;
using advla::VisionEncoder;
using testsupport::fd_gradient;
using testsupport::max_rel_error;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.blocks = 1;
    cfg.heads = 2;
    cfg.proj_dim = 8;
    cfg.rng_seed = 99;
    return cfg;
}

Tensor<double> random_image(const EncoderConfig& cfg, std::uint64_t seed) {
    RandomStream rng(seed);
    Tensor<double> img({3, cfg.image_h, cfg.image_w});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform01();
    return img;
}

}  // namespace

TEST_CASE("config invariants", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    cfg.patch = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), advla::ValidationError);

    cfg = tiny_config();
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), advla::ValidationError);

    // CLIP-scale sanity: 224x224 with 14-pixel patches is 256 tokens.
    EncoderConfig big;
    big.image_h = big.image_w = 224;
    big.patch = 14;
    CHECK(big.num_patches() == 256);
    CHECK(big.grid_h() == 16);
}

TEST_CASE("fan-based init bound", "[encoder]") {
    CHECK(advla::init_bound(16, 32) == Catch::Approx(std::sqrt(6.0 / 48.0)).epsilon(1e-15));
}

TEST_CASE("initialization is seeded and bounded", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    VisionEncoder<double> a(cfg);
    VisionEncoder<double> b(cfg);

    std::vector<double> flat_a, flat_b;
    a.for_each_weight([&](const Tensor<double>& t) {
        flat_a.insert(flat_a.end(), t.data().begin(), t.data().end());
    });
    b.for_each_weight([&](const Tensor<double>& t) {
        flat_b.insert(flat_b.end(), t.data().begin(), t.data().end());
    });
    CHECK(flat_a == flat_b);

    cfg.rng_seed = 100;
    VisionEncoder<double> c(cfg);
    std::vector<double> flat_c;
    c.for_each_weight([&](const Tensor<double>& t) {
        flat_c.insert(flat_c.end(), t.data().begin(), t.data().end());
    });
    CHECK(flat_a != flat_c);

    const double bound = advla::init_bound(cfg.patch_inputs(), cfg.embed_dim);
    CHECK(a.patch_weights().max_abs() <= bound);
}

TEST_CASE("encode determinism and attention normalization", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    VisionEncoder<double> enc(cfg);
    Tensor<double> img = random_image(cfg, 5);

    auto [e1, rec1] = enc.encode(img);
    auto [e2, rec2] = enc.encode(img);
    CHECK(e1.data() == e2.data());
    REQUIRE(rec1.blocks() == cfg.blocks);

    const std::size_t N = cfg.num_patches(), h = cfg.heads;
    for (const Tensor<double>& blk : rec1.per_block)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t q = 0; q < N; ++q) {
                double sum = 0.0;
                for (std::size_t k = 0; k < N; ++k) sum += blk[(i * N + q) * N + k];
                CHECK(std::abs(sum - 1.0) < 1e-10);
            }

    SECTION("shape and range validation") {
        Tensor<double> wrong({3, 4, 4});
        CHECK_THROWS_AS(enc.encode(wrong), advla::ValidationError);
        Tensor<double> hot = img;
        hot[0] = 1.5;
        CHECK_THROWS_AS(enc.encode(hot), advla::ValidationError);
    }
}

TEST_CASE("projection linearity", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    cfg.proj_bias = false;
    VisionEncoder<double> enc(cfg);

    Tensor<double> zeros({cfg.num_patches(), cfg.embed_dim});
    Tensor<double> f = enc.project(zeros);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(f[i] == 0.0);

    SECTION("bias row replicates when enabled") {
        EncoderConfig cb = tiny_config();
        VisionEncoder<double> encb(cb);
        // Load-style surgery: the last tensor visited is the projection bias.
        std::size_t total = 0;
        encb.for_each_weight([&total](Tensor<double>&) { ++total; });
        std::size_t i = 0;
        encb.for_each_weight([&](Tensor<double>& t) {
            if (++i == total)
                for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.25 * static_cast<double>(j);
        });
        Tensor<double> fb = encb.project(Tensor<double>({cb.num_patches(), cb.embed_dim}));
        for (std::size_t r = 0; r < cb.num_patches(); ++r)
            for (std::size_t j = 0; j < cb.proj_dim; ++j)
                CHECK(fb.at2(r, j) == 0.25 * static_cast<double>(j));
    }

    SECTION("identity weights pass tokens through when D == D_text") {
        EncoderConfig ci = tiny_config();
        ci.proj_bias = false;
        VisionEncoder<double> enci(ci);
        std::size_t total = 0;
        enci.for_each_weight([&total](Tensor<double>&) { ++total; });
        std::size_t i = 0;
        enci.for_each_weight([&](Tensor<double>& t) {
            if (++i == total - 1) {  // projection matrix
                for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.0;
                for (std::size_t d = 0; d < ci.embed_dim; ++d) t.at2(d, d) = 1.0;
            }
        });
        Tensor<double> e({ci.num_patches(), ci.embed_dim});
        RandomStream rng(8);
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = rng.uniform(-1.0, 1.0);
        Tensor<double> f2 = enci.project(e);
        CHECK(f2.data() == e.data());
    }
}

TEST_CASE("attention score aggregation", "[encoder]") {
    AttentionRecord<double> rec;

    SECTION("uniform attention gives uniform scores") {
        const std::size_t N = 4;
        rec.per_block.push_back(Tensor<double>::full({2, N, N}, 1.0 / N));
        Tensor<double> s = advla::attention_scores(rec, 0, AttentionAggregation::MeanHeadsMeanQueries);
        REQUIRE(s.size() == N);
        for (std::size_t k = 0; k < N; ++k) CHECK(s[k] == Catch::Approx(0.25).margin(1e-15));
    }

    SECTION("two-head mean matches manual average") {
        // Head 0 puts all mass on key 0; head 1 on key 1.
        const std::size_t N = 2;
        Tensor<double> a({2, N, N});
        a[(0 * N + 0) * N + 0] = 1.0;
        a[(0 * N + 1) * N + 0] = 1.0;
        a[(1 * N + 0) * N + 1] = 1.0;
        a[(1 * N + 1) * N + 1] = 1.0;
        rec.per_block.push_back(a);
        Tensor<double> s = advla::attention_scores(rec, -1, AttentionAggregation::MeanHeadsMeanQueries);
        CHECK(s[0] == Catch::Approx(0.5).margin(1e-15));
        CHECK(s[1] == Catch::Approx(0.5).margin(1e-15));
    }

    SECTION("score vector sums to one on real attention") {
        EncoderConfig cfg = tiny_config();
        VisionEncoder<double> enc(cfg);
        auto [e, record] = enc.encode(random_image(cfg, 21));
        Tensor<double> s =
            advla::attention_scores(record, -1, AttentionAggregation::MeanHeadsMeanQueries);
        CHECK(std::abs(s.sum() - 1.0) < 1e-8);
        for (std::size_t k = 0; k < s.size(); ++k) CHECK(s[k] >= 0.0);
    }

    SECTION("invalid requests are rejected") {
        rec.per_block.push_back(Tensor<double>::full({1, 2, 2}, 0.5));
        CHECK_THROWS_AS(advla::attention_scores(rec, 3, AttentionAggregation::MeanHeadsMeanQueries),
                        advla::ValidationError);
        CHECK_THROWS_AS(advla::attention_scores(rec, 0, AttentionAggregation::MeanHeadsClsQuery),
                        advla::ValidationError);
    }
}

TEST_CASE("end-to-end feature loss gradient passes finite differences", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    VisionEncoder<double> enc(cfg);
    Tensor<double> clean = random_image(cfg, 33);

    Tape<double> ref_tape;
    Tensor<double> f_clean =
        enc.forward_features(ref_tape, ref_tape.constant(clean), nullptr).value();

    // Evaluate away from the stationary point; interior pixel range keeps the
    // central-difference probes inside the encoder's valid [0, 1] domain.
    Tensor<double> probe = clean;
    RandomStream rng(77);
    for (std::size_t i = 0; i < probe.size(); ++i)
        probe[i] = advla::clamp_value(probe[i] + rng.uniform(-0.05, 0.05), 0.02, 0.98);

    const double eps = 1e-8;
    Tape<double> tape;
    Tensor<double> leaf = probe;
    leaf.set_requires_grad(true);
    Var<double> vi = tape.leaf(leaf);
    Var<double> f = enc.forward_features(tape, vi, nullptr);
    Var<double> loss = affine(cosine_similarity(f, tape.constant(f_clean), eps), -1.0, 1.0);
    tape.backward(loss);
    Tensor<double> analytic = tape.grad(vi);

    auto loss_fn = [&](const Tensor<double>& x) {
        Tape<double> t2;
        Var<double> f2 = enc.forward_features(t2, t2.constant(x), nullptr);
        return affine(cosine_similarity(f2, t2.constant(f_clean), eps), -1.0, 1.0).value()[0];
    };
    CHECK(max_rel_error(analytic, fd_gradient(loss_fn, probe)) < 1e-4);
}

TEST_CASE("weights serialize losslessly", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    VisionEncoder<double> enc(cfg);
    const std::string path = (std::filesystem::temp_directory_path() / "advla_enc_test.bin").string();
    advla::save_encoder(enc, path);
    VisionEncoder<double> loaded = advla::load_encoder<double>(path);

    CHECK(loaded.config().embed_dim == cfg.embed_dim);
    CHECK(loaded.config().rng_seed == cfg.rng_seed);

    Tensor<double> img = random_image(cfg, 3);
    auto [e1, r1] = enc.encode(img);
    auto [e2, r2] = loaded.encode(img);
    CHECK(e1.data() == e2.data());

    SECTION("garbage file is rejected") {
        std::FILE* fp = std::fopen(path.c_str(), "wb");
        std::fputs("not an encoder", fp);
        std::fclose(fp);
        CHECK_THROWS_AS(advla::load_encoder<double>(path), advla::ValidationError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("float instantiation stays finite", "[encoder]") {
    EncoderConfig cfg = tiny_config();
    VisionEncoder<float> enc(cfg);
    Tensor<float> img({3, cfg.image_h, cfg.image_w});
    RandomStream rng(6);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(rng.uniform01());
    auto [e, rec] = enc.encode(img);
    CHECK(e.all_finite());
}
