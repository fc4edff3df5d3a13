#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "advla/autodiff.hpp"
#include "advla/common.hpp"
#include "advla/tensor.hpp"

namespace advla {

/// How per-patch attention scores are produced from a block's attention maps.
enum class AttentionAggregation {
    MeanHeadsMeanQueries,  // average attention over heads and query tokens
    MeanHeadsClsQuery,     // class-token query row; unsupported without a class token
};

struct EncoderConfig {
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::size_t patch = 8;
    std::size_t embed_dim = 64;
    std::size_t blocks = 4;
    std::size_t heads = 4;
    std::size_t proj_dim = 96;
    bool proj_bias = true;
    std::uint32_t rng_seed = 2024;

    std::size_t grid_h() const { return image_h / patch; }
    std::size_t grid_w() const { return image_w / patch; }
    std::size_t num_patches() const { return grid_h() * grid_w(); }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t mlp_dim() const { return 4 * embed_dim; }
    std::size_t patch_inputs() const { return 3 * patch * patch; }

    void validate() const {
        require(image_h >= 1 && image_w >= 1 && patch >= 1, "encoder: dimensions must be >= 1");
        require(image_h % patch == 0 && image_w % patch == 0,
                "encoder: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                    " not divisible by patch size " + std::to_string(patch));
        require(embed_dim >= 1 && blocks >= 1 && heads >= 1 && proj_dim >= 1,
                "encoder: embed_dim, blocks, heads, proj_dim must be >= 1");
        require(embed_dim % heads == 0, "encoder: embed_dim " + std::to_string(embed_dim) +
                                            " not divisible by heads " + std::to_string(heads));
        require(embed_dim >= 2, "encoder: embed_dim must be >= 2 for layer normalization");
    }

    /// Square patch grid is required wherever scores are reshaped to g x g.
    bool square_grid() const { return grid_h() == grid_w(); }
};

/// Per-block attention tensors [heads x N x N] captured during a forward pass.
template <typename S>
struct AttentionRecord {
    std::vector<Tensor<S>> per_block;

    std::size_t blocks() const { return per_block.size(); }
};

/// Uniform fan-based bound: sqrt(6 / (fan_in + fan_out)).
inline double init_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Frozen patch-transformer backbone plus linear projection head. Weights are
/// fixed at construction; forward passes never mutate the encoder, so one
/// instance is safely shared across threads.
template <typename S>
class VisionEncoder {
public:
    struct Block {
        Tensor<S> ln1_gain, ln1_bias;
        Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<S> ln2_gain, ln2_bias;
        Tensor<S> w1, b1, w2, b2;
    };

    explicit VisionEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        RandomStream rng(cfg_.rng_seed);
        const std::size_t D = cfg_.embed_dim, N = cfg_.num_patches();
        patch_w_ = draw_matrix(rng, cfg_.patch_inputs(), D);
        patch_b_ = Tensor<S>({D});
        pos_ = draw_matrix(rng, N, D);
        blocks_.reserve(cfg_.blocks);
        for (std::size_t b = 0; b < cfg_.blocks; ++b) {
            Block blk;
            blk.ln1_gain = Tensor<S>::full({D}, S(1));
            blk.ln1_bias = Tensor<S>({D});
            blk.wq = draw_matrix(rng, D, D);
            blk.bq = Tensor<S>({D});
            blk.wk = draw_matrix(rng, D, D);
            blk.bk = Tensor<S>({D});
            blk.wv = draw_matrix(rng, D, D);
            blk.bv = Tensor<S>({D});
            blk.wo = draw_matrix(rng, D, D);
            blk.bo = Tensor<S>({D});
            blk.ln2_gain = Tensor<S>::full({D}, S(1));
            blk.ln2_bias = Tensor<S>({D});
            blk.w1 = draw_matrix(rng, D, cfg_.mlp_dim());
            blk.b1 = Tensor<S>({cfg_.mlp_dim()});
            blk.w2 = draw_matrix(rng, cfg_.mlp_dim(), D);
            blk.b2 = Tensor<S>({D});
            blocks_.push_back(std::move(blk));
        }
        proj_w_ = draw_matrix(rng, D, cfg_.proj_dim);
        proj_b_ = Tensor<S>({cfg_.proj_dim});
    }

    const EncoderConfig& config() const { return cfg_; }

    /// Graph-building forward of the backbone. The image var must hold a
    /// [3 x H x W] tensor with values in [0, 1]. Returns the final-block token
    /// matrix [N x D] and, when record != nullptr, the captured attention.
    Var<S> forward_tokens(Tape<S>& tape, Var<S> image, AttentionRecord<S>* record) const {
        validate_image(image.value());
        const std::size_t D = cfg_.embed_dim, N = cfg_.num_patches();
        const std::size_t h = cfg_.heads, dh = cfg_.head_dim();
        if (record) record->per_block.clear();

        Var<S> tokens = extract_patches(image, cfg_.patch);               // [N, 3P^2]
        tokens = matmul(tokens, tape.constant(patch_w_));                 // [N, D]
        tokens = add_rowvec(tokens, tape.constant(patch_b_));
        tokens = add(tokens, tape.constant(pos_));

        const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
        for (const Block& blk : blocks_) {
            Var<S> x1 = layernorm(tokens, tape.constant(blk.ln1_gain), tape.constant(blk.ln1_bias));
            Var<S> q = add_rowvec(matmul(x1, tape.constant(blk.wq)), tape.constant(blk.bq));
            Var<S> k = add_rowvec(matmul(x1, tape.constant(blk.wk)), tape.constant(blk.bk));
            Var<S> v = add_rowvec(matmul(x1, tape.constant(blk.wv)), tape.constant(blk.bv));

            Tensor<S> block_attn({h, N, N});
            std::vector<Var<S>> head_outs;
            head_outs.reserve(h);
            for (std::size_t i = 0; i < h; ++i) {
                Var<S> qi = slice_cols(q, i * dh, dh);
                Var<S> ki = slice_cols(k, i * dh, dh);
                Var<S> vi = slice_cols(v, i * dh, dh);
                Var<S> logits = scale(matmul(qi, transpose(ki)), inv_sqrt_dh);  // [N, N]
                Var<S> attn = softmax_rows(logits);
                if (record) {
                    const auto& av = attn.value().data();
                    std::copy(av.begin(), av.end(), block_attn.raw() + i * N * N);
                }
                head_outs.push_back(matmul(attn, vi));  // [N, dh]
            }
            if (record) record->per_block.push_back(std::move(block_attn));

            Var<S> heads_cat = h == 1 ? head_outs[0] : concat_cols(head_outs);
            Var<S> attn_out =
                add_rowvec(matmul(heads_cat, tape.constant(blk.wo)), tape.constant(blk.bo));
            tokens = add(tokens, attn_out);

            Var<S> x2 = layernorm(tokens, tape.constant(blk.ln2_gain), tape.constant(blk.ln2_bias));
            Var<S> m = add_rowvec(matmul(x2, tape.constant(blk.w1)), tape.constant(blk.b1));
            m = gelu(m);
            m = add_rowvec(matmul(m, tape.constant(blk.w2)), tape.constant(blk.b2));
            tokens = add(tokens, m);
        }
        return tokens;
    }

    /// Graph-building projection into the text-aligned feature space.
    Var<S> forward_projection(Tape<S>& tape, Var<S> tokens) const {
        const Tensor<S>& E = tokens.value();
        if (E.rank() != 2 || E.dim(0) != cfg_.num_patches() || E.dim(1) != cfg_.embed_dim)
            throw ValidationError("project: token matrix " + E.shape_string() + " does not match " +
                                  "config [" + std::to_string(cfg_.num_patches()) + "x" +
                                  std::to_string(cfg_.embed_dim) + "]");
        Var<S> f = matmul(tokens, tape.constant(proj_w_));
        if (cfg_.proj_bias) f = add_rowvec(f, tape.constant(proj_b_));
        return f;
    }

    /// Image -> projected features on an existing tape (the attack path).
    Var<S> forward_features(Tape<S>& tape, Var<S> image, AttentionRecord<S>* record) const {
        return forward_projection(tape, forward_tokens(tape, image, record));
    }

    /// Plain-value encode; builds a private tape internally.
    std::pair<Tensor<S>, AttentionRecord<S>> encode(const Tensor<S>& image) const {
        Tape<S> tape;
        AttentionRecord<S> rec;
        Var<S> e = forward_tokens(tape, tape.constant(image), &rec);
        return {e.value(), std::move(rec)};
    }

    /// Plain-value projection of a token matrix.
    Tensor<S> project(const Tensor<S>& tokens) const {
        Tape<S> tape;
        return forward_projection(tape, tape.constant(tokens)).value();
    }

    // Weight access for serialization and tests.
    const Tensor<S>& patch_weights() const { return patch_w_; }
    const Tensor<S>& positional() const { return pos_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    const Tensor<S>& projection_weights() const { return proj_w_; }
    const Tensor<S>& projection_bias() const { return proj_b_; }

    /// Visits every weight tensor in declaration order.
    template <typename Fn>
    void for_each_weight(Fn&& fn) {
        fn(patch_w_);
        fn(patch_b_);
        fn(pos_);
        for (Block& blk : blocks_) {
            fn(blk.ln1_gain);
            fn(blk.ln1_bias);
            fn(blk.wq);
            fn(blk.bq);
            fn(blk.wk);
            fn(blk.bk);
            fn(blk.wv);
            fn(blk.bv);
            fn(blk.wo);
            fn(blk.bo);
            fn(blk.ln2_gain);
            fn(blk.ln2_bias);
            fn(blk.w1);
            fn(blk.b1);
            fn(blk.w2);
            fn(blk.b2);
        }
        fn(proj_w_);
        fn(proj_b_);
    }

    template <typename Fn>
    void for_each_weight(Fn&& fn) const {
        const_cast<VisionEncoder*>(this)->for_each_weight(
            [&fn](Tensor<S>& t) { fn(static_cast<const Tensor<S>&>(t)); });
    }

private:
    void validate_image(const Tensor<S>& image) const {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_h ||
            image.dim(2) != cfg_.image_w)
            throw ValidationError("encode: image " + image.shape_string() + " does not match [3x" +
                                  std::to_string(cfg_.image_h) + "x" + std::to_string(cfg_.image_w) +
                                  "]");
        for (std::size_t i = 0; i < image.size(); ++i)
            if (!(image[i] >= S(0) && image[i] <= S(1)))
                throw ValidationError("encode: pixel values must lie in [0, 1]");
    }

    static Tensor<S> draw_matrix(RandomStream& rng, std::size_t fan_in, std::size_t fan_out) {
        const double s = init_bound(fan_in, fan_out);
        Tensor<S> t({fan_in, fan_out});
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<S>(rng.uniform(-s, s));
        return t;
    }

    EncoderConfig cfg_;
    Tensor<S> patch_w_, patch_b_, pos_;
    std::vector<Block> blocks_;
    Tensor<S> proj_w_, proj_b_;
};

template <typename S>
VisionEncoder<S> init_encoder(const EncoderConfig& cfg) {
    return VisionEncoder<S>(cfg);
}

/// Reduce one block's captured attention to a per-key-patch score vector.
/// block_index may be negative to count from the back (-1 = final block).
template <typename S>
Tensor<S> attention_scores(const AttentionRecord<S>& rec, int block_index,
                           AttentionAggregation agg) {
    if (rec.per_block.empty()) throw ValidationError("attention_scores: empty record");
    const int nb = static_cast<int>(rec.per_block.size());
    int b = block_index < 0 ? nb + block_index : block_index;
    if (b < 0 || b >= nb)
        throw ValidationError("attention_scores: block index " + std::to_string(block_index) +
                              " out of range for " + std::to_string(nb) + " blocks");
    if (agg == AttentionAggregation::MeanHeadsClsQuery)
        throw ValidationError("attention_scores: class-token aggregation requested but the "
                              "encoder has no class token");
    const Tensor<S>& A = rec.per_block[static_cast<std::size_t>(b)];
    const std::size_t h = A.dim(0), N = A.dim(1);
    Tensor<S> scores({N});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t q = 0; q < N; ++q)
            for (std::size_t k = 0; k < N; ++k)
                scores[k] += A[(i * N + q) * N + k];
    const S inv = S(1) / static_cast<S>(h * N);
    for (std::size_t k = 0; k < N; ++k) scores[k] *= inv;
    return scores;
}

// ---------------------------------------------------------------------------
// Weight serialization: little-endian header + 64-bit float blobs in
// declaration order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kEncoderMagic[8] = {'A', 'D', 'V', 'L', 'A', 'E', 'N', 'C'};
constexpr std::uint32_t kEncoderVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

template <typename S>
void save_encoder(const VisionEncoder<S>& enc, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericError("cannot open " + path + " for writing");
    os.write(detail::kEncoderMagic, 8);
    detail::put_u32(os, detail::kEncoderVersion);
    const EncoderConfig& c = enc.config();
    for (std::uint32_t v :
         {static_cast<std::uint32_t>(c.image_h), static_cast<std::uint32_t>(c.image_w),
          static_cast<std::uint32_t>(c.patch), static_cast<std::uint32_t>(c.embed_dim),
          static_cast<std::uint32_t>(c.blocks), static_cast<std::uint32_t>(c.heads),
          static_cast<std::uint32_t>(c.proj_dim), static_cast<std::uint32_t>(c.proj_bias ? 1 : 0),
          c.rng_seed})
        detail::put_u32(os, v);
    enc.for_each_weight([&os](const Tensor<S>& t) {
        for (std::size_t i = 0; i < t.size(); ++i)
            detail::put_f64(os, static_cast<double>(t[i]));
    });
    if (!os) throw NumericError("write failure on " + path);
}

template <typename S>
VisionEncoder<S> load_encoder(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open encoder file " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kEncoderMagic, 8) != 0)
        throw ValidationError(path + " is not an encoder weight file");
    const std::uint32_t version = detail::get_u32(is);
    if (version != detail::kEncoderVersion)
        throw ValidationError("unsupported encoder file version " + std::to_string(version));
    EncoderConfig c;
    c.image_h = detail::get_u32(is);
    c.image_w = detail::get_u32(is);
    c.patch = detail::get_u32(is);
    c.embed_dim = detail::get_u32(is);
    c.blocks = detail::get_u32(is);
    c.heads = detail::get_u32(is);
    c.proj_dim = detail::get_u32(is);
    c.proj_bias = detail::get_u32(is) != 0;
    c.rng_seed = detail::get_u32(is);
    VisionEncoder<S> enc(c);
    enc.for_each_weight([&is](Tensor<S>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(detail::get_f64(is));
    });
    if (!is) throw ValidationError("truncated encoder file " + path);
    return enc;
}

}  // namespace advla
