#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "advla/autodiff.hpp"
#include "advla/common.hpp"
#include "advla/encoder.hpp"
#include "advla/guidance.hpp"
#include "advla/tensor.hpp"

namespace advla {

enum class Strategy { Base, AttentionWeighted, TopKMasked, TopKLoss };
enum class InitKind { Uniform, Gaussian };

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Base: return "BASE";
        case Strategy::AttentionWeighted: return "AW";
        case Strategy::TopKMasked: return "TKM";
        case Strategy::TopKLoss: return "TKL";
    }
    return "?";
}

struct AttackConfig {
    double epsilon = 4.0 / 255.0;  // L-infinity budget
    double alpha = 1.0 / 255.0;    // step size
    std::size_t iterations = 6;
    Strategy strategy = Strategy::Base;
    double topk_ratio = 0.1;
    InitKind init = InitKind::Uniform;
    double gaussian_sigma = 0.0;  // <= 0 means epsilon / 2
    double loss_eps = 1e-8;
    std::uint64_t rng_seed = 0;
    int attention_block = -1;  // -1 = final block
    AttentionAggregation aggregation = AttentionAggregation::MeanHeadsMeanQueries;
    bool recompute_mask_per_iter = false;

    double sigma() const { return gaussian_sigma > 0.0 ? gaussian_sigma : epsilon / 2.0; }

    void validate() const {
        require(epsilon >= 0.0 && epsilon <= 1.0,
                "attack: epsilon must lie in [0, 1], got " + std::to_string(epsilon));
        require(alpha >= 0.0 && alpha <= epsilon,
                "attack: alpha must lie in [0, epsilon], got " + std::to_string(alpha));
        require(topk_ratio > 0.0 && topk_ratio <= 1.0,
                "attack: topk_ratio must lie in (0, 1], got " + std::to_string(topk_ratio));
        require(loss_eps > 0.0, "attack: loss_eps must be positive");
    }
};

/// Attention-derived constants for one frame. Computed once from the clean
/// image and held fixed across the PGD iterations (unless recomputation is
/// explicitly enabled); the update treats them as constants, never as part of
/// the differentiated graph.
template <typename S>
struct GuidanceArtifacts {
    std::optional<Tensor<S>> scores;              // [N]
    std::optional<PixelWeightMap<S>> weight_map;  // AW
    std::optional<PixelMask<S>> pixel_mask;       // TKM
    std::optional<FlatFeatureMask> feature_mask;  // TKL
};

template <typename S>
struct CleanReference {
    Tensor<S> features;  // [N x D_text], detached
    AttentionRecord<S> attention;
};

template <typename S>
struct AttackResult {
    Tensor<S> adversarial;       // [3 x H x W], in [0, 1]
    Tensor<S> delta;             // adversarial - clean
    std::vector<S> loss_trace;   // T+1 entries
    std::vector<double> iter_seconds;  // T entries
    double modified_patch_fraction = 0.0;
    S max_abs_delta = 0;
    Strategy strategy = Strategy::Base;
    GuidanceArtifacts<S> artifacts;
};

/// Random perturbation draw; the Gaussian variant is clipped into the budget.
template <typename S>
Tensor<S> init_perturbation(const std::vector<std::size_t>& shape, const AttackConfig& cfg,
                            RandomStream& rng) {
    Tensor<S> d(shape);
    const double e = cfg.epsilon;
    if (cfg.init == InitKind::Uniform) {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<S>(rng.uniform(-e, e));
    } else {
        const double s = cfg.sigma();
        for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = static_cast<S>(clamp_value(rng.normal(0.0, s), -e, e));
    }
    return d;
}

/// One clean forward per frame: reference features (detached) plus the
/// attention used for guidance. The reference stays fixed for the frame.
template <typename S>
CleanReference<S> compute_clean_reference(const VisionEncoder<S>& enc, const Tensor<S>& image) {
    Tape<S> tape;
    CleanReference<S> ref;
    Var<S> f = enc.forward_features(tape, tape.constant(image), &ref.attention);
    ref.features = f.value();
    return ref;
}

/// Build the artifacts a strategy needs from captured attention.
template <typename S>
GuidanceArtifacts<S> build_artifacts(const VisionEncoder<S>& enc, const AttentionRecord<S>& rec,
                                     const AttackConfig& cfg) {
    GuidanceArtifacts<S> art;
    if (cfg.strategy == Strategy::Base) return art;
    Tensor<S> scores = attention_scores(rec, cfg.attention_block, cfg.aggregation);
    switch (cfg.strategy) {
        case Strategy::AttentionWeighted: {
            require(enc.config().square_grid(), "AW: patch grid must be square for resizing");
            Tensor<S> grid = scores_to_grid(scores);
            art.weight_map = bicubic_resize(grid, enc.config().image_h, enc.config().image_w);
            break;
        }
        case Strategy::TopKMasked: {
            PatchMask pm = topk_mask(scores, cfg.topk_ratio);
            art.pixel_mask = mask_to_pixels<S>(pm, enc.config());
            break;
        }
        case Strategy::TopKLoss: {
            PatchMask pm = topk_mask(scores, cfg.topk_ratio);
            art.feature_mask = flatten_mask(pm);
            break;
        }
        case Strategy::Base: break;
    }
    art.scores = std::move(scores);
    return art;
}

/// Post-hoc gradient shaping: AW multiplies by the resized attention map,
/// TKM by the binary pixel mask (both broadcast over channels); BASE and TKL
/// pass the gradient through unchanged.
template <typename S>
Tensor<S> strategy_transform(const Tensor<S>& grad, const GuidanceArtifacts<S>& art,
                             Strategy strategy) {
    if (strategy == Strategy::Base || strategy == Strategy::TopKLoss) return grad;
    if (grad.rank() != 3)
        throw ValidationError("strategy_transform: [C x H x W] gradient required");
    const Tensor<S>* map = nullptr;
    if (strategy == Strategy::AttentionWeighted) {
        if (!art.weight_map) throw ValidationError("AW strategy requires a pixel weight map");
        map = &art.weight_map->values;
    } else {
        if (!art.pixel_mask) throw ValidationError("TKM strategy requires a pixel mask");
        map = &art.pixel_mask->bits;
    }
    const std::size_t C = grad.dim(0), H = grad.dim(1), W = grad.dim(2);
    if (map->dim(0) != H || map->dim(1) != W)
        throw ValidationError("strategy_transform: map " + map->shape_string() +
                              " does not match gradient " + grad.shape_string());
    Tensor<S> out(grad.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i)
            out[c * H * W + i] = grad[c * H * W + i] * (*map)[i];
    return out;
}

/// Masked cosine loss (graph form): 1 - sim(F_t . M, F_clean . M). Entries of
/// unselected patches contribute exactly zero.
template <typename S>
Var<S> tkl_loss(Tape<S>& tape, Var<S> f_t, Var<S> f_clean, const FlatFeatureMask& mask, S eps) {
    if (mask.k_count == 0)
        throw ValidationError("tkl_loss: all-zero feature mask leaves the loss undefined");
    const Tensor<S>& F = f_t.value();
    if (F.rank() != 2 || F.dim(0) != mask.bits.size())
        throw ValidationError("tkl_loss: feature rows " + F.shape_string() +
                              " do not match mask length " + std::to_string(mask.bits.size()));
    Var<S> m = tape.constant(expand_feature_mask<S>(mask, F.dim(1)));
    Var<S> sim = cosine_similarity(mul(f_t, m), mul(f_clean, m), eps);
    return affine(sim, S(-1), S(1));
}

/// Value-level masked cosine loss for direct checks.
template <typename S>
S tkl_loss_value(const Tensor<S>& f_t, const Tensor<S>& f_clean, const FlatFeatureMask& mask,
                 S eps) {
    Tape<S> tape;
    return tkl_loss(tape, tape.constant(f_t), tape.constant(f_clean), mask, eps).value()[0];
}

/// Full-feature cosine loss (graph form): 1 - sim over flattened features.
template <typename S>
Var<S> feature_loss(Tape<S>& tape, Var<S> f_t, Var<S> f_clean, S eps) {
    return affine(cosine_similarity(f_t, f_clean, eps), S(-1), S(1));
}

/// Mutable per-frame PGD state.
template <typename S>
struct AttackState {
    Tensor<S> clean;      // [3 x H x W]
    Tensor<S> f_clean;    // detached reference features
    Tensor<S> delta;      // accumulated perturbation
    Tensor<S> adversarial;  // clip01(clean + delta)
    std::vector<S> losses;
    std::vector<double> seconds;
};

namespace detail {

template <typename S>
Tensor<S> clip01_sum(const Tensor<S>& clean, const Tensor<S>& delta) {
    Tensor<S> out(clean.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = clamp_value(clean[i] + delta[i], S(0), S(1));
    return out;
}

template <typename S>
S loss_of(const VisionEncoder<S>& enc, const Tensor<S>& image, const Tensor<S>& f_clean,
          const GuidanceArtifacts<S>& art, const AttackConfig& cfg) {
    Tape<S> tape;
    Var<S> f_t = enc.forward_features(tape, tape.constant(image), nullptr);
    Var<S> fc = tape.constant(f_clean);
    Var<S> loss = (cfg.strategy == Strategy::TopKLoss)
                      ? tkl_loss(tape, f_t, fc, *art.feature_mask, static_cast<S>(cfg.loss_eps))
                      : feature_loss(tape, f_t, fc, static_cast<S>(cfg.loss_eps));
    return loss.value()[0];
}

}  // namespace detail

/// One PGD iteration: gradient of the strategy's loss at the current iterate,
/// strategy transform, signed ascent step (sign(0) = 0), budget clip, image
/// clip. Appends the evaluated loss and the step's wall seconds.
template <typename S>
void pgd_step(AttackState<S>& state, const VisionEncoder<S>& enc, const AttackConfig& cfg,
              GuidanceArtifacts<S>& art) {
    const auto t0 = std::chrono::steady_clock::now();

    Tape<S> tape;
    Tensor<S> input = state.adversarial;
    input.set_requires_grad(true);
    Var<S> image = tape.leaf(std::move(input));
    AttentionRecord<S> rec;
    const bool capture = cfg.recompute_mask_per_iter && cfg.strategy != Strategy::Base;
    Var<S> f_t = enc.forward_features(tape, image, capture ? &rec : nullptr);
    if (capture) art = build_artifacts(enc, rec, cfg);

    Var<S> fc = tape.constant(state.f_clean);
    Var<S> loss = (cfg.strategy == Strategy::TopKLoss)
                      ? tkl_loss(tape, f_t, fc, *art.feature_mask, static_cast<S>(cfg.loss_eps))
                      : feature_loss(tape, f_t, fc, static_cast<S>(cfg.loss_eps));
    state.losses.push_back(loss.value()[0]);

    tape.backward(loss);
    Tensor<S> grad = tape.grad(image);
    if (!grad.all_finite())
        throw NumericError("pgd_step: non-finite gradient at iteration " +
                           std::to_string(state.seconds.size()));
    grad = strategy_transform(grad, art, cfg.strategy);

    const S alpha = static_cast<S>(cfg.alpha);
    const S eps = static_cast<S>(cfg.epsilon);
    for (std::size_t i = 0; i < state.delta.size(); ++i) {
        state.delta[i] = clamp_value(state.delta[i] + alpha * sign_of(grad[i]), -eps, eps);
    }
    state.adversarial = detail::clip01_sum(state.clean, state.delta);

    const auto t1 = std::chrono::steady_clock::now();
    state.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
}

/// Fraction of patches whose pixels differ from the clean image.
template <typename S>
double modified_patch_fraction(const Tensor<S>& clean, const Tensor<S>& adv,
                               const EncoderConfig& cfg) {
    const std::size_t P = cfg.patch, gh = cfg.grid_h(), gw = cfg.grid_w();
    const std::size_t H = cfg.image_h, W = cfg.image_w;
    std::size_t touched = 0;
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            bool diff = false;
            for (std::size_t c = 0; c < 3 && !diff; ++c)
                for (std::size_t py = 0; py < P && !diff; ++py)
                    for (std::size_t px = 0; px < P && !diff; ++px) {
                        const std::size_t idx = (c * H + gy * P + py) * W + gx * P + px;
                        diff = clean[idx] != adv[idx];
                    }
            if (diff) ++touched;
        }
    return static_cast<double>(touched) / static_cast<double>(gh * gw);
}

/// Full single-frame attack with explicit guidance artifacts (tests and
/// ablations inject synthetic maps/masks here).
template <typename S>
AttackResult<S> run_attack_with_artifacts(const VisionEncoder<S>& enc, const Tensor<S>& image,
                                          const AttackConfig& cfg, const Tensor<S>& f_clean,
                                          GuidanceArtifacts<S> art) {
    cfg.validate();
    AttackState<S> state;
    state.clean = image;
    state.f_clean = f_clean;

    RandomStream rng(cfg.rng_seed);
    state.delta = init_perturbation<S>(image.shape(), cfg, rng);
    if (cfg.strategy == Strategy::TopKMasked) {
        // Mask the random init too: untouched patches must stay bit-clean.
        if (!art.pixel_mask) throw ValidationError("TKM strategy requires a pixel mask");
        state.delta = strategy_transform(state.delta, art, cfg.strategy);
    }
    state.adversarial = detail::clip01_sum(state.clean, state.delta);

    for (std::size_t t = 0; t < cfg.iterations; ++t) pgd_step(state, enc, cfg, art);
    state.losses.push_back(detail::loss_of(enc, state.adversarial, state.f_clean, art, cfg));

    AttackResult<S> res;
    res.adversarial = state.adversarial;
    res.delta = Tensor<S>(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i)
        res.delta[i] = state.adversarial[i] - image[i];
    res.loss_trace = std::move(state.losses);
    res.iter_seconds = std::move(state.seconds);
    res.modified_patch_fraction = modified_patch_fraction(image, state.adversarial, enc.config());
    res.max_abs_delta = res.delta.max_abs();
    res.strategy = cfg.strategy;
    res.artifacts = std::move(art);
    return res;
}

/// Single-frame ADVLA attack: clean reference once, guidance artifacts once,
/// then the configured number of PGD iterations.
template <typename S>
AttackResult<S> run_attack(const VisionEncoder<S>& enc, const Tensor<S>& image,
                           const AttackConfig& cfg) {
    cfg.validate();
    CleanReference<S> ref = compute_clean_reference(enc, image);
    GuidanceArtifacts<S> art = build_artifacts(enc, ref.attention, cfg);
    return run_attack_with_artifacts(enc, image, cfg, ref.features, std::move(art));
}

}  // namespace advla
