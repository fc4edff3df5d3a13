#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "advla/attack.hpp"
#include "advla/common.hpp"
#include "advla/encoder.hpp"
#include "advla/tensor.hpp"

namespace advla {

/// Evaluation condition: unattacked, uniform noise at the budget, or one of
/// the attack strategies.
enum class Condition { Clean, Random, Base, AttentionWeighted, TopKMasked, TopKLoss };

inline std::string condition_name(Condition c) {
    switch (c) {
        case Condition::Clean: return "CLEAN";
        case Condition::Random: return "RANDOM";
        case Condition::Base: return "ADVLA";
        case Condition::AttentionWeighted: return "ADVLA-AW";
        case Condition::TopKMasked: return "ADVLA-TKM";
        case Condition::TopKLoss: return "ADVLA-TKL";
    }
    return "?";
}

inline bool condition_is_attack(Condition c) {
    return c != Condition::Clean && c != Condition::Random;
}

inline Strategy condition_strategy(Condition c) {
    switch (c) {
        case Condition::AttentionWeighted: return Strategy::AttentionWeighted;
        case Condition::TopKMasked: return Strategy::TopKMasked;
        case Condition::TopKLoss: return Strategy::TopKLoss;
        default: return Strategy::Base;
    }
}

inline Condition parse_condition(const std::string& name) {
    if (name == "CLEAN") return Condition::Clean;
    if (name == "RANDOM") return Condition::Random;
    if (name == "ADVLA" || name == "BASE") return Condition::Base;
    if (name == "ADVLA-AW" || name == "AW") return Condition::AttentionWeighted;
    if (name == "ADVLA-TKM" || name == "TKM") return Condition::TopKMasked;
    if (name == "ADVLA-TKL" || name == "TKL") return Condition::TopKLoss;
    throw ValidationError("unknown condition '" + name + "'");
}

// ---------------------------------------------------------------------------
// Scenes and rendering
// ---------------------------------------------------------------------------

/// Reaching-task scene: an agent blob, a goal blob, optional distractors on a
/// flat background. Positions are in the unit square.
struct SceneSpec {
    struct Blob {
        double x = 0.5, y = 0.5;  // center, unit coordinates
        double radius_px = 4.0;
        double shade = 0.5;
    };

    double agent_x = 0.25, agent_y = 0.25;
    double goal_x = 0.75, goal_y = 0.75;
    double agent_radius_px = 4.5;
    double goal_radius_px = 4.5;
    double background = 0.28;
    // Per-channel linear shading slopes across the frame. Blobs occlude the
    // shaded background, which keeps their positions recoverable from pooled
    // features; slopes of zero give a flat background.
    double bg_slope_x[3] = {0.45, 0.0, -0.25};
    double bg_slope_y[3] = {0.0, 0.45, -0.25};
    std::vector<Blob> distractors;
    std::uint64_t rng_seed = 0;

    void validate() const {
        require(agent_x >= 0.0 && agent_x <= 1.0 && agent_y >= 0.0 && agent_y <= 1.0,
                "scene: agent position outside the unit square");
        require(goal_x >= 0.0 && goal_x <= 1.0 && goal_y >= 0.0 && goal_y <= 1.0,
                "scene: goal position outside the unit square");
        require(agent_radius_px >= 2.0 && goal_radius_px >= 2.0,
                "scene: blob radii must be at least 2 px");
        for (const Blob& b : distractors)
            require(b.radius_px >= 2.0 && b.x >= 0.0 && b.x <= 1.0 && b.y >= 0.0 && b.y <= 1.0,
                    "scene: distractor out of bounds or degenerate");
    }
};

/// Task parameters frozen once the clean-competence gate passes.
struct HarnessConfig {
    EncoderConfig encoder;       // surrogate-scale backbone
    std::size_t train_scenes = 1500;
    double ridge_lambda = 1e-4;
    std::size_t max_steps = 64;
    double success_radius = 0.12;
    double speed = 0.06;           // unit-square distance per step
    double spawn_margin = 0.16;    // keeps blobs inside the frame
    double min_separation = 0.35;  // agent-goal spawn distance in episodes
    // Training scenes cover the states episodes actually visit: separations
    // down to inside the success ring and positions out to the movement clamp.
    double train_margin = 0.08;
    double train_min_separation = 0.06;
    double move_clamp = 0.08;  // episode positions stay in [clamp, 1-clamp]
    std::size_t distractors = 0;
    std::size_t threads = 1;

    // Scene-generation defaults applied by sample_scene.
    double background = 0.28;
    double bg_slope_x[3] = {0.45, 0.0, -0.25};
    double bg_slope_y[3] = {0.0, 0.45, -0.25};
    double agent_radius_px = 4.5;
    double goal_radius_px = 4.5;

    HarnessConfig() {
        encoder.image_h = 40;
        encoder.image_w = 40;
        encoder.patch = 4;  // 10x10 grid, N = 100
        encoder.embed_dim = 24;
        encoder.blocks = 2;
        encoder.heads = 2;
        encoder.proj_dim = 36;
        encoder.rng_seed = 2024;
    }

    void validate() const {
        encoder.validate();
        require(train_scenes >= 200, "harness: at least 200 training scenes required");
        require(ridge_lambda > 0.0, "harness: ridge_lambda must be positive");
        require(max_steps >= 1, "harness: max_steps must be >= 1");
        require(success_radius > 0.0 && speed > 0.0, "harness: radius and speed must be positive");
        require(spawn_margin >= 0.0 && spawn_margin < 0.5, "harness: spawn_margin must be in [0, 0.5)");
        require(threads >= 1, "harness: threads must be >= 1");
    }
};

namespace detail {

template <typename S>
void splat_blob(Tensor<S>& img, double cx_px, double cy_px, double radius_px, const double rgb[3]) {
    const std::size_t H = img.dim(1), W = img.dim(2);
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy_px - radius_px - 1.0));
    const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(cy_px + radius_px + 1.0));
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx_px - radius_px - 1.0));
    const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(cx_px + radius_px + 1.0));
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0);
         y <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(H) - 1, y1); ++y)
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0);
             x <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(W) - 1, x1); ++x) {
            const double dy = (static_cast<double>(y) + 0.5) - cy_px;
            const double dx = (static_cast<double>(x) + 0.5) - cx_px;
            const double dist = std::sqrt(dx * dx + dy * dy);
            // 1-pixel linear falloff at the rim.
            const double cov = clamp_value(radius_px + 0.5 - dist, 0.0, 1.0);
            if (cov <= 0.0) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                S& px = img[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
                px = static_cast<S>((1.0 - cov) * static_cast<double>(px) + cov * rgb[c]);
            }
        }
}

constexpr double kAgentColor[3] = {0.92, 0.20, 0.10};
constexpr double kGoalColor[3] = {0.10, 0.35, 0.90};

}  // namespace detail

/// Deterministic rasterization of a scene: background, distractors, goal,
/// agent, each as an anti-aliased filled circle. Pixels stay in [0, 1].
template <typename S>
Tensor<S> render_scene(const SceneSpec& spec, const EncoderConfig& cfg) {
    spec.validate();
    const std::size_t H = cfg.image_h, W = cfg.image_w;
    Tensor<S> img({3, H, W});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y) {
            const double fy = static_cast<double>(y) / static_cast<double>(H - 1) - 0.5;
            for (std::size_t x = 0; x < W; ++x) {
                const double fx = static_cast<double>(x) / static_cast<double>(W - 1) - 0.5;
                img[(c * H + y) * W + x] = static_cast<S>(clamp_value(
                    spec.background + spec.bg_slope_x[c] * fx + spec.bg_slope_y[c] * fy, 0.0, 1.0));
            }
        }
    for (const SceneSpec::Blob& b : spec.distractors) {
        const double rgb[3] = {b.shade, b.shade, b.shade};
        detail::splat_blob(img, b.x * W, b.y * H, b.radius_px, rgb);
    }
    detail::splat_blob(img, spec.goal_x * W, spec.goal_y * H, spec.goal_radius_px,
                       detail::kGoalColor);
    detail::splat_blob(img, spec.agent_x * W, spec.agent_y * H, spec.agent_radius_px,
                       detail::kAgentColor);
    img.clamp(S(0), S(1));
    return img;
}

/// Draw a random scene with the given spawn margin and minimum agent-goal
/// separation.
inline SceneSpec sample_scene_with(const HarnessConfig& cfg, std::uint64_t seed, double margin,
                                   double min_separation) {
    RandomStream rng(seed);
    SceneSpec spec;
    spec.rng_seed = seed;
    spec.background = cfg.background;
    for (std::size_t c = 0; c < 3; ++c) {
        spec.bg_slope_x[c] = cfg.bg_slope_x[c];
        spec.bg_slope_y[c] = cfg.bg_slope_y[c];
    }
    spec.agent_radius_px = cfg.agent_radius_px;
    spec.goal_radius_px = cfg.goal_radius_px;
    const double lo = margin, hi = 1.0 - margin;
    spec.agent_x = rng.uniform(lo, hi);
    spec.agent_y = rng.uniform(lo, hi);
    for (int tries = 0; tries < 256; ++tries) {
        spec.goal_x = rng.uniform(lo, hi);
        spec.goal_y = rng.uniform(lo, hi);
        const double dx = spec.goal_x - spec.agent_x, dy = spec.goal_y - spec.agent_y;
        if (std::sqrt(dx * dx + dy * dy) >= min_separation) break;
    }
    for (std::size_t i = 0; i < cfg.distractors; ++i) {
        SceneSpec::Blob b;
        b.x = rng.uniform(lo, hi);
        b.y = rng.uniform(lo, hi);
        b.radius_px = rng.uniform(2.0, 3.5);
        b.shade = rng.uniform(0.3, 0.6);
        spec.distractors.push_back(b);
    }
    return spec;
}

/// Episode scene draw: spawn-margin and separation from the config.
inline SceneSpec sample_scene(const HarnessConfig& cfg, std::uint64_t seed) {
    return sample_scene_with(cfg, seed, cfg.spawn_margin, cfg.min_separation);
}

// ---------------------------------------------------------------------------
// Policy head
// ---------------------------------------------------------------------------

/// Linear action head on mean-pooled projected features, fitted in closed
/// form; frozen afterwards. Gradients never flow through it into the attack.
struct PolicyHead {
    std::vector<double> weights;  // [feature_dim x 2], row-major
    double bias[2] = {0.0, 0.0};
    std::size_t feature_dim = 0;
    double lambda = 0.0;

    template <typename S>
    std::pair<double, double> predict(const Tensor<S>& pooled) const {
        if (pooled.size() != feature_dim)
            throw ValidationError("policy: feature length " + std::to_string(pooled.size()) +
                                  " does not match fitted dimension " +
                                  std::to_string(feature_dim));
        double vx = bias[0], vy = bias[1];
        for (std::size_t i = 0; i < feature_dim; ++i) {
            vx += static_cast<double>(pooled[i]) * weights[i * 2 + 0];
            vy += static_cast<double>(pooled[i]) * weights[i * 2 + 1];
        }
        return {vx, vy};
    }
};

namespace detail {

/// Gaussian elimination with partial pivoting; solves A X = B in place for a
/// small dense system with `rhs` right-hand sides.
inline void solve_dense(std::vector<double>& a, std::vector<double>& b, std::size_t n,
                        std::size_t rhs) {
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
        if (a[pivot * n + col] == 0.0) throw NumericError("ridge system is singular");
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
            for (std::size_t c = 0; c < rhs; ++c) std::swap(b[col * rhs + c], b[pivot * rhs + c]);
        }
        const double inv = 1.0 / a[col * n + col];
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r * n + col] * inv;
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            for (std::size_t c = 0; c < rhs; ++c) b[r * rhs + c] -= f * b[col * rhs + c];
        }
    }
    for (std::size_t r = 0; r < n; ++r) {
        const double inv = 1.0 / a[r * n + r];
        for (std::size_t c = 0; c < rhs; ++c) b[r * rhs + c] *= inv;
    }
}

template <typename S>
Tensor<S> pooled_features(const VisionEncoder<S>& enc, const Tensor<S>& image) {
    Tape<S> tape;
    Var<S> f = enc.forward_features(tape, tape.constant(image), nullptr);
    return mean_axis(f, 0).value();
}

}  // namespace detail

/// Fitted feature matrix + labels for one dataset row.
template <typename S>
struct PolicySample {
    Tensor<S> pooled;
    double label_x, label_y;
};

/// Mean-normalized ridge on an augmented bias column:
/// W = (X'X / n + lambda I)^{-1} (X'Y / n). Duplicating every sample leaves
/// the fit unchanged.
template <typename S>
PolicyHead fit_policy_from_samples(const std::vector<PolicySample<S>>& samples, double lambda) {
    require(lambda > 0.0, "fit_policy: lambda must be positive");
    require(samples.size() >= 200, "fit_policy: at least 200 samples required, got " +
                                       std::to_string(samples.size()));
    const std::size_t f = samples[0].pooled.size();
    const std::size_t n = f + 1;  // + bias column
    std::vector<double> xtx(n * n, 0.0);
    std::vector<double> xty(n * 2, 0.0);
    std::vector<double> row(n);
    for (const PolicySample<S>& s : samples) {
        for (std::size_t i = 0; i < f; ++i) row[i] = static_cast<double>(s.pooled[i]);
        row[f] = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) xtx[i * n + j] += row[i] * row[j];
            xty[i * 2 + 0] += row[i] * s.label_x;
            xty[i * 2 + 1] += row[i] * s.label_y;
        }
    }
    const double inv_count = 1.0 / static_cast<double>(samples.size());
    for (double& v : xtx) v *= inv_count;
    for (double& v : xty) v *= inv_count;
    for (std::size_t i = 0; i < n; ++i) xtx[i * n + i] += lambda;

    detail::solve_dense(xtx, xty, n, 2);

    PolicyHead head;
    head.feature_dim = f;
    head.lambda = lambda;
    head.weights.assign(xty.begin(), xty.begin() + static_cast<std::ptrdiff_t>(f * 2));
    head.bias[0] = xty[f * 2 + 0];
    head.bias[1] = xty[f * 2 + 1];
    return head;
}

/// Render seeded training scenes, pool their projected features, and fit the
/// ridge head against unit agent-to-goal direction labels.
template <typename S>
PolicyHead fit_policy(const VisionEncoder<S>& enc, const HarnessConfig& cfg,
                      std::uint64_t master_seed) {
    std::vector<PolicySample<S>> samples(cfg.train_scenes);
    const std::size_t workers = std::min<std::size_t>(cfg.threads, cfg.train_scenes);
    std::atomic<std::size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cfg.train_scenes) return;
            SceneSpec spec = sample_scene_with(cfg, mix_seed(master_seed, 0x7261696eull, i),
                                               cfg.train_margin, cfg.train_min_separation);
            Tensor<S> img = render_scene<S>(spec, cfg.encoder);
            const double dx = spec.goal_x - spec.agent_x, dy = spec.goal_y - spec.agent_y;
            const double norm = std::max(1e-12, std::sqrt(dx * dx + dy * dy));
            samples[i] = PolicySample<S>{detail::pooled_features(enc, img), dx / norm, dy / norm};
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    return fit_policy_from_samples(samples, cfg.ridge_lambda);
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct EpisodeRecord {
    Condition condition = Condition::Clean;
    std::size_t steps = 0;
    bool success = false;
    std::vector<double> frame_losses;         // final attack loss per frame
    std::vector<double> frame_iter_seconds;   // mean PGD-iteration seconds per frame
    std::vector<double> frame_patch_fraction; // modified-patch fraction per frame
};

/// Roll out one episode. Per frame: render, perturb per condition (fresh
/// clean reference every frame), pool features, act, clamp, move, check goal.
template <typename S>
EpisodeRecord run_episode(const VisionEncoder<S>& enc, const PolicyHead& policy, SceneSpec spec,
                          Condition condition, const AttackConfig& attack_cfg,
                          const HarnessConfig& cfg, std::uint64_t episode_seed) {
    cfg.validate();
    EpisodeRecord rec;
    rec.condition = condition;

    double ax = spec.agent_x, ay = spec.agent_y;
    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        const double gdx = spec.goal_x - ax, gdy = spec.goal_y - ay;
        if (std::sqrt(gdx * gdx + gdy * gdy) <= cfg.success_radius) {
            rec.success = true;
            return rec;
        }

        spec.agent_x = ax;
        spec.agent_y = ay;
        Tensor<S> frame = render_scene<S>(spec, cfg.encoder);
        Tensor<S> observed = frame;

        if (condition == Condition::Random && attack_cfg.epsilon > 0.0) {
            RandomStream noise(mix_seed(episode_seed, 0x6e6f6973ull, step));
            for (std::size_t i = 0; i < observed.size(); ++i)
                observed[i] = clamp_value(
                    observed[i] + static_cast<S>(noise.uniform(-attack_cfg.epsilon,
                                                               attack_cfg.epsilon)),
                    S(0), S(1));
            rec.frame_patch_fraction.push_back(
                modified_patch_fraction(frame, observed, cfg.encoder));
        } else if (condition_is_attack(condition) && attack_cfg.epsilon > 0.0) {
            AttackConfig frame_cfg = attack_cfg;
            frame_cfg.strategy = condition_strategy(condition);
            frame_cfg.rng_seed = mix_seed(episode_seed, 0xa77ac4ull, step);
            AttackResult<S> res = run_attack(enc, frame, frame_cfg);
            observed = std::move(res.adversarial);
            rec.frame_losses.push_back(static_cast<double>(res.loss_trace.back()));
            if (!res.iter_seconds.empty())
                rec.frame_iter_seconds.push_back(
                    std::accumulate(res.iter_seconds.begin(), res.iter_seconds.end(), 0.0) /
                    static_cast<double>(res.iter_seconds.size()));
            rec.frame_patch_fraction.push_back(res.modified_patch_fraction);
        }

        Tensor<S> pooled = detail::pooled_features(enc, observed);
        auto [vx, vy] = policy.predict(pooled);
        const double norm = std::sqrt(vx * vx + vy * vy);
        if (norm > 1.0) {  // clamp action norm to the unit ball
            vx /= norm;
            vy /= norm;
        }
        ax = clamp_value(ax + cfg.speed * vx, cfg.move_clamp, 1.0 - cfg.move_clamp);
        ay = clamp_value(ay + cfg.speed * vy, cfg.move_clamp, 1.0 - cfg.move_clamp);
        rec.steps = step + 1;
    }
    const double gdx = spec.goal_x - ax, gdy = spec.goal_y - ay;
    rec.success = std::sqrt(gdx * gdx + gdy * gdy) <= cfg.success_radius;
    return rec;
}

// ---------------------------------------------------------------------------
// Evaluation suite
// ---------------------------------------------------------------------------

/// One grid point of the evaluation sweep.
struct EvalPoint {
    Condition condition = Condition::Clean;
    double epsilon = 4.0 / 255.0;
    double alpha = 1.0 / 255.0;
    std::size_t iterations = 6;
    double ratio = 0.1;
};

struct MetricsRow {
    EvalPoint point;
    std::size_t trials = 0;
    double sr = 0.0;
    double fr = 0.0;
    double mean_loss = 0.0;
    double mean_iter_seconds = 0.0;
    double mean_patch_fraction = 0.0;
};

using MetricsTable = std::vector<MetricsRow>;

/// Paired-trial sweep: trial i uses the same scene and episode seed across
/// every grid point, so conditions are compared on identical draws. Episodes
/// are independent and may run on multiple threads; aggregation is
/// order-independent.
template <typename S>
MetricsTable evaluate_suite(const VisionEncoder<S>& enc, const PolicyHead& policy,
                            const std::vector<EvalPoint>& points, std::size_t trials,
                            std::uint64_t master_seed, const HarnessConfig& cfg) {
    require(trials >= 1, "evaluate_suite: trials must be >= 1");
    MetricsTable table;
    table.reserve(points.size());

    std::vector<SceneSpec> scenes(trials);
    std::vector<std::uint64_t> episode_seeds(trials);
    for (std::size_t i = 0; i < trials; ++i) {
        scenes[i] = sample_scene(cfg, mix_seed(master_seed, 0x5363656eull, i));
        episode_seeds[i] = mix_seed(master_seed, 0x45706973ull, i);
    }

    for (const EvalPoint& point : points) {
        AttackConfig acfg;
        acfg.epsilon = point.condition == Condition::Clean ? 0.0 : point.epsilon;
        acfg.alpha = condition_is_attack(point.condition) ? point.alpha : 0.0;
        acfg.iterations = condition_is_attack(point.condition) ? point.iterations : 0;
        acfg.topk_ratio = point.ratio;
        acfg.strategy = condition_strategy(point.condition);
        acfg.validate();

        std::vector<EpisodeRecord> records(trials);
        std::atomic<std::size_t> next{0};
        auto work = [&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= trials) return;
                records[i] = run_episode(enc, policy, scenes[i], point.condition, acfg, cfg,
                                         episode_seeds[i]);
            }
        };
        const std::size_t workers = std::min<std::size_t>(cfg.threads, trials);
        if (workers <= 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
            for (auto& th : pool) th.join();
        }

        MetricsRow row;
        row.point = point;
        row.trials = trials;
        std::size_t successes = 0;
        double loss_sum = 0.0, iter_sum = 0.0, patch_sum = 0.0;
        std::size_t loss_n = 0, iter_n = 0, patch_n = 0;
        for (const EpisodeRecord& r : records) {
            successes += r.success ? 1 : 0;
            for (double v : r.frame_losses) { loss_sum += v; ++loss_n; }
            for (double v : r.frame_iter_seconds) { iter_sum += v; ++iter_n; }
            for (double v : r.frame_patch_fraction) { patch_sum += v; ++patch_n; }
        }
        row.sr = static_cast<double>(successes) / static_cast<double>(trials);
        row.fr = 1.0 - row.sr;
        row.mean_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
        row.mean_iter_seconds = iter_n ? iter_sum / static_cast<double>(iter_n) : 0.0;
        row.mean_patch_fraction = patch_n ? patch_sum / static_cast<double>(patch_n) : 0.0;
        table.push_back(row);
    }
    return table;
}

/// CSV rendering with the fixed schema:
/// condition,epsilon,alpha,iters,ratio,trials,sr,fr,mean_loss,mean_iter_seconds,mean_patch_fraction
inline std::string metrics_to_csv(const MetricsTable& table) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(10);
    os << "condition,epsilon,alpha,iters,ratio,trials,sr,fr,mean_loss,mean_iter_seconds,"
          "mean_patch_fraction\n";
    for (const MetricsRow& r : table) {
        const bool attack = condition_is_attack(r.point.condition);
        const bool random = r.point.condition == Condition::Random;
        os << condition_name(r.point.condition) << ','
           << (attack || random ? r.point.epsilon : 0.0) << ','
           << (attack ? r.point.alpha : 0.0) << ',' << (attack ? r.point.iterations : 0) << ','
           << (attack ? r.point.ratio : 0.0) << ',' << r.trials << ',' << r.sr << ',' << r.fr
           << ',' << r.mean_loss << ',' << r.mean_iter_seconds << ',' << r.mean_patch_fraction
           << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Timing bench
// ---------------------------------------------------------------------------

struct BenchStats {
    std::vector<double> per_repeat_mean;   // mean iteration seconds per repeat
    std::vector<double> per_repeat_total;  // total attack seconds per repeat
    std::size_t iterations = 0;
    double mean = 0.0;
    double median = 0.0;
    double stddev = 0.0;
};

/// Repeated single-frame attacks on one seeded scene; reports per-iteration
/// wall-clock statistics. No pass/fail judgment is attached to the numbers.
template <typename S>
BenchStats bench_iteration_time(const VisionEncoder<S>& enc, const AttackConfig& cfg,
                                std::size_t repeats, std::uint64_t master_seed,
                                const HarnessConfig& hcfg) {
    require(repeats >= 10, "bench: at least 10 repeats required");
    require(cfg.iterations >= 1, "bench: attack must run at least one iteration");
    SceneSpec spec = sample_scene(hcfg, mix_seed(master_seed, 0x42656e63ull, 0));
    Tensor<S> img = render_scene<S>(spec, enc.config());

    BenchStats stats;
    stats.iterations = cfg.iterations;
    for (std::size_t r = 0; r < repeats; ++r) {
        AttackConfig run_cfg = cfg;
        run_cfg.rng_seed = mix_seed(master_seed, 0x42656e63ull, r + 1);
        AttackResult<S> res = run_attack(enc, img, run_cfg);
        const double total = std::accumulate(res.iter_seconds.begin(), res.iter_seconds.end(), 0.0);
        stats.per_repeat_total.push_back(total);
        stats.per_repeat_mean.push_back(total / static_cast<double>(res.iter_seconds.size()));
    }
    std::vector<double> sorted = stats.per_repeat_mean;
    std::sort(sorted.begin(), sorted.end());
    stats.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) /
                 static_cast<double>(sorted.size());
    stats.median = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                     : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    double var = 0.0;
    for (double v : sorted) var += (v - stats.mean) * (v - stats.mean);
    stats.stddev = std::sqrt(var / static_cast<double>(sorted.size()));
    return stats;
}

/// CSV rows: repeat,iters,total_seconds,mean_iter_seconds (one per repeat).
inline std::string bench_to_csv(const BenchStats& stats) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(10);
    os << "repeat,iters,total_seconds,mean_iter_seconds\n";
    for (std::size_t r = 0; r < stats.per_repeat_mean.size(); ++r)
        os << r << ',' << stats.iterations << ',' << stats.per_repeat_total[r] << ','
           << stats.per_repeat_mean[r] << '\n';
    return os.str();
}

}  // namespace advla
