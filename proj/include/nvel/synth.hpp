#pragma once

// Synthetic particle images with analytic ground-truth displacement fields.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nvel/field_grid.hpp"
#include "nvel/field_model.hpp"
#include "nvel/image.hpp"

namespace nvel {

namespace flow {

/// Constant displacement (u, v).
struct Uniform {
    double u = 0.0;
    double v = 0.0;
};

/// Rotation of every point about `center` by `omega` radians per frame.
struct RigidRotation {
    Vec2 center;
    double omega = 0.0;
};

/// Simple shear: dx = rate * (y - y0), dy = 0.
struct Shear {
    double rate = 0.0;
    double y0 = 0.0;
};

/// Planar jet: dx = base + peak * sech^2((y - center_y) / half_width), dy = 0.
struct JetShear {
    double center_y = 128.0;
    double half_width = 24.0;
    double peak = 4.0;
    double base = 0.0;
};

/// One particle translated by `shift`; the field is uniform.
struct SingleParticle {
    Vec2 shift{10.0, 10.0};
};

}  // namespace flow

using AnalyticFlow = std::variant<flow::Uniform, flow::RigidRotation, flow::Shear, flow::JetShear, flow::SingleParticle>;

/// Displacement in pixels at (x, y).
inline Vec2 displacement(const AnalyticFlow& f, Vec2 p) {
    return std::visit(
        [p](const auto& k) -> Vec2 {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, flow::Uniform>) {
                return {k.u, k.v};
            } else if constexpr (std::is_same_v<K, flow::RigidRotation>) {
                const double rx = p.x - k.center.x, ry = p.y - k.center.y;
                const double c = std::cos(k.omega), s = std::sin(k.omega);
                return {c * rx - s * ry - rx, s * rx + c * ry - ry};
            } else if constexpr (std::is_same_v<K, flow::Shear>) {
                return {k.rate * (p.y - k.y0), 0.0};
            } else if constexpr (std::is_same_v<K, flow::JetShear>) {
                const double sech = 1.0 / std::cosh((p.y - k.center_y) / k.half_width);
                return {k.base + k.peak * sech * sech, 0.0};
            } else {
                return k.shift;
            }
        },
        f);
}

/// Ground truth sampled on a grid.
inline FieldGrid sample_flow(const AnalyticFlow& f, const GridSpec& spec) {
    FieldGrid out(spec);
    for (int j = 0; j < spec.height; ++j) {
        for (int i = 0; i < spec.width; ++i) {
            const Vec2 d = displacement(f, {spec.x(i), spec.y(j)});
            out.u[out.index(i, j)] = static_cast<float>(d.x);
            out.v[out.index(i, j)] = static_cast<float>(d.y);
        }
    }
    return out;
}

struct ParticleSet {
    std::vector<Vec2> positions;
    double diameter = 3.0;  // e^-2 diameter in pixels
    double peak = 1.0;

    void validate() const {
        if (!(diameter > 0.0) || !std::isfinite(diameter)) throw InputError("particle diameter must be positive");
        if (!(peak >= 0.0) || !std::isfinite(peak)) throw InputError("particle peak must be non-negative");
        for (const Vec2& p : positions) {
            if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw InputError("particle position not finite");
        }
    }
};

struct SeedingOptions {
    double density = 0.03;  // particles per square pixel
    double diameter = 3.0;
    double peak = 1.0;
    /// Particles are scattered over the frame grown by this many pixels on
    /// each side so that flow can carry them into view.
    double margin = 16.0;
};

/// Uniformly scattered particles over the (margin-extended) frame.
inline ParticleSet random_particles(int width, int height, std::uint64_t seed, const SeedingOptions& opt = {}) {
    Rng rng(seed);
    const double w = width + 2 * opt.margin, h = height + 2 * opt.margin;
    const auto n = static_cast<std::size_t>(std::llround(opt.density * w * h));
    ParticleSet ps{{}, opt.diameter, opt.peak};
    ps.positions.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(-opt.margin - 0.5, width - 0.5 + opt.margin);
        const double y = rng.uniform(-opt.margin - 0.5, height - 0.5 + opt.margin);
        ps.positions.push_back({x, y});
    }
    return ps;
}

namespace detail {

// Gaussian spots accumulated in double before clamping.
inline std::vector<double> splat(const ParticleSet& ps, int w, int h) {
    std::vector<double> acc(static_cast<std::size_t>(w) * h, 0.0);
    const double k = 8.0 / (ps.diameter * ps.diameter);
    const int reach = static_cast<int>(std::ceil(2.5 * ps.diameter)) + 1;
    for (const Vec2& p : ps.positions) {
        const int cx = static_cast<int>(std::lround(p.x));
        const int cy = static_cast<int>(std::lround(p.y));
        if (cx + reach < 0 || cy + reach < 0 || cx - reach >= w || cy - reach >= h) continue;
        for (int y = std::max(0, cy - reach); y <= std::min(h - 1, cy + reach); ++y) {
            for (int x = std::max(0, cx - reach); x <= std::min(w - 1, cx + reach); ++x) {
                const double dx = x - p.x, dy = y - p.y;
                acc[static_cast<std::size_t>(y) * w + x] += ps.peak * std::exp(-k * (dx * dx + dy * dy));
            }
        }
    }
    return acc;
}

}  // namespace detail

/// Intensities below this are stored as zero. Far Gaussian tails would
/// otherwise leave subnormal products in float training, which is very slow.
inline constexpr double kNegligibleIntensity = 1e-7;

/// Sum of Gaussian spots peak * exp(-8 r^2 / d^2), clamped to [0, 1].
inline Image render(const ParticleSet& ps, int width, int height) {
    ps.validate();
    Image img(width, height);
    const auto acc = detail::splat(ps, width, height);
    auto px = img.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = acc[i] < kNegligibleIntensity ? 0.0f : static_cast<float>(std::min(acc[i], 1.0));
    }
    return img;
}

/// Positions moved by the displacement evaluated at each particle.
inline ParticleSet advect(const ParticleSet& ps, const AnalyticFlow& f) {
    ParticleSet out = ps;
    for (Vec2& p : out.positions) {
        const Vec2 d = displacement(f, p);
        p = {p.x + d.x, p.y + d.y};
    }
    return out;
}

namespace detail {

inline void add_noise(Image& img, double sigma, Rng& rng) {
    if (sigma <= 0.0) return;
    for (float& v : img.pixels()) v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
}

}  // namespace detail

struct SyntheticPair {
    Image first;
    Image second;
    AnalyticFlow flow;
    ParticleSet particles;  // positions in the first frame

    Vec2 truth(Vec2 p) const { return displacement(flow, p); }
};

/// I1 renders the particles; I2 renders them after advection. `noise_sigma`
/// adds seeded Gaussian noise (0 disables).
inline SyntheticPair generate_pair(const AnalyticFlow& f, const ParticleSet& ps, int width, int height,
                                   std::uint64_t seed = 0, double noise_sigma = 0.0) {
    SyntheticPair pair{render(ps, width, height), render(advect(ps, f), width, height), f, ps};
    Rng rng(seed);
    detail::add_noise(pair.first, noise_sigma, rng);
    detail::add_noise(pair.second, noise_sigma, rng);
    return pair;
}

struct SyntheticSequence {
    std::vector<Image> frames;
    /// positions[t] are the particle positions rendered in frame t.
    std::vector<std::vector<Vec2>> positions;
    /// displacements[t] move positions[t] to positions[t + 1].
    std::vector<std::vector<Vec2>> displacements;
    AnalyticFlow flow;
};

inline SyntheticSequence generate_sequence(const AnalyticFlow& f, const ParticleSet& ps, int width, int height,
                                           int n_frames, std::uint64_t seed = 0, double noise_sigma = 0.0) {
    if (n_frames < 2) throw InputError("a sequence needs at least two frames");
    SyntheticSequence seq{{}, {}, {}, f};
    Rng rng(seed);
    ParticleSet current = ps;
    for (int t = 0; t < n_frames; ++t) {
        Image frame = render(current, width, height);
        detail::add_noise(frame, noise_sigma, rng);
        seq.frames.push_back(std::move(frame));
        seq.positions.push_back(current.positions);
        if (t + 1 == n_frames) break;
        std::vector<Vec2> d;
        d.reserve(current.positions.size());
        for (const Vec2& p : current.positions) d.push_back(displacement(f, p));
        current = advect(current, f);
        seq.displacements.push_back(std::move(d));
    }
    return seq;
}

/// Particles of positions[t] that lie inside the frame, with their displacements.
inline std::pair<std::vector<Vec2>, std::vector<Vec2>> visible_particles(const SyntheticSequence& seq, std::size_t t,
                                                                         int width, int height) {
    std::pair<std::vector<Vec2>, std::vector<Vec2>> out;
    for (std::size_t k = 0; k < seq.positions[t].size(); ++k) {
        const Vec2 p = seq.positions[t][k];
        if (p.x >= 0 && p.y >= 0 && p.x <= width - 1 && p.y <= height - 1) {
            out.first.push_back(p);
            out.second.push_back(seq.displacements[t][k]);
        }
    }
    return out;
}

}  // namespace nvel
