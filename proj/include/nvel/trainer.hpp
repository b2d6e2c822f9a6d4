#pragma once

// Adam optimisation of the warp loss over shuffled pixel mini-batches, warm
// started sequence training, and multi-seed ensembles with a loss-ratio
// convergence filter.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "nvel/field_grid.hpp"
#include "nvel/field_model.hpp"
#include "nvel/image.hpp"
#include "nvel/parallel.hpp"
#include "nvel/warp_loss.hpp"

namespace nvel {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 10000;
    int epochs = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    bool deterministic = false;
    int threads = 1;

    AdamHyper adam() const { return {lr, beta1, beta2, eps}; }

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw InputError("learning rate must be positive");
        if (batch_size < 1) throw InputError("batch size must be >= 1");
        if (epochs < 1) throw InputError("epoch count must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
            throw InputError("invalid Adam constants");
        }
    }
};

/// First and second moment estimates, shaped like the parameters.
template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    long step = 0;

    explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

/// One bias-corrected Adam update at step t (t >= 1). Returns false, leaving
/// `params` untouched, if the update would produce a non-finite value.
template <typename T>
bool adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, const AdamHyper& h,
               long t) {
    if (t < 1) throw InputError("Adam step index must be >= 1");
    if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
        throw InputError("Adam state does not match parameter shape");
    }
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T step = static_cast<T>(h.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(h.eps);

    std::vector<T> next(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        const T mi = b1 * m[i] + (T(1) - b1) * g;
        const T vi = b2 * v[i] + (T(1) - b2) * g * g;
        next[i] = params[i] - step * mi / (std::sqrt(vi * inv_c2) + eps);
        if (!std::isfinite(next[i]) || !std::isfinite(mi) || !std::isfinite(vi)) return false;
        m[i] = mi;
        v[i] = vi;
    }
    std::ranges::copy(next, params.begin());
    return true;
}

template <typename T>
bool adam_step(NetworkParams<T>& params, const NetworkParams<T>& grads, AdamState<T>& state, const AdamHyper& h) {
    if (!params.same_shape(grads) || state.m.size() != params.size()) {
        throw InputError("Adam state does not match parameter shape");
    }
    const long t = state.step + 1;
    // m/v are only written back on success, so a failed step leaves state consistent
    std::vector<T> m = state.m, v = state.v;
    if (!adam_step<T>(params.values(), grads.values(), m, v, h, t)) return false;
    state.m = std::move(m);
    state.v = std::move(v);
    state.step = t;
    return true;
}

struct TrainReport {
    std::vector<double> loss_per_epoch;  // mean batch loss of each epoch
    double wall_time = 0.0;              // seconds
    bool diverged = false;
    double final_loss = std::numeric_limits<double>::infinity();

    int epochs_run() const noexcept { return static_cast<int>(loss_per_epoch.size()); }
};

/// Called after every epoch with (epoch index, epoch loss).
using EpochCallback = std::function<void(int, double)>;

namespace detail {

inline std::uint64_t shuffle_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ull; }

// Fisher-Yates on our own generator, so the permutation stream depends only on the seed.
inline void shuffle_indices(std::span<std::uint32_t> idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
}

}  // namespace detail

/// Trains `model` in place on the pair (first, second).
///
/// Every epoch shuffles all pixel indices of `first` and walks them in
/// batches of cfg.batch_size (the last one may be short), taking one Adam
/// step per batch. On a non-finite loss or update the parameters are rolled
/// back to the last finite state and training stops with diverged = true.
template <typename T>
TrainReport train_pair(DisplacementModel<T>& model, const Image& first, const Image& second, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (!first.same_shape(second)) throw InputError("image pair dimensions differ");
    const auto start = std::chrono::steady_clock::now();

    std::vector<std::uint32_t> order(first.size());
    std::iota(order.begin(), order.end(), std::uint32_t{0});
    Rng rng(detail::shuffle_seed(cfg.seed));
    AdamState<T> state(model.params.size());
    const AdamHyper hyper = cfg.adam();
    const LossOptions lopt{cfg.threads, cfg.deterministic};
    const auto batch = static_cast<std::size_t>(cfg.batch_size);

    TrainReport report;
    for (int epoch = 0; epoch < cfg.epochs && !report.diverged; ++epoch) {
        detail::shuffle_indices(order, rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch) {
            const std::size_t len = std::min(batch, order.size() - begin);
            const auto pixels = make_pixel_batch<T>(first, std::span(order).subspan(begin, len));
            const auto lg = loss_and_grad(model, second, pixels, lopt);
            if (!lg.finite || !adam_step(model.params, lg.grads, state, hyper)) {
                report.diverged = true;
                break;
            }
            sum += lg.loss;
            ++batches;
        }
        if (report.diverged) break;
        const double epoch_loss = sum / static_cast<double>(batches);
        report.loss_per_epoch.push_back(epoch_loss);
        report.final_loss = epoch_loss;
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

template <typename T>
struct PairResult {
    DisplacementModel<T> model;
    TrainReport report;
};

/// Trains consecutive frame pairs; pair k > 0 starts from the weights
/// learned on pair k-1 and the embedding is never resampled. Shuffling for
/// pair k uses seed + k. A diverged pair keeps its last finite weights and
/// the sequence continues from them.
template <typename T>
std::vector<PairResult<T>> train_sequence(std::span<const Image> frames, const TrainConfig& cfg_first,
                                          const TrainConfig& cfg_rest, DisplacementModel<T> model,
                                          const std::function<void(std::size_t, const TrainReport&)>& on_pair = {}) {
    if (frames.size() < 2) throw InputError("a sequence needs at least two frames");
    std::vector<PairResult<T>> out;
    out.reserve(frames.size() - 1);
    for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
        TrainConfig cfg = k == 0 ? cfg_first : cfg_rest;
        cfg.seed += k;
        TrainReport report = train_pair(model, frames[k], frames[k + 1], cfg);
        if (on_pair) on_pair(k, report);
        out.push_back({model, std::move(report)});
    }
    return out;
}

struct EnsembleOptions {
    int members = 10;
    /// Members whose final loss exceeds ratio * median are excluded.
    double divergence_ratio = 10.0;
    int jobs = 1;
    /// When false every member uses cfg.seed unchanged.
    bool vary_seed = true;
    bool normalize_coords = false;
};

template <typename T>
struct EnsembleMember {
    std::uint64_t seed = 0;
    DisplacementModel<T> model;
    TrainReport report;
};

struct EnsembleResult {
    std::vector<TrainReport> reports;
    std::vector<std::uint64_t> seeds;
    FieldGrid mean;
    FieldGrid stddev;
    std::vector<bool> converged;
};

/// Member i is seeded with cfg.seed + i; the seed drives the embedding, the
/// weight initialisation, and the batch permutation.
template <typename T>
std::vector<EnsembleMember<T>> train_members(const Image& first, const Image& second, const ModelConfig& mc,
                                             const TrainConfig& cfg, const EnsembleOptions& opt) {
    if (opt.members < 1) throw InputError("ensemble needs at least one member");
    std::vector<EnsembleMember<T>> members(static_cast<std::size_t>(opt.members));
    parallel_for(members.size(), opt.jobs, [&](std::size_t i) {
        TrainConfig c = cfg;
        if (opt.vary_seed) c.seed += i;
        if (opt.jobs > 1) c.threads = 1;
        auto model = init_model<T>(mc, c.seed);
        if (opt.normalize_coords) normalize_coordinates(model, first.width(), first.height());
        auto report = train_pair(model, first, second, c);
        members[i] = {c.seed, std::move(model), std::move(report)};
    });
    return members;
}

/// Converged = finite final loss no greater than ratio x median of the finite final losses.
inline std::vector<bool> convergence_mask(std::span<const double> final_losses, double ratio) {
    std::vector<double> finite;
    for (double l : final_losses) {
        if (std::isfinite(l)) finite.push_back(l);
    }
    std::vector<bool> mask(final_losses.size(), false);
    if (finite.empty()) return mask;
    std::ranges::sort(finite);
    const std::size_t n = finite.size();
    const double median = n % 2 ? finite[n / 2] : 0.5 * (finite[n / 2 - 1] + finite[n / 2]);
    for (std::size_t i = 0; i < final_losses.size(); ++i) {
        mask[i] = std::isfinite(final_losses[i]) && final_losses[i] <= ratio * median;
    }
    return mask;
}

/// Pointwise mean and (population) standard deviation over the converged members.
template <typename T>
EnsembleResult summarize_ensemble(const std::vector<EnsembleMember<T>>& members, const GridSpec& grid,
                                  double divergence_ratio) {
    EnsembleResult r;
    std::vector<double> losses;
    for (const auto& m : members) {
        r.reports.push_back(m.report);
        r.seeds.push_back(m.seed);
        losses.push_back(m.report.diverged ? std::numeric_limits<double>::infinity() : m.report.final_loss);
    }
    r.converged = convergence_mask(losses, divergence_ratio);
    const auto count = std::ranges::count(r.converged, true);
    if (count == 0) throw DivergenceError("every ensemble member diverged");

    std::vector<FieldGrid> fields;
    for (std::size_t i = 0; i < members.size(); ++i) {
        if (r.converged[i]) fields.push_back(sample_grid(members[i].model, grid));
    }
    r.mean = FieldGrid(grid);
    r.stddev = FieldGrid(grid);
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        double mu = 0.0, mv = 0.0;
        for (const auto& f : fields) {
            mu += f.u[k];
            mv += f.v[k];
        }
        mu *= inv;
        mv *= inv;
        double vu = 0.0, vv = 0.0;
        for (const auto& f : fields) {
            vu += (f.u[k] - mu) * (f.u[k] - mu);
            vv += (f.v[k] - mv) * (f.v[k] - mv);
        }
        r.mean.u[k] = static_cast<float>(mu);
        r.mean.v[k] = static_cast<float>(mv);
        r.stddev.u[k] = static_cast<float>(std::sqrt(vu * inv));
        r.stddev.v[k] = static_cast<float>(std::sqrt(vv * inv));
    }
    return r;
}

template <typename T = float>
EnsembleResult ensemble_train(const Image& first, const Image& second, const ModelConfig& mc, const TrainConfig& cfg,
                              const EnsembleOptions& opt, const GridSpec& eval_grid) {
    if (opt.members < 2) throw InputError("an ensemble needs at least two members");
    return summarize_ensemble(train_members<T>(first, second, mc, cfg, opt), eval_grid, opt.divergence_ratio);
}

}  // namespace nvel
