#pragma once

// Bilinear sampling with zero padding, the photometric warp loss
//   L = mean_i (I1(v_i) - I2(v_i + d(v_i)))^2
// and its exact reverse-mode gradient with respect to the network weights.
// The embedding matrix is fixed and receives no gradient.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <span>
#include <vector>

#include "nvel/field_model.hpp"
#include "nvel/image.hpp"
#include "nvel/parallel.hpp"

namespace nvel {

template <typename T>
struct SampleResult {
    T value{};
    T dx{};  // dI/dx
    T dy{};  // dI/dy
};

/// Bilinear interpolation and its derivative at (x, y). Neighbours outside
/// the image read as 0. The derivative is that of the cell selected by
/// floor(x), floor(y), so on lattice lines it belongs to the right/lower cell.
template <typename T>
SampleResult<T> sample_with_gradient(const Image& img, T x, T y) noexcept {
    const int w = img.width();
    const int h = img.height();
    if (!(x >= T(-1) && x < T(w) && y >= T(-1) && y < T(h))) return {};
    const T fx0 = std::floor(x);
    const T fy0 = std::floor(y);
    const int x0 = static_cast<int>(fx0);
    const int y0 = static_cast<int>(fy0);
    const T ax = x - fx0;
    const T ay = y - fy0;
    auto px = [&](int xi, int yi) -> T {
        return (xi >= 0 && xi < w && yi >= 0 && yi < h) ? static_cast<T>(img(xi, yi)) : T(0);
    };
    const T p00 = px(x0, y0);
    const T p10 = px(x0 + 1, y0);
    const T p01 = px(x0, y0 + 1);
    const T p11 = px(x0 + 1, y0 + 1);
    const T top = p00 + ax * (p10 - p00);
    const T bottom = p01 + ax * (p11 - p01);
    return {top + ay * (bottom - top), (T(1) - ay) * (p10 - p00) + ay * (p11 - p01), bottom - top};
}

template <typename T>
T bilinear_sample(const Image& img, T x, T y) noexcept {
    return sample_with_gradient(img, x, y).value;
}

template <typename T>
std::array<T, 2> sample_gradient(const Image& img, T x, T y) noexcept {
    const auto s = sample_with_gradient(img, x, y);
    return {s.dx, s.dy};
}

/// I2 sampled at v + d(v): the second image pulled back onto the first.
template <typename T>
double deformed_intensity(const DisplacementModel<T>& model, const Image& second, Vec2 v) {
    const Vec2 d = forward(model, v);
    return static_cast<double>(bilinear_sample(second, static_cast<T>(v.x + d.x), static_cast<T>(v.y + d.y)));
}

/// Pixel coordinates of the first image with their intensities.
template <typename T>
struct PixelBatch {
    PointList<T> coords;
    std::vector<T> targets;

    std::size_t size() const noexcept { return targets.size(); }
};

/// Batch built from linear pixel indices (row-major) of `first`.
template <typename T>
PixelBatch<T> make_pixel_batch(const Image& first, std::span<const std::uint32_t> indices) {
    PixelBatch<T> b{PointList<T>(static_cast<Eigen::Index>(indices.size()), 2), std::vector<T>(indices.size())};
    const auto w = static_cast<std::uint32_t>(first.width());
    const auto px = first.pixels();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::uint32_t k = indices[i];
        b.coords(static_cast<Eigen::Index>(i), 0) = static_cast<T>(k % w);
        b.coords(static_cast<Eigen::Index>(i), 1) = static_cast<T>(k / w);
        b.targets[i] = static_cast<T>(px[k]);
    }
    return b;
}

/// Every pixel of `first`, in row-major order.
template <typename T>
PixelBatch<T> full_pixel_batch(const Image& first) {
    std::vector<std::uint32_t> all(first.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
    return make_pixel_batch<T>(first, all);
}

template <typename T>
struct LossGradient {
    double loss = 0.0;
    NetworkParams<T> grads;
    bool finite = true;
};

struct LossOptions {
    int threads = 1;
    /// Reduce per-chunk gradients in chunk order so results do not depend on
    /// thread scheduling.
    bool deterministic = true;
    std::size_t chunk_rows = 2048;
};

namespace detail {

template <typename T>
double accumulate_chunk(const DisplacementModel<T>& model, const Image& second, const PixelBatch<T>& batch,
                        Eigen::Index begin, Eigen::Index rows, T grad_scale, NetworkParams<T>& grads) {
    const auto& params = model.params;
    const int last = params.layer_count() - 1;
    std::vector<RowMatrix<T>> acts;
    const auto coords = batch.coords.middleRows(begin, rows);
    const PointList<T> disp = forward_features(params, embed_batch(model, coords), &acts);

    double loss = 0.0;
    RowMatrix<T> delta(rows, 2);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto s = sample_with_gradient(second, coords(i, 0) + disp(i, 0), coords(i, 1) + disp(i, 1));
        const T r = batch.targets[static_cast<std::size_t>(begin + i)] - s.value;
        loss += static_cast<double>(r) * static_cast<double>(r);
        // dL/d(disp) = -2 r dI/dv / n
        delta(i, 0) = -grad_scale * r * s.dx;
        delta(i, 1) = -grad_scale * r * s.dy;
    }
    // A non-finite displacement samples as zero padding; surface it instead.
    if (!disp.allFinite()) loss = std::numeric_limits<double>::quiet_NaN();

    // Products go through owned temporaries (see forward_features); the
    // element-wise adds into the flat buffers are alignment-independent.
    for (int l = last; l >= 0; --l) {
        const RowMatrix<T> gw = acts[l].transpose() * delta;
        const RowVector<T> gb = delta.colwise().sum();
        grads.weight(l) += gw;
        grads.bias(l) += gb;
        if (l == 0) break;
        const RowMatrix<T> w = params.weight(l);
        RowMatrix<T> upstream = delta * w.transpose();
        delta = (upstream.array() * (T(1) - acts[l].array().square())).matrix();
    }
    return loss;
}

}  // namespace detail

/// Mean squared residual over the batch and its gradient w.r.t. every weight
/// and bias. A non-finite loss is reported through `finite`, not thrown.
template <typename T>
LossGradient<T> loss_and_grad(const DisplacementModel<T>& model, const Image& second, const PixelBatch<T>& batch,
                              const LossOptions& opt = {}) {
    if (batch.size() == 0) throw InputError("loss needs a non-empty pixel batch");
    const auto n = static_cast<Eigen::Index>(batch.size());
    const auto chunk = static_cast<Eigen::Index>(std::max<std::size_t>(opt.chunk_rows, 1));
    const auto chunks = static_cast<std::size_t>((n + chunk - 1) / chunk);
    const T grad_scale = T(2) / static_cast<T>(n);

    LossGradient<T> out{0.0, model.params.zeros_like(), true};
    auto range = [&](std::size_t c) {
        const Eigen::Index begin = static_cast<Eigen::Index>(c) * chunk;
        return std::pair{begin, std::min(chunk, n - begin)};
    };

    if (chunks == 1 || resolve_threads(opt.threads) == 1) {
        for (std::size_t c = 0; c < chunks; ++c) {
            const auto [begin, rows] = range(c);
            out.loss += detail::accumulate_chunk(model, second, batch, begin, rows, grad_scale, out.grads);
        }
    } else if (opt.deterministic) {
        std::vector<NetworkParams<T>> partial(chunks, model.params.zeros_like());
        std::vector<double> losses(chunks, 0.0);
        parallel_for(chunks, opt.threads, [&](std::size_t c) {
            const auto [begin, rows] = range(c);
            losses[c] = detail::accumulate_chunk(model, second, batch, begin, rows, grad_scale, partial[c]);
        });
        auto dst = out.grads.values();
        for (std::size_t c = 0; c < chunks; ++c) {
            out.loss += losses[c];
            auto src = partial[c].values();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
    } else {
        std::mutex m;
        parallel_for(chunks, opt.threads, [&](std::size_t c) {
            const auto [begin, rows] = range(c);
            NetworkParams<T> local = model.params.zeros_like();
            const double l = detail::accumulate_chunk(model, second, batch, begin, rows, grad_scale, local);
            std::lock_guard lock(m);
            out.loss += l;
            auto dst = out.grads.values();
            auto src = local.values();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        });
    }
    out.loss /= static_cast<double>(n);

    out.finite = std::isfinite(out.loss);
    for (T g : out.grads.values()) {
        if (!std::isfinite(g)) {
            out.finite = false;
            break;
        }
    }
    return out;
}

/// Convenience overload: builds the batch from `first` at the given
/// integer pixel coordinates (n x 2).
template <typename T>
LossGradient<T> loss_and_grad(const DisplacementModel<T>& model, const Image& first, const Image& second,
                              const Eigen::Ref<const PointList<std::type_identity_t<T>>>& pixel_coords, const LossOptions& opt = {}) {
    if (!first.same_shape(second)) throw InputError("image pair dimensions differ");
    std::vector<std::uint32_t> idx(static_cast<std::size_t>(pixel_coords.rows()));
    for (Eigen::Index i = 0; i < pixel_coords.rows(); ++i) {
        const auto x = static_cast<long long>(pixel_coords(i, 0));
        const auto y = static_cast<long long>(pixel_coords(i, 1));
        if (x < 0 || y < 0 || x >= first.width() || y >= first.height() || T(x) != pixel_coords(i, 0) ||
            T(y) != pixel_coords(i, 1)) {
            throw InputError("batch coordinates must be pixel centres of the first image");
        }
        idx[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(y * first.width() + x);
    }
    return loss_and_grad(model, second, make_pixel_batch<T>(first, idx), opt);
}

/// Loss only (no gradient), evaluated over every pixel of the pair.
template <typename T>
double photometric_loss(const DisplacementModel<T>& model, const Image& first, const Image& second) {
    if (!first.same_shape(second)) throw InputError("image pair dimensions differ");
    const auto batch = full_pixel_batch<T>(first);
    const PointList<T> disp = forward_batch(model, batch.coords);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < disp.rows(); ++i) {
        const T s = bilinear_sample(second, batch.coords(i, 0) + disp(i, 0), batch.coords(i, 1) + disp(i, 1));
        const double r = static_cast<double>(batch.targets[static_cast<std::size_t>(i)] - s);
        loss += r * r;
    }
    return loss / static_cast<double>(disp.rows());
}

}  // namespace nvel
