#pragma once

// Dense two-component fields sampled on a uniform grid, and the NVF1 file
// format: "NVF1", little-endian u32 width, u32 height, f32 x-origin,
// y-origin, x-spacing, y-spacing, then width*height (u, v) f32 pairs in
// row-major order.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nvel/error.hpp"
#include "nvel/field_model.hpp"

namespace nvel {

struct GridSpec {
    int width = 0;
    int height = 0;
    double x0 = 0.0;
    double y0 = 0.0;
    double dx = 1.0;
    double dy = 1.0;

    std::size_t size() const noexcept { return static_cast<std::size_t>(width) * height; }
    double x(int i) const noexcept { return x0 + i * dx; }
    double y(int j) const noexcept { return y0 + j * dy; }

    void validate() const {
        if (width < 1 || height < 1) throw InputError("grid dimensions must be positive");
        if (!std::isfinite(x0) || !std::isfinite(y0) || !(dx > 0.0) || !(dy > 0.0) || !std::isfinite(dx) ||
            !std::isfinite(dy)) {
            throw InputError("grid origin must be finite and spacing positive");
        }
    }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// One sample per pixel centre of a width x height image.
inline GridSpec pixel_grid(int width, int height) { return {width, height, 0.0, 0.0, 1.0, 1.0}; }

/// `factor` samples per pixel along each axis, starting at the first pixel centre.
inline GridSpec super_resolved_grid(int width, int height, int factor) {
    if (factor < 1) throw InputError("super-resolution factor must be >= 1");
    // spacing rounded to f32 so the grid survives an NVF1 round trip unchanged
    const double step = static_cast<float>(1.0 / factor);
    return {width * factor, height * factor, 0.0, 0.0, step, step};
}

struct FieldGrid {
    GridSpec spec;
    std::vector<float> u;
    std::vector<float> v;

    FieldGrid() = default;
    explicit FieldGrid(const GridSpec& s) : spec(s), u(s.size(), 0.0f), v(s.size(), 0.0f) { s.validate(); }

    int width() const noexcept { return spec.width; }
    int height() const noexcept { return spec.height; }
    std::size_t index(int i, int j) const noexcept { return static_cast<std::size_t>(j) * spec.width + i; }

    friend bool operator==(const FieldGrid&, const FieldGrid&) = default;
};

/// Scalar companion of FieldGrid (vorticity, statistics).
struct ScalarGrid {
    GridSpec spec;
    std::vector<double> values;

    ScalarGrid() = default;
    explicit ScalarGrid(const GridSpec& s) : spec(s), values(s.size(), 0.0) {}

    double operator()(int i, int j) const noexcept { return values[static_cast<std::size_t>(j) * spec.width + i]; }
    double& operator()(int i, int j) noexcept { return values[static_cast<std::size_t>(j) * spec.width + i]; }
};

/// Evaluates the model on every grid coordinate; no interpolation involved,
/// so sub-pixel spacing gives genuine super-resolution.
template <typename T>
FieldGrid sample_grid(const DisplacementModel<T>& model, const GridSpec& spec) {
    FieldGrid out(spec);
    constexpr std::size_t kRows = 4096;
    const std::size_t n = spec.size();
    for (std::size_t begin = 0; begin < n; begin += kRows) {
        const std::size_t rows = std::min(kRows, n - begin);
        PointList<T> coords(static_cast<Eigen::Index>(rows), 2);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t k = begin + r;
            coords(static_cast<Eigen::Index>(r), 0) = static_cast<T>(spec.x(static_cast<int>(k % spec.width)));
            coords(static_cast<Eigen::Index>(r), 1) = static_cast<T>(spec.y(static_cast<int>(k / spec.width)));
        }
        const PointList<T> d = forward_batch(model, coords);
        for (std::size_t r = 0; r < rows; ++r) {
            out.u[begin + r] = static_cast<float>(d(static_cast<Eigen::Index>(r), 0));
            out.v[begin + r] = static_cast<float>(d(static_cast<Eigen::Index>(r), 1));
        }
    }
    return out;
}

/// Evaluates the grid from xs (columns) and ys (rows); both must be uniformly spaced.
template <typename T>
FieldGrid sample_grid(const DisplacementModel<T>& model, std::span<const double> xs, std::span<const double> ys) {
    auto spacing = [](std::span<const double> c) {
        if (c.empty()) throw InputError("grid coordinate list is empty");
        if (c.size() == 1) return 1.0;
        const double d = c[1] - c[0];
        for (std::size_t i = 1; i < c.size(); ++i) {
            if (std::abs((c[i] - c[i - 1]) - d) > 1e-9 * std::max(1.0, std::abs(d))) {
                throw InputError("grid coordinates must be uniformly spaced");
            }
        }
        return d;
    };
    const GridSpec spec{static_cast<int>(xs.size()), static_cast<int>(ys.size()), xs.front(), ys.front(),
                        spacing(xs), spacing(ys)};
    return sample_grid(model, spec);
}

inline constexpr std::size_t kFieldHeaderBytes = 28;

inline std::vector<unsigned char> encode_field(const FieldGrid& f) {
    f.spec.validate();
    if (f.u.size() != f.spec.size() || f.v.size() != f.spec.size()) {
        throw InputError("field values do not match grid dimensions");
    }
    std::vector<unsigned char> out{'N', 'V', 'F', '1'};
    out.reserve(kFieldHeaderBytes + 8 * f.spec.size());
    detail::put_u32(out, static_cast<std::uint32_t>(f.spec.width));
    detail::put_u32(out, static_cast<std::uint32_t>(f.spec.height));
    detail::put_f32(out, static_cast<float>(f.spec.x0));
    detail::put_f32(out, static_cast<float>(f.spec.y0));
    detail::put_f32(out, static_cast<float>(f.spec.dx));
    detail::put_f32(out, static_cast<float>(f.spec.dy));
    for (std::size_t i = 0; i < f.u.size(); ++i) {
        detail::put_f32(out, f.u[i]);
        detail::put_f32(out, f.v[i]);
    }
    return out;
}

inline FieldGrid decode_field(std::span<const unsigned char> bytes) {
    if (bytes.size() < 4) throw InputError("field file truncated");
    if (!(bytes[0] == 'N' && bytes[1] == 'V' && bytes[2] == 'F')) throw InputError("not a field file (bad magic)");
    if (bytes[3] != '1') throw InputError("unsupported field format version");
    if (bytes.size() < kFieldHeaderBytes) throw InputError("field file truncated");
    const std::uint32_t w = detail::get_u32(bytes, 4);
    const std::uint32_t h = detail::get_u32(bytes, 8);
    if (w == 0 || h == 0 || w > (1u << 20) || h > (1u << 20)) throw InputError("field header has invalid dimensions");
    GridSpec spec{static_cast<int>(w), static_cast<int>(h), detail::get_f32(bytes, 12), detail::get_f32(bytes, 16),
                  detail::get_f32(bytes, 20), detail::get_f32(bytes, 24)};
    spec.validate();
    const std::size_t expected = kFieldHeaderBytes + 8 * spec.size();
    if (bytes.size() < expected) throw InputError("field file truncated");
    if (bytes.size() > expected) throw InputError("field file size inconsistent with its dimensions");
    FieldGrid f(spec);
    std::size_t at = kFieldHeaderBytes;
    for (std::size_t i = 0; i < spec.size(); ++i, at += 8) {
        f.u[i] = detail::get_f32(bytes, at);
        f.v[i] = detail::get_f32(bytes, at + 4);
        if (!std::isfinite(f.u[i]) || !std::isfinite(f.v[i])) throw InputError("field file contains non-finite values");
    }
    return f;
}

inline void save_field(const FieldGrid& f, const std::filesystem::path& path) {
    detail::write_file(path, encode_field(f));
}

inline FieldGrid load_field(const std::filesystem::path& path) { return decode_field(detail::read_file(path)); }

// Middlebury .flo: float 202021.25 ("PIEH"), int32 width, int32 height, then
// interleaved (u, v) float32 rows, little-endian. Used by external optical
// flow benchmarks for ground truth.
inline FieldGrid decode_flo(std::span<const unsigned char> bytes) {
    if (bytes.size() < 12 || !(bytes[0] == 'P' && bytes[1] == 'I' && bytes[2] == 'E' && bytes[3] == 'H')) {
        throw InputError("not a .flo file");
    }
    const std::uint32_t w = detail::get_u32(bytes, 4);
    const std::uint32_t h = detail::get_u32(bytes, 8);
    if (w == 0 || h == 0 || w > (1u << 20) || h > (1u << 20)) throw InputError(".flo header has invalid dimensions");
    const GridSpec spec = pixel_grid(static_cast<int>(w), static_cast<int>(h));
    if (bytes.size() != 12 + 8 * spec.size()) throw InputError(".flo file size inconsistent with its dimensions");
    FieldGrid f(spec);
    for (std::size_t i = 0, at = 12; i < spec.size(); ++i, at += 8) {
        f.u[i] = detail::get_f32(bytes, at);
        f.v[i] = detail::get_f32(bytes, at + 4);
    }
    return f;
}

/// NVF1 or Middlebury .flo, by magic.
inline FieldGrid load_any_field(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() >= 4 && bytes[0] == 'P' && bytes[1] == 'I' && bytes[2] == 'E' && bytes[3] == 'H') {
        return decode_flo(bytes);
    }
    return decode_field(bytes);
}

}  // namespace nvel
