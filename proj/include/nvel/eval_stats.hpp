#pragma once

// Scoring estimated fields against ground truth, conversion to velocity,
// vorticity, and time statistics of a stream of fields (mean, Reynolds
// stress, turbulent kinetic energy, Welch power spectral density).

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "nvel/field_grid.hpp"
#include "nvel/field_model.hpp"
#include "nvel/image.hpp"

namespace nvel {

/// sqrt(mean((du)^2 + (dv)^2)) over all samples.
inline double rmse_dense(const FieldGrid& pred, const FieldGrid& truth) {
    if (pred.width() != truth.width() || pred.height() != truth.height() || pred.u.size() != truth.u.size()) {
        throw InputError("field dimensions differ");
    }
    if (pred.u.empty()) throw InputError("empty field");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.u.size(); ++i) {
        const double du = double{pred.u[i]} - truth.u[i];
        const double dv = double{pred.v[i]} - truth.v[i];
        acc += du * du + dv * dv;
    }
    return std::sqrt(acc / static_cast<double>(pred.u.size()));
}

/// RMSE of predicted vs true displacements at scattered points.
inline double rmse_points(std::span<const Vec2> predicted, std::span<const Vec2> truth) {
    if (predicted.size() != truth.size()) throw InputError("point lists differ in length");
    if (predicted.empty()) throw InputError("no points to evaluate");
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double du = predicted[i].x - truth[i].x, dv = predicted[i].y - truth[i].y;
        acc += du * du + dv * dv;
    }
    return std::sqrt(acc / static_cast<double>(predicted.size()));
}

/// RMSE of the model evaluated at particle positions; normalised by the point count.
template <typename T>
double rmse_at_points(const DisplacementModel<T>& model, std::span<const Vec2> points, std::span<const Vec2> truth) {
    if (points.size() != truth.size()) throw InputError("point lists differ in length");
    if (points.empty()) throw InputError("no points to evaluate");
    PointList<T> coords(static_cast<Eigen::Index>(points.size()), 2);
    for (std::size_t i = 0; i < points.size(); ++i) {
        coords(static_cast<Eigen::Index>(i), 0) = static_cast<T>(points[i].x);
        coords(static_cast<Eigen::Index>(i), 1) = static_cast<T>(points[i].y);
    }
    const PointList<T> d = forward_batch(model, coords);
    std::vector<Vec2> pred(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        pred[i] = {static_cast<double>(d(static_cast<Eigen::Index>(i), 0)),
                   static_cast<double>(d(static_cast<Eigen::Index>(i), 1))};
    }
    return rmse_points(pred, truth);
}

/// U = (C / dt) * displacement.
inline FieldGrid to_velocity(const FieldGrid& grid, const SequenceMeta& meta) {
    meta.validate();
    const double scale = meta.magnification / meta.frame_interval;
    FieldGrid out = grid;
    for (float& x : out.u) x = static_cast<float>(x * scale);
    for (float& x : out.v) x = static_cast<float>(x * scale);
    return out;
}

/// dv/dx - du/dy by central differences, one-sided on the border.
inline ScalarGrid vorticity(const FieldGrid& f) {
    const int w = f.width(), h = f.height();
    if (w < 2 || h < 2) throw InputError("vorticity needs at least a 2x2 grid");
    ScalarGrid out(f.spec);
    auto d_dx = [&](const std::vector<float>& a, int i, int j) {
        const int lo = std::max(i - 1, 0), hi = std::min(i + 1, w - 1);
        return (double{a[f.index(hi, j)]} - a[f.index(lo, j)]) / ((hi - lo) * f.spec.dx);
    };
    auto d_dy = [&](const std::vector<float>& a, int i, int j) {
        const int lo = std::max(j - 1, 0), hi = std::min(j + 1, h - 1);
        return (double{a[f.index(i, hi)]} - a[f.index(i, lo)]) / ((hi - lo) * f.spec.dy);
    };
    for (int j = 0; j < h; ++j) {
        for (int i = 0; i < w; ++i) out(i, j) = d_dx(f.v, i, j) - d_dy(f.u, i, j);
    }
    return out;
}

/// Vector magnitude per sample.
inline ScalarGrid magnitude(const FieldGrid& f) {
    ScalarGrid out(f.spec);
    for (std::size_t i = 0; i < f.u.size(); ++i) out.values[i] = std::hypot(double{f.u[i]}, double{f.v[i]});
    return out;
}

struct FlowStats {
    ScalarGrid mean_u;
    ScalarGrid mean_v;
    ScalarGrid reynolds_uv;  // <u'v'>
    ScalarGrid tke;          // (<u'^2> + <v'^2>) / 2
    std::size_t samples = 0;
};

/// Single-pass (Welford) accumulation of means and second moments in double.
class StatsAccumulator {
public:
    void add(const FieldGrid& f) {
        if (count_ == 0) {
            spec_ = f.spec;
            const std::size_t n = f.spec.size();
            mu_.assign(n, 0.0);
            mv_.assign(n, 0.0);
            m2u_.assign(n, 0.0);
            m2v_.assign(n, 0.0);
            cuv_.assign(n, 0.0);
        } else if (!(f.spec == spec_)) {
            throw InputError("field grid differs from the first field in the stream");
        }
        if (f.u.size() != mu_.size()) throw InputError("field values do not match grid dimensions");
        ++count_;
        const double inv = 1.0 / static_cast<double>(count_);
        for (std::size_t k = 0; k < mu_.size(); ++k) {
            const double du = f.u[k] - mu_[k];
            const double dv = f.v[k] - mv_[k];
            mu_[k] += du * inv;
            mv_[k] += dv * inv;
            m2u_[k] += du * (f.u[k] - mu_[k]);
            m2v_[k] += dv * (f.v[k] - mv_[k]);
            cuv_[k] += du * (f.v[k] - mv_[k]);
        }
    }

    std::size_t count() const noexcept { return count_; }

    FlowStats result() const {
        if (count_ < 2) throw InputError("statistics need at least two fields");
        FlowStats s{ScalarGrid(spec_), ScalarGrid(spec_), ScalarGrid(spec_), ScalarGrid(spec_), count_};
        const double inv = 1.0 / static_cast<double>(count_);
        for (std::size_t k = 0; k < mu_.size(); ++k) {
            s.mean_u.values[k] = mu_[k];
            s.mean_v.values[k] = mv_[k];
            s.reynolds_uv.values[k] = cuv_[k] * inv;
            s.tke.values[k] = 0.5 * (m2u_[k] + m2v_[k]) * inv;
        }
        return s;
    }

private:
    GridSpec spec_;
    std::size_t count_ = 0;
    std::vector<double> mu_, mv_, m2u_, m2v_, cuv_;
};

inline FlowStats accumulate_stats(std::span<const FieldGrid> fields) {
    StatsAccumulator acc;
    for (const FieldGrid& f : fields) acc.add(f);
    return acc.result();
}

struct PsdSeries {
    std::vector<double> frequencies;  // Hz, starting at 0
    std::vector<double> power;        // one-sided density, units^2 / Hz
    double slope = std::numeric_limits<double>::quiet_NaN();
};

struct PsdOptions {
    int segment = 256;     // clipped to the largest power of two <= series length
    double overlap = 0.5;  // fraction of a segment
};

/// Least-squares slope of log10(power) against log10(frequency) for
/// frequencies in [f_lo, f_hi] (zero frequency excluded).
inline double fit_loglog_slope(std::span<const double> freq, std::span<const double> power, double f_lo, double f_hi) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (std::size_t i = 0; i < freq.size(); ++i) {
        if (freq[i] <= 0.0 || freq[i] < f_lo || freq[i] > f_hi || !(power[i] > 0.0)) continue;
        const double x = std::log10(freq[i]), y = std::log10(power[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    if (n < 2) throw InputError("slope fit band contains fewer than two frequencies");
    const double den = n * sxx - sx * sx;
    if (den == 0.0) throw InputError("degenerate slope fit band");
    return (n * sxy - sx * sy) / den;
}

/// Welch estimate: mean-removed, Hann-windowed segments with overlap,
/// averaged periodograms scaled to a one-sided density.
inline PsdSeries psd(std::span<const double> series, double sample_rate, const PsdOptions& opt = {}) {
    if (series.size() < 64) throw InputError("PSD needs at least 64 samples");
    if (!(sample_rate > 0.0)) throw InputError("sample rate must be positive");
    if (!(opt.overlap >= 0.0 && opt.overlap < 1.0)) throw InputError("segment overlap must be in [0, 1)");
    std::size_t seg = 1;
    while (seg * 2 <= std::min<std::size_t>(series.size(), static_cast<std::size_t>(std::max(opt.segment, 2)))) {
        seg *= 2;
    }
    const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(seg * (1.0 - opt.overlap))));

    double mean = 0.0;
    for (double x : series) mean += x;
    mean /= static_cast<double>(series.size());

    std::vector<double> window(seg);
    double wsum2 = 0.0;
    for (std::size_t i = 0; i < seg; ++i) {
        window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(seg));
        wsum2 += window[i] * window[i];
    }

    const std::size_t bins = seg / 2 + 1;
    std::vector<double> in(seg);
    std::vector<std::complex<double>> out(bins);
    // FFTW planning is not thread-safe; execution is.
    static std::mutex planner;
    std::unique_lock lock(planner);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(seg), in.data(),
                                          reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE);
    lock.unlock();
    PsdSeries r;
    r.power.assign(bins, 0.0);
    std::size_t segments = 0;
    for (std::size_t start = 0; start + seg <= series.size(); start += hop, ++segments) {
        for (std::size_t i = 0; i < seg; ++i) in[i] = (series[start + i] - mean) * window[i];
        fftw_execute(plan);
        for (std::size_t k = 0; k < bins; ++k) r.power[k] += std::norm(out[k]);
    }
    lock.lock();
    fftw_destroy_plan(plan);
    lock.unlock();

    const double scale = 1.0 / (sample_rate * wsum2 * static_cast<double>(segments));
    for (std::size_t k = 0; k < bins; ++k) {
        const bool edge = k == 0 || (seg % 2 == 0 && k == bins - 1);
        r.power[k] *= scale * (edge ? 1.0 : 2.0);
        r.frequencies.push_back(static_cast<double>(k) * sample_rate / static_cast<double>(seg));
    }
    return r;
}

/// PSD with the log-log slope fitted over [f_lo, f_hi].
inline PsdSeries psd(std::span<const double> series, double sample_rate, double f_lo, double f_hi,
                     const PsdOptions& opt = {}) {
    PsdSeries r = psd(series, sample_rate, opt);
    r.slope = fit_loglog_slope(r.frequencies, r.power, f_lo, f_hi);
    return r;
}

/// Rows of comma-separated values, one grid row per line.
inline void write_grid_csv(const ScalarGrid& g, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(10);
    for (int j = 0; j < g.spec.height; ++j) {
        for (int i = 0; i < g.spec.width; ++i) out << (i ? "," : "") << g(i, j);
        out << '\n';
    }
}

inline void write_psd_csv(const PsdSeries& p, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(10);
    out << "frequency,power\n";
    for (std::size_t i = 0; i < p.frequencies.size(); ++i) out << p.frequencies[i] << ',' << p.power[i] << '\n';
}

/// Min-max normalised PGM for quick inspection of a scalar grid.
inline void save_heatmap(const ScalarGrid& g, const std::filesystem::path& path) {
    const auto [lo, hi] = std::ranges::minmax(g.values);
    const double span = hi - lo;
    std::vector<float> px(g.values.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = span > 0 ? static_cast<float>((g.values[i] - lo) / span) : 0.0f;
    }
    save_image(Image::from_data(g.spec.width, g.spec.height, std::move(px)), path);
}

}  // namespace nvel
