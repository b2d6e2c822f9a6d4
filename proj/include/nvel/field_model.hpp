#pragma once

// Continuous displacement field: a random Fourier-feature embedding of the
// pixel coordinate followed by a fully-connected tanh network with an affine
// (activation-free) two-component head.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "nvel/error.hpp"

namespace nvel {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
/// n x 2 list of (x, y) coordinates or (dx, dy) displacements.
template <typename T>
using PointList = Eigen::Matrix<T, Eigen::Dynamic, 2, Eigen::RowMajor>;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct ModelConfig {
    double beta = 100.0;  // embedding entries ~ Normal(0, 1 / beta^2)
    int n_embed = 200;
    int n_layers = 1;     // hidden layers
    int layer_size = 100;

    void validate() const {
        if (!(beta > 0.0) || !std::isfinite(beta)) throw InputError("beta must be a positive finite number");
        if (n_embed < 1) throw InputError("n_embed must be >= 1");
        if (n_layers < 1) throw InputError("n_layers must be >= 1");
        if (layer_size < 1) throw InputError("layer_size must be >= 1");
    }

    /// Layer widths: 2*n_embed, layer_size (n_layers times), 2.
    std::vector<int> widths() const {
        std::vector<int> w{2 * n_embed};
        w.insert(w.end(), static_cast<std::size_t>(n_layers), layer_size);
        w.push_back(2);
        return w;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Number of stored scalars: the embedding matrix plus every weight and bias.
inline std::size_t param_count(const ModelConfig& config) {
    config.validate();
    const auto w = config.widths();
    std::size_t n = 2 * static_cast<std::size_t>(config.n_embed);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        n += static_cast<std::size_t>(w[i]) * w[i + 1] + w[i + 1];
    }
    return n;
}

/// Weights and biases of every layer in one contiguous buffer.
///
/// Layer i holds a row-major fan_in x fan_out weight matrix followed by its
/// fan_out bias. The same layout is used for gradients and optimiser state.
template <typename T>
class NetworkParams {
public:
    using WeightMap = Eigen::Map<RowMatrix<T>>;
    using ConstWeightMap = Eigen::Map<const RowMatrix<T>>;
    using BiasMap = Eigen::Map<RowVector<T>>;
    using ConstBiasMap = Eigen::Map<const RowVector<T>>;

    NetworkParams() = default;

    explicit NetworkParams(std::vector<int> widths) : widths_(std::move(widths)) {
        std::size_t off = 0;
        for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
            offsets_.push_back(off);
            off += static_cast<std::size_t>(widths_[i]) * widths_[i + 1] + widths_[i + 1];
        }
        values_.assign(off, T{0});
    }

    int layer_count() const noexcept { return static_cast<int>(offsets_.size()); }
    int fan_in(int layer) const noexcept { return widths_[layer]; }
    int fan_out(int layer) const noexcept { return widths_[layer + 1]; }
    const std::vector<int>& widths() const noexcept { return widths_; }

    WeightMap weight(int layer) { return {values_.data() + offsets_[layer], fan_in(layer), fan_out(layer)}; }
    ConstWeightMap weight(int layer) const {
        return {values_.data() + offsets_[layer], fan_in(layer), fan_out(layer)};
    }
    BiasMap bias(int layer) { return {bias_ptr(layer), fan_out(layer)}; }
    ConstBiasMap bias(int layer) const { return {bias_ptr(layer), fan_out(layer)}; }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

    bool same_shape(const NetworkParams& other) const noexcept { return widths_ == other.widths_; }

    /// Same-shaped buffer filled with zeros.
    NetworkParams zeros_like() const { return NetworkParams(widths_); }

    template <typename U>
    NetworkParams<U> cast() const {
        NetworkParams<U> out(widths_);
        auto dst = out.values();
        for (std::size_t i = 0; i < values_.size(); ++i) dst[i] = static_cast<U>(values_[i]);
        return out;
    }

    friend bool operator==(const NetworkParams&, const NetworkParams&) = default;

private:
    T* bias_ptr(int layer) {
        return values_.data() + offsets_[layer] + static_cast<std::size_t>(fan_in(layer)) * fan_out(layer);
    }
    const T* bias_ptr(int layer) const {
        return values_.data() + offsets_[layer] + static_cast<std::size_t>(fan_in(layer)) * fan_out(layer);
    }

    std::vector<int> widths_;
    std::vector<std::size_t> offsets_;
    std::vector<T> values_;
};

/// Deterministic random source for model initialisation and batch shuffling.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via the Box-Muller transform.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename T>
struct DisplacementModel {
    ModelConfig config;
    /// n_embed x 2 embedding matrix; fixed after initialisation.
    PointList<T> embedding;
    NetworkParams<T> params;

    template <typename U>
    DisplacementModel<U> cast() const {
        return {config, embedding.template cast<U>(), params.template cast<U>()};
    }

    friend bool operator==(const DisplacementModel& a, const DisplacementModel& b) {
        return a.config == b.config && a.embedding == b.embedding && a.params == b.params;
    }
};

/// Samples the embedding from Normal(0, 1/beta^2); weights uniform in
/// +-sqrt(6 / (fan_in + fan_out)); biases zero.
template <typename T = float>
DisplacementModel<T> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    DisplacementModel<T> m{config, PointList<T>(config.n_embed, 2), NetworkParams<T>(config.widths())};
    const double sigma = 1.0 / config.beta;
    for (int i = 0; i < config.n_embed; ++i) {
        for (int j = 0; j < 2; ++j) m.embedding(i, j) = static_cast<T>(sigma * rng.normal());
    }
    for (int l = 0; l < m.params.layer_count(); ++l) {
        const double limit = std::sqrt(6.0 / (m.params.fan_in(l) + m.params.fan_out(l)));
        auto w = m.params.weight(l);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<T>(rng.uniform(-limit, limit));
        }
    }
    return m;
}

/// Rescales the embedding so raw pixel coordinates behave like coordinates
/// normalised to [0, 1] over a width x height image.
template <typename T>
void normalize_coordinates(DisplacementModel<T>& model, int width, int height) {
    if (width < 1 || height < 1) throw InputError("normalisation needs a positive image size");
    model.embedding.col(0) /= static_cast<T>(width);
    model.embedding.col(1) /= static_cast<T>(height);
}

/// gamma(v) = [sin(B v), cos(B v)] for every row of coords (n x 2n_embed).
template <typename T>
RowMatrix<T> embed_batch(const DisplacementModel<T>& model, const Eigen::Ref<const PointList<std::type_identity_t<T>>>& coords) {
    const Eigen::Index ne = model.embedding.rows();
    RowMatrix<T> phase = coords * model.embedding.transpose();
    RowMatrix<T> out(coords.rows(), 2 * ne);
    out.leftCols(ne) = phase.array().sin().matrix();
    out.rightCols(ne) = phase.array().cos().matrix();
    return out;
}

template <typename T>
std::vector<T> embed(const DisplacementModel<T>& model, Vec2 v) {
    PointList<T> p(1, 2);
    p << static_cast<T>(v.x), static_cast<T>(v.y);
    const RowMatrix<T> e = embed_batch(model, p);
    return {e.data(), e.data() + e.size()};
}

/// Runs the network on embedded features. If `activations` is non-null it
/// receives the input features and every hidden layer output (for backprop).
template <typename T>
PointList<T> forward_features(const NetworkParams<T>& params, RowMatrix<T> features,
                              std::vector<RowMatrix<T>>* activations = nullptr) {
    const int last = params.layer_count() - 1;
    if (activations) activations->clear();
    // Products run on owned (aligned) copies of the weights: Eigen picks
    // scalar or packet code by address, and the two round differently.
    for (int l = 0; l < last; ++l) {
        const RowMatrix<T> w = params.weight(l);
        const RowVector<T> b = params.bias(l);
        RowMatrix<T> z = features * w;
        z.rowwise() += b;
        if (activations) activations->push_back(std::move(features));
        features = z.array().tanh().matrix();
    }
    const RowMatrix<T> w = params.weight(last);
    const RowVector<T> b = params.bias(last);
    PointList<T> out = features * w;
    out.rowwise() += b;
    if (activations) activations->push_back(std::move(features));
    return out;
}

/// Displacements (dx, dy) in pixels for every coordinate row.
template <typename T>
PointList<T> forward_batch(const DisplacementModel<T>& model, const Eigen::Ref<const PointList<std::type_identity_t<T>>>& coords) {
    if (coords.rows() == 0) return PointList<T>(0, 2);
    return forward_features(model.params, embed_batch(model, coords));
}

template <typename T>
Vec2 forward(const DisplacementModel<T>& model, Vec2 v) {
    PointList<T> p(1, 2);
    p << static_cast<T>(v.x), static_cast<T>(v.y);
    const PointList<T> d = forward_batch(model, p);
    return {static_cast<double>(d(0, 0)), static_cast<double>(d(0, 1))};
}

/// Analytic Jacobian d(dx, dy)/d(x, y) at v: rows are output components.
template <typename T>
Eigen::Matrix<T, 2, 2> jacobian(const DisplacementModel<T>& model, Vec2 v) {
    const Eigen::Index ne = model.embedding.rows();
    const Eigen::Matrix<T, 2, 1> p(static_cast<T>(v.x), static_cast<T>(v.y));
    const Eigen::Matrix<T, Eigen::Dynamic, 1> phase = model.embedding * p;

    // Tangent of the features w.r.t. (x, y): 2n_embed x 2.
    Eigen::Matrix<T, Eigen::Dynamic, 1> x(2 * ne);
    Eigen::Matrix<T, Eigen::Dynamic, 2> dx(2 * ne, 2);
    for (Eigen::Index k = 0; k < ne; ++k) {
        const T s = std::sin(phase(k));
        const T c = std::cos(phase(k));
        x(k) = s;
        x(k + ne) = c;
        dx.row(k) = c * model.embedding.row(k);
        dx.row(k + ne) = -s * model.embedding.row(k);
    }
    const auto& params = model.params;
    const int last = params.layer_count() - 1;
    for (int l = 0; l < last; ++l) {
        Eigen::Matrix<T, Eigen::Dynamic, 1> z = params.weight(l).transpose() * x + params.bias(l).transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 2> dz = params.weight(l).transpose() * dx;
        x = z.array().tanh().matrix();
        for (Eigen::Index k = 0; k < x.size(); ++k) dz.row(k) *= T{1} - x(k) * x(k);
        dx = std::move(dz);
    }
    return params.weight(last).transpose() * dx;
}

// ---------------------------------------------------------------------------
// NVM1 model files: "NVM1", then little-endian beta (f32), n_embed, n_layers,
// layer_size (u32), the embedding row-major (f32), then per layer the
// row-major weights followed by the biases (f32).

inline constexpr std::size_t kModelHeaderBytes = 20;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_f32(std::vector<unsigned char>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(std::span<const unsigned char> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[at + i]} << (8 * i);
    return v;
}
inline float get_f32(std::span<const unsigned char> in, std::size_t at) {
    return std::bit_cast<float>(get_u32(in, at));
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

}  // namespace detail

template <typename T>
std::vector<unsigned char> encode_model(const DisplacementModel<T>& model) {
    model.config.validate();
    std::vector<unsigned char> out{'N', 'V', 'M', '1'};
    out.reserve(kModelHeaderBytes + 4 * param_count(model.config));
    detail::put_f32(out, static_cast<float>(model.config.beta));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.n_embed));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.n_layers));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.layer_size));
    for (Eigen::Index i = 0; i < model.embedding.rows(); ++i) {
        detail::put_f32(out, static_cast<float>(model.embedding(i, 0)));
        detail::put_f32(out, static_cast<float>(model.embedding(i, 1)));
    }
    for (T v : model.params.values()) detail::put_f32(out, static_cast<float>(v));
    return out;
}

template <typename T = float>
DisplacementModel<T> decode_model(std::span<const unsigned char> bytes) {
    if (bytes.size() < 4) throw InputError("model file truncated");
    if (!(bytes[0] == 'N' && bytes[1] == 'V' && bytes[2] == 'M')) throw InputError("not a model file (bad magic)");
    if (bytes[3] != '1') throw InputError("unsupported model format version");
    if (bytes.size() < kModelHeaderBytes) throw InputError("model file truncated");

    const float beta = detail::get_f32(bytes, 4);
    const std::uint32_t ne = detail::get_u32(bytes, 8);
    const std::uint32_t nl = detail::get_u32(bytes, 12);
    const std::uint32_t sl = detail::get_u32(bytes, 16);
    constexpr std::uint32_t limit = 1u << 20;
    if (ne == 0 || nl == 0 || sl == 0 || ne > limit || nl > 4096 || sl > limit || !(beta > 0.0f) ||
        !std::isfinite(beta)) {
        throw InputError("model header has an invalid architecture");
    }
    ModelConfig config{beta, static_cast<int>(ne), static_cast<int>(nl), static_cast<int>(sl)};
    const std::size_t expected = kModelHeaderBytes + 4 * param_count(config);
    if (bytes.size() < expected) throw InputError("model file truncated");
    if (bytes.size() > expected) throw InputError("model file size inconsistent with its architecture");

    DisplacementModel<T> m{config, PointList<T>(config.n_embed, 2), NetworkParams<T>(config.widths())};
    std::size_t at = kModelHeaderBytes;
    auto next = [&] {
        const float v = detail::get_f32(bytes, at);
        at += 4;
        if (!std::isfinite(v)) throw InputError("model file contains non-finite values");
        return static_cast<T>(v);
    };
    for (int i = 0; i < config.n_embed; ++i) {
        m.embedding(i, 0) = next();
        m.embedding(i, 1) = next();
    }
    for (T& v : m.params.values()) v = next();
    return m;
}

template <typename T>
void save_model(const DisplacementModel<T>& model, const std::filesystem::path& path) {
    detail::write_file(path, encode_model(model));
}

template <typename T = float>
DisplacementModel<T> load_model(const std::filesystem::path& path) {
    return decode_model<T>(detail::read_file(path));
}

}  // namespace nvel
