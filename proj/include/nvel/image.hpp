#pragma once

// Grayscale images: PGM/PNG I/O and the preprocessing chain applied to
// experimental recordings (background removal, 3x3 Gaussian, CLAHE).
//
// Coordinates: origin at the top-left pixel centre, x grows along columns,
// y grows down the rows. Intensities are stored as float in [0, 1].

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <png.h>

#include "nvel/error.hpp"

namespace nvel {

class Image {
public:
    Image() = default;

    Image(int width, int height, float fill = 0.0f)
        : width_(width), height_(height) {
        if (width < 1 || height < 1) {
            throw InputError("image dimensions must be positive, got " + std::to_string(width) +
                             "x" + std::to_string(height));
        }
        if (!(fill >= 0.0f && fill <= 1.0f)) {
            throw InputError("image fill value outside [0,1]");
        }
        data_.assign(static_cast<std::size_t>(width) * height, fill);
    }

    /// Wraps row-major intensities; rejects wrong sizes and values outside [0,1].
    static Image from_data(int width, int height, std::vector<float> data) {
        Image img(width, height);
        if (data.size() != img.data_.size()) {
            throw InputError("image data length " + std::to_string(data.size()) +
                             " does not match " + std::to_string(width) + "x" +
                             std::to_string(height));
        }
        for (float v : data) {
            if (!(v >= 0.0f && v <= 1.0f)) {
                throw InputError("image intensity outside [0,1] or not finite");
            }
        }
        img.data_ = std::move(data);
        return img;
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float operator()(int x, int y) const noexcept {
        return data_[static_cast<std::size_t>(y) * width_ + x];
    }
    float& operator()(int x, int y) noexcept {
        return data_[static_cast<std::size_t>(y) * width_ + x];
    }

    std::span<const float> pixels() const noexcept { return data_; }
    std::span<float> pixels() noexcept { return data_; }

    bool same_shape(const Image& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<float> data_;
};

/// Recording metadata used to turn pixel displacements into velocities.
struct SequenceMeta {
    double frame_interval = 1.0;  // seconds between frames
    double magnification = 1.0;   // physical length per pixel

    void validate() const {
        if (!(frame_interval > 0.0) || !(magnification > 0.0)) {
            throw InputError("frame interval and magnification must be positive");
        }
    }
};

namespace detail {

inline std::string read_token(std::istream& in) {
    std::string tok;
    char c = 0;
    while (in.get(c)) {
        if (c == '#') {
            std::string ignored;
            std::getline(in, ignored);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

inline int parse_header_int(std::istream& in, const std::string& path, const char* what) {
    const std::string tok = read_token(in);
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw InputError(path + ": malformed PGM header (" + what + ")");
    }
}

inline Image load_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    const std::string name = path.string();
    if (read_token(in) != "P5") throw InputError(name + ": only binary PGM (P5) is supported");
    const int w = parse_header_int(in, name, "width");
    const int h = parse_header_int(in, name, "height");
    const int maxval = parse_header_int(in, name, "maxval");
    if (w < 1 || h < 1) throw InputError(name + ": invalid dimensions");
    if (maxval < 1 || maxval > 65535) throw InputError(name + ": unsupported maxval");
    // read_token consumed exactly one whitespace byte after maxval

    const std::size_t n = static_cast<std::size_t>(w) * h;
    const bool wide = maxval > 255;
    std::vector<unsigned char> raw(n * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw InputError(name + ": truncated pixel data");
    }
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = wide ? (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
        if (v > static_cast<unsigned>(maxval)) throw InputError(name + ": pixel exceeds maxval");
        data[i] = static_cast<float>(v) / static_cast<float>(maxval);
    }
    return Image::from_data(w, h, std::move(data));
}

inline Image load_png(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(name.c_str(), "rb"), &std::fclose);
    if (!fp) throw InputError("cannot open " + name);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw InputError(name + ": libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw InputError(name + ": libpng initialisation failed");
    }

    std::string failure;
    int w = 0, h = 0, depth = 0;
    std::vector<png_byte> raw;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw InputError(name + ": corrupt PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY) {
        failure = "only single-channel grayscale PNG is supported";
    } else if (depth != 8 && depth != 16) {
        failure = "unsupported bit depth " + std::to_string(depth);
    } else {
        const std::size_t stride = static_cast<std::size_t>(w) * (depth / 8);
        raw.resize(stride * h);
        rows.resize(h);
        for (int y = 0; y < h; ++y) rows[y] = raw.data() + stride * y;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (!failure.empty()) throw InputError(name + ": " + failure);

    const std::size_t n = static_cast<std::size_t>(w) * h;
    std::vector<float> data(n);
    if (depth == 8) {
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(raw[i]) / 255.0f;
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned v = (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1];
            data[i] = static_cast<float>(v) / 65535.0f;
        }
    }
    return Image::from_data(w, h, std::move(data));
}

inline bool has_magic(const std::filesystem::path& path, std::span<const unsigned char> magic) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> buf(magic.size());
    if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size()))) return false;
    return std::equal(magic.begin(), magic.end(), buf.begin(),
                      [](unsigned char a, char b) { return a == static_cast<unsigned char>(b); });
}

// Half-sample symmetric extension: -1 -> 0, n -> n-1.
inline int reflect_index(int i, int n) noexcept {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

}  // namespace detail

/// Loads an 8- or 16-bit grayscale PGM (P5) or PNG, dispatching on file contents.
inline Image load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InputError("no such file: " + path.string());
    static constexpr std::array<unsigned char, 8> png_sig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    static constexpr std::array<unsigned char, 2> pgm_sig{'P', '5'};
    if (detail::has_magic(path, png_sig)) return detail::load_png(path);
    if (detail::has_magic(path, pgm_sig)) return detail::load_pgm(path);
    throw InputError(path.string() + ": not a binary PGM or PNG file");
}

/// 8-bit quantisation used by save_image: round(v * 255), halves rounded up.
inline std::uint8_t quantize8(float v) noexcept {
    const float scaled = std::clamp(v, 0.0f, 1.0f) * 255.0f;
    return static_cast<std::uint8_t>(std::floor(scaled + 0.5f));
}

/// Writes an 8-bit binary PGM.
inline void save_image(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
    std::vector<char> bytes(img.size());
    std::ranges::transform(img.pixels(), bytes.begin(),
                           [](float v) { return static_cast<char>(quantize8(v)); });
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

/// Removes the static background, taken as the per-pixel temporal minimum.
inline std::vector<Image> subtract_background(std::span<const Image> frames) {
    if (frames.size() < 2) throw InputError("background subtraction needs at least two frames");
    for (const Image& f : frames) {
        if (!f.same_shape(frames.front())) throw InputError("frame dimensions differ");
    }
    std::vector<float> background(frames.front().pixels().begin(), frames.front().pixels().end());
    for (const Image& f : frames.subspan(1)) {
        auto px = f.pixels();
        for (std::size_t i = 0; i < background.size(); ++i) background[i] = std::min(background[i], px[i]);
    }
    std::vector<Image> out;
    out.reserve(frames.size());
    for (const Image& f : frames) {
        Image r = f;
        auto px = r.pixels();
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] - background[i], 0.0f, 1.0f);
        out.push_back(std::move(r));
    }
    return out;
}

/// Convolution with the normalised binomial kernel [1 2 1; 2 4 2; 1 2 1] / 16.
inline Image gaussian_filter_3x3(const Image& img) {
    static constexpr std::array<float, 3> taps{0.25f, 0.5f, 0.25f};
    const int w = img.width();
    const int h = img.height();
    Image tmp(w, h);
    Image out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int k = -1; k <= 1; ++k) acc += taps[k + 1] * img(detail::reflect_index(x + k, w), y);
            tmp(x, y) = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int k = -1; k <= 1; ++k) acc += taps[k + 1] * tmp(x, detail::reflect_index(y + k, h));
            out(x, y) = std::clamp(acc, 0.0f, 1.0f);
        }
    }
    return out;
}

/// Contrast-limited adaptive histogram equalisation.
///
/// The image is split into tiles x tiles regions. Each region gets a 256-bin
/// histogram clipped at clip_limit * (pixels / 256); the clipped mass is spread
/// evenly over all bins and the normalised CDF becomes that tile's mapping.
/// Pixels blend the mappings of the four nearest tile centres bilinearly.
/// An infinite clip_limit disables clipping.
inline Image clahe(const Image& img, int tiles = 8, double clip_limit = 2.0) {
    if (tiles < 1) throw InputError("CLAHE needs at least one tile per axis");
    if (!(clip_limit > 0.0)) throw InputError("CLAHE clip limit must be positive");
    const int w = img.width();
    const int h = img.height();
    if (w < tiles || h < tiles) throw InputError("image smaller than the CLAHE tile grid");

    constexpr int bins = 256;
    auto bin_of = [](float v) { return static_cast<int>(quantize8(v)); };

    std::vector<int> xs(tiles + 1), ys(tiles + 1);
    for (int i = 0; i <= tiles; ++i) {
        xs[i] = static_cast<int>(static_cast<long long>(i) * w / tiles);
        ys[i] = static_cast<int>(static_cast<long long>(i) * h / tiles);
    }

    std::vector<std::array<float, bins>> lut(static_cast<std::size_t>(tiles) * tiles);
    for (int ty = 0; ty < tiles; ++ty) {
        for (int tx = 0; tx < tiles; ++tx) {
            std::array<double, bins> hist{};
            for (int y = ys[ty]; y < ys[ty + 1]; ++y) {
                for (int x = xs[tx]; x < xs[tx + 1]; ++x) hist[bin_of(img(x, y))] += 1.0;
            }
            const double count = static_cast<double>(xs[tx + 1] - xs[tx]) * (ys[ty + 1] - ys[ty]);
            if (std::isfinite(clip_limit)) {
                const double limit = std::max(1.0, clip_limit * count / bins);
                double excess = 0.0;
                for (double& b : hist) {
                    if (b > limit) {
                        excess += b - limit;
                        b = limit;
                    }
                }
                for (double& b : hist) b += excess / bins;
            }
            auto& table = lut[static_cast<std::size_t>(ty) * tiles + tx];
            double cdf = 0.0;
            for (int b = 0; b < bins; ++b) {
                cdf += hist[b];
                table[b] = static_cast<float>(std::min(1.0, cdf / count));
            }
        }
    }

    std::vector<double> cx(tiles), cy(tiles);
    for (int i = 0; i < tiles; ++i) {
        cx[i] = 0.5 * (xs[i] + xs[i + 1] - 1);
        cy[i] = 0.5 * (ys[i] + ys[i + 1] - 1);
    }
    // Neighbouring tile pair and blend weight along one axis.
    auto locate = [tiles](const std::vector<double>& centres, double p) {
        if (tiles == 1 || p <= centres.front()) return std::tuple{0, 0, 0.0};
        if (p >= centres.back()) return std::tuple{tiles - 1, tiles - 1, 0.0};
        int i = 0;
        while (centres[i + 1] < p) ++i;
        return std::tuple{i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i])};
    };

    Image out(w, h);
    for (int y = 0; y < h; ++y) {
        const auto [y0, y1, fy] = locate(cy, y);
        for (int x = 0; x < w; ++x) {
            const auto [x0, x1, fx] = locate(cx, x);
            const int b = bin_of(img(x, y));
            auto at = [&](int tx, int ty) { return double{lut[static_cast<std::size_t>(ty) * tiles + tx][b]}; };
            const double v = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x1, y0)) +
                             fy * ((1 - fx) * at(x0, y1) + fx * at(x1, y1));
            out(x, y) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
        }
    }
    return out;
}

struct PreprocessOptions {
    bool background = true;
    bool gaussian = true;
    bool equalize = true;
    int clahe_tiles = 8;
    double clahe_clip = 2.0;
};

/// Background removal, then 3x3 Gaussian, then CLAHE, each optional.
inline std::vector<Image> preprocess(std::span<const Image> frames, const PreprocessOptions& opt = {}) {
    std::vector<Image> out = opt.background ? subtract_background(frames)
                                            : std::vector<Image>(frames.begin(), frames.end());
    for (Image& f : out) {
        if (opt.gaussian) f = gaussian_filter_3x3(f);
        if (opt.equalize) f = clahe(f, opt.clahe_tiles, opt.clahe_clip);
    }
    return out;
}

}  // namespace nvel
