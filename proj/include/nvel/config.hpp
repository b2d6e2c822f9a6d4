#pragma once

// "key = value" configuration files. Recognised keys: beta, n_embed,
// n_layers, layer_size, lr, batch_size, epochs, seed. Blank lines and text
// after '#' are ignored.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "nvel/error.hpp"
#include "nvel/field_model.hpp"
#include "nvel/trainer.hpp"

namespace nvel {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(std::string_view text, std::string_view key, int line) {
    N value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw InputError("config line " + std::to_string(line) + ": bad value for '" + std::string(key) + "'");
    }
    return value;
}

}  // namespace detail

/// Applies the settings found in `text` on top of `base`.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
    std::istringstream in{std::string(text)};
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string_view s = raw;
        if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
        s = detail::trim(s);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string_view::npos) {
            throw InputError("config line " + std::to_string(line) + ": expected 'key = value'");
        }
        const auto key = detail::trim(s.substr(0, eq));
        const auto val = detail::trim(s.substr(eq + 1));
        using detail::parse_number;
        if (key == "beta") base.model.beta = parse_number<double>(val, key, line);
        else if (key == "n_embed") base.model.n_embed = parse_number<int>(val, key, line);
        else if (key == "n_layers") base.model.n_layers = parse_number<int>(val, key, line);
        else if (key == "layer_size") base.model.layer_size = parse_number<int>(val, key, line);
        else if (key == "lr") base.train.lr = parse_number<double>(val, key, line);
        else if (key == "batch_size") base.train.batch_size = parse_number<int>(val, key, line);
        else if (key == "epochs") base.train.epochs = parse_number<int>(val, key, line);
        else if (key == "seed") base.train.seed = parse_number<std::uint64_t>(val, key, line);
        else throw InputError("config line " + std::to_string(line) + ": unknown key '" + std::string(key) + "'");
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

inline std::string format_config(const RunConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "beta = " << c.model.beta << "\nn_embed = " << c.model.n_embed << "\nn_layers = " << c.model.n_layers
        << "\nlayer_size = " << c.model.layer_size << "\nlr = " << c.train.lr
        << "\nbatch_size = " << c.train.batch_size << "\nepochs = " << c.train.epochs << "\nseed = " << c.train.seed
        << '\n';
    return out.str();
}

}  // namespace nvel
