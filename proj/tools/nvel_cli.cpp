// nvel: command-line front end.
//
// Exit codes: 0 success, 1 training diverged, 2 usage or input error.

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nvel/nvel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDiverged = 1;
constexpr int kExitInput = 2;

// ---------------------------------------------------------------------------
// Shared model/training flags

struct SharedFlags {
    std::string config;
    std::optional<double> beta;
    std::optional<int> n_embed;
    std::optional<int> layers;
    std::optional<int> layer_size;
    std::optional<double> lr;
    std::optional<int> batch_size;
    std::optional<int> epochs;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    int threads = 1;
    bool deterministic = false;
    bool normalize_coords = false;
};

void add_shared(CLI::App& app, SharedFlags& f) {
    app.add_option("--config", f.config, "key = value settings file")->check(CLI::ExistingFile);
    app.add_option("--beta", f.beta, "embedding scale (entries ~ N(0, 1/beta^2))");
    app.add_option("--n-embed", f.n_embed, "number of Fourier features");
    app.add_option("--layers", f.layers, "hidden layers");
    app.add_option("--layer-size", f.layer_size, "neurons per hidden layer");
    app.add_option("--lr", f.lr, "Adam learning rate");
    app.add_option("--batch-size", f.batch_size, "pixels per mini-batch");
    app.add_option("--epochs", f.epochs, "training epochs");
    app.add_option("--seed", f.seed, "random seed");
    app.add_option("--jobs", f.jobs, "parallel ensemble members (0 = all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--threads", f.threads, "threads per loss evaluation (0 = all cores)")
        ->check(CLI::NonNegativeNumber);
    app.add_flag("--deterministic", f.deterministic, "fixed-order reductions; byte-identical reruns");
    app.add_flag("--normalize-coords", f.normalize_coords, "scale coordinates by image size before embedding");
}

void apply_flags(nvel::RunConfig& c, const SharedFlags& f) {
    if (f.beta) c.model.beta = *f.beta;
    if (f.n_embed) c.model.n_embed = *f.n_embed;
    if (f.layers) c.model.n_layers = *f.layers;
    if (f.layer_size) c.model.layer_size = *f.layer_size;
    if (f.lr) c.train.lr = *f.lr;
    if (f.batch_size) c.train.batch_size = *f.batch_size;
    if (f.epochs) c.train.epochs = *f.epochs;
    if (f.seed) c.train.seed = *f.seed;
    c.train.deterministic = f.deterministic;
    c.train.threads = f.threads;
}

// defaults < config file < flags
nvel::RunConfig resolve_config(const SharedFlags& f, nvel::RunConfig base = {}) {
    if (!f.config.empty()) base = nvel::load_config(f.config, base);
    apply_flags(base, f);
    base.model.validate();
    base.train.validate();
    return base;
}

// ---------------------------------------------------------------------------
// Manifest helpers

json config_json(const nvel::RunConfig& c) {
    return {{"beta", c.model.beta},
            {"n_embed", c.model.n_embed},
            {"n_layers", c.model.n_layers},
            {"layer_size", c.model.layer_size},
            {"lr", c.train.lr},
            {"batch_size", c.train.batch_size},
            {"epochs", c.train.epochs},
            {"adam_beta1", c.train.beta1},
            {"adam_beta2", c.train.beta2},
            {"adam_eps", c.train.eps},
            {"seed", c.train.seed},
            {"deterministic", c.train.deterministic},
            {"threads", c.train.threads}};
}

json report_json(const nvel::TrainReport& r) {
    json j{{"epochs_run", r.epochs_run()}, {"diverged", r.diverged}, {"wall_time_s", r.wall_time}};
    j["final_loss"] = std::isfinite(r.final_loss) ? json(r.final_loss) : json(nullptr);
    return j;
}

json paths_json(const std::vector<fs::path>& paths) {
    json a = json::array();
    for (const auto& p : paths) a.push_back(p.string());
    return a;
}

class Manifest {
public:
    Manifest(std::string command, fs::path dir) : dir_(std::move(dir)) {
        doc_["tool"] = "nvel";
        doc_["version"] = nvel::kVersion;
        doc_["command"] = std::move(command);
        doc_["status"] = "ok";
    }
    json& operator[](const char* key) { return doc_[key]; }
    void output(const fs::path& p) { outputs_.push_back(p); }
    void write() {
        doc_["outputs"] = paths_json(outputs_);
        std::ofstream out(dir_ / "manifest.json");
        if (!out) throw nvel::Error("cannot write " + (dir_ / "manifest.json").string());
        out << doc_.dump(2) << '\n';
    }

private:
    fs::path dir_;
    json doc_;
    std::vector<fs::path> outputs_;
};

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw nvel::InputError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_loss_csv(const nvel::TrainReport& r, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw nvel::Error("cannot write " + path.string());
    out.precision(10);
    out << "epoch,loss\n";
    for (std::size_t e = 0; e < r.loss_per_epoch.size(); ++e) out << e << ',' << r.loss_per_epoch[e] << '\n';
}

void write_heatmaps(const nvel::FieldGrid& f, const fs::path& dir, Manifest& m) {
    nvel::save_heatmap(nvel::magnitude(f), dir / "magnitude.pgm");
    m.output(dir / "magnitude.pgm");
    if (f.width() >= 2 && f.height() >= 2) {
        nvel::save_heatmap(nvel::vorticity(f), dir / "vorticity.pgm");
        m.output(dir / "vorticity.pgm");
    }
}

bool is_model_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    char magic[3] = {};
    in.read(magic, 3);
    return in.gcount() == 3 && magic[0] == 'N' && magic[1] == 'V' && magic[2] == 'M';
}

std::vector<fs::path> expand_inputs(const std::vector<std::string>& args) {
    std::vector<fs::path> out;
    for (const auto& a : args) {
        if (a.find_first_of("*?[") != std::string::npos) {
            glob_t g{};
            if (::glob(a.c_str(), 0, nullptr, &g) == 0) {
                for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
            }
            ::globfree(&g);
        } else if (fs::is_directory(a)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::directory_iterator(a)) {
                const auto ext = e.path().extension();
                if (ext == ".pgm" || ext == ".png") found.push_back(e.path());
            }
            std::ranges::sort(found);
            out.insert(out.end(), found.begin(), found.end());
        } else {
            out.emplace_back(a);
        }
    }
    return out;
}

std::vector<nvel::Image> load_frames(const std::vector<fs::path>& paths) {
    std::vector<nvel::Image> frames;
    for (const auto& p : paths) {
        frames.push_back(nvel::load_image(p));
        if (!frames.back().same_shape(frames.front())) throw nvel::InputError("frame size differs: " + p.string());
    }
    return frames;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateArgs {
    SharedFlags shared;
    std::string first, second, out, init;
    int super_res = 1;
    bool heatmaps = false;
};

int cmd_estimate(const EstimateArgs& a) {
    const nvel::RunConfig cfg = resolve_config(a.shared);
    const nvel::Image first = nvel::load_image(a.first);
    const nvel::Image second = nvel::load_image(a.second);
    if (!first.same_shape(second)) throw nvel::InputError("image pair dimensions differ");

    nvel::DisplacementModel<float> model;
    if (!a.init.empty()) {
        model = nvel::load_model<float>(a.init);
    } else {
        model = nvel::init_model<float>(cfg.model, cfg.train.seed);
        if (a.shared.normalize_coords) nvel::normalize_coordinates(model, first.width(), first.height());
    }

    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("estimate", dir);
    m["inputs"] = paths_json({a.first, a.second});
    m["config"] = config_json(cfg);
    m["normalize_coords"] = a.shared.normalize_coords;
    if (!a.init.empty()) m["init_model"] = a.init;
    m["seeds"] = json::array({cfg.train.seed});

    const nvel::TrainReport rep = nvel::train_pair(model, first, second, cfg.train);
    m["reports"] = json::array({report_json(rep)});
    write_loss_csv(rep, dir / "loss.csv");
    m.output(dir / "loss.csv");
    if (rep.diverged) {
        m["status"] = "diverged";
        m.write();
        std::cerr << "nvel: training diverged after " << rep.epochs_run() << " epochs\n";
        return kExitDiverged;
    }

    nvel::save_model(model, dir / "model.nvm");
    m.output(dir / "model.nvm");
    const nvel::GridSpec grid = a.super_res > 1
                                    ? nvel::super_resolved_grid(first.width(), first.height(), a.super_res)
                                    : nvel::pixel_grid(first.width(), first.height());
    const nvel::FieldGrid field = nvel::sample_grid(model, grid);
    nvel::save_field(field, dir / "field.nvf");
    m.output(dir / "field.nvf");
    if (a.heatmaps) write_heatmaps(field, dir, m);
    m.write();
    std::cout << "final loss " << rep.final_loss << " after " << rep.epochs_run() << " epochs ("
              << rep.wall_time << " s)\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// sequence

struct SequenceArgs {
    SharedFlags shared;
    std::vector<std::string> frames;
    std::string out, config_first, config_rest;
    std::optional<int> epochs_first, epochs_rest;
    bool heatmaps = false;
};

int cmd_sequence(const SequenceArgs& a) {
    const auto paths = expand_inputs(a.frames);
    if (paths.size() < 2) throw nvel::InputError("a sequence needs at least two frames");

    nvel::RunConfig first_base, rest_base;
    first_base.train.epochs = 40;
    rest_base.train.epochs = 20;
    if (!a.config_first.empty()) first_base = nvel::load_config(a.config_first, first_base);
    if (!a.config_rest.empty()) rest_base = nvel::load_config(a.config_rest, rest_base);
    nvel::RunConfig cfg_first = resolve_config(a.shared, first_base);
    nvel::RunConfig cfg_rest = resolve_config(a.shared, rest_base);
    if (a.epochs_first) cfg_first.train.epochs = *a.epochs_first;
    if (a.epochs_rest) cfg_rest.train.epochs = *a.epochs_rest;
    cfg_first.train.validate();
    cfg_rest.train.validate();
    if (!(cfg_rest.model == cfg_first.model)) {
        throw nvel::InputError("architecture settings must agree between first and later pairs");
    }

    const auto frames = load_frames(paths);
    auto model = nvel::init_model<float>(cfg_first.model, cfg_first.train.seed);
    if (a.shared.normalize_coords) nvel::normalize_coordinates(model, frames[0].width(), frames[0].height());

    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("sequence", dir);
    m["inputs"] = paths_json(paths);
    m["config_first"] = config_json(cfg_first);
    m["config_rest"] = config_json(cfg_rest);
    m["normalize_coords"] = a.shared.normalize_coords;

    const auto results = nvel::train_sequence<float>(
        frames, cfg_first.train, cfg_rest.train, model,
        [](std::size_t k, const nvel::TrainReport& r) {
            std::cout << "pair " << k << ": loss " << r.final_loss << (r.diverged ? " (diverged)" : "") << '\n';
        });

    std::ofstream loss(dir / "loss.csv");
    if (!loss) throw nvel::Error("cannot write " + (dir / "loss.csv").string());
    loss.precision(10);
    loss << "pair,epoch,loss\n";
    m.output(dir / "loss.csv");
    json reports = json::array(), seeds = json::array();
    bool any_diverged = false;
    const nvel::GridSpec grid = nvel::pixel_grid(frames[0].width(), frames[0].height());
    for (std::size_t k = 0; k < results.size(); ++k) {
        const auto& r = results[k].report;
        for (std::size_t e = 0; e < r.loss_per_epoch.size(); ++e) loss << k << ',' << e << ',' << r.loss_per_epoch[e] << '\n';
        reports.push_back(report_json(r));
        seeds.push_back((k == 0 ? cfg_first.train.seed : cfg_rest.train.seed) + k);
        any_diverged = any_diverged || r.diverged;

        char name[32];
        std::snprintf(name, sizeof name, "pair_%04zu", k);
        const fs::path pdir = dir / name;
        ensure_dir(pdir);
        nvel::save_model(results[k].model, pdir / "model.nvm");
        const nvel::FieldGrid field = nvel::sample_grid(results[k].model, grid);
        nvel::save_field(field, pdir / "field.nvf");
        m.output(pdir / "model.nvm");
        m.output(pdir / "field.nvf");
        if (a.heatmaps) write_heatmaps(field, pdir, m);
    }
    m["seeds"] = seeds;
    m["reports"] = reports;
    if (any_diverged) m["status"] = "diverged";
    m.write();
    return any_diverged ? kExitDiverged : kExitOk;
}

// ---------------------------------------------------------------------------
// ensemble

struct EnsembleArgs {
    SharedFlags shared;
    std::string first, second, out;
    int members = 10;
    double loss_ratio = 10.0;
    bool same_seed = false;
    bool heatmaps = false;
};

int cmd_ensemble(const EnsembleArgs& a) {
    if (a.members < 2) throw nvel::InputError("an ensemble needs at least two members (-n >= 2)");
    const nvel::RunConfig cfg = resolve_config(a.shared);
    const nvel::Image first = nvel::load_image(a.first);
    const nvel::Image second = nvel::load_image(a.second);
    if (!first.same_shape(second)) throw nvel::InputError("image pair dimensions differ");

    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("ensemble", dir);
    m["inputs"] = paths_json({a.first, a.second});
    m["config"] = config_json(cfg);
    m["members"] = a.members;
    m["loss_ratio"] = a.loss_ratio;
    m["same_seed"] = a.same_seed;
    m["normalize_coords"] = a.shared.normalize_coords;

    nvel::EnsembleOptions opt;
    opt.members = a.members;
    opt.divergence_ratio = a.loss_ratio;
    opt.jobs = a.shared.jobs;
    opt.vary_seed = !a.same_seed;
    opt.normalize_coords = a.shared.normalize_coords;
    const auto members = nvel::train_members<float>(first, second, cfg.model, cfg.train, opt);

    json reports = json::array(), seeds = json::array();
    for (const auto& mem : members) {
        reports.push_back(report_json(mem.report));
        seeds.push_back(mem.seed);
    }
    m["seeds"] = seeds;
    m["reports"] = reports;

    nvel::EnsembleResult r;
    try {
        r = nvel::summarize_ensemble(members, nvel::pixel_grid(first.width(), first.height()), a.loss_ratio);
    } catch (const nvel::DivergenceError&) {
        m["status"] = "diverged";
        m.write();
        throw;
    }

    std::ofstream rep(dir / "report.txt");
    if (!rep) throw nvel::Error("cannot write " + (dir / "report.txt").string());
    rep.precision(8);
    rep << "member seed final_loss status\n";
    json excluded = json::array();
    for (std::size_t i = 0; i < members.size(); ++i) {
        const auto& mr = members[i].report;
        rep << i << ' ' << members[i].seed << ' ' << mr.final_loss << ' '
            << (r.converged[i] ? "converged" : (mr.diverged ? "excluded (diverged)" : "excluded (loss ratio)"))
            << '\n';
        if (!r.converged[i]) excluded.push_back(i);
    }
    rep << "excluded: " << excluded.size() << " of " << members.size() << '\n';
    m["excluded_members"] = excluded;
    m.output(dir / "report.txt");

    nvel::save_field(r.mean, dir / "mean.nvf");
    nvel::save_field(r.stddev, dir / "std.nvf");
    m.output(dir / "mean.nvf");
    m.output(dir / "std.nvf");
    if (a.heatmaps) {
        write_heatmaps(r.mean, dir, m);
        nvel::save_heatmap(nvel::magnitude(r.stddev), dir / "std_magnitude.pgm");
        m.output(dir / "std_magnitude.pgm");
    }
    m.write();
    std::cout << members.size() - excluded.size() << " of " << members.size() << " members converged\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct PointTruth {
    std::vector<nvel::Vec2> points, displacements;
};

// Lines of "x y dx dy"; '#' starts a comment.
PointTruth load_point_truth(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw nvel::InputError("cannot open " + path.string());
    PointTruth t;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        double x, y, dx, dy;
        if (!(ss >> x >> y >> dx >> dy)) {
            throw nvel::InputError(path.string() + ":" + std::to_string(n) + ": expected 'x y dx dy'");
        }
        t.points.push_back({x, y});
        t.displacements.push_back({dx, dy});
    }
    if (t.points.empty()) throw nvel::InputError(path.string() + ": no points");
    return t;
}

// Bilinear lookup of a sampled field at a physical point (clamped to the grid).
nvel::Vec2 field_at(const nvel::FieldGrid& f, nvel::Vec2 p) {
    const double gx = std::clamp((p.x - f.spec.x0) / f.spec.dx, 0.0, f.width() - 1.0);
    const double gy = std::clamp((p.y - f.spec.y0) / f.spec.dy, 0.0, f.height() - 1.0);
    const int i0 = std::min(static_cast<int>(gx), std::max(f.width() - 2, 0));
    const int j0 = std::min(static_cast<int>(gy), std::max(f.height() - 2, 0));
    const int i1 = std::min(i0 + 1, f.width() - 1), j1 = std::min(j0 + 1, f.height() - 1);
    const double ax = gx - i0, ay = gy - j0;
    auto lerp = [&](const std::vector<float>& c) {
        const double top = c[f.index(i0, j0)] + ax * (c[f.index(i1, j0)] - c[f.index(i0, j0)]);
        const double bot = c[f.index(i0, j1)] + ax * (c[f.index(i1, j1)] - c[f.index(i0, j1)]);
        return top + ay * (bot - top);
    };
    return {lerp(f.u), lerp(f.v)};
}

struct EvalArgs {
    std::string prediction, truth, out, mode = "dense";
};

int cmd_eval(const EvalArgs& a) {
    const fs::path dir = a.out;
    double rmse = 0.0;
    std::size_t samples = 0;
    const bool model_input = is_model_file(a.prediction);
    if (a.mode == "dense") {
        const nvel::FieldGrid truth = nvel::load_any_field(a.truth);
        const nvel::FieldGrid pred =
            model_input ? nvel::sample_grid(nvel::load_model<float>(a.prediction), truth.spec) : nvel::load_field(a.prediction);
        if (!(pred.spec == truth.spec)) throw nvel::InputError("prediction and truth grids differ");
        rmse = nvel::rmse_dense(pred, truth);
        samples = truth.spec.size();
    } else {
        const PointTruth t = load_point_truth(a.truth);
        if (model_input) {
            rmse = nvel::rmse_at_points(nvel::load_model<float>(a.prediction), t.points, t.displacements);
        } else {
            const nvel::FieldGrid f = nvel::load_field(a.prediction);
            std::vector<nvel::Vec2> pred;
            for (const auto& p : t.points) pred.push_back(field_at(f, p));
            rmse = nvel::rmse_points(pred, t.displacements);
        }
        samples = t.points.size();
    }

    ensure_dir(dir);
    Manifest m("eval", dir);
    m["inputs"] = paths_json({a.prediction, a.truth});
    m["mode"] = a.mode;
    m["prediction_kind"] = model_input ? "model" : "field";
    m["samples"] = samples;
    m["rmse_px"] = rmse;
    m.write();
    std::cout.precision(8);
    std::cout << "rmse " << rmse << " px over " << samples << " samples\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
    std::vector<std::string> inputs;
    std::string out;
    std::optional<double> dt, magnification;
    std::vector<std::string> points;
    int width = 0, height = 0;
    double f_lo = 0.0, f_hi = std::numeric_limits<double>::infinity();
    int segment = 256;
    bool heatmaps = false;
};

nvel::Vec2 parse_point(const std::string& s) {
    const auto comma = s.find(',');
    try {
        if (comma == std::string::npos) throw std::invalid_argument(s);
        return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
    } catch (const std::exception&) {
        throw nvel::InputError("point must be 'x,y': " + s);
    }
}

int cmd_stats(const StatsArgs& a) {
    const auto paths = expand_inputs(a.inputs);
    if (paths.size() < 2) throw nvel::InputError("statistics need at least two fields or models");
    std::vector<nvel::Vec2> points;
    for (const auto& s : a.points) points.push_back(parse_point(s));
    if (!points.empty() && paths.size() < 64) throw nvel::InputError("point spectra need at least 64 inputs");

    nvel::SequenceMeta meta;
    const bool scaled = a.dt || a.magnification;
    if (a.dt) meta.frame_interval = *a.dt;
    if (a.magnification) meta.magnification = *a.magnification;
    meta.validate();

    nvel::StatsAccumulator acc;
    std::vector<std::vector<double>> series_u(points.size()), series_v(points.size());
    for (const auto& p : paths) {
        nvel::FieldGrid f;
        if (is_model_file(p)) {
            if (a.width < 1 || a.height < 1) throw nvel::InputError("model inputs need --width and --height");
            const auto model = nvel::load_model<float>(p);
            f = nvel::sample_grid(model, nvel::pixel_grid(a.width, a.height));
            for (std::size_t k = 0; k < points.size(); ++k) {
                const nvel::Vec2 d = nvel::forward(model, points[k]);
                series_u[k].push_back(d.x);
                series_v[k].push_back(d.y);
            }
        } else {
            f = nvel::load_field(p);
            for (std::size_t k = 0; k < points.size(); ++k) {
                const nvel::Vec2 d = field_at(f, points[k]);
                series_u[k].push_back(d.x);
                series_v[k].push_back(d.y);
            }
        }
        if (scaled) f = nvel::to_velocity(f, meta);
        acc.add(f);
    }
    const nvel::FlowStats st = acc.result();
    const double scale = meta.magnification / meta.frame_interval;

    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("stats", dir);
    m["inputs"] = paths_json(paths);
    m["samples"] = st.samples;
    m["units"] = scaled ? "length/time" : "px/frame";
    m["frame_interval"] = meta.frame_interval;
    m["magnification"] = meta.magnification;
    const std::pair<const char*, const nvel::ScalarGrid*> grids[] = {
        {"mean_u", &st.mean_u}, {"mean_v", &st.mean_v}, {"reynolds_uv", &st.reynolds_uv}, {"tke", &st.tke}};
    for (const auto& [name, g] : grids) {
        nvel::write_grid_csv(*g, dir / (std::string(name) + ".csv"));
        m.output(dir / (std::string(name) + ".csv"));
        if (a.heatmaps) {
            nvel::save_heatmap(*g, dir / (std::string(name) + ".pgm"));
            m.output(dir / (std::string(name) + ".pgm"));
        }
    }

    json spectra = json::array();
    const double rate = 1.0 / meta.frame_interval;
    for (std::size_t k = 0; k < points.size(); ++k) {
        for (auto* s : {&series_u[k], &series_v[k]}) {
            for (double& x : *s) x *= scale;
        }
        const nvel::PsdOptions po{a.segment, 0.5};
        const char* comp[] = {"u", "v"};
        const std::vector<double>* series[] = {&series_u[k], &series_v[k]};
        for (int c = 0; c < 2; ++c) {
            nvel::PsdSeries p = nvel::psd(*series[c], rate, po);
            double slope = std::numeric_limits<double>::quiet_NaN();
            try {
                slope = nvel::fit_loglog_slope(p.frequencies, p.power, a.f_lo, a.f_hi);
            } catch (const nvel::InputError&) {
            }
            char name[64];
            std::snprintf(name, sizeof name, "psd_%02zu_%s.csv", k, comp[c]);
            nvel::write_psd_csv(p, dir / name);
            m.output(dir / name);
            spectra.push_back({{"point", {points[k].x, points[k].y}},
                               {"component", comp[c]},
                               {"file", (dir / name).string()},
                               {"slope", std::isfinite(slope) ? json(slope) : json(nullptr)}});
        }
    }
    m["spectra"] = spectra;
    m.write();
    std::cout << "statistics over " << st.samples << " fields written to " << dir.string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string flow = "uniform", out;
    double u = 0.0, v = 0.0;
    double cx = std::numeric_limits<double>::quiet_NaN(), cy = std::numeric_limits<double>::quiet_NaN();
    double omega = 0.0, rate = 0.0, y0 = 0.0;
    double jet_center = std::numeric_limits<double>::quiet_NaN(), jet_width = 24.0, jet_peak = 4.0, jet_base = 0.0;
    int width = 256, height = 256, frames = 2;
    std::uint64_t seed = 0;
    double density = 0.03, diameter = 3.0, peak = 1.0, noise = 0.0;
    std::optional<double> diameter_flag;
};

int cmd_synth(SynthArgs a) {
    if (a.width < 2 || a.height < 2) throw nvel::InputError("image must be at least 2x2");
    if (a.frames < 2) throw nvel::InputError("need at least two frames");
    const double cx = std::isnan(a.cx) ? (a.width - 1) / 2.0 : a.cx;
    const double cy = std::isnan(a.cy) ? (a.height - 1) / 2.0 : a.cy;

    nvel::AnalyticFlow flow;
    nvel::ParticleSet particles;
    nvel::SeedingOptions so;
    so.density = a.density;
    so.diameter = a.diameter_flag.value_or(a.diameter);
    so.peak = a.peak;
    if (a.flow == "uniform") {
        flow = nvel::flow::Uniform{a.u, a.v};
    } else if (a.flow == "zero") {
        flow = nvel::flow::Uniform{0.0, 0.0};
    } else if (a.flow == "rotation") {
        flow = nvel::flow::RigidRotation{{cx, cy}, a.omega};
    } else if (a.flow == "shear") {
        flow = nvel::flow::Shear{a.rate, a.y0};
    } else if (a.flow == "jet") {
        flow = nvel::flow::JetShear{std::isnan(a.jet_center) ? cy : a.jet_center, a.jet_width, a.jet_peak, a.jet_base};
    } else if (a.flow == "single_particle") {
        // One large particle that overlaps its displaced copy.
        const bool shift_given = a.u != 0.0 || a.v != 0.0;
        flow = nvel::flow::SingleParticle{shift_given ? nvel::Vec2{a.u, a.v} : nvel::Vec2{10.0, 10.0}};
        particles = {{{cx, cy}}, a.diameter_flag.value_or(32.0), a.peak};
    } else {
        throw nvel::InputError("unknown flow '" + a.flow + "'");
    }
    if (a.flow != "single_particle") particles = nvel::random_particles(a.width, a.height, a.seed, so);

    const auto seq = nvel::generate_sequence(flow, particles, a.width, a.height, a.frames, a.seed, a.noise);
    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("synth", dir);
    json params{{"flow", a.flow},  {"width", a.width},         {"height", a.height},       {"frames", a.frames},
                {"seed", a.seed},  {"particles", particles.positions.size()},            {"diameter", particles.diameter},
                {"peak", a.peak},  {"density", a.density},     {"noise_sigma", a.noise}};
    m["parameters"] = params;

    const nvel::FieldGrid truth = nvel::sample_flow(flow, nvel::pixel_grid(a.width, a.height));
    char name[64];
    for (int t = 0; t < a.frames; ++t) {
        std::snprintf(name, sizeof name, "frame_%04d.pgm", t);
        nvel::save_image(seq.frames[static_cast<std::size_t>(t)], dir / name);
        m.output(dir / name);
        if (t + 1 == a.frames) break;
        std::snprintf(name, sizeof name, "truth_%04d.nvf", t);
        nvel::save_field(truth, dir / name);
        m.output(dir / name);

        std::snprintf(name, sizeof name, "particles_%04d.txt", t);
        std::ofstream pts(dir / name);
        if (!pts) throw nvel::Error("cannot write " + (dir / name).string());
        pts.precision(12);
        pts << "# x y dx dy (particles inside frame " << t << ")\n";
        const auto [pos, disp] = nvel::visible_particles(seq, static_cast<std::size_t>(t), a.width, a.height);
        for (std::size_t k = 0; k < pos.size(); ++k) {
            pts << pos[k].x << ' ' << pos[k].y << ' ' << disp[k].x << ' ' << disp[k].y << '\n';
        }
        m.output(dir / name);
    }
    m.write();
    std::cout << a.frames << " frames written to " << dir.string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// preprocess

struct PreprocessArgs {
    std::vector<std::string> frames;
    std::string out;
    bool no_background = false, no_gaussian = false, no_clahe = false;
    int tiles = 8;
    double clip = 2.0;
};

int cmd_preprocess(const PreprocessArgs& a) {
    const auto paths = expand_inputs(a.frames);
    if (paths.empty()) throw nvel::InputError("no input frames");
    if (!a.no_background && paths.size() < 2) {
        throw nvel::InputError("background removal needs at least two frames (or --no-background)");
    }
    const auto frames = load_frames(paths);
    nvel::PreprocessOptions opt{!a.no_background, !a.no_gaussian, !a.no_clahe, a.tiles, a.clip};
    const auto out = nvel::preprocess(frames, opt);

    const fs::path dir = a.out;
    ensure_dir(dir);
    Manifest m("preprocess", dir);
    m["inputs"] = paths_json(paths);
    m["options"] = {{"background", opt.background},
                    {"gaussian", opt.gaussian},
                    {"clahe", opt.equalize},
                    {"clahe_tiles", opt.clahe_tiles},
                    {"clahe_clip", std::isfinite(opt.clahe_clip) ? json(opt.clahe_clip) : json("inf")}};
    for (std::size_t i = 0; i < out.size(); ++i) {
        const fs::path target = dir / (paths[i].stem().string() + ".pgm");
        nvel::save_image(out[i], target);
        m.output(target);
    }
    m.write();
    return kExitOk;
}

// ---------------------------------------------------------------------------
// model-info

struct ModelInfoArgs {
    std::string model, out;
};

int cmd_model_info(const ModelInfoArgs& a) {
    const auto model = nvel::load_model<float>(a.model);
    const auto& c = model.config;
    const std::size_t params = nvel::param_count(c);
    json info{{"beta", c.beta},
              {"n_embed", c.n_embed},
              {"n_layers", c.n_layers},
              {"layer_size", c.layer_size},
              {"param_count", params},
              {"file_bytes", fs::file_size(a.model)},
              {"payload_bytes", 4 * params}};
    std::cout << "beta        " << c.beta << "\nn_embed     " << c.n_embed << "\nn_layers    " << c.n_layers
              << "\nlayer_size  " << c.layer_size << "\nparameters  " << params << "\nfile bytes  "
              << fs::file_size(a.model) << '\n';
    if (!a.out.empty()) {
        ensure_dir(a.out);
        Manifest m("model-info", a.out);
        m["inputs"] = paths_json({a.model});
        m["model"] = info;
        m.write();
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nvel: dense displacement fields from image pairs with a Fourier-feature network"};
    app.set_version_flag("--version", std::string(nvel::kVersion));
    app.require_subcommand(1);

    EstimateArgs est;
    auto* c_est = app.add_subcommand("estimate", "train on one image pair; write model, field and loss history");
    c_est->add_option("first", est.first, "first image (PGM/PNG)")->required()->check(CLI::ExistingFile);
    c_est->add_option("second", est.second, "second image (PGM/PNG)")->required()->check(CLI::ExistingFile);
    c_est->add_option("-o,--out", est.out, "output directory")->required();
    c_est->add_option("--init", est.init, "start from this model instead of a fresh one")->check(CLI::ExistingFile);
    c_est->add_option("--super-res", est.super_res, "samples per pixel per axis in the field file")
        ->check(CLI::PositiveNumber);
    c_est->add_flag("--heatmaps", est.heatmaps, "also write magnitude/vorticity PGMs");
    add_shared(*c_est, est.shared);

    SequenceArgs seq;
    auto* c_seq = app.add_subcommand("sequence", "warm-started training over consecutive frame pairs");
    c_seq->add_option("frames", seq.frames, "frames, directories or glob patterns (sorted)")->required();
    c_seq->add_option("-o,--out", seq.out, "output directory")->required();
    c_seq->add_option("--config-first", seq.config_first, "settings for the first pair")->check(CLI::ExistingFile);
    c_seq->add_option("--config-rest", seq.config_rest, "settings for later pairs")->check(CLI::ExistingFile);
    c_seq->add_option("--epochs-first", seq.epochs_first, "epochs for the first pair (default 40)");
    c_seq->add_option("--epochs-rest", seq.epochs_rest, "epochs for later pairs (default 20)");
    c_seq->add_flag("--heatmaps", seq.heatmaps, "also write magnitude/vorticity PGMs per pair");
    add_shared(*c_seq, seq.shared);

    EnsembleArgs ens;
    auto* c_ens = app.add_subcommand("ensemble", "multi-seed training; mean and std fields");
    c_ens->add_option("first", ens.first, "first image")->required()->check(CLI::ExistingFile);
    c_ens->add_option("second", ens.second, "second image")->required()->check(CLI::ExistingFile);
    c_ens->add_option("-o,--out", ens.out, "output directory")->required();
    c_ens->add_option("-n,--members", ens.members, "ensemble size (>= 2)");
    c_ens->add_option("--loss-ratio", ens.loss_ratio, "exclude members whose loss exceeds ratio x median")
        ->check(CLI::PositiveNumber);
    c_ens->add_flag("--same-seed", ens.same_seed, "give every member the same seed");
    c_ens->add_flag("--heatmaps", ens.heatmaps, "also write mean/std heatmaps");
    add_shared(*c_ens, ens.shared);

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "RMSE of a field or model against ground truth");
    c_eval->add_option("prediction", ev.prediction, "NVF1 field or NVM1 model")->required()->check(CLI::ExistingFile);
    c_eval->add_option("truth", ev.truth, "NVF1/.flo field (dense) or 'x y dx dy' text (points)")
        ->required()
        ->check(CLI::ExistingFile);
    c_eval->add_option("-o,--out", ev.out, "output directory")->required();
    c_eval->add_option("--mode", ev.mode, "dense or points")->check(CLI::IsMember({"dense", "points"}));

    StatsArgs st;
    auto* c_stats = app.add_subcommand("stats", "mean field, Reynolds stress, TKE and point spectra");
    c_stats->add_option("inputs", st.inputs, "NVF1 fields or NVM1 models (>= 2, in time order)")->required();
    c_stats->add_option("-o,--out", st.out, "output directory")->required();
    c_stats->add_option("--dt", st.dt, "seconds between frames")->check(CLI::PositiveNumber);
    c_stats->add_option("--magnification", st.magnification, "length per pixel")->check(CLI::PositiveNumber);
    c_stats->add_option("--point", st.points, "x,y location for a spectrum (repeatable)");
    c_stats->add_option("--width", st.width, "grid width for model inputs");
    c_stats->add_option("--height", st.height, "grid height for model inputs");
    c_stats->add_option("--f-lo", st.f_lo, "lower bound of the slope fit band");
    c_stats->add_option("--f-hi", st.f_hi, "upper bound of the slope fit band");
    c_stats->add_option("--segment", st.segment, "Welch segment length")->check(CLI::PositiveNumber);
    c_stats->add_flag("--heatmaps", st.heatmaps, "also write PGMs of each statistic");

    SynthArgs sy;
    auto* c_synth = app.add_subcommand("synth", "synthetic particle frames with analytic truth");
    c_synth->add_option("-o,--out", sy.out, "output directory")->required();
    c_synth->add_option("--flow", sy.flow, "uniform, zero, rotation, shear, jet or single_particle")
        ->check(CLI::IsMember({"uniform", "zero", "rotation", "shear", "jet", "single_particle"}));
    c_synth->add_option("--u", sy.u, "x displacement (uniform, single_particle)");
    c_synth->add_option("--v", sy.v, "y displacement (uniform, single_particle)");
    c_synth->add_option("--cx", sy.cx, "rotation centre / particle x (default image centre)");
    c_synth->add_option("--cy", sy.cy, "rotation centre / particle y (default image centre)");
    c_synth->add_option("--omega", sy.omega, "rotation per frame, radians");
    c_synth->add_option("--rate", sy.rate, "shear rate");
    c_synth->add_option("--y0", sy.y0, "shear zero line");
    c_synth->add_option("--jet-center", sy.jet_center, "jet centre line y");
    c_synth->add_option("--jet-width", sy.jet_width, "jet half width");
    c_synth->add_option("--jet-peak", sy.jet_peak, "jet peak displacement");
    c_synth->add_option("--jet-base", sy.jet_base, "background displacement");
    c_synth->add_option("--width", sy.width, "image width");
    c_synth->add_option("--height", sy.height, "image height");
    c_synth->add_option("--frames", sy.frames, "number of frames");
    c_synth->add_option("--seed", sy.seed, "seeding and noise seed");
    c_synth->add_option("--density", sy.density, "particles per square pixel");
    c_synth->add_option("--diameter", sy.diameter_flag, "particle e^-2 diameter (px)");
    c_synth->add_option("--peak", sy.peak, "particle peak intensity");
    c_synth->add_option("--noise", sy.noise, "additive Gaussian noise sigma");

    PreprocessArgs pp;
    auto* c_pre = app.add_subcommand("preprocess", "background removal, 3x3 Gaussian and CLAHE");
    c_pre->add_option("frames", pp.frames, "frames, directories or glob patterns")->required();
    c_pre->add_option("-o,--out", pp.out, "output directory")->required();
    c_pre->add_flag("--no-background", pp.no_background, "skip temporal-minimum subtraction");
    c_pre->add_flag("--no-gaussian", pp.no_gaussian, "skip the 3x3 Gaussian");
    c_pre->add_flag("--no-clahe", pp.no_clahe, "skip CLAHE");
    c_pre->add_option("--clahe-tiles", pp.tiles, "tiles per axis")->check(CLI::PositiveNumber);
    c_pre->add_option("--clahe-clip", pp.clip, "clip limit (multiple of the mean bin count)");

    ModelInfoArgs mi;
    auto* c_info = app.add_subcommand("model-info", "print the architecture of a model file");
    c_info->add_option("model", mi.model, "NVM1 model")->required()->check(CLI::ExistingFile);
    c_info->add_option("-o,--out", mi.out, "also write a manifest here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        if (c_est->parsed()) return cmd_estimate(est);
        if (c_seq->parsed()) return cmd_sequence(seq);
        if (c_ens->parsed()) return cmd_ensemble(ens);
        if (c_eval->parsed()) return cmd_eval(ev);
        if (c_stats->parsed()) return cmd_stats(st);
        if (c_synth->parsed()) return cmd_synth(sy);
        if (c_pre->parsed()) return cmd_preprocess(pp);
        if (c_info->parsed()) return cmd_model_info(mi);
    } catch (const nvel::DivergenceError& e) {
        std::cerr << "nvel: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "nvel: " << e.what() << '\n';
        return kExitInput;
    }
    return kExitInput;
}
