// corvol command-line front end. Exit codes: 0 ok, 2 input error, 3 numerical failure.
#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "corvol/corvol.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace corvol;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    int threads = default_worker_count();
    std::string log_level = "info";
};

Extent2 parse_sphere_grid(const std::string &s) {
    // HxW, rows of elevation by columns of azimuth
    const auto x = s.find('x');
    int h = 0, w = 0;
    if (x == std::string::npos || !parse_number(std::string_view(s).substr(0, x), h) ||
        !parse_number(std::string_view(s).substr(x + 1), w)) {
        throw InputError("--sphere-grid expects HxW, e.g. 256x512; got '" + s + "'");
    }
    return {w, h};
}

json config_to_json(const RegistrationConfig &c) {
    json j;
    j["lambda"] = c.weights.lambda_reg;
    j["gamma"] = c.weights.gamma_cons;
    j["kappa"] = c.weights.kappa_struct;
    j["ncc_window"] = c.weights.ncc_window;
    j["sphere_ncc_window"] = c.weights.sphere_ncc_window;
    j["levels"] = c.levels;
    j["iters_per_level"] = c.iters_per_level;
    j["step_size"] = c.step_size;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["svf_steps"] = c.svf_steps;
    j["sphere_grid"] = {c.sphere_grid.height(), c.sphere_grid.width()};
    j["onehot_sigma"] = c.onehot_sigma;
    j["grad_smoothing"] = c.grad_smoothing;
    j["tolerance"] = c.tolerance;
    j["patience"] = c.patience;
    j["seed"] = c.seed;
    return j;
}

RegistrationConfig config_from_json(const json &j) {
    try {
        RegistrationConfig c;
        c.weights.lambda_reg = j.at("lambda").get<double>();
        c.weights.gamma_cons = j.at("gamma").get<double>();
        c.weights.kappa_struct = j.at("kappa").get<double>();
        c.weights.ncc_window = j.at("ncc_window").get<int>();
        c.weights.sphere_ncc_window = j.at("sphere_ncc_window").get<int>();
        c.levels = j.at("levels").get<int>();
        c.iters_per_level = j.at("iters_per_level").get<std::vector<int>>();
        c.step_size = j.at("step_size").get<double>();
        c.beta1 = j.at("beta1").get<double>();
        c.beta2 = j.at("beta2").get<double>();
        c.adam_eps = j.at("adam_eps").get<double>();
        c.svf_steps = j.at("svf_steps").get<int>();
        const auto g = j.at("sphere_grid").get<std::vector<int>>();
        if (g.size() != 2) throw InputError("manifest: sphere_grid must have two entries");
        c.sphere_grid = SphereGrid{{g[1], g[0]}};
        c.onehot_sigma = j.at("onehot_sigma").get<double>();
        c.grad_smoothing = j.at("grad_smoothing").get<double>();
        c.tolerance = j.at("tolerance").get<double>();
        c.patience = j.at("patience").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        validate(c);
        return c;
    } catch (const json::exception &e) {
        throw InputError(std::string("manifest config: ") + e.what());
    }
}

json digests(const std::vector<fs::path> &files) {
    json j = json::object();
    for (const auto &f : files)
        if (fs::exists(f)) j[f.string()] = file_digest(f);
    return j;
}

std::vector<fs::path> bundle_files(const fs::path &dir) {
    return {dir / "image.vol", dir / "labels.lab", dir / "mesh.ply", dir / "sphere.ply"};
}

void write_manifest(const fs::path &path, const std::string &command, const Globals &g, json extra,
                    const std::vector<fs::path> &inputs, const std::vector<fs::path> &outputs, double wall) {
    json m = std::move(extra);
    m["tool"] = "corvol";
    m["version"] = kVersion;
    m["command"] = command;
    m["seed"] = g.seed;
    m["threads"] = g.threads;
    m["build"] = {{"compiler", __VERSION__}, {"flags", CORVOL_CXX_FLAGS}};
    m["inputs"] = digests(inputs);
    m["outputs"] = digests(outputs);
    m["wall_seconds"] = wall;
    write_file(path, m.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------------------------------------
struct RegisterArgs {
    std::string fixed, moving, out, groups, from_manifest;
    std::optional<double> lambda, gamma, kappa;
    std::optional<int> levels;
    std::vector<int> iters;
    std::string sphere_grid;
};

int run_register(const RegisterArgs &a, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    RegistrationConfig cfg;
    std::string fixed_dir = a.fixed, moving_dir = a.moving, groups_path = a.groups;
    if (!a.from_manifest.empty()) {
        json m;
        try {
            m = json::parse(read_file(a.from_manifest));
            cfg = config_from_json(m.at("config"));
            fixed_dir = m.at("fixed").get<std::string>();
            moving_dir = m.at("moving").get<std::string>();
            groups_path = m.value("groups", std::string());
            for (const auto &[path, digest] : m.at("inputs").items()) {
                if (!fs::exists(path) || file_digest(path) != digest.get<std::string>()) {
                    throw InputError("input '" + path + "' no longer matches the manifest digest");
                }
            }
        } catch (const json::exception &e) {
            throw InputError("manifest '" + a.from_manifest + "': " + e.what());
        }
    } else if (fixed_dir.empty() || moving_dir.empty()) {
        throw InputError("register needs --fixed and --moving (or --from-manifest)");
    }
    cfg.seed = a.from_manifest.empty() ? g.seed : cfg.seed;
    if (a.lambda) cfg.weights.lambda_reg = *a.lambda;
    if (a.gamma) cfg.weights.gamma_cons = *a.gamma;
    if (a.kappa) cfg.weights.kappa_struct = *a.kappa;
    if (a.levels) {
        cfg.levels = *a.levels;
        if (a.iters.empty()) cfg.iters_per_level.assign(static_cast<std::size_t>(cfg.levels), 100);
    }
    if (!a.iters.empty()) cfg.iters_per_level = a.iters;
    if (!a.sphere_grid.empty()) cfg.sphere_grid = SphereGrid{parse_sphere_grid(a.sphere_grid)};
    validate(cfg);

    const SubjectBundle fixed = read_bundle(fixed_dir);
    const SubjectBundle moving = read_bundle(moving_dir);
    if (cfg.weights.kappa_struct > 0.0 && !(fixed.labels && moving.labels)) {
        std::string missing = !fixed.labels ? "fixed labels.lab" : "";
        if (!moving.labels) missing += std::string(missing.empty() ? "" : ", ") + "moving labels.lab";
        throw InputError("kappa > 0 needs labelmaps; missing: " + missing + " (pass --kappa 0 to run without)");
    }
    const LabelGroups groups = groups_path.empty() ? LabelGroups{} : read_groups(groups_path);

    fs::create_directories(a.out);
    const fs::path out(a.out);
    spdlog::info("registering {} -> {} ({} levels, lambda={} gamma={} kappa={})", moving_dir, fixed_dir, cfg.levels,
                 cfg.weights.lambda_reg, cfg.weights.gamma_cons, cfg.weights.kappa_struct);
    const ScopedWorkers workers(g.threads);
    auto progress = [](const TraceEntry &t) {
        const auto &r = t.report;
        if (t.iteration % 25 == 0) {
            spdlog::info("level {} iter {:4d} total {:.6f} (sim_vol {:.4f} sim_sph {:.4f} cons {:.4f} reg {:.4f}/{:.4f} "
                         "struct {:.4f})",
                         t.level, t.iteration, r.total, r.sim_vol, r.sim_sph, r.cons, r.reg_vol, r.reg_sph,
                         r.structural);
        } else {
            spdlog::debug("level {} iter {:4d} total {:.6f}", t.level, t.iteration, r.total);
        }
    };
    const RegistrationResult res = register_pair(fixed, moving, cfg, groups, progress);

    // Reports are computed from the stored (f32) field so a later `evaluate` on phi.fld3 agrees.
    const DeformationField3 phi = quantize_f32(res.phi);
    std::vector<fs::path> outputs = {out / "phi.fld3", out / "psi.fld2", out / "loss_trace.txt"};
    write_file(out / "phi.fld3", encode_field(phi, fixed.image.spacing));
    write_field(out / "psi.fld2", quantize_f32(res.psi));
    write_file(out / "loss_trace.txt", encode_trace(res.loss_trace));
    if (fixed.labels && moving.labels) {
        const MetricReport rep = evaluate(phi, *moving.labels, *fixed.labels, groups);
        write_file(out / "report.txt", encode_report(rep));
        outputs.push_back(out / "report.txt");
        spdlog::info("dice_mean {:.4f} pct_folds {:.4f} sd_log_detj {:.4f}", rep.dice_mean, rep.pct_folds,
                     rep.sd_log_detj);
    }
    spdlog::info("final total {:.6f} (identity {:.6f})", res.final_report.total, res.initial.total);

    std::vector<fs::path> inputs = bundle_files(fixed_dir);
    for (auto &p : bundle_files(moving_dir)) inputs.push_back(p);
    if (!groups_path.empty()) inputs.emplace_back(groups_path);
    json extra;
    extra["config"] = config_to_json(cfg);
    extra["fixed"] = fs::absolute(fixed_dir).string();
    extra["moving"] = fs::absolute(moving_dir).string();
    if (!groups_path.empty()) extra["groups"] = fs::absolute(groups_path).string();
    extra["method"] = "both velocity fields are optimised directly for this pair; no network is trained";
    for (auto &p : inputs) p = fs::absolute(p);
    write_manifest(out / "manifest.json", "register", g, extra, inputs, outputs, seconds_since(t0));
    return 0;
}

// ------------------------------------------------------------------------------------------------
int run_warp(const std::string &in, const std::string &field, const std::string &out, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    const ScopedWorkers workers(g.threads);
    const DeformationField3 phi = read_field3(field);
    const std::string bytes = read_file(in);
    if (bytes.rfind("CRV1", 0) == 0) {
        if (bytes.find("kind=labels\n") == 8) {
            write_labels(out, warp_labels(decode_labels(bytes, in), phi));
        } else {
            write_volume(out, warp_volume(decode_volume(bytes, in), phi));
        }
    } else if (bytes.rfind("ply", 0) == 0) {
        write_mesh(out, warp_mesh(decode_mesh(bytes, in), phi));
    } else {
        throw InputError("'" + in + "': not a CRV1 volume/labelmap or a PLY mesh");
    }
    write_manifest(out + ".manifest.json", "warp", g, json::object(), {in, field}, {out}, seconds_since(t0));
    return 0;
}

int run_evaluate(const std::string &field, const std::string &mov, const std::string &fix, const std::string &groups,
                 const std::string &out, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    const ScopedWorkers workers(g.threads);
    const MetricReport rep =
        evaluate(read_field3(field), read_labels(mov), read_labels(fix), groups.empty() ? LabelGroups{} : read_groups(groups));
    write_file(out, encode_report(rep));
    std::vector<fs::path> inputs = {field, mov, fix};
    if (!groups.empty()) inputs.emplace_back(groups);
    write_manifest(out + ".manifest.json", "evaluate", g, json::object(), inputs, {out}, seconds_since(t0));
    return 0;
}

struct SynthArgs {
    std::string out;
    PhantomParams p;
    double magnitude = 3.0;
};

int run_synth(SynthArgs a, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    a.p.seed = g.seed;
    const PhantomPair pair = make_phantom_pair(a.p, a.magnitude);
    const fs::path out(a.out);
    write_bundle(out / "fixed", pair.fixed);
    write_bundle(out / "moving", pair.moving);
    write_field(out / "ground_truth.fld3", quantize_f32(pair.ground_truth));
    write_file(out / "groups.txt", encode_groups(phantom_groups(a.p)));
    std::vector<fs::path> outputs = bundle_files(out / "fixed");
    for (auto &p : bundle_files(out / "moving")) outputs.push_back(p);
    outputs.push_back(out / "ground_truth.fld3");
    outputs.push_back(out / "groups.txt");
    json extra;
    extra["phantom"] = {{"size", a.p.size},           {"n_labels", a.p.n_labels}, {"mesh_subdiv", a.p.mesh_subdiv},
                        {"amplitude", a.p.amplitude}, {"noise", a.p.noise},       {"magnitude", a.magnitude},
                        {"ribbon_parcels", a.p.ribbon_parcels}, {"parcel_jitter", a.p.parcel_jitter}};
    write_manifest(out / "manifest.json", "synth", g, extra, {}, outputs, seconds_since(t0));
    spdlog::info("wrote phantom pair to {}", a.out);
    return 0;
}

int run_gradcheck(int samples, double h, const std::string &out, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckInstance inst = make_gradcheck_instance(g.seed);
    const LossWeights w;
    struct Case {
        const char *name;
        TermMask mask;
    };
    const std::vector<Case> cases = {
        {"sim_vol", {true, false, false, false, false}}, {"sim_sph", {false, true, false, false, false}},
        {"cons", {false, false, true, false, false}},    {"reg", {false, false, false, true, false}},
        {"struct", {false, false, false, false, true}},  {"total", {}},
    };
    std::string text;
    double worst = 0.0;
    for (const auto &c : cases) {
        GradCheckOptions opt;
        opt.samples = samples;
        opt.h = h;
        opt.seed = g.seed;
        opt.mask = c.mask;
        const auto rep = gradient_check(inst.data, inst.state, w, kDefaultSvfSteps, opt);
        worst = std::max(worst, rep.max_rel_err);
        text += std::string("term=") + c.name + " max_rel_err=" + format_number(rep.max_rel_err) +
                " checked=" + std::to_string(rep.checked) + " skipped=" + std::to_string(rep.skipped) + "\n";
        spdlog::info("{:8s} max rel err {:.3e} ({} checked, {} skipped at stencil boundaries)", c.name, rep.max_rel_err,
                     rep.checked, rep.skipped);
    }
    text += "pass=" + std::string(worst < 1e-4 ? "1" : "0") + "\n";
    std::cout << text;
    if (!out.empty()) {
        write_file(out, text);
        write_manifest(out + ".manifest.json", "gradcheck", g, json::object(), {}, {out}, seconds_since(t0));
    }
    if (!(worst < 1e-4)) throw NumericalError("gradient check failed: max relative error " + format_number(worst));
    return 0;
}

int run_sweep(std::vector<double> kappas, int pairs, int size, bool ribbon, double jitter, const std::vector<int> &iters,
              const std::string &sphere_grid, const std::string &out, const Globals &g) {
    const auto t0 = std::chrono::steady_clock::now();
    if (pairs < 1) throw InputError("--pairs must be positive");
    RegistrationConfig base;
    base.seed = g.seed;
    if (!iters.empty()) base.iters_per_level = iters;
    if (!sphere_grid.empty()) base.sphere_grid = SphereGrid{parse_sphere_grid(sphere_grid)};
    validate(base);
    std::vector<BundlePair> set;
    PhantomParams pp;
    pp.size = size;
    pp.ribbon_parcels = ribbon;
    pp.parcel_jitter = jitter;
    for (int i = 0; i < pairs; ++i) {
        pp.seed = g.seed + static_cast<std::uint64_t>(i);
        auto pr = make_phantom_pair(pp);
        set.push_back({std::move(pr.fixed), std::move(pr.moving)});
    }
    const ScopedWorkers workers(g.threads);
    const auto rows = sweep(base, kappas, set, phantom_groups(pp));
    std::string text = "kappa dice_mean dice_cortical dice_subcortical dice_cc pct_folds sd_log_detj\n";
    for (const auto &r : rows) {
        const auto &m = r.mean;
        text += format_number(r.kappa) + " " + format_number(m.dice_mean) + " " + format_number(m.dice_cortical_mean) +
                " " + format_number(m.dice_subcortical_mean) + " " + format_number(m.dice_cc) + " " +
                format_number(m.pct_folds) + " " + format_number(m.sd_log_detj) + "\n";
    }
    std::cout << text;
    write_file(out, text);
    json extra;
    extra["kappas"] = kappas;
    extra["pairs"] = pairs;
    extra["size"] = size;
    extra["ribbon_parcels"] = ribbon;
    extra["parcel_jitter"] = jitter;
    extra["config"] = config_to_json(base);
    write_manifest(out + ".manifest.json", "sweep", g, extra, {}, {out}, seconds_since(t0));
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"corvol: joint cortical-surface and volumetric diffeomorphic registration"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Seed for synthesis, sampling and the run record");
    app.add_option("--threads", g.threads, "Worker threads (default: available cores)")->check(CLI::Range(1, 1024));
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    RegisterArgs ra;
    auto *reg = app.add_subcommand("register", "Register a moving bundle to a fixed bundle");
    reg->add_option("--fixed", ra.fixed, "Fixed bundle directory");
    reg->add_option("--moving", ra.moving, "Moving bundle directory");
    reg->add_option("--out", ra.out, "Output directory")->required();
    reg->add_option("--lambda", ra.lambda, "Smoothness weight (default 1)");
    reg->add_option("--gamma", ra.gamma, "Consistency weight (default 0.05)");
    reg->add_option("--kappa", ra.kappa, "Structural Dice weight (default 10)");
    reg->add_option("--levels", ra.levels, "Pyramid levels (default 3)");
    reg->add_option("--iters", ra.iters, "Iterations per level, coarsest first (e.g. 150,150,100)")->delimiter(',');
    reg->add_option("--sphere-grid", ra.sphere_grid, "Spherical grid as HxW (default 256x512)");
    reg->add_option("--groups", ra.groups, "Label groups file for the report");
    reg->add_option("--from-manifest", ra.from_manifest, "Re-run the configuration recorded in a manifest")
        ->excludes(reg->get_option("--fixed"))
        ->excludes(reg->get_option("--moving"));

    std::string w_in, w_field, w_out;
    auto *warp = app.add_subcommand("warp", "Apply a deformation field to a volume, labelmap or mesh");
    warp->add_option("--in", w_in, "Input .vol, .lab or .ply")->required();
    warp->add_option("--field", w_field, "phi.fld3")->required();
    warp->add_option("--out", w_out, "Output path")->required();

    std::string e_field, e_mov, e_fix, e_groups, e_out;
    auto *ev = app.add_subcommand("evaluate", "Score a deformation field against labelmaps");
    ev->add_option("--field", e_field, "phi.fld3")->required();
    ev->add_option("--moving-labels", e_mov, "Moving labelmap")->required();
    ev->add_option("--fixed-labels", e_fix, "Fixed labelmap")->required();
    ev->add_option("--groups", e_groups, "Label groups file");
    ev->add_option("--out", e_out, "Report path")->required();

    SynthArgs sa;
    auto *syn = app.add_subcommand("synth", "Write a phantom pair with its ground-truth warp");
    syn->add_option("--out", sa.out, "Output directory")->required();
    syn->add_option("--size", sa.p.size, "Volume edge length");
    syn->add_option("--labels", sa.p.n_labels, "Number of nested shells");
    syn->add_option("--subdiv", sa.p.mesh_subdiv, "Icosphere subdivision of the surface");
    syn->add_option("--noise", sa.p.noise, "Noise std as a fraction of the intensity range");
    syn->add_flag("--ribbon-parcels", sa.p.ribbon_parcels, "Label the outer shell by surface parcel");
    syn->add_option("--parcel-jitter", sa.p.parcel_jitter, "Max azimuth shift (radians) of the moving parcel boundaries");
    syn->add_option("--magnitude", sa.magnitude, "Max ground-truth velocity (voxels)");

    int gc_samples = 200;
    double gc_h = 1e-4;
    std::string gc_out;
    auto *gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    gc->add_option("--samples", gc_samples, "Components checked per term");
    gc->add_option("--step", gc_h, "Finite-difference step");
    gc->add_option("--out", gc_out, "Report path");

    std::vector<double> kappas{0.5, 1.0, 10.0};
    int sw_pairs = 5, sw_size = 48;
    bool sw_ribbon = false;
    double sw_jitter = 0.0;
    std::vector<int> sw_iters;
    std::string sw_grid, sw_out;
    auto *sw = app.add_subcommand("sweep", "Sweep the structural weight over phantom pairs");
    sw->add_option("--kappas", kappas, "Comma-separated kappa values")->delimiter(',');
    sw->add_option("--pairs", sw_pairs, "Number of phantom pairs");
    sw->add_option("--size", sw_size, "Phantom volume edge length");
    sw->add_flag("--ribbon-parcels", sw_ribbon, "Label the outer shell by surface parcel");
    sw->add_option("--parcel-jitter", sw_jitter, "Max azimuth shift (radians) of the moving parcel boundaries");
    sw->add_option("--iters", sw_iters, "Iterations per level")->delimiter(',');
    sw->add_option("--sphere-grid", sw_grid, "Spherical grid as HxW");
    sw->add_option("--out", sw_out, "Table path")->required();

    app.require_subcommand(1);
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    auto logger = spdlog::stderr_color_st("corvol");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    try {
        if (*reg) return run_register(ra, g);
        if (*warp) return run_warp(w_in, w_field, w_out, g);
        if (*ev) return run_evaluate(e_field, e_mov, e_fix, e_groups, e_out, g);
        if (*syn) return run_synth(sa, g);
        if (*gc) return run_gradcheck(gc_samples, gc_h, gc_out, g);
        if (*sw) return run_sweep(kappas, sw_pairs, sw_size, sw_ribbon, sw_jitter, sw_iters, sw_grid, sw_out, g);
    } catch (const InputError &e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const NumericalError &e) {
        spdlog::error("{}", e.what());
        return 3;
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
