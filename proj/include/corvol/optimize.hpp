// optimize.hpp - per-pair minimization of the joint objective over both velocity fields:
// multiresolution schedule, bias-corrected adaptive steps, finite-difference gradient checking and
// the kappa sweep.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "sphere.hpp"
#include "synth.hpp"
#include "volume.hpp"

namespace corvol {

struct RegistrationConfig {
    LossWeights weights;
    int levels = 3;
    std::vector<int> iters_per_level{150, 150, 100}; // coarsest level first
    double step_size = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int svf_steps = kDefaultSvfSteps;
    SphereGrid sphere_grid{{512, 256}};
    double onehot_sigma = 0.0;   // Gaussian smoothing (full-resolution voxels) of label one-hots
    double grad_smoothing = 4.0; // Gaussian smoothing (level voxels) of the volume gradient before each step
    double tolerance = 1e-6;   // relative improvement over `patience` iterations
    int patience = 10;
    std::uint64_t seed = 0;

    friend bool operator==(const RegistrationConfig &a, const RegistrationConfig &b) {
        return a.weights.lambda_reg == b.weights.lambda_reg && a.weights.gamma_cons == b.weights.gamma_cons &&
               a.weights.kappa_struct == b.weights.kappa_struct && a.weights.ncc_window == b.weights.ncc_window &&
               a.weights.sphere_ncc_window == b.weights.sphere_ncc_window && a.levels == b.levels &&
               a.iters_per_level == b.iters_per_level && a.step_size == b.step_size && a.beta1 == b.beta1 &&
               a.beta2 == b.beta2 && a.adam_eps == b.adam_eps && a.svf_steps == b.svf_steps &&
               a.sphere_grid.extent == b.sphere_grid.extent && a.onehot_sigma == b.onehot_sigma &&
               a.grad_smoothing == b.grad_smoothing &&
               a.tolerance == b.tolerance &&
               a.patience == b.patience && a.seed == b.seed;
    }
};

inline void validate(const RegistrationConfig &c) {
    validate(c.weights);
    if (c.levels < 1 || c.levels > 6) throw InputError("levels must be in [1, 6]");
    if (static_cast<int>(c.iters_per_level.size()) != c.levels) {
        throw InputError("iters_per_level has " + std::to_string(c.iters_per_level.size()) + " entries for " +
                         std::to_string(c.levels) + " levels");
    }
    for (int it : c.iters_per_level)
        if (it < 1) throw InputError("iteration counts must be positive");
    if (!(c.step_size > 0.0) || !std::isfinite(c.step_size)) throw InputError("step size must be positive");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) {
        throw InputError("moment decay rates must be in [0, 1)");
    }
    if (!(c.adam_eps > 0.0)) throw InputError("adaptive step guard must be positive");
    if (c.svf_steps < 1 || c.svf_steps > 20) throw InputError("svf_steps must be in [1, 20]");
    if (!(c.onehot_sigma >= 0.0 && c.onehot_sigma <= 8.0)) throw InputError("onehot_sigma must be in [0, 8]");
    if (!(c.grad_smoothing >= 0.0 && c.grad_smoothing <= 8.0)) throw InputError("grad_smoothing must be in [0, 8]");
    if (!(c.tolerance >= 0.0)) throw InputError("tolerance must be non-negative");
    if (c.patience < 1) throw InputError("patience must be positive");
    validate(c.sphere_grid);
    validate(c.sphere_grid.halved(c.levels - 1));
}

struct TraceEntry {
    int level = 0; // 0 = full resolution
    int iteration = 0;
    LossReport report;
};

struct RegistrationResult {
    VelocityField3 v;
    VelocityField2 vs;
    DeformationField3 phi;
    DeformationField2 psi;
    SphereGrid sphere_grid;
    bool sphere_active = false;
    std::vector<TraceEntry> loss_trace;
    LossReport initial;
    LossReport final_report;
    std::optional<MetricReport> metrics;
    double wall_seconds = 0.0;
};

// ---------------------------------------------------------------------------------------------
// Objective assembly per pyramid level.
// ---------------------------------------------------------------------------------------------
inline bool sphere_inputs_present(const SubjectBundle &fixed, const SubjectBundle &moving) {
    return fixed.mesh && fixed.sphere && moving.mesh && moving.sphere;
}

inline void check_pair(const SubjectBundle &fixed, const SubjectBundle &moving, const RegistrationConfig &cfg) {
    validate(cfg);
    validate(fixed, "fixed bundle");
    validate(moving, "moving bundle");
    check_same_extent(fixed.image.extent(), moving.image.extent(), "fixed/moving volumes");
    const auto &e = fixed.image.extent();
    const int f = 1 << (cfg.levels - 1);
    if (e.nx / f < 4 || e.ny / f < 4 || e.nz / f < 4) {
        throw InputError("volume " + to_string(e) + " too small for " + std::to_string(cfg.levels) + " levels");
    }
    if (cfg.weights.gamma_cons > 0.0 && !sphere_inputs_present(fixed, moving)) {
        std::string missing;
        for (auto [b, name] : {std::pair{&fixed, "fixed"}, std::pair{&moving, "moving"}}) {
            if (!b->mesh) missing += std::string(missing.empty() ? "" : ", ") + name + " mesh";
            if (!b->sphere) missing += std::string(missing.empty() ? "" : ", ") + name + " sphere map";
        }
        throw InputError("consistency weight > 0 needs surface inputs; missing: " + missing);
    }
    if (sphere_inputs_present(fixed, moving) &&
        fixed.mesh->descriptors.size() != moving.mesh->descriptors.size()) {
        throw InputError("fixed and moving meshes carry different descriptor counts");
    }
}

inline Volume3 downsample_times(Volume3 v, int k) {
    for (int i = 0; i < k; ++i) v = downsample2(v);
    return v;
}

namespace detail {
inline std::vector<std::int32_t> union_ids(std::vector<std::int32_t> a, const std::vector<std::int32_t> &b) {
    a.insert(a.end(), b.begin(), b.end());
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    a.erase(std::remove(a.begin(), a.end(), 0), a.end());
    return a;
}
} // namespace detail

// Objective data `level` halvings below full resolution.
inline ObjectiveData build_objective(const SubjectBundle &fixed, const SubjectBundle &moving,
                                     const RegistrationConfig &cfg, int level) {
    ObjectiveData od;
    od.fixed = downsample_times(fixed.image, level);
    od.moving = downsample_times(moving.image, level);
    if (fixed.labels && moving.labels && cfg.weights.kappa_struct > 0.0) {
        const auto ids = detail::union_ids(fixed.labels->label_set, moving.labels->label_set);
        for (auto &ch : labelmap_to_onehot(*fixed.labels, ids))
            od.fixed_onehot.push_back(downsample_times(gaussian_smooth(ch, cfg.onehot_sigma), level));
        for (auto &ch : labelmap_to_onehot(*moving.labels, ids))
            od.moving_onehot.push_back(downsample_times(gaussian_smooth(ch, cfg.onehot_sigma), level));
        if (ids.empty()) od.fixed_onehot.clear(), od.moving_onehot.clear();
    }
    if (sphere_inputs_present(fixed, moving)) {
        SphereTerms st;
        st.grid = cfg.sphere_grid.halved(level);
        const SphereLocator loc1(*fixed.sphere), loc2(*moving.sphere);
        if (!fixed.mesh->descriptors.empty()) {
            st.fixed_desc = rasterize_descriptors(*fixed.sphere, fixed.mesh->descriptors, st.grid, &loc1);
            st.moving_desc = rasterize_descriptors(*moving.sphere, moving.mesh->descriptors, st.grid, &loc2);
        } else {
            st.fixed_desc = PlanarGrid2(st.grid, 0);
            st.moving_desc = PlanarGrid2(st.grid, 0);
        }
        if (!fixed.mesh->parcels.empty() && !moving.mesh->parcels.empty() && cfg.weights.kappa_struct > 0.0) {
            auto ids = detail::union_ids(fixed.mesh->parcels, moving.mesh->parcels);
            if (!ids.empty()) {
                st.fixed_parcels = rasterize_parcels(*fixed.sphere, fixed.mesh->parcels, ids, st.grid, &loc1);
                st.moving_parcels = rasterize_parcels(*moving.sphere, moving.mesh->parcels, ids, st.grid, &loc2);
            }
        }
        if (st.fixed_parcels.channels.empty()) {
            st.fixed_parcels = PlanarGrid2(st.grid, 0);
            st.moving_parcels = PlanarGrid2(st.grid, 0);
        }
        if (cfg.weights.gamma_cons > 0.0) {
            st.cons = make_consistency_data(*fixed.mesh, *fixed.sphere, *moving.mesh, *moving.sphere, st.grid, level);
        }
        od.sphere = std::move(st);
    }
    return od;
}

inline FieldState zero_state(const ObjectiveData &od) {
    FieldState fs;
    fs.v = {Grid3<Vec3>(od.fixed.extent())};
    if (od.sphere) fs.vs = {Grid2<Vec2>(od.sphere->grid.extent)};
    return fs;
}

// ---------------------------------------------------------------------------------------------
// Adaptive first-order steps with bias-corrected moment estimates.
// ---------------------------------------------------------------------------------------------
class AdamStep {
  public:
    AdamStep(double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void apply(FieldState &fs, const FieldGradient &g) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        update(fs.v.v.data(), g.v.data(), m3_, s3_, c1, c2);
        update(fs.vs.v.data(), g.vs.data(), m2_, s2_, c1, c2);
    }

  private:
    template <class T>
    void update(std::vector<T> &x, const std::vector<T> &g, std::vector<T> &m, std::vector<T> &s, double c1,
                double c2) {
        if (x.empty()) return;
        if (m.empty()) {
            m.assign(x.size(), T{});
            s.assign(x.size(), T{});
        }
        constexpr int D = sizeof(T) / sizeof(double);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (int a = 0; a < D; ++a) {
                const double gi = g[i][a];
                m[i][a] = b1_ * m[i][a] + (1.0 - b1_) * gi;
                s[i][a] = b2_ * s[i][a] + (1.0 - b2_) * gi * gi;
                x[i][a] -= lr_ * (m[i][a] / c1) / (std::sqrt(s[i][a] / c2) + eps_);
            }
    }

    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<Vec3> m3_, s3_;
    std::vector<Vec2> m2_, s2_;
};

using ProgressCallback = std::function<void(const TraceEntry &)>;

inline RegistrationResult register_pair(const SubjectBundle &fixed, const SubjectBundle &moving,
                                        const RegistrationConfig &cfg, const LabelGroups &groups = {},
                                        const ProgressCallback &progress = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    check_pair(fixed, moving, cfg);
    RegistrationResult res;
    res.sphere_active = sphere_inputs_present(fixed, moving);
    res.sphere_grid = cfg.sphere_grid;

    FieldState state;
    for (int li = 0; li < cfg.levels; ++li) {
        const int level = cfg.levels - 1 - li;
        const ObjectiveData od = build_objective(fixed, moving, cfg, level);
        if (li == 0) {
            state = zero_state(od);
        } else {
            state.v = upsample_velocity(state.v, od.fixed.extent());
            if (od.sphere) state.vs = upsample_velocity(state.vs, od.sphere->grid.extent);
        }
        AdamStep adam(cfg.step_size, cfg.beta1, cfg.beta2, cfg.adam_eps);
        FieldState best = state;
        double best_total = std::numeric_limits<double>::infinity();
        std::vector<double> totals;
        const int iters = cfg.iters_per_level[static_cast<std::size_t>(li)];
        for (int it = 0; it <= iters; ++it) {
            // The last pass only scores the final update.
            FieldGradient g;
            const bool last = it == iters;
            const LossReport rep = total_loss(od, state, cfg.weights, cfg.svf_steps, last ? nullptr : &g);
            TraceEntry te{level, it, rep};
            res.loss_trace.push_back(te);
            if (progress) progress(te);
            if (rep.total < best_total) {
                best_total = rep.total;
                best = state;
            }
            totals.push_back(rep.total);
            if (last) break;
            const std::size_t n = totals.size();
            if (n > static_cast<std::size_t>(cfg.patience)) {
                const double old = totals[n - 1 - static_cast<std::size_t>(cfg.patience)];
                const double gain = (old - rep.total) / std::max(std::abs(old), 1e-300);
                if (gain < cfg.tolerance) break;
            }
            if (cfg.grad_smoothing > 0.0) g.v = gaussian_smooth(g.v, cfg.grad_smoothing);
            adam.apply(state, g);
        }
        state = std::move(best);
        if (level == 0) {
            // The identity is always a candidate, so the result never scores worse than doing nothing.
            const FieldState zero = zero_state(od);
            res.initial = total_loss(od, zero, cfg.weights, cfg.svf_steps);
            ObjectiveOutputs out;
            res.final_report = total_loss(od, state, cfg.weights, cfg.svf_steps, nullptr, {}, &out);
            if (res.initial.total < res.final_report.total) {
                state = zero;
                res.final_report = total_loss(od, state, cfg.weights, cfg.svf_steps, nullptr, {}, &out);
            }
            res.phi = std::move(out.phi);
            if (od.sphere) {
                res.psi = std::move(out.psi);
            } else {
                res.psi = identity_field(cfg.sphere_grid.extent);
                state.vs = {Grid2<Vec2>(cfg.sphere_grid.extent)};
            }
        }
    }
    res.v = std::move(state.v);
    res.vs = std::move(state.vs);
    if (fixed.labels && moving.labels) res.metrics = evaluate(res.phi, *moving.labels, *fixed.labels, groups);
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// Vertex disagreement (1/N) sum |phi(v) - tau2^-1(psi(pi(tau1(v))))|^2 of a finished registration.
inline double consistency_residual(const RegistrationResult &r, const SubjectBundle &fixed,
                                   const SubjectBundle &moving) {
    if (!sphere_inputs_present(fixed, moving)) throw InputError("consistency residual needs both surfaces");
    return loss_consistency(r.phi, r.psi, *fixed.mesh, *fixed.sphere, *moving.mesh, *moving.sphere, r.sphere_grid);
}

// ---------------------------------------------------------------------------------------------
// Finite-difference gradient check.
// ---------------------------------------------------------------------------------------------
struct GradCheckOptions {
    int samples = 200;
    double h = 1e-4;
    double floor = 1e-6; // denominators below this count as absolute error
    std::uint64_t seed = 0;
    TermMask mask;
};

struct GradCheckEntry {
    bool spherical = false;
    std::size_t index = 0;
    int component = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
    bool skipped = false; // the +h and -h probes fell on different smooth pieces
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_analytic = 0.0;
    double max_abs_numeric = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::vector<GradCheckEntry> entries;
};

inline double relative_error(double a, double n, double floor) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline GradCheckReport gradient_check(const ObjectiveData &od, const FieldState &at, const LossWeights &w,
                                      int svf_steps, const GradCheckOptions &opt) {
    // Stencil signatures are thread-local, so everything runs on the calling thread.
    ScopedWorkers serial(1);
    FieldGradient g;
    total_loss(od, at, w, svf_steps, &g, opt.mask);
    const std::size_t n3 = 3 * at.v.v.size(), n2 = 2 * at.vs.v.size();
    std::vector<std::size_t> ids(n3 + n2);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::mt19937_64 rng(opt.seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(std::min<std::size_t>(ids.size(), static_cast<std::size_t>(opt.samples)));

    GradCheckReport rep;
    FieldState probe = at;
    for (std::size_t id : ids) {
        GradCheckEntry e;
        e.spherical = id >= n3;
        const std::size_t local = e.spherical ? id - n3 : id;
        const int D = e.spherical ? 2 : 3;
        e.index = local / static_cast<std::size_t>(D);
        e.component = static_cast<int>(local % static_cast<std::size_t>(D));
        double &x = e.spherical ? probe.vs.v[e.index][e.component] : probe.v.v[e.index][e.component];
        e.analytic = e.spherical ? g.vs[e.index][e.component] : g.v[e.index][e.component];
        const double x0 = x;
        double fp, fm;
        std::uint64_t sp, sm;
        {
            StencilProbe p;
            x = x0 + opt.h;
            fp = total_loss(od, probe, w, svf_steps, nullptr, opt.mask).total;
            sp = p.signature();
        }
        {
            StencilProbe p;
            x = x0 - opt.h;
            fm = total_loss(od, probe, w, svf_steps, nullptr, opt.mask).total;
            sm = p.signature();
        }
        x = x0;
        e.numeric = (fp - fm) / (2.0 * opt.h);
        e.rel_err = relative_error(e.analytic, e.numeric, opt.floor);
        e.skipped = sp != sm;
        rep.max_abs_analytic = std::max(rep.max_abs_analytic, std::abs(e.analytic));
        rep.max_abs_numeric = std::max(rep.max_abs_numeric, std::abs(e.numeric));
        if (e.skipped) {
            ++rep.skipped;
        } else {
            ++rep.checked;
            rep.max_rel_err = std::max(rep.max_rel_err, e.rel_err);
        }
        rep.entries.push_back(e);
    }
    return rep;
}

// A small instance for gradient checks: a 32^3 phantom pair seen two pyramid levels down (8^3),
// with a 16x32 spherical grid and a random non-zero state.
struct GradCheckInstance {
    ObjectiveData data;
    FieldState state;
};

inline GradCheckInstance make_gradcheck_instance(std::uint64_t seed, double vol_magnitude = 0.6,
                                                 double sph_magnitude = 0.6) {
    PhantomParams pp;
    pp.seed = seed;
    pp.size = 32;
    pp.mesh_subdiv = 2;
    const auto pair = make_phantom_pair(pp, 2.0, 3.0);
    RegistrationConfig cfg;
    cfg.sphere_grid = SphereGrid{{128, 64}};
    GradCheckInstance inst;
    inst.data = build_objective(pair.fixed, pair.moving, cfg, 2);
    inst.state.v = random_smooth_velocity(inst.data.fixed.extent(), seed + 1, vol_magnitude, 1.0);
    inst.state.vs = random_smooth_velocity(inst.data.sphere->grid.extent, seed + 2, sph_magnitude, 1.0);
    return inst;
}

// ---------------------------------------------------------------------------------------------
// Kappa sweep over a fixed set of pairs.
// ---------------------------------------------------------------------------------------------
struct SweepRow {
    double kappa = 0.0;
    MetricReport mean; // per-field means over pairs (dice_per_label holds per-label means)
    std::vector<MetricReport> per_pair;
};

namespace detail {
inline double nan_mean(const std::vector<double> &v) {
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (!std::isnan(x)) s += x, ++n;
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline MetricReport average_reports(const std::vector<MetricReport> &rs) {
    MetricReport m;
    auto col = [&](auto get) {
        std::vector<double> v;
        for (const auto &r : rs) v.push_back(get(r));
        return nan_mean(v);
    };
    m.dice_mean = col([](const MetricReport &r) { return r.dice_mean; });
    m.dice_cortical_mean = col([](const MetricReport &r) { return r.dice_cortical_mean; });
    m.dice_subcortical_mean = col([](const MetricReport &r) { return r.dice_subcortical_mean; });
    m.dice_cc = col([](const MetricReport &r) { return r.dice_cc; });
    m.pct_folds = col([](const MetricReport &r) { return r.pct_folds; });
    m.sd_log_detj = col([](const MetricReport &r) { return r.sd_log_detj; });
    std::map<std::int32_t, std::vector<double>> per;
    for (const auto &r : rs)
        for (const auto &[l, d] : r.dice_per_label) per[l].push_back(d);
    for (const auto &[l, v] : per) m.dice_per_label[l] = nan_mean(v);
    for (const auto &r : rs) m.detj_clamped += r.detj_clamped;
    return m;
}
} // namespace detail

struct BundlePair {
    SubjectBundle fixed;
    SubjectBundle moving;
};

inline std::vector<SweepRow> sweep(const RegistrationConfig &base, const std::vector<double> &kappas,
                                   const std::vector<BundlePair> &pairs, const LabelGroups &groups = {}) {
    if (kappas.empty() || pairs.empty()) throw InputError("sweep needs at least one kappa and one pair");
    for (const auto &p : pairs)
        if (!p.fixed.labels || !p.moving.labels) throw InputError("sweep needs labelmaps on every bundle");
    std::vector<SweepRow> rows;
    for (double k : kappas) {
        RegistrationConfig cfg = base;
        cfg.weights.kappa_struct = k;
        SweepRow row;
        row.kappa = k;
        for (const auto &p : pairs) row.per_pair.push_back(*register_pair(p.fixed, p.moving, cfg, groups).metrics);
        row.mean = detail::average_reports(row.per_pair);
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace corvol
