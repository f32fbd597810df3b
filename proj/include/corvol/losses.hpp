// losses.hpp - objective terms (local NCC, soft Dice, displacement-gradient penalty, volume/sphere
// consistency) with analytic gradients, and the assembled joint objective over both velocity fields.
#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "sphere.hpp"
#include "volume.hpp"

namespace corvol {

inline constexpr double kNccEpsilon = 1e-5;
inline constexpr double kDiceEpsilon = 1e-5;

struct LossWeights {
    double lambda_reg = 1.0;
    double gamma_cons = 0.05;
    double kappa_struct = 10.0;
    int ncc_window = 9;        // volumetric window side
    int sphere_ncc_window = 9; // spherical window side
};

inline void validate(const LossWeights &w) {
    for (double x : {w.lambda_reg, w.gamma_cons, w.kappa_struct}) {
        if (!std::isfinite(x) || x < 0.0) throw InputError("loss weights must be finite and non-negative");
    }
    for (int win : {w.ncc_window, w.sphere_ncc_window}) {
        if (win < 3 || win % 2 == 0) throw InputError("NCC window must be an odd integer >= 3");
    }
}

struct LossReport {
    double sim_vol = 0.0;
    double sim_sph = 0.0;
    double cons = 0.0;
    double reg_vol = 0.0;
    double reg_sph = 0.0;
    double structural = 0.0;
    double total = 0.0;

    friend bool operator==(const LossReport &, const LossReport &) = default;
};

inline double combine(const LossReport &r, const LossWeights &w) {
    return r.sim_vol + r.sim_sph + w.gamma_cons * r.cons + w.lambda_reg * (r.reg_vol + r.reg_sph) +
           w.kappa_struct * r.structural;
}

// ---------------------------------------------------------------------------------------------
// Box sums over a lattice of up to three axes (axis 0 fastest). Clipped axes shrink the window at
// the border; periodic axes wrap around.
// ---------------------------------------------------------------------------------------------
struct Lattice {
    std::array<int, 3> n{1, 1, 1};
    std::array<bool, 3> periodic{false, false, false};

    std::size_t size() const {
        return static_cast<std::size_t>(n[0]) * static_cast<std::size_t>(n[1]) * static_cast<std::size_t>(n[2]);
    }
    static Lattice volume(const Extent3 &e) { return {{e.nx, e.ny, e.nz}, {false, false, false}}; }
    static Lattice sphere(const Extent2 &e) { return {{e.width, e.height, 1}, {true, false, false}}; }
};

namespace detail {
inline void box_pass(std::vector<double> &data, const Lattice &lat, int axis, int r) {
    const int n = lat.n[static_cast<std::size_t>(axis)];
    if (n == 1 || r == 0) return;
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(lat.n[0])
                                                          : static_cast<std::size_t>(lat.n[0]) * lat.n[1]);
    const std::size_t lines = lat.size() / static_cast<std::size_t>(n);
    const bool wrap = lat.periodic[static_cast<std::size_t>(axis)];
    std::vector<double> prefix(static_cast<std::size_t>(n) + 1);
    std::vector<double> line(static_cast<std::size_t>(n));
    for (std::size_t l = 0; l < lines; ++l) {
        // Start offset of line l: decompose l over the other two axes.
        std::size_t base;
        if (axis == 0) {
            base = l * static_cast<std::size_t>(n);
        } else if (axis == 1) {
            const std::size_t n0 = static_cast<std::size_t>(lat.n[0]);
            base = (l % n0) + (l / n0) * n0 * static_cast<std::size_t>(n);
        } else {
            base = l;
        }
        prefix[0] = 0.0;
        for (int i = 0; i < n; ++i) {
            line[static_cast<std::size_t>(i)] = data[base + static_cast<std::size_t>(i) * stride];
            prefix[static_cast<std::size_t>(i) + 1] = prefix[static_cast<std::size_t>(i)] + line[static_cast<std::size_t>(i)];
        }
        const double total = prefix[static_cast<std::size_t>(n)];
        for (int i = 0; i < n; ++i) {
            double s;
            if (wrap) {
                const int lo = i - r, hi = i + r;
                s = 0.0;
                if (lo < 0) {
                    s += prefix[static_cast<std::size_t>(n)] - prefix[static_cast<std::size_t>(n + lo)];
                    s += prefix[static_cast<std::size_t>(hi) + 1];
                } else if (hi >= n) {
                    s += total - prefix[static_cast<std::size_t>(lo)];
                    s += prefix[static_cast<std::size_t>(hi - n) + 1];
                } else {
                    s = prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)];
                }
            } else {
                const int lo = std::max(0, i - r), hi = std::min(n - 1, i + r);
                s = prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)];
            }
            data[base + static_cast<std::size_t>(i) * stride] = s;
        }
    }
}
} // namespace detail

inline std::vector<double> box_sum(std::vector<double> data, const Lattice &lat, int radius) {
    for (int a = 0; a < 3; ++a) detail::box_pass(data, lat, a, radius);
    return data;
}

inline void check_window(const Lattice &lat, int window) {
    if (window < 3 || window % 2 == 0) throw InputError("NCC window must be an odd integer >= 3");
    for (int a = 0; a < 3; ++a) {
        if (lat.periodic[static_cast<std::size_t>(a)] && window > lat.n[static_cast<std::size_t>(a)]) {
            throw InputError("NCC window wider than a periodic axis");
        }
    }
}

// Local squared NCC loss: 1 - sum_c a_c * cross_c^2 / (var_f,c * var_g,c + eps), where the position
// weights a_c are uniform or proportional to `pos_weights` and sum to one. Optionally writes
// dLoss/dwarped into grad (overwritten).
inline double ncc_loss(const std::vector<double> &fixed, const std::vector<double> &warped, const Lattice &lat,
                       int window, const std::vector<double> *pos_weights, std::vector<double> *grad) {
    check_window(lat, window);
    const std::size_t n = lat.size();
    if (fixed.size() != n || warped.size() != n) throw InputError("ncc_loss: size mismatch");
    const int r = window / 2;
    std::vector<double> ones(n, 1.0), ff(n), gg(n), fg(n);
    for (std::size_t i = 0; i < n; ++i) {
        ff[i] = fixed[i] * fixed[i];
        gg[i] = warped[i] * warped[i];
        fg[i] = fixed[i] * warped[i];
    }
    const auto cnt = box_sum(ones, lat, r);
    const auto sf = box_sum(fixed, lat, r);
    const auto sg = box_sum(warped, lat, r);
    const auto sff = box_sum(std::move(ff), lat, r);
    const auto sgg = box_sum(std::move(gg), lat, r);
    const auto sfg = box_sum(std::move(fg), lat, r);

    double wsum = 0.0;
    if (pos_weights) {
        if (pos_weights->size() != n) throw InputError("ncc_loss: weight size mismatch");
        for (double w : *pos_weights) wsum += w;
    } else {
        wsum = static_cast<double>(n);
    }
    std::vector<double> a_coef, a_fmean, b_coef, b_gmean;
    if (grad) {
        a_coef.assign(n, 0.0);
        a_fmean.assign(n, 0.0);
        b_coef.assign(n, 0.0);
        b_gmean.assign(n, 0.0);
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        const double m = cnt[c];
        const double fbar = sf[c] / m, gbar = sg[c] / m;
        const double cr = sfg[c] - sf[c] * gbar;
        const double vf = sff[c] - sf[c] * fbar;
        const double vg = sgg[c] - sg[c] * gbar;
        const double den = vf * vg + kNccEpsilon;
        const double a = (pos_weights ? (*pos_weights)[c] : 1.0) / wsum;
        acc += a * cr * cr / den;
        if (grad) {
            const double A = 2.0 * cr / den;
            const double B = 2.0 * cr * cr * vf / (den * den);
            a_coef[c] = a * A;
            a_fmean[c] = a * A * fbar;
            b_coef[c] = a * B;
            b_gmean[c] = a * B * gbar;
        }
    }
    if (grad) {
        // Windows are symmetric, so the adjoint of the box sum is the box sum itself.
        const auto sa = box_sum(std::move(a_coef), lat, r);
        const auto saf = box_sum(std::move(a_fmean), lat, r);
        const auto sb = box_sum(std::move(b_coef), lat, r);
        const auto sbg = box_sum(std::move(b_gmean), lat, r);
        grad->assign(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            (*grad)[j] = -(fixed[j] * sa[j] - saf[j] - warped[j] * sb[j] + sbg[j]);
        }
    }
    return 1.0 - acc;
}

inline double loss_ncc_local(const Volume3 &fixed, const Volume3 &warped, int window = 9) {
    check_same_extent(fixed.extent(), warped.extent(), "loss_ncc_local");
    return ncc_loss(fixed.grid.data(), warped.grid.data(), Lattice::volume(fixed.extent()), window, nullptr, nullptr);
}

inline std::vector<double> expand_row_weights(const SphereGrid &g) {
    const auto rw = g.row_weights();
    std::vector<double> w(g.extent.size());
    for (int r = 0; r < g.height(); ++r)
        for (int c = 0; c < g.width(); ++c) w[g.extent.index(c, r)] = rw[static_cast<std::size_t>(r)];
    return w;
}

// Mean over channels of the sin(theta)-weighted local NCC loss.
inline double loss_ncc_local(const PlanarGrid2 &fixed, const PlanarGrid2 &warped, int window = 9,
                             bool area_weighted = true) {
    if (!(fixed.extent() == warped.extent()) || fixed.channels.size() != warped.channels.size() ||
        fixed.channels.empty()) {
        throw InputError("loss_ncc_local: spherical grid shape mismatch");
    }
    const auto w = expand_row_weights(fixed.geometry);
    double s = 0.0;
    for (std::size_t c = 0; c < fixed.channels.size(); ++c) {
        s += ncc_loss(fixed.channels[c].data(), warped.channels[c].data(), Lattice::sphere(fixed.extent()), window,
                      area_weighted ? &w : nullptr, nullptr);
    }
    return s / static_cast<double>(fixed.channels.size());
}

// ---------------------------------------------------------------------------------------------
// Soft Dice over K channels: 1 - (1/K) sum_k (2 sum a p q + eps) / (sum a p + sum a q + eps).
// ---------------------------------------------------------------------------------------------
inline double soft_dice_loss(const std::vector<const std::vector<double> *> &fixed,
                             const std::vector<const std::vector<double> *> &warped,
                             const std::vector<double> *pos_weights, std::vector<std::vector<double>> *grad) {
    if (fixed.size() != warped.size() || fixed.empty()) throw InputError("soft Dice: channel count mismatch");
    const std::size_t K = fixed.size();
    const std::size_t n = fixed[0]->size();
    if (grad) grad->assign(K, std::vector<double>(n, 0.0));
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto &p = *fixed[k];
        const auto &q = *warped[k];
        if (p.size() != n || q.size() != n) throw InputError("soft Dice: shape mismatch");
        double inter = 0.0, sp = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double a = pos_weights ? (*pos_weights)[i] : 1.0;
            inter += a * p[i] * q[i];
            sp += a * p[i];
            sq += a * q[i];
        }
        const double num = 2.0 * inter + kDiceEpsilon;
        const double den = sp + sq + kDiceEpsilon;
        acc += num / den;
        if (grad) {
            auto &gk = (*grad)[k];
            for (std::size_t i = 0; i < n; ++i) {
                const double a = pos_weights ? (*pos_weights)[i] : 1.0;
                gk[i] = -(2.0 * a * p[i] * den - num * a) / (den * den) / static_cast<double>(K);
            }
        }
    }
    return 1.0 - acc / static_cast<double>(K);
}

inline double loss_soft_dice(const std::vector<Volume3> &fixed_onehot, const std::vector<Volume3> &warped_onehot) {
    if (fixed_onehot.size() != warped_onehot.size() || fixed_onehot.empty()) {
        throw InputError("loss_soft_dice: channel count mismatch");
    }
    std::vector<const std::vector<double> *> p, q;
    for (std::size_t k = 0; k < fixed_onehot.size(); ++k) {
        check_same_extent(fixed_onehot[k].extent(), warped_onehot[k].extent(), "loss_soft_dice");
        p.push_back(&fixed_onehot[k].grid.data());
        q.push_back(&warped_onehot[k].grid.data());
    }
    return soft_dice_loss(p, q, nullptr, nullptr);
}

inline double loss_soft_dice(const PlanarGrid2 &fixed, const PlanarGrid2 &warped) {
    if (!(fixed.extent() == warped.extent()) || fixed.channels.size() != warped.channels.size()) {
        throw InputError("loss_soft_dice: spherical grid shape mismatch");
    }
    const auto w = expand_row_weights(fixed.geometry);
    std::vector<const std::vector<double> *> p, q;
    for (std::size_t k = 0; k < fixed.channels.size(); ++k) {
        p.push_back(&fixed.channels[k].data());
        q.push_back(&warped.channels[k].data());
    }
    return soft_dice_loss(p, q, &w, nullptr);
}

// ---------------------------------------------------------------------------------------------
// Mean squared Frobenius norm of the displacement Jacobian (central differences, interior only).
// ---------------------------------------------------------------------------------------------
inline double loss_gradient_reg(const DeformationField3 &f, Grid3<Vec3> *grad = nullptr) {
    const auto &e = f.extent();
    if (e.nx < 3 || e.ny < 3 || e.nz < 3) throw InputError("loss_gradient_reg: every dimension must be >= 3");
    const double inv = 1.0 / static_cast<double>(static_cast<std::size_t>(e.nx - 2) * (e.ny - 2) * (e.nz - 2));
    if (grad) *grad = Grid3<Vec3>(e);
    const std::size_t st[3] = {1, static_cast<std::size_t>(e.nx), static_cast<std::size_t>(e.nx) * e.ny};
    double acc = 0.0;
    for (int z = 1; z < e.nz - 1; ++z)
        for (int y = 1; y < e.ny - 1; ++y)
            for (int x = 1; x < e.nx - 1; ++x) {
                const std::size_t i = e.index(x, y, z);
                for (int a = 0; a < 3; ++a) {
                    const Vec3 d = (f.u[i + st[a]] - f.u[i - st[a]]) * 0.5;
                    acc += dot(d, d);
                    if (grad) {
                        (*grad)[i + st[a]] += d * inv;
                        (*grad)[i - st[a]] -= d * inv;
                    }
                }
            }
    return acc * inv;
}

// Interior rows, all columns (azimuth wraps), pixel units.
inline double loss_gradient_reg(const DeformationField2 &f, Grid2<Vec2> *grad = nullptr) {
    const auto &e = f.extent();
    if (e.width < 3 || e.height < 3) throw InputError("loss_gradient_reg: grid must be at least 3x3");
    const double inv = 1.0 / static_cast<double>(static_cast<std::size_t>(e.width) * (e.height - 2));
    if (grad) *grad = Grid2<Vec2>(e);
    double acc = 0.0;
    for (int r = 1; r < e.height - 1; ++r)
        for (int c = 0; c < e.width; ++c) {
            const std::size_t l = e.index((c + e.width - 1) % e.width, r), rr = e.index((c + 1) % e.width, r);
            const std::size_t up = e.index(c, r - 1), dn = e.index(c, r + 1);
            const Vec2 dx = (f.u[rr] - f.u[l]) * 0.5;
            const Vec2 dy = (f.u[dn] - f.u[up]) * 0.5;
            acc += dot(dx, dx) + dot(dy, dy);
            if (grad) {
                (*grad)[rr] += dx * inv;
                (*grad)[l] -= dx * inv;
                (*grad)[dn] += dy * inv;
                (*grad)[up] -= dy * inv;
            }
        }
    return acc * inv;
}

// ---------------------------------------------------------------------------------------------
// Consistency coupling: mean over fixed-mesh vertices of |phi(v) - tau2^-1(psi(pi(tau1(v))))|^2.
// tau2^-1 locates the displaced sphere point on the moving sphere map and interpolates the moving
// mesh barycentrically.
// ---------------------------------------------------------------------------------------------
struct ConsistencyData {
    std::vector<Vec3> verts1;      // fixed mesh, volume coordinates of the working grid
    std::vector<Vec2> rho1;        // fixed sphere vertices in spherical-grid pixels
    std::vector<Vec3> verts2;      // moving mesh, volume coordinates of the working grid
    std::vector<Triangle> tris2;
    std::shared_ptr<const SphereMap> sphere2;
    std::shared_ptr<const SphereLocator> locator2;
    SphereGrid grid;
};

inline ConsistencyData make_consistency_data(const CorticalMesh &mesh1, const SphereMap &sm1,
                                             const CorticalMesh &mesh2, const SphereMap &sm2,
                                             const SphereGrid &grid, int coarsen = 0) {
    validate_pair(mesh1, sm1, "fixed mesh/sphere");
    validate_pair(mesh2, sm2, "moving mesh/sphere");
    ConsistencyData d;
    d.grid = grid;
    d.verts1.reserve(mesh1.verts.size());
    for (const auto &v : mesh1.verts) d.verts1.push_back(to_coarse_coord(v, coarsen));
    for (const auto &s : sm1.sverts) d.rho1.push_back(vertex_pixel(grid, s));
    for (const auto &v : mesh2.verts) d.verts2.push_back(to_coarse_coord(v, coarsen));
    d.tris2 = sm2.tris;
    auto sphere = std::make_shared<SphereMap>(sm2);
    d.locator2 = std::make_shared<SphereLocator>(*sphere);
    d.sphere2 = std::move(sphere);
    return d;
}

struct ConsistencyTarget {
    Vec3 target;
    std::array<Vec3, 3> dtarget_drho_cols{}; // unused third column; [0] = d/dx (azimuth), [1] = d/dy (rows)
};

namespace detail {
// target = sum_k P_k b_k(d), with d the direction of pixel q; also returns d target / d q.
inline Vec3 consistency_target(const ConsistencyData &cd, const Vec2 &q, std::array<Vec3, 2> *jac) {
    const double th = cd.grid.theta(q.y), ph = cd.grid.phi(q.x);
    const Vec3 d = unproject(th, ph);
    const auto hit = cd.locator2->locate(d);
    if (!hit) throw NumericalError("consistency: displaced point could not be located on the moving sphere map");
    const auto &tri = cd.tris2[static_cast<std::size_t>(hit->tri)];
    const std::array<Vec3, 3> P = {cd.verts2[tri[0]], cd.verts2[tri[1]], cd.verts2[tri[2]]};
    Vec3 t{};
    for (int k = 0; k < 3; ++k) t += P[k] * hit->bary[k];
    if (jac) {
        const auto &n = cd.locator2->normals(hit->tri);
        const Vec3 N = n[0] + n[1] + n[2];
        const double dn = dot(d, N);
        // dt/dd = (sum_k P_k n_k^T - t N^T) / (d . N)
        auto dt_dd = [&](const Vec3 &dd) {
            Vec3 r{};
            for (int k = 0; k < 3; ++k) r += P[k] * dot(n[k], dd);
            r -= t * dot(N, dd);
            return r * (1.0 / dn);
        };
        const double ct = std::cos(th), st = std::sin(th), cp = std::cos(ph), sp = std::sin(ph);
        const Vec3 dd_dth{ct * cp, ct * sp, -st};
        const Vec3 dd_dph{-st * sp, st * cp, 0.0};
        (*jac)[0] = dt_dd(dd_dph) * cd.grid.dphi();
        (*jac)[1] = dt_dd(dd_dth) * cd.grid.dtheta();
    }
    return t;
}
} // namespace detail

// u and us are the integrated displacements. Gradients are accumulated (+=) with the given scale.
inline double consistency_loss(const ConsistencyData &cd, const Grid3<Vec3> &u, const Grid2<Vec2> &us,
                               Grid3<Vec3> *grad_u, Grid2<Vec2> *grad_us, double scale = 1.0,
                               std::vector<double> *per_vertex = nullptr) {
    const std::size_t nv = cd.verts1.size();
    if (nv == 0) return 0.0;
    if (!(us.extent() == cd.grid.extent)) throw InputError("consistency: spherical field/grid extent mismatch");
    const double inv = 1.0 / static_cast<double>(nv);
    if (per_vertex) per_vertex->assign(nv, 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < nv; ++i) {
        const Stencil3 s3 = make_stencil(u.extent(), cd.verts1[i]);
        const Vec3 a = cd.verts1[i] + apply<Vec3>(s3, u.data());
        const Stencil2 s2 = make_stencil(us.extent(), cd.rho1[i], RowPolicy::Clamp);
        const Vec2 q = cd.rho1[i] + apply<Vec2>(s2, us.data());
        std::array<Vec3, 2> jac{};
        const bool need_jac = grad_us != nullptr;
        const Vec3 t = detail::consistency_target(cd, q, need_jac ? &jac : nullptr);
        const Vec3 diff = a - t;
        const double e2 = dot(diff, diff);
        acc += e2;
        if (per_vertex) (*per_vertex)[i] = e2;
        const Vec3 g = diff * (2.0 * inv * scale);
        if (grad_u) scatter(s3, grad_u->data(), g);
        if (grad_us) {
            const Vec2 gq{-dot(jac[0], g), -dot(jac[1], g)};
            scatter(s2, grad_us->data(), gq);
        }
    }
    return acc * inv;
}

// Standalone form over full-resolution fields.
inline double loss_consistency(const DeformationField3 &phi, const DeformationField2 &psi, const CorticalMesh &mesh1,
                               const SphereMap &sm1, const CorticalMesh &mesh2, const SphereMap &sm2,
                               const SphereGrid &grid) {
    const auto cd = make_consistency_data(mesh1, sm1, mesh2, sm2, grid);
    return consistency_loss(cd, phi.u, psi.u, nullptr, nullptr);
}

// ---------------------------------------------------------------------------------------------
// Assembled objective for one working resolution.
// ---------------------------------------------------------------------------------------------
struct SphereTerms {
    SphereGrid grid;
    PlanarGrid2 fixed_desc;     // may have zero channels
    PlanarGrid2 moving_desc;
    PlanarGrid2 fixed_parcels;  // zero channels when no parcellation is available
    PlanarGrid2 moving_parcels;
    std::optional<ConsistencyData> cons;
};

struct ObjectiveData {
    Volume3 fixed;
    Volume3 moving;
    std::vector<Volume3> fixed_onehot; // empty when no labelmaps
    std::vector<Volume3> moving_onehot;
    std::optional<SphereTerms> sphere; // absent when sphere inputs are missing
};

struct FieldState {
    VelocityField3 v;
    VelocityField2 vs; // empty grid when the sphere path is inactive
};

struct FieldGradient {
    Grid3<Vec3> v;
    Grid2<Vec2> vs;
};

// Which terms enter the total; used to isolate terms in gradient checks.
struct TermMask {
    bool sim_vol = true;
    bool sim_sph = true;
    bool cons = true;
    bool reg = true;
    bool structural = true;
};

struct ObjectiveOutputs {
    DeformationField3 phi;
    DeformationField2 psi;
};

namespace detail {
inline void check_term(double value, const char *name) {
    if (!std::isfinite(value)) throw NumericalError(std::string("non-finite loss term: ") + name);
}

// Samples the channels at x + u(x) for every voxel; partials[c][i] holds d value / d position.
inline void warp_channels_3d(const std::vector<const Volume3 *> &src, const Grid3<Vec3> &u,
                             std::vector<std::vector<double>> &out, std::vector<std::vector<Vec3>> *partials) {
    const auto &e = u.extent();
    out.assign(src.size(), std::vector<double>(u.size()));
    if (partials) partials->assign(src.size(), std::vector<Vec3>(u.size()));
    parallel_for(u.size(), [&](std::size_t b, std::size_t end) {
        for (std::size_t i = b; i < end; ++i) {
            const Stencil3 s = make_stencil(e, voxel_position(e, i) + u[i]);
            for (std::size_t c = 0; c < src.size(); ++c) {
                const auto &data = src[c]->grid.data();
                out[c][i] = apply<double>(s, data);
                if (partials) {
                    const auto d = apply_gradient<double>(s, data);
                    (*partials)[c][i] = {d[0], d[1], d[2]};
                }
            }
        }
    });
}

inline void warp_channels_2d(const std::vector<const Grid2<double> *> &src, const Grid2<Vec2> &us,
                             std::vector<std::vector<double>> &out, std::vector<std::vector<Vec2>> *partials) {
    const auto &e = us.extent();
    out.assign(src.size(), std::vector<double>(us.size()));
    if (partials) partials->assign(src.size(), std::vector<Vec2>(us.size()));
    parallel_for(us.size(), [&](std::size_t b, std::size_t end) {
        for (std::size_t i = b; i < end; ++i) {
            const Stencil2 s = make_stencil(e, pixel_position(e, i) + us[i], RowPolicy::PoleReflect);
            for (std::size_t c = 0; c < src.size(); ++c) {
                const auto &data = src[c]->data();
                out[c][i] = apply<double>(s, data);
                if (partials) {
                    const auto d = apply_gradient<double>(s, data);
                    (*partials)[c][i] = {d[0], d[1]};
                }
            }
        }
    });
}
} // namespace detail

// Evaluates sim_vol + sim_sph + gamma cons + lambda (reg_vol + reg_sph) + kappa struct at the given
// velocity fields. When grad is non-null it receives the gradient with respect to both velocity grids.
inline LossReport total_loss(const ObjectiveData &od, const FieldState &fs, const LossWeights &w, int svf_steps,
                             FieldGradient *grad = nullptr, const TermMask &mask = {},
                             ObjectiveOutputs *outputs = nullptr) {
    LossReport rep;
    const auto &e = od.fixed.extent();
    check_same_extent(e, od.moving.extent(), "total_loss");
    check_same_extent(e, fs.v.extent(), "total_loss (velocity)");

    IntegrationTape3 tape3;
    const auto phi = integrate_svf(fs.v, svf_steps, grad ? &tape3 : nullptr);
    Grid3<Vec3> gu;
    if (grad) gu = Grid3<Vec3>(e);

    // Volumetric similarity and structure share one pass of stencils.
    const bool vol_struct = mask.structural && !od.fixed_onehot.empty() && w.kappa_struct > 0.0;
    {
        std::vector<const Volume3 *> src{&od.moving};
        if (vol_struct)
            for (const auto &ch : od.moving_onehot) src.push_back(&ch);
        std::vector<std::vector<double>> warped;
        std::vector<std::vector<Vec3>> partials;
        detail::warp_channels_3d(src, phi.u, warped, grad ? &partials : nullptr);
        std::vector<std::vector<double>> dwarp(src.size());
        if (mask.sim_vol) {
            rep.sim_vol = ncc_loss(od.fixed.grid.data(), warped[0], Lattice::volume(e), w.ncc_window, nullptr,
                                   grad ? &dwarp[0] : nullptr);
            detail::check_term(rep.sim_vol, "sim_vol");
        }
        if (vol_struct) {
            std::vector<const std::vector<double> *> p, q;
            for (std::size_t k = 0; k < od.fixed_onehot.size(); ++k) {
                p.push_back(&od.fixed_onehot[k].grid.data());
                q.push_back(&warped[k + 1]);
            }
            std::vector<std::vector<double>> gq;
            rep.structural += soft_dice_loss(p, q, nullptr, grad ? &gq : nullptr);
            detail::check_term(rep.structural, "struct (volume)");
            if (grad)
                for (std::size_t k = 0; k < gq.size(); ++k) {
                    for (auto &x : gq[k]) x *= w.kappa_struct;
                    dwarp[k + 1] = std::move(gq[k]);
                }
        }
        if (grad) {
            for (std::size_t c = 0; c < src.size(); ++c) {
                if (dwarp[c].empty()) continue;
                for (std::size_t i = 0; i < gu.size(); ++i) gu[i] += partials[c][i] * dwarp[c][i];
            }
        }
    }
    if (mask.reg) {
        Grid3<Vec3> greg;
        rep.reg_vol = loss_gradient_reg(phi, grad ? &greg : nullptr);
        detail::check_term(rep.reg_vol, "reg_vol");
        if (grad)
            for (std::size_t i = 0; i < gu.size(); ++i) gu[i] += greg[i] * w.lambda_reg;
    }

    DeformationField2 psi;
    Grid2<Vec2> gus;
    IntegrationTape2 tape2;
    if (od.sphere) {
        const auto &sp = *od.sphere;
        const auto &e2 = sp.grid.extent;
        if (!(fs.vs.extent() == e2)) throw InputError("total_loss: spherical velocity extent mismatch");
        psi = integrate_svf(fs.vs, svf_steps, grad ? &tape2 : nullptr);
        if (grad) gus = Grid2<Vec2>(e2);
        const bool sim = mask.sim_sph && !sp.fixed_desc.channels.empty();
        const bool sstruct = mask.structural && !sp.fixed_parcels.channels.empty() && w.kappa_struct > 0.0;
        if (sim || sstruct) {
            std::vector<const Grid2<double> *> src;
            const std::size_t nd = sim ? sp.moving_desc.channels.size() : 0;
            if (sim)
                for (const auto &ch : sp.moving_desc.channels) src.push_back(&ch);
            if (sstruct)
                for (const auto &ch : sp.moving_parcels.channels) src.push_back(&ch);
            std::vector<std::vector<double>> warped;
            std::vector<std::vector<Vec2>> partials;
            detail::warp_channels_2d(src, psi.u, warped, grad ? &partials : nullptr);
            std::vector<std::vector<double>> dwarp(src.size());
            const auto weights = expand_row_weights(sp.grid);
            if (sim) {
                for (std::size_t c = 0; c < nd; ++c) {
                    rep.sim_sph += ncc_loss(sp.fixed_desc.channels[c].data(), warped[c], Lattice::sphere(e2),
                                            w.sphere_ncc_window, &weights, grad ? &dwarp[c] : nullptr);
                    if (grad)
                        for (auto &x : dwarp[c]) x /= static_cast<double>(nd);
                }
                rep.sim_sph /= static_cast<double>(nd);
                detail::check_term(rep.sim_sph, "sim_sph");
            }
            if (sstruct) {
                std::vector<const std::vector<double> *> p, q;
                for (std::size_t k = 0; k < sp.fixed_parcels.channels.size(); ++k) {
                    p.push_back(&sp.fixed_parcels.channels[k].data());
                    q.push_back(&warped[nd + k]);
                }
                std::vector<std::vector<double>> gq;
                rep.structural += soft_dice_loss(p, q, &weights, grad ? &gq : nullptr);
                detail::check_term(rep.structural, "struct (sphere)");
                if (grad)
                    for (std::size_t k = 0; k < gq.size(); ++k) {
                        for (auto &x : gq[k]) x *= w.kappa_struct;
                        dwarp[nd + k] = std::move(gq[k]);
                    }
            }
            if (grad) {
                for (std::size_t c = 0; c < src.size(); ++c) {
                    if (dwarp[c].empty()) continue;
                    for (std::size_t i = 0; i < gus.size(); ++i) gus[i] += partials[c][i] * dwarp[c][i];
                }
            }
        }
        if (mask.reg) {
            Grid2<Vec2> greg;
            rep.reg_sph = loss_gradient_reg(psi, grad ? &greg : nullptr);
            detail::check_term(rep.reg_sph, "reg_sph");
            if (grad)
                for (std::size_t i = 0; i < gus.size(); ++i) gus[i] += greg[i] * w.lambda_reg;
        }
        if (mask.cons && sp.cons && w.gamma_cons > 0.0) {
            rep.cons = consistency_loss(*sp.cons, phi.u, psi.u, grad ? &gu : nullptr, grad ? &gus : nullptr,
                                        w.gamma_cons);
            detail::check_term(rep.cons, "cons");
        }
    }

    rep.total = combine(rep, w);
    detail::check_term(rep.total, "total");
    if (grad) {
        grad->v = integrate_svf_adjoint(tape3, std::move(gu));
        if (od.sphere) grad->vs = integrate_svf_adjoint(tape2, std::move(gus));
        else grad->vs = Grid2<Vec2>();
    }
    if (outputs) {
        outputs->phi = phi;
        outputs->psi = std::move(psi);
    }
    return rep;
}

} // namespace corvol
