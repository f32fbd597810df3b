// fields.hpp - stationary velocity fields, scaling-and-squaring integration (with its adjoint),
// composition, warping and Jacobian analysis for 3D volumes and the 2D spherical grid.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "core.hpp"
#include "volume.hpp"

namespace corvol {

// ---------------------------------------------------------------------------------------------
// Field types. Displacements are stored in voxels (3D) or grid pixels (2D); phi(x) = x + u(x).
// ---------------------------------------------------------------------------------------------
struct VelocityField3 {
    Grid3<Vec3> v;
    const Extent3 &extent() const { return v.extent(); }
    friend bool operator==(const VelocityField3 &, const VelocityField3 &) = default;
};

struct DeformationField3 {
    Grid3<Vec3> u;
    const Extent3 &extent() const { return u.extent(); }
    friend bool operator==(const DeformationField3 &, const DeformationField3 &) = default;
};

struct VelocityField2 {
    Grid2<Vec2> v;
    const Extent2 &extent() const { return v.extent(); }
    friend bool operator==(const VelocityField2 &, const VelocityField2 &) = default;
};

struct DeformationField2 {
    Grid2<Vec2> u;
    const Extent2 &extent() const { return u.extent(); }
    friend bool operator==(const DeformationField2 &, const DeformationField2 &) = default;
};

inline DeformationField3 identity_field(const Extent3 &e) { return {Grid3<Vec3>(e)}; }
inline DeformationField2 identity_field(const Extent2 &e) { return {Grid2<Vec2>(e)}; }

inline Vec3 voxel_position(const Extent3 &e, std::size_t i) {
    const std::size_t nx = static_cast<std::size_t>(e.nx), ny = static_cast<std::size_t>(e.ny);
    return {static_cast<double>(i % nx), static_cast<double>((i / nx) % ny), static_cast<double>(i / (nx * ny))};
}

inline Vec2 pixel_position(const Extent2 &e, std::size_t i) {
    const std::size_t w = static_cast<std::size_t>(e.width);
    return {static_cast<double>(i % w), static_cast<double>(i / w)};
}

// ---------------------------------------------------------------------------------------------
// Bilinear stencil on the spherical grid. Columns (azimuth) are periodic. Rows are either clamped
// (displacement fields) or continued across the poles by reflection with a half-turn azimuth shift
// (scalar grids).
// ---------------------------------------------------------------------------------------------
enum class RowPolicy { Clamp, PoleReflect };

struct Stencil2 {
    std::array<std::size_t, 4> idx{};
    std::array<double, 4> w{};
    std::array<std::array<double, 4>, 2> dw{};
};

namespace detail {
inline int wrap_index(std::int64_t j, int n) {
    const std::int64_t m = j % n;
    return static_cast<int>(m < 0 ? m + n : m);
}
} // namespace detail

inline Stencil2 make_stencil(const Extent2 &e, const Vec2 &p, RowPolicy policy) {
    if (!is_finite(p) || std::abs(p.x) > 1e9 || std::abs(p.y) > 1e9) {
        throw NumericalError("spherical grid sampling: non-finite or runaway coordinate");
    }
    const int W = e.width, H = e.height;
    double y = p.y, x = p.x, sy = 1.0;
    bool flip = false;
    int r0 = 0, r1 = 0;
    double fy = 0.0, dfy = 1.0;
    bool shift0 = false, shift1 = false;
    if (policy == RowPolicy::Clamp) {
        const auto a = detail::axis_cell_clamped(y, H);
        r0 = a.i0;
        r1 = a.i0 + 1;
        fy = a.f;
        dfy = a.df;
    } else {
        for (int it = 0; it < 8 && (y < -0.5 || y > H - 0.5); ++it) {
            y = y < -0.5 ? -1.0 - y : 2.0 * H - 1.0 - y;
            sy = -sy;
            flip = !flip;
        }
        y = std::clamp(y, -0.5, H - 0.5);
        r0 = static_cast<int>(std::floor(y));
        if (r0 > H - 1) r0 = H - 1;
        fy = y - r0;
        r1 = r0 + 1;
        if (r0 < 0) {
            r0 = -1 - r0;
            shift0 = true;
        }
        if (r1 > H - 1) {
            r1 = 2 * H - 1 - r1;
            shift1 = true;
        }
    }
    if (flip) x += W / 2;
    const double jf = std::floor(x);
    const double fx = x - jf;
    const auto j = static_cast<std::int64_t>(jf);
    const int half = W / 2;
    const int c00 = detail::wrap_index(j + (shift0 ? half : 0), W);
    const int c01 = detail::wrap_index(j + 1 + (shift0 ? half : 0), W);
    const int c10 = detail::wrap_index(j + (shift1 ? half : 0), W);
    const int c11 = detail::wrap_index(j + 1 + (shift1 ? half : 0), W);
    probe_mix(static_cast<std::uint64_t>(c00) * 7919ULL + static_cast<std::uint64_t>(r0) * 104729ULL +
              static_cast<std::uint64_t>(flip) * 3ULL + static_cast<std::uint64_t>(dfy == 0.0) * 5ULL);

    Stencil2 s;
    s.idx = {e.index(c00, r0), e.index(c01, r0), e.index(c10, r1), e.index(c11, r1)};
    const double wy0 = 1.0 - fy, wy1 = fy;
    s.w = {(1.0 - fx) * wy0, fx * wy0, (1.0 - fx) * wy1, fx * wy1};
    s.dw[0] = {-wy0, wy0, -wy1, wy1};
    const double dy = sy * dfy;
    s.dw[1] = {-(1.0 - fx) * dy, -fx * dy, (1.0 - fx) * dy, fx * dy};
    return s;
}

template <class T, class Data> T apply(const Stencil2 &s, const Data &data) {
    T v{};
    for (int c = 0; c < 4; ++c) v += data[s.idx[c]] * s.w[c];
    return v;
}

template <class T, class Data> std::array<T, 2> apply_gradient(const Stencil2 &s, const Data &data) {
    std::array<T, 2> d{};
    for (int c = 0; c < 4; ++c) {
        d[0] += data[s.idx[c]] * s.dw[0][c];
        d[1] += data[s.idx[c]] * s.dw[1][c];
    }
    return d;
}

template <class T, class Data> void scatter(const Stencil2 &s, Data &adj, const T &g) {
    for (int c = 0; c < 4; ++c) adj[s.idx[c]] += g * s.w[c];
}

template <class T> T sample_bilinear(const Grid2<T> &g, const Vec2 &p, RowPolicy policy) {
    return apply<T>(make_stencil(g.extent(), p, policy), g.data());
}

// ---------------------------------------------------------------------------------------------
// Scaling and squaring. The tape keeps every intermediate displacement so the adjoint can run
// backwards through the self-compositions.
// ---------------------------------------------------------------------------------------------
inline constexpr int kDefaultSvfSteps = 7;

struct IntegrationTape3 {
    std::vector<Grid3<Vec3>> stages; // u_0 ... u_steps
};

struct IntegrationTape2 {
    std::vector<Grid2<Vec2>> stages;
};

namespace detail {
inline void check_steps(int steps) {
    if (steps <= 0) throw InputError("integrate_svf: steps must be >= 1, got " + std::to_string(steps));
}

inline Grid3<Vec3> square_once(const Grid3<Vec3> &u) {
    const auto &e = u.extent();
    Grid3<Vec3> out(e);
    parallel_for(u.size(), [&](std::size_t b, std::size_t end) {
        for (std::size_t i = b; i < end; ++i) {
            const Vec3 p = voxel_position(e, i) + u[i];
            out[i] = u[i] + apply<Vec3>(make_stencil(e, p), u.data());
        }
    });
    return out;
}

inline Grid2<Vec2> square_once(const Grid2<Vec2> &u) {
    const auto &e = u.extent();
    Grid2<Vec2> out(e);
    parallel_for(u.size(), [&](std::size_t b, std::size_t end) {
        for (std::size_t i = b; i < end; ++i) {
            const Vec2 p = pixel_position(e, i) + u[i];
            out[i] = u[i] + apply<Vec2>(make_stencil(e, p, RowPolicy::Clamp), u.data());
        }
    });
    return out;
}
} // namespace detail

inline DeformationField3 integrate_svf(const VelocityField3 &v, int steps = kDefaultSvfSteps,
                                       IntegrationTape3 *tape = nullptr) {
    detail::check_steps(steps);
    Grid3<Vec3> u = v.v;
    const double scale = std::ldexp(1.0, -steps);
    for (auto &x : u.data()) x *= scale;
    if (tape) {
        tape->stages.clear();
        tape->stages.push_back(u);
    }
    for (int k = 0; k < steps; ++k) {
        u = detail::square_once(u);
        if (tape) tape->stages.push_back(u);
    }
    return {std::move(u)};
}

inline DeformationField2 integrate_svf(const VelocityField2 &v, int steps = kDefaultSvfSteps,
                                       IntegrationTape2 *tape = nullptr) {
    detail::check_steps(steps);
    Grid2<Vec2> u = v.v;
    const double scale = std::ldexp(1.0, -steps);
    for (auto &x : u.data()) x *= scale;
    if (tape) {
        tape->stages.clear();
        tape->stages.push_back(u);
    }
    for (int k = 0; k < steps; ++k) {
        u = detail::square_once(u);
        if (tape) tape->stages.push_back(u);
    }
    return {std::move(u)};
}

// Given dL/du for the integrated displacement, returns dL/dv.
inline Grid3<Vec3> integrate_svf_adjoint(const IntegrationTape3 &tape, Grid3<Vec3> grad_u) {
    const int steps = static_cast<int>(tape.stages.size()) - 1;
    for (int k = steps - 1; k >= 0; --k) {
        const auto &u = tape.stages[static_cast<std::size_t>(k)];
        const auto &e = u.extent();
        Grid3<Vec3> prev = grad_u; // identity branch of u + S(u, x + u)
        for (std::size_t i = 0; i < u.size(); ++i) {
            const Vec3 &g = grad_u[i];
            if (g.x == 0.0 && g.y == 0.0 && g.z == 0.0) continue;
            const Stencil3 s = make_stencil(e, voxel_position(e, i) + u[i]);
            scatter(s, prev.data(), g);
            const auto d = apply_gradient<Vec3>(s, u.data());
            prev[i] += Vec3{dot(d[0], g), dot(d[1], g), dot(d[2], g)};
        }
        grad_u = std::move(prev);
    }
    const double scale = std::ldexp(1.0, -steps);
    for (auto &g : grad_u.data()) g *= scale;
    return grad_u;
}

inline Grid2<Vec2> integrate_svf_adjoint(const IntegrationTape2 &tape, Grid2<Vec2> grad_u) {
    const int steps = static_cast<int>(tape.stages.size()) - 1;
    for (int k = steps - 1; k >= 0; --k) {
        const auto &u = tape.stages[static_cast<std::size_t>(k)];
        const auto &e = u.extent();
        Grid2<Vec2> prev = grad_u;
        for (std::size_t i = 0; i < u.size(); ++i) {
            const Vec2 &g = grad_u[i];
            if (g.x == 0.0 && g.y == 0.0) continue;
            const Stencil2 s = make_stencil(e, pixel_position(e, i) + u[i], RowPolicy::Clamp);
            scatter(s, prev.data(), g);
            const auto d = apply_gradient<Vec2>(s, u.data());
            prev[i] += Vec2{dot(d[0], g), dot(d[1], g)};
        }
        grad_u = std::move(prev);
    }
    const double scale = std::ldexp(1.0, -steps);
    for (auto &g : grad_u.data()) g *= scale;
    return grad_u;
}

// ---------------------------------------------------------------------------------------------
// Composition and warping.
// ---------------------------------------------------------------------------------------------

// (f o g)(x) = f(g(x)); the stored displacement is u_g(x) + u_f(x + u_g(x)).
inline DeformationField3 compose(const DeformationField3 &f, const DeformationField3 &g) {
    if (!(f.extent() == g.extent())) {
        throw InputError("compose: extent mismatch " + to_string(f.extent()) + " vs " + to_string(g.extent()));
    }
    const auto &e = g.extent();
    DeformationField3 out{Grid3<Vec3>(e)};
    for (std::size_t i = 0; i < g.u.size(); ++i) {
        const Vec3 p = voxel_position(e, i) + g.u[i];
        out.u[i] = g.u[i] + apply<Vec3>(make_stencil(e, p), f.u.data());
    }
    return out;
}

inline DeformationField2 compose(const DeformationField2 &f, const DeformationField2 &g) {
    if (!(f.extent() == g.extent())) {
        throw InputError("compose: extent mismatch " + to_string(f.extent()) + " vs " + to_string(g.extent()));
    }
    const auto &e = g.extent();
    DeformationField2 out{Grid2<Vec2>(e)};
    for (std::size_t i = 0; i < g.u.size(); ++i) {
        const Vec2 p = pixel_position(e, i) + g.u[i];
        out.u[i] = g.u[i] + apply<Vec2>(make_stencil(e, p, RowPolicy::Clamp), f.u.data());
    }
    return out;
}

inline void check_same_extent(const Extent3 &a, const Extent3 &b, const char *what) {
    if (!(a == b)) throw InputError(std::string(what) + ": extent mismatch " + to_string(a) + " vs " + to_string(b));
}

// out(x) = vol(x + u(x)), trilinear.
inline Volume3 warp_volume(const Volume3 &vol, const DeformationField3 &f) {
    check_same_extent(vol.extent(), f.extent(), "warp_volume");
    const auto &e = vol.extent();
    Volume3 out(e, 0.0, vol.spacing);
    parallel_for(vol.size(), [&](std::size_t b, std::size_t end) {
        for (std::size_t i = b; i < end; ++i) {
            out[i] = apply<double>(make_stencil(e, voxel_position(e, i) + f.u[i]), vol.grid.data());
        }
    });
    return out;
}

// out(x) = labels(x + u(x)), nearest neighbour.
inline LabelMap3 warp_labels(const LabelMap3 &lm, const DeformationField3 &f) {
    check_same_extent(lm.extent(), f.extent(), "warp_labels");
    const auto &e = lm.extent();
    Grid3<std::int32_t> out(e, 0);
    for (std::size_t i = 0; i < lm.size(); ++i) out[i] = sample_nearest_label(lm, voxel_position(e, i) + f.u[i]);
    LabelMap3 r;
    r.labels = std::move(out);
    r.label_set = lm.label_set;
    r.spacing = lm.spacing;
    return r;
}

inline std::vector<VoxelCoord> warp_vertices(const std::vector<VoxelCoord> &verts, const DeformationField3 &f) {
    std::vector<VoxelCoord> out;
    out.reserve(verts.size());
    for (const auto &v : verts) {
        require_finite(v, "warp_vertices");
        out.push_back(v + apply<Vec3>(make_stencil(f.extent(), v), f.u.data()));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Jacobian analysis over interior positions.
// ---------------------------------------------------------------------------------------------
inline constexpr double kLogDetGuard = 1e-9;

struct JacobianStats {
    double pct_folds = 0.0;       // percentage of interior positions with det <= 0
    double sd_log_abs_detj = 0.0; // population standard deviation of log|det|
    std::size_t clamped = 0;      // positions with |det| <= 1e-9, left out of the log statistic
    std::size_t interior = 0;
    std::vector<double> detj;     // interior determinants in storage order
};

namespace detail {
inline void finish_stats(JacobianStats &st) {
    std::size_t folds = 0, n = 0;
    double mean = 0.0;
    for (double d : st.detj) {
        if (d <= 0.0) ++folds;
        if (std::abs(d) > kLogDetGuard) {
            mean += std::log(std::abs(d));
            ++n;
        } else {
            ++st.clamped;
        }
    }
    st.interior = st.detj.size();
    st.pct_folds = st.interior ? 100.0 * static_cast<double>(folds) / static_cast<double>(st.interior) : 0.0;
    if (n > 0) {
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double d : st.detj) {
            if (std::abs(d) > kLogDetGuard) {
                const double l = std::log(std::abs(d)) - mean;
                var += l * l;
            }
        }
        st.sd_log_abs_detj = std::sqrt(var / static_cast<double>(n));
    }
}
} // namespace detail

inline JacobianStats jacobian_stats(const DeformationField3 &f) {
    const auto &e = f.extent();
    if (e.nx < 3 || e.ny < 3 || e.nz < 3) throw InputError("jacobian_stats: every dimension must be >= 3");
    JacobianStats st;
    st.detj.reserve(static_cast<std::size_t>(e.nx - 2) * (e.ny - 2) * (e.nz - 2));
    for (int z = 1; z < e.nz - 1; ++z)
        for (int y = 1; y < e.ny - 1; ++y)
            for (int x = 1; x < e.nx - 1; ++x) {
                const Vec3 dx = (f.u.at(x + 1, y, z) - f.u.at(x - 1, y, z)) * 0.5;
                const Vec3 dy = (f.u.at(x, y + 1, z) - f.u.at(x, y - 1, z)) * 0.5;
                const Vec3 dz = (f.u.at(x, y, z + 1) - f.u.at(x, y, z - 1)) * 0.5;
                // Columns of grad(phi) = I + grad(u).
                const Vec3 c0{1.0 + dx.x, dx.y, dx.z};
                const Vec3 c1{dy.x, 1.0 + dy.y, dy.z};
                const Vec3 c2{dz.x, dz.y, 1.0 + dz.z};
                st.detj.push_back(dot(c0, cross(c1, c2)));
            }
    detail::finish_stats(st);
    return st;
}

// Interior rows only; columns wrap around in azimuth.
inline JacobianStats jacobian_stats(const DeformationField2 &f) {
    const auto &e = f.extent();
    if (e.width < 3 || e.height < 3) throw InputError("jacobian_stats: grid must be at least 3x3");
    JacobianStats st;
    st.detj.reserve(static_cast<std::size_t>(e.width) * (e.height - 2));
    for (int r = 1; r < e.height - 1; ++r)
        for (int c = 0; c < e.width; ++c) {
            const int cl = (c + e.width - 1) % e.width, cr = (c + 1) % e.width;
            const Vec2 dx = (f.u.at(cr, r) - f.u.at(cl, r)) * 0.5;
            const Vec2 dy = (f.u.at(c, r + 1) - f.u.at(c, r - 1)) * 0.5;
            st.detj.push_back((1.0 + dx.x) * (1.0 + dy.y) - dy.x * dx.y);
        }
    detail::finish_stats(st);
    return st;
}

// ---------------------------------------------------------------------------------------------
// Pyramid transfer of velocity fields: coarse grid values resampled onto the finer grid and
// scaled by two (voxel/pixel units halve).
// ---------------------------------------------------------------------------------------------
inline VelocityField3 upsample_velocity(const VelocityField3 &coarse, const Extent3 &fine) {
    VelocityField3 out{Grid3<Vec3>(fine)};
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        const Vec3 p = voxel_position(fine, i);
        const Vec3 q{(p.x - 0.5) * 0.5, (p.y - 0.5) * 0.5, (p.z - 0.5) * 0.5};
        out.v[i] = apply<Vec3>(make_stencil(coarse.extent(), q), coarse.v.data()) * 2.0;
    }
    return out;
}

// Rows are cell-centred in elevation, columns start at azimuth 0.
inline VelocityField2 upsample_velocity(const VelocityField2 &coarse, const Extent2 &fine) {
    VelocityField2 out{Grid2<Vec2>(fine)};
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        const Vec2 p = pixel_position(fine, i);
        const Vec2 q{p.x * 0.5, (p.y - 0.5) * 0.5};
        out.v[i] = apply<Vec2>(make_stencil(coarse.extent(), q, RowPolicy::Clamp), coarse.v.data()) * 2.0;
    }
    return out;
}

} // namespace corvol
