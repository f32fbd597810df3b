// sphere.hpp - cortical meshes, sphere correspondences, the equirectangular (theta, phi) grid,
// descriptor rasterization, vertex sampling, spherical warps and seam/pole padding.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "volume.hpp"

namespace corvol {

using Triangle = std::array<std::int32_t, 3>;

// Triangle mesh in the voxel coordinates of its volume. Descriptors are stored channel-major
// (descriptors[c][vertex]); parcels, when present, label every vertex.
struct CorticalMesh {
    std::vector<Vec3> verts;
    std::vector<Triangle> tris;
    std::vector<std::string> descriptor_names;
    std::vector<std::vector<double>> descriptors;
    std::vector<std::int32_t> parcels;

    std::size_t vertex_count() const { return verts.size(); }
    friend bool operator==(const CorticalMesh &, const CorticalMesh &) = default;
};

// Unit-sphere positions with the same vertex order and connectivity as the paired mesh.
struct SphereMap {
    std::vector<Vec3> sverts;
    std::vector<Triangle> tris;

    std::size_t vertex_count() const { return sverts.size(); }
    friend bool operator==(const SphereMap &, const SphereMap &) = default;
};

inline constexpr double kUnitTolerance = 1e-6;

// ---------------------------------------------------------------------------------------------
// Mesh validation.
// ---------------------------------------------------------------------------------------------
struct MeshTopology {
    std::size_t edges = 0;
    long euler = 0;
};

// Checks indices, that every edge is shared by exactly two consistently oriented triangles, and
// the Euler characteristic. Throws InputError naming the offending element.
inline MeshTopology check_closed_manifold(std::size_t n_verts, const std::vector<Triangle> &tris,
                                          const std::string &what) {
    std::map<std::pair<std::int32_t, std::int32_t>, int> directed;
    for (std::size_t t = 0; t < tris.size(); ++t) {
        const auto &tri = tris[t];
        for (int k = 0; k < 3; ++k) {
            if (tri[k] < 0 || static_cast<std::size_t>(tri[k]) >= n_verts) {
                throw InputError(what + ": triangle " + std::to_string(t) + " references vertex " +
                                 std::to_string(tri[k]) + " outside [0, " + std::to_string(n_verts) + ")");
            }
        }
        if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) {
            throw InputError(what + ": triangle " + std::to_string(t) + " is degenerate");
        }
        for (int k = 0; k < 3; ++k) {
            const auto key = std::make_pair(tri[k], tri[(k + 1) % 3]);
            if (++directed[key] > 1) {
                throw InputError(what + ": directed edge (" + std::to_string(key.first) + "," +
                                 std::to_string(key.second) + ") used twice; mesh is non-manifold or inconsistently oriented");
            }
        }
    }
    for (const auto &[edge, count] : directed) {
        if (!directed.count({edge.second, edge.first})) {
            throw InputError(what + ": edge (" + std::to_string(edge.first) + "," + std::to_string(edge.second) +
                             ") is not shared by exactly two triangles");
        }
    }
    MeshTopology topo;
    topo.edges = directed.size() / 2;
    topo.euler = static_cast<long>(n_verts) - static_cast<long>(topo.edges) + static_cast<long>(tris.size());
    if (topo.euler != 2) {
        throw InputError(what + ": Euler characteristic " + std::to_string(topo.euler) + " (genus-0 surface requires 2)");
    }
    return topo;
}

inline void validate(const CorticalMesh &mesh, const std::string &what = "mesh") {
    for (std::size_t i = 0; i < mesh.verts.size(); ++i) {
        if (!is_finite(mesh.verts[i])) throw InputError(what + ": vertex " + std::to_string(i) + " is not finite");
    }
    check_closed_manifold(mesh.verts.size(), mesh.tris, what);
    if (mesh.descriptor_names.size() != mesh.descriptors.size()) {
        throw InputError(what + ": descriptor names and channels disagree");
    }
    for (std::size_t c = 0; c < mesh.descriptors.size(); ++c) {
        if (mesh.descriptors[c].size() != mesh.verts.size()) {
            throw InputError(what + ": descriptor '" + mesh.descriptor_names[c] + "' has wrong length");
        }
        for (std::size_t i = 0; i < mesh.descriptors[c].size(); ++i) {
            if (!std::isfinite(mesh.descriptors[c][i])) {
                throw InputError(what + ": descriptor '" + mesh.descriptor_names[c] + "' not finite at vertex " +
                                 std::to_string(i));
            }
        }
    }
    if (!mesh.parcels.empty() && mesh.parcels.size() != mesh.verts.size()) {
        throw InputError(what + ": parcel count does not match vertex count");
    }
}

inline double signed_volume(const Vec3 &a, const Vec3 &b, const Vec3 &c) { return dot(a, cross(b, c)); }

inline void validate(const SphereMap &sm, const std::string &what = "sphere") {
    for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
        const double n = norm(sm.sverts[i]);
        if (!(std::abs(n - 1.0) <= kUnitTolerance)) {
            throw InputError(what + ": vertex " + std::to_string(i) + " has norm " + std::to_string(n) +
                             " (must be 1 +/- 1e-6)");
        }
    }
    check_closed_manifold(sm.sverts.size(), sm.tris, what);
    for (std::size_t t = 0; t < sm.tris.size(); ++t) {
        const auto &tri = sm.tris[t];
        if (!(signed_volume(sm.sverts[tri[0]], sm.sverts[tri[1]], sm.sverts[tri[2]]) > 0.0)) {
            throw InputError(what + ": spherical triangle " + std::to_string(t) + " is flipped or degenerate");
        }
    }
}

inline void validate_pair(const CorticalMesh &mesh, const SphereMap &sm, const std::string &what = "mesh/sphere") {
    if (mesh.verts.size() != sm.sverts.size()) {
        throw InputError(what + ": vertex count mismatch (" + std::to_string(mesh.verts.size()) + " vs " +
                         std::to_string(sm.sverts.size()) + ")");
    }
    if (mesh.tris != sm.tris) throw InputError(what + ": connectivity differs between mesh and sphere map");
}

// Icosahedron refined `subdiv` times with midpoints pushed to the unit sphere; outward CCW.
inline SphereMap make_icosphere(int subdiv) {
    if (subdiv < 0 || subdiv > 8) throw InputError("make_icosphere: subdivision must be in [0, 8]");
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                           {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    for (auto &p : v) p *= 1.0 / norm(p);
    std::vector<Triangle> f = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                               {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                               {3, 8, 9},   {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},  {9, 8, 1}};
    for (int s = 0; s < subdiv; ++s) {
        std::map<std::pair<int, int>, int> mid;
        auto midpoint = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = mid.find(key);
            if (it != mid.end()) return it->second;
            Vec3 m = (v[a] + v[b]) * 0.5;
            m *= 1.0 / norm(m);
            v.push_back(m);
            const int id = static_cast<int>(v.size()) - 1;
            mid.emplace(key, id);
            return id;
        };
        std::vector<Triangle> next;
        next.reserve(f.size() * 4);
        for (const auto &tri : f) {
            const int a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
            next.push_back({tri[0], a, c});
            next.push_back({tri[1], b, a});
            next.push_back({tri[2], c, b});
            next.push_back({a, b, c});
        }
        f = std::move(next);
    }
    return {std::move(v), std::move(f)};
}

// ---------------------------------------------------------------------------------------------
// Equirectangular parameterization. Row r is centred on theta = (r + 0.5) * pi / H, column c on
// phi = c * 2 pi / W, so the exact poles are never sampled.
// ---------------------------------------------------------------------------------------------
struct SphericalAngles {
    double theta = 0.0; // elevation from +z, [0, pi]
    double phi = 0.0;   // azimuth, [0, 2 pi)
};

inline SphericalAngles project(const Vec3 &s) {
    const double n = norm(s);
    if (!(std::abs(n - 1.0) <= kUnitTolerance)) {
        throw InputError("project: input is not a unit vector (norm " + std::to_string(n) + ")");
    }
    const double z = std::clamp(s.z / n, -1.0, 1.0);
    double phi = std::atan2(s.y, s.x);
    if (phi < 0.0) phi += 2.0 * std::numbers::pi;
    if (phi >= 2.0 * std::numbers::pi) phi -= 2.0 * std::numbers::pi;
    return {std::acos(z), phi};
}

inline Vec3 unproject(double theta, double phi) {
    const double st = std::sin(theta);
    return {st * std::cos(phi), st * std::sin(phi), std::cos(theta)};
}

inline Vec3 unproject(const SphericalAngles &a) { return unproject(a.theta, a.phi); }

// Folds theta back into [0, pi]; each crossing of a pole adds a half turn of azimuth.
inline SphericalAngles canonical_angles(double theta, double phi) {
    const double two_pi = 2.0 * std::numbers::pi;
    theta = std::fmod(theta, two_pi);
    if (theta < 0.0) theta += two_pi;
    if (theta > std::numbers::pi) {
        theta = two_pi - theta;
        phi += std::numbers::pi;
    }
    phi = std::fmod(phi, two_pi);
    if (phi < 0.0) phi += two_pi;
    return {theta, phi};
}

struct SphereGrid {
    Extent2 extent{512, 256};

    int width() const { return extent.width; }
    int height() const { return extent.height; }
    double dtheta() const { return std::numbers::pi / extent.height; }
    double dphi() const { return 2.0 * std::numbers::pi / extent.width; }
    double theta(double row) const { return (row + 0.5) * dtheta(); }
    double phi(double col) const { return col * dphi(); }
    Vec2 to_pixel(const SphericalAngles &a) const { return {a.phi / dphi(), a.theta / dtheta() - 0.5}; }
    SphericalAngles to_angles(const Vec2 &p) const { return {theta(p.y), phi(p.x)}; }
    Vec3 direction(const Vec2 &p) const { return unproject(theta(p.y), phi(p.x)); }

    // Area-distortion weights w(rho) = sin(theta) per row.
    std::vector<double> row_weights() const {
        std::vector<double> w(static_cast<std::size_t>(extent.height));
        for (int r = 0; r < extent.height; ++r) w[static_cast<std::size_t>(r)] = std::sin(theta(r));
        return w;
    }

    SphereGrid halved(int times) const {
        return {{extent.width >> times, extent.height >> times}};
    }
};

inline void validate(const SphereGrid &g) {
    if (g.extent.height < 8 || g.extent.width < 8) {
        throw InputError("sphere grid must be at least 8x8, got " + to_string(g.extent));
    }
    if (g.extent.width % 2 != 0) throw InputError("sphere grid width must be even for the pole half-turn shift");
}

// C-channel scalar grid over the (theta, phi) plane.
struct PlanarGrid2 {
    SphereGrid geometry;
    std::vector<Grid2<double>> channels;
    std::vector<double> theta_axis;
    std::vector<double> phi_axis;
    std::vector<double> weights;

    PlanarGrid2() = default;
    PlanarGrid2(SphereGrid g, std::size_t n_channels)
        : geometry(g), channels(n_channels, Grid2<double>(g.extent)), weights(g.row_weights()) {
        theta_axis.resize(static_cast<std::size_t>(g.height()));
        phi_axis.resize(static_cast<std::size_t>(g.width()));
        for (int r = 0; r < g.height(); ++r) theta_axis[static_cast<std::size_t>(r)] = g.theta(r);
        for (int c = 0; c < g.width(); ++c) phi_axis[static_cast<std::size_t>(c)] = g.phi(c);
    }

    const Extent2 &extent() const { return geometry.extent; }
};

// Sum over the grid of w(rho) * f * dtheta * dphi.
inline double weighted_integral(const Grid2<double> &f, const SphereGrid &g) {
    const auto w = g.row_weights();
    double s = 0.0;
    for (int r = 0; r < g.height(); ++r) {
        double row = 0.0;
        for (int c = 0; c < g.width(); ++c) row += f.at(c, r);
        s += w[static_cast<std::size_t>(r)] * row;
    }
    return s * g.dtheta() * g.dphi();
}

// ---------------------------------------------------------------------------------------------
// Point location on a sphere map. Barycentric coordinates come from the ray through the flat
// triangle: b_k = (d . n_k) / (d . N), with n_A = B x C, n_B = C x A, n_C = A x B and N their sum.
// ---------------------------------------------------------------------------------------------
struct SphereHit {
    std::int32_t tri = -1;
    std::array<double, 3> bary{};
};

class SphereLocator {
  public:
    explicit SphereLocator(const SphereMap &sm) : sm_(&sm) {
        const std::size_t m = sm.tris.size();
        normals_.resize(m);
        caps_.resize(m);
        for (std::size_t t = 0; t < m; ++t) {
            const auto &tri = sm.tris[t];
            const Vec3 &a = sm.sverts[tri[0]], &b = sm.sverts[tri[1]], &c = sm.sverts[tri[2]];
            normals_[t] = {cross(b, c), cross(c, a), cross(a, b)};
            Vec3 ctr = a + b + c;
            const double n = norm(ctr);
            ctr = n > 0 ? ctr * (1.0 / n) : a;
            double r = 0.0;
            for (const Vec3 *p : {&a, &b, &c}) r = std::max(r, angle_between(ctr, *p));
            caps_[t] = {ctr, r};
        }
        rows_ = std::clamp(static_cast<int>(std::sqrt(static_cast<double>(m) / 2.0)), 4, 256);
        cols_ = 2 * rows_;
        bins_.assign(static_cast<std::size_t>(rows_ * cols_), {});
        const double dth = std::numbers::pi / rows_, dph = 2.0 * std::numbers::pi / cols_;
        for (std::size_t t = 0; t < m; ++t) {
            // A point within angle r of the cap centre has |dtheta| <= r and
            // sin|dphi| <= sin r / sin theta; pad by one bin on every side.
            const auto [ctr, rad] = caps_[t];
            const auto ca = project(ctr);
            const double r = rad + 1e-6;
            const double th_lo = ca.theta - r, th_hi = ca.theta + r;
            const int r0 = std::max(0, static_cast<int>(std::floor(th_lo / dth)) - 1);
            const int r1 = std::min(rows_ - 1, static_cast<int>(std::floor(th_hi / dth)) + 1);
            const double smin = std::min(std::sin(std::max(th_lo, 0.0)), std::sin(std::min(th_hi, std::numbers::pi)));
            const double ratio = (th_lo <= 0.0 || th_hi >= std::numbers::pi || smin <= 0.0) ? 2.0 : std::sin(r) / smin;
            for (int rr = r0; rr <= r1; ++rr) {
                if (ratio >= 0.7) {
                    for (int c = 0; c < cols_; ++c) bins_[static_cast<std::size_t>(rr * cols_ + c)].push_back(static_cast<std::int32_t>(t));
                    continue;
                }
                const double half = std::asin(ratio);
                const int c0 = static_cast<int>(std::floor((ca.phi - half) / dph)) - 1;
                const int c1 = static_cast<int>(std::floor((ca.phi + half) / dph)) + 1;
                for (int c = c0; c <= c1; ++c) {
                    const int cw = ((c % cols_) + cols_) % cols_;
                    bins_[static_cast<std::size_t>(rr * cols_ + cw)].push_back(static_cast<std::int32_t>(t));
                }
            }
        }
        // Insertion follows triangle order, so every bin is sorted and a triangle appears once per bin
        // unless the column span wrapped onto itself.
        for (auto &bin : bins_) bin.erase(std::unique(bin.begin(), bin.end()), bin.end());
    }

    const SphereMap &sphere() const { return *sm_; }
    const std::array<Vec3, 3> &normals(std::int32_t t) const { return normals_[static_cast<std::size_t>(t)]; }

    // Lowest-index triangle containing direction d (need not be unit length).
    std::optional<SphereHit> locate(const Vec3 &d) const {
        if (!is_finite(d) || norm(d) == 0.0) return std::nullopt;
        const auto a = project(d * (1.0 / norm(d)));
        const int r = std::clamp(static_cast<int>(a.theta / (std::numbers::pi / rows_)), 0, rows_ - 1);
        const int c = std::clamp(static_cast<int>(a.phi / (2.0 * std::numbers::pi / cols_)), 0, cols_ - 1);
        for (auto t : bins_[static_cast<std::size_t>(r * cols_ + c)]) {
            if (auto hit = test(t, d, 1e-12)) return hit;
        }
        for (std::size_t t = 0; t < normals_.size(); ++t) {
            if (auto hit = test(static_cast<std::int32_t>(t), d, 1e-9)) return hit;
        }
        return std::nullopt;
    }

  private:
    static double angle_between(const Vec3 &a, const Vec3 &b) {
        return std::atan2(norm(cross(a, b)), dot(a, b));
    }

    std::optional<SphereHit> test(std::int32_t t, const Vec3 &d, double tol) const {
        const auto &n = normals_[static_cast<std::size_t>(t)];
        const double ba = dot(d, n[0]), bb = dot(d, n[1]), bc = dot(d, n[2]);
        const double sum = ba + bb + bc;
        if (!(sum > 0.0)) return std::nullopt;
        const double lim = -tol * (std::abs(ba) + std::abs(bb) + std::abs(bc));
        if (ba < lim || bb < lim || bc < lim) return std::nullopt;
        probe_mix(static_cast<std::uint64_t>(t) * 2654435761ULL);
        return SphereHit{t, {ba / sum, bb / sum, bc / sum}};
    }

    const SphereMap *sm_;
    std::vector<std::array<Vec3, 3>> normals_;
    std::vector<std::pair<Vec3, double>> caps_;
    int rows_ = 0, cols_ = 0;
    std::vector<std::vector<std::int32_t>> bins_;
};

// ---------------------------------------------------------------------------------------------
// Rasterization and vertex sampling.
// ---------------------------------------------------------------------------------------------
inline PlanarGrid2 rasterize_descriptors(const SphereMap &sm, const std::vector<std::vector<double>> &values,
                                         const SphereGrid &grid, const SphereLocator *locator = nullptr) {
    validate(grid);
    for (const auto &ch : values) {
        if (ch.size() != sm.sverts.size()) throw InputError("rasterize_descriptors: channel length != vertex count");
    }
    std::optional<SphereLocator> own;
    if (!locator) locator = &own.emplace(sm);
    PlanarGrid2 out(grid, values.size());
    const auto &e = grid.extent;
    for (int r = 0; r < e.height; ++r) {
        for (int c = 0; c < e.width; ++c) {
            const auto hit = locator->locate(grid.direction({static_cast<double>(c), static_cast<double>(r)}));
            if (!hit) {
                throw InputError("rasterize_descriptors: pixel (row " + std::to_string(r) + ", col " +
                                 std::to_string(c) + ") is not covered by any triangle; sphere map is broken");
            }
            const auto &tri = sm.tris[static_cast<std::size_t>(hit->tri)];
            for (std::size_t ch = 0; ch < values.size(); ++ch) {
                const auto &g = values[ch];
                out.channels[ch].at(c, r) =
                    hit->bary[0] * g[tri[0]] + hit->bary[1] * g[tri[1]] + hit->bary[2] * g[tri[2]];
            }
        }
    }
    return out;
}

inline PlanarGrid2 rasterize_descriptors(const SphereMap &sm, const std::vector<std::vector<double>> &values,
                                         int height, int width) {
    return rasterize_descriptors(sm, values, SphereGrid{{width, height}});
}

// One channel per parcel id in `ids`. Each pixel takes the parcel carrying the largest barycentric
// weight (lowest id on ties), so the channels are hard one-hots of the projected parcellation.
inline PlanarGrid2 rasterize_parcels(const SphereMap &sm, const std::vector<std::int32_t> &parcels,
                                     const std::vector<std::int32_t> &ids, const SphereGrid &grid,
                                     const SphereLocator *locator = nullptr) {
    std::vector<std::vector<double>> onehot(ids.size(), std::vector<double>(parcels.size(), 0.0));
    for (std::size_t k = 0; k < ids.size(); ++k)
        for (std::size_t i = 0; i < parcels.size(); ++i) onehot[k][i] = parcels[i] == ids[k] ? 1.0 : 0.0;
    PlanarGrid2 pg = rasterize_descriptors(sm, onehot, grid, locator);
    for (std::size_t i = 0; i < grid.extent.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < ids.size(); ++k)
            if (pg.channels[k][i] > pg.channels[best][i]) best = k;
        const bool any = !ids.empty() && pg.channels[best][i] > 0.0;
        for (std::size_t k = 0; k < ids.size(); ++k) pg.channels[k][i] = any && k == best ? 1.0 : 0.0;
    }
    return pg;
}

inline Vec2 vertex_pixel(const SphereGrid &grid, const Vec3 &s) { return grid.to_pixel(project(s)); }

// Bilinear sampling of every channel at each sphere vertex; azimuth wraps, rows continue across
// the poles. Result is channel-major.
inline std::vector<std::vector<double>> sample_grid_at_vertices(const PlanarGrid2 &pg, const SphereMap &sm) {
    std::vector<std::vector<double>> out(pg.channels.size(), std::vector<double>(sm.sverts.size()));
    for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
        const Stencil2 s = make_stencil(pg.extent(), vertex_pixel(pg.geometry, sm.sverts[i]), RowPolicy::PoleReflect);
        for (std::size_t ch = 0; ch < pg.channels.size(); ++ch) out[ch][i] = apply<double>(s, pg.channels[ch].data());
    }
    return out;
}

// Displacement fields are sampled with clamped rows.
inline std::vector<Vec2> sample_grid_at_vertices(const DeformationField2 &f, const SphereGrid &grid,
                                                 const SphereMap &sm) {
    if (!(f.extent() == grid.extent)) throw InputError("sample_grid_at_vertices: field/grid extent mismatch");
    std::vector<Vec2> out(sm.sverts.size());
    for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
        out[i] = sample_bilinear(f.u, vertex_pixel(grid, sm.sverts[i]), RowPolicy::Clamp);
    }
    return out;
}

// Moves every sphere vertex by psi in (theta, phi) pixel coordinates and returns to the unit sphere.
inline SphereMap apply_spherical_map(const SphereMap &sm, const DeformationField2 &psi, const SphereGrid &grid) {
    if (!(psi.extent() == grid.extent)) throw InputError("apply_spherical_map: field/grid extent mismatch");
    SphereMap out = sm;
    for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
        const Vec2 p = vertex_pixel(grid, sm.sverts[i]);
        const Vec2 q = p + sample_bilinear(psi.u, p, RowPolicy::Clamp);
        const auto a = canonical_angles(grid.theta(q.y), grid.phi(q.x));
        Vec3 s = unproject(a);
        out.sverts[i] = s * (1.0 / norm(s));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Seam and pole padding: columns wrap around; rows past a pole are the reflected rows shifted by
// half a turn of azimuth.
// ---------------------------------------------------------------------------------------------
template <class T> Grid2<T> pad_grid(const Grid2<T> &g, int pad) {
    const int W = g.width(), H = g.height();
    if (pad < 0 || 2 * pad >= H) {
        throw InputError("pad_grid: pad " + std::to_string(pad) + " must be in [0, H/2) for H = " + std::to_string(H));
    }
    if (W % 2 != 0) throw InputError("pad_grid: width must be even");
    Grid2<T> out({W + 2 * pad, H + 2 * pad});
    for (int r = 0; r < H + 2 * pad; ++r) {
        for (int c = 0; c < W + 2 * pad; ++c) {
            int sr = r - pad;
            int sc = c - pad;
            if (sr < 0) {
                sr = -1 - sr;
                sc += W / 2;
            } else if (sr >= H) {
                sr = 2 * H - 1 - sr;
                sc += W / 2;
            }
            out.at(c, r) = g.at(detail::wrap_index(sc, W), sr);
        }
    }
    return out;
}

template <class T> Grid2<T> crop_grid(const Grid2<T> &g, int pad) {
    Grid2<T> out({g.width() - 2 * pad, g.height() - 2 * pad});
    for (int r = 0; r < out.height(); ++r)
        for (int c = 0; c < out.width(); ++c) out.at(c, r) = g.at(c + pad, r + pad);
    return out;
}

// Padded copies of every channel; the padded grids are (W + 2 pad) x (H + 2 pad).
inline std::vector<Grid2<double>> pad_grid(const PlanarGrid2 &pg, int pad) {
    std::vector<Grid2<double>> out;
    out.reserve(pg.channels.size());
    for (const auto &ch : pg.channels) out.push_back(pad_grid(ch, pad));
    return out;
}

} // namespace corvol
