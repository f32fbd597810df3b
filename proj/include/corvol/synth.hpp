// synth.hpp - synthetic subjects with known ground truth: a bumpy star-shaped "cortex" over an
// icosphere, nested label shells, descriptors, and smooth random diffeomorphic warps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "metrics.hpp"
#include "sphere.hpp"
#include "volume.hpp"

namespace corvol {

struct SubjectBundle {
    Volume3 image;
    std::optional<LabelMap3> labels;
    std::optional<CorticalMesh> mesh;
    std::optional<SphereMap> sphere;

    friend bool operator==(const SubjectBundle &, const SubjectBundle &) = default;
};

inline void validate(const SubjectBundle &b, const std::string &what = "bundle") {
    validate(b.image, what + " image");
    if (b.labels) {
        validate(*b.labels, what + " labels");
        check_same_extent(b.image.extent(), b.labels->extent(), "bundle image/labels");
    }
    if (b.mesh.has_value() != b.sphere.has_value()) throw InputError(what + ": mesh and sphere map must come together");
    if (b.mesh) validate_pair(*b.mesh, *b.sphere, what + " mesh/sphere");
}

struct PhantomParams {
    std::uint64_t seed = 0;
    int size = 48;
    int n_labels = 4;
    int mesh_subdiv = 3;
    double amplitude = 0.12; // max radial modulation as a fraction of the base radius
    int lmax = 6;
    double noise = 0.02; // Gaussian noise std as a fraction of the intensity range
    int n_parcels = 4;   // azimuthal sectors on the sphere; 0 disables parcels
    int supersample = 3; // per-axis subsamples for partial-volume intensities; 1 = point sampling
    double texture = 0.15; // relative amplitude of within-tissue texture that moves with the anatomy
    // Split the outer shell into the surface parcel sectors, labelled n_labels .. n_labels+n_parcels-1
    // at one intensity, so those boundaries exist only in the labelmaps.
    bool ribbon_parcels = false;
    // The moving subject's parcel boundaries sit up to this many radians of azimuth away from where
    // the warp carries the fixed ones; the images do not show it.
    double parcel_jitter = 0.0;
};

inline void validate(const PhantomParams &p) {
    if (p.size < 24) throw InputError("phantom: size must be >= 24");
    if (p.n_labels < 2) throw InputError("phantom: n_labels must be >= 2");
    if (p.mesh_subdiv < 0 || p.mesh_subdiv > 6) throw InputError("phantom: mesh_subdiv must be in [0, 6]");
    if (!(p.amplitude >= 0.0 && p.amplitude <= 0.15)) throw InputError("phantom: amplitude must be in [0, 0.15]");
    if (p.lmax < 1 || p.lmax > 6) throw InputError("phantom: lmax must be in [1, 6]");
    if (!(p.noise >= 0.0 && p.noise <= 1.0)) throw InputError("phantom: noise must be in [0, 1]");
    if (p.n_parcels < 0 || p.n_parcels > 64) throw InputError("phantom: n_parcels must be in [0, 64]");
    if (p.supersample < 1 || p.supersample > 8) throw InputError("phantom: supersample must be in [1, 8]");
    if (!(p.texture >= 0.0 && p.texture <= 0.5)) throw InputError("phantom: texture must be in [0, 0.5]");
    if (p.ribbon_parcels && p.n_parcels < 1) throw InputError("phantom: ribbon_parcels needs n_parcels >= 1");
    if (!(p.parcel_jitter >= 0.0) || (p.n_parcels > 0 && p.parcel_jitter >= std::numbers::pi / p.n_parcels)) {
        throw InputError("phantom: parcel_jitter must be in [0, pi/n_parcels)");
    }
}

// Azimuthal sector of unit direction s, 0 .. n-1; shared by the mesh parcels and the ribbon labels.
// Sector k starts at 2 pi k / n + shift[k] (no shifts: equal sectors).
inline int parcel_sector(const Vec3 &s, int n, const std::vector<double> &shift = {}) {
    const double phi = project(s).phi, w = 2.0 * std::numbers::pi / n;
    if (shift.empty()) return std::min(n - 1, static_cast<int>(phi / w));
    auto start = [&](int k) { return w * k + shift[static_cast<std::size_t>(k)]; };
    if (start(0) < 0.0 && phi >= 2.0 * std::numbers::pi + start(0)) return 0;
    for (int k = n - 1; k >= 0; --k)
        if (phi >= start(k)) return k;
    return n - 1; // before a positively shifted first boundary
}

// Band-limited radial modulation m(s) = sum a_lm Y_lm(s) over 1 <= l <= lmax, real harmonics.
class HarmonicShape {
  public:
    HarmonicShape(std::mt19937_64 &rng, int lmax, double amplitude) : lmax_(lmax) {
        std::normal_distribution<double> nd(0.0, 1.0);
        for (int l = 1; l <= lmax; ++l)
            for (int m = -l; m <= l; ++m) coef_.push_back(nd(rng) / static_cast<double>(l));
        // Scale so the largest |m| over a dense sample is exactly `amplitude`.
        const SphereMap probe = make_icosphere(5);
        double peak = 0.0;
        for (const auto &s : probe.sverts) peak = std::max(peak, std::abs(raw(s, false)));
        scale_ = (amplitude > 0.0 && peak > 0.0) ? amplitude / peak : 0.0;
    }

    double value(const Vec3 &s) const { return scale_ * raw(s, false); }
    // Surface Laplacian on the unit sphere: sum -l(l+1) a_lm Y_lm.
    double laplacian(const Vec3 &s) const { return scale_ * raw(s, true); }

  private:
    double raw(const Vec3 &s, bool lap) const {
        const double theta = std::acos(std::clamp(s.z, -1.0, 1.0));
        const double phi = std::atan2(s.y, s.x);
        double acc = 0.0;
        std::size_t k = 0;
        for (int l = 1; l <= lmax_; ++l) {
            const double f = lap ? -static_cast<double>(l * (l + 1)) : 1.0;
            for (int m = -l; m <= l; ++m, ++k) {
                const unsigned am = static_cast<unsigned>(std::abs(m));
                const double p = std::sph_legendre(static_cast<unsigned>(l), am, theta);
                double y;
                if (m == 0) y = p;
                else if (m > 0) y = std::numbers::sqrt2 * p * std::cos(m * phi);
                else y = std::numbers::sqrt2 * p * std::sin(am * phi);
                acc += f * coef_[k] * y;
            }
        }
        return acc;
    }

    int lmax_;
    std::vector<double> coef_;
    double scale_ = 0.0;
};

inline Vec3 phantom_centre(int size) {
    const double c = 0.5 * (size - 1);
    return {c, c, c};
}

// The continuous phantom: label and intensity can be evaluated at any point, so a deformed copy
// can be rendered through the inverse map without resampling an already-rendered grid.
class PhantomModel {
  public:
    explicit PhantomModel(const PhantomParams &p) : p_(p), centre_(phantom_centre(p.size)), r0_(0.33 * p.size) {
        validate(p);
        std::mt19937_64 rng(p.seed);
        outer_.emplace_back(rng, p.lmax, p.amplitude);
        // Inner boundaries get their own modulation at half amplitude, which keeps the shells nested:
        // (k/n)(1 + a/2) < ((k+1)/n)(1 - a) for every a <= 0.15 and k < n.
        for (int k = 1; k < p.n_labels; ++k) inner_.emplace_back(rng, p.lmax, 0.5 * p.amplitude);
        // Texture: a few random plane waves with wavelengths of 8-16 voxels.
        std::normal_distribution<double> nd(0.0, 1.0);
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        for (int i = 0; i < kTextureWaves; ++i) {
            Vec3 k{nd(rng), nd(rng), nd(rng)};
            const double len = 2.0 * std::numbers::pi / (8.0 + 8.0 * ud(rng));
            wave_k_[i] = k * (len / std::max(norm(k), 1e-12));
            wave_phase_[i] = 2.0 * std::numbers::pi * ud(rng);
        }
    }

    // Texture modulation in [-1, 1] at model point x.
    double texture_at(const Vec3 &x) const {
        double t = 0.0;
        for (int i = 0; i < kTextureWaves; ++i) t += std::cos(dot(wave_k_[i], x) + wave_phase_[i]);
        return t / kTextureWaves;
    }

    const PhantomParams &params() const { return p_; }
    Extent3 extent() const { return {p_.size, p_.size, p_.size}; }

    std::int32_t label_at(const Vec3 &x, const std::vector<double> &shift = {}) const {
        const Vec3 d = x - centre_;
        const double rho = norm(d);
        const Vec3 s = rho > 0.0 ? d * (1.0 / rho) : Vec3{0.0, 0.0, 1.0};
        if (rho >= r0_ * (1.0 + outer_[0].value(s))) return 0;
        for (int k = 1; k < p_.n_labels; ++k) {
            const double rk =
                r0_ * static_cast<double>(k) / p_.n_labels * (1.0 + inner_[static_cast<std::size_t>(k - 1)].value(s));
            if (rho < rk) return k;
        }
        return p_.ribbon_parcels ? p_.n_labels + parcel_sector(s, p_.n_parcels, shift) : p_.n_labels;
    }

    double label_intensity(std::int32_t l) const {
        if (l == 0) return 0.0;
        // Alternating levels so neighbouring shells always contrast.
        const int k = std::min(l, p_.n_labels) - 1;
        const double base = 0.3 + 0.6 * static_cast<double>(k) / static_cast<double>(p_.n_labels);
        return (k % 2 == 0) ? base : 1.25 - base;
    }

    // Rasterizes labels and intensities at x + inverse(x) (or at x), with a bias field and noise
    // drawn from `noise_seed`, and builds the surface pushed forward by `forward`.
    SubjectBundle render(std::uint64_t noise_seed, const DeformationField3 *inverse = nullptr,
                         const DeformationField3 *forward = nullptr, const std::vector<double> &shift = {}) const {
        const Extent3 e = extent();
        SubjectBundle b;
        Grid3<std::int32_t> labels(e, 0);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            Vec3 x = voxel_position(e, i);
            if (inverse) x += inverse->u[i];
            labels[i] = label_at(x, shift);
        }
        b.labels = make_labelmap(std::move(labels));

        std::mt19937_64 rng(noise_seed);
        std::normal_distribution<double> nd(0.0, 1.0);
        std::uniform_real_distribution<double> ud(-1.0, 1.0);
        const double bx = 0.08 * ud(rng), by = 0.08 * ud(rng), bz = 0.08 * ud(rng), bxy = 0.05 * ud(rng);
        double lo = label_intensity(0), hi = lo;
        for (int l = 1; l <= p_.n_labels; ++l) {
            lo = std::min(lo, label_intensity(l));
            hi = std::max(hi, label_intensity(l));
        }
        const double sigma = p_.noise * (hi - lo);
        Volume3 img(e);
        // Intensities average label_intensity over a subvoxel lattice (partial volume). The inverse
        // displacement is taken at the voxel centre; it varies slowly on the subvoxel scale.
        const int ss = p_.supersample;
        for (std::size_t i = 0; i < img.size(); ++i) {
            const Vec3 c = voxel_position(e, i);
            const Vec3 q = (c - centre_) * (1.0 / (0.5 * p_.size));
            const double bias = 1.0 + bx * q.x + by * q.y + bz * q.z + bxy * q.x * q.y;
            const Vec3 base = inverse ? c + inverse->u[i] : c;
            double acc = 0.0;
            bool tissue = false;
            for (int a = 0; a < ss; ++a)
                for (int bb = 0; bb < ss; ++bb)
                    for (int cc = 0; cc < ss; ++cc) {
                        const Vec3 off{(a + 0.5) / ss - 0.5, (bb + 0.5) / ss - 0.5, (cc + 0.5) / ss - 0.5};
                        const Vec3 x = base + off;
                        const double li = label_intensity(ss == 1 ? (*b.labels)[i] : label_at(x));
                        acc += li * (1.0 + p_.texture * texture_at(x));
                        tissue = tissue || li != 0.0;
                    }
            const double n = nd(rng);
            // Skull-stripped look: pure background stays exactly zero, tissue gets noise.
            img[i] = tissue ? acc / (ss * ss * ss) * bias + sigma * n : 0.0;
        }
        b.image = std::move(img);

        // Surface: the outer boundary of the outermost shell, over an icosphere sphere map.
        SphereMap sm = make_icosphere(p_.mesh_subdiv);
        CorticalMesh mesh;
        mesh.tris = sm.tris;
        mesh.descriptor_names = {"sulc", "curv"};
        mesh.descriptors.assign(2, std::vector<double>(sm.sverts.size()));
        for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
            const Vec3 &s = sm.sverts[i];
            const double m = outer_[0].value(s);
            mesh.verts.push_back(centre_ + s * (r0_ * (1.0 + m)));
            // Radial displacement in voxels stands in for sulcal depth; the Laplacian for curvature.
            mesh.descriptors[0][i] = r0_ * m;
            mesh.descriptors[1][i] = outer_[0].laplacian(s);
        }
        if (forward) mesh.verts = warp_vertices(mesh.verts, *forward);
        if (p_.n_parcels > 0) {
            mesh.parcels.resize(sm.sverts.size());
            for (std::size_t i = 0; i < sm.sverts.size(); ++i) mesh.parcels[i] = 1 + parcel_sector(sm.sverts[i], p_.n_parcels, shift);
        }
        b.mesh = std::move(mesh);
        b.sphere = std::move(sm);
        return b;
    }

  private:
    PhantomParams p_;
    Vec3 centre_;
    double r0_;
    std::vector<HarmonicShape> outer_;
    std::vector<HarmonicShape> inner_;
    static constexpr int kTextureWaves = 6;
    Vec3 wave_k_[kTextureWaves];
    double wave_phase_[kTextureWaves] = {};
};

inline SubjectBundle make_phantom(const PhantomParams &p) {
    return PhantomModel(p).render(p.seed ^ 0x2545f4914f6cdd1dULL);
}

// ---------------------------------------------------------------------------------------------
// Smooth random velocity fields.
// ---------------------------------------------------------------------------------------------
namespace detail {
inline std::vector<double> gaussian_kernel(double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[static_cast<std::size_t>(i + r)];
    }
    for (auto &x : k) x /= s;
    return k;
}
} // namespace detail

// Separable Gaussian blur with replicated borders.
template <class T> Grid3<T> gaussian_smooth(const Grid3<T> &g, double sigma) {
    if (!(sigma > 0.0)) return g;
    const auto k = detail::gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const auto &e = g.extent();
    Grid3<T> cur = g;
    for (int axis = 0; axis < 3; ++axis) {
        Grid3<T> next(e);
        for (int z = 0; z < e.nz; ++z)
            for (int y = 0; y < e.ny; ++y)
                for (int x = 0; x < e.nx; ++x) {
                    T acc{};
                    for (int j = -r; j <= r; ++j) {
                        int p[3] = {x, y, z};
                        p[axis] = std::clamp(p[axis] + j, 0, e[axis] - 1);
                        acc += cur.at(p[0], p[1], p[2]) * k[static_cast<std::size_t>(j + r)];
                    }
                    next.at(x, y, z) = acc;
                }
        cur = std::move(next);
    }
    return cur;
}

// Gaussian-smoothed white noise rescaled so max |v| == max_magnitude (voxels).
inline VelocityField3 random_smooth_velocity(const Extent3 &e, std::uint64_t seed, double max_magnitude,
                                             double sigma) {
    if (!(max_magnitude >= 0.0) || !std::isfinite(max_magnitude)) throw InputError("random velocity: bad magnitude");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    // Noise is drawn on a padded grid so the border does not replicate single samples.
    const int pad = static_cast<int>(std::ceil(3.0 * sigma));
    const Extent3 pe{e.nx + 2 * pad, e.ny + 2 * pad, e.nz + 2 * pad};
    Grid3<Vec3> noise(pe);
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = {nd(rng), nd(rng), nd(rng)};
    noise = gaussian_smooth(noise, sigma);
    Grid3<Vec3> g(e);
    for (int z = 0; z < e.nz; ++z)
        for (int y = 0; y < e.ny; ++y)
            for (int x = 0; x < e.nx; ++x) g.at(x, y, z) = noise.at(x + pad, y + pad, z + pad);
    double peak = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) peak = std::max(peak, norm(g[i]));
    const double s = peak > 0.0 ? max_magnitude / peak : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    return {std::move(g)};
}

// Same idea with the noise confined to the core: samples within `band` voxels of a face are zero
// before smoothing, so the flow stays away from the clamped border. Used for the integration checks,
// where composition near the faces cannot be inverse-consistent under clamp sampling.
inline VelocityField3 random_core_velocity(const Extent3 &e, std::uint64_t seed, double max_magnitude,
                                           double sigma = 6.0, int band = 10) {
    if (!(max_magnitude >= 0.0) || !std::isfinite(max_magnitude)) throw InputError("random velocity: bad magnitude");
    if (band < 0 || 2 * band >= std::min({e.nx, e.ny, e.nz}))
        throw InputError("random velocity: band leaves no core");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Grid3<Vec3> g(e);
    for (int z = 0; z < e.nz; ++z)
        for (int y = 0; y < e.ny; ++y)
            for (int x = 0; x < e.nx; ++x) {
                const Vec3 n{nd(rng), nd(rng), nd(rng)};
                const bool core = x >= band && y >= band && z >= band && x < e.nx - band && y < e.ny - band &&
                                  z < e.nz - band;
                g.at(x, y, z) = core ? n : Vec3{};
            }
    g = gaussian_smooth(g, sigma);
    double peak = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) peak = std::max(peak, norm(g[i]));
    const double s = peak > 0.0 ? max_magnitude / peak : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    return {std::move(g)};
}

// 2D counterpart on the spherical grid (azimuth periodic, rows replicated).
inline VelocityField2 random_smooth_velocity(const Extent2 &e, std::uint64_t seed, double max_magnitude,
                                             double sigma) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const auto k = detail::gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    // Rows are padded like the 3D case; columns wrap.
    const Extent2 pe{e.width, e.height + 2 * r};
    Grid2<Vec2> g(pe);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = {nd(rng), nd(rng)};
    for (int axis = 0; axis < 2; ++axis) {
        Grid2<Vec2> next(pe);
        for (int row = 0; row < pe.height; ++row)
            for (int c = 0; c < pe.width; ++c) {
                Vec2 acc{};
                for (int j = -r; j <= r; ++j) {
                    const int cc = axis == 0 ? detail::wrap_index(c + j, pe.width) : c;
                    const int rr = axis == 1 ? std::clamp(row + j, 0, pe.height - 1) : row;
                    acc += g.at(cc, rr) * k[static_cast<std::size_t>(j + r)];
                }
                next.at(c, row) = acc;
            }
        g = std::move(next);
    }
    {
        Grid2<Vec2> crop(e);
        for (int row = 0; row < e.height; ++row)
            for (int c = 0; c < e.width; ++c) crop.at(c, row) = g.at(c, row + r);
        g = std::move(crop);
    }
    double peak = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) peak = std::max(peak, norm(g[i]));
    const double s = peak > 0.0 ? max_magnitude / peak : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    return {std::move(g)};
}

// ---------------------------------------------------------------------------------------------
// Known warps. The deformed bundle satisfies moved(phi_gt(x)) ~ original(x): the image and labels
// are resampled through the inverse map, mesh vertices are pushed forward by phi_gt, and the sphere
// map is kept by index so the identity spherical warp stays the ground truth.
// ---------------------------------------------------------------------------------------------
struct DeformedBundle {
    SubjectBundle bundle;
    DeformationField3 ground_truth; // maps original coordinates to deformed coordinates
    DeformationField3 inverse;
};

// Smooth random field plus a coherent drift in a random direction; `drift` is the drift's share of
// the magnitude. The sum is rescaled so max |v| == magnitude.
inline VelocityField3 random_drift_velocity(const Extent3 &e, std::uint64_t seed, double magnitude, double sigma,
                                            double drift) {
    if (!(drift >= 0.0 && drift <= 1.0)) throw InputError("random velocity: drift must be in [0, 1]");
    VelocityField3 v = random_smooth_velocity(e, seed, (1.0 - drift) * magnitude, sigma);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, 1.0);
    Vec3 dir{nd(rng), nd(rng), nd(rng)};
    dir *= 1.0 / std::max(norm(dir), 1e-12);
    double peak = 0.0;
    for (auto &x : v.v.data()) {
        x += dir * (drift * magnitude);
        peak = std::max(peak, norm(x));
    }
    const double s = peak > 0.0 ? magnitude / peak : 0.0;
    for (auto &x : v.v.data()) x *= s;
    return v;
}

inline DeformedBundle deform_bundle(const SubjectBundle &b, std::uint64_t seed, double magnitude,
                                    double sigma = 6.0, double drift = 0.7) {
    validate(b);
    const auto &e = b.image.extent();
    VelocityField3 v = random_drift_velocity(e, seed, magnitude, sigma, drift);
    VelocityField3 nv = v;
    for (auto &x : nv.v.data()) x = -x;
    DeformedBundle out;
    out.ground_truth = integrate_svf(v);
    out.inverse = integrate_svf(nv);
    if (jacobian_stats(out.ground_truth).pct_folds > 0.0 || jacobian_stats(out.inverse).pct_folds > 0.0) {
        throw NumericalError("deform_bundle: generated warp folds; lower the magnitude or raise the smoothing");
    }
    out.bundle = b;
    out.bundle.image = warp_volume(b.image, out.inverse);
    if (b.labels) out.bundle.labels = warp_labels(*b.labels, out.inverse);
    if (b.mesh) out.bundle.mesh->verts = warp_vertices(b.mesh->verts, out.ground_truth);
    return out;
}

// A fixed phantom and its deformed copy, the usual registration test pair.
struct PhantomPair {
    SubjectBundle fixed;
    SubjectBundle moving;
    DeformationField3 ground_truth; // fixed -> moving coordinates
};

// The moving subject is rendered from the same continuous phantom through the inverse warp, with
// its own bias field and noise, so neither image is a resampled copy of the other.
inline PhantomPair make_phantom_pair(const PhantomParams &p, double magnitude = 3.0, double sigma = 6.0,
                                     double drift = 0.7) {
    const PhantomModel model(p);
    const Extent3 e = model.extent();
    const VelocityField3 v = random_drift_velocity(e, p.seed ^ 0x5bd1e995ULL, magnitude, sigma, drift);
    VelocityField3 nv = v;
    for (auto &x : nv.v.data()) x = -x;
    PhantomPair pair;
    pair.ground_truth = integrate_svf(v);
    const DeformationField3 inverse = integrate_svf(nv);
    if (jacobian_stats(pair.ground_truth).pct_folds > 0.0 || jacobian_stats(inverse).pct_folds > 0.0) {
        throw NumericalError("make_phantom_pair: generated warp folds; lower the magnitude or raise the smoothing");
    }
    pair.fixed = model.render(p.seed ^ 0x2545f4914f6cdd1dULL);
    std::vector<double> shift;
    if (p.parcel_jitter > 0.0 && p.n_parcels > 0) {
        std::mt19937_64 rng(p.seed ^ 0xd6e8feb86659fd93ULL);
        std::uniform_real_distribution<double> u(-p.parcel_jitter, p.parcel_jitter);
        for (int k = 0; k < p.n_parcels; ++k) shift.push_back(u(rng));
    }
    pair.moving = model.render(p.seed ^ 0x94d049bb133111ebULL, &inverse, &pair.ground_truth, shift);
    return pair;
}

// Inner shells are subcortical; the outer shell, or its parcels, is one cortical hemisphere.
inline LabelGroups phantom_groups(const PhantomParams &p) {
    LabelGroups g;
    for (int l = 1; l < p.n_labels; ++l) g.subcortical.push_back(l);
    std::vector<std::int32_t> cortex{p.n_labels};
    if (p.ribbon_parcels)
        for (int k = 1; k < p.n_parcels; ++k) cortex.push_back(p.n_labels + k);
    g.cortical = {{"lh", cortex}};
    return g;
}

// Median |u - u_gt| over voxels inside `mask` (nonzero labels).
inline double median_endpoint_error(const DeformationField3 &phi, const DeformationField3 &gt, const LabelMap3 &mask) {
    check_same_extent(phi.extent(), gt.extent(), "median_endpoint_error");
    check_same_extent(phi.extent(), mask.extent(), "median_endpoint_error (mask)");
    std::vector<double> err;
    for (std::size_t i = 0; i < phi.u.size(); ++i)
        if (mask[i] != 0) err.push_back(norm(phi.u[i] - gt.u[i]));
    if (err.empty()) throw InputError("median_endpoint_error: empty mask");
    const auto mid = err.begin() + static_cast<std::ptrdiff_t>(err.size() / 2);
    std::nth_element(err.begin(), mid, err.end());
    if (err.size() % 2 == 1) return *mid;
    const double upper = *mid;
    const double lower = *std::max_element(err.begin(), mid);
    return 0.5 * (lower + upper);
}

} // namespace corvol

namespace corvol {
inline Volume3 gaussian_smooth(const Volume3 &v, double sigma) {
    Volume3 out = v;
    out.grid = gaussian_smooth(v.grid, sigma);
    return out;
}
} // namespace corvol
