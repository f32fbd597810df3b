#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "corvol/sphere.hpp"
#include "corvol/synth.hpp"

using namespace corvol;
using std::numbers::pi;

namespace {
Vec3 random_unit(std::mt19937_64 &rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vec3 v{nd(rng), nd(rng), nd(rng)};
    return v * (1.0 / norm(v));
}

SphereMap octahedron() {
    SphereMap sm;
    sm.sverts = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    sm.tris = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4}, {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
    return sm;
}

// Wrap-aware bilinear lookup written out directly: columns periodic, rows past a pole come back
// reflected with half a turn of azimuth.
double bilinear_oracle(const Grid2<double> &g, double x, double y) {
    const int W = g.width(), H = g.height();
    const double x0 = std::floor(x), y0 = std::floor(y);
    const double fx = x - x0, fy = y - y0;
    auto at = [&](long c, long r) {
        if (r < 0) {
            r = -1 - r;
            c += W / 2;
        } else if (r >= H) {
            r = 2 * H - 1 - r;
            c += W / 2;
        }
        c = ((c % W) + W) % W;
        return g.at(static_cast<int>(c), static_cast<int>(r));
    };
    const long c = static_cast<long>(x0), r = static_cast<long>(y0);
    return (1 - fy) * ((1 - fx) * at(c, r) + fx * at(c + 1, r)) + fy * ((1 - fx) * at(c, r + 1) + fx * at(c + 1, r + 1));
}
} // namespace

TEST(Project, Examples) {
    const auto n = project({0, 0, 1});
    EXPECT_EQ(n.theta, 0.0);
    EXPECT_EQ(n.phi, 0.0);
    const auto e = project({1, 0, 0});
    EXPECT_DOUBLE_EQ(e.theta, pi / 2);
    EXPECT_EQ(e.phi, 0.0);
    const auto w = project({0, -1, 0});
    EXPECT_DOUBLE_EQ(w.phi, 1.5 * pi);
    EXPECT_THROW(project({1.1, 0, 0}), InputError);
}

TEST(Project, RoundTrip) {
    std::mt19937_64 rng(11);
    int checked = 0;
    for (int i = 0; i < 1000; ++i) {
        const Vec3 s = random_unit(rng);
        const auto a = project(s);
        if (a.theta < 0.01 || a.theta > pi - 0.01) continue;
        EXPECT_LT(norm(unproject(a) - s), 1e-9);
        EXPECT_GE(a.phi, 0.0);
        EXPECT_LT(a.phi, 2 * pi);
        ++checked;
    }
    EXPECT_GT(checked, 950);
}

TEST(Project, CanonicalAnglesReflectAtPoles) {
    const auto a = canonical_angles(-0.2, 0.5);
    EXPECT_NEAR(a.theta, 0.2, 1e-15);
    EXPECT_NEAR(a.phi, 0.5 + pi, 1e-15);
    const auto b = canonical_angles(pi + 0.3, 0.0);
    EXPECT_NEAR(b.theta, pi - 0.3, 1e-15);
    EXPECT_NEAR(b.phi, pi, 1e-15);
    const auto c = canonical_angles(1.0, -0.25);
    EXPECT_EQ(c.theta, 1.0);
    EXPECT_NEAR(c.phi, 2 * pi - 0.25, 1e-15);
    // same point either way
    EXPECT_LT(norm(unproject(a) - unproject(-0.2, 0.5)), 1e-12);
}

TEST(Grid, AreaQuadrature) {
    for (auto ext : {Extent2{512, 256}, Extent2{64, 32}, Extent2{16, 8}}) {
        const SphereGrid g{ext};
        Grid2<double> one(ext, 1.0), c2(ext);
        for (int r = 0; r < g.height(); ++r)
            for (int c = 0; c < g.width(); ++c) c2.at(c, r) = std::pow(std::cos(g.theta(r)), 2);
        const double area = weighted_integral(one, g);
        EXPECT_NEAR(area / (4 * pi), 1.0, 0.01);
        if (ext.height >= 32) {
            EXPECT_NEAR(weighted_integral(c2, g) / area, 1.0 / 3.0, 0.01 / 3.0);
        }
        for (double w : g.row_weights()) EXPECT_GT(w, 0.0);
    }
}

TEST(Grid, PixelMapping) {
    const SphereGrid g{{16, 8}};
    EXPECT_DOUBLE_EQ(g.theta(0), pi / 16);
    EXPECT_DOUBLE_EQ(g.phi(4), pi / 2);
    const Vec2 p = g.to_pixel(project(g.direction({3, 5})));
    EXPECT_NEAR(p.x, 3, 1e-12);
    EXPECT_NEAR(p.y, 5, 1e-12);
    EXPECT_THROW(validate(SphereGrid{{7, 8}}), InputError);
    EXPECT_THROW(validate(SphereGrid{{16, 4}}), InputError);
}

TEST(Mesh, IcosphereCombinatorics) {
    const auto s = make_icosphere(3);
    EXPECT_EQ(s.sverts.size(), 642u);
    EXPECT_EQ(s.tris.size(), 1280u);
    const auto topo = check_closed_manifold(s.sverts.size(), s.tris, "ico");
    EXPECT_EQ(topo.euler, 2);
    EXPECT_EQ(topo.edges, 1920u);
    EXPECT_NO_THROW(validate(s));
    EXPECT_NO_THROW(validate(octahedron()));
}

TEST(Mesh, RejectsBadSpheres) {
    auto s = octahedron();
    s.sverts[3] = {0, -1.1, 0};
    try {
        validate(s);
        FAIL();
    } catch (const InputError &e) {
        EXPECT_NE(std::string(e.what()).find("vertex 3"), std::string::npos) << e.what();
    }
    auto f = octahedron();
    std::swap(f.tris[2][0], f.tris[2][1]);
    EXPECT_THROW(validate(f), InputError);
    auto open = octahedron();
    open.tris.pop_back();
    EXPECT_THROW(validate(open), InputError);
    auto idx = octahedron();
    idx.tris[0][2] = 6;
    EXPECT_THROW(validate(idx), InputError);
    // two disjoint octahedra: closed and oriented but Euler characteristic 4
    auto two = octahedron();
    for (auto t : octahedron().tris) two.tris.push_back({t[0] + 6, t[1] + 6, t[2] + 6});
    for (auto v : octahedron().sverts) two.sverts.push_back(v);
    EXPECT_THROW(check_closed_manifold(two.sverts.size(), two.tris, "two"), InputError);
}

TEST(Mesh, PairMustShareConnectivity) {
    const auto s = octahedron();
    CorticalMesh m{s.sverts, s.tris, {}, {}, {}};
    EXPECT_NO_THROW(validate_pair(m, s));
    m.tris[0] = {2, 4, 0};
    EXPECT_THROW(validate_pair(m, s), InputError);
    m.tris = s.tris;
    m.verts.pop_back();
    EXPECT_THROW(validate_pair(m, s), InputError);
}

TEST(Locator, MatchesLinearScan) {
    const auto s = make_icosphere(2);
    const SphereLocator loc(s);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 2000; ++i) {
        const Vec3 d = random_unit(rng);
        const auto hit = loc.locate(d);
        ASSERT_TRUE(hit.has_value());
        std::int32_t ref = -1;
        for (std::size_t t = 0; t < s.tris.size() && ref < 0; ++t) {
            const auto &tri = s.tris[t];
            const Vec3 &a = s.sverts[tri[0]], &b = s.sverts[tri[1]], &c = s.sverts[tri[2]];
            if (dot(d, cross(b, c)) >= 0 && dot(d, cross(c, a)) >= 0 && dot(d, cross(a, b)) >= 0 &&
                dot(d, a + b + c) > 0)
                ref = static_cast<std::int32_t>(t);
        }
        EXPECT_EQ(hit->tri, ref);
        const auto &tri = s.tris[static_cast<std::size_t>(hit->tri)];
        const Vec3 p = s.sverts[tri[0]] * hit->bary[0] + s.sverts[tri[1]] * hit->bary[1] + s.sverts[tri[2]] * hit->bary[2];
        EXPECT_LT(norm(cross(p, d)), 1e-12);
        EXPECT_NEAR(hit->bary[0] + hit->bary[1] + hit->bary[2], 1.0, 1e-12);
    }
}

TEST(Rasterize, ConstantDescriptor) {
    const auto s = make_icosphere(2);
    const auto pg = rasterize_descriptors(s, {std::vector<double>(s.sverts.size(), 2.5)}, 16, 32);
    for (double v : pg.channels[0].data()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Rasterize, HeightFunction) {
    const auto s = make_icosphere(5);
    std::vector<double> z(s.sverts.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = s.sverts[i].z;
    const auto pg = rasterize_descriptors(s, {z}, 128, 256);
    for (int r = 0; r < 128; ++r)
        for (int c = 0; c < 256; ++c) EXPECT_NEAR(pg.channels[0].at(c, r), std::cos(pg.theta_axis[r]), 1e-2);
}

TEST(Rasterize, OctahedronPartitionOfUnity) {
    const auto s = octahedron();
    std::vector<std::vector<double>> onehot(6, std::vector<double>(6, 0.0));
    for (int i = 0; i < 6; ++i) onehot[i][i] = 1.0;
    const auto pg = rasterize_descriptors(s, onehot, 16, 32);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 32; ++c) {
            double sum = 0;
            for (int k = 0; k < 6; ++k) {
                const double v = pg.channels[k].at(c, r);
                EXPECT_GE(v, -1e-12);
                EXPECT_LE(v, 1 + 1e-12);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
}

TEST(Rasterize, UncoveredPixelIsNamed) {
    auto s = octahedron();
    s.tris.resize(4); // northern hemisphere only
    try {
        rasterize_descriptors(s, {std::vector<double>(6, 1.0)}, 8, 16);
        FAIL();
    } catch (const InputError &e) {
        EXPECT_NE(std::string(e.what()).find("row 4"), std::string::npos) << e.what();
    }
}

TEST(Rasterize, ParcelsAreHardOneHots) {
    const auto s = make_icosphere(3);
    std::vector<std::int32_t> parcels(s.sverts.size());
    for (std::size_t i = 0; i < parcels.size(); ++i) parcels[i] = s.sverts[i].z > 0 ? 7 : 9;
    const auto pg = rasterize_parcels(s, parcels, {7, 9}, SphereGrid{{64, 32}});
    for (std::size_t i = 0; i < pg.channels[0].size(); ++i) {
        const double a = pg.channels[0][i], b = pg.channels[1][i];
        EXPECT_TRUE((a == 1.0 && b == 0.0) || (a == 0.0 && b == 1.0));
    }
    for (int c = 0; c < 64; ++c) {
        EXPECT_EQ(pg.channels[0].at(c, 0), 1.0);
        EXPECT_EQ(pg.channels[1].at(c, 31), 1.0);
    }
    // pixels whose direction clearly lies in a hemisphere take that hemisphere's parcel
    const SphereGrid g{{64, 32}};
    for (int r = 0; r < 32; ++r) {
        const double z = std::cos(g.theta(r));
        if (std::abs(z) < 0.15) continue;
        EXPECT_EQ(pg.channels[0].at(5, r), z > 0 ? 1.0 : 0.0) << "row " << r;
    }
}

TEST(SampleVertices, ConstantAndNodes) {
    const SphereGrid g{{32, 16}};
    PlanarGrid2 pg(g, 2);
    std::mt19937_64 rng(2);
    for (auto &v : pg.channels[0].data()) v = 4.0;
    for (auto &v : pg.channels[1].data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    SphereMap nodes;
    for (int r : {0, 5, 15})
        for (int c : {0, 7, 31}) nodes.sverts.push_back(g.direction({double(c), double(r)}));
    const auto out = sample_grid_at_vertices(pg, nodes);
    std::size_t k = 0;
    for (int r : {0, 5, 15})
        for (int c : {0, 7, 31}) {
            EXPECT_NEAR(out[0][k], 4.0, 1e-12);
            EXPECT_NEAR(out[1][k], pg.channels[1].at(c, r), 1e-12);
            ++k;
        }
}

TEST(SampleVertices, MatchesWrapAwareOracle) {
    const SphereGrid g{{32, 16}};
    PlanarGrid2 pg(g, 1);
    std::mt19937_64 rng(3);
    for (auto &v : pg.channels[0].data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    SphereMap sm;
    for (int i = 0; i < 100; ++i) sm.sverts.push_back(random_unit(rng));
    // make sure the seam and both polar caps are exercised
    sm.sverts.push_back(unproject(0.02, 0.3));
    sm.sverts.push_back(unproject(pi - 0.02, 4.0));
    sm.sverts.push_back(unproject(1.0, 2 * pi - 1e-3));
    const auto out = sample_grid_at_vertices(pg, sm);
    for (std::size_t i = 0; i < sm.sverts.size(); ++i) {
        const Vec2 p = g.to_pixel(project(sm.sverts[i]));
        EXPECT_NEAR(out[0][i], bilinear_oracle(pg.channels[0], p.x, p.y), 1e-12);
    }
}

TEST(SphericalMap, Identity) {
    const auto s = make_icosphere(3);
    const SphereGrid g{{64, 32}};
    const auto out = apply_spherical_map(s, DeformationField2{Grid2<Vec2>(g.extent)}, g);
    for (std::size_t i = 0; i < s.sverts.size(); ++i) EXPECT_LT(norm(out.sverts[i] - s.sverts[i]), 1e-9);
    EXPECT_EQ(out.tris, s.tris);
}

TEST(SphericalMap, AzimuthShiftIsRotation) {
    const auto s = make_icosphere(3);
    const SphereGrid g{{64, 32}};
    const double shift = 3.25;
    const auto out = apply_spherical_map(s, DeformationField2{Grid2<Vec2>(g.extent, {shift, 0})}, g);
    const double a = shift * 2 * pi / 64;
    for (std::size_t i = 0; i < s.sverts.size(); ++i) {
        const Vec3 &p = s.sverts[i];
        const Vec3 r{std::cos(a) * p.x - std::sin(a) * p.y, std::sin(a) * p.x + std::cos(a) * p.y, p.z};
        EXPECT_LT(norm(out.sverts[i] - r), 1e-9);
    }
}

TEST(SphericalMap, StaysOnSphereAcrossPoles) {
    const auto s = make_icosphere(3);
    const SphereGrid g{{64, 32}};
    const auto v = random_smooth_velocity(g.extent, 4, 4.0, 2.0);
    const auto psi = integrate_svf(v);
    const auto out = apply_spherical_map(s, psi, g);
    for (const auto &p : out.sverts) EXPECT_NEAR(norm(p), 1.0, 1e-12);
    // a push past the north pole lands on the other meridian
    SphereMap one;
    one.sverts = {g.direction({0, 0})};
    const auto q = apply_spherical_map(one, DeformationField2{Grid2<Vec2>(g.extent, {0, -1})}, g);
    EXPECT_LT(norm(q.sverts[0] - g.direction({32, 0})), 1e-12);
}

TEST(Pad, ZeroIsIdentity) {
    Grid2<double> g(Extent2{8, 6});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = double(i);
    EXPECT_EQ(pad_grid(g, 0), g);
    EXPECT_THROW(pad_grid(g, 3), InputError);
    EXPECT_THROW(pad_grid(g, -1), InputError);
}

TEST(Pad, CosineContinuesAcrossPoles) {
    const SphereGrid sg{{32, 16}};
    Grid2<double> g(sg.extent);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 32; ++c) g.at(c, r) = std::cos(sg.theta(r));
    const int pad = 4;
    const auto p = pad_grid(g, pad);
    for (int r = 0; r < 16 + 2 * pad; ++r)
        for (int c = 0; c < 32 + 2 * pad; ++c) EXPECT_NEAR(p.at(c, r), std::cos(sg.theta(r - pad)), 1e-15);
}

TEST(Pad, SeamAndRoundTrip) {
    Grid2<double> g(Extent2{10, 8});
    std::mt19937_64 rng(8);
    for (auto &v : g.data()) v = std::uniform_real_distribution<double>(0, 1)(rng);
    const int pad = 3;
    const auto p = pad_grid(g, pad);
    for (int r = 0; r < 8; ++r)
        for (int k = 0; k < pad; ++k) {
            EXPECT_EQ(p.at(k, r + pad), g.at(10 - pad + k, r));
            EXPECT_EQ(p.at(10 + pad + k, r + pad), g.at(k, r));
        }
    // first padded row is row 0 turned by half the width
    for (int c = 0; c < 10; ++c) EXPECT_EQ(p.at(c + pad, pad - 1), g.at((c + 5) % 10, 0));
    EXPECT_EQ(crop_grid(p, pad), g);
}

TEST(Consistency, RasterizeThenSample) {
    const auto s = make_icosphere(3);
    const int H = 4 * static_cast<int>(std::ceil(std::sqrt(double(s.sverts.size()))));
    std::vector<double> f(s.sverts.size());
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const auto &p = s.sverts[i];
        f[i] = p.z + 0.5 * p.x * p.y + 0.3 * std::sin(3 * p.x);
        lo = std::min(lo, f[i]);
        hi = std::max(hi, f[i]);
    }
    const auto pg = rasterize_descriptors(s, {f}, H, 2 * H);
    const auto back = sample_grid_at_vertices(pg, s);
    double ss = 0;
    for (std::size_t i = 0; i < f.size(); ++i) ss += std::pow(back[0][i] - f[i], 2);
    EXPECT_LT(std::sqrt(ss / f.size()), 0.02 * (hi - lo));
}
