#include <gtest/gtest.h>

#include "corvol/metrics.hpp"
#include "corvol/synth.hpp"

using namespace corvol;

namespace {
std::size_t foreground(const LabelMap3 &l) {
    std::size_t n = 0;
    for (auto x : l.labels.data()) n += x != 0;
    return n;
}
} // namespace

TEST(Phantom, MeshCombinatorics) {
    PhantomParams p;
    p.size = 32;
    const auto b = make_phantom(p);
    ASSERT_TRUE(b.mesh && b.sphere && b.labels);
    EXPECT_EQ(b.mesh->verts.size(), 642u);
    EXPECT_EQ(b.mesh->tris.size(), 1280u);
    EXPECT_EQ(check_closed_manifold(b.mesh->verts.size(), b.mesh->tris, "mesh").euler, 2);
    EXPECT_NO_THROW(validate(b));
    EXPECT_EQ(b.mesh->descriptor_names, (std::vector<std::string>{"sulc", "curv"}));
    EXPECT_EQ(b.mesh->parcels.size(), 642u);
}

TEST(Phantom, ClosedForEverySeed) {
    for (std::uint64_t s = 0; s < 6; ++s) {
        PhantomParams p;
        p.seed = s;
        p.size = 24;
        p.mesh_subdiv = 2;
        const auto b = make_phantom(p);
        // every undirected edge appears in exactly two triangles
        std::map<std::pair<int, int>, int> edges;
        for (const auto &t : b.mesh->tris)
            for (int k = 0; k < 3; ++k) ++edges[std::minmax(t[k], t[(k + 1) % 3])];
        for (const auto &[e, n] : edges) EXPECT_EQ(n, 2);
        EXPECT_NO_THROW(validate(b));
    }
}

TEST(Phantom, ZeroAmplitudeIsASphere) {
    PhantomParams p;
    p.size = 32;
    p.amplitude = 0.0;
    const auto b = make_phantom(p);
    const Vec3 c = phantom_centre(32);
    const double r = norm(b.mesh->verts[0] - c);
    for (std::size_t i = 0; i < b.mesh->verts.size(); ++i) {
        EXPECT_NEAR(norm(b.mesh->verts[i] - c), r, 1e-12);
        EXPECT_EQ(b.mesh->descriptors[1][i], b.mesh->descriptors[1][0]);
    }
}

TEST(Phantom, Deterministic) {
    PhantomParams p;
    p.size = 24;
    p.seed = 17;
    EXPECT_EQ(make_phantom(p), make_phantom(p));
    PhantomParams q = p;
    q.seed = 18;
    EXPECT_NE(make_phantom(p).image, make_phantom(q).image);
}

TEST(Phantom, LabelsNestAndContrast) {
    PhantomParams p;
    p.size = 40;
    const auto b = make_phantom(p);
    EXPECT_EQ(b.labels->label_set, (std::vector<std::int32_t>{1, 2, 3, 4}));
    // walking outwards from the centre the shells appear in order
    const int c = 20;
    int prev = 0;
    for (int x = c; x < 40; ++x) {
        const int l = b.labels->at(x, c, c);
        if (l == 0) break;
        EXPECT_GE(l, prev);
        prev = l;
    }
    EXPECT_EQ(prev, 4);
    // tissue carries intensity; background far from tissue is exactly zero
    for (std::size_t i = 0; i < b.image.size(); ++i) {
        if (b.labels->labels[i] != 0) {
            EXPECT_NE(b.image[i], 0.0);
        }
    }
    EXPECT_EQ(b.image.at(0, 0, 0), 0.0);
    EXPECT_EQ(b.image.at(39, 39, 0), 0.0);
}

TEST(Phantom, RejectsBadParams) {
    PhantomParams p;
    p.size = 16;
    EXPECT_THROW(make_phantom(p), InputError);
    p = {};
    p.n_labels = 1;
    EXPECT_THROW(make_phantom(p), InputError);
    p = {};
    p.amplitude = 0.5;
    EXPECT_THROW(make_phantom(p), InputError);
}

TEST(Phantom, DescriptorsSurviveRasterization) {
    PhantomParams p;
    p.size = 32;
    const auto b = make_phantom(p);
    const int H = 4 * static_cast<int>(std::ceil(std::sqrt(double(b.mesh->verts.size()))));
    const auto pg = rasterize_descriptors(*b.sphere, b.mesh->descriptors, H, 2 * H);
    const auto back = sample_grid_at_vertices(pg, *b.sphere);
    for (std::size_t c = 0; c < 2; ++c) {
        const auto &d = b.mesh->descriptors[c];
        const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
        double ss = 0;
        for (std::size_t i = 0; i < d.size(); ++i) ss += std::pow(back[c][i] - d[i], 2);
        EXPECT_LT(std::sqrt(ss / d.size()), 0.02 * (*hi - *lo)) << b.mesh->descriptor_names[c];
    }
}

TEST(Phantom, RibbonParcelsFollowTheSurfaceSectors) {
    PhantomParams p;
    p.size = 24;
    p.mesh_subdiv = 2;
    p.ribbon_parcels = true;
    const PhantomModel model(p);
    const auto b = model.render(1);
    EXPECT_EQ(b.labels->label_set, (std::vector<std::int32_t>{1, 2, 3, 4, 5, 6, 7}));
    for (int l = 5; l <= 7; ++l) EXPECT_EQ(model.label_intensity(l), model.label_intensity(4));
    // just inside the surface, the ribbon label is the vertex's parcel offset into the cortex range
    const Vec3 c = phantom_centre(p.size);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < b.mesh->verts.size(); ++i) {
        const Vec3 x = c + (b.mesh->verts[i] - c) * 0.97;
        agree += model.label_at(x) == p.n_labels - 1 + b.mesh->parcels[i];
    }
    EXPECT_EQ(agree, b.mesh->verts.size());

    const auto g = phantom_groups(p);
    EXPECT_EQ(g.subcortical, (std::vector<std::int32_t>{1, 2, 3}));
    EXPECT_EQ(g.cortical[0].second, (std::vector<std::int32_t>{4, 5, 6, 7}));
    p.ribbon_parcels = false;
    EXPECT_EQ(phantom_groups(p).cortical[0].second, (std::vector<std::int32_t>{4}));
    p.ribbon_parcels = true;
    p.n_parcels = 0;
    EXPECT_THROW(validate(p), InputError);
}

TEST(Phantom, ShiftedParcelSectors) {
    const int n = 4;
    const double w = std::numbers::pi / 2;
    const std::vector<double> shift{-0.2, 0.1, 0.0, 0.3};
    auto dir = [](double phi) { return Vec3{std::cos(phi), std::sin(phi), 0.0}; };
    for (int k = 0; k < n; ++k) {
        const double b = w * k + shift[static_cast<std::size_t>(k)];
        EXPECT_EQ(parcel_sector(dir(b + 1e-6), n, shift), k) << k;
        EXPECT_EQ(parcel_sector(dir(b - 1e-6), n, shift), (k + n - 1) % n) << k;
        EXPECT_EQ(parcel_sector(dir(w * k + 0.75), n), k);
    }
    PhantomParams p;
    p.parcel_jitter = 0.8;
    EXPECT_THROW(validate(p), InputError);
}

TEST(Pair, ParcelJitterMovesOnlyTheMovingParcels) {
    PhantomParams p;
    p.size = 24;
    p.mesh_subdiv = 2;
    p.ribbon_parcels = true;
    const auto plain = make_phantom_pair(p);
    p.parcel_jitter = 0.3;
    const auto jittered = make_phantom_pair(p);
    EXPECT_EQ(jittered.fixed.labels, plain.fixed.labels);
    EXPECT_EQ(jittered.fixed.mesh->parcels, plain.fixed.mesh->parcels);
    EXPECT_EQ(jittered.moving.image, plain.moving.image);
    EXPECT_NE(jittered.moving.labels, plain.moving.labels);
    EXPECT_NE(jittered.moving.mesh->parcels, plain.moving.mesh->parcels);
    // only ribbon labels change
    for (std::size_t i = 0; i < plain.moving.labels->size(); ++i)
        if ((*plain.moving.labels)[i] < p.n_labels) {
            ASSERT_EQ((*jittered.moving.labels)[i], (*plain.moving.labels)[i]);
        }
}

TEST(Deform, MagnitudeZeroIsIdentity) {
    PhantomParams p;
    p.size = 24;
    const auto b = make_phantom(p);
    const auto d = deform_bundle(b, 3, 0.0);
    EXPECT_EQ(d.bundle, b);
    EXPECT_EQ(d.ground_truth, identity_field(b.image.extent()));
}

TEST(Deform, ConsistentWarps) {
    PhantomParams p;
    p.size = 32;
    const auto b = make_phantom(p);
    const auto d = deform_bundle(b, 4, 3.0);
    EXPECT_EQ(d.bundle.mesh->verts, warp_vertices(b.mesh->verts, d.ground_truth));
    EXPECT_EQ(d.bundle.sphere, b.sphere);
    EXPECT_EQ(d.bundle.image, warp_volume(b.image, d.inverse));
    EXPECT_EQ(jacobian_stats(d.ground_truth).pct_folds, 0.0);
    const double before = static_cast<double>(foreground(*b.labels));
    const double after = static_cast<double>(foreground(*d.bundle.labels));
    EXPECT_NEAR(after / before, 1.0, 0.15);
}

TEST(Deform, FoldingFieldIsRejected) {
    PhantomParams p;
    p.size = 24;
    const auto b = make_phantom(p);
    EXPECT_THROW(deform_bundle(b, 1, 40.0, 1.0, 0.0), NumericalError);
}

TEST(Pair, GroundTruthRelatesTheSubjects) {
    PhantomParams p;
    p.size = 32;
    const auto pair = make_phantom_pair(p);
    // labels of the moving subject pulled back by the ground truth match the fixed labels
    const auto r = evaluate(pair.ground_truth, *pair.moving.labels, *pair.fixed.labels);
    EXPECT_GT(r.dice_mean, 0.85);
    EXPECT_EQ(r.pct_folds, 0.0);
    const auto id = evaluate(identity_field(pair.ground_truth.extent()), *pair.moving.labels, *pair.fixed.labels);
    EXPECT_LT(id.dice_mean, r.dice_mean);
    EXPECT_EQ(median_endpoint_error(pair.ground_truth, pair.ground_truth, *pair.fixed.labels), 0.0);
    EXPECT_EQ(pair.moving.mesh->verts, warp_vertices(pair.fixed.mesh->verts, pair.ground_truth));
    EXPECT_EQ(make_phantom_pair(p).moving, pair.moving);
}

TEST(Pair, MedianEndpointError) {
    const Extent3 e{4, 4, 4};
    Grid3<std::int32_t> m(e, 0);
    m.at(1, 1, 1) = m.at(2, 1, 1) = m.at(1, 2, 1) = m.at(2, 2, 2) = 1;
    DeformationField3 a{Grid3<Vec3>(e)}, b{Grid3<Vec3>(e)};
    a.u.at(1, 1, 1) = {1, 0, 0};
    a.u.at(2, 1, 1) = {0, 2, 0};
    a.u.at(1, 2, 1) = {0, 0, 3};
    a.u.at(2, 2, 2) = {4, 0, 0};
    a.u.at(0, 0, 0) = {100, 0, 0}; // outside the mask
    EXPECT_DOUBLE_EQ(median_endpoint_error(a, b, make_labelmap(m)), 2.5);
    EXPECT_THROW(median_endpoint_error(a, b, make_labelmap(Grid3<std::int32_t>(e, 0))), InputError);
}

TEST(Smooth, GaussianPreservesConstantsAndMass) {
    Grid3<double> g(Extent3{9, 9, 9}, 2.0);
    const auto sg = gaussian_smooth(g, 1.5);
    for (double v : sg.data()) EXPECT_NEAR(v, 2.0, 1e-12);
    Grid3<double> d(Extent3{21, 21, 21}, 0.0);
    d.at(10, 10, 10) = 1.0;
    const auto s = gaussian_smooth(d, 1.0);
    double sum = 0;
    for (double v : s.data()) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_NEAR(s.at(11, 10, 10) / s.at(10, 10, 10), std::exp(-0.5), 0.02);
    EXPECT_EQ(gaussian_smooth(d, 0.0), d);
}

TEST(Velocity, RandomFieldsHitTheRequestedPeak) {
    auto peak_of = [](const auto &v) {
        double peak = 0;
        for (const auto &x : v.v.data()) peak = std::max(peak, norm(x));
        return peak;
    };
    EXPECT_NEAR(peak_of(random_smooth_velocity({16, 16, 16}, 1, 3.0, 2.0)), 3.0, 1e-12);
    EXPECT_NEAR(peak_of(random_core_velocity({32, 32, 32}, 2, 3.0)), 3.0, 1e-12);
    EXPECT_NEAR(peak_of(random_drift_velocity({16, 16, 16}, 3, 2.0, 3.0, 0.7)), 2.0, 1e-12);
    EXPECT_NEAR(peak_of(random_smooth_velocity(Extent2{32, 16}, 1, 1.5, 2.0)), 1.5, 1e-12);
    const auto c = random_core_velocity({32, 32, 32}, 5, 3.0);
    EXPECT_LT(norm(c.v.at(0, 0, 0)), 0.3);
    EXPECT_THROW(random_core_velocity({16, 16, 16}, 1, 3.0, 6.0, 8), InputError);
}
