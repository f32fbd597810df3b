#include <gtest/gtest.h>

#include <random>

#include "corvol/metrics.hpp"

using namespace corvol;

namespace {
LabelMap3 random_labels(Extent3 e, int k, std::uint64_t seed) {
    Grid3<std::int32_t> g(e);
    std::mt19937_64 rng(seed);
    for (auto &x : g.data()) x = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(k + 1));
    return make_labelmap(g);
}

LabelMap3 cube(Extent3 e, int lo, int hi, std::int32_t label = 1) {
    Grid3<std::int32_t> g(e, 0);
    for (int z = lo; z < hi; ++z)
        for (int y = lo; y < hi; ++y)
            for (int x = lo; x < hi; ++x) g.at(x, y, z) = label;
    return make_labelmap(g);
}
} // namespace

TEST(Dice, IdenticalAndDisjoint) {
    const auto a = random_labels({8, 8, 8}, 3, 1);
    const auto r = dice_hard(a, a);
    for (const auto &[l, d] : r.dice_per_label) EXPECT_EQ(d, 1.0) << l;
    EXPECT_EQ(r.dice_mean, 1.0);

    Grid3<std::int32_t> g1({4, 4, 4}, 0), g2({4, 4, 4}, 0);
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) (x < 2 ? g1 : g2).at(x, y, z) = 1;
    EXPECT_EQ(dice_hard(make_labelmap(g1), make_labelmap(g2)).dice_per_label.at(1), 0.0);
}

TEST(Dice, CountingOracle) {
    const auto a = random_labels({8, 8, 8}, 3, 2), b = random_labels({8, 8, 8}, 3, 3);
    const auto r = dice_hard(a, b);
    for (std::int32_t l = 1; l <= 3; ++l) {
        std::size_t na = 0, nb = 0, ni = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            na += a[i] == l;
            nb += b[i] == l;
            ni += a[i] == l && b[i] == l;
        }
        EXPECT_EQ(r.dice_per_label.at(l), 2.0 * ni / (na + nb));
    }
    EXPECT_EQ(r.dice_per_label.count(0), 0u);
}

TEST(Dice, SymmetryAndPermutation) {
    const auto a = random_labels({6, 7, 5}, 4, 4), b = random_labels({6, 7, 5}, 4, 5);
    const auto ab = dice_hard(a, b), ba = dice_hard(b, a);
    EXPECT_EQ(ab.dice_per_label, ba.dice_per_label);
    const std::int32_t perm[] = {0, 3, 1, 4, 2};
    Grid3<std::int32_t> pa(a.extent()), pb(b.extent());
    for (std::size_t i = 0; i < a.size(); ++i) {
        pa[i] = perm[a[i]];
        pb[i] = perm[b[i]];
    }
    const auto p = dice_hard(make_labelmap(pa), make_labelmap(pb));
    for (std::int32_t l = 1; l <= 4; ++l) EXPECT_EQ(p.dice_per_label.at(perm[l]), ab.dice_per_label.at(l));
}

TEST(Dice, AbsentLabels) {
    const auto a = cube({8, 8, 8}, 2, 6, 1);
    const auto b = cube({8, 8, 8}, 2, 6, 2);
    LabelGroups g;
    g.subcortical = {1, 2, 5};
    const auto r = dice_hard(a, b, g);
    // present in one map only: scored 0, not skipped
    EXPECT_EQ(r.dice_per_label.at(1), 0.0);
    EXPECT_EQ(r.dice_per_label.at(2), 0.0);
    ASSERT_EQ(r.skipped_labels.size(), 1u);
    EXPECT_EQ(r.skipped_labels[0], 5);
    EXPECT_EQ(r.dice_subcortical_mean, 0.0);
}

TEST(Dice, GroupMeansAndMergedCortex) {
    // labels 3 and 4 form one hemisphere's cortex; 1 is subcortical
    Grid3<std::int32_t> ga({8, 8, 8}, 0), gb({8, 8, 8}, 0);
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                if (z < 2) ga.at(x, y, z) = gb.at(x, y, z) = 1;
                if (z >= 4) {
                    ga.at(x, y, z) = x < 4 ? 3 : 4;
                    gb.at(x, y, z) = x < 5 ? 3 : 4; // parcels disagree, cortex as a whole does not
                }
            }
    LabelGroups g;
    g.subcortical = {1};
    g.cortical = {{"lh", {3, 4}}};
    const auto r = dice_hard(make_labelmap(ga), make_labelmap(gb), g);
    EXPECT_EQ(r.dice_subcortical_mean, 1.0);
    EXPECT_EQ(r.dice_cc, 1.0);
    const double d3 = 2.0 * 4 / (4 + 5), d4 = 2.0 * 3 / (4 + 3);
    EXPECT_DOUBLE_EQ(r.dice_per_label.at(3), d3);
    EXPECT_DOUBLE_EQ(r.dice_cortical_mean, (d3 + d4) / 2);
    EXPECT_DOUBLE_EQ(r.dice_mean, (1.0 + d3 + d4) / 3);
    // without groups every label counts as subcortical
    const auto n = dice_hard(make_labelmap(ga), make_labelmap(gb));
    EXPECT_EQ(n.dice_subcortical_mean, n.dice_mean);
    EXPECT_TRUE(std::isnan(n.dice_cc));
}

TEST(Dice, ExtentMismatch) {
    EXPECT_THROW(dice_hard(random_labels({4, 4, 4}, 2, 1), random_labels({4, 4, 5}, 2, 1)), InputError);
}

TEST(Evaluate, IdentityAndTranslation) {
    const Extent3 e{16, 16, 16};
    const auto c = cube(e, 4, 12);
    auto r = evaluate(identity_field(e), c, c);
    EXPECT_EQ(r.dice_per_label.at(1), 1.0);
    EXPECT_EQ(r.pct_folds, 0.0);
    EXPECT_EQ(r.sd_log_detj, 0.0);

    r = evaluate(DeformationField3{Grid3<Vec3>(e, {1, 0, 0})}, c, c);
    EXPECT_DOUBLE_EQ(r.dice_per_label.at(1), 0.875);
    EXPECT_EQ(r.pct_folds, 0.0);
}

TEST(Evaluate, IdentityReproducesDice) {
    const auto a = random_labels({8, 8, 8}, 3, 7), b = random_labels({8, 8, 8}, 3, 8);
    const auto r = evaluate(identity_field(a.extent()), a, b);
    EXPECT_EQ(r.dice_per_label, dice_hard(a, b).dice_per_label);
}

TEST(Evaluate, ReflectionReportsFolds) {
    const Extent3 e{8, 8, 8};
    DeformationField3 f{Grid3<Vec3>(e)};
    for (std::size_t i = 0; i < f.u.size(); ++i) f.u[i] = {-2 * voxel_position(e, i).x + 7, 0, 0};
    const auto c = cube(e, 2, 6);
    const auto r = evaluate(f, c, c);
    EXPECT_EQ(r.pct_folds, 100.0);
    EXPECT_EQ(r.dice_per_label.at(1), 1.0); // the cube is symmetric under x -> 7 - x
}
