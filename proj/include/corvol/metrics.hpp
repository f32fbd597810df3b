// metrics.hpp - hard-label Dice with cortical/subcortical grouping, and the post-registration
// evaluation (nearest-neighbour label warp + Jacobian statistics).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "volume.hpp"

namespace corvol {

// Caller-supplied partition of label ids. Cortical labels are listed per hemisphere so the merged
// cortex Dice can be computed per hemisphere.
struct LabelGroups {
    std::vector<std::int32_t> subcortical;
    std::vector<std::pair<std::string, std::vector<std::int32_t>>> cortical;

    bool empty() const { return subcortical.empty() && cortical.empty(); }
};

struct MetricReport {
    std::map<std::int32_t, double> dice_per_label;
    std::vector<std::int32_t> skipped_labels; // absent from both maps
    double dice_mean = std::numeric_limits<double>::quiet_NaN();
    double dice_cortical_mean = std::numeric_limits<double>::quiet_NaN();
    double dice_subcortical_mean = std::numeric_limits<double>::quiet_NaN();
    double dice_cc = std::numeric_limits<double>::quiet_NaN();
    double pct_folds = 0.0;
    double sd_log_detj = 0.0;
    std::size_t detj_clamped = 0;
};

inline double dice_from_counts(std::size_t a, std::size_t b, std::size_t inter) {
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

namespace detail {
inline double mean_of(const std::vector<double> &v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

template <class Pred> std::pair<bool, double> merged_dice(const LabelMap3 &a, const LabelMap3 &b, Pred in_class) {
    std::size_t na = 0, nb = 0, ni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool pa = in_class(a[i]), pb = in_class(b[i]);
        na += pa;
        nb += pb;
        ni += pa && pb;
    }
    if (na + nb == 0) return {false, 0.0};
    return {true, dice_from_counts(na, nb, ni)};
}
} // namespace detail

// Per-label Dice over the union of both label sets and the group lists. A label present in only one
// map scores 0; labels present in neither are skipped. Without groups every label is subcortical.
inline MetricReport dice_hard(const LabelMap3 &a, const LabelMap3 &b, const LabelGroups &groups = {}) {
    if (!(a.extent() == b.extent())) {
        throw InputError("dice_hard: extent mismatch " + to_string(a.extent()) + " vs " + to_string(b.extent()));
    }
    std::vector<std::int32_t> labels = a.label_set;
    labels.insert(labels.end(), b.label_set.begin(), b.label_set.end());
    labels.insert(labels.end(), groups.subcortical.begin(), groups.subcortical.end());
    for (const auto &[hemi, ids] : groups.cortical) labels.insert(labels.end(), ids.begin(), ids.end());
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    labels.erase(std::remove(labels.begin(), labels.end(), 0), labels.end());

    struct Tally {
        std::size_t a = 0, b = 0, inter = 0;
    };
    std::map<std::int32_t, Tally> tally;
    for (auto l : labels) tally[l];
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto la = a[i], lb = b[i];
        if (la != 0) {
            auto it = tally.find(la);
            if (it != tally.end()) ++it->second.a;
        }
        if (lb != 0) {
            auto it = tally.find(lb);
            if (it != tally.end()) ++it->second.b;
        }
        if (la != 0 && la == lb) {
            auto it = tally.find(la);
            if (it != tally.end()) ++it->second.inter;
        }
    }

    MetricReport rep;
    std::vector<double> all;
    for (const auto &[l, t] : tally) {
        if (t.a + t.b == 0) {
            rep.skipped_labels.push_back(l);
            continue;
        }
        const double d = dice_from_counts(t.a, t.b, t.inter);
        rep.dice_per_label[l] = d;
        all.push_back(d);
    }
    rep.dice_mean = detail::mean_of(all);

    auto group_mean = [&](const std::vector<std::int32_t> &ids) {
        std::vector<double> v;
        for (auto l : ids) {
            auto it = rep.dice_per_label.find(l);
            if (it != rep.dice_per_label.end()) v.push_back(it->second);
        }
        return detail::mean_of(v);
    };
    if (groups.empty()) {
        rep.dice_subcortical_mean = rep.dice_mean;
        return rep;
    }
    rep.dice_subcortical_mean = group_mean(groups.subcortical);
    std::vector<std::int32_t> cortical_ids;
    std::vector<double> cc;
    for (const auto &[hemi, ids] : groups.cortical) {
        cortical_ids.insert(cortical_ids.end(), ids.begin(), ids.end());
        std::vector<std::int32_t> sorted = ids;
        std::sort(sorted.begin(), sorted.end());
        const auto [present, d] = detail::merged_dice(a, b, [&](std::int32_t l) {
            return l != 0 && std::binary_search(sorted.begin(), sorted.end(), l);
        });
        if (present) cc.push_back(d);
    }
    rep.dice_cortical_mean = group_mean(cortical_ids);
    rep.dice_cc = detail::mean_of(cc);
    return rep;
}

// Warps the moving labels by phi (nearest neighbour), scores them against the fixed labels and
// attaches the Jacobian statistics of phi.
inline MetricReport evaluate(const DeformationField3 &phi, const LabelMap3 &moving_labels, const LabelMap3 &fixed_labels,
                             const LabelGroups &groups = {}) {
    check_same_extent(phi.extent(), moving_labels.extent(), "evaluate (moving labels)");
    check_same_extent(phi.extent(), fixed_labels.extent(), "evaluate (fixed labels)");
    const LabelMap3 warped = warp_labels(moving_labels, phi);
    MetricReport rep = dice_hard(warped, fixed_labels, groups);
    const auto js = jacobian_stats(phi);
    rep.pct_folds = js.pct_folds;
    rep.sd_log_detj = js.sd_log_abs_detj;
    rep.detj_clamped = js.clamped;
    return rep;
}

} // namespace corvol
