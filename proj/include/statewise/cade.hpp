#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cade_model.hpp"
#include "model.hpp"
#include "policy.hpp"
#include "record.hpp"
#include "rng.hpp"

namespace statewise {

// --- regeneration splitting ---------------------------------------------------
// Returns to a fixed queue-length state are regeneration times of the embedded
// chain (the next event type is drawn from the state alone, independently of
// history), so the stretches between consecutive visits are i.i.d. chunks.
// Interior chunks alternate train/eval; the partial stretches before the first
// visit and after the last go to train.

struct RegenerationSplit {
    int anchor = 0;                  // queue-state index the chunks regenerate at
    std::vector<int> boundaries;     // record indices observed at the anchor
    std::vector<int> train_idx;      // record indices, ascending
    std::vector<int> eval_idx;
    int n_interior_chunks = 0;
};

struct SplitOptions {
    int anchor = -1;                 // -1: most-visited queue state
    int min_anchor_visits = 4;
    bool random_assignment = false;  // default: deterministic alternation
    std::uint64_t seed = 0;
};

inline RegenerationSplit regeneration_split(const SystemSpec& spec,
                                            const std::vector<EventRecord>& records,
                                            const SplitOptions& opt = {}) {
    if (records.empty()) throw std::invalid_argument("regeneration_split: empty trajectory");
    const int nq = spec.n_queue_states();
    std::vector<int> counts(static_cast<size_t>(nq), 0);
    for (const EventRecord& e : records) counts[static_cast<size_t>(spec.state_index(e.k0, e.k1))]++;

    RegenerationSplit split;
    if (opt.anchor >= 0) {
        if (opt.anchor >= nq)
            throw std::invalid_argument("regeneration_split: anchor state outside the spec");
        split.anchor = opt.anchor;
    } else {
        split.anchor = static_cast<int>(
            std::max_element(counts.begin(), counts.end()) - counts.begin());
    }

    const int n = static_cast<int>(records.size());
    for (int i = 0; i < n; ++i) {
        const EventRecord& e = records[static_cast<size_t>(i)];
        if (spec.state_index(e.k0, e.k1) == split.anchor) split.boundaries.push_back(i);
    }
    if (static_cast<int>(split.boundaries.size()) < opt.min_anchor_visits)
        throw std::runtime_error("regeneration_split: anchor state " +
                                 spec.state_label(split.anchor) + " visited only " +
                                 std::to_string(split.boundaries.size()) + " times (need " +
                                 std::to_string(opt.min_anchor_visits) + ")");

    const int m = static_cast<int>(split.boundaries.size());
    split.n_interior_chunks = m - 1;
    Rng rng(mix_seed(opt.seed, 0x5917));
    auto push_range = [&](std::vector<int>& side, int lo, int hi) {
        for (int i = lo; i < hi; ++i) side.push_back(i);
    };
    push_range(split.train_idx, 0, split.boundaries.front());  // leading partial
    for (int j = 0; j + 1 < m; ++j) {
        const bool to_train = opt.random_assignment ? rng.bernoulli(0.5) : (j % 2 == 0);
        push_range(to_train ? split.train_idx : split.eval_idx, split.boundaries[static_cast<size_t>(j)],
                   split.boundaries[static_cast<size_t>(j + 1)]);
    }
    push_range(split.train_idx, split.boundaries.back(), n);  // trailing partial
    return split;
}

// --- type-1 quantiles and threshold construction -------------------------------

// Smallest sample value whose empirical CDF reaches `level` (inverse-CDF /
// type-1 convention). Input must be sorted ascending.
inline double quantile_type1(const std::vector<double>& sorted, double level) {
    if (sorted.empty()) throw std::invalid_argument("quantile_type1: empty sample");
    if (!(level >= 0.0 && level <= 1.0))
        throw std::invalid_argument("quantile_type1: level outside [0, 1]");
    const int n = static_cast<int>(sorted.size());
    // Guard against 1 - g producing values like 0.7000000000000001.
    int h = static_cast<int>(std::ceil(level * n - 1e-9));
    h = std::max(1, std::min(h, n));
    return sorted[static_cast<size_t>(h - 1)];
}

struct ThresholdAt {
    double c = 0.0;  // cutoff
    double p = 0.0;  // treatment probability on exact ties
};

// Cutoff and tie mass so that the treated share over the sample is exactly g:
// c is the (1-g) type-1 quantile; with q1 = P(pred > c) and q2 = P(pred >= c),
// the tie mass p = (g - q1)/(q2 - q1) interpolates across the atom at c.
inline ThresholdAt threshold_from_sorted(const std::vector<double>& sorted, double g) {
    if (!(g > 0.0 && g < 1.0))
        throw std::invalid_argument("threshold_from_sorted: g must lie strictly in (0, 1)");
    const int n = static_cast<int>(sorted.size());
    ThresholdAt th;
    th.c = quantile_type1(sorted, 1.0 - g);
    // Count strictly-above and at-or-above via binary search on the sorted sample.
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), th.c);
    const auto hi = std::upper_bound(sorted.begin(), sorted.end(), th.c);
    const double q1 = static_cast<double>(sorted.end() - hi) / n;
    const double q2 = static_cast<double>(sorted.end() - lo) / n;
    if (q2 > q1) th.p = std::clamp((g - q1) / (q2 - q1), 0.0, 1.0);
    return th;
}

// Effect predictions of `model` over a shared reference covariate sample,
// evaluated at every queue state and sorted ascending. This is the quantile
// basis for threshold policies and the treated-share table for plug-ins.
struct StatePredictions {
    std::vector<std::vector<double>> sorted;  // per queue state
};

inline StatePredictions predict_reference(const SystemSpec& spec, const CadeModel& model,
                                          const std::vector<std::vector<double>>& ref_x) {
    if (ref_x.empty()) throw std::invalid_argument("predict_reference: empty reference sample");
    const int nq = spec.n_queue_states();
    StatePredictions sp;
    sp.sorted.resize(static_cast<size_t>(nq));
    for (int q = 0; q < nq; ++q) {
        if (!spec.arrivals_possible(q)) continue;  // no thresholds needed there
        auto& preds = sp.sorted[static_cast<size_t>(q)];
        preds.reserve(ref_x.size());
        for (const auto& x : ref_x) preds.push_back(model.tau(x, q));
        std::sort(preds.begin(), preds.end());
    }
    return sp;
}

// Threshold policy treating (up to ties) the top g_s share of predicted
// effects at each state, quantiles taken over the reference predictions.
inline PolicySpec threshold_policy_from_predictions(const SystemSpec& spec, CadeModelPtr model,
                                                    const StatePredictions& sp,
                                                    const std::vector<double>& g) {
    const int nq = spec.n_queue_states();
    if (g.size() != static_cast<size_t>(nq))
        throw std::invalid_argument("threshold policy: g needs one entry per queue state");
    PolicySpec ps;
    ps.kind = PolicyKind::Threshold;
    ps.model = std::move(model);
    ps.c.assign(static_cast<size_t>(nq), 0.0);
    ps.p.assign(static_cast<size_t>(nq), 0.0);
    ps.g = g;
    for (int q = 0; q < nq; ++q) {
        if (!spec.arrivals_possible(q)) continue;
        if (sp.sorted[static_cast<size_t>(q)].empty()) {
            // No reference predictions at this state: fall back to never-treat.
            // The plug-in flags such states through its rate machinery.
            ps.c[static_cast<size_t>(q)] = std::numeric_limits<double>::infinity();
            ps.p[static_cast<size_t>(q)] = 0.0;
            continue;
        }
        const ThresholdAt th = threshold_from_sorted(sp.sorted[static_cast<size_t>(q)],
                                                     g[static_cast<size_t>(q)]);
        ps.c[static_cast<size_t>(q)] = th.c;
        ps.p[static_cast<size_t>(q)] = th.p;
    }
    return ps;
}

inline PolicySpec make_threshold_policy(const SystemSpec& spec, CadeModelPtr model,
                                        const std::vector<std::vector<double>>& ref_x,
                                        const std::vector<double>& g) {
    const StatePredictions sp = predict_reference(spec, *model, ref_x);
    return threshold_policy_from_predictions(spec, std::move(model), sp, g);
}

// Treated share the policy induces over a reference prediction table; for
// threshold policies built from the same table this equals g exactly.
inline std::vector<double> treated_share_from_predictions(const SystemSpec& spec,
                                                          const PolicySpec& ps,
                                                          const StatePredictions& sp) {
    const int nq = spec.n_queue_states();
    std::vector<double> share(static_cast<size_t>(nq), 0.0);
    for (int q = 0; q < nq; ++q) {
        const auto& preds = sp.sorted[static_cast<size_t>(q)];
        if (preds.empty()) continue;
        const int n = static_cast<int>(preds.size());
        if (ps.kind == PolicyKind::Direct) {
            const auto hi = std::upper_bound(preds.begin(), preds.end(), 0.0);
            share[static_cast<size_t>(q)] = static_cast<double>(preds.end() - hi) / n;
        } else if (ps.kind == PolicyKind::Threshold) {
            const double c = ps.c[static_cast<size_t>(q)];
            const auto lo = std::lower_bound(preds.begin(), preds.end(), c);
            const auto hi = std::upper_bound(preds.begin(), preds.end(), c);
            const double q1 = static_cast<double>(preds.end() - hi) / n;
            const double q2 = static_cast<double>(preds.end() - lo) / n;
            share[static_cast<size_t>(q)] = q1 + ps.p[static_cast<size_t>(q)] * (q2 - q1);
        } else {
            throw std::invalid_argument("treated_share_from_predictions: effect-based policies only");
        }
    }
    return share;
}

}  // namespace statewise
